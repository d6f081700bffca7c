//! Analytic multiply-accumulate accounting for layer forwards.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Parameter and multiply-accumulate counts of one layer application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerStats {
    pub params: u64,
    pub macs: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_stats(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    groups: usize,
    bias: bool,
    out_h: usize,
    out_w: usize,
) -> LayerStats {
    let per_out = (in_channels / groups * kernel * kernel) as u64;
    LayerStats {
        params: out_channels as u64 * per_out + if bias { out_channels as u64 } else { 0 },
        macs: out_channels as u64 * per_out * (out_h * out_w) as u64,
    }
}

pub fn linear_stats(in_features: usize, out_features: usize, bias: bool) -> LayerStats {
    LayerStats {
        params: (in_features * out_features + if bias { out_features } else { 0 }) as u64,
        macs: (in_features * out_features) as u64,
    }
}

pub(crate) fn record_macs(n: u64) {
    MACS.with(|m| {
        if let Some(v) = m.get() {
            m.set(Some(v + n));
        }
    });
}

/// Runs `f` and returns its result together with the MACs recorded by layer forwards on this thread.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = MACS.with(|m| m.replace(Some(0)));
    let out = f();
    let total = MACS.with(|m| m.replace(prev)).unwrap_or(0);
    (out, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_conv_formula() {
        let s = conv2d_stats(256, 512, 1, 1, true, 20, 20);
        assert_eq!(s.params, 256 * 512 + 512);
        assert_eq!(s.macs, 256 * 512 * 400);
    }

    #[test]
    fn counter_nests() {
        let (_, outer) = count_macs(|| {
            record_macs(5);
            let (_, inner) = count_macs(|| record_macs(7));
            assert_eq!(inner, 7);
        });
        assert_eq!(outer, 5);
        record_macs(100);
    }
}
