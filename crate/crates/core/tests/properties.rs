mod common;

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use common::*;
use mmfl::backbone::{stage_sizes, Backbone};
use mmfl::branches::{select_top_k, Eca, Lras, Orientation, PartBranch};
use mmfl::config::{BranchConfig, ModelConfig};
use mmfl::data::imageops::pad_geometry;
use mmfl::data::{pad_resize, Domain, ImageRecord, PkSampler, Split};
use mmfl::eval::{
    build_index, compute_cmc_map, cosine_distance, rank_ascending, rerank_from_joint, DistanceMatrix, EmbeddingStore,
    RerankParams,
};
use mmfl::jarn::inference_embed;
use mmfl::losses::{center_loss, lsr_per_sample, ce_per_sample, trihard_loss};
use mmfl::nn::layers::l2_normalize;
use mmfl::nn::ParamStore;
use mmfl::settings::{resolve, RunConfig};
use mmfl::sffp::FusionNodeWeights;
use mmfl::train::lr_at;
use proptest::prelude::*;

fn cpu() -> Device {
    Device::Cpu
}

fn unit_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f32>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let v = normal_vec(&mut r, d);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect()
}

fn records(counts: &[(usize, usize)]) -> Vec<ImageRecord> {
    let mut out = Vec::new();
    for (pid, &(c, s)) in counts.iter().enumerate() {
        for (domain, n) in [(Domain::Consumer, c), (Domain::Shop, s)] {
            for i in 0..n {
                out.push(ImageRecord {
                    image_path: format!("{pid}_{domain}_{i}.png"),
                    pid: pid as u64,
                    domain,
                    split: Split::Train,
                    attributes: None,
                    bbox: None,
                });
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampler_batches_follow_the_contract(
        counts in prop::collection::vec((1usize..6, 1usize..6), 2..12),
        p in 0usize..4,
        k in 1usize..5,
        seed in any::<u64>(),
        epoch in 0usize..5,
    ) {
        prop_assume!(counts.len() > p);
        let recs = records(&counts);
        let sampler = PkSampler::new(&recs, p, k, seed).unwrap();
        let plans = sampler.epoch(epoch);
        prop_assert_eq!(plans.len(), sampler.batches_per_epoch());
        let mut seen = BTreeSet::new();
        for plan in &plans {
            prop_assert!(plan.check_composition(p, k).is_ok());
            prop_assert_eq!(plan.len(), 2 * (p + 1) * k);
            let distinct: BTreeSet<u64> = plan.pids.iter().copied().collect();
            prop_assert_eq!(distinct.len(), p + 1);
            seen.extend(distinct);
        }
        prop_assert_eq!(seen.len(), counts.len());
        prop_assert_eq!(plans, sampler.epoch(epoch));
    }

    #[test]
    fn pad_resize_keeps_aspect(h in 1u32..400, w in 1u32..400, s in 8u32..128) {
        let g = pad_geometry(h, w, s);
        prop_assert!(g.content_h <= s && g.content_w <= s);
        prop_assert!(g.content_h == s || g.content_w == s);
        // content aspect matches the input within one pixel of rounding
        let expect_w = g.content_h as f64 * w as f64 / h as f64;
        let expect_h = g.content_w as f64 * h as f64 / w as f64;
        prop_assert!((g.content_w as f64 - expect_w).abs() <= 1.0 || (g.content_h as f64 - expect_h).abs() <= 1.0);
        prop_assert!(g.pad_top + g.content_h <= s && g.pad_left + g.content_w <= s);
    }

    #[test]
    fn pad_resize_output_is_square(h in 1u32..60, w in 1u32..60, s in 8usize..48) {
        let img = image::RgbImage::from_pixel(w, h, image::Rgb([200, 10, 10]));
        let out = pad_resize(&img, s, [0, 0, 0]).unwrap();
        prop_assert_eq!(out.dimensions(), (s as u32, s as u32));
    }

    #[test]
    fn fusion_weights_are_a_partition(raw in prop::collection::vec(-2.0f64..3.0, 2..4), eps in 1e-6f64..1e-2) {
        let mut ps = ParamStore::new(DType::F64, cpu(), 0);
        let w = FusionNodeWeights::new(&mut ps, "w", raw.len(), eps).unwrap();
        w.raw.set(&Tensor::from_vec(raw.clone(), raw.len(), &cpu()).unwrap()).unwrap();
        let eff = w.effective().unwrap().to_vec1::<f64>().unwrap();
        prop_assert!(eff.iter().all(|&v| v >= 0.0));
        let sum: f64 = eff.iter().sum();
        let relu: f64 = raw.iter().map(|v| v.max(0.0)).sum();
        let scale = 1.0 / (relu + eps);
        prop_assert!(sum <= 1.0 + 1e-12);
        prop_assert!(sum >= 1.0 - eps * scale - 1e-12);
    }

    #[test]
    fn eca_and_lras_masks_are_bounded(seed in any::<u64>(), c in 4usize..20, hw in 1usize..4, scale in 0.1f64..3.0) {
        let mut r = rng(seed);
        let mut ps = ParamStore::new(DType::F64, cpu(), seed);
        let eca = Eca::new(&mut ps, "eca", c).unwrap();
        let cfg = BranchConfig { embed_dim: 4, lras_width: 4, lras_top_k: 2 };
        let lras = Lras::new(&mut ps, "lras", c, &cfg).unwrap();
        ps.randomize(seed ^ 1, 0.5).unwrap();
        let x = (randn(&mut r, (2, c, hw, hw)) * scale).unwrap();
        for row in rows(&eca.mask(&x).unwrap()) {
            prop_assert!(row.iter().all(|&m| m > 0.0 && m < 1.0));
        }
        let out = lras.forward(&x, true).unwrap();
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let (m, t, f) = (flat(&out.mask), flat(&out.trunk), flat(&out.fused));
        prop_assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for ((&fv, &tv), _) in f.iter().zip(&t).zip(&m) {
            prop_assert!(fv.abs() <= 2.0 * tv.abs() + 1e-12);
        }
        for sel in &out.selected {
            let distinct: BTreeSet<usize> = sel.iter().copied().collect();
            prop_assert_eq!(distinct.len(), cfg.lras_top_k);
        }
    }

    #[test]
    fn constant_input_gives_equal_part_slices(v in -3.0f64..3.0, c in 2usize..8, h in 2usize..6, w in 2usize..6) {
        let x = Tensor::full(v, (3, c, h, w), &cpu()).unwrap();
        let mut ps = ParamStore::new(DType::F64, cpu(), 0);
        for (name, o) in [("ph", Orientation::Horizontal), ("pv", Orientation::Vertical)] {
            let branch = PartBranch::new(&mut ps, name, o, c, 4).unwrap();
            let [a, b] = branch.pool(&x).unwrap();
            prop_assert_eq!(rows(&a), rows(&b));
        }
    }

    #[test]
    fn top_k_is_distinct_and_ordered(scores in prop::collection::vec(-3i32..3, 1..30), k in 1usize..30) {
        prop_assume!(k <= scores.len());
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let sel = select_top_k(&s, k).unwrap();
        let distinct: BTreeSet<usize> = sel.iter().copied().collect();
        prop_assert_eq!(distinct.len(), k);
        for w in sel.windows(2) {
            prop_assert!(s[w[0]] > s[w[1]] || (s[w[0]] == s[w[1]] && w[0] < w[1]));
        }
        let cutoff = s[*sel.last().unwrap()];
        for (i, &v) in s.iter().enumerate() {
            if !distinct.contains(&i) {
                prop_assert!(v < cutoff || (v == cutoff && i > *sel.last().unwrap()));
            }
        }
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), p in 2usize..5, k in 1usize..4, d in 2usize..8) {
        let mut r = rng(seed);
        let pids = block_pids(p, k);
        let n = pids.len();
        let f = randn(&mut r, (n, d));
        prop_assert!(scalar(&trihard_loss(&f, &pids, 0.3).unwrap()) >= 0.0);
        let labels: Vec<usize> = pids.iter().map(|&p| p as usize).collect();
        let c = randn(&mut r, (p, d));
        prop_assert!(scalar(&center_loss(&f, &labels, &c).unwrap()) >= 0.0);
        let z = (randn(&mut r, (n, 5)) * 4.0).unwrap();
        let t: Vec<usize> = (0..n).map(|i| i % 5).collect();
        for v in rows(&lsr_per_sample(&z, &t, 0.1).unwrap().unsqueeze(1).unwrap()) {
            prop_assert!(v[0] >= 0.0);
        }
        for v in rows(&ce_per_sample(&z, &t).unwrap().unsqueeze(1).unwrap()) {
            prop_assert!(v[0] >= 0.0);
        }
    }

    #[test]
    fn trihard_is_zero_iff_every_margin_holds(seed in any::<u64>(), spread in 0.0f64..6.0, margin in 0.0f64..0.6) {
        let mut r = rng(seed);
        let pids = block_pids(3, 3);
        let centres: Vec<Vec<f64>> = (0..3).map(|_| normal_vec(&mut r, 4)).collect();
        let feats: Vec<Vec<f64>> = pids
            .iter()
            .map(|&p| {
                let noise = normal_vec(&mut r, 4);
                centres[p as usize].iter().zip(noise).map(|(c, e)| c * spread + e * 0.3).collect()
            })
            .collect();
        let hinges = anchor_hinges(&feats, &pids, margin);
        prop_assume!(hinges.iter().all(|h| h.abs() > 1e-9));
        let t = Tensor::from_vec(feats.concat(), (9, 4), &cpu()).unwrap();
        let loss = scalar(&trihard_loss(&t, &pids, margin).unwrap());
        prop_assert_eq!(loss == 0.0, hinges.iter().all(|&h| h < 0.0));
    }

    #[test]
    fn trihard_ignores_feature_scale(seed in any::<u64>(), s in 0.01f64..100.0) {
        let mut r = rng(seed);
        let pids = block_pids(3, 2);
        let f = randn(&mut r, (6, 5));
        let a = scalar(&trihard_loss(&f, &pids, 0.3).unwrap());
        let b = scalar(&trihard_loss(&(&f * s).unwrap(), &pids, 0.3).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn normalized_features_have_unit_norm(seed in any::<u64>(), d in 1usize..64, scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let f = (randn(&mut r, (4, d)) * scale).unwrap();
        for row in rows(&l2_normalize(&f).unwrap()) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn inference_embedding_is_unit_and_permutation_consistent(seed in any::<u64>(), h in 1usize..8) {
        let mut r = rng(seed);
        let parts: Vec<Tensor> = (0..4).map(|_| randn(&mut r, (3, h))).collect();
        let e = rows(&inference_embed(&parts, true).unwrap());
        for row in &e {
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-6);
        }
        let permuted: Vec<Tensor> = [2, 0, 3, 1].iter().map(|&i| parts[i].clone()).collect();
        let ep = rows(&inference_embed(&permuted, true).unwrap());
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((dot(&e[i], &e[j]) - dot(&ep[i], &ep[j])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cmc_is_monotone_and_bounds_map(seed in any::<u64>(), q in 1usize..10, g in 1usize..15, extra in 0usize..5) {
        // mAP <= Acc@k_max only holds once k_max reaches the gallery size
        let k_max = g + extra;
        let mut r = rng(seed);
        let dist = DistanceMatrix::from_fn(q, g, |_, _| 0.0);
        let data: Vec<f64> = (0..q * g).map(|_| (normal_vec(&mut r, 1)[0] * 2.0).round()).collect();
        let dist = DistanceMatrix { data, ..dist };
        let qp: Vec<u64> = (0..q as u64).map(|i| i % 3).collect();
        let gp: Vec<u64> = (0..g as u64).map(|i| (i * 7 + seed) % 4).collect();
        let res = compute_cmc_map(&dist, &qp, &gp, k_max).unwrap();
        prop_assert!(res.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(res.map <= *res.cmc.last().unwrap() + 1e-12);
        prop_assert!((0.0..=1.0).contains(&res.map));
    }

    #[test]
    fn cosine_and_euclidean_rank_alike(seed in any::<u64>(), n in 2usize..20, d in 2usize..10) {
        let pts = unit_rows(seed, n + 1, d);
        let q = &pts[0];
        let cos: Vec<f64> = pts[1..].iter().map(|p| cosine_distance(q, p)).collect();
        let euc: Vec<f64> = pts[1..]
            .iter()
            .map(|p| q.iter().zip(p).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>())
            .collect();
        // skip draws where two candidates are closer than rounding can separate
        let mut sorted = cos.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-6));
        prop_assert_eq!(rank_ascending(&cos), rank_ascending(&euc));
    }

    #[test]
    fn lambda_one_rerank_keeps_order(seed in any::<u64>(), q in 1usize..4, g in 3usize..10) {
        let pts = unit_rows(seed, q + g, 3);
        let joint = DistanceMatrix::from_fn(q + g, q + g, |i, j| cosine_distance(&pts[i], &pts[j]));
        let k1 = 2 + (seed as usize % (g - 2));
        let out = rerank_from_joint(&joint, q, RerankParams { k1, k2: 1, lambda: 1.0 }).unwrap();
        for i in 0..q {
            prop_assert_eq!(out.ranking(i), rank_ascending(&joint.row(i)[q..]));
        }
    }

    #[test]
    fn index_assignments_are_nearest(seed in any::<u64>(), n in 2usize..50, clusters in 1usize..8) {
        prop_assume!(clusters <= n);
        let rows32 = unit_rows(seed, n, 4);
        let store = EmbeddingStore::from_rows(&rows32, &vec![0; n], true).unwrap();
        let idx = build_index(store, clusters, seed).unwrap();
        for (i, &a) in idx.assignments.iter().enumerate() {
            let d = |c: &Vec<f64>| rows32[i].iter().zip(c).map(|(&x, &y)| (x as f64 - y).powi(2)).sum::<f64>();
            let best = idx.centroids.iter().map(d).fold(f64::INFINITY, f64::min);
            prop_assert!(d(&idx.centroids[a]) <= best);
        }
    }

    #[test]
    fn store_rejects_non_unit_rows_when_normalized(v in prop::collection::vec(-2.0f32..2.0, 3)) {
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        prop_assume!((norm - 1.0).abs() > 1e-3);
        let mut s = EmbeddingStore::new(3, true);
        prop_assert!(s.push(&v, 0, Domain::Shop, "x").is_err());
    }

    #[test]
    fn lr_never_increases(base in 1e-6f64..1.0, m1 in 1usize..50, gap in 1usize..50, e in 0usize..150) {
        let m = [m1, m1 + gap];
        prop_assert!(lr_at(e + 1, base, &m, 0.1) <= lr_at(e, base, &m, 0.1));
    }

    #[test]
    fn overrides_beat_file_and_snapshot_replays(lr in 1e-5f64..1e-1, file_epochs in 25usize..60, seed in 0u64..1000) {
        let file = serde_json::json!({ "preset": "tiny", "train": { "epochs": file_epochs }, "optim": { "lr": 0.5 } });
        let overrides = vec![format!("optim.lr={lr}"), format!("seed={seed}")];
        let resolved = resolve(Some(&file), None, &overrides).unwrap();
        prop_assert_eq!(resolved.config.optim.lr, lr);
        prop_assert_eq!(resolved.config.train.epochs, file_epochs);
        prop_assert_eq!(resolved.config.seed, seed);
        let snap: serde_json::Value = serde_json::from_str(&resolved.snapshot().unwrap()).unwrap();
        let replay = resolve(Some(&snap), None, &[]).unwrap();
        prop_assert_eq!(replay.config, resolved.config);
    }
}

fn anchor_hinges(feats: &[Vec<f64>], pids: &[u64], margin: f64) -> Vec<f64> {
    let unit: Vec<Vec<f64>> = feats
        .iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    (0..unit.len())
        .map(|a| {
            let (mut pos, mut neg) = (0f64, f64::INFINITY);
            for b in 0..unit.len() {
                let d = dist(&unit[a], &unit[b]);
                if pids[a] == pids[b] {
                    pos = pos.max(d);
                } else {
                    neg = neg.min(d);
                }
            }
            pos - neg + margin
        })
        .collect()
}

#[test]
fn stage_sizes_follow_strides() {
    let cfg = ModelConfig::tiny();
    let mut ps = ParamStore::new(DType::F32, cpu(), 0);
    let bb = Backbone::new(&mut ps, "bb", &cfg.backbone).unwrap();
    let mut r = rng(0);
    for (h, w) in [(32, 32), (64, 32), (32, 96)] {
        let x = randn(&mut r, (1, 3, h, w)).to_dtype(DType::F32).unwrap();
        let pyr = bb.forward(&x, false).unwrap();
        for (stage, (sh, sw)) in pyr.stages().iter().zip(stage_sizes(h, w)) {
            let (_, _, th, tw) = stage.dims4().unwrap();
            assert_eq!((th, tw), (sh, sw));
        }
    }
    let bad = randn(&mut r, (1, 3, 100, 100)).to_dtype(DType::F32).unwrap();
    assert!(bb.forward(&bad, false).is_err());
}

#[test]
fn weight_decay_skips_norm_and_fusion_parameters() {
    let net = mmfl::MmflNet::new(
        &ModelConfig::tiny(),
        &mmfl::data::AttributeSchema::default(),
        4,
        0,
        DType::F32,
        &cpu(),
    )
    .unwrap();
    let mut kinds = std::collections::BTreeMap::new();
    for p in net.store.params() {
        *kinds.entry(format!("{:?}", p.kind)).or_insert(0) += 1;
        let is_norm = p.name.contains("bn") || p.name.contains(".ln") || p.name.contains("norm");
        if p.name.ends_with(".w") && p.name.contains("bifpn") || is_norm && !p.name.contains("conv") {
            assert!(!p.kind.decays(), "{} would decay", p.name);
        }
    }
    assert!(kinds.contains_key("Fusion") && kinds.contains_key("Norm") && kinds.contains_key("Weight"));
}

#[test]
fn tiny_preset_is_valid_and_full_dimensions_match() {
    RunConfig::tiny().validate().unwrap();
    let full = RunConfig::full();
    full.validate().unwrap();
    assert_eq!(full.model.metric_dim(), 1024);
    assert_eq!(full.data.p, 3);
    assert_eq!(full.data.k, 4);
}
