//! Cross-domain PK identity sampling.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{Domain, ImageRecord, Split};
use crate::error::{MmflError, Result};

/// Derives an independent stream seed from a base seed and a tuple of indices.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    // splitmix64 finalizer over each component
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// One sampled batch: record indices grouped by identity, K consumer then K shop each.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub pids: Vec<u64>,
    pub domains: Vec<Domain>,
    pub num_identities: usize,
    pub images_per_identity: usize,
    /// Some identity had fewer than K images in a domain and was sampled with replacement.
    pub with_replacement: bool,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Checks the batch composition contract for identity count `p + 1` and `k` per domain.
    pub fn check_composition(&self, p: usize, k: usize) -> Result<()> {
        let expect = 2 * (p + 1) * k;
        if self.len() != expect {
            return Err(MmflError::Shape(format!(
                "batch has {} images, expected {expect}",
                self.len()
            )));
        }
        let mut counts: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
        for (pid, dom) in self.pids.iter().zip(&self.domains) {
            let e = counts.entry(*pid).or_default();
            match dom {
                Domain::Consumer => e.0 += 1,
                Domain::Shop => e.1 += 1,
            }
        }
        if counts.len() != p + 1 {
            return Err(MmflError::Shape(format!(
                "batch has {} identities, expected {}",
                counts.len(),
                p + 1
            )));
        }
        if let Some((pid, c)) = counts.iter().find(|(_, c)| **c != (k, k)) {
            return Err(MmflError::Shape(format!(
                "pid {pid} has {} consumer / {} shop images, expected {k}/{k}",
                c.0, c.1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Identity {
    pid: u64,
    consumer: Vec<usize>,
    shop: Vec<usize>,
}

/// Samples `p + 1` identities per batch, each with `k` consumer and `k` shop images.
#[derive(Debug, Clone)]
pub struct PkSampler {
    identities: Vec<Identity>,
    p: usize,
    k: usize,
    seed: u64,
}

impl PkSampler {
    /// Builds a sampler over the `train` split of `records`.
    pub fn new(records: &[ImageRecord], p: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(MmflError::Config("K must be at least 1".into()));
        }
        let mut by_pid: BTreeMap<u64, Identity> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.split != Split::Train {
                continue;
            }
            let ident = by_pid.entry(r.pid).or_insert_with(|| Identity {
                pid: r.pid,
                consumer: Vec::new(),
                shop: Vec::new(),
            });
            match r.domain {
                Domain::Consumer => ident.consumer.push(i),
                Domain::Shop => ident.shop.push(i),
            }
        }
        let identities: Vec<Identity> = by_pid
            .into_values()
            .filter(|id| !id.consumer.is_empty() && !id.shop.is_empty())
            .collect();
        if identities.len() < p + 1 {
            return Err(MmflError::Config(format!(
                "PK sampling needs at least {} identities with both consumer and shop images, found {}",
                p + 1,
                identities.len()
            )));
        }
        Ok(Self {
            identities,
            p,
            k,
            seed,
        })
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn batch_size(&self) -> usize {
        2 * (self.p + 1) * self.k
    }

    /// Batches per epoch; every identity appears at least once per epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.identities.len().div_ceil(self.p + 1)
    }

    /// The full, deterministic list of batches for `epoch`.
    pub fn epoch(&self, epoch: usize) -> Vec<BatchPlan> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[epoch as u64]));
        let group = self.p + 1;
        let mut order: Vec<usize> = (0..self.identities.len()).collect();
        order.shuffle(&mut rng);

        let mut plans = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(group) {
            let mut members = chunk.to_vec();
            if members.len() < group {
                let mut rest: Vec<usize> = (0..self.identities.len())
                    .filter(|i| !members.contains(i))
                    .collect();
                rest.shuffle(&mut rng);
                members.extend(rest.into_iter().take(group - chunk.len()));
            }
            plans.push(self.plan_for(&members, &mut rng));
        }
        if plans.iter().any(|b| b.with_replacement) {
            log::warn!(
                "epoch {epoch}: some identities have fewer than {} images per domain; sampled with replacement",
                self.k
            );
        }
        plans
    }

    fn plan_for(&self, members: &[usize], rng: &mut ChaCha8Rng) -> BatchPlan {
        let mut plan = BatchPlan {
            indices: Vec::with_capacity(self.batch_size()),
            pids: Vec::with_capacity(self.batch_size()),
            domains: Vec::with_capacity(self.batch_size()),
            num_identities: members.len(),
            images_per_identity: 2 * self.k,
            with_replacement: false,
        };
        for &m in members {
            let ident = &self.identities[m];
            for (pool, domain) in [(&ident.consumer, Domain::Consumer), (&ident.shop, Domain::Shop)] {
                let picked: Vec<usize> = if pool.len() >= self.k {
                    pool.choose_multiple(rng, self.k).copied().collect()
                } else {
                    plan.with_replacement = true;
                    (0..self.k).map(|_| *pool.choose(rng).unwrap()).collect()
                };
                for idx in picked {
                    plan.indices.push(idx);
                    plan.pids.push(ident.pid);
                    plan.domains.push(domain);
                }
            }
        }
        plan
    }
}
