//! Stochastic co-activation sampling.
//!
//! During training each token draws a candidate pool size uniformly from
//! `[k_train, k_ideal]`, takes that many top-ranked experts as its pool, and
//! trains a uniformly random `k_train`-subset of the pool. Inference never
//! samples.

mod stream;

pub use stream::{derive_seed, Purpose, RngStream};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::moe::{subset_softmax, top_k_select, RoutingRecord};
use crate::numcore::softmax_slice;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElasticConfig {
    pub k_train: usize,
    pub k_ideal: usize,
    #[serde(default = "default_true")]
    pub sampling_enabled: bool,
}

fn default_true() -> bool {
    true
}

impl ElasticConfig {
    pub fn new(k_train: usize, k_ideal: usize) -> Self {
        Self {
            k_train,
            k_ideal,
            sampling_enabled: true,
        }
    }

    /// Checks `1 ≤ k_train ≤ k_ideal ≤ n_experts`.
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if self.k_train == 0 || self.k_train > self.k_ideal || self.k_ideal > n_experts {
            return Err(Error::Config(format!(
                "need 1 <= k_train ({}) <= k_ideal ({}) <= N ({n_experts})",
                self.k_train, self.k_ideal
            )));
        }
        Ok(())
    }
}

/// Identifies the per-token streams used by [`emoe_route`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleKey {
    pub seed: u64,
    pub step: u64,
    pub token: u64,
}

impl SampleKey {
    pub fn stream(&self, purpose: Purpose) -> RngStream {
        RngStream::new(self.seed, purpose, self.step, self.token)
    }
}

/// Candidate pool size, uniform on `[k_train, k_ideal]`.
pub fn sample_pool_size(cfg: &ElasticConfig, rng: &mut RngStream) -> usize {
    if cfg.k_train == cfg.k_ideal {
        return cfg.k_train;
    }
    rng.random_range(cfg.k_train..=cfg.k_ideal)
}

/// Uniformly random `k`-subset of `pool`, ascending.
pub fn sample_coact(pool: &[usize], k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if k > pool.len() {
        return Err(Error::invalid(format!(
            "cannot draw {k} experts from a pool of {}",
            pool.len()
        )));
    }
    let mut items = pool.to_vec();
    if k < items.len() {
        // partial Fisher-Yates: the first k slots end up a uniform k-subset
        for i in 0..k {
            let j = rng.random_range(i..items.len());
            items.swap(i, j);
        }
        items.truncate(k);
    }
    items.sort_unstable();
    items.dedup();
    if items.len() != k {
        return Err(Error::invalid("candidate pool contains duplicates"));
    }
    Ok(items)
}

/// Exact binomial coefficient as `f64`, computed multiplicatively.
pub fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (1..=k).fold(1.0, |acc, i| acc * (n - k + i) as f64 / i as f64)
}

/// Probability that two experts inside a pool of `k_ideal` are both in a
/// uniform `k_train`-subset: `k_train(k_train−1) / (k_ideal(k_ideal−1))`.
pub fn pair_coactivation_prob(k_ideal: usize, k_train: usize) -> Result<f64> {
    check_pair_args(k_ideal, k_train)?;
    let (a, b) = (k_train as f64, k_ideal as f64);
    Ok(a * (a - 1.0) / (b * (b - 1.0)))
}

/// Same probability as [`pair_coactivation_prob`], in its binomial-ratio form
/// `C(k_ideal−2, k_train−2) / C(k_ideal, k_train)`.
pub fn pair_coactivation_prob_binomial(k_ideal: usize, k_train: usize) -> Result<f64> {
    check_pair_args(k_ideal, k_train)?;
    let (n, k) = (k_ideal as u64, k_train as u64);
    Ok(binomial(n - 2, k - 2) / binomial(n, k))
}

fn check_pair_args(k_ideal: usize, k_train: usize) -> Result<()> {
    if k_train < 2 {
        return Err(Error::invalid("pair probability needs k_train >= 2"));
    }
    if k_ideal < k_train {
        return Err(Error::invalid(format!("k_ideal ({k_ideal}) < k_train ({k_train})")));
    }
    Ok(())
}

/// Training-time selection: `(pool, selected, draws consumed)`.
pub(crate) fn emoe_select(
    logits: &[f64],
    cfg: &ElasticConfig,
    key: SampleKey,
) -> Result<(Vec<usize>, Vec<usize>, u64)> {
    cfg.validate(logits.len())?;
    if !cfg.sampling_enabled {
        let sel = top_k_select(logits, cfg.k_train)?;
        return Ok((sel.clone(), sel, 0));
    }
    let pool_size = sample_pool_size(cfg, &mut key.stream(Purpose::PoolSize));
    let pool = top_k_select(logits, pool_size)?;
    let selected = sample_coact(&pool, cfg.k_train, &mut key.stream(Purpose::Subset))?;
    Ok((pool, selected, 2))
}

/// Routes one token: pool of random size, random `k_train`-subset, subset-softmax gates.
pub fn emoe_route(logits: &[f64], cfg: &ElasticConfig, key: SampleKey) -> Result<RoutingRecord> {
    let (pool, selected, _) = emoe_select(logits, cfg, key)?;
    Ok(RoutingRecord {
        token_index: key.token,
        gate_weights: subset_softmax(logits, &selected),
        pool,
        selected,
        null_mass: 0.0,
        full_probs: softmax_slice(logits),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(token: u64) -> SampleKey {
        SampleKey {
            seed: 5,
            step: 3,
            token,
        }
    }

    #[test]
    fn degenerate_interval_is_constant() {
        let cfg = ElasticConfig::new(2, 2);
        for t in 0..100 {
            assert_eq!(sample_pool_size(&cfg, &mut key(t).stream(Purpose::PoolSize)), 2);
        }
    }

    #[test]
    fn forced_subset_is_the_pool() {
        let pool = [1, 4, 9];
        let mut rng = key(0).stream(Purpose::Subset);
        assert_eq!(sample_coact(&pool, 3, &mut rng).unwrap(), vec![1, 4, 9]);
        assert!(sample_coact(&pool, 4, &mut rng).is_err());
    }

    #[test]
    fn pair_probability_examples() {
        assert!((pair_coactivation_prob(8, 2).unwrap() - 1.0 / 28.0).abs() < 1e-15);
        assert!((pair_coactivation_prob_binomial(8, 2).unwrap() - 1.0 / 28.0).abs() < 1e-15);
        assert_eq!(pair_coactivation_prob(5, 5).unwrap(), 1.0);
        assert!((pair_coactivation_prob(4, 2).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!(pair_coactivation_prob(8, 1).is_err());
        assert!(pair_coactivation_prob(2, 3).is_err());
    }

    #[test]
    fn binomial_small_values() {
        assert_eq!(binomial(8, 2), 28.0);
        assert_eq!(binomial(6, 0), 1.0);
        assert_eq!(binomial(16, 8), 12870.0);
        assert_eq!(binomial(3, 5), 0.0);
    }

    #[test]
    fn disabled_sampling_is_top_k() {
        let logits = [0.3, 2.0, -1.0, 1.5, 0.9, 0.0];
        let mut cfg = ElasticConfig::new(2, 5);
        cfg.sampling_enabled = false;
        for t in 0..50 {
            let r = emoe_route(&logits, &cfg, key(t)).unwrap();
            assert_eq!(r.selected, vec![1, 3]);
            assert_eq!(r.pool, r.selected);
        }
    }

    #[test]
    fn equal_bounds_are_top_k_for_every_seed() {
        let logits = [0.3, 2.0, -1.0, 1.5, 0.9, 0.0];
        let cfg = ElasticConfig::new(3, 3);
        for seed in 0..50 {
            let k = SampleKey {
                seed,
                step: 0,
                token: 0,
            };
            assert_eq!(emoe_route(&logits, &cfg, k).unwrap().selected, vec![1, 3, 4]);
        }
    }

    #[test]
    fn route_record_is_consistent() {
        let logits = [0.3, 2.0, -1.0, 1.5, 0.9, 0.0, 0.4, -0.2];
        let cfg = ElasticConfig::new(2, 6);
        for t in 0..500 {
            let r = emoe_route(&logits, &cfg, key(t)).unwrap();
            assert_eq!(r.selected.len(), 2);
            assert!(r.selected.iter().all(|e| r.pool.contains(e)));
            assert!((2..=6).contains(&r.pool.len()));
            assert!((r.gate_weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ElasticConfig::new(2, 8).validate(16).is_ok());
        assert!(ElasticConfig::new(0, 8).validate(16).is_err());
        assert!(ElasticConfig::new(4, 3).validate(16).is_err());
        assert!(ElasticConfig::new(2, 17).validate(16).is_err());
    }
}
