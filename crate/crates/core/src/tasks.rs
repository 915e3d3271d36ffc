//! Deterministic synthetic classification data that rewards expert specialization.
//!
//! Samples are drawn around random cluster centers; each cluster labels its
//! samples with its own frozen random linear teacher, so different regions
//! of input space need different functions.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::elastic::{Purpose, RngStream};
use crate::numcore::Tensor;
use crate::{Error, Result};

pub const CLUSTER_TEACHER: &str = "cluster_teacher";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub n_clusters: usize,
    pub d: usize,
    pub n_classes: usize,
    pub m_per_cluster: usize,
    pub noise: f64,
    pub train_fraction: f64,
}

impl Default for TaskConfig {
    /// 8 clusters × 1280 samples, split 8,192 / 2,048.
    fn default() -> Self {
        Self {
            n_clusters: 8,
            d: 16,
            n_classes: 8,
            m_per_cluster: 1280,
            noise: 0.3,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub n_clusters: usize,
    pub n_classes: usize,
    pub noise: f64,
    /// Cluster of each sample.
    pub clusters: Vec<usize>,
    /// Index of each sample in the generated dataset it came from.
    pub source_index: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn d(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `idx`, in the order given.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let d = self.d();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} out of range")));
            }
            data.extend_from_slice(self.inputs.row(i));
        }
        Ok(Dataset {
            inputs: Tensor::new(vec![idx.len(), d], data)?,
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            meta: DatasetMeta {
                clusters: idx.iter().map(|&i| self.meta.clusters[i]).collect(),
                source_index: idx.iter().map(|&i| self.meta.source_index[i]).collect(),
                ..self.meta.clone()
            },
        })
    }

    /// Per-dimension mean and the trace of the sample covariance.
    pub fn moments(&self) -> (Vec<f64>, f64) {
        let (m, d) = (self.len() as f64, self.d());
        let mut mean = vec![0.0; d];
        for i in 0..self.len() {
            mean.iter_mut().zip(self.inputs.row(i)).for_each(|(a, x)| *a += x);
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut trace = 0.0;
        for i in 0..self.len() {
            trace += self
                .inputs
                .row(i)
                .iter()
                .zip(&mean)
                .map(|(x, mu)| (x - mu) * (x - mu))
                .sum::<f64>();
        }
        (mean, trace / m)
    }
}

fn gaussian_vec(rng: &mut RngStream, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Clustered inputs labelled by per-cluster random linear teachers.
///
/// `label = argmax_j (W_c·x)_j` with `W_c` the frozen teacher of the
/// sample's cluster.
pub fn gen_cluster_teacher(cfg: &TaskConfig, seed: u64) -> Result<Dataset> {
    if cfg.n_clusters == 0 || cfg.d == 0 || cfg.n_classes == 0 || cfg.m_per_cluster == 0 {
        return Err(Error::invalid(format!("degenerate task sizes {cfg:?}")));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::invalid(format!("noise must be >= 0, got {}", cfg.noise)));
    }
    let (d, c) = (cfg.d, cfg.n_classes);
    let mut structure = RngStream::new(seed, Purpose::Data, 0, 0);
    let centers: Vec<Vec<f64>> = (0..cfg.n_clusters).map(|_| gaussian_vec(&mut structure, d)).collect();
    let teachers: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| gaussian_vec(&mut structure, c * d))
        .collect();

    let total = cfg.n_clusters * cfg.m_per_cluster;
    let mut inputs = Vec::with_capacity(total * d);
    let mut targets = Vec::with_capacity(total);
    let mut clusters = Vec::with_capacity(total);
    for (k, (center, teacher)) in centers.iter().zip(&teachers).enumerate() {
        let mut rng = RngStream::new(seed, Purpose::Data, 1, k as u64);
        for _ in 0..cfg.m_per_cluster {
            let x: Vec<f64> = gaussian_vec(&mut rng, d)
                .into_iter()
                .zip(center)
                .map(|(z, c)| c + z * cfg.noise)
                .collect();
            let scores: Vec<f64> = teacher
                .chunks(d)
                .map(|w| w.iter().zip(&x).map(|(a, b)| a * b).sum())
                .collect();
            let label = (0..c)
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
                .expect("at least one class");
            inputs.extend_from_slice(&x);
            targets.push(label);
            clusters.push(k);
        }
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![total, d], inputs)?,
        targets,
        meta: DatasetMeta {
            generator: CLUSTER_TEACHER.to_string(),
            seed,
            n_clusters: cfg.n_clusters,
            n_classes: c,
            noise: cfg.noise,
            clusters,
            source_index: (0..total).collect(),
        },
    })
}

/// Stratified, seed-deterministic split. The train size is
/// `round(train_fraction · M)`, shared out across clusters by largest
/// remainder, so each cluster is within one sample of its exact share. Each
/// cluster is shuffled then cut; both halves keep the original sample order.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut by_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &k) in ds.meta.clusters.iter().enumerate() {
        by_cluster.entry(k).or_default().push(i);
    }
    let target = (train_fraction * ds.len() as f64).round() as usize;
    let shares: Vec<f64> = by_cluster.values().map(|m| train_fraction * m.len() as f64).collect();
    let mut cuts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut order: Vec<usize> = (0..cuts.len()).collect();
    order.sort_by(|&a, &b| (shares[b] - shares[b].floor()).total_cmp(&(shares[a] - shares[a].floor())).then(a.cmp(&b)));
    let missing = target.saturating_sub(cuts.iter().sum());
    for &i in order.iter().take(missing) {
        cuts[i] += 1;
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for ((k, mut members), cut) in by_cluster.into_iter().zip(cuts) {
        let mut rng = RngStream::new(seed, Purpose::Data, 2, k as u64);
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..cut]);
        eval.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((ds.subset(&train)?, ds.subset(&eval)?))
}
