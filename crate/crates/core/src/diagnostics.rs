//! Expert co-occurrence statistics, Frobenius drift between routing regimes,
//! and router entropy.

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::moe::{infer, Model, RouteMode, RoutingRecord};
use crate::tasks::Dataset;
use crate::{Error, Result};

/// Exact pair counts; shards merge by addition before normalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoOccurrenceCounts {
    pub n: usize,
    pub n_tokens: u64,
    pub counts: Vec<u64>,
}

impl CoOccurrenceCounts {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            n_tokens: 0,
            counts: vec![0; n * n],
        }
    }

    pub fn add(&mut self, selected: &[usize]) -> Result<()> {
        if let Some(&bad) = selected.iter().find(|&&e| e >= self.n) {
            return Err(Error::invalid(format!("expert index {bad} >= {}", self.n)));
        }
        for &i in selected {
            for &j in selected {
                self.counts[i * self.n + j] += 1;
            }
        }
        self.n_tokens += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &CoOccurrenceCounts) -> Result<()> {
        if other.n != self.n {
            return Err(Error::invalid("cannot merge counts of different sizes"));
        }
        self.n_tokens += other.n_tokens;
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn normalize(&self, layer: usize) -> Result<CoOccurrenceMatrix> {
        if self.n_tokens == 0 {
            return Err(Error::invalid("no tokens accumulated"));
        }
        let m = self.n_tokens as f64;
        Ok(CoOccurrenceMatrix {
            layer,
            n: self.n,
            n_tokens: self.n_tokens,
            values: self.counts.iter().map(|&c| c as f64 / m).collect(),
        })
    }
}

/// `M_ij` = fraction of tokens whose selection contains both `i` and `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrenceMatrix {
    pub layer: usize,
    pub n: usize,
    pub n_tokens: u64,
    /// Row-major `n×n`.
    pub values: Vec<f64>,
}

impl CoOccurrenceMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn cooccurrence(records: &[RoutingRecord], n: usize, layer: usize) -> Result<CoOccurrenceMatrix> {
    if records.is_empty() {
        return Err(Error::invalid("co-occurrence needs at least one record"));
    }
    let mut counts = CoOccurrenceCounts::new(n);
    for r in records {
        counts.add(&r.selected)?;
    }
    counts.normalize(layer)
}

/// Frobenius distance `‖a − b‖_F`.
pub fn cooc_distance(a: &CoOccurrenceMatrix, b: &CoOccurrenceMatrix) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::invalid(format!(
            "co-occurrence sizes differ: {} vs {}",
            a.n, b.n
        )));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Mean Shannon entropy (nats) of the router distributions in `records`.
pub fn router_entropy(records: &[RoutingRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let total: f64 = records
        .iter()
        .map(|r| {
            -r.full_probs
                .iter()
                .filter(|&&h| h > 0.0)
                .map(|&h| h * h.ln())
                .sum::<f64>()
        })
        .sum();
    total / records.len() as f64
}

/// One row of a drift profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub k_prime: usize,
    /// `Δ` per MoE block.
    pub delta_per_layer: Vec<f64>,
    pub mean_delta: f64,
    /// Accuracy under Top-k' routing.
    pub metric: f64,
}

/// Per-layer co-occurrence matrices of `model` on `data` under `mode`.
pub fn layer_matrices(model: &Model, data: &Dataset, mode: &RouteMode, exec: Exec) -> Result<Vec<CoOccurrenceMatrix>> {
    let ids: Vec<u64> = (0..data.len() as u64).collect();
    let out = infer(model, &data.inputs, &ids, mode, exec)?;
    out.records
        .iter()
        .enumerate()
        .map(|(l, recs)| cooccurrence(recs, model.n_experts(), l))
        .collect()
}

/// Accuracy of row-wise argmax over `logits` against `targets`.
pub fn accuracy(logits: &crate::numcore::Tensor, targets: &[usize]) -> f64 {
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| {
            let row = logits.row(i);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            best == t
        })
        .count();
    correct as f64 / targets.len().max(1) as f64
}

/// Drift `Δ(reference → k')` for each `k'`, sorted by `k'`.
///
/// The reference matrices are built on the same data under `reference`
/// routing (the model's training-time rule); each `k'` row routes with
/// deterministic Top-k'.
pub fn drift_profile(
    model: &Model,
    data: &Dataset,
    reference: &RouteMode,
    k_primes: &[usize],
    exec: Exec,
) -> Result<Vec<DriftRow>> {
    if k_primes.is_empty() {
        return Err(Error::invalid("empty k' list"));
    }
    let ref_mats = layer_matrices(model, data, reference, exec)?;
    let mut ks = k_primes.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let ids: Vec<u64> = (0..data.len() as u64).collect();
    let rows = exec.map(&ks, |&k| -> Result<DriftRow> {
        let out = infer(model, &data.inputs, &ids, &RouteMode::TopK(k), Exec::Sequential)?;
        let delta_per_layer = out
            .records
            .iter()
            .enumerate()
            .map(|(l, recs)| cooc_distance(&ref_mats[l], &cooccurrence(recs, model.n_experts(), l)?))
            .collect::<Result<Vec<_>>>()?;
        let mean_delta = delta_per_layer.iter().sum::<f64>() / delta_per_layer.len() as f64;
        Ok(DriftRow {
            k_prime: k,
            delta_per_layer,
            mean_delta,
            metric: accuracy(&out.logits, &data.targets),
        })
    });
    rows.into_iter().collect()
}

/// CSV with header `k_prime,delta,metric`.
pub fn drift_csv(rows: &[DriftRow]) -> String {
    let mut s = String::from("k_prime,delta,metric\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.k_prime, r.mean_delta, r.metric));
    }
    s
}
