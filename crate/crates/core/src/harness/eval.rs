use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig, Seeds};
use super::train::{prepare_data, train, TrainOutcome};
use crate::diagnostics::{accuracy, drift_profile, router_entropy};
use crate::exec::Exec;
use crate::moe::{infer, Model, RouteMode};
use crate::numcore::Tensor;
use crate::tasks::Dataset;
use crate::{Error, Result};

/// Metrics of one deterministic evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// `k'` for Top-k routing, otherwise the mean number of active experts.
    pub budget: f64,
    pub eval_loss: f64,
    pub accuracy: f64,
    pub invocations: u64,
    pub mean_active: f64,
    /// Router entropy per block.
    pub entropy_per_layer: Vec<f64>,
    pub mean_entropy: f64,
}

fn mean_cross_entropy(logits: &Tensor, targets: &[usize]) -> f64 {
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum();
    total / targets.len() as f64
}

/// Evaluates with a deterministic routing rule. Sampling modes are rejected
/// and the pass must not consume any sampling draws.
pub fn evaluate(model: &Model, data: &Dataset, mode: &RouteMode, exec: Exec) -> Result<EvalMetrics> {
    if matches!(mode, RouteMode::Emoe { .. }) {
        return Err(Error::invalid("evaluation never samples; use a deterministic routing mode"));
    }
    if let RouteMode::TopK(k) = mode {
        if *k == 0 || *k > model.n_experts() {
            return Err(Error::invalid(format!("k' = {k} outside [1, {}]", model.n_experts())));
        }
    }
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let ids: Vec<u64> = (0..data.len() as u64).collect();
    let out = infer(model, &data.inputs, &ids, mode, exec)?;
    assert_eq!(out.stats.sampling_draws, 0, "evaluation consumed sampling draws");
    let entropy_per_layer: Vec<f64> = out.records.iter().map(|r| router_entropy(r)).collect();
    let layers = out.records.len() as f64;
    let mean_active = out.stats.invocations as f64 / (data.len() as f64 * layers);
    Ok(EvalMetrics {
        budget: match mode {
            RouteMode::TopK(k) => *k as f64,
            _ => mean_active,
        },
        eval_loss: mean_cross_entropy(&out.logits, &data.targets),
        accuracy: accuracy(&out.logits, &data.targets),
        invocations: out.stats.invocations,
        mean_active,
        mean_entropy: entropy_per_layer.iter().sum::<f64>() / layers,
        entropy_per_layer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub k_prime: usize,
    pub budget: f64,
    pub eval_loss: f64,
    pub accuracy: f64,
    pub delta_per_layer: Vec<f64>,
    pub mean_delta: f64,
    pub mean_entropy: f64,
    pub invocations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub manifest_hash: String,
    /// Sorted by budget.
    pub rows: Vec<EvalRow>,
}

pub const REPORT_HEADER: &str = "budget,eval_loss,accuracy,mean_delta,mean_entropy,invocations";

impl EvalReport {
    pub fn row(&self, k_prime: usize) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.k_prime == k_prime)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.budget, r.eval_loss, r.accuracy, r.mean_delta, r.mean_entropy, r.invocations
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Top-k' evaluation for every `k'`, joined with the co-occurrence drift
/// against `reference` routing on the same data.
pub fn sweep(
    model: &Model,
    data: &Dataset,
    reference: &RouteMode,
    k_primes: &[usize],
    manifest_hash: &str,
    exec: Exec,
) -> Result<EvalReport> {
    if k_primes.is_empty() {
        return Err(Error::invalid("empty k' list"));
    }
    let mut ks = k_primes.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let drift = drift_profile(model, data, reference, &ks, exec)?;
    let metrics = exec.map(&ks, |&k| evaluate(model, data, &RouteMode::TopK(k), Exec::Sequential));
    let rows = ks
        .iter()
        .zip(metrics)
        .zip(drift)
        .map(|((&k, m), d)| {
            let m = m?;
            debug_assert_eq!(d.k_prime, k);
            Ok(EvalRow {
                k_prime: k,
                budget: m.budget,
                eval_loss: m.eval_loss,
                accuracy: m.accuracy,
                delta_per_layer: d.delta_per_layer,
                mean_delta: d.mean_delta,
                mean_entropy: m.mean_entropy,
                invocations: m.invocations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        manifest_hash: manifest_hash.to_string(),
        rows,
    })
}

/// The four training arms compared by the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Topk,
    Emoe,
    NoCoact,
    NoHr,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Topk, Arm::Emoe, Arm::NoCoact, Arm::NoHr];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Topk => "topk",
            Arm::Emoe => "emoe",
            Arm::NoCoact => "no_coact",
            Arm::NoHr => "no_hr",
        }
    }

    /// `base` adjusted for this arm with all seeds set to `seed`.
    pub fn config(self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.seeds = Seeds::all(seed);
        match self {
            Arm::Topk => cfg.mode = Mode::Topk,
            Arm::Emoe => cfg.mode = Mode::Emoe,
            Arm::NoCoact => {
                cfg.mode = Mode::Emoe;
                cfg.elastic.sampling_enabled = false;
            }
            Arm::NoHr => {
                cfg.mode = Mode::Emoe;
                cfg.losses.lambda = 0.0;
            }
        }
        cfg
    }
}

/// A trained arm/seed pair and its sweep.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub config: RunConfig,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Trains `config` on its own data and sweeps the eval split.
pub fn train_and_sweep(config: &RunConfig, k_primes: &[usize], exec: Exec) -> Result<(TrainOutcome, EvalReport)> {
    let (train_set, eval_set) = prepare_data(config)?;
    let text = config.to_toml();
    let outcome = train(config, &text, &train_set, |_| Ok(()))?;
    let hash = outcome.final_checkpoint.manifest_hash()?;
    let report = sweep(
        &outcome.model,
        &eval_set,
        &config.reference_route(),
        k_primes,
        &hash,
        exec,
    )?;
    Ok((outcome, report))
}

/// Runs every `(arm, seed)` pair. Pairs train independently and may run in parallel.
pub fn run_arms(base: &RunConfig, arms: &[Arm], seeds: &[u64], k_primes: &[usize], exec: Exec) -> Result<Vec<ArmRun>> {
    let jobs: Vec<(Arm, u64)> = arms
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    exec.map(&jobs, |&(arm, seed)| {
        let config = arm.config(base, seed);
        let (outcome, report) = train_and_sweep(&config, k_primes, Exec::Sequential)?;
        Ok(ArmRun {
            arm,
            seed,
            config,
            outcome,
            report,
        })
    })
    .into_iter()
    .collect()
}

/// Mean accuracy of `arm` at `k'` over the runs present.
pub fn mean_accuracy(runs: &[ArmRun], arm: Arm, k_prime: usize) -> Option<f64> {
    let xs: Vec<f64> = runs
        .iter()
        .filter(|r| r.arm == arm)
        .filter_map(|r| r.report.row(k_prime).map(|row| row.accuracy))
        .collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub const ABLATION_HEADER: &str = "arm,seed,k_prime,accuracy,eval_loss,mean_delta,train_invocations";

pub fn ablation_csv(runs: &[ArmRun]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for run in runs {
        for row in &run.report.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                run.arm.name(),
                run.seed,
                row.k_prime,
                row.accuracy,
                row.eval_loss,
                row.mean_delta,
                run.outcome.invocations
            ));
        }
    }
    s
}
