use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::train::objective;
use crate::elastic::{pair_coactivation_prob, pair_coactivation_prob_binomial, sample_coact, ElasticConfig, Purpose, RngStream};
use crate::exec::Exec;
use crate::moe::{Model, ModelShape, RouteMode};
use crate::numcore::{grad_check, GradCheckReport, NumError, Tensor};
use crate::{Error, Result};

const DRAW_CHUNK: usize = 8192;

/// Monte Carlo estimate of the pair co-activation probability against its
/// closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingCheck {
    pub k_train: usize,
    pub k_ideal: usize,
    pub draws: u64,
    pub hits: u64,
    pub closed_form: f64,
    pub binomial_form: f64,
    pub estimate: f64,
    /// Three binomial standard deviations of the estimate.
    pub bound: f64,
    pub within: bool,
}

/// Draws `k_train`-subsets from the fixed pool `0..k_ideal` and counts how
/// often experts 0 and 1 are chosen together. Draw `i` uses its own stream,
/// so the estimate does not depend on how draws are scheduled.
pub fn verify_sampling(k_train: usize, k_ideal: usize, draws: u64, seed: u64, exec: Exec) -> Result<SamplingCheck> {
    ElasticConfig::new(k_train, k_ideal).validate(k_ideal)?;
    if k_train < 2 {
        return Err(Error::invalid("pair co-activation needs k_train >= 2"));
    }
    if draws == 0 {
        return Err(Error::invalid("draws must be positive"));
    }
    let pool: Vec<usize> = (0..k_ideal).collect();
    let chunks = draws.div_ceil(DRAW_CHUNK as u64) as usize;
    let counts = exec.map_range(chunks, |c| -> Result<u64> {
        let start = c as u64 * DRAW_CHUNK as u64;
        let end = (start + DRAW_CHUNK as u64).min(draws);
        let mut hits = 0;
        for i in start..end {
            let mut rng = RngStream::new(seed, Purpose::Subset, 0, i);
            let s = sample_coact(&pool, k_train, &mut rng)?;
            hits += u64::from(s[0] == 0 && s[1] == 1);
        }
        Ok(hits)
    });
    let hits: u64 = counts.into_iter().sum::<Result<u64>>()?;
    let p = pair_coactivation_prob(k_ideal, k_train)?;
    let estimate = hits as f64 / draws as f64;
    let bound = 3.0 * (p * (1.0 - p) / draws as f64).sqrt();
    Ok(SamplingCheck {
        k_train,
        k_ideal,
        draws,
        hits,
        closed_form: p,
        binomial_form: pair_coactivation_prob_binomial(k_ideal, k_train)?,
        estimate,
        bound,
        within: (estimate - p).abs() <= bound,
    })
}

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

/// Gradient check of one full training objective on a small elastic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelGradCheck {
    pub seed: u64,
    pub eps: f64,
    pub max_rel_error: f64,
    pub worst_tensor: usize,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Central differences against the tape on `ce + lb + λ·hr` for an elastic
/// model with 8 experts, width 8 and a batch of 4. The routing stream is
/// keyed to a fixed step, so every perturbed evaluation routes identically.
pub fn model_gradcheck(seed: u64, eps: f64) -> Result<ModelGradCheck> {
    let shape = ModelShape {
        d_in: 8,
        d: 8,
        d_h: 8,
        n_layers: 2,
        n_experts: 8,
        n_classes: 4,
        n_null: 0,
    };
    let batch = 4;
    let model = Model::init(shape, seed)?;
    let mut rng = RngStream::new(seed, Purpose::Data, 0, 0);
    let x: Vec<f64> = (0..batch * shape.d_in)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let x = Tensor::new(vec![batch, shape.d_in], x)?;
    let targets: Vec<usize> = (0..batch).map(|i| i % shape.n_classes).collect();
    let ids: Vec<u64> = (0..batch as u64).collect();
    let mode = RouteMode::Emoe {
        cfg: ElasticConfig::new(2, 4),
        seed,
        step: 0,
    };
    let params: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();

    let report: GradCheckReport = grad_check(
        |tape, vars| {
            let mut next = vars.iter();
            let bound = model.bind_with(|_| *next.next().expect("one var per tensor"));
            let xv = tape.constant(x.clone());
            let run = || -> Result<_> {
                let pass = bound.forward(xv, &ids, &mode)?;
                Ok(objective(&pass, &targets, 0.1, 0.01)?.total)
            };
            run().map_err(|e| match e {
                Error::Num(n) => n,
                other => NumError::InvalidArgument(other.to_string()),
            })
        },
        &params,
        eps,
    )?;
    Ok(ModelGradCheck {
        seed,
        eps,
        max_rel_error: report.max_rel_error,
        worst_tensor: report.worst.0,
        worst_index: report.worst.1,
        checked: report.checked,
        passed: report.max_rel_error < GRADCHECK_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_estimate_is_schedule_independent() {
        let a = verify_sampling(2, 8, 20_000, 3, Exec::Sequential).unwrap();
        let b = verify_sampling(2, 8, 20_000, 3, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_rejects_bad_arguments() {
        assert!(verify_sampling(1, 8, 100, 0, Exec::Sequential).is_err());
        assert!(verify_sampling(4, 3, 100, 0, Exec::Sequential).is_err());
        assert!(verify_sampling(2, 8, 0, 0, Exec::Sequential).is_err());
    }
}
