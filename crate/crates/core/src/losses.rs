//! Router losses: the hierarchical (negative reverse-KL-to-uniform) loss,
//! a frequency×probability load-balance loss, and the total objective.

use serde::{Deserialize, Serialize};

use crate::moe::RoutingRecord;
use crate::numcore::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 5e-4;
pub const DEFAULT_LB_COEFF: f64 = 0.01;
/// Floor applied to probabilities before `log` on the tape.
pub const PROB_FLOOR: f64 = 1e-30;

const ROW_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub lb_coeff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            lb_coeff: DEFAULT_LB_COEFF,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ce: f64,
    pub lb: f64,
    pub hr: f64,
    pub total: f64,
    pub lambda: f64,
    pub lb_coeff: f64,
}

fn check_rows(probs: &Tensor) -> Result<()> {
    for (r, row) in probs.data().chunks(probs.cols()).enumerate() {
        if let Some(i) = row.iter().position(|&p| p < 0.0) {
            return Err(Error::invalid(format!("negative probability at row {r}, column {i}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::invalid(format!("row {r} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Mean over rows of `−Σ_i h_i·log(h_i·N)`, with `0·log 0 = 0`. Lies in `[−log N, 0]`.
///
/// The log ratio is evaluated as `ln h − ln(1/N)` so a uniform row scores exactly 0.
pub fn hr_loss(probs: &Tensor) -> Result<f64> {
    check_rows(probs)?;
    let log_uniform = (1.0 / probs.cols() as f64).ln();
    let total: f64 = probs
        .data()
        .chunks(probs.cols())
        .map(|row| {
            // 0 − x rather than −x keeps a uniform row at +0
            0.0 - row
                .iter()
                .filter(|&&h| h > 0.0)
                .map(|&h| h * (h.ln() - log_uniform))
                .sum::<f64>()
        })
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Tape version of [`hr_loss`] over a `[B×N]` softmax output.
pub fn hr_loss_var<'t>(probs: Var<'t>) -> Result<Var<'t>> {
    let shape = probs.shape();
    let (b, n) = (shape[0] as f64, shape[1] as f64);
    let log_ratio = probs.clamp_min(PROB_FLOOR)?.log()?.add_scalar(-(1.0 / n).ln())?;
    Ok(probs.mul(log_ratio)?.sum()?.scale(-1.0 / b)?)
}

fn check_positive(probs: &[f64]) -> Result<()> {
    match probs.iter().position(|&h| !(h > 0.0)) {
        None => Ok(()),
        Some(i) => Err(Error::invalid(format!("probability {i} is not strictly positive"))),
    }
}

/// `∂L_HR/∂h_i = −log(h_i·N) − 1` for one row, before the softmax chain rule.
pub fn hr_grad_unconstrained(probs: &[f64]) -> Result<Vec<f64>> {
    check_positive(probs)?;
    let log_uniform = (1.0 / probs.len() as f64).ln();
    Ok(probs.iter().map(|&h| -(h.ln() - log_uniform) - 1.0).collect())
}

/// Forward-KL counterpart `1/(N·h_i)`. Comparison only; never used for training.
pub fn forward_kl_grad(probs: &[f64]) -> Result<Vec<f64>> {
    check_positive(probs)?;
    let n = probs.len() as f64;
    Ok(probs.iter().map(|&h| 1.0 / (n * h)).collect())
}

/// Fraction of (token, expert) assignments per expert.
pub fn assignment_fractions(records: &[RoutingRecord], n: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; n];
    for r in records {
        for &e in &r.selected {
            if e >= n {
                return Err(Error::invalid(format!("expert index {e} >= {n}")));
            }
            counts[e] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Ok(vec![0.0; n]);
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// `lb_coeff · N · Σ_i f_i · P_i` with `f_i` the assignment fraction and `P_i`
/// the mean full-softmax probability of expert `i`.
pub fn load_balance_loss(records: &[RoutingRecord], n: usize, lb_coeff: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("load balance needs at least one record"));
    }
    let f = assignment_fractions(records, n)?;
    let mut p = vec![0.0; n];
    for r in records {
        if r.full_probs.len() != n {
            return Err(Error::invalid("record probabilities do not match expert count"));
        }
        p.iter_mut().zip(&r.full_probs).for_each(|(a, b)| *a += b);
    }
    let m = records.len() as f64;
    let dot: f64 = f.iter().zip(&p).map(|(f, p)| f * p / m).sum();
    Ok(lb_coeff * n as f64 * dot)
}

/// Tape version of [`load_balance_loss`]; assignment fractions are constants.
pub fn load_balance_var<'t>(probs: Var<'t>, records: &[RoutingRecord], lb_coeff: f64) -> Result<Var<'t>> {
    if records.is_empty() {
        return Err(Error::invalid("load balance needs at least one record"));
    }
    let n = probs.shape()[1];
    let f = Tensor::vector(&assignment_fractions(records, n)?)?;
    let tape: &Tape = probs.tape();
    let mean_p = probs.mean_over_rows()?;
    Ok(mean_p.mul(tape.constant(f))?.sum()?.scale(lb_coeff * n as f64)?)
}

/// `total = ce + lb + λ·hr`.
pub fn total_loss(ce: f64, lb: f64, hr: f64, weights: LossWeights) -> Result<LossBundle> {
    let vals = [ce, lb, hr, weights.lambda, weights.lb_coeff];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite loss component"));
    }
    Ok(LossBundle {
        ce,
        lb,
        hr,
        total: ce + lb + weights.lambda * hr,
        lambda: weights.lambda,
        lb_coeff: weights.lb_coeff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    fn record(selected: Vec<usize>, probs: Vec<f64>) -> RoutingRecord {
        RoutingRecord {
            token_index: 0,
            pool: selected.clone(),
            gate_weights: vec![1.0 / selected.len() as f64; selected.len()],
            selected,
            null_mass: 0.0,
            full_probs: probs,
        }
    }

    #[test]
    fn hr_landmarks() {
        assert_eq!(hr_loss(&row(&[0.25; 4])).unwrap(), 0.0);
        let one_hot = hr_loss(&row(&[0.0, 1.0, 0.0, 0.0])).unwrap();
        assert!((one_hot + 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hr_rejects_bad_rows() {
        assert!(hr_loss(&row(&[0.5, 0.6])).is_err());
        assert!(hr_loss(&row(&[1.2, -0.2])).is_err());
    }

    #[test]
    fn gradient_formula_landmarks() {
        assert_eq!(hr_grad_unconstrained(&[0.2; 5]).unwrap(), vec![-1.0; 5]);
        assert_eq!(forward_kl_grad(&[0.25; 4]).unwrap(), vec![1.0; 4]);
        assert!(hr_grad_unconstrained(&[0.0, 1.0]).is_err());
        assert!(forward_kl_grad(&[0.0, 1.0]).is_err());
        let mut h = vec![0.01];
        h.extend(std::iter::repeat(0.99 / 9.0).take(9));
        let fwd = forward_kl_grad(&h).unwrap();
        assert!((fwd[0] - 100.0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn load_balance_landmarks() {
        let n = 4;
        let uniform: Vec<_> = (0..n).map(|e| record(vec![e], vec![0.25; 4])).collect();
        assert!((load_balance_loss(&uniform, n, 0.01).unwrap() - 0.01).abs() < 1e-15);
        let collapsed: Vec<_> = (0..5).map(|_| record(vec![0], vec![1.0, 0.0, 0.0, 0.0])).collect();
        assert!((load_balance_loss(&collapsed, n, 0.01).unwrap() - 0.04).abs() < 1e-15);
        assert!(load_balance_loss(&[], n, 0.01).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights {
            lambda: 0.5,
            lb_coeff: 0.01,
        };
        let b = total_loss(1.0, 0.1, -1.0, w).unwrap();
        assert!((b.total - 0.6).abs() < 1e-15);
        let w0 = LossWeights { lambda: 0.0, ..w };
        assert_eq!(total_loss(1.0, 0.1, -1.0, w0).unwrap().total, 1.0 + 0.1);
        assert!(total_loss(f64::NAN, 0.0, 0.0, w).is_err());
    }

    #[test]
    fn tape_hr_matches_value_path() {
        let tape = Tape::new();
        let p = Tensor::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.1, 0.1, 0.8]]).unwrap();
        let v = hr_loss_var(tape.constant(p.clone())).unwrap().item().unwrap();
        assert!((v - hr_loss(&p).unwrap()).abs() < 1e-15);
    }
}
