//! Dynamic-routing baselines: Top-p threshold routing and null-expert (AdaMoE-style) routing.

use serde::{Deserialize, Serialize};

use crate::moe::{top_k_select, RoutingRecord};
use crate::{Error, Result};

/// Default training threshold for Top-p routing.
pub const TOP_P_TRAIN: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopPConfig {
    pub p: f64,
}

impl TopPConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p > 0.0 && self.p <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("top-p threshold {} outside (0, 1]", self.p)))
        }
    }
}

impl Default for TopPConfig {
    fn default() -> Self {
        Self { p: TOP_P_TRAIN }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaMoeConfig {
    /// Number of zero-output null experts; twice the real expert count by default.
    pub n_null: usize,
    /// Selection count over real and null experts together.
    pub k_nominal: usize,
}

impl AdaMoeConfig {
    pub fn for_experts(n_experts: usize, k_nominal: usize) -> Self {
        Self {
            n_null: 2 * n_experts,
            k_nominal,
        }
    }
}

const MASS_SLACK: f64 = 1e-12;

/// Smallest probability-sorted prefix whose mass reaches `p`, returned ascending.
///
/// Experts are ranked by descending probability with ties to the lower
/// index. At least one expert is always selected and zero-probability experts
/// are never added once the mass is reached.
pub fn top_p_select(probs: &[f64], p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("p = {p} outside (0, 1]")));
    }
    if probs.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut chosen = Vec::new();
    for &i in &order {
        if !chosen.is_empty() && (mass + MASS_SLACK >= p || probs[i] <= 0.0) {
            break;
        }
        mass += probs[i];
        chosen.push(i);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Result of null-expert routing for one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaSelection {
    /// Real experts among the nominal Top-k, ascending (possibly empty).
    pub real: Vec<usize>,
    /// Null experts among the nominal Top-k, numbered from 0.
    pub nulls: Vec<usize>,
}

/// Top-`k_nominal` over `[real logits ‖ null logits]`, split into real and null picks.
pub fn adamoe_select(logits_extended: &[f64], n_real: usize, k_nominal: usize) -> Result<AdaSelection> {
    if n_real > logits_extended.len() {
        return Err(Error::invalid("more real experts than logits"));
    }
    if logits_extended.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN logit"));
    }
    let top = top_k_select(logits_extended, k_nominal)?;
    let (real, nulls): (Vec<usize>, Vec<usize>) = top.into_iter().partition(|&i| i < n_real);
    Ok(AdaSelection {
        real,
        nulls: nulls.into_iter().map(|i| i - n_real).collect(),
    })
}

/// Mean number of real experts activated per token.
pub fn mean_active_experts(records: &[RoutingRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no routing records"));
    }
    let total: usize = records.iter().map(|r| r.selected.len()).sum();
    Ok(total as f64 / records.len() as f64)
}
