//! Router projection, Top-k selection, subset-softmax gating and the MoE model.

mod layer;
mod model;

pub use layer::{Expert, Linear, MoeLayer};
pub use model::{infer, model_forward, ForwardPass, ForwardStats, InferOutput, Model, ModelShape};

pub(crate) use layer::{BoundLayer, BoundLinear};

use serde::{Deserialize, Serialize};

use crate::baselines::{adamoe_select, top_p_select};
use crate::elastic::{self, ElasticConfig, SampleKey};
use crate::numcore::{softmax_slice, NumError, Tape, Tensor, Var};
use crate::{Error, Result};

/// Routing decision for one token in one MoE block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub token_index: u64,
    /// Candidate pool, ascending. Equals `selected` for deterministic modes.
    pub pool: Vec<usize>,
    /// Real experts that were evaluated, ascending.
    pub selected: Vec<usize>,
    /// Gate weight of each entry of `selected`.
    pub gate_weights: Vec<f64>,
    /// Gate mass absorbed by null experts (null-expert routing only, else 0).
    pub null_mass: f64,
    /// Softmax over all real-expert logits.
    pub full_probs: Vec<f64>,
}

/// Per-token routing rule used by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum RouteMode {
    TopK(usize),
    /// Elastic co-activation sampling; streams are keyed by `(seed, layer, step, token)`.
    Emoe {
        cfg: ElasticConfig,
        seed: u64,
        step: u64,
    },
    TopP(f64),
    AdaMoe {
        k_nominal: usize,
    },
}

impl RouteMode {
    pub fn is_stochastic(&self) -> bool {
        matches!(self, RouteMode::Emoe { cfg, .. } if cfg.sampling_enabled)
    }

    fn validate(&self, n: usize, n_null: usize) -> Result<()> {
        match self {
            RouteMode::TopK(k) if *k == 0 || *k > n => {
                Err(Error::invalid(format!("k = {k} outside [1, {n}]")))
            }
            RouteMode::Emoe { cfg, .. } => cfg.validate(n),
            RouteMode::TopP(p) if !(*p > 0.0 && *p <= 1.0) => {
                Err(Error::invalid(format!("p = {p} outside (0, 1]")))
            }
            RouteMode::AdaMoe { .. } if n_null == 0 => Err(Error::invalid(
                "null-expert routing needs a model built with null experts",
            )),
            RouteMode::AdaMoe { k_nominal } if *k_nominal == 0 || *k_nominal > n + n_null => Err(
                Error::invalid(format!("k_nominal = {k_nominal} outside [1, {}]", n + n_null)),
            ),
            _ => Ok(()),
        }
    }
}

/// Experts chosen for one token.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub(crate) struct Selection {
    pub pool: Vec<usize>,
    pub real: Vec<usize>,
    /// Null experts, numbered from 0.
    pub nulls: Vec<usize>,
    pub draws: u64,
}

/// Indices of the `k` largest logits in ascending index order; ties go to the lower index.
pub fn top_k_select(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::invalid(format!(
            "k = {k} outside [1, {}]",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Router logits `x·W_g` for every real expert, shape `[B×N]`.
pub fn router_logits(x: &Tensor, layer: &MoeLayer) -> Result<Tensor> {
    let n = layer.n_experts();
    if x.shape().len() != 2 || x.cols() != layer.d() {
        return Err(NumError::Shape {
            op: "router_logits",
            lhs: x.shape().to_vec(),
            rhs: layer.router.shape().to_vec(),
        }
        .into());
    }
    let tape = Tape::new();
    let logits = tape
        .constant(x.clone())
        .matmul(tape.constant(layer.router.clone()))?;
    let logits = if layer.n_null > 0 {
        logits.slice_cols(0, n)?
    } else {
        logits
    };
    Ok(logits.value())
}

pub(crate) fn select_token(
    mode: &RouteMode,
    layer_index: usize,
    token: u64,
    real_logits: &[f64],
    ext_logits: &[f64],
    probs: &[f64],
) -> Result<Selection> {
    match mode {
        RouteMode::TopK(k) => {
            let sel = top_k_select(real_logits, *k)?;
            Ok(Selection {
                pool: sel.clone(),
                real: sel,
                ..Selection::default()
            })
        }
        RouteMode::Emoe { cfg, seed, step } => {
            let key = SampleKey {
                seed: elastic::derive_seed(*seed, layer_index as u64),
                step: *step,
                token,
            };
            let (pool, selected, draws) = elastic::emoe_select(real_logits, cfg, key)?;
            Ok(Selection {
                pool,
                real: selected,
                nulls: Vec::new(),
                draws,
            })
        }
        RouteMode::TopP(p) => {
            let sel = top_p_select(probs, *p)?;
            Ok(Selection {
                pool: sel.clone(),
                real: sel,
                ..Selection::default()
            })
        }
        RouteMode::AdaMoe { k_nominal } => {
            let ada = adamoe_select(ext_logits, real_logits.len(), *k_nominal)?;
            Ok(Selection {
                pool: ada.real.clone(),
                real: ada.real,
                nulls: ada.nulls,
                draws: 0,
            })
        }
    }
}

/// Output of [`combine`]: the mixed output and per-token (real gate weights, null mass).
pub(crate) struct Combined<'t> {
    pub output: Var<'t>,
    pub weights: Vec<(Vec<f64>, f64)>,
    pub invocations: u64,
}

/// Subset-softmax gating over each token's selection and the weighted sum of
/// the selected experts' outputs. Only selected experts are evaluated.
pub(crate) fn combine<'t>(
    layer: &BoundLayer<'t>,
    h: Var<'t>,
    gate_logits: Var<'t>,
    selections: &[Selection],
) -> Result<Combined<'t>> {
    let tape = h.tape();
    let (b, d) = {
        let s = h.shape();
        (s[0], s[1])
    };
    let n = layer.n_experts;
    let m = gate_logits.shape()[1];
    if selections.len() != b {
        return Err(Error::invalid("one selection per token required"));
    }
    let mut mask = vec![false; b * m];
    let mut rows_for: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (t, sel) in selections.iter().enumerate() {
        if sel.real.is_empty() && sel.nulls.is_empty() {
            return Err(Error::invalid(format!("empty expert selection for token {t}")));
        }
        for &e in &sel.real {
            if e >= n {
                return Err(Error::invalid(format!("expert index {e} out of range")));
            }
            mask[t * m + e] = true;
            rows_for[e].push(t);
        }
        for &j in &sel.nulls {
            if n + j >= m {
                return Err(Error::invalid(format!("null expert {j} out of range")));
            }
            mask[t * m + n + j] = true;
        }
    }
    let gates = gate_logits.masked_softmax_rows(&mask)?;
    let gate_values = gates.value();

    let mut output: Option<Var<'t>> = None;
    let mut invocations = 0u64;
    for (e, rows) in rows_for.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        invocations += rows.len() as u64;
        let xe = h.gather_rows(rows)?;
        let ye = layer.expert(e, xe)?;
        let pairs: Vec<(usize, usize)> = rows.iter().map(|&t| (t, e)).collect();
        let w = gates.gather_entries(&pairs)?;
        let contrib = ye.mul_rows(w)?.scatter_add_rows(rows, b)?;
        output = Some(match output {
            None => contrib,
            Some(acc) => acc.add(contrib)?,
        });
    }
    let output = match output {
        Some(o) => o,
        None => tape.constant(Tensor::zeros(&[b, d])),
    };
    let weights = selections
        .iter()
        .enumerate()
        .map(|(t, sel)| {
            let real = sel.real.iter().map(|&e| gate_values.at(t, e)).collect();
            let null_mass = sel.nulls.iter().map(|&j| gate_values.at(t, n + j)).sum();
            (real, null_mass)
        })
        .collect();
    Ok(Combined {
        output,
        weights,
        invocations,
    })
}

/// Weighted combination of the selected experts for a single token `x: [d]`.
/// Weights are the softmax of `logits` restricted to `selected`.
pub fn gate_and_combine(
    x: &Tensor,
    selected: &[usize],
    logits: &[f64],
    layer: &MoeLayer,
) -> Result<(Tensor, Vec<f64>)> {
    if selected.is_empty() {
        return Err(Error::invalid("empty expert selection"));
    }
    let n = layer.n_experts();
    if logits.len() != n {
        return Err(Error::invalid(format!("expected {n} logits, got {}", logits.len())));
    }
    let mut sorted = selected.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != selected.len() {
        return Err(Error::invalid("duplicate expert in selection"));
    }
    let tape = Tape::new();
    let bound = BoundLayer::bind(layer, &mut |t: &Tensor| tape.constant(t.clone()));
    let h = tape.constant(x.reshape(vec![1, layer.d()])?);
    let gl = tape.constant(Tensor::new(vec![1, n], logits.to_vec())?);
    let sel = Selection {
        pool: sorted.clone(),
        real: sorted,
        ..Selection::default()
    };
    let c = combine(&bound, h, gl, std::slice::from_ref(&sel))?;
    let y = c.output.value().reshape(vec![layer.d()])?;
    let (w, _) = c.weights.into_iter().next().expect("one token");
    Ok((y, w))
}

/// Reference output over the dense Top-`k_ideal` pool.
pub fn ideal_forward(x: &Tensor, k_ideal: usize, layer: &MoeLayer) -> Result<Tensor> {
    let logits = router_logits(&x.reshape(vec![1, layer.d()])?, layer)?;
    let pool = top_k_select(logits.data(), k_ideal)?;
    Ok(gate_and_combine(x, &pool, logits.data(), layer)?.0)
}

/// Subset softmax of `logits` over `selected` (in the order given).
pub(crate) fn subset_softmax(logits: &[f64], selected: &[usize]) -> Vec<f64> {
    let sub: Vec<f64> = selected.iter().map(|&i| logits[i]).collect();
    softmax_slice(&sub)
}
