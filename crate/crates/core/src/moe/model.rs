use serde::{Deserialize, Serialize};

use super::{combine, select_token, BoundLayer, BoundLinear, Linear, MoeLayer, RouteMode, RoutingRecord};
use crate::exec::Exec;
use crate::numcore::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Architecture of the toy model:
/// `linear-in → n_layers × (h + MoE(h)) → linear classifier`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_in: usize,
    pub d: usize,
    pub d_h: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub n_null: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input: Linear,
    pub blocks: Vec<MoeLayer>,
    pub head: Linear,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardStats {
    /// Expert evaluations, summed over tokens and blocks.
    pub invocations: u64,
    /// Random draws consumed by pool-size and subset sampling.
    pub sampling_draws: u64,
    pub tokens: u64,
}

impl ForwardStats {
    pub fn merge(&mut self, other: &ForwardStats) {
        self.invocations += other.invocations;
        self.sampling_draws += other.sampling_draws;
        self.tokens += other.tokens;
    }
}

/// Tape-level result of one forward pass.
pub struct ForwardPass<'t> {
    pub logits: Var<'t>,
    /// Full router softmax per block, `[B×N]`.
    pub router_probs: Vec<Var<'t>>,
    /// `records[layer][token]`.
    pub records: Vec<Vec<RoutingRecord>>,
    pub stats: ForwardStats,
}

pub(crate) struct BoundModel<'t> {
    input: BoundLinear<'t>,
    blocks: Vec<BoundLayer<'t>>,
    head: BoundLinear<'t>,
    pub vars: Vec<Var<'t>>,
}

impl Model {
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        if shape.d_in == 0 || shape.d == 0 || shape.n_classes < 2 {
            return Err(Error::Config(format!("degenerate model shape {shape:?}")));
        }
        if shape.n_layers == 0 {
            return Err(Error::Config("need at least one MoE block".into()));
        }
        let slots_per_block = 1 + 2 * shape.n_experts as u64;
        let blocks = (0..shape.n_layers as u64)
            .map(|l| {
                MoeLayer::init(
                    shape.d,
                    shape.d_h,
                    shape.n_experts,
                    shape.n_null,
                    seed,
                    2 + l * slots_per_block,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input: Linear::init(shape.d_in, shape.d, seed, 0),
            blocks,
            head: Linear::init(shape.d, shape.n_classes, seed, 1),
        })
    }

    pub fn shape(&self) -> ModelShape {
        let first = &self.blocks[0];
        ModelShape {
            d_in: self.input.d_in(),
            d: self.input.d_out(),
            d_h: first.d_hidden(),
            n_layers: self.blocks.len(),
            n_experts: first.n_experts(),
            n_classes: self.head.d_out(),
            n_null: first.n_null,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.blocks[0].n_experts()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.shape();
        for b in &self.blocks {
            b.validate()?;
            if b.d() != shape.d || b.n_experts() != shape.n_experts || b.n_null != shape.n_null {
                return Err(Error::Config("MoE blocks disagree on shape".into()));
            }
        }
        if self.head.d_in() != shape.d {
            return Err(Error::Config("classifier width mismatch".into()));
        }
        Ok(())
    }

    /// Parameters with stable names, in the order used by checkpoints and optimizers.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input.weight".to_string(), &self.input.weight),
            ("input.bias".to_string(), &self.input.bias),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.router"), &b.router));
            for (e, ex) in b.experts.iter().enumerate() {
                out.push((format!("block{l}.expert{e}.up.weight"), &ex.up.weight));
                out.push((format!("block{l}.expert{e}.up.bias"), &ex.up.bias));
                out.push((format!("block{l}.expert{e}.down.weight"), &ex.down.weight));
                out.push((format!("block{l}.expert{e}.down.bias"), &ex.down.bias));
            }
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input.weight, &mut self.input.bias];
        for b in &mut self.blocks {
            out.push(&mut b.router);
            for ex in &mut b.experts {
                out.push(&mut ex.up.weight);
                out.push(&mut ex.up.bias);
                out.push(&mut ex.down.weight);
                out.push(&mut ex.down.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        self.bind_with(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Binds with leaves supplied by `source`, called once per tensor in
    /// parameter order.
    pub(crate) fn bind_with<'t>(&self, mut source: impl FnMut(&Tensor) -> Var<'t>) -> BoundModel<'t> {
        let mut vars = Vec::new();
        let mut reg = |t: &Tensor| {
            let v = source(t);
            vars.push(v);
            v
        };
        let input = BoundLinear::bind(&self.input, &mut reg);
        let blocks = self.blocks.iter().map(|b| BoundLayer::bind(b, &mut reg)).collect();
        let head = BoundLinear::bind(&self.head, &mut reg);
        BoundModel {
            input,
            blocks,
            head,
            vars,
        }
    }
}

impl<'t> BoundModel<'t> {
    /// Forward pass for a batch `x: [B×d_in]`; `token_ids` key the sampling streams.
    pub fn forward(&self, x: Var<'t>, token_ids: &[u64], mode: &RouteMode) -> Result<ForwardPass<'t>> {
        let b = x.shape()[0];
        if token_ids.len() != b {
            return Err(Error::invalid("one token id per batch row required"));
        }
        let mut h = self.input.apply(x)?;
        let mut router_probs = Vec::with_capacity(self.blocks.len());
        let mut records = Vec::with_capacity(self.blocks.len());
        let mut stats = ForwardStats {
            tokens: b as u64,
            ..ForwardStats::default()
        };
        for (li, layer) in self.blocks.iter().enumerate() {
            mode.validate(layer.n_experts, layer.n_null)?;
            let n = layer.n_experts;
            let ext = h.matmul(layer.router)?;
            let real = if layer.n_null > 0 {
                ext.slice_cols(0, n)?
            } else {
                ext
            };
            let probs = real.softmax_rows()?;
            let (ext_v, real_v, probs_v) = (ext.value(), real.value(), probs.value());
            let selections = (0..b)
                .map(|t| {
                    select_token(
                        mode,
                        li,
                        token_ids[t],
                        real_v.row(t),
                        ext_v.row(t),
                        probs_v.row(t),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let gate_src = if matches!(mode, RouteMode::AdaMoe { .. }) {
                ext
            } else {
                real
            };
            let combined = combine(layer, h, gate_src, &selections)?;
            stats.invocations += combined.invocations;
            let layer_records = selections
                .into_iter()
                .zip(combined.weights)
                .enumerate()
                .map(|(t, (sel, (w, null_mass)))| {
                    stats.sampling_draws += sel.draws;
                    RoutingRecord {
                        token_index: token_ids[t],
                        pool: sel.pool,
                        selected: sel.real,
                        gate_weights: w,
                        null_mass,
                        full_probs: probs_v.row(t).to_vec(),
                    }
                })
                .collect();
            h = h.add(combined.output)?;
            router_probs.push(probs);
            records.push(layer_records);
        }
        Ok(ForwardPass {
            logits: self.head.apply(h)?,
            router_probs,
            records,
            stats,
        })
    }
}

/// Untracked forward result over a whole input matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub logits: Tensor,
    /// `records[layer][row]`.
    pub records: Vec<Vec<RoutingRecord>>,
    pub stats: ForwardStats,
}

/// Forward pass of a batch with token ids `0..B`.
pub fn model_forward(batch: &Tensor, mode: &RouteMode, model: &Model) -> Result<InferOutput> {
    let ids: Vec<u64> = (0..batch.rows() as u64).collect();
    infer(model, batch, &ids, mode, Exec::Sequential)
}

const INFER_CHUNK: usize = 256;

/// Frozen-model forward over `inputs`, split into chunks that may run concurrently.
/// Output is independent of the execution strategy.
pub fn infer(model: &Model, inputs: &Tensor, token_ids: &[u64], mode: &RouteMode, exec: Exec) -> Result<InferOutput> {
    let m = inputs.rows();
    if token_ids.len() != m {
        return Err(Error::invalid("one token id per input row required"));
    }
    if inputs.shape().len() != 2 || inputs.cols() != model.input.d_in() {
        return Err(Error::invalid(format!(
            "input shape {:?} does not match model input width {}",
            inputs.shape(),
            model.input.d_in()
        )));
    }
    let starts: Vec<usize> = (0..m).step_by(INFER_CHUNK).collect();
    let chunks = exec.map(&starts, |&start| -> Result<InferOutput> {
        let end = (start + INFER_CHUNK).min(m);
        let d = inputs.cols();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let x = tape.constant(Tensor::new(
            vec![end - start, d],
            inputs.data()[start * d..end * d].to_vec(),
        )?);
        let pass = bound.forward(x, &token_ids[start..end], mode)?;
        Ok(InferOutput {
            logits: pass.logits.value(),
            records: pass.records,
            stats: pass.stats,
        })
    });
    let n_classes = model.head.d_out();
    let mut logits = Vec::with_capacity(m * n_classes);
    let mut records: Vec<Vec<RoutingRecord>> = vec![Vec::with_capacity(m); model.blocks.len()];
    let mut stats = ForwardStats::default();
    for chunk in chunks {
        let chunk = chunk?;
        logits.extend_from_slice(chunk.logits.data());
        for (acc, layer) in records.iter_mut().zip(chunk.records) {
            acc.extend(layer);
        }
        stats.merge(&chunk.stats);
    }
    Ok(InferOutput {
        logits: Tensor::new(vec![m, n_classes], logits)?,
        records,
        stats,
    })
}
