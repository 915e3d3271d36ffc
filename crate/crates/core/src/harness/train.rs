use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::fsio;
use super::optim::Optimizer;
use crate::diagnostics::{CoOccurrenceCounts, CoOccurrenceMatrix};
use crate::elastic::{derive_seed, Purpose, RngStream};
use crate::losses::{hr_loss_var, load_balance_var};
use crate::moe::{ForwardPass, Model};
use crate::numcore::{NumError, Tape, Tensor, Var};
use crate::tasks::{gen_cluster_teacher, split, Dataset};
use crate::{Error, Result};

const SHUFFLE_LANE: u64 = 0x7368_7566;

/// Train and eval splits for `cfg`, regenerated from the data seed.
pub fn prepare_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let ds = gen_cluster_teacher(&cfg.task, cfg.seeds.data)?;
    split(&ds, cfg.task.train_fraction, cfg.seeds.data)
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub ce: f64,
    pub lb: f64,
    pub hr: f64,
    pub total: f64,
    /// Mean experts evaluated per token per block.
    pub mean_k: f64,
    pub hr_per_layer: Vec<f64>,
    pub lb_per_layer: Vec<f64>,
}

pub enum TrainEvent<'a> {
    Step(&'a StepMetrics),
    Epoch {
        epoch: usize,
        checkpoint: &'a Checkpoint,
        cooccurrence: &'a [CoOccurrenceMatrix],
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub steps: Vec<StepMetrics>,
    /// Expert evaluations over the whole run.
    pub invocations: u64,
    pub final_checkpoint: Checkpoint,
    /// Training-time co-occurrence per epoch, then per layer.
    pub train_cooccurrence: Vec<Vec<CoOccurrenceMatrix>>,
}

impl TrainOutcome {
    /// Mean total loss over the steps of `epoch` (0-based).
    pub fn epoch_loss(&self, epoch: usize) -> Option<f64> {
        let xs: Vec<f64> = self.steps.iter().filter(|s| s.epoch == epoch).map(|s| s.total).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Num(NumError::NonFinite { .. }) => Error::NonFiniteLoss { step },
        other => other,
    }
}

fn mean_of<'t>(vars: &[Var<'t>]) -> Result<Var<'t>, NumError> {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = acc.add(*v)?;
    }
    acc.scale(1.0 / vars.len() as f64)
}

fn batch_of(data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let d = data.d();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(data.inputs.row(i));
    }
    Ok(Tensor::new(vec![idx.len(), d], out)?)
}

/// Runs the full training loop in memory. Deterministic given the config.
///
pub(crate) struct Objective<'t> {
    pub ce: Var<'t>,
    pub lb: Var<'t>,
    pub hr: Var<'t>,
    pub hr_layers: Vec<Var<'t>>,
    pub lb_layers: Vec<Var<'t>>,
    pub total: Var<'t>,
}

/// `ce + lb + λ·hr` with the router terms averaged over blocks. The hr
/// term is left off the tape entirely when `λ = 0`.
pub(crate) fn objective<'t>(
    pass: &ForwardPass<'t>,
    targets: &[usize],
    lambda: f64,
    lb_coeff: f64,
) -> Result<Objective<'t>> {
    let ce = pass.logits.cross_entropy(targets)?;
    let hr_layers = pass
        .router_probs
        .iter()
        .map(|p| hr_loss_var(*p))
        .collect::<Result<Vec<_>>>()?;
    let lb_layers = pass
        .router_probs
        .iter()
        .zip(&pass.records)
        .map(|(p, recs)| load_balance_var(*p, recs, lb_coeff))
        .collect::<Result<Vec<_>>>()?;
    let hr = mean_of(&hr_layers)?;
    let lb = mean_of(&lb_layers)?;
    let mut total = ce.add(lb)?;
    if lambda != 0.0 {
        total = total.add(hr.scale(lambda)?)?;
    }
    Ok(Objective {
        ce,
        lb,
        hr,
        hr_layers,
        lb_layers,
        total,
    })
}

/// Each step routes the batch with the configured rule, builds
/// `ce + lb + λ·hr` (block-averaged router terms), back-propagates, and updates.
pub fn train(
    cfg: &RunConfig,
    config_text: &str,
    train_set: &Dataset,
    mut observer: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.d() != cfg.task.d {
        return Err(Error::Config("training data width does not match task.d".into()));
    }
    let mut model = Model::init(cfg.model_shape(), cfg.seeds.init)?;
    let mut optimizer = Optimizer::new(&cfg.optimizer);
    let lambda = cfg.effective_lambda();
    let lb_coeff = cfg.losses.lb_coeff;
    let n = cfg.model.n_experts;
    let n_layers = cfg.model.n_layers;
    let shuffle_seed = derive_seed(cfg.seeds.data, SHUFFLE_LANE);

    let mut steps = Vec::new();
    let mut invocations = 0u64;
    let mut step: u64 = 0;
    let mut train_cooc = Vec::new();
    let mut final_checkpoint = None;

    for epoch in 0..cfg.optimizer.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut RngStream::new(shuffle_seed, Purpose::Data, epoch as u64, 0));
        let mut epoch_counts = vec![CoOccurrenceCounts::new(n); n_layers];

        for batch in order.chunks(cfg.optimizer.batch_size) {
            let targets: Vec<usize> = batch.iter().map(|&i| train_set.targets[i]).collect();
            let ids: Vec<u64> = batch.iter().map(|&i| i as u64).collect();
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let x = tape.constant(batch_of(train_set, batch)?);
            let pass = bound
                .forward(x, &ids, &cfg.train_route(step))
                .map_err(|e| at_step(e, step))?;

            let Objective {
                ce,
                lb,
                hr,
                hr_layers,
                lb_layers,
                total,
            } = objective(&pass, &targets, lambda, lb_coeff).map_err(|e| at_step(e, step))?;
            let total_value = total.item()?;
            if !total_value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = tape.backward(total)?;
            let grads: Vec<Tensor> = bound.vars.iter().map(|v| grads.wrt(*v)).collect();
            if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss { step });
            }
            optimizer.step(model.tensors_mut(), &grads);

            for (counts, recs) in epoch_counts.iter_mut().zip(&pass.records) {
                for r in recs {
                    counts.add(&r.selected)?;
                }
            }
            invocations += pass.stats.invocations;
            let metrics = StepMetrics {
                step,
                epoch,
                ce: ce.item()?,
                lb: lb.item()?,
                hr: hr.item()?,
                total: total_value,
                mean_k: pass.stats.invocations as f64 / (batch.len() * n_layers) as f64,
                hr_per_layer: hr_layers.iter().map(|v| v.item()).collect::<Result<_, _>>()?,
                lb_per_layer: lb_layers.iter().map(|v| v.item()).collect::<Result<_, _>>()?,
            };
            observer(TrainEvent::Step(&metrics))?;
            steps.push(metrics);
            step += 1;
        }

        let cooc = epoch_counts
            .iter()
            .enumerate()
            .map(|(l, c)| c.normalize(l))
            .collect::<Result<Vec<_>>>()?;
        let checkpoint = Checkpoint::new(model.clone(), config_text, cfg.seeds, epoch + 1);
        observer(TrainEvent::Epoch {
            epoch,
            checkpoint: &checkpoint,
            cooccurrence: &cooc,
        })?;
        train_cooc.push(cooc);
        final_checkpoint = Some(checkpoint);
    }

    Ok(TrainOutcome {
        model,
        steps,
        invocations,
        final_checkpoint: final_checkpoint.expect("at least one epoch"),
        train_cooccurrence: train_cooc,
    })
}

/// Paths written by [`train_to_dir`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

/// Trains and writes `metrics.jsonl`, per-epoch checkpoints
/// (`checkpoints/epoch<e>/`), per-epoch training co-occurrence matrices, and
/// the final `checkpoint/`.
pub fn train_to_dir(cfg: &RunConfig, config_text: &str, dir: &Path) -> Result<(TrainOutcome, RunArtifacts)> {
    fsio::ensure_dir(dir)?;
    let (train_set, _) = prepare_data(cfg)?;
    fsio::write_atomic(&dir.join("config.toml"), config_text.as_bytes())?;

    let metrics_path = dir.join("metrics.jsonl");
    let partial = dir.join(".metrics.jsonl.partial");
    let file = File::create(&partial).map_err(|e| Error::io(&partial, e))?;
    let mut log = BufWriter::new(file);
    let result = train(cfg, config_text, &train_set, |event| match event {
        TrainEvent::Step(m) => {
            let line = serde_json::to_string(m)?;
            writeln!(log, "{line}").map_err(|e| Error::io(&partial, e))
        }
        TrainEvent::Epoch {
            epoch,
            checkpoint,
            cooccurrence,
        } => {
            let epoch_dir = dir.join("checkpoints").join(format!("epoch{}", epoch + 1));
            checkpoint.save(&epoch_dir)?;
            for m in cooccurrence {
                fsio::write_atomic(
                    &epoch_dir.join(format!("train_cooc_layer{}.json", m.layer)),
                    m.to_json()?.as_bytes(),
                )?;
            }
            Ok(())
        }
    });
    log.flush().map_err(|e| Error::io(&partial, e))?;
    drop(log);
    fs::rename(&partial, &metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let outcome = result?;
    let checkpoint = dir.join("checkpoint");
    outcome.final_checkpoint.save(&checkpoint)?;
    Ok((
        outcome,
        RunArtifacts {
            dir: dir.to_path_buf(),
            metrics: metrics_path,
            checkpoint,
        },
    ))
}
