//! `emoe` command line. Exit codes: 0 success, 1 invalid input, 2 runtime
//! failure or a failed check.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::checkpoint::Checkpoint;
use super::checks::{model_gradcheck, verify_sampling, GRADCHECK_THRESHOLD};
use super::config::{Mode, RunConfig, Seeds};
use super::eval::{ablation_csv, evaluate, mean_accuracy, run_arms, sweep, Arm};
use super::fsio::{read_string, resolve_output, write_atomic};
use super::train::{prepare_data, train_to_dir};
use crate::diagnostics::{drift_csv, drift_profile, layer_matrices};
use crate::exec::Exec;
use crate::moe::RouteMode;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "emoe", version, about = "Desk-scale mixture-of-experts lab")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics.jsonl plus checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint with one deterministic routing rule.
    Eval(EvalArgs),
    /// Top-k' sweep with co-occurrence drift; writes report.csv and report.json.
    Sweep(SweepArgs),
    /// Write co-occurrence matrices and the drift profile.
    Diagnose(SweepArgs),
    /// Monte Carlo check of the pair co-activation probability.
    VerifySampling(VerifyArgs),
    /// Finite-difference check of a full elastic training objective.
    Gradcheck(GradcheckArgs),
    /// Train the four ablation arms over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    /// Routing mode: topk, emoe, topp or adamoe.
    #[arg(long)]
    mode: Option<Mode>,
    /// Disable co-activation sampling (pool is the top-k_train set).
    #[arg(long)]
    no_coact: bool,
    /// Weight of the hierarchical router loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Sets the init, data and sampling seeds.
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if self.no_coact {
            cfg.elastic.sampling_enabled = false;
        }
        if let Some(l) = self.lambda {
            cfg.losses.lambda = l;
        }
        if let Some(s) = self.seed {
            cfg.seeds = Seeds::all(s);
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Run directory; relative paths resolve under $EMOE_OUTPUT_ROOT.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory (manifest.json + weights.bin).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, conflicts_with_all = ["top_p", "k_nominal"])]
    k_prime: Option<usize>,
    #[arg(long, conflicts_with = "k_nominal")]
    top_p: Option<f64>,
    #[arg(long)]
    k_nominal: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 6, 8])]
    k_primes: Vec<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 2)]
    k_train: usize,
    #[arg(long, default_value_t = 8)]
    k_ideal: usize,
    #[arg(long, default_value_t = 100_000)]
    draws: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 6, 8])]
    k_primes: Vec<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match dispatch(cli.command, exec) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(path: Option<&Path>, default_mode: Mode) -> Result<(RunConfig, String)> {
    match path {
        Some(p) => {
            let text = read_string(p)?;
            Ok((RunConfig::from_toml_str(&text)?, text))
        }
        None => {
            let cfg = RunConfig::new(default_mode);
            let text = cfg.to_toml();
            Ok((cfg, text))
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(command: Command, exec: Exec) -> Result<bool> {
    match command {
        Command::Train(args) => {
            let (mut cfg, text) = load_config(args.config.as_deref(), Mode::Emoe)?;
            args.overrides.apply(&mut cfg);
            cfg.validate()?;
            // the stored document is the effective config; overrides included
            let text = if cfg == RunConfig::from_toml_str(&text)? {
                text
            } else {
                cfg.to_toml()
            };
            let dir = args
                .output
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from(format!("train-{}", cfg.mode)));
            let dir = resolve_output(&dir);
            let (outcome, artifacts) = train_to_dir(&cfg, &text, &dir)?;
            let last = outcome.steps.last().expect("at least one step");
            println!(
                "trained {} steps, final loss {:.6}, expert invocations {}",
                outcome.steps.len(),
                last.total,
                outcome.invocations
            );
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("metrics: {}", artifacts.metrics.display());
            Ok(true)
        }
        Command::Eval(args) => {
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let cfg = ckpt.config()?;
            let mode = match (args.k_prime, args.top_p, args.k_nominal) {
                (Some(k), _, _) => RouteMode::TopK(k),
                (_, Some(p), _) => RouteMode::TopP(p),
                (_, _, Some(k)) => RouteMode::AdaMoe { k_nominal: k },
                _ => return Err(Error::invalid("one of --k-prime, --top-p, --k-nominal is required")),
            };
            let (_, eval_set) = prepare_data(&cfg)?;
            let metrics = evaluate(&ckpt.model, &eval_set, &mode, exec)?;
            print_json(&metrics)?;
            if let Some(out) = args.output {
                write_atomic(&resolve_output(&out), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
            }
            Ok(true)
        }
        Command::Sweep(args) => {
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let cfg = ckpt.config()?;
            let (_, eval_set) = prepare_data(&cfg)?;
            let report = sweep(
                &ckpt.model,
                &eval_set,
                &cfg.reference_route(),
                &args.k_primes,
                &ckpt.manifest_hash()?,
                exec,
            )?;
            let csv = report.to_csv();
            print!("{csv}");
            let dir = resolve_output(&args.output.unwrap_or_else(|| PathBuf::from("sweep")));
            write_atomic(&dir.join("report.csv"), csv.as_bytes())?;
            write_atomic(&dir.join("report.json"), report.to_json()?.as_bytes())?;
            Ok(true)
        }
        Command::Diagnose(args) => {
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let cfg = ckpt.config()?;
            let (_, eval_set) = prepare_data(&cfg)?;
            let dir = resolve_output(&args.output.unwrap_or_else(|| PathBuf::from("diagnose")));
            let reference = cfg.reference_route();
            for m in layer_matrices(&ckpt.model, &eval_set, &reference, exec)? {
                write_atomic(&dir.join(format!("cooc_layer{}.json", m.layer)), m.to_json()?.as_bytes())?;
            }
            for &k in &args.k_primes {
                for m in layer_matrices(&ckpt.model, &eval_set, &RouteMode::TopK(k), exec)? {
                    write_atomic(
                        &dir.join(format!("k{k}")).join(format!("cooc_layer{}.json", m.layer)),
                        m.to_json()?.as_bytes(),
                    )?;
                }
            }
            let rows = drift_profile(&ckpt.model, &eval_set, &reference, &args.k_primes, exec)?;
            let csv = drift_csv(&rows);
            print!("{csv}");
            write_atomic(&dir.join("drift.csv"), csv.as_bytes())?;
            Ok(true)
        }
        Command::VerifySampling(args) => {
            let check = verify_sampling(args.k_train, args.k_ideal, args.draws, args.seed, exec)?;
            println!("closed form:   {:.6}", check.closed_form);
            println!("binomial form: {:.6}", check.binomial_form);
            println!(
                "monte carlo:   {:.6} ({} / {} draws), 3 sigma bound ±{:.6}",
                check.estimate, check.hits, check.draws, check.bound
            );
            println!("{}", if check.within { "within bound" } else { "OUTSIDE bound" });
            Ok(check.within)
        }
        Command::Gradcheck(args) => {
            let check = model_gradcheck(args.seed, args.eps)?;
            println!(
                "max relative error {:.3e} over {} entries (threshold {:.0e})",
                check.max_rel_error, check.checked, GRADCHECK_THRESHOLD
            );
            Ok(check.passed)
        }
        Command::Ablate(args) => {
            let (cfg, _) = load_config(args.config.as_deref(), Mode::Emoe)?;
            if args.seeds.is_empty() {
                return Err(Error::invalid("empty seed list"));
            }
            let runs = run_arms(&cfg, &Arm::ALL, &args.seeds, &args.k_primes, exec)?;
            let csv = ablation_csv(&runs);
            let dir = resolve_output(&args.output.unwrap_or_else(|| PathBuf::from("ablate")));
            write_atomic(&dir.join("ablation.csv"), csv.as_bytes())?;
            println!("arm,k_prime,mean_accuracy");
            for arm in Arm::ALL {
                for &k in &args.k_primes {
                    if let Some(acc) = mean_accuracy(&runs, arm, k) {
                        println!("{},{k},{acc:.4}", arm.name());
                    }
                }
            }
            println!("written: {}", dir.join("ablation.csv").display());
            Ok(true)
        }
    }
}
