//! Command-line frontend for the tba-core attack toolkit.
//!
//! Subcommands cover the whole experiment lifecycle: `train` a victim,
//! `attack` a single designated sample, run a full `batch`, `sweep` a
//! hyperparameter, cross-check a result against the exhaustive `oracle`,
//! evaluate the fine-tuning `defense`, and re-validate a stored
//! `report`. Every run is stamped with the config hash and seed.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on experiment
//! failures (including attacks that end without a valid pair).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use tba_core::baselines::{brute_force_flips, FlipSet, SearchScope};
use tba_core::harness::{
    finetune_defense_eval, run_batch, sweep, BatchReport, BatchSetup, DatasetSpec, DefenseConfig,
    ExperimentConfig, SweepParameter, TrialReport,
};
use tba_core::model::VictimModel;
use tba_core::objective::{AttackGoal, AttackSpec};
use tba_core::solver::solve;

#[derive(Parser)]
#[command(
    name = "tba",
    version,
    about = "Training-assisted bit-flip attacks on quantized classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the overrides shared by most subcommands. Flags win
/// over the file; the file wins over built-in defaults.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config as TOML; defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory for reports, traces and checkpoints.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Hinge margin slack k.
    #[arg(long)]
    margin_k: Option<f64>,
    #[arg(long)]
    aux_size: Option<usize>,
    /// Goals per trial; 2 or more switches to the multi-target attack.
    #[arg(long)]
    goals: Option<usize>,
    /// Solver gradient step size.
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Blob centroid separation (blob datasets only).
    #[arg(long)]
    separation: Option<f64>,
    /// Record per-iteration loss traces (written as CSV with reports).
    #[arg(long)]
    trace: bool,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                ExperimentConfig::from_toml_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.trials {
            cfg.trials = v;
        }
        if let Some(v) = &self.out {
            cfg.out_dir = Some(v.clone());
        }
        if let Some(v) = self.lambda1 {
            cfg.attack.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.attack.lambda2 = v;
        }
        if let Some(v) = self.margin_k {
            cfg.attack.margin_k = v;
        }
        if let Some(v) = self.aux_size {
            cfg.attack.aux_size = v;
        }
        if let Some(v) = self.goals {
            cfg.attack.goals_per_trial = v;
        }
        if let Some(v) = self.step_size {
            cfg.solver.step_size = v;
        }
        if let Some(v) = self.patience {
            cfg.solver.patience = v;
        }
        if let Some(v) = self.max_iters {
            cfg.solver.max_iters = v;
        }
        if let Some(v) = self.separation {
            match &mut cfg.dataset {
                DatasetSpec::Blobs { separation, .. } => *separation = v,
                _ => bail!("--separation only applies to blob datasets"),
            }
        }
        if self.trace {
            cfg.solver.record_trace = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the victim model and save its checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint destination; defaults to victim.ckpt in the
        /// output directory (or the working directory).
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Attack one designated test sample against a trained checkpoint.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Index of the designated sample in the test split.
        #[arg(long)]
        target_idx: usize,
        /// Target class the flipped model should predict.
        #[arg(long)]
        t: usize,
        /// Result JSON destination.
        #[arg(long, value_name = "FILE", default_value = "result.json")]
        result: PathBuf,
    },
    /// Run a seeded batch of attack trials and aggregate the metrics.
    Batch {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Re-run a batch while varying one hyperparameter.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One of: lambda1, lambda2, margin_k, aux_size.
        #[arg(long)]
        parameter: String,
        /// Comma-separated values to sweep over.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Cross-check an attack result against exhaustive enumeration.
    Oracle {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Result JSON produced by the attack subcommand.
        #[arg(long, value_name = "FILE")]
        result: PathBuf,
        /// Largest flip set size to enumerate.
        #[arg(long, default_value_t = 1)]
        max_flips: usize,
    },
    /// Fine-tune released models and measure surviving attacks.
    Defense {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Batch report JSON produced with the same config and seed.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
        #[arg(long, default_value_t = DefenseConfig::default().ft_samples)]
        ft_samples: usize,
        #[arg(long, default_value_t = DefenseConfig::default().ft_iters)]
        ft_iters: usize,
        #[arg(long, default_value_t = DefenseConfig::default().learning_rate)]
        ft_lr: f64,
        #[arg(long, default_value_t = DefenseConfig::default().reattack_budget)]
        reattack_budget: usize,
        /// Defense report destination; defaults next to the input.
        #[arg(long, value_name = "FILE")]
        result: Option<PathBuf>,
    },
    /// Validate and summarize a stored batch report.
    Report {
        /// Batch report JSON.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, checkpoint } => cmd_train(&cfg, checkpoint),
        Command::Attack {
            cfg,
            checkpoint,
            target_idx,
            t,
            result,
        } => cmd_attack(&cfg, &checkpoint, target_idx, t, &result),
        Command::Batch { cfg } => cmd_batch(&cfg),
        Command::Sweep {
            cfg,
            parameter,
            values,
        } => cmd_sweep(&cfg, &parameter, &values),
        Command::Oracle {
            cfg,
            checkpoint,
            result,
            max_flips,
        } => cmd_oracle(&cfg, &checkpoint, &result, max_flips),
        Command::Defense {
            cfg,
            report,
            ft_samples,
            ft_iters,
            ft_lr,
            reattack_budget,
            result,
        } => cmd_defense(
            &cfg,
            &report,
            DefenseConfig {
                ft_samples,
                ft_iters,
                learning_rate: ft_lr,
                reattack_budget,
            },
            result,
        ),
        Command::Report { input } => cmd_report(&input),
    }
}

fn stamp(cfg: &ExperimentConfig) {
    println!("config {} seed {}", cfg.config_hash(), cfg.seed);
}

fn cmd_train(args: &ConfigArgs, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = args.build()?;
    stamp(&cfg);
    let setup = BatchSetup::prepare(&cfg)?;
    let path = checkpoint.unwrap_or_else(|| match &cfg.out_dir {
        Some(dir) => dir.join("victim.ckpt"),
        None => PathBuf::from("victim.ckpt"),
    });
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    setup.victim.save_checkpoint(&path)?;
    println!(
        "trained victim on {}: test accuracy {:.4}, checkpoint {}",
        setup.dataset_id,
        setup.victim_test_accuracy,
        path.display()
    );
    Ok(())
}

fn cmd_attack(
    args: &ConfigArgs,
    checkpoint: &Path,
    target_idx: usize,
    t: usize,
    result_path: &Path,
) -> Result<()> {
    let cfg = args.build()?;
    stamp(&cfg);
    let victim = VictimModel::load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let setup = BatchSetup::prepare_with(&cfg, Some(victim))?;
    if target_idx >= setup.test.len() {
        bail!(
            "target-idx {target_idx} out of range, test split has {} samples",
            setup.test.len()
        );
    }
    let s = setup.test.label(target_idx);
    let predicted = setup.victim.predict(setup.test.input(target_idx))?;
    if predicted != s {
        bail!(
            "victim predicts class {predicted} for test sample {target_idx} (label {s}); \
             pick a correctly classified sample"
        );
    }
    let goal = AttackGoal::new(setup.test.input(target_idx).to_owned(), s, t)?;
    let spec = AttackSpec::single(
        goal.clone(),
        setup.aux.clone(),
        cfg.attack.lambda1,
        cfg.attack.lambda2,
        cfg.attack.margin_k,
    )?;
    let outcome = solve(&setup.victim, &spec, &cfg.solver, cfg.seed, Some(&setup.test))?;
    let report = TrialReport::from_result(0, std::slice::from_ref(&goal), &setup.victim, outcome)?;
    let payload = serde_json::json!({
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "dataset_id": setup.dataset_id,
        "victim_test_accuracy": setup.victim_test_accuracy,
        "result": report,
    });
    if let Some(parent) = result_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(result_path, format!("{:#}\n", payload))?;
    match (report.success, report.n_flip) {
        (true, Some(n)) => {
            println!(
                "attack succeeded: {s} -> {t} with {n} flip(s) after {} iterations, result {}",
                report.iterations,
                result_path.display()
            );
            Ok(())
        }
        _ => Err(anyhow!(
            "attack failed after {} iterations ({:?}); result {}",
            report.iterations,
            report.termination,
            result_path.display()
        )),
    }
}

fn cmd_batch(args: &ConfigArgs) -> Result<()> {
    let cfg = args.build()?;
    stamp(&cfg);
    let report = run_batch(&cfg)?;
    print_batch(&report);
    if let Some(dir) = &cfg.out_dir {
        println!("report written to {}", dir.join("report.json").display());
    }
    Ok(())
}

fn print_batch(report: &BatchReport) {
    println!(
        "dataset {} victim accuracy {:.4} ({} trials, {:?} mode)",
        report.dataset_id,
        report.victim_test_accuracy,
        report.trials.len(),
        report.mode,
    );
    println!(
        "asr {:.3} | n_flip {:.2} +/- {:.2} (n={}) | deployment {:.2} | acc released {:.4} | acc flipped {:.4}",
        report.asr,
        report.n_flip.mean,
        report.n_flip.std,
        report.n_flip.count,
        report.deployment_distance.mean,
        report.acc_released.mean,
        report.acc_flipped.mean,
    );
}

fn parse_parameter(name: &str) -> Result<SweepParameter> {
    match name {
        "lambda1" => Ok(SweepParameter::Lambda1),
        "lambda2" => Ok(SweepParameter::Lambda2),
        "margin_k" | "k" => Ok(SweepParameter::MarginK),
        "aux_size" => Ok(SweepParameter::AuxSize),
        other => bail!("unknown sweep parameter {other:?}; expected lambda1, lambda2, margin_k or aux_size"),
    }
}

fn cmd_sweep(args: &ConfigArgs, parameter: &str, values: &[f64]) -> Result<()> {
    let cfg = args.build()?;
    let parameter = parse_parameter(parameter)?;
    stamp(&cfg);
    let report = sweep(&cfg, parameter, values)?;
    for row in &report.rows {
        println!(
            "{} = {:>8}: asr {:.3} | n_flip {:.2} (n={}) | acc released {:.4}",
            row.parameter,
            row.value,
            row.report.asr,
            row.report.n_flip.mean,
            row.report.n_flip.count,
            row.report.acc_released.mean,
        );
    }
    if let Some(dir) = &cfg.out_dir {
        println!("sweep written to {}", dir.join("sweep.csv").display());
    }
    Ok(())
}

fn cmd_oracle(args: &ConfigArgs, checkpoint: &Path, result: &Path, max_flips: usize) -> Result<()> {
    let cfg = args.build()?;
    stamp(&cfg);
    let victim = VictimModel::load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let text = std::fs::read_to_string(result)
        .with_context(|| format!("reading result {}", result.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let trial: TrialReport = match value.get("result") {
        Some(inner) => serde_json::from_value(inner.clone())?,
        None => serde_json::from_value(value)?,
    };
    if !trial.success {
        bail!("stored trial was not a success; nothing to confirm");
    }
    if trial.sources.len() != 1 {
        bail!("oracle checks single-goal results only");
    }
    let released = trial
        .released
        .as_ref()
        .ok_or_else(|| anyhow!("result lacks the released tensor"))?;
    let flipped = trial
        .flipped
        .as_ref()
        .ok_or_else(|| anyhow!("result lacks the flipped tensor"))?;
    let diff = FlipSet::between(released, flipped)?;
    if diff.n_flip() > max_flips {
        bail!(
            "stored pair differs in {} bits, beyond the enumeration budget {max_flips}",
            diff.n_flip()
        );
    }
    let m_r = victim.with_fc_bits(released.clone())?;
    let x = ndarray::Array1::from(trial.inputs[0].clone());
    let found = brute_force_flips(
        &m_r,
        x.view(),
        trial.sources[0],
        trial.targets[0],
        max_flips,
        SearchScope::FullLayer,
    )?;
    let confirmed = found.iter().any(|f| f.coords() == diff.coords());
    println!(
        "enumeration found {} working flip set(s) of size <= {max_flips}",
        found.len()
    );
    if confirmed {
        println!("stored flip set confirmed by exhaustive enumeration");
        Ok(())
    } else {
        Err(anyhow!(
            "stored flip set {:?} is not among the enumerated solutions",
            diff.coords()
        ))
    }
}

fn cmd_defense(
    args: &ConfigArgs,
    report_path: &Path,
    defense: DefenseConfig,
    result: Option<PathBuf>,
) -> Result<()> {
    let cfg = args.build()?;
    stamp(&cfg);
    let text = std::fs::read_to_string(report_path)
        .with_context(|| format!("reading report {}", report_path.display()))?;
    let batch = BatchReport::from_json_str(&text)?;
    let outcome = finetune_defense_eval(&cfg, &batch, &defense)?;
    println!(
        "pre-defense asr {:.3} -> residual asr {:.3} after {} fine-tuning steps on {} samples",
        outcome.pre_asr, outcome.residual_asr, outcome.ft_iters, outcome.ft_samples,
    );
    println!(
        "greedy re-attack: success rate {:.3}, n_flip {:.2} (baseline on the original victim: {:.3}, {:.2})",
        outcome.reattack_success_rate,
        outcome.reattack_n_flip.mean,
        outcome.baseline_success_rate,
        outcome.baseline_n_flip.mean,
    );
    let dest = result.unwrap_or_else(|| report_path.with_file_name("defense.json"));
    std::fs::write(&dest, outcome.to_json_string()?)?;
    println!("defense report written to {}", dest.display());
    Ok(())
}

fn cmd_report(input: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("reading report {}", input.display()))?;
    let report = BatchReport::from_json_str(&text)?;
    println!("config {} seed {}", report.config_hash, report.seed);
    print_batch(&report);
    let failures: Vec<usize> = report
        .trials
        .iter()
        .filter(|t| !t.success)
        .map(|t| t.trial)
        .collect();
    if !failures.is_empty() {
        println!("failed trials: {failures:?}");
    }
    if !report.aggregates_consistent() {
        return Err(anyhow!(
            "stored aggregates do not match the per-trial records"
        ));
    }
    println!("aggregates verified against per-trial records");
    Ok(())
}
