//! Experiment orchestration: data generation, trial batches, sweeps,
//! the fine-tuning defense evaluation and report emission.
//!
//! Everything here is seeded and deterministic: the same configuration
//! produces byte-identical JSON reports, independent of the execution
//! mode or thread count. Trials within a batch run on a worker pool and
//! share the victim model and datasets read-only.

mod config;
mod defense;
mod report;
mod stats;

pub use config::{ArchConfig, AttackConfig, DatasetSpec, ExperimentConfig};
pub use defense::{finetune_defense_eval, finetune_defense_eval_with, DefenseConfig};
pub use report::{BatchReport, DefenseReport, DefenseTrial, SweepReport, SweepRow, TrialReport};
pub use stats::{spearman, summary, SummaryStats};

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::model::{
    train_victim, ArchSpec, Dataset, ModelMeta, TrainOptions, VictimModel,
};
use crate::objective::{AttackGoal, AttackMode, AttackSpec};
use crate::solver::{solve, solve_multi, write_trace_csv};

/// Seed stream tags, so each consumer of the experiment seed gets an
/// independent deterministic stream.
const STREAM_DATA: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TARGETS: u64 = 3;
const STREAM_AUX: u64 = 4;
const STREAM_DEFENSE: u64 = 5;
const STREAM_TRIAL_BASE: u64 = 0x100;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = (1.0 - rng.random::<f64>()).max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `k` distinct values drawn from `pool` by partial Fisher-Yates.
fn sample_without_replacement(
    rng: &mut ChaCha8Rng,
    pool: &[usize],
    k: usize,
) -> Vec<usize> {
    let mut pool = pool.to_vec();
    for i in 0..k {
        let j = i + rng.random_range(0..pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Seeded Gaussian clusters with unit within-cluster deviation and
/// pairwise centroid distance `separation` (exact while the class count
/// does not exceed the dimension, approximate past that). Returns the
/// 80/20 train/test split.
pub fn generate_blobs(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if per_class == 0 {
        return Err(Error::Dataset("per_class must be positive".into()));
    }
    if per_class < 5 {
        return Err(Error::Dataset(
            "per_class must be at least 5 so the 80/20 split leaves test samples".into(),
        ));
    }
    if classes < 2 {
        return Err(Error::Dataset("blobs need at least 2 classes".into()));
    }
    if dim == 0 {
        return Err(Error::Dataset("blob dimension must be positive".into()));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::Dataset("separation must be positive and finite".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = separation / std::f64::consts::SQRT_2;
    let mut centroids = Array2::<f64>::zeros((classes, dim));
    for c in 0..classes {
        if c < dim {
            centroids[(c, c)] = scale;
        } else {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    for (d, x) in v.iter().enumerate() {
                        centroids[(c, d)] = scale * x / norm;
                    }
                    break;
                }
            }
        }
    }

    let n_train = per_class * 4 / 5;
    let n_test = per_class - n_train;
    let mut train_rows = Vec::with_capacity(classes * n_train * dim);
    let mut test_rows = Vec::with_capacity(classes * n_test * dim);
    let mut train_labels = Vec::with_capacity(classes * n_train);
    let mut test_labels = Vec::with_capacity(classes * n_test);
    for c in 0..classes {
        for i in 0..per_class {
            let row: Vec<f64> = (0..dim)
                .map(|d| centroids[(c, d)] + gaussian(&mut rng))
                .collect();
            if i < n_train {
                train_rows.extend_from_slice(&row);
                train_labels.push(c);
            } else {
                test_rows.extend_from_slice(&row);
                test_labels.push(c);
            }
        }
    }
    let train_inputs = Array2::from_shape_vec((classes * n_train, dim), train_rows)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let test_inputs = Array2::from_shape_vec((classes * n_test, dim), test_rows)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((
        Dataset::new(train_inputs, train_labels, classes)?,
        Dataset::new(test_inputs, test_labels, classes)?,
    ))
}

/// Draws `trials` attack goals without replacement from the
/// correctly-classified test points; the target class is uniform over
/// the classes other than the source.
pub fn select_targets(
    model: &VictimModel,
    test: &Dataset,
    trials: usize,
    seed: u64,
) -> Result<Vec<AttackGoal>> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let mut eligible = Vec::new();
    for i in 0..test.len() {
        if model.predict(test.input(i))? == test.label(i) {
            eligible.push(i);
        }
    }
    if eligible.len() < trials {
        return Err(Error::Setup(format!(
            "only {} correctly-classified test samples, need {trials}",
            eligible.len()
        )));
    }
    let classes = test.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample_without_replacement(&mut rng, &eligible, trials);
    let mut goals = Vec::with_capacity(trials);
    for idx in chosen {
        let s = test.label(idx);
        let mut t = rng.random_range(0..classes - 1);
        if t >= s {
            t += 1;
        }
        goals.push(AttackGoal::new(test.input(idx).to_owned(), s, t)?);
    }
    Ok(goals)
}

/// One goal for every ordered class pair (s, t), drawing a random
/// correctly-classified sample of each source class. Source classes
/// without any correctly-classified sample are skipped with a warning.
pub fn select_targets_grid(
    model: &VictimModel,
    test: &Dataset,
    seed: u64,
) -> Result<Vec<AttackGoal>> {
    let classes = test.classes();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..test.len() {
        if model.predict(test.input(i))? == test.label(i) {
            pools[test.label(i)].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut goals = Vec::new();
    for s in 0..classes {
        if pools[s].is_empty() {
            eprintln!(
                "warning: no correctly-classified sample of class {s}; skipping its pairs"
            );
            continue;
        }
        for t in 0..classes {
            if t == s {
                continue;
            }
            let idx = pools[s][rng.random_range(0..pools[s].len())];
            goals.push(AttackGoal::new(test.input(idx).to_owned(), s, t)?);
        }
    }
    Ok(goals)
}

/// Per-trial goal lists for the multi-target attack. Each trial uses
/// disjoint class pairs: a class shuffle is cut into (source, target)
/// pairs, and each source gets a random correctly-classified sample.
pub fn select_multi_goals(
    model: &VictimModel,
    test: &Dataset,
    trials: usize,
    goals_per_trial: usize,
    seed: u64,
) -> Result<Vec<Vec<AttackGoal>>> {
    let classes = test.classes();
    if goals_per_trial == 0 {
        return Err(Error::Config("goals_per_trial must be at least 1".into()));
    }
    if 2 * goals_per_trial > classes {
        return Err(Error::Config(format!(
            "{goals_per_trial} disjoint class pairs need {} classes, have {classes}",
            2 * goals_per_trial
        )));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..test.len() {
        if model.predict(test.input(i))? == test.label(i) {
            pools[test.label(i)].push(i);
        }
    }
    if let Some(empty) = pools.iter().position(|p| p.is_empty()) {
        return Err(Error::Setup(format!(
            "class {empty} has no correctly-classified test sample"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut order: Vec<usize> = (0..classes).collect();
        for i in 0..classes {
            let j = i + rng.random_range(0..classes - i);
            order.swap(i, j);
        }
        let mut goals = Vec::with_capacity(goals_per_trial);
        for g in 0..goals_per_trial {
            let s = order[2 * g];
            let t = order[2 * g + 1];
            let idx = pools[s][rng.random_range(0..pools[s].len())];
            goals.push(AttackGoal::new(test.input(idx).to_owned(), s, t)?);
        }
        all.push(goals);
    }
    Ok(all)
}

/// Shared per-batch state: the trained victim, cached datasets and the
/// selected goals.
#[derive(Debug, Clone)]
pub struct BatchSetup {
    pub victim: VictimModel,
    pub train: Dataset,
    pub test: Dataset,
    pub aux: Dataset,
    pub goals: Vec<Vec<AttackGoal>>,
    pub dataset_id: String,
    pub victim_test_accuracy: f64,
}

fn realize_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, String)> {
    match &cfg.dataset {
        DatasetSpec::Blobs {
            classes,
            dim,
            per_class,
            separation,
        } => {
            let (train, test) = generate_blobs(
                *classes,
                *dim,
                *per_class,
                *separation,
                derive_seed(cfg.seed, STREAM_DATA),
            )?;
            Ok((train, test, cfg.dataset.id()))
        }
        DatasetSpec::Csv { train, test } => {
            let mut tr = Dataset::from_csv(train)?;
            let mut te = Dataset::from_csv(test)?;
            if tr.dim() != te.dim() {
                return Err(Error::Dataset(format!(
                    "train dim {} != test dim {}",
                    tr.dim(),
                    te.dim()
                )));
            }
            // Label columns may imply different class counts; widen both
            // to the larger one.
            let classes = tr.classes().max(te.classes());
            if tr.classes() != classes {
                tr = Dataset::new(tr.inputs().to_owned(), tr.labels().to_vec(), classes)?;
            }
            if te.classes() != classes {
                te = Dataset::new(te.inputs().to_owned(), te.labels().to_vec(), classes)?;
            }
            Ok((tr, te, cfg.dataset.id()))
        }
    }
}

fn draw_aux(
    train: &Dataset,
    aux_size: usize,
    seed: u64,
    victim: &VictimModel,
) -> Result<Dataset> {
    if aux_size > train.len() {
        return Err(Error::Config(format!(
            "aux_size {aux_size} exceeds the training split of {}",
            train.len()
        )));
    }
    let all: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample_without_replacement(&mut rng, &all, aux_size);
    let mut aux = train.subset(&idx)?;
    aux.cache_features(victim)?;
    Ok(aux)
}

impl BatchSetup {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        Self::prepare_with(cfg, None)
    }

    /// [`BatchSetup::prepare`] but reusing an already trained victim,
    /// for callers holding a checkpoint. The datasets, auxiliary draw
    /// and goal selection still come from the config seed.
    pub fn prepare_with(cfg: &ExperimentConfig, victim: Option<VictimModel>) -> Result<Self> {
        let (train, mut test, dataset_id) = realize_dataset(cfg)?;
        let mut victim = match victim {
            Some(v) => {
                if v.arch().input_dim != train.dim() || v.arch().classes != train.classes() {
                    return Err(Error::Setup(format!(
                        "checkpoint expects {}d inputs over {} classes, dataset has {}d over {}",
                        v.arch().input_dim,
                        v.arch().classes,
                        train.dim(),
                        train.classes()
                    )));
                }
                v
            }
            None => {
                let a = &cfg.architecture;
                let arch =
                    ArchSpec::new(train.dim(), a.hidden.clone(), a.feature_dim, train.classes())?;
                let opts = TrainOptions {
                    epochs: a.epochs,
                    learning_rate: a.learning_rate,
                    batch_size: a.batch_size,
                    q_bits: a.q_bits,
                };
                train_victim(&train, &arch, derive_seed(cfg.seed, STREAM_TRAIN), &opts)?.model
            }
        };
        let victim_test_accuracy = victim.accuracy(&test)?;
        victim.set_meta(ModelMeta {
            dataset_id: dataset_id.clone(),
            test_accuracy: Some(victim_test_accuracy),
        });
        test.cache_features(&victim)?;
        let aux = draw_aux(
            &train,
            cfg.attack.aux_size,
            derive_seed(cfg.seed, STREAM_AUX),
            &victim,
        )?;
        let target_seed = derive_seed(cfg.seed, STREAM_TARGETS);
        let goals = if cfg.attack.goals_per_trial == 1 {
            select_targets(&victim, &test, cfg.trials, target_seed)?
                .into_iter()
                .map(|g| vec![g])
                .collect()
        } else {
            select_multi_goals(
                &victim,
                &test,
                cfg.trials,
                cfg.attack.goals_per_trial,
                target_seed,
            )?
        };
        Ok(Self {
            victim,
            train,
            test,
            aux,
            goals,
            dataset_id,
            victim_test_accuracy,
        })
    }

    /// The attack mode this setup drives.
    pub fn mode(&self) -> AttackMode {
        if self.goals.first().map_or(1, Vec::len) == 1 {
            AttackMode::Single
        } else {
            AttackMode::Multi
        }
    }
}

fn run_trials(
    mode: ExecMode,
    cfg: &ExperimentConfig,
    setup: &BatchSetup,
) -> Result<BatchReport> {
    let attack_mode = setup.mode();
    let outcomes: Vec<Result<TrialReport>> = map_indexed(mode, setup.goals.len(), |i| {
        let goals = &setup.goals[i];
        let trial_seed = derive_seed(cfg.seed, STREAM_TRIAL_BASE + i as u64);
        let spec = match attack_mode {
            AttackMode::Single => AttackSpec::single(
                goals[0].clone(),
                setup.aux.clone(),
                cfg.attack.lambda1,
                cfg.attack.lambda2,
                cfg.attack.margin_k,
            )?,
            AttackMode::Multi => AttackSpec::multi(
                goals.clone(),
                setup.aux.clone(),
                cfg.attack.lambda1,
                cfg.attack.lambda2,
                cfg.attack.margin_k,
            )?,
        };
        let solved = match attack_mode {
            AttackMode::Single => {
                solve(&setup.victim, &spec, &cfg.solver, trial_seed, Some(&setup.test))
            }
            AttackMode::Multi => solve_multi(
                &setup.victim,
                &spec,
                &cfg.solver,
                trial_seed,
                Some(&setup.test),
            ),
        };
        match solved {
            Ok(result) => TrialReport::from_result(i, goals, &setup.victim, result),
            Err(Error::SolverDiverged {
                iteration, detail, ..
            }) => Ok(TrialReport::diverged(i, trial_seed, goals, iteration, detail)),
            Err(e) => Err(e),
        }
    });
    let trials = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    BatchReport::assemble(
        cfg.config_hash(),
        cfg.seed,
        setup.dataset_id.clone(),
        attack_mode,
        setup.victim_test_accuracy,
        trials,
    )
}

fn emit_batch(
    dir: &Path,
    cfg: &ExperimentConfig,
    setup: &BatchSetup,
    report: &BatchReport,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report.to_json_string()?)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    setup.victim.save_checkpoint(&dir.join("victim.ckpt"))?;
    for t in &report.trials {
        if !t.trace.is_empty() {
            write_trace_csv(&dir.join(format!("trace_trial{:03}.csv", t.trial)), &t.trace)?;
        }
    }
    Ok(())
}

/// Trains the victim, runs every trial and aggregates the results.
/// When the config names an output directory, the report, config echo,
/// victim checkpoint and per-trial traces are written there.
pub fn run_batch(cfg: &ExperimentConfig) -> Result<BatchReport> {
    run_batch_with(ExecMode::default(), cfg)
}

/// [`run_batch`] with an explicit execution mode.
pub fn run_batch_with(mode: ExecMode, cfg: &ExperimentConfig) -> Result<BatchReport> {
    cfg.validate()?;
    let setup = BatchSetup::prepare(cfg)?;
    let report = run_trials(mode, cfg, &setup)?;
    if let Some(dir) = &cfg.out_dir {
        emit_batch(dir, cfg, &setup, &report)?;
    }
    Ok(report)
}

/// Which experiment knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Lambda1,
    Lambda2,
    MarginK,
    AuxSize,
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParameter::Lambda1 => "lambda1",
            SweepParameter::Lambda2 => "lambda2",
            SweepParameter::MarginK => "k",
            SweepParameter::AuxSize => "aux_size",
        })
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda1" => Ok(SweepParameter::Lambda1),
            "lambda2" => Ok(SweepParameter::Lambda2),
            "k" | "margin_k" => Ok(SweepParameter::MarginK),
            "aux_size" => Ok(SweepParameter::AuxSize),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?}; expected lambda1, lambda2, k or aux_size"
            ))),
        }
    }
}

/// Runs one batch per value of the swept parameter, sharing the victim
/// model and target list across all values. Emits `sweep.json` and a
/// tidy `sweep.csv` when an output directory is configured.
pub fn sweep(
    cfg: &ExperimentConfig,
    parameter: SweepParameter,
    values: &[f64],
) -> Result<SweepReport> {
    sweep_with(ExecMode::default(), cfg, parameter, values)
}

/// [`sweep`] with an explicit execution mode.
pub fn sweep_with(
    mode: ExecMode,
    cfg: &ExperimentConfig,
    parameter: SweepParameter,
    values: &[f64],
) -> Result<SweepReport> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let base = BatchSetup::prepare(cfg)?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg_v = cfg.clone();
        cfg_v.out_dir = None;
        match parameter {
            SweepParameter::Lambda1 => cfg_v.attack.lambda1 = value,
            SweepParameter::Lambda2 => cfg_v.attack.lambda2 = value,
            SweepParameter::MarginK => cfg_v.attack.margin_k = value,
            SweepParameter::AuxSize => {
                if !(value.is_finite() && value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::Config(format!(
                        "aux_size sweep values must be positive integers, got {value}"
                    )));
                }
                cfg_v.attack.aux_size = value as usize;
            }
        }
        cfg_v.validate()?;
        let report = if parameter == SweepParameter::AuxSize {
            let mut setup = base.clone();
            setup.aux = draw_aux(
                &setup.train,
                cfg_v.attack.aux_size,
                derive_seed(cfg.seed, STREAM_AUX),
                &setup.victim,
            )?;
            run_trials(mode, &cfg_v, &setup)?
        } else {
            run_trials(mode, &cfg_v, &base)?
        };
        rows.push(SweepRow {
            parameter: parameter.to_string(),
            value,
            report,
        });
    }
    let sweep_report = SweepReport { rows };
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.json"), sweep_report.to_json_string()?)?;
        std::fs::write(dir.join("sweep.csv"), sweep_report.to_csv_string()?)?;
    }
    Ok(sweep_report)
}
