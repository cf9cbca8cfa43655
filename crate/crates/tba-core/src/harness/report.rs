//! Per-trial and batch-level experiment reports.
//!
//! Reports are plain serde types: everything needed to audit a run is in
//! the JSON, including the released and flipped bit tensors, so a report
//! can be re-verified or fed to the defense evaluation without rerunning
//! the attack. Wall-clock timings are kept in memory but never
//! serialized, which keeps reports byte-identical across equal-seed runs.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{AttackGoal, AttackMode};
use crate::quant::{bit_distance, BitTensor};
use crate::solver::{AttackResult, TerminationReason, TraceRow};
use crate::model::VictimModel;

use super::stats::{summary, SummaryStats};

/// Outcome of one attack trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    /// Goal inputs, one row per goal, so reports are self-contained.
    pub inputs: Vec<Vec<f64>>,
    pub success: bool,
    /// Bits separating released from flipped, on success.
    pub n_flip: Option<u64>,
    /// Bits separating the original victim from flipped, on success.
    pub deployment_distance: Option<u64>,
    pub acc_released: Option<f64>,
    pub acc_flipped: Option<f64>,
    pub iterations: usize,
    pub termination: TerminationReason,
    pub released: Option<BitTensor>,
    pub flipped: Option<BitTensor>,
    /// Populated when the trial failed abnormally (solver divergence).
    pub error: Option<String>,
    #[serde(skip)]
    pub wall: Duration,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl TrialReport {
    /// Builds a trial report from a solver result, independently
    /// re-verifying any claimed success with fresh forward passes.
    pub fn from_result(
        trial: usize,
        goals: &[AttackGoal],
        victim: &VictimModel,
        result: AttackResult,
    ) -> Result<Self> {
        let mut report = Self {
            trial,
            seed: result.seed,
            sources: goals.iter().map(|g| g.source).collect(),
            targets: goals.iter().map(|g| g.target).collect(),
            inputs: goals.iter().map(|g| g.input.to_vec()).collect(),
            success: result.success,
            n_flip: result.n_flip,
            deployment_distance: None,
            acc_released: result.acc_released,
            acc_flipped: result.acc_flipped,
            iterations: result.iterations,
            termination: result.termination,
            released: result.released,
            flipped: result.flipped,
            error: None,
            wall: result.wall_time,
            trace: result.trace,
        };
        if report.success {
            let verified = match (&report.released, &report.flipped) {
                (Some(released), Some(flipped)) => {
                    let m_r = victim.with_fc_bits(released.clone())?;
                    let m_f = victim.with_fc_bits(flipped.clone())?;
                    let mut ok = true;
                    for g in goals {
                        ok &= m_r.predict(g.input.view())? == g.source;
                        ok &= m_f.predict(g.input.view())? == g.target;
                    }
                    if ok {
                        report.deployment_distance =
                            Some(bit_distance(victim.fc_bits(), flipped)?);
                    }
                    ok
                }
                _ => false,
            };
            if !verified {
                report.success = false;
                report.n_flip = None;
                report.deployment_distance = None;
                report.error = Some("independent re-verification failed".into());
            }
        }
        Ok(report)
    }

    /// Records a diverged solver run as a failed trial.
    pub fn diverged(
        trial: usize,
        seed: u64,
        goals: &[AttackGoal],
        iteration: usize,
        detail: String,
    ) -> Self {
        Self {
            trial,
            seed,
            sources: goals.iter().map(|g| g.source).collect(),
            targets: goals.iter().map(|g| g.target).collect(),
            inputs: goals.iter().map(|g| g.input.to_vec()).collect(),
            success: false,
            n_flip: None,
            deployment_distance: None,
            acc_released: None,
            acc_flipped: None,
            iterations: iteration,
            termination: TerminationReason::MaxIters,
            released: None,
            flipped: None,
            error: Some(format!("solver diverged: {detail}")),
            wall: Duration::ZERO,
            trace: Vec::new(),
        }
    }
}

/// Aggregated outcome of a batch of trials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchReport {
    pub config_hash: String,
    pub seed: u64,
    pub dataset_id: String,
    pub mode: AttackMode,
    /// Test accuracy of the original victim.
    pub victim_test_accuracy: f64,
    /// Fraction of trials whose attack succeeded, exactly
    /// successes / trials.
    pub asr: f64,
    /// Over successful trials only.
    pub n_flip: SummaryStats,
    pub deployment_distance: SummaryStats,
    pub acc_released: SummaryStats,
    pub acc_flipped: SummaryStats,
    pub trials: Vec<TrialReport>,
    #[serde(skip)]
    pub wall: Duration,
}

impl BatchReport {
    pub fn assemble(
        config_hash: String,
        seed: u64,
        dataset_id: String,
        mode: AttackMode,
        victim_test_accuracy: f64,
        trials: Vec<TrialReport>,
    ) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::Config("a batch needs at least one trial".into()));
        }
        let wall = trials.iter().map(|t| t.wall).sum();
        let mut report = Self {
            config_hash,
            seed,
            dataset_id,
            mode,
            victim_test_accuracy,
            asr: 0.0,
            n_flip: SummaryStats::default(),
            deployment_distance: SummaryStats::default(),
            acc_released: SummaryStats::default(),
            acc_flipped: SummaryStats::default(),
            trials,
            wall,
        };
        let (asr, n_flip, deploy, acc_r, acc_f) = Self::aggregates_of(&report.trials);
        report.asr = asr;
        report.n_flip = n_flip;
        report.deployment_distance = deploy;
        report.acc_released = acc_r;
        report.acc_flipped = acc_f;
        Ok(report)
    }

    fn aggregates_of(
        trials: &[TrialReport],
    ) -> (f64, SummaryStats, SummaryStats, SummaryStats, SummaryStats) {
        let successes: Vec<&TrialReport> = trials.iter().filter(|t| t.success).collect();
        let asr = successes.len() as f64 / trials.len() as f64;
        let collect = |f: &dyn Fn(&TrialReport) -> Option<f64>| -> Vec<f64> {
            successes.iter().filter_map(|t| f(t)).collect()
        };
        (
            asr,
            summary(&collect(&|t| t.n_flip.map(|v| v as f64))),
            summary(&collect(&|t| t.deployment_distance.map(|v| v as f64))),
            summary(&collect(&|t| t.acc_released)),
            summary(&collect(&|t| t.acc_flipped)),
        )
    }

    /// True when the stored aggregates equal a fresh recomputation from
    /// the per-trial records.
    pub fn aggregates_consistent(&self) -> bool {
        let (asr, n_flip, deploy, acc_r, acc_f) = Self::aggregates_of(&self.trials);
        self.asr == asr
            && self.n_flip == n_flip
            && self.deployment_distance == deploy
            && self.acc_released == acc_r
            && self.acc_flipped == acc_f
    }

    pub fn successes(&self) -> usize {
        self.trials.iter().filter(|t| t.success).count()
    }

    /// Pretty JSON with a trailing newline; stable for a fixed seed.
    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One swept value and the batch it produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub report: BatchReport,
}

/// All batches of a hyperparameter sweep, in the order requested.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Tidy CSV with one row per swept value, for plotting.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "parameter",
            "value",
            "trials",
            "asr",
            "n_flip_mean",
            "n_flip_std",
            "n_flip_count",
            "deployment_mean",
            "victim_test_accuracy",
            "acc_released_mean",
            "acc_flipped_mean",
        ])?;
        for row in &self.rows {
            let r = &row.report;
            w.write_record([
                row.parameter.clone(),
                row.value.to_string(),
                r.trials.len().to_string(),
                r.asr.to_string(),
                r.n_flip.mean.to_string(),
                r.n_flip.std.to_string(),
                r.n_flip.count.to_string(),
                r.deployment_distance.mean.to_string(),
                r.victim_test_accuracy.to_string(),
                r.acc_released.mean.to_string(),
                r.acc_flipped.mean.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Defense evaluation for one originally-successful trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseTrial {
    pub trial: usize,
    /// Test accuracy of the fine-tuned released model.
    pub acc_finetuned: f64,
    /// Whether replaying the stored flip difference still hits every
    /// target after fine-tuning.
    pub replay_success: bool,
    /// Greedy re-attack on the fine-tuned model (single-goal trials).
    pub reattack_success: Option<bool>,
    pub reattack_n_flip: Option<u64>,
    /// Greedy attack on the original victim for the same goal.
    pub baseline_success: Option<bool>,
    pub baseline_n_flip: Option<u64>,
}

/// Aggregated fine-tuning defense evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseReport {
    pub config_hash: String,
    pub ft_samples: usize,
    pub ft_iters: usize,
    pub learning_rate: f64,
    /// ASR of the batch before any defense.
    pub pre_asr: f64,
    /// Fraction of all trials whose replayed flips still succeed after
    /// fine-tuning (same denominator as `pre_asr`).
    pub residual_asr: f64,
    /// Over defended single-goal trials.
    pub reattack_success_rate: f64,
    pub reattack_n_flip: SummaryStats,
    pub baseline_success_rate: f64,
    pub baseline_n_flip: SummaryStats,
    pub acc_finetuned: SummaryStats,
    pub trials: Vec<DefenseTrial>,
}

impl DefenseReport {
    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}
