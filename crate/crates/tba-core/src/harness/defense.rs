//! Fine-tuning defense: does flipping the stored bit difference still
//! work after the victim fine-tunes the released model?

use serde::{Deserialize, Serialize};

use crate::baselines::{apply_flips, greedy_bit_attack, FlipSet};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::model::{Dataset, VictimModel};
use crate::quant::{quantize_with, BitTensor};

use super::report::{BatchReport, DefenseReport, DefenseTrial};
use super::stats::summary;
use super::{derive_seed, BatchSetup, ExperimentConfig, STREAM_DEFENSE};

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fine-tuning defense hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    /// Benign samples the defender fine-tunes on.
    pub ft_samples: usize,
    /// Gradient steps; zero leaves the released model untouched.
    pub ft_iters: usize,
    pub learning_rate: f64,
    /// Flip budget for the greedy re-attack.
    pub reattack_budget: usize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            ft_samples: 128,
            ft_iters: 300,
            learning_rate: 0.05,
            reattack_budget: 50,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ft_samples == 0 {
            return Err(Error::Config("ft_samples must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("defense learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Fine-tunes only the final layer on `ft`, keeping the extractor and
/// the quantization step frozen. A continuous shadow of the weights
/// takes the gradient steps; the forward pass uses the re-quantized
/// weights (straight-through), and the layer is re-quantized with the
/// frozen step after every update.
pub(crate) fn finetune_final_layer(
    victim: &VictimModel,
    released: &BitTensor,
    ft: &Dataset,
    iters: usize,
    lr: f64,
) -> Result<BitTensor> {
    let qcfg = *victim.fc_quant();
    let owned;
    let feats = match ft.features() {
        Some(f) => f,
        None => {
            owned = victim.extract_features(ft.inputs())?;
            owned.view()
        }
    };
    let n = ft.len() as f64;
    let mut shadow = released.decode(&qcfg)?;
    let mut bits = released.clone();
    for _ in 0..iters {
        let wq = bits.decode(&qcfg)?;
        let mut g = feats.dot(&wq.t());
        for (i, mut row) in g.outer_iter_mut().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
            row[ft.label(i)] -= 1.0;
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let dw = g.t().dot(&feats);
        shadow.scaled_add(-lr, &dw);
        bits = quantize_with(&qcfg, shadow.view());
    }
    Ok(bits)
}

/// Evaluates the fine-tuning defense against every successful trial of
/// a batch: fine-tune each released model on held-out benign samples,
/// replay the stored flip difference, and greedily re-attack the
/// fine-tuned model. The batch must have been produced by `cfg`.
pub fn finetune_defense_eval(
    cfg: &ExperimentConfig,
    batch: &BatchReport,
    defense: &DefenseConfig,
) -> Result<DefenseReport> {
    finetune_defense_eval_with(crate::exec::ExecMode::default(), cfg, batch, defense)
}

/// [`finetune_defense_eval`] with an explicit execution mode.
pub fn finetune_defense_eval_with(
    mode: ExecMode,
    cfg: &ExperimentConfig,
    batch: &BatchReport,
    defense: &DefenseConfig,
) -> Result<DefenseReport> {
    cfg.validate()?;
    defense.validate()?;
    if batch.config_hash != cfg.config_hash() {
        return Err(Error::Setup(
            "batch report was produced by a different configuration".into(),
        ));
    }
    let setup = BatchSetup::prepare(cfg)?;
    if defense.ft_samples > setup.train.len() {
        return Err(Error::Config(format!(
            "ft_samples {} exceeds the training split of {}",
            defense.ft_samples,
            setup.train.len()
        )));
    }
    let all: Vec<usize> = (0..setup.train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_DEFENSE));
    let idx = super::sample_without_replacement(&mut rng, &all, defense.ft_samples);
    let mut ft = setup.train.subset(&idx)?;
    ft.cache_features(&setup.victim)?;

    let defended: Vec<&super::TrialReport> = batch
        .trials
        .iter()
        .filter(|t| t.success && t.released.is_some() && t.flipped.is_some())
        .collect();

    let outcomes: Vec<Result<DefenseTrial>> = map_indexed(mode, defended.len(), |i| {
        let trial = defended[i];
        let released = trial.released.as_ref().expect("filtered");
        let flipped = trial.flipped.as_ref().expect("filtered");
        let ft_bits = finetune_final_layer(
            &setup.victim,
            released,
            &ft,
            defense.ft_iters,
            defense.learning_rate,
        )?;
        let m_r_ft = setup.victim.with_fc_bits(ft_bits.clone())?;
        let acc_finetuned = m_r_ft.accuracy(&setup.test)?;

        let flips = FlipSet::between(released, flipped)?;
        let m_f_ft = setup
            .victim
            .with_fc_bits(apply_flips(&ft_bits, &flips)?)?;
        let mut replay_success = true;
        for (&t_class, input) in trial.targets.iter().zip(&trial.inputs) {
            let x = Array1::from(input.clone());
            replay_success &= m_f_ft.predict(x.view())? == t_class;
        }

        let (mut reattack_success, mut reattack_n_flip) = (None, None);
        let (mut baseline_success, mut baseline_n_flip) = (None, None);
        if trial.sources.len() == 1 {
            let x = Array1::from(trial.inputs[0].clone());
            let (s, t) = (trial.sources[0], trial.targets[0]);
            if m_r_ft.predict(x.view())? == s {
                let (_, res) =
                    greedy_bit_attack(&m_r_ft, x.view(), s, t, &ft, defense.reattack_budget)?;
                reattack_success = Some(res.success);
                reattack_n_flip = res.n_flip;
            } else {
                // Fine-tuning broke the benign prediction; the re-attack
                // premise no longer holds.
                reattack_success = Some(false);
            }
            match greedy_bit_attack(
                &setup.victim,
                x.view(),
                s,
                t,
                &ft,
                defense.reattack_budget,
            ) {
                Ok((_, res)) => {
                    baseline_success = Some(res.success);
                    baseline_n_flip = res.n_flip;
                }
                Err(Error::Setup(_)) => baseline_success = Some(false),
                Err(e) => return Err(e),
            }
        }
        Ok(DefenseTrial {
            trial: trial.trial,
            acc_finetuned,
            replay_success,
            reattack_success,
            reattack_n_flip,
            baseline_success,
            baseline_n_flip,
        })
    });
    let trials = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let replayed = trials.iter().filter(|t| t.replay_success).count();
    let residual_asr = replayed as f64 / batch.trials.len() as f64;
    let rate = |get: &dyn Fn(&DefenseTrial) -> Option<bool>| -> f64 {
        let answered: Vec<bool> = trials.iter().filter_map(|t| get(t)).collect();
        if answered.is_empty() {
            0.0
        } else {
            answered.iter().filter(|&&b| b).count() as f64 / answered.len() as f64
        }
    };
    let flips_of = |get: &dyn Fn(&DefenseTrial) -> Option<u64>| -> Vec<f64> {
        trials.iter().filter_map(|t| get(t).map(|v| v as f64)).collect()
    };
    let report = DefenseReport {
        config_hash: batch.config_hash.clone(),
        ft_samples: defense.ft_samples,
        ft_iters: defense.ft_iters,
        learning_rate: defense.learning_rate,
        pre_asr: batch.asr,
        residual_asr,
        reattack_success_rate: rate(&|t| t.reattack_success),
        reattack_n_flip: summary(&flips_of(&|t| t.reattack_n_flip)),
        baseline_success_rate: rate(&|t| t.baseline_success),
        baseline_n_flip: summary(&flips_of(&|t| t.baseline_n_flip)),
        acc_finetuned: summary(
            &trials.iter().map(|t| t.acc_finetuned).collect::<Vec<_>>(),
        ),
        trials,
    };
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("defense.json"), report.to_json_string()?)?;
    }
    Ok(report)
}
