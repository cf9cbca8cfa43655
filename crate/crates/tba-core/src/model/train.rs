//! Minibatch SGD training for victim models.
//!
//! The whole network (extractor plus bias-free final layer) trains in full
//! precision; the final layer is quantized once afterwards and its step size
//! is frozen from then on.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{ArchSpec, Dataset, DenseLayer, VictimModel};

/// Hyperparameters for [`train_victim`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub q_bits: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 0.1,
            batch_size: 64,
            q_bits: 8,
        }
    }
}

/// A freshly trained model together with its training statistics.
#[derive(Debug)]
pub struct TrainedVictim {
    pub model: VictimModel,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Trains a victim on `train` with cross-entropy SGD, then quantizes the
/// final layer. Deterministic given `seed`.
pub fn train_victim(
    train: &Dataset,
    arch: &ArchSpec,
    seed: u64,
    opts: &TrainOptions,
) -> Result<TrainedVictim> {
    arch.validate()?;
    if train.dim() != arch.input_dim {
        return Err(Error::Shape(format!(
            "dataset dim {} does not match arch input dim {}",
            train.dim(),
            arch.input_dim
        )));
    }
    if train.classes() > arch.classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, arch provides {}",
            train.classes(),
            arch.classes
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !opts.learning_rate.is_finite() || opts.learning_rate <= 0.0 {
        return Err(Error::Config("learning_rate must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<DenseLayer> = arch
        .extractor_dims()
        .iter()
        .map(|&(din, dout)| DenseLayer {
            weights: xavier_uniform(&mut rng, dout, din),
            bias: Array1::zeros(dout),
        })
        .collect();
    let mut fc = xavier_uniform(&mut rng, arch.classes, arch.feature_dim);

    let n = train.len();
    let lr = opts.learning_rate;
    let mut order: Vec<usize> = (0..n).collect();
    let mut final_loss = f64::NAN;

    for _epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let x0 = train.inputs().select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.label(i)).collect();

            // Forward, keeping pre-relu activations for the backward pass.
            let mut acts: Vec<Array2<f64>> = vec![x0];
            for layer in &layers {
                let prev = acts.last().unwrap();
                let mut y = prev.dot(&layer.weights.t());
                for mut row in y.rows_mut() {
                    row += &layer.bias;
                }
                y.mapv_inplace(|v| v.max(0.0));
                acts.push(y);
            }
            let features = acts.last().unwrap().clone();
            let logits = features.dot(&fc.t());

            // Softmax cross-entropy, averaged over the batch.
            let b = chunk.len() as f64;
            let mut dlogits = Array2::zeros(logits.dim());
            for (i, row) in logits.rows().into_iter().enumerate() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                epoch_loss += z.ln() + max - row[labels[i]];
                for (k, &e) in exps.iter().enumerate() {
                    let p = e / z;
                    dlogits[[i, k]] = (p - if k == labels[i] { 1.0 } else { 0.0 }) / b;
                }
            }

            // Backward through the final layer.
            let dfc = dlogits.t().dot(&features);
            let mut dact = dlogits.dot(&fc);

            // Backward through the extractor.
            let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(layers.len());
            for (li, layer) in layers.iter().enumerate().rev() {
                let post = &acts[li + 1];
                // Relu gate: gradient flows where the activation survived.
                let mut dpre = dact.clone();
                dpre.zip_mut_with(post, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                let dw = dpre.t().dot(&acts[li]);
                let db = dpre.sum_axis(Axis(0));
                dact = dpre.dot(&layer.weights);
                grads.push((dw, db));
            }
            grads.reverse();

            for (layer, (dw, db)) in layers.iter_mut().zip(&grads) {
                layer.weights.scaled_add(-lr, dw);
                layer.bias.scaled_add(-lr, db);
            }
            fc.scaled_add(-lr, &dfc);
        }
        final_loss = epoch_loss / n as f64;
        if !final_loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {final_loss} in epoch {_epoch}"
            )));
        }
    }

    if layers
        .iter()
        .any(|l| l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()))
        || fc.iter().any(|v| !v.is_finite())
    {
        return Err(Error::Training("non-finite parameter after training".into()));
    }

    let model = VictimModel::from_parts(arch.clone(), layers, fc, opts.q_bits, seed)?;
    let train_accuracy = model.accuracy(train)?;
    Ok(TrainedVictim {
        model,
        train_accuracy,
        final_loss,
    })
}
