//! Victim models: a frozen full-precision feature extractor followed by a
//! bias-free quantized classification layer, plus the datasets they consume.

mod checkpoint;
mod train;

pub use train::{train_victim, TrainOptions, TrainedVictim};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, BitTensor, QuantConfig, RelaxedTensor};

/// Activation applied after every extractor layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
}

impl Nonlinearity {
    pub(crate) fn id(self) -> u8 {
        match self {
            Nonlinearity::Relu => 0,
        }
    }

    pub(crate) fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Nonlinearity::Relu),
            other => Err(Error::Config(format!("unknown nonlinearity id {other}"))),
        }
    }

    fn apply(self, x: &mut Array1<f64>) {
        match self {
            Nonlinearity::Relu => x.mapv_inplace(|v| v.max(0.0)),
        }
    }
}

/// Network shape: input width, hidden widths, feature width, class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub nonlinearity: Nonlinearity,
}

impl ArchSpec {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        feature_dim: usize,
        classes: usize,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden,
            feature_dim,
            classes,
            nonlinearity: Nonlinearity::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    /// Widths of consecutive extractor layers as `(in, out)` pairs.
    pub(crate) fn extractor_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend_from_slice(&self.hidden);
        widths.push(self.feature_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One dense extractor layer: `y = act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Labeled feature vectors with an optional cache of extractor outputs.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
    features: Option<Array2<f64>>,
}

impl Dataset {
    /// Builds a dataset, checking shapes and label range.
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Dataset("dataset has no samples".into()));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} inputs but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Dataset("need at least 2 classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("non-finite input value".into()));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            features: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// New dataset holding the listed samples, in order. The feature cache
    /// is carried over for the selected rows when present.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Dataset("subset selects no samples".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Dataset(format!(
                "subset index {bad} out of range for {} samples",
                self.len()
            )));
        }
        Ok(Self {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            features: self
                .features
                .as_ref()
                .map(|f| f.select(Axis(0), indices)),
        })
    }

    /// Runs every sample through the model's extractor and caches the result.
    pub fn cache_features(&mut self, model: &VictimModel) -> Result<()> {
        self.features = Some(model.extract_features(self.inputs.view())?);
        Ok(())
    }

    /// Cached extractor outputs, if [`cache_features`](Self::cache_features)
    /// has been called.
    pub fn features(&self) -> Option<ArrayView2<'_, f64>> {
        self.features.as_ref().map(|f| f.view())
    }

    /// Reads `f0,...,f{d-1},label` rows from a headered CSV file.
    pub fn from_csv(path: &std::path::Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let width = reader.headers()?.len();
        if width < 2 {
            return Err(Error::Dataset(
                "csv needs at least one feature column and a label column".into(),
            ));
        }
        let dim = width - 1;
        let mut rows: Vec<f64> = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != width {
                return Err(Error::Dataset(format!(
                    "csv row {} has {} fields, expected {width}",
                    labels.len() + 1,
                    record.len()
                )));
            }
            for field in record.iter().take(dim) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Dataset(format!("bad feature value {field:?}"))
                })?;
                rows.push(v);
            }
            let label: usize = record[dim].trim().parse().map_err(|_| {
                Error::Dataset(format!("bad label {:?}", &record[dim]))
            })?;
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(Error::Dataset("csv contains no samples".into()));
        }
        let classes = labels.iter().max().unwrap() + 1;
        let inputs = Array2::from_shape_vec((labels.len(), dim), rows)
            .map_err(|e| Error::Dataset(e.to_string()))?;
        Self::new(inputs, labels, classes.max(2))
    }

    /// Writes the dataset as `f0,...,f{d-1},label` with a header row.
    pub fn to_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let header: Vec<String> = (0..self.dim())
            .map(|i| format!("f{i}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writer.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> = self
                .input(i)
                .iter()
                .map(|v| format!("{v}"))
                .collect();
            record.push(self.labels[i].to_string());
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Index of the largest value, ties broken toward the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Logits of a quantized final layer applied to one feature vector.
pub fn logits_bits(
    features: ArrayView1<f64>,
    fc_bits: &BitTensor,
    config: &QuantConfig,
) -> Result<Array1<f64>> {
    if features.len() != fc_bits.features() {
        return Err(Error::Shape(format!(
            "feature vector has {} entries, layer expects {}",
            features.len(),
            fc_bits.features()
        )));
    }
    let mut out = Array1::zeros(fc_bits.rows());
    for r in 0..fc_bits.rows() {
        let mut acc = 0.0;
        for f in 0..fc_bits.features() {
            acc += fc_bits.code(r, f) as f64 * config.step_size() * features[f];
        }
        out[r] = acc;
    }
    Ok(out)
}

/// Logits of a relaxed final layer applied to one feature vector. Decoding
/// is purely linear in the relaxed bits, so analytic gradients of any loss
/// through this map are exact.
pub fn logits_relaxed(
    features: ArrayView1<f64>,
    fc: &RelaxedTensor,
    config: &QuantConfig,
) -> Result<Array1<f64>> {
    if features.len() != fc.features() {
        return Err(Error::Shape(format!(
            "feature vector has {} entries, layer expects {}",
            features.len(),
            fc.features()
        )));
    }
    if fc.word_bits() != config.q_bits() {
        return Err(Error::Codec(format!(
            "tensor stores {}-bit words, config expects {}",
            fc.word_bits(),
            config.q_bits()
        )));
    }
    let q = config.q_bits();
    let mut out = Array1::zeros(fc.rows());
    for r in 0..fc.rows() {
        let mut acc = 0.0;
        for f in 0..fc.features() {
            let word = fc.word(r, f);
            let mut w = 0.0;
            for (p, &v) in word.iter().enumerate().take(q) {
                w += v * config.bit_weight(p);
            }
            acc += w * features[f];
        }
        out[r] = acc;
    }
    Ok(out)
}

/// Descriptive metadata carried in checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub dataset_id: String,
    pub test_accuracy: Option<f64>,
}

/// A trained victim: frozen extractor plus quantized final layer.
#[derive(Debug, Clone)]
pub struct VictimModel {
    arch: ArchSpec,
    extractor: Vec<DenseLayer>,
    fc_full: Array2<f64>,
    fc_bits: BitTensor,
    fc_quant: QuantConfig,
    fc_weights: Array2<f64>,
    train_seed: u64,
    meta: ModelMeta,
}

impl VictimModel {
    /// Assembles a model from trained parts, quantizing the final layer.
    pub fn from_parts(
        arch: ArchSpec,
        extractor: Vec<DenseLayer>,
        fc_full: Array2<f64>,
        q_bits: usize,
        train_seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let dims = arch.extractor_dims();
        if extractor.len() != dims.len() {
            return Err(Error::Shape(format!(
                "arch describes {} extractor layers, got {}",
                dims.len(),
                extractor.len()
            )));
        }
        for (layer, &(din, dout)) in extractor.iter().zip(&dims) {
            if layer.weights.dim() != (dout, din) || layer.bias.len() != dout {
                return Err(Error::Shape(format!(
                    "extractor layer expects {dout}x{din} weights and {dout} biases"
                )));
            }
        }
        if fc_full.dim() != (arch.classes, arch.feature_dim) {
            return Err(Error::Shape(format!(
                "final layer expects {}x{} weights, got {}x{}",
                arch.classes,
                arch.feature_dim,
                fc_full.nrows(),
                fc_full.ncols()
            )));
        }
        let (fc_bits, fc_quant) = quant::quantize_layer(fc_full.view(), q_bits)?;
        let fc_weights = fc_bits.decode(&fc_quant)?;
        Ok(Self {
            arch,
            extractor,
            fc_full,
            fc_bits,
            fc_quant,
            fc_weights,
            train_seed,
            meta: ModelMeta::default(),
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn extractor(&self) -> &[DenseLayer] {
        &self.extractor
    }

    /// Full-precision final layer as it was before quantization.
    pub fn fc_full(&self) -> ArrayView2<'_, f64> {
        self.fc_full.view()
    }

    /// Quantized final layer as bits.
    pub fn fc_bits(&self) -> &BitTensor {
        &self.fc_bits
    }

    pub fn fc_quant(&self) -> &QuantConfig {
        &self.fc_quant
    }

    /// Decoded real-valued view of the quantized final layer.
    pub fn fc_weights(&self) -> ArrayView2<'_, f64> {
        self.fc_weights.view()
    }

    pub fn train_seed(&self) -> u64 {
        self.train_seed
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: ModelMeta) {
        self.meta = meta;
    }

    /// A copy of this model whose final layer holds `bits` instead. The
    /// step size and extractor are unchanged.
    pub fn with_fc_bits(&self, bits: BitTensor) -> Result<Self> {
        if bits.shape() != self.fc_bits.shape() {
            return Err(Error::Shape(format!(
                "replacement bits have shape {:?}, expected {:?}",
                bits.shape(),
                self.fc_bits.shape()
            )));
        }
        let fc_weights = bits.decode(&self.fc_quant)?;
        let mut out = self.clone();
        out.fc_bits = bits;
        out.fc_weights = fc_weights;
        Ok(out)
    }

    /// Runs the extractor on one input.
    pub fn feature_vector(&self, input: ArrayView1<f64>) -> Result<Array1<f64>> {
        if input.len() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "input has {} entries, model expects {}",
                input.len(),
                self.arch.input_dim
            )));
        }
        let mut x = input.to_owned();
        for layer in &self.extractor {
            let mut y = layer.weights.dot(&x);
            y += &layer.bias;
            self.arch.nonlinearity.apply(&mut y);
            x = y;
        }
        Ok(x)
    }

    /// Runs the extractor on a batch, one sample per row.
    pub fn extract_features(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "inputs have {} columns, model expects {}",
                inputs.ncols(),
                self.arch.input_dim
            )));
        }
        let mut x = inputs.to_owned();
        for layer in &self.extractor {
            let mut y = x.dot(&layer.weights.t());
            for mut row in y.rows_mut() {
                row += &layer.bias;
            }
            y.mapv_inplace(|v| v.max(0.0));
            x = y;
        }
        Ok(x)
    }

    /// Quantized-layer logits for one input.
    pub fn logits(&self, input: ArrayView1<f64>) -> Result<Array1<f64>> {
        let features = self.feature_vector(input)?;
        Ok(self.fc_weights.dot(&features))
    }

    /// Quantized-layer logits for an already-extracted feature vector.
    pub fn logits_from_features(&self, features: ArrayView1<f64>) -> Array1<f64> {
        self.fc_weights.dot(&features)
    }

    /// Predicted class for one input, argmax ties to the lowest index.
    pub fn predict(&self, input: ArrayView1<f64>) -> Result<usize> {
        let logits = self.logits(input)?;
        Ok(argmax_lowest(logits.as_slice().unwrap()))
    }

    /// Fraction of `data` classified correctly. Uses the dataset's cached
    /// features when they are present.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.dim() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "dataset dim {} does not match model input dim {}",
                data.dim(),
                self.arch.input_dim
            )));
        }
        let features = match data.features() {
            Some(f) if f.ncols() == self.arch.feature_dim => f.to_owned(),
            _ => self.extract_features(data.inputs())?,
        };
        let logits = features.dot(&self.fc_weights.t());
        let mut correct = 0usize;
        for (i, row) in logits.rows().into_iter().enumerate() {
            if argmax_lowest(row.as_slice().unwrap()) == data.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Saves the model in the binary checkpoint format.
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, checkpoint::encode(self))?;
        Ok(())
    }

    /// Loads a model from the binary checkpoint format.
    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        checkpoint::decode(&bytes)
    }

    /// Serializes to checkpoint bytes without touching the filesystem.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    /// Parses checkpoint bytes.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode(bytes)
    }

    pub(crate) fn from_checkpoint_parts(
        arch: ArchSpec,
        extractor: Vec<DenseLayer>,
        fc_full: Array2<f64>,
        fc_bits: BitTensor,
        fc_quant: QuantConfig,
        train_seed: u64,
        meta: ModelMeta,
    ) -> Result<Self> {
        arch.validate()?;
        if fc_bits.shape() != (arch.classes, arch.feature_dim, fc_quant.q_bits()) {
            return Err(Error::Shape(format!(
                "checkpoint bit tensor shape {:?} does not match arch ({}, {}, {})",
                fc_bits.shape(),
                arch.classes,
                arch.feature_dim,
                fc_quant.q_bits()
            )));
        }
        let fc_weights = fc_bits.decode(&fc_quant)?;
        Ok(Self {
            arch,
            extractor,
            fc_full,
            fc_bits,
            fc_quant,
            fc_weights,
            train_seed,
            meta,
        })
    }
}
