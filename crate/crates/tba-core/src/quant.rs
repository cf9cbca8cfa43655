//! Q-bit two's-complement weight codec and bit-tensor arithmetic.
//!
//! A quantized layer stores each weight as a word of `Q` bits laid out
//! sign-first: position 0 carries the sign bit with coefficient `-2^(Q-1)`,
//! position `p >= 1` carries coefficient `2^(Q-1-p)`. A word decodes to its
//! signed integer code times the layer step size. [`BitTensor`] holds binary
//! words, [`RelaxedTensor`] holds the continuous surrogate the solver
//! optimizes over.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Narrowest supported word width.
pub const MIN_Q_BITS: usize = 2;
/// Widest supported word width.
pub const MAX_Q_BITS: usize = 16;

/// Slack tolerated on relaxed values before the clamp counter fires.
const RELAXED_SLACK: f64 = 1e-6;

static RELAXED_CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of relaxed decodes that clamped a value lying outside `[0, 1]`
/// by more than the slack since process start (or the last reset).
pub fn relaxed_clamp_events() -> u64 {
    RELAXED_CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// Resets the relaxed-decode clamp counter. Intended for tests.
pub fn reset_relaxed_clamp_events() {
    RELAXED_CLAMP_EVENTS.store(0, Ordering::Relaxed);
}

/// Word width plus step size for one quantized layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    q_bits: usize,
    step_size: f64,
}

impl QuantConfig {
    /// Builds a config, validating the width and step size.
    pub fn new(q_bits: usize, step_size: f64) -> Result<Self> {
        if !(MIN_Q_BITS..=MAX_Q_BITS).contains(&q_bits) {
            return Err(Error::Config(format!(
                "q_bits must lie in [{MIN_Q_BITS}, {MAX_Q_BITS}], got {q_bits}"
            )));
        }
        if !step_size.is_finite() || step_size <= 0.0 {
            return Err(Error::Config(format!(
                "step_size must be a positive finite number, got {step_size}"
            )));
        }
        Ok(Self { q_bits, step_size })
    }

    /// Word width in bits.
    pub fn q_bits(&self) -> usize {
        self.q_bits
    }

    /// Real-valued distance between adjacent codes.
    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    /// Signed contribution of a set bit at `position`, step size included.
    /// Position 0 is the sign bit.
    pub fn bit_weight(&self, position: usize) -> f64 {
        assert!(position < self.q_bits, "bit position out of range");
        unit_weight(position, self.q_bits) * self.step_size
    }

    /// Full two's-complement code range `[-2^(Q-1), 2^(Q-1) - 1]`.
    pub fn code_range(&self) -> (i64, i64) {
        let half = 1i64 << (self.q_bits - 1);
        (-half, half - 1)
    }

    /// Symmetric range the quantizer emits, `[-(2^(Q-1) - 1), 2^(Q-1) - 1]`.
    /// The most negative code is representable but never produced.
    pub fn emit_range(&self) -> (i64, i64) {
        let top = (1i64 << (self.q_bits - 1)) - 1;
        (-top, top)
    }
}

/// Signed place value of a bit at `position` in code units, without the
/// step size. Position 0 is the sign bit. Powers of two up to `2^(Q-1)`
/// are exact in `f64`, so sums of these weights carry no rounding.
fn unit_weight(position: usize, q_bits: usize) -> f64 {
    if position == 0 {
        -((1i64 << (q_bits - 1)) as f64)
    } else {
        (1i64 << (q_bits - 1 - position)) as f64
    }
}

/// Writes `code` as a sign-first bit word into `out`.
fn code_to_bits(code: i64, q_bits: usize, out: &mut [u8]) {
    debug_assert_eq!(out.len(), q_bits);
    let wrapped = (code as u64) & ((1u64 << q_bits) - 1);
    for (p, slot) in out.iter_mut().enumerate() {
        *slot = ((wrapped >> (q_bits - 1 - p)) & 1) as u8;
    }
}

/// Reads a sign-first bit word back into its signed code.
fn bits_to_code(bits: &[u8], q_bits: usize) -> i64 {
    let mut acc: i64 = 0;
    if bits[0] == 1 {
        acc -= 1i64 << (q_bits - 1);
    }
    for (p, &bit) in bits.iter().enumerate().skip(1) {
        if bit == 1 {
            acc += 1i64 << (q_bits - 1 - p);
        }
    }
    acc
}

/// Decodes one binary word to its real value under `config`.
pub fn decode_element(bits: &[u8], config: &QuantConfig) -> Result<f64> {
    if bits.len() != config.q_bits {
        return Err(Error::Codec(format!(
            "word has {} bits, config expects {}",
            bits.len(),
            config.q_bits
        )));
    }
    for &bit in bits {
        if bit > 1 {
            return Err(Error::Codec(format!("non-binary bit value {bit}")));
        }
    }
    Ok(bits_to_code(bits, config.q_bits) as f64 * config.step_size)
}

/// Decodes one relaxed word by the same linear form, clamping each value to
/// `[0, 1]` first. Clamps beyond a small slack are counted in
/// [`relaxed_clamp_events`] as a diagnostic.
///
/// Accumulates in code units and applies the step size once at the end,
/// exactly like [`decode_element`]; on binary input the two agree to the
/// last bit because the accumulation is then pure integer arithmetic.
pub fn decode_relaxed(values: &[f64], config: &QuantConfig) -> Result<f64> {
    if values.len() != config.q_bits {
        return Err(Error::Codec(format!(
            "word has {} values, config expects {}",
            values.len(),
            config.q_bits
        )));
    }
    let mut code_units = 0.0;
    for (p, &v) in values.iter().enumerate() {
        if !(-RELAXED_SLACK..=1.0 + RELAXED_SLACK).contains(&v) {
            RELAXED_CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        }
        code_units += v.clamp(0.0, 1.0) * unit_weight(p, config.q_bits);
    }
    Ok(code_units * config.step_size)
}

/// Rounds half-magnitudes away from zero, like `f64::round`.
fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// A rows-by-features grid of Q-bit binary words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    rows: usize,
    features: usize,
    word_bits: usize,
    data: Vec<u8>,
}

impl BitTensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(rows: usize, features: usize, word_bits: usize) -> Self {
        Self {
            rows,
            features,
            word_bits,
            data: vec![0u8; rows * features * word_bits],
        }
    }

    /// Wraps raw one-byte-per-bit storage, validating length and binarity.
    pub fn from_raw(rows: usize, features: usize, word_bits: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * features * word_bits {
            return Err(Error::Shape(format!(
                "bit tensor expects {} entries, got {}",
                rows * features * word_bits,
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&b| b > 1) {
            return Err(Error::Codec(format!("non-binary bit value {bad}")));
        }
        Ok(Self {
            rows,
            features,
            word_bits,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn word_bits(&self) -> usize {
        self.word_bits
    }

    /// Total number of bits stored.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Shape triple `(rows, features, word_bits)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.features, self.word_bits)
    }

    fn offset(&self, row: usize, feature: usize) -> usize {
        debug_assert!(row < self.rows && feature < self.features);
        (row * self.features + feature) * self.word_bits
    }

    /// Flat index of bit `(row, feature, position)`.
    pub fn index_of(&self, row: usize, feature: usize, position: usize) -> usize {
        debug_assert!(position < self.word_bits);
        self.offset(row, feature) + position
    }

    /// The word at `(row, feature)`.
    pub fn word(&self, row: usize, feature: usize) -> &[u8] {
        let at = self.offset(row, feature);
        &self.data[at..at + self.word_bits]
    }

    pub fn get(&self, row: usize, feature: usize, position: usize) -> u8 {
        self.data[self.index_of(row, feature, position)]
    }

    pub fn set(&mut self, row: usize, feature: usize, position: usize, bit: u8) {
        assert!(bit <= 1, "bit value must be 0 or 1");
        let at = self.index_of(row, feature, position);
        self.data[at] = bit;
    }

    /// Flips a single bit in place.
    pub fn flip(&mut self, row: usize, feature: usize, position: usize) {
        let at = self.index_of(row, feature, position);
        self.data[at] ^= 1;
    }

    /// Flips the bit at a flat index.
    pub fn flip_index(&mut self, index: usize) {
        self.data[index] ^= 1;
    }

    /// Converts a flat index back to `(row, feature, position)`.
    pub fn coords_of(&self, index: usize) -> (usize, usize, usize) {
        let position = index % self.word_bits;
        let word = index / self.word_bits;
        (word / self.features, word % self.features, position)
    }

    /// Raw one-byte-per-bit storage.
    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    /// Signed integer code of the word at `(row, feature)`.
    pub fn code(&self, row: usize, feature: usize) -> i64 {
        bits_to_code(self.word(row, feature), self.word_bits)
    }

    /// Overwrites the word at `(row, feature)` with the bits of `code`.
    pub fn set_code(&mut self, row: usize, feature: usize, code: i64) {
        let at = self.offset(row, feature);
        let q = self.word_bits;
        code_to_bits(code, q, &mut self.data[at..at + q]);
    }

    /// Decodes every word into a real-valued matrix.
    pub fn decode(&self, config: &QuantConfig) -> Result<Array2<f64>> {
        if config.q_bits != self.word_bits {
            return Err(Error::Codec(format!(
                "tensor stores {}-bit words, config expects {}",
                self.word_bits, config.q_bits
            )));
        }
        let mut out = Array2::zeros((self.rows, self.features));
        for r in 0..self.rows {
            for f in 0..self.features {
                out[[r, f]] = bits_to_code(self.word(r, f), self.word_bits) as f64
                    * config.step_size;
            }
        }
        Ok(out)
    }

    /// Copies the listed rows into a new tensor, in the order given.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.features * self.word_bits);
        for &r in rows {
            assert!(r < self.rows, "row index out of range");
            let at = r * self.features * self.word_bits;
            data.extend_from_slice(&self.data[at..at + self.features * self.word_bits]);
        }
        Self {
            rows: rows.len(),
            features: self.features,
            word_bits: self.word_bits,
            data,
        }
    }

    /// Overwrites row `dst_row` with row `src_row` of `src`.
    pub fn copy_row_from(&mut self, dst_row: usize, src: &Self, src_row: usize) {
        assert_eq!(self.features, src.features, "feature count mismatch");
        assert_eq!(self.word_bits, src.word_bits, "word width mismatch");
        let n = self.features * self.word_bits;
        let dst_at = dst_row * n;
        let src_at = src_row * n;
        self.data[dst_at..dst_at + n].copy_from_slice(&src.data[src_at..src_at + n]);
    }

    /// Relaxed copy with each bit as `0.0` or `1.0`.
    pub fn relax(&self) -> RelaxedTensor {
        RelaxedTensor {
            rows: self.rows,
            features: self.features,
            word_bits: self.word_bits,
            data: self.data.iter().map(|&b| b as f64).collect(),
        }
    }

    /// Packs the bit stream into bytes, first bit in the most significant
    /// position of byte zero; the final partial byte is zero-padded.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.data.len().div_ceil(8)];
        for (i, &bit) in self.data.iter().enumerate() {
            if bit == 1 {
                out[i / 8] |= 1 << (7 - i % 8);
            }
        }
        out
    }

    /// Inverse of [`to_packed_bytes`](Self::to_packed_bytes). Padding bits
    /// in the final byte must be zero.
    pub fn from_packed_bytes(
        rows: usize,
        features: usize,
        word_bits: usize,
        bytes: &[u8],
    ) -> Result<Self> {
        let n_bits = rows * features * word_bits;
        let n_bytes = n_bits.div_ceil(8);
        if bytes.len() != n_bytes {
            return Err(Error::Truncated(format!(
                "packed payload has {} bytes, shape needs {}",
                bytes.len(),
                n_bytes
            )));
        }
        let mut data = vec![0u8; n_bits];
        for (i, slot) in data.iter_mut().enumerate() {
            *slot = (bytes[i / 8] >> (7 - i % 8)) & 1;
        }
        for i in n_bits..n_bytes * 8 {
            if (bytes[i / 8] >> (7 - i % 8)) & 1 == 1 {
                return Err(Error::Codec("nonzero padding in packed bit stream".into()));
            }
        }
        Ok(Self {
            rows,
            features,
            word_bits,
            data,
        })
    }
}

impl Serialize for BitTensor {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = ser.serialize_struct("BitTensor", 4)?;
        s.serialize_field("rows", &self.rows)?;
        s.serialize_field("features", &self.features)?;
        s.serialize_field("word_bits", &self.word_bits)?;
        s.serialize_field("packed_hex", &hex::encode(self.to_packed_bytes()))?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for BitTensor {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            rows: usize,
            features: usize,
            word_bits: usize,
            packed_hex: String,
        }
        let w = Wire::deserialize(de)?;
        let bytes = hex::decode(&w.packed_hex).map_err(serde::de::Error::custom)?;
        BitTensor::from_packed_bytes(w.rows, w.features, w.word_bits, &bytes)
            .map_err(serde::de::Error::custom)
    }
}

/// Continuous counterpart of [`BitTensor`] used during optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedTensor {
    rows: usize,
    features: usize,
    word_bits: usize,
    data: Vec<f64>,
}

impl RelaxedTensor {
    /// Tensor filled with a constant.
    pub fn filled(rows: usize, features: usize, word_bits: usize, value: f64) -> Self {
        Self {
            rows,
            features,
            word_bits,
            data: vec![value; rows * features * word_bits],
        }
    }

    /// All-zero tensor.
    pub fn zeros(rows: usize, features: usize, word_bits: usize) -> Self {
        Self::filled(rows, features, word_bits, 0.0)
    }

    /// Wraps raw storage, validating length and finiteness.
    pub fn from_raw(
        rows: usize,
        features: usize,
        word_bits: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != rows * features * word_bits {
            return Err(Error::Shape(format!(
                "relaxed tensor expects {} entries, got {}",
                rows * features * word_bits,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Codec("non-finite relaxed value".into()));
        }
        Ok(Self {
            rows,
            features,
            word_bits,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn word_bits(&self) -> usize {
        self.word_bits
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.features, self.word_bits)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The relaxed word at `(row, feature)`.
    pub fn word(&self, row: usize, feature: usize) -> &[f64] {
        debug_assert!(row < self.rows && feature < self.features);
        let at = (row * self.features + feature) * self.word_bits;
        &self.data[at..at + self.word_bits]
    }

    pub fn get(&self, row: usize, feature: usize, position: usize) -> f64 {
        self.data[(row * self.features + feature) * self.word_bits + position]
    }

    pub fn set(&mut self, row: usize, feature: usize, position: usize, value: f64) {
        self.data[(row * self.features + feature) * self.word_bits + position] = value;
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rounds every value at threshold one half, halves rounding up.
    pub fn binarize(&self) -> BitTensor {
        BitTensor {
            rows: self.rows,
            features: self.features,
            word_bits: self.word_bits,
            data: self
                .data
                .iter()
                .map(|&v| if v >= 0.5 { 1u8 } else { 0u8 })
                .collect(),
        }
    }
}

/// Rounds a relaxed tensor to bits at threshold one half.
pub fn binarize(x: &RelaxedTensor) -> BitTensor {
    x.binarize()
}

/// Quantizes a real-valued layer: the step size is `max |w| / (2^(Q-1) - 1)`
/// and each weight becomes the nearest code, ties away from zero.
///
/// An all-zero layer has no scale to derive a step from and is rejected.
pub fn quantize_layer(weights: ArrayView2<f64>, q_bits: usize) -> Result<(BitTensor, QuantConfig)> {
    if !(MIN_Q_BITS..=MAX_Q_BITS).contains(&q_bits) {
        return Err(Error::Config(format!(
            "q_bits must lie in [{MIN_Q_BITS}, {MAX_Q_BITS}], got {q_bits}"
        )));
    }
    let max_abs = weights
        .iter()
        .map(|w| w.abs())
        .fold(0.0f64, f64::max);
    if !max_abs.is_finite() {
        return Err(Error::Codec("non-finite weight in layer".into()));
    }
    if max_abs == 0.0 {
        return Err(Error::Codec(
            "cannot derive a step size for an all-zero layer".into(),
        ));
    }
    let top = ((1i64 << (q_bits - 1)) - 1) as f64;
    let config = QuantConfig::new(q_bits, max_abs / top)?;
    Ok((quantize_with(&config, weights), config))
}

/// Quantizes a layer under a fixed, pre-existing step size. Codes are
/// clamped to the symmetric emit range.
pub fn quantize_with(config: &QuantConfig, weights: ArrayView2<f64>) -> BitTensor {
    let (rows, features) = weights.dim();
    let (lo, hi) = config.emit_range();
    let mut out = BitTensor::zeros(rows, features, config.q_bits);
    for r in 0..rows {
        for f in 0..features {
            let code = round_half_away(weights[[r, f]] / config.step_size) as i64;
            out.set_code(r, f, code.clamp(lo, hi));
        }
    }
    out
}

/// Number of positions where two equal-shape bit tensors differ.
pub fn bit_distance(a: &BitTensor, b: &BitTensor) -> Result<u64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "bit_distance shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .filter(|(x, y)| x != y)
        .count() as u64)
}
