//! Binary checkpoint format for victim models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          4 bytes  "TBA1"
//! version        u16      currently 1
//! input_dim      u32
//! hidden_count   u32, then hidden widths as u32 each
//! feature_dim    u32
//! classes        u32
//! nonlinearity   u8
//! train_seed     u64
//! dataset_id     u32 length + utf-8 bytes
//! test_accuracy  u8 flag (0/1) + f64 when flagged
//! extractor      u32 layer count, then per layer:
//!                  rows u32, cols u32, weights rows*cols f64, bias rows f64
//! fc_full        rows u32, cols u32, rows*cols f64
//! q_bits         u8
//! step_size      f64
//! fc_bits        packed bit stream, 8 bits per byte, first bit in the most
//!                significant position; u32 byte length + payload
//! ```
//!
//! Word bits are stored sign-first, matching the in-memory codec.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::quant::{BitTensor, QuantConfig};

use super::{ArchSpec, DenseLayer, ModelMeta, Nonlinearity, VictimModel};

const MAGIC: [u8; 4] = *b"TBA1";
const VERSION: u16 = 1;

pub(super) fn encode(model: &VictimModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let arch = model.arch();
    push_u32(&mut out, arch.input_dim);
    push_u32(&mut out, arch.hidden.len());
    for &w in &arch.hidden {
        push_u32(&mut out, w);
    }
    push_u32(&mut out, arch.feature_dim);
    push_u32(&mut out, arch.classes);
    out.push(arch.nonlinearity.id());

    out.extend_from_slice(&model.train_seed().to_le_bytes());

    let meta = model.meta();
    push_u32(&mut out, meta.dataset_id.len());
    out.extend_from_slice(meta.dataset_id.as_bytes());
    match meta.test_accuracy {
        Some(acc) => {
            out.push(1);
            out.extend_from_slice(&acc.to_le_bytes());
        }
        None => out.push(0),
    }

    push_u32(&mut out, model.extractor().len());
    for layer in model.extractor() {
        push_u32(&mut out, layer.weights.nrows());
        push_u32(&mut out, layer.weights.ncols());
        for &v in layer.weights.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in layer.bias.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    let fc = model.fc_full();
    push_u32(&mut out, fc.nrows());
    push_u32(&mut out, fc.ncols());
    for &v in fc.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }

    out.push(model.fc_quant().q_bits() as u8);
    out.extend_from_slice(&model.fc_quant().step_size().to_le_bytes());

    let packed = model.fc_bits().to_packed_bytes();
    push_u32(&mut out, packed.len());
    out.extend_from_slice(&packed);
    out
}

pub(super) fn decode(bytes: &[u8]) -> Result<VictimModel> {
    let mut r = Reader::new(bytes);

    let magic = r.take_array::<4>("magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.take_u16("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }

    let input_dim = r.take_u32("input_dim")? as usize;
    let hidden_count = r.take_u32("hidden_count")? as usize;
    if hidden_count > 1 << 16 {
        return Err(Error::Truncated(format!(
            "implausible hidden layer count {hidden_count}"
        )));
    }
    let mut hidden = Vec::with_capacity(hidden_count);
    for _ in 0..hidden_count {
        hidden.push(r.take_u32("hidden width")? as usize);
    }
    let feature_dim = r.take_u32("feature_dim")? as usize;
    let classes = r.take_u32("classes")? as usize;
    let nonlinearity = Nonlinearity::from_id(r.take_u8("nonlinearity")?)?;
    let arch = ArchSpec {
        input_dim,
        hidden,
        feature_dim,
        classes,
        nonlinearity,
    };

    let train_seed = r.take_u64("train_seed")?;

    let id_len = r.take_u32("dataset_id length")? as usize;
    let dataset_id = String::from_utf8(r.take_bytes(id_len, "dataset_id")?.to_vec())
        .map_err(|_| Error::Truncated("dataset_id is not utf-8".into()))?;
    let test_accuracy = match r.take_u8("test_accuracy flag")? {
        0 => None,
        1 => Some(r.take_f64("test_accuracy")?),
        other => {
            return Err(Error::Truncated(format!(
                "bad test_accuracy flag {other}"
            )))
        }
    };

    let layer_count = r.take_u32("extractor layer count")? as usize;
    let mut extractor = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let rows = r.take_u32("layer rows")? as usize;
        let cols = r.take_u32("layer cols")? as usize;
        let weights = r.take_matrix(rows, cols, "layer weights")?;
        let mut bias = Array1::zeros(rows);
        for b in bias.iter_mut() {
            *b = r.take_f64("layer bias")?;
        }
        extractor.push(DenseLayer { weights, bias });
    }

    let fc_rows = r.take_u32("fc rows")? as usize;
    let fc_cols = r.take_u32("fc cols")? as usize;
    let fc_full = r.take_matrix(fc_rows, fc_cols, "fc weights")?;

    let q_bits = r.take_u8("q_bits")? as usize;
    let step_size = r.take_f64("step_size")?;
    let fc_quant = QuantConfig::new(q_bits, step_size)?;

    let packed_len = r.take_u32("packed bit length")? as usize;
    let packed = r.take_bytes(packed_len, "fc bits")?;
    let fc_bits = BitTensor::from_packed_bytes(fc_rows, fc_cols, q_bits, packed)?;

    r.finish()?;

    VictimModel::from_checkpoint_parts(
        arch,
        extractor,
        fc_full,
        fc_bits,
        fc_quant,
        train_seed,
        ModelMeta {
            dataset_id,
            test_accuracy,
        },
    )
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    fn take_bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "checkpoint ended inside {what} (need {n} bytes at offset {})",
                self.at
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn take_array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take_bytes(N, what)?.try_into().unwrap())
    }

    fn take_u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take_bytes(1, what)?[0])
    }

    fn take_u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take_array::<2>(what)?))
    }

    fn take_u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take_array::<4>(what)?))
    }

    fn take_u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take_array::<8>(what)?))
    }

    fn take_f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take_array::<8>(what)?))
    }

    fn take_matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        if rows.checked_mul(cols).is_none() || rows * cols > 1 << 28 {
            return Err(Error::Truncated(format!("implausible {what} shape")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.take_f64(what)?);
        }
        Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Truncated(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Truncated(format!(
                "{} trailing bytes after checkpoint payload",
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample_model() -> VictimModel {
        let arch = ArchSpec::new(3, vec![4], 2, 2).unwrap();
        let extractor = vec![
            DenseLayer {
                weights: Array2::from_shape_fn((4, 3), |(r, c)| 0.1 * (r as f64) - 0.2 * (c as f64)),
                bias: array![0.1, -0.1, 0.0, 0.2],
            },
            DenseLayer {
                weights: Array2::from_shape_fn((2, 4), |(r, c)| 0.3 * (r as f64 + 1.0) + 0.05 * c as f64),
                bias: array![0.0, -0.3],
            },
        ];
        let fc_full = array![[0.7, -0.4], [-0.2, 0.9]];
        let mut m = VictimModel::from_parts(arch, extractor, fc_full, 8, 42).unwrap();
        m.set_meta(ModelMeta {
            dataset_id: "blobs-k2-d3".into(),
            test_accuracy: Some(0.9375),
        });
        m
    }

    #[test]
    fn round_trip_preserves_everything() {
        let m = sample_model();
        let bytes = encode(&m);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.arch(), m.arch());
        assert_eq!(back.extractor(), m.extractor());
        assert_eq!(back.fc_full(), m.fc_full());
        assert_eq!(back.fc_bits(), m.fc_bits());
        assert_eq!(back.fc_quant(), m.fc_quant());
        assert_eq!(back.train_seed(), m.train_seed());
        assert_eq!(back.meta(), m.meta());
        // Re-encoding is byte-identical.
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = encode(&sample_model());
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn future_version_is_rejected() {
        let mut bytes = encode(&sample_model());
        bytes[4] = 0xFF;
        bytes[5] = 0xFF;
        match decode(&bytes) {
            Err(Error::UnsupportedVersion(0xFFFF)) => {}
            other => panic!("expected UnsupportedVersion, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode(&sample_model());
        for cut in [5, 20, bytes.len() / 2, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Truncated(_)) => {}
                other => panic!("cut at {cut}: expected Truncated, got {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode(&sample_model());
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Truncated(_))));
    }

    #[test]
    fn file_round_trip() {
        let m = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("victim.ckpt");
        m.save_checkpoint(&path).unwrap();
        let back = VictimModel::load_checkpoint(&path).unwrap();
        assert_eq!(back.fc_bits(), m.fc_bits());
        let probe = array![0.3, -0.7, 1.1];
        assert_eq!(
            back.logits(probe.view()).unwrap(),
            m.logits(probe.view()).unwrap()
        );
    }
}
