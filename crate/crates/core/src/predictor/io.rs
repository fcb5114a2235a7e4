//! `PSWT` weight files.
//!
//! ```text
//! "PSWT" | version u8 (=1) | layer count u16
//! per layer: rows u32 | cols u32 | rows·cols f64 weights (row-major) | cols f64 biases
//! activation id u8
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use super::mlp::{Activation, Layer, PredictorWeights};
use super::PredictorError;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"PSWT";
const VERSION: u8 = 1;

pub fn weights_to_bytes(w: &PredictorWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * w.param_count() + 8 * w.layers().len());
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(w.layers().len() as u16).to_le_bytes());
    for l in w.layers() {
        out.extend_from_slice(&(l.rows as u32).to_le_bytes());
        out.extend_from_slice(&(l.cols as u32).to_le_bytes());
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.push(w.activation() as u8);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    layer: Option<usize>,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> PredictorError {
        PredictorError::Format {
            offset: self.pos,
            layer: self.layer,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], PredictorError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, PredictorError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, PredictorError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, PredictorError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, PredictorError> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.err(format!("{what} size overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn weights_from_bytes(buf: &[u8]) -> Result<PredictorWeights, PredictorError> {
    let mut c = Cursor {
        buf,
        pos: 0,
        layer: None,
    };
    if c.take(4, "magic")? != WEIGHTS_MAGIC {
        c.pos = 0;
        return Err(c.err("bad magic, expected PSWT"));
    }
    let version = c.u8("version")?;
    if version != VERSION {
        c.pos -= 1;
        return Err(c.err(format!("unsupported version {version}")));
    }
    let count = c.u16("layer count")? as usize;
    if count == 0 {
        return Err(c.err("zero layers"));
    }
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        c.layer = Some(i);
        let rows = c.u32("rows")? as usize;
        let cols = c.u32("cols")? as usize;
        let weights = c.f64s(rows.saturating_mul(cols), "weight matrix")?;
        let bias = c.f64s(cols, "bias vector")?;
        layers.push(Layer {
            rows,
            cols,
            weights,
            bias,
        });
    }
    c.layer = None;
    let id = c.u8("activation id")?;
    let activation = Activation::from_id(id).ok_or_else(|| {
        c.pos -= 1;
        c.err(format!("unknown activation id {id}"))
    })?;
    if c.pos != buf.len() {
        return Err(c.err(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    PredictorWeights::new(layers, activation).map_err(|e| PredictorError::Format {
        offset: buf.len(),
        layer: None,
        reason: e.to_string(),
    })
}

pub fn save_weights(w: &PredictorWeights, path: impl AsRef<Path>) -> Result<(), PredictorError> {
    std::fs::write(path, weights_to_bytes(w))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<PredictorWeights, PredictorError> {
    weights_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PredictorWeights {
        PredictorWeights::init(2, 4, &[8, 6], Activation::Silu, 17).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let w = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pswt");
        save_weights(&w, &path).unwrap();
        assert!(load_weights(&path).unwrap().bits_eq(&w));
    }

    #[test]
    fn header_layout() {
        let bytes = weights_to_bytes(&sample());
        assert_eq!(&bytes[..4], b"PSWT");
        assert_eq!(bytes[4], 1);
        assert_eq!(u16::from_le_bytes([bytes[5], bytes[6]]), 3);
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 8);
        assert_eq!(*bytes.last().unwrap(), 1);
        let expect = 7 + (8 + 8 * (6 * 8 + 8)) + (8 + 8 * (8 * 6 + 6)) + (8 + 8 * (6 * 2 + 2)) + 1;
        assert_eq!(bytes.len(), expect);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = weights_to_bytes(&sample());
        bytes[0] = b'X';
        match weights_from_bytes(&bytes) {
            Err(PredictorError::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_mid_matrix_names_layer() {
        let bytes = weights_to_bytes(&sample());
        // Layer 0 occupies 7..(7 + 8 + 8·56); cut inside layer 1's matrix.
        let layer1 = 7 + 8 + 8 * 56;
        let cut = &bytes[..layer1 + 8 + 40];
        match weights_from_bytes(cut) {
            Err(PredictorError::Format {
                layer: Some(1),
                offset,
                reason,
            }) => {
                assert_eq!(offset, layer1 + 8);
                assert!(reason.contains("weight matrix"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_version_and_activation() {
        let mut bytes = weights_to_bytes(&sample());
        bytes[4] = 9;
        assert!(matches!(
            weights_from_bytes(&bytes),
            Err(PredictorError::Format { offset: 4, .. })
        ));
        let mut bytes = weights_to_bytes(&sample());
        let n = bytes.len();
        bytes[n - 1] = 7;
        assert!(matches!(
            weights_from_bytes(&bytes),
            Err(PredictorError::Format { offset, .. }) if offset == n - 1
        ));
        let mut bytes = weights_to_bytes(&sample());
        bytes.push(0);
        assert!(weights_from_bytes(&bytes).is_err());
    }
}
