//! Binary checkpoint files.
//!
//! ```text
//! 4       magic "MMBA"
//! 2       u16 version (= 1)
//! 4 + n   u32 byte length + `key = value` model configuration text
//! then for every parameter tensor in declaration order:
//! 4 + 4   u32 rows, u32 cols
//! 8·r·c   row-major f64 values
//! ```
//! All integers and floats are little-endian. Declaration order is each
//! encoder (V, L, A among the selected modalities) as forward cell
//! `w_z w_r w_h u_z u_r u_h b_z b_r b_h`, backward cell likewise, `dense_w`,
//! `dense_b`; then `head_w head_b cls_w cls_b reg_w reg_b`.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kv::{self, KvConfig};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMBA";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let config = kv::render(&model.config.to_pairs());
    let mut out = Vec::with_capacity(10 + config.len() + 8 * model.params.parameter_count() + 256);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for t in model.params.tensors() {
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.buf.len()) {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.pos, format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint. Every failure, including a configuration block
/// that does not parse or validate, is reported as [`Error::Format`].
pub fn decode_checkpoint<T: Scalar>(buf: &[u8]) -> Result<Model<T>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MMBA\""));
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32("config length")? as usize;
    let at = c.pos;
    let text = std::str::from_utf8(c.take(len, "config")?)
        .map_err(|_| Error::format(at, "configuration is not UTF-8"))?;
    let mut config = ModelConfig::default();
    let bad = |e: Error| Error::format(at, format!("configuration: {e}"));
    for (k, v) in kv::parse(text).map_err(bad)? {
        if !config.apply(&k, &v).map_err(bad)? {
            return Err(bad(Error::UnknownKey(k)));
        }
    }
    config.validate().map_err(bad)?;

    let mut params = ModelParams::<T>::zeros(&config);
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        let at = c.pos;
        let rows = c.u32("tensor rows")? as usize;
        let cols = c.u32("tensor cols")? as usize;
        if (rows, cols) != t.shape() {
            return Err(Error::format(
                at,
                format!("tensor {i} is {rows}×{cols}, configuration implies {:?}", t.shape()),
            ));
        }
        let bytes = c.take(8 * t.len(), "tensor values")?;
        for (d, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(at, format!("tensor {i} has a non-finite value")));
            }
            *d = T::of(v);
        }
    }
    if c.pos != buf.len() {
        return Err(Error::format(c.pos, "trailing bytes after last tensor"));
    }
    Ok(Model { config, params })
}

pub fn write_checkpoint<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::tests::toy_config;
    use super::super::Variant;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Model::new(toy_config(Variant::MmmsBa, "LA"), &mut rng).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = model();
        let bytes = encode_checkpoint(&m);
        assert_eq!(&bytes[..4], b"MMBA");
        let back: Model<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let bytes = encode_checkpoint(&model());
        for cut in [0, 2, 5, 9, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint::<f64>(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad.extend_from_slice(&[0; 3]);
        assert!(matches!(decode_checkpoint::<f64>(&bad), Err(Error::Format { .. })));
        // a config that names an unknown key or breaks a shape
        let text = b"model.hidden = 3";
        let pos = bytes.windows(text.len()).position(|w| w == text).unwrap();
        let mut bad = bytes.clone();
        bad[pos + text.len() - 1] = b'5';
        assert!(matches!(decode_checkpoint::<f64>(&bad), Err(Error::Format { .. })));
        let mut bad = bytes;
        bad[pos] = b'x';
        assert!(matches!(decode_checkpoint::<f64>(&bad), Err(Error::Format { .. })));
    }
}
