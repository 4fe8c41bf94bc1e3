//! `MSQF` binary feature files.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "MSQF"
//! 4       2           u16 version (= 1)
//! 6       4           u32 N
//! 10      4 × 3       u32 d_v, d_l, d_a
//! 22      4 × 3       f32 seq_duration, seq_stride, video_duration
//! 34      4·N·d_v     X_v row-major f32
//! ...     4·N·d_l     X_l
//! ...     4·N·d_a     X_a
//! ...     2 + len     u16 byte length + UTF-8 video id
//! ```
//! All integers and floats are little-endian. Values are stored as `f32` and
//! widened to `f64` on read.

use std::fs;
use std::path::Path;

use super::FeatureSequenceSet;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const MSQF_MAGIC: &[u8; 4] = b"MSQF";
pub const MSQF_VERSION: u16 = 1;

pub fn encode_features(set: &FeatureSequenceSet) -> Result<Vec<u8>> {
    set.validate()?;
    let dim = |t: &Tensor<f64>| {
        u32::try_from(t.cols()).map_err(|_| Error::Data("feature width exceeds u32".into()))
    };
    let n = u32::try_from(set.len()).map_err(|_| Error::Data("N exceeds u32".into()))?;
    let id = set.video_id.as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::Data(format!("video id longer than {} bytes", u16::MAX)))?;

    let values = set.visual.len() + set.lip.len() + set.audio.len();
    let mut out = Vec::with_capacity(34 + 4 * values + 2 + id.len());
    out.extend_from_slice(MSQF_MAGIC);
    out.extend_from_slice(&MSQF_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    for t in [&set.visual, &set.lip, &set.audio] {
        out.extend_from_slice(&dim(t)?.to_le_bytes());
    }
    for v in [set.seq_duration, set.seq_stride, set.video_duration] {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for t in [&set.visual, &set.lip, &set.audio] {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::format(self.pos, format!("truncated while reading {what}")));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Tensor<f64>> {
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::format(self.pos, format!("{what} size overflows")))?;
        let bytes = self.take(count, what)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(rows, cols, data)
    }
}

pub fn decode_features(buf: &[u8]) -> Result<FeatureSequenceSet> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MSQF_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MSQF\""));
    }
    let version = r.u16("version")?;
    if version != MSQF_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n = r.u32("N")? as usize;
    let d_v = r.u32("d_v")? as usize;
    let d_l = r.u32("d_l")? as usize;
    let d_a = r.u32("d_a")? as usize;
    let seq_duration = r.f32("seq_duration")? as f64;
    let seq_stride = r.f32("seq_stride")? as f64;
    let video_duration = r.f32("video_duration")? as f64;
    let visual = r.matrix(n, d_v, "X_v")?;
    let lip = r.matrix(n, d_l, "X_l")?;
    let audio = r.matrix(n, d_a, "X_a")?;
    let id_len = r.u16("video id length")? as usize;
    let id_at = r.pos;
    let video_id = std::str::from_utf8(r.take(id_len, "video id")?)
        .map_err(|_| Error::format(id_at, "video id is not UTF-8"))?
        .to_string();
    if r.pos != buf.len() {
        return Err(Error::format(r.pos, "trailing bytes after video id"));
    }
    let set = FeatureSequenceSet {
        video_id,
        visual,
        lip,
        audio,
        seq_duration,
        seq_stride,
        video_duration,
    };
    set.validate().map_err(|e| Error::format(0, e.to_string()))?;
    Ok(set)
}

pub fn write_features(path: &Path, set: &FeatureSequenceSet) -> Result<()> {
    write_atomic(path, &encode_features(set)?)
}

pub fn read_features(path: &Path) -> Result<FeatureSequenceSet> {
    decode_features(&fs::read(path)?)
}
