//! Label text files.
//!
//! One record per line, whitespace separated:
//!
//! ```text
//! <video_id> real
//! <video_id> fake <start>-<end>[;<start>-<end>...] [c=<0|1>,<0|1>,...]
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. The optional `c=`
//! field lists per-sequence labels; when absent they are derived from the
//! segments (see [`LabelRecord::sequence_labels`]).

use std::fs;
use std::path::Path;

use super::FeatureSequenceSet;
use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRecord {
    pub video_id: String,
    pub fake: bool,
    /// Fake segments in seconds, sorted and non-overlapping.
    pub segments: Vec<(f64, f64)>,
    pub seq_labels: Option<Vec<bool>>,
}

impl LabelRecord {
    pub fn real(video_id: impl Into<String>) -> Self {
        Self {
            video_id: video_id.into(),
            fake: false,
            segments: Vec::new(),
            seq_labels: None,
        }
    }

    pub fn fake(video_id: impl Into<String>, segments: Vec<(f64, f64)>) -> Self {
        Self {
            video_id: video_id.into(),
            fake: true,
            segments,
            seq_labels: None,
        }
    }

    /// Sequence `i` (window `[i·stride, i·stride + duration]`) is fake iff it
    /// overlaps some fake segment by at least half a window. Explicit labels
    /// take precedence.
    pub fn sequence_labels(&self, n: usize, stride: f64, duration: f64) -> Vec<bool> {
        if let Some(c) = &self.seq_labels {
            return c.clone();
        }
        (0..n)
            .map(|i| {
                let (ws, we) = (i as f64 * stride, i as f64 * stride + duration);
                self.segments.iter().any(|&(s, e)| {
                    let overlap = we.min(e) - ws.max(s);
                    overlap >= 0.5 * duration - 1e-9
                })
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if !self.fake && !self.segments.is_empty() {
            return Err(Error::Data(format!("{}: real video with fake segments", self.video_id)));
        }
        if !self.fake && self.seq_labels.as_ref().is_some_and(|c| c.iter().any(|&b| b)) {
            return Err(Error::Data(format!("{}: real video with fake sequences", self.video_id)));
        }
        if self.fake && self.segments.is_empty() && self.seq_labels.is_none() {
            return Err(Error::Data(format!(
                "{}: fake video needs segments or per-sequence labels",
                self.video_id
            )));
        }
        for (i, &(s, e)) in self.segments.iter().enumerate() {
            if !(s.is_finite() && e.is_finite() && s >= 0.0 && e > s) {
                return Err(Error::Data(format!("{}: bad segment {s}-{e}", self.video_id)));
            }
            if i > 0 && s < self.segments[i - 1].1 {
                return Err(Error::Data(format!(
                    "{}: overlapping segments around {s}",
                    self.video_id
                )));
            }
        }
        Ok(())
    }

    /// Checks segment bounds and explicit label count against the features.
    pub fn validate_against(&self, f: &FeatureSequenceSet) -> Result<()> {
        if let Some(&(_, e)) = self.segments.last() {
            if e > f.video_duration + 1e-6 {
                return Err(Error::Data(format!(
                    "{}: segment ends at {e} past video end {}",
                    self.video_id, f.video_duration
                )));
            }
        }
        if let Some(c) = &self.seq_labels {
            if c.len() != f.len() {
                return Err(Error::Data(format!(
                    "{}: {} sequence labels for {} sequences",
                    self.video_id,
                    c.len(),
                    f.len()
                )));
            }
        }
        Ok(())
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<LabelRecord> {
    let err = |msg: String| Error::Data(format!("line {lineno}: {msg}"));
    let mut fields = line.split_whitespace();
    let video_id = fields.next().ok_or_else(|| err("missing video id".into()))?;
    let fake = match fields.next() {
        Some("real") => false,
        Some("fake") => true,
        Some(other) => return Err(err(format!("label must be real or fake, got `{other}`"))),
        None => return Err(err("missing label".into())),
    };
    let mut rec = LabelRecord {
        video_id: video_id.to_string(),
        fake,
        segments: Vec::new(),
        seq_labels: None,
    };
    for field in fields {
        if let Some(bits) = field.strip_prefix("c=") {
            if rec.seq_labels.is_some() {
                return Err(err("repeated c= field".into()));
            }
            let c = bits
                .split(',')
                .map(|b| match b {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(err(format!("bad sequence label `{other}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            rec.seq_labels = Some(c);
        } else {
            if !rec.segments.is_empty() {
                return Err(err("segments must form a single `;`-separated field".into()));
            }
            for pair in field.split(';').filter(|p| !p.is_empty()) {
                let (s, e) = pair
                    .split_once('-')
                    .ok_or_else(|| err(format!("segment `{pair}` is not start-end")))?;
                let parse = |v: &str| {
                    v.parse::<f64>()
                        .map_err(|_| err(format!("bad number `{v}` in segment `{pair}`")))
                };
                rec.segments.push((parse(s)?, parse(e)?));
            }
        }
    }
    rec.segments
        .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    rec.validate().map_err(|e| err(e.to_string()))?;
    Ok(rec)
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelRecord>> {
    let mut out: Vec<LabelRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rec = parse_line(line, i + 1)?;
        if out.iter().any(|r| r.video_id == rec.video_id) {
            return Err(Error::Data(format!(
                "line {}: duplicate video id `{}`",
                i + 1,
                rec.video_id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    parse_labels(&fs::read_to_string(path)?)
}

pub fn format_labels(records: &[LabelRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.video_id);
        out.push_str(if r.fake { " fake" } else { " real" });
        if !r.segments.is_empty() {
            let segs: Vec<String> = r
                .segments
                .iter()
                .map(|(s, e)| format!("{s:.6}-{e:.6}"))
                .collect();
            out.push(' ');
            out.push_str(&segs.join(";"));
        }
        if let Some(c) = &r.seq_labels {
            let bits: Vec<&str> = c.iter().map(|&b| if b { "1" } else { "0" }).collect();
            out.push_str(" c=");
            out.push_str(&bits.join(","));
        }
        out.push('\n');
    }
    out
}

pub fn write_labels(path: &Path, records: &[LabelRecord]) -> Result<()> {
    write_atomic(path, format_labels(records).as_bytes())
}
