//! From per-sequence predictions to scored fake segments: window mapping,
//! Soft-NMS, and the tab-separated prediction file.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kv::{self, pair, KvConfig};
use crate::model::{iou_1d, SequencePrediction};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64, score: f64) -> Self {
        Self { start, end, score }
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        iou_1d(self.interval(), other.interval())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NmsMode {
    Hard,
    Gaussian,
}

impl FromStr for NmsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(NmsMode::Hard),
            "gaussian" => Ok(NmsMode::Gaussian),
            _ => Err(Error::Config(format!("unknown NMS mode `{s}`"))),
        }
    }
}

impl fmt::Display for NmsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NmsMode::Hard => "hard",
            NmsMode::Gaussian => "gaussian",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizeConfig {
    /// Sequences with `p_fake` strictly above this become candidates.
    pub score_threshold: f64,
    pub mode: NmsMode,
    /// Hard mode: suppress at IoU at or above this.
    pub iou_thresh: f64,
    /// Gaussian mode: scores decay by `exp(−IoU²/σ)`.
    pub sigma: f64,
    pub min_score: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            mode: NmsMode::Gaussian,
            iou_thresh: 0.5,
            sigma: 0.5,
            min_score: 0.001,
        }
    }
}

impl KvConfig for LocalizeConfig {
    fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "localize.score_threshold" => self.score_threshold = kv::value(key, v)?,
            "localize.nms" => self.mode = v.parse()?,
            "localize.iou_thresh" => self.iou_thresh = kv::value(key, v)?,
            "localize.sigma" => self.sigma = kv::value(key, v)?,
            "localize.min_score" => self.min_score = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            pair("localize.score_threshold", self.score_threshold),
            pair("localize.nms", self.mode),
            pair("localize.iou_thresh", self.iou_thresh),
            pair("localize.sigma", self.sigma),
            pair("localize.min_score", self.min_score),
        ]
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == NmsMode::Gaussian && !(self.sigma > 0.0) {
            return Err(Error::Config(format!("localize.sigma = {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

/// Candidate segments `[i·stride + start_offset, i·stride + end_offset]`
/// clipped to the video, one per sequence whose `p_fake` exceeds
/// `score_threshold`.
pub fn extract_segments(
    preds: &[SequencePrediction],
    seq_stride: f64,
    video_duration: f64,
    score_threshold: f64,
) -> Vec<Segment> {
    preds
        .iter()
        .enumerate()
        .filter(|(_, p)| p.p_fake > score_threshold)
        .map(|(i, p)| {
            let ws = i as f64 * seq_stride;
            let s = (ws + p.start_offset).clamp(0.0, video_duration);
            let e = (ws + p.end_offset).clamp(0.0, video_duration);
            Segment::new(s, e.max(s), p.p_fake)
        })
        .collect()
}

/// Greedy (Soft-)NMS. Repeatedly keeps the highest-scoring remaining
/// segment, then removes (hard) or down-weights (gaussian) the rest by their
/// overlap with it. Returns survivors with score at least `min_score`,
/// highest score first.
pub fn soft_nms(segs: &[Segment], cfg: &LocalizeConfig) -> Vec<Segment> {
    let mut pool: Vec<Segment> = segs.to_vec();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let mut best = 0;
        for (i, s) in pool.iter().enumerate().skip(1) {
            if s.score > pool[best].score {
                best = i;
            }
        }
        let keep = pool.remove(best);
        match cfg.mode {
            NmsMode::Hard => pool.retain(|s| keep.iou(s) < cfg.iou_thresh),
            NmsMode::Gaussian => {
                for s in &mut pool {
                    let iou = keep.iou(s);
                    s.score *= (-iou * iou / cfg.sigma).exp();
                }
                pool.retain(|s| s.score >= cfg.min_score);
            }
        }
        out.push(keep);
    }
    out.retain(|s| s.score >= cfg.min_score);
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Extraction followed by [`soft_nms`].
pub fn localize(
    preds: &[SequencePrediction],
    seq_stride: f64,
    video_duration: f64,
    cfg: &LocalizeConfig,
) -> Vec<Segment> {
    soft_nms(&extract_segments(preds, seq_stride, video_duration, cfg.score_threshold), cfg)
}

/// Segments predicted for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSegments {
    pub video_id: String,
    pub segments: Vec<Segment>,
}

/// `video_id \t start \t end \t score` per line, six decimals.
pub fn format_predictions(videos: &[VideoSegments]) -> String {
    let mut out = String::new();
    for v in videos {
        for s in &v.segments {
            out.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\n", v.video_id, s.start, s.end, s.score));
        }
    }
    out
}

/// Groups lines by video id in first-appearance order.
pub fn parse_predictions(text: &str) -> Result<Vec<VideoSegments>> {
    let mut out: Vec<VideoSegments> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| Error::Data(format!("line {}: {m}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(err("expected 4 tab-separated fields"));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| err(&format!("bad number `{s}`")));
        let seg = Segment::new(num(f[1])?, num(f[2])?, num(f[3])?);
        match out.iter_mut().find(|v| v.video_id == f[0]) {
            Some(v) => v.segments.push(seg),
            None => out.push(VideoSegments {
                video_id: f[0].to_string(),
                segments: vec![seg],
            }),
        }
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, videos: &[VideoSegments]) -> Result<()> {
    write_atomic(path, format_predictions(videos).as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<VideoSegments>> {
    parse_predictions(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(p: f64, s: f64, e: f64) -> SequencePrediction {
        SequencePrediction {
            p_fake: p,
            start_offset: s,
            end_offset: e,
        }
    }

    #[test]
    fn extraction_examples() {
        let preds = [pred(0.1, 0.0, 0.5), pred(0.2, 0.0, 0.5), pred(0.9, 0.0, 0.5)];
        assert_eq!(extract_segments(&preds, 0.5, 10.0, 0.5), vec![Segment::new(1.0, 1.5, 0.9)]);
        assert!(extract_segments(&preds[..2], 0.5, 10.0, 0.5).is_empty());
        let clipped = extract_segments(&[pred(0.7, 1.8, 2.6)], 0.5, 2.0, 0.5);
        assert_eq!(clipped, vec![Segment::new(1.8, 2.0, 0.7)]);
        let inverted = extract_segments(&[pred(0.7, 0.8, 0.2)], 1.0, 2.0, 0.5);
        assert_eq!(inverted, vec![Segment::new(0.8, 0.8, 0.7)]);
    }

    #[test]
    fn nms_examples() {
        let same = [Segment::new(0.0, 1.0, 0.9), Segment::new(0.0, 1.0, 0.8)];
        let hard = LocalizeConfig { mode: NmsMode::Hard, ..LocalizeConfig::default() };
        assert_eq!(soft_nms(&same, &hard), vec![same[0]]);
        let soft = soft_nms(&same, &LocalizeConfig::default());
        assert_eq!(soft.len(), 2);
        assert!((soft[1].score - 0.8 * (-2f64).exp()).abs() < 1e-15);
        let disjoint = [Segment::new(0.0, 1.0, 0.3), Segment::new(2.0, 3.0, 0.6)];
        assert_eq!(soft_nms(&disjoint, &hard), vec![disjoint[1], disjoint[0]]);
        assert_eq!(soft_nms(&disjoint, &LocalizeConfig::default()), vec![disjoint[1], disjoint[0]]);
    }

    #[test]
    fn prediction_file_roundtrip() {
        let v = vec![
            VideoSegments { video_id: "a".into(), segments: vec![Segment::new(0.5, 1.25, 0.75)] },
            VideoSegments {
                video_id: "b".into(),
                segments: vec![Segment::new(0.0, 2.0, 0.5), Segment::new(3.0, 4.0, 0.125)],
            },
        ];
        let text = format_predictions(&v);
        assert!(text.starts_with("a\t0.500000\t1.250000\t0.750000\n"));
        assert_eq!(parse_predictions(&text).unwrap(), v);
        assert!(parse_predictions("a\t1\t2\n").is_err());
    }

    fn segments() -> impl Strategy<Value = Vec<Segment>> {
        prop::collection::vec((0.0f64..10.0, 0.0f64..3.0, 0.0f64..1.0), 0..12)
            .prop_map(|v| v.into_iter().map(|(s, l, p)| Segment::new(s, s + l, p)).collect())
    }

    proptest! {
        #[test]
        fn nms_never_raises_scores_and_keeps_identity(segs in segments(), hard in any::<bool>()) {
            let cfg = LocalizeConfig {
                mode: if hard { NmsMode::Hard } else { NmsMode::Gaussian },
                ..LocalizeConfig::default()
            };
            let out = soft_nms(&segs, &cfg);
            prop_assert!(out.len() <= segs.len());
            for o in &out {
                prop_assert!(segs.iter().any(|s| s.start == o.start && s.end == o.end && s.score >= o.score));
            }
            for w in out.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }

        #[test]
        fn hard_nms_is_idempotent_and_separates(segs in segments(), thresh in 0.1f64..0.9) {
            let cfg = LocalizeConfig { mode: NmsMode::Hard, iou_thresh: thresh, ..LocalizeConfig::default() };
            let once = soft_nms(&segs, &cfg);
            prop_assert_eq!(soft_nms(&once, &cfg), once.clone());
            for (i, a) in once.iter().enumerate() {
                for b in &once[i + 1..] {
                    prop_assert!(a.iou(b) < thresh);
                }
            }
        }

        #[test]
        fn extraction_count_bounded(ps in prop::collection::vec((0.0f64..1.0, 0.0f64..2.0, 0.0f64..2.0), 1..20)) {
            let preds: Vec<_> = ps.iter().map(|&(p, s, e)| pred(p, s, e)).collect();
            let segs = extract_segments(&preds, 0.5, 5.0, 0.5);
            prop_assert!(segs.len() <= preds.len());
            for s in segs {
                prop_assert!(0.0 <= s.start && s.start <= s.end && s.end <= 5.0);
            }
        }
    }
}
