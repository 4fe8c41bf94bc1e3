//! Training objective: focal classification loss over all sequences plus an
//! IoU-based regression loss over fake sequences, normalised by the number of
//! fake sequences (at least one).

use super::{ForwardOutput, ModelConfig, RegLossKind, SequencePrediction};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const P_FLOOR: f64 = 1e-12;

/// Ground truth of one video as the loss sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTarget {
    pub fake: bool,
    pub seq_labels: Vec<bool>,
    /// Absolute fake segments in seconds.
    pub segments: Vec<(f64, f64)>,
    /// Per sequence: the segment regressed against, relative to the window
    /// start. `None` for real sequences and fake sequences overlapping no
    /// segment.
    pub reg_targets: Vec<Option<(f64, f64)>>,
}

impl VideoTarget {
    pub fn new(
        seq_labels: Vec<bool>,
        segments: Vec<(f64, f64)>,
        seq_stride: f64,
        seq_duration: f64,
    ) -> Result<Self> {
        for &(s, e) in &segments {
            if !(e > s) {
                return Err(Error::Data(format!("segment {s}-{e} has no extent")));
            }
        }
        let reg_targets = seq_labels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if !c {
                    return None;
                }
                let ws = i as f64 * seq_stride;
                let window = (ws, ws + seq_duration);
                let mut best: Option<((f64, f64), f64)> = None;
                for &seg in &segments {
                    let iou = iou_1d(window, seg);
                    // strict: earlier start wins ties
                    let better = match best {
                        None => iou > 0.0,
                        Some((b, bi)) => iou > bi || (iou == bi && seg.0 < b.0),
                    };
                    if better {
                        best = Some((seg, iou));
                    }
                }
                best.map(|((s, e), _)| (s - ws, e - ws))
            })
            .collect();
        Ok(Self {
            fake: seq_labels.iter().any(|&c| c) || !segments.is_empty(),
            seq_labels,
            segments,
            reg_targets,
        })
    }

    pub fn from_sample(sample: &Sample) -> Result<Self> {
        let f = &sample.features;
        let c = sample.sequence_labels();
        if c.len() != f.len() {
            return Err(Error::Data(format!(
                "{}: {} sequence labels for {} sequences",
                f.video_id,
                c.len(),
                f.len()
            )));
        }
        let mut t = Self::new(c, sample.label.segments.clone(), f.seq_stride, f.seq_duration)?;
        t.fake = sample.label.fake;
        Ok(t)
    }

    /// Number of fake sequences.
    pub fn fake_count(&self) -> usize {
        self.seq_labels.iter().filter(|&&c| c).count()
    }
}

/// `−α (1 − p_t)^γ ln p_t` with `p_t` the probability of the true class,
/// floored at `1e-12`.
pub fn focal_loss(p_fake: f64, fake: bool, alpha: f64, gamma: f64) -> f64 {
    let pt = if fake { p_fake } else { 1.0 - p_fake }.max(P_FLOOR);
    -alpha * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Intersection over union of two closed intervals; 0 when both are empty.
pub fn iou_1d(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// IoU regression loss. A prediction with `end < start` is treated as the
/// empty interval at `start`.
pub fn segment_reg_loss(pred: (f64, f64), gt: (f64, f64), kind: RegLossKind) -> Result<f64> {
    if !(gt.1 > gt.0) || !gt.0.is_finite() || !gt.1.is_finite() {
        return Err(Error::Data(format!("ground truth segment {}-{} is invalid", gt.0, gt.1)));
    }
    let (s, e) = (pred.0, pred.1.max(pred.0));
    let inter = (e.min(gt.1) - s.max(gt.0)).max(0.0);
    let union = (e - s) + (gt.1 - gt.0) - inter;
    let iou = inter / union;
    let c = e.max(gt.1) - s.min(gt.0);
    Ok(match kind {
        RegLossKind::Giou => 1.0 - iou + (c - union) / c,
        RegLossKind::Diou => {
            let dc = 0.5 * (s + e) - 0.5 * (gt.0 + gt.1);
            1.0 - iou + dc * dc / (c * c)
        }
    })
}

/// Maximum per-sequence fake probability.
pub fn video_score(preds: &[SequencePrediction]) -> Result<f64> {
    preds
        .iter()
        .map(|p| p.p_fake)
        .reduce(f64::max)
        .ok_or_else(|| Error::Data("no sequence predictions".into()))
}

/// Loss value from plain predictions, without a graph.
pub fn combined_loss(
    preds: &[SequencePrediction],
    target: &VideoTarget,
    cfg: &ModelConfig,
) -> Result<f64> {
    if preds.len() != target.seq_labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} sequence labels",
            preds.len(),
            target.seq_labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, p) in preds.iter().enumerate() {
        total += focal_loss(p.p_fake, target.seq_labels[i], cfg.focal_alpha, cfg.focal_gamma);
        if let Some(gt) = target.reg_targets[i] {
            total += cfg.lambda_reg * segment_reg_loss((p.start_offset, p.end_offset), gt, cfg.reg_loss)?;
        }
    }
    Ok(total / target.fake_count().max(1) as f64)
}

fn column<T: Scalar>(values: impl Iterator<Item = f64>) -> Tensor<T> {
    let v: Vec<T> = values.map(T::of).collect();
    let n = v.len();
    Tensor::new(n, 1, v).expect("column shape")
}

/// Records the combined loss of one video on `g` as a 1×1 node.
pub fn combined_loss_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    out: &ForwardOutput,
    target: &VideoTarget,
) -> Result<Var> {
    let n = g.shape(out.probs).0;
    if n != target.seq_labels.len() {
        return Err(Error::Data(format!(
            "{n} predictions for {} sequence labels",
            target.seq_labels.len()
        )));
    }
    let c = &target.seq_labels;

    // ln p_t = c·ln p + (1 − c)·ln(1 − p)
    let fake_col = g.slice_cols(out.log_probs, 1, 1)?;
    let real_col = g.slice_cols(out.log_probs, 0, 1)?;
    let is_fake = g.constant_owned(column(c.iter().map(|&b| if b { 1.0 } else { 0.0 })));
    let is_real = g.constant_owned(column(c.iter().map(|&b| if b { 0.0 } else { 1.0 })));
    let fake_part = g.hadamard(fake_col, is_fake)?;
    let real_part = g.hadamard(real_col, is_real)?;
    let mut term = g.add(fake_part, real_part)?;
    if cfg.focal_gamma != 0.0 {
        let pt = g.exp(term)?;
        let q = g.one_minus(pt)?;
        let w = g.powf(q, T::of(cfg.focal_gamma))?;
        term = g.hadamard(w, term)?;
    }
    let cls = g.sum(term)?;
    let mut total = g.scale(cls, T::of(-cfg.focal_alpha))?;

    if cfg.lambda_reg > 0.0 && target.reg_targets.iter().any(Option::is_some) {
        let reg = regression_graph(g, cfg.reg_loss, out.offsets, &target.reg_targets)?;
        let reg = g.scale(reg, T::of(cfg.lambda_reg))?;
        total = g.add(total, reg)?;
    }
    g.scale(total, T::of(1.0 / target.fake_count().max(1) as f64))
}

/// Sum of per-sequence IoU losses over rows that have a target.
fn regression_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    kind: RegLossKind,
    offsets: Var,
    targets: &[Option<(f64, f64)>],
) -> Result<Var> {
    // rows without a target get a dummy unit segment and are masked out
    let gt = |i: usize| targets[i].unwrap_or((0.0, 1.0));
    let n = targets.len();
    let gs = g.constant_owned(column((0..n).map(|i| gt(i).0)));
    let ge = g.constant_owned(column((0..n).map(|i| gt(i).1)));
    let glen = g.constant_owned(column((0..n).map(|i| gt(i).1 - gt(i).0)));
    let mask = g.constant_owned(column(targets.iter().map(|t| if t.is_some() { 1.0 } else { 0.0 })));

    let s = g.slice_cols(offsets, 0, 1)?;
    let e = g.slice_cols(offsets, 1, 1)?;
    let e = g.maximum(e, s)?;
    let lo = g.maximum(s, gs)?;
    let hi = g.minimum(e, ge)?;
    let inter = g.sub(hi, lo)?;
    let inter = g.relu(inter)?;
    let plen = g.sub(e, s)?;
    let union = g.add(plen, glen)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;
    let cmax = g.maximum(e, ge)?;
    let cmin = g.minimum(s, gs)?;
    let enclose = g.sub(cmax, cmin)?;
    let penalty = match kind {
        RegLossKind::Giou => {
            let gap = g.sub(enclose, union)?;
            g.div(gap, enclose)?
        }
        RegLossKind::Diou => {
            let pc = g.add(s, e)?;
            let gc = g.add(gs, ge)?;
            let dc = g.sub(pc, gc)?;
            let dc = g.scale(dc, T::of(0.5))?;
            let num = g.hadamard(dc, dc)?;
            let den = g.hadamard(enclose, enclose)?;
            g.div(num, den)?
        }
    };
    let rows = g.one_minus(iou)?;
    let rows = g.add(rows, penalty)?;
    let rows = g.hadamard(rows, mask)?;
    g.sum(rows)
}
