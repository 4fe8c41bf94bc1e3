//! Detection metrics over video scores (ROC, AUC, pAUC, EER, ACC/TPR/FPR)
//! and localization metrics over segments (AP at an IoU threshold, AR at a
//! per-video proposal budget).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::localize::Segment;
use crate::model::iou_1d;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// A sample counts as positive when its score is at least this.
    pub threshold: f64,
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("ROC metrics need both positive and negative samples".into()));
    }
    Ok((pos, neg))
}

/// ROC points from `(0, 0)` at threshold `+∞` through one point per distinct
/// score, in decreasing threshold order (so FPR and TPR are non-decreasing).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(points)
}

/// Trapezoidal area under the ROC curve.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let roc = roc_curve(scores, labels)?;
    Ok(roc
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum())
}

/// Area under the ROC curve for FPR in `[0, fpr_max]`, divided by
/// `fpr_max`. The curve is interpolated linearly at `fpr_max`.
pub fn pauc(scores: &[f64], labels: &[bool], fpr_max: f64) -> Result<f64> {
    if !(fpr_max > 0.0 && fpr_max <= 1.0) {
        return Err(Error::Metric(format!("pAUC limit {fpr_max} outside (0, 1]")));
    }
    let roc = roc_curve(scores, labels)?;
    let mut area = 0.0;
    for w in roc.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.fpr >= fpr_max {
            break;
        }
        if b.fpr <= fpr_max {
            area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
        } else {
            let t = (fpr_max - a.fpr) / (b.fpr - a.fpr);
            let tpr = a.tpr + t * (b.tpr - a.tpr);
            area += (fpr_max - a.fpr) * (a.tpr + tpr) / 2.0;
        }
    }
    Ok(area / fpr_max)
}

/// Equal error rate: where FPR meets FNR = 1 − TPR, linearly interpolated
/// between the two ROC points that bracket the crossing.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let roc = roc_curve(scores, labels)?;
    let diff = |p: &RocPoint| p.fpr - (1.0 - p.tpr);
    for w in roc.windows(2) {
        let (da, db) = (diff(&w[0]), diff(&w[1]));
        if db >= 0.0 {
            let t = if db == da { 0.0 } else { da / (da - db) };
            return Ok(w[0].fpr + t * (w[1].fpr - w[0].fpr));
        }
    }
    unreachable!("the ROC curve ends at (1, 1) where FPR − FNR = 1")
}

/// Confusion counts with "positive" meaning score strictly above
/// `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn tpr(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn fpr(&self) -> f64 {
        self.fp as f64 / (self.fp + self.tn) as f64
    }
}

/// Predictions and ground truth of one video.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoLocalization {
    pub predictions: Vec<Segment>,
    pub ground_truth: Vec<(f64, f64)>,
}

fn total_gt(videos: &[VideoLocalization]) -> Result<usize> {
    let n: usize = videos.iter().map(|v| v.ground_truth.len()).sum();
    if n == 0 {
        return Err(Error::Metric("no ground-truth segments".into()));
    }
    for v in videos {
        if let Some(&(s, e)) = v.ground_truth.iter().find(|(s, e)| !(e > s)) {
            return Err(Error::Metric(format!("ground-truth segment {s}-{e} has no extent")));
        }
    }
    Ok(n)
}

/// Average precision at IoU threshold `t`. Predictions from all videos are
/// ranked by score (stable on ties); each is matched to the unmatched
/// ground truth of its own video with the highest IoU, if that IoU is at
/// least `t`. AP is the area under the precision envelope.
pub fn ap_at_iou(videos: &[VideoLocalization], t: f64) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Metric(format!("IoU threshold {t} outside (0, 1]")));
    }
    let n_gt = total_gt(videos)?;
    let mut ranked: Vec<(usize, &Segment)> = videos
        .iter()
        .enumerate()
        .flat_map(|(v, x)| x.predictions.iter().map(move |p| (v, p)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut used: Vec<Vec<bool>> = videos.iter().map(|v| vec![false; v.ground_truth.len()]).collect();
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, (v, p)) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, &g) in videos[*v].ground_truth.iter().enumerate() {
            if used[*v][j] {
                continue;
            }
            let iou = iou_1d(p.interval(), g);
            if iou >= t && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[*v][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Ok(ap)
}

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn ar_iou_grid() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Average recall with at most `k` predictions per video. For each video with
/// ground truth, the top-`k` predictions by score are kept; a ground-truth
/// segment is recalled at threshold `t` if any kept prediction overlaps it
/// with IoU at least `t`. Recall is averaged over [`ar_iou_grid`], then over
/// videos that have ground truth.
pub fn ar_at_k(videos: &[VideoLocalization], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Metric("AR needs k >= 1".into()));
    }
    total_gt(videos)?;
    let grid = ar_iou_grid();
    let mut sum = 0.0;
    let mut counted = 0usize;
    for v in videos.iter().filter(|v| !v.ground_truth.is_empty()) {
        let mut preds: Vec<&Segment> = v.predictions.iter().collect();
        preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        preds.truncate(k);
        let best: Vec<f64> = v
            .ground_truth
            .iter()
            .map(|&g| preds.iter().map(|p| iou_1d(p.interval(), g)).fold(0.0, f64::max))
            .collect();
        let mut r = 0.0;
        for &t in &grid {
            r += best.iter().filter(|&&b| b >= t).count() as f64 / best.len() as f64;
        }
        sum += r / grid.len() as f64;
        counted += 1;
    }
    Ok(sum / counted as f64)
}

/// Ordered `name = value` lines plus `#` header comments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub notes: Vec<String>,
    pub entries: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|e| e.1)
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.notes.extend(other.notes);
        self.entries.extend(other.entries);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        for (name, v) in &self.entries {
            let _ = writeln!(out, "{name} = {v:.4}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }
}

/// AUC, pAUC (FPR ≤ 0.1), EER, and ACC/TPR/FPR at threshold 0.5.
pub fn detection_report(scores: &[f64], labels: &[bool]) -> Result<MetricsReport> {
    let c = Confusion::at(scores, labels, 0.5);
    let mut r = MetricsReport::default();
    r.notes.push("video-level scores: maximum per-sequence fake probability".into());
    r.push("AUC", auc(scores, labels)?);
    r.push("pAUC", pauc(scores, labels, 0.1)?);
    r.push("EER", eer(scores, labels)?);
    r.push("ACC", c.accuracy());
    r.push("TPR", c.tpr());
    r.push("FPR", c.fpr());
    Ok(r)
}

/// AP@{0.5, 0.75, 0.95} and AR@{10, 20, 50, 100}.
pub fn localization_report(videos: &[VideoLocalization]) -> Result<MetricsReport> {
    let mut r = MetricsReport::default();
    r.notes.push("AR averaged over IoU thresholds 0.50:0.05:0.95 and over videos with ground truth".into());
    for t in [0.5, 0.75, 0.95] {
        r.push(format!("AP@{t}"), ap_at_iou(videos, t)?);
    }
    for k in [10, 20, 50, 100] {
        r.push(format!("AR@{k}"), ar_at_k(videos, k)?);
    }
    Ok(r)
}
