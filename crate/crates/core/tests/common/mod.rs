//! Independent reference implementations shared by the metric tests.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use mmba::localize::Segment;
use mmba::metrics::{ar_iou_grid, VideoLocalization};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Fraction of (positive, negative) pairs ranked correctly, ties counting
/// one half.
pub fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

pub fn random_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=50);
    loop {
        // a coarse grid makes ties common
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..12) as f64) / 11.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if labels.iter().any(|&b| b) && labels.iter().any(|&b| !b) {
            return (scores, labels);
        }
    }
}

/// FPR and FNR at "score ≥ t" for t on a 1e-4 grid over [0, 1]; the EER is
/// the mean of the two where they are closest.
pub fn eer_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    let mut pos: Vec<f64> = scores.iter().zip(labels).filter(|p| *p.1).map(|p| *p.0).collect();
    let mut neg: Vec<f64> = scores.iter().zip(labels).filter(|p| !*p.1).map(|p| *p.0).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut best = (f64::INFINITY, 0.0);
    let steps = 10_000;
    for k in 0..=steps + 1 {
        let t = k as f64 / steps as f64 - 1e-9;
        let fp = neg.len() - neg.partition_point(|&s| s < t);
        let fneg = pos.partition_point(|&s| s < t);
        let (fpr, fnr) = (fp as f64 / neg.len() as f64, fneg as f64 / pos.len() as f64);
        if (fpr - fnr).abs() < best.0 {
            best = ((fpr - fnr).abs(), 0.5 * (fpr + fnr));
        }
    }
    best.1
}

/// Two overlapping classes of `per_class` scores each, all on the 1e-4
/// grid, so a grid sweep sees every ROC vertex and consecutive vertices are
/// close together.
pub fn grid_score_set(rng: &mut ChaCha8Rng, per_class: usize) -> (Vec<f64>, Vec<bool>) {
    let shift = rng.random_range(0..4000);
    let mut scores = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let fake = i % 2 == 0;
        let v: u32 = rng.random_range(0..6000) + if fake { shift } else { 0 };
        scores.push(v.min(10_000) as f64 / 10_000.0);
        labels.push(fake);
    }
    (scores, labels)
}

pub fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
}

/// Greedy matching in score order, then for each recall level j/n the best
/// precision over every cutoff reaching it, averaged over levels.
pub fn ap_oracle(videos: &[VideoLocalization], t: f64) -> f64 {
    let mut all: Vec<(usize, Segment)> = Vec::new();
    for (v, x) in videos.iter().enumerate() {
        for p in &x.predictions {
            all.push((v, *p));
        }
    }
    all.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let n_gt: usize = videos.iter().map(|v| v.ground_truth.len()).sum();
    let mut taken: Vec<Vec<bool>> = videos.iter().map(|v| vec![false; v.ground_truth.len()]).collect();
    let mut curve = Vec::new();
    let mut tp = 0;
    for (k, (v, p)) in all.iter().enumerate() {
        let cand = videos[*v]
            .ground_truth
            .iter()
            .enumerate()
            .filter(|(j, g)| !taken[*v][*j] && iou((p.start, p.end), **g) >= t)
            .max_by(|a, b| iou((p.start, p.end), *a.1).partial_cmp(&iou((p.start, p.end), *b.1)).unwrap().then(b.0.cmp(&a.0)));
        if let Some((j, _)) = cand {
            taken[*v][j] = true;
            tp += 1;
        }
        curve.push((tp as f64 / (k + 1) as f64, tp));
    }
    (1..=n_gt)
        .map(|level| curve.iter().filter(|(_, hits)| *hits >= level).map(|(p, _)| *p).fold(0.0, f64::max))
        .sum::<f64>()
        / n_gt as f64
}

/// Per video: each ground truth's best IoU among the top-k, thresholded on
/// every grid point.
pub fn ar_oracle(videos: &[VideoLocalization], k: usize) -> f64 {
    let with_gt: Vec<&VideoLocalization> = videos.iter().filter(|v| !v.ground_truth.is_empty()).collect();
    let mut total = 0.0;
    for v in &with_gt {
        let mut preds = v.predictions.clone();
        preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        preds.truncate(k);
        let grid = ar_iou_grid();
        let mut per_t = 0.0;
        for &t in &grid {
            let hit = v
                .ground_truth
                .iter()
                .filter(|&&g| preds.iter().any(|p| iou((p.start, p.end), g) >= t))
                .count();
            per_t += hit as f64 / v.ground_truth.len() as f64;
        }
        total += per_t / grid.len() as f64;
    }
    total / with_gt.len() as f64
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Vec<VideoLocalization> {
    loop {
        let videos: Vec<VideoLocalization> = (0..rng.random_range(1..=3))
            .map(|_| {
                let seg = |rng: &mut ChaCha8Rng| {
                    let s = (rng.random_range(0..16) as f64) * 0.5;
                    (s, s + (rng.random_range(1..6) as f64) * 0.5)
                };
                let mut gt: Vec<(f64, f64)> = Vec::new();
                for _ in 0..rng.random_range(0..=3) {
                    let g = seg(rng);
                    if gt.iter().all(|h| g.1 <= h.0 || g.0 >= h.1) {
                        gt.push(g);
                    }
                }
                let predictions = (0..rng.random_range(0..=5))
                    .map(|_| {
                        let (s, e) = seg(rng);
                        Segment::new(s, e, rng.random_range(0.0..1.0))
                    })
                    .collect();
                VideoLocalization { predictions, ground_truth: gt }
            })
            .collect();
        let n_gt: usize = videos.iter().map(|v| v.ground_truth.len()).sum();
        let n_pred: usize = videos.iter().map(|v| v.predictions.len()).sum();
        if n_gt > 0 && n_pred <= 5 {
            return videos;
        }
    }
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
