//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4 and 8 are exact properties and fail the process when they do
//! not hold. Criteria 5-7 are training experiments; their lines are reported
//! but do not change the exit status.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mmba::attention::{mmms_ba_fuse, mmms_ba_fuse_pair, mmus_sa_block, mmus_sa_fuse, ms_sa_block, ms_sa_fuse, pair_attention};
use mmba::data::{decode_features, encode_features, synth_generate, SyntheticDataset, SyntheticSpec};
use mmba::evaluate::{evaluate_localization, video_scores};
use mmba::gradcheck::{run_suite, Tolerance};
use mmba::localize::{soft_nms, LocalizeConfig, NmsMode, Segment};
use mmba::metrics::{ap_at_iou, ar_at_k, auc, eer};
use mmba::model::{
    combined_loss, decode_checkpoint, encode_checkpoint, focal_loss, segment_reg_loss, ModelConfig, RegLossKind,
    SequencePrediction, Variant, VideoTarget,
};
use mmba::trainer::{format_log, run_ablation, train, TrainConfig, TrainOutcome};
use mmba::{Activation, Error, Graph, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Runs `f`, turning errors and panics into failures.
fn guarded(f: impl FnOnce() -> Result<Outcome>) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => outcome(false, format!("error: {e}")),
        Err(_) => outcome(false, "panicked"),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// 1 -------------------------------------------------------------------------

fn gradient_suite() -> Result<Outcome> {
    let t0 = Instant::now();
    let entries = run_suite(7, Tolerance::default())?;
    let took = t0.elapsed();
    let failed: Vec<&str> = entries.iter().filter(|e| !e.report.passed()).map(|e| e.name.as_str()).collect();
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    let worst_abs = entries.iter().map(|e| e.report.max_abs_error).fold(0.0, f64::max);
    let detail = format!(
        "{} entries, worst rel error {worst:.2e} (errors under 1e-7 absolute count as 0), worst abs error {worst_abs:.2e}, {} (limit 120s){}",
        entries.len(),
        secs(took),
        if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
    );
    Ok(outcome(failed.is_empty() && took < Duration::from_secs(120), detail))
}

// 2 -------------------------------------------------------------------------

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn max_row_sum_error(k: &Tensor) -> f64 {
    (0..k.rows())
        .map(|i| ((0..k.cols()).map(|j| k.get(i, j)).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn attention_invariants() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut stoch, mut perm_err, mut bit_identical, mut zero_ok, mut sym_ok) = (0.0f64, 0.0f64, 0, true, true);
    let cases = 500;
    for _ in 0..cases {
        let (n, d) = (rng.random_range(1..=5), rng.random_range(1..=4));
        let (v, l, a) = (random_tensor(&mut rng, n, d), random_tensor(&mut rng, n, d), random_tensor(&mut rng, n, d));
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }

        let zeros = Tensor::zeros(n, d);
        let (pv_t, pl_t, pa_t) = (v.permute_rows(&perm), l.permute_rows(&perm), a.permute_rows(&perm));
        let mut g = Graph::new();
        let (vv, lv, av) = (g.constant(&v), g.constant(&l), g.constant(&a));
        let tr = pair_attention(&mut g, vv, lv)?;
        stoch = stoch.max(max_row_sum_error(g.value(tr.k1))).max(max_row_sum_error(g.value(tr.k2)));

        // a constant column c comes back as c·(row sum)·c from the self-attention blocks
        let c = rng.random_range(0.5..1.5);
        let mut wide = Vec::new();
        for i in 0..n {
            wide.extend((0..d).map(|j| v.get(i, j)));
            wide.push(c);
        }
        let wide = Tensor::new(n, d + 1, wide)?;
        let wv = g.constant(&wide);
        let ms = ms_sa_block(&mut g, wv)?;
        for i in 0..n {
            stoch = stoch.max((g.value(ms).get(i, d) / (c * c) - 1.0).abs());
        }
        let three = Tensor::new(3, d + 1, (0..3).flat_map(|i| wide.row(i % n).to_vec()).collect())?;
        let tv = g.constant(&three);
        let mu = mmus_sa_block(&mut g, tv)?;
        for i in 0..3 {
            stoch = stoch.max((g.value(mu).get(0, i * (d + 1) + d) / (c * c) - 1.0).abs());
        }

        let ba = mmms_ba_fuse(&mut g, vv, lv, av)?;
        let sa = ms_sa_block(&mut g, vv)?;
        let (pv, pl, pa) = (g.constant(&pv_t), g.constant(&pl_t), g.constant(&pa_t));
        let pba = mmms_ba_fuse(&mut g, pv, pl, pa)?;
        let psa = ms_sa_block(&mut g, pv)?;
        let (want_ba, want_sa) = (g.value(ba).permute_rows(&perm), g.value(sa).permute_rows(&perm));
        bit_identical += usize::from(*g.value(pba) == want_ba && *g.value(psa) == want_sa);
        for (got, want) in [(g.value(pba), &want_ba), (g.value(psa), &want_sa)] {
            for (x, y) in got.data().iter().zip(want.data()) {
                perm_err = perm_err.max((x - y).abs() / y.abs().max(1.0));
            }
        }

        let same = pair_attention(&mut g, vv, vv)?;
        let f = g.value(same.fused);
        sym_ok &= g.value(same.a1) == g.value(same.a2) && (0..n).all(|i| (0..d).all(|j| f.get(i, j) == f.get(i, d + j)));

        let z = g.constant(&zeros);
        for out in [
            mmms_ba_fuse(&mut g, z, z, z)?,
            mmms_ba_fuse_pair(&mut g, z, z)?,
            mmus_sa_fuse(&mut g, z, z, z)?,
            ms_sa_fuse(&mut g, z, z, z)?,
        ] {
            zero_ok &= g.value(out).data().iter().all(|&x| x == 0.0);
        }
    }
    let took = t0.elapsed();
    // reordering rows reorders the sums inside softmax and matmul, so
    // equality holds up to rounding
    let pass = stoch <= 1e-9 && perm_err <= 1e-12 && zero_ok && sym_ok && took < Duration::from_secs(30);
    Ok(outcome(
        pass,
        format!(
            "row-sum error {stoch:.1e}, permutation error {perm_err:.1e} ({bit_identical}/{cases} bit-identical), zero fixed points {zero_ok}, pair symmetry {sym_ok}, {}",
            secs(took)
        ),
    ))
}

// 3 -------------------------------------------------------------------------

fn loss_closed_forms() -> Result<Outcome> {
    let focal = focal_loss(0.5, true, 1.0, 2.0);
    let diou = segment_reg_loss((0.0, 2.0), (1.0, 3.0), RegLossKind::Diou)?;
    let giou = segment_reg_loss((0.0, 2.0), (1.0, 3.0), RegLossKind::Giou)?;

    // two sequences of 1 s; the first overlaps the fake segment [0.2, 1.0]
    let preds = [
        SequencePrediction { p_fake: 0.8, start_offset: 0.1, end_offset: 0.9 },
        SequencePrediction { p_fake: 0.3, start_offset: 0.0, end_offset: 0.4 },
    ];
    let target = VideoTarget::new(vec![true, false], vec![(0.2, 1.0)], 1.0, 1.0)?;
    let cfg = ModelConfig { focal_alpha: 1.0, focal_gamma: 2.0, lambda_reg: 1.0, reg_loss: RegLossKind::Diou, ..ModelConfig::default() };
    let got = combined_loss(&preds, &target, &cfg)?;
    let cls = -(0.2f64).powi(2) * 0.8f64.ln() - (0.3f64).powi(2) * 0.7f64.ln();
    // pred [0.1, 0.9] vs gt [0.2, 1.0]: IoU 0.7/0.9, hull 0.9, centres 0.5 and 0.6
    let reg = 1.0 - 0.7 / 0.9 + 0.01 / 0.81;
    let want = (cls + reg) / 1.0;

    let errs = [
        (focal - 0.25 * 2f64.ln()).abs(),
        (diou - 7.0 / 9.0).abs(),
        (giou - 2.0 / 3.0).abs(),
        (got - want).abs(),
    ];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    Ok(outcome(
        worst <= 1e-12,
        format!("focal {focal:.6}, DIoU {diou:.6}, GIoU {giou:.6}, two-sequence loss {got:.9}; worst error {worst:.1e}"),
    ))
}

// 4 -------------------------------------------------------------------------

fn metric_oracles() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut auc_err = 0.0f64;
    for _ in 0..200 {
        let (s, l) = common::random_set(&mut rng);
        auc_err = auc_err.max((auc(&s, &l)? - common::mann_whitney(&s, &l)).abs());
    }
    let mut loc_err = 0.0f64;
    for _ in 0..500 {
        let videos = common::random_instance(&mut rng);
        for t in [0.3, 0.5, 0.75, 0.95] {
            loc_err = loc_err.max((ap_at_iou(&videos, t)? - common::ap_oracle(&videos, t)).abs());
        }
        for k in [1, 2, 10, 100] {
            loc_err = loc_err.max((ar_at_k(&videos, k)? - common::ar_oracle(&videos, k)).abs());
        }
    }
    let mut eer_err = 0.0f64;
    let sets: Vec<(Vec<f64>, Vec<bool>)> = std::iter::once((vec![0.9, 0.6, 0.7, 0.1], vec![true, true, false, false]))
        .chain((0..20).map(|_| common::grid_score_set(&mut rng, 10_000)))
        .collect();
    for (s, l) in &sets {
        eer_err = eer_err.max((eer(s, l)? - common::eer_sweep(s, l)).abs());
    }
    let took = t0.elapsed();
    let pass = auc_err <= 1e-9 && loc_err <= 1e-9 && eer_err <= 5e-4 && took < Duration::from_secs(60);
    Ok(outcome(
        pass,
        format!("AUC error {auc_err:.1e}, AP/AR error {loc_err:.1e}, EER error {eer_err:.1e}, {}", secs(took)),
    ))
}

// 5 and 7 -------------------------------------------------------------------

/// Model and training settings of the end-to-end run: a narrower encoder
/// than the defaults, all 50 epochs, best validation epoch kept.
fn detection_setup() -> (ModelConfig, TrainConfig) {
    (
        ModelConfig { hidden: 64, d_proj: 32, head_hidden: 32, activation: Activation::Tanh, dropout: 0.0, ..ModelConfig::default() },
        TrainConfig { learning_rate: 3e-3, patience: 50, ..TrainConfig::default() },
    )
}

fn end_to_end(data: &SyntheticDataset) -> Result<(Outcome, TrainOutcome)> {
    let (model_cfg, train_cfg) = detection_setup();
    let t0 = Instant::now();
    let out = train(&model_cfg, &data.train, &data.val, &train_cfg, &mut |e| eprintln!("  epoch {}", e.line()))?;
    let took = t0.elapsed();
    let (scores, labels) = video_scores(&out.model, &data.test)?;
    let test_auc = auc(&scores, &labels)?;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let pass = test_auc >= 0.95 && out.log.len() <= 50 && took < Duration::from_secs(15 * 60);
    Ok((
        outcome(
            pass,
            format!(
                "test video AUC {test_auc:.4} (need >= 0.95), best epoch {} of {}, {} on {cores} core(s)",
                out.best_epoch,
                out.log.len(),
                secs(took)
            ),
        ),
        out,
    ))
}

fn localization(data: &SyntheticDataset, trained: &TrainOutcome) -> Result<Outcome> {
    let (report, _) = evaluate_localization(&trained.model, &data.test, &LocalizeConfig::default())?;
    let ap = report.get("AP@0.5").unwrap_or(f64::NAN);
    let ar = report.get("AR@10").unwrap_or(f64::NAN);

    let seg = |score| Segment::new(1.0, 3.0, score);
    let cfg = LocalizeConfig::default();
    let soft = soft_nms(&[seg(0.9), seg(0.8)], &LocalizeConfig { mode: NmsMode::Gaussian, sigma: 0.5, ..cfg });
    let soft_err = if soft.len() == 2 { (soft[1].score - 0.8 * (-2.0f64).exp()).abs() } else { f64::INFINITY };
    let hard = soft_nms(&[seg(0.9), seg(0.8)], &LocalizeConfig { mode: NmsMode::Hard, iou_thresh: 0.5, ..cfg });
    let hard_ok = hard.len() == 1 && hard[0].score == 0.9;

    let pass = ap >= 0.90 && ar >= 0.85 && soft_err <= 1e-9 && hard_ok;
    Ok(outcome(
        pass,
        format!("AP@0.5 {ap:.4} (need >= 0.90), AR@10 {ar:.4} (need >= 0.85), Soft-NMS error {soft_err:.1e}, hard NMS {hard_ok}"),
    ))
}

// 6 -------------------------------------------------------------------------

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation(data: &SyntheticDataset) -> Result<Outcome> {
    let (model_cfg, train_cfg) = detection_setup();
    let base = ModelConfig { hidden: 32, d_proj: 16, head_hidden: 16, ..model_cfg };
    let train_cfg = TrainConfig { max_epochs: 30, patience: 30, ..train_cfg };
    let t0 = Instant::now();
    let rows = run_ablation(&base, &data.train, &data.val, &data.test, &train_cfg, &[1, 2, 3])?;
    let took = t0.elapsed();
    let find = |v: Variant, m: &str| rows.iter().find(|r| r.variant == v && r.modalities == m).map(|r| mean(&r.aucs));
    let full = find(Variant::MmmsBa, "V+L+A").unwrap_or(f64::NAN);
    let mut ok = true;
    let mut parts = vec![format!("MMMS-BA V+L+A {full:.4}")];
    for (v, m) in [
        (Variant::MsSa, "V+L+A"),
        (Variant::MmmsBa, "V+L"),
        (Variant::MmmsBa, "V+A"),
        (Variant::MmmsBa, "L+A"),
    ] {
        let other = find(v, m).unwrap_or(f64::NAN);
        ok &= full >= other - 0.01;
        parts.push(format!("{v} {m} {other:.4}"));
    }
    let mmus = find(Variant::MmusSa, "V+L+A").unwrap_or(f64::NAN);
    parts.push(format!("(MMUS-SA {mmus:.4})"));
    Ok(outcome(ok, format!("mean test AUC over seeds 1,2,3: {}; {}", parts.join(", "), secs(took))))
}

// 8 -------------------------------------------------------------------------

fn is_format_error<T>(r: &Result<T>) -> bool {
    matches!(r, Err(Error::Format { .. }))
}

fn determinism_and_formats() -> Result<Outcome> {
    let spec = SyntheticSpec { videos: 30, seqs_per_video: 6, d_v: 5, d_l: 4, d_a: 6, latent_dim: 3, fake_segments: (1, 2), ..SyntheticSpec::default() };
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let d1 = synth_generate(&spec)?;
    d1.save(a.path())?;
    synth_generate(&spec)?.save(b.path())?;
    let files_equal = common::tree(a.path()) == common::tree(b.path());

    let model = ModelConfig { d_v: 5, d_l: 4, d_a: 6, hidden: 4, d_proj: 3, head_hidden: 4, ..ModelConfig::default() };
    let tc = TrainConfig { max_epochs: 2, batch_size: 4, ..TrainConfig::default() };
    let run = || -> Result<(Vec<u8>, String)> {
        let out = train(&model, &d1.train, &d1.val, &tc, &mut |_| {})?;
        Ok((encode_checkpoint(&out.model), format_log(&out.log)))
    };
    let (ck, log) = run()?;
    let runs_equal = (ck.clone(), log) == run()?;

    let mut roundtrip = true;
    for s in d1.train.samples.iter().chain(&d1.test.samples) {
        let bytes = encode_features(&s.features)?;
        let back = decode_features(&bytes)?;
        roundtrip &= back == s.features && encode_features(&back)? == bytes;
    }

    let feat = encode_features(&d1.train.samples[0].features)?;
    let mut corrupt_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for bytes in [&feat, &ck] {
        for cut in 0..bytes.len() {
            let r = catch_unwind(|| {
                if std::ptr::eq(bytes, &feat) {
                    is_format_error(&decode_features(&bytes[..cut]))
                } else {
                    is_format_error(&decode_checkpoint::<f64>(&bytes[..cut]))
                }
            });
            corrupt_ok &= r.unwrap_or(false);
        }
        for _ in 0..300 {
            let mut bad = bytes.clone();
            let i = rng.random_range(0..bad.len());
            bad[i] ^= 1 << rng.random_range(0..8);
            // a flipped value byte can still decode; it must never panic
            let r = catch_unwind(|| {
                let _ = decode_features(&bad);
                let _ = decode_checkpoint::<f64>(&bad);
            });
            corrupt_ok &= r.is_ok();
        }
    }
    let mut bad_magic = feat.clone();
    bad_magic[0] ^= 0xff;
    corrupt_ok &= is_format_error(&decode_features(&bad_magic));

    Ok(outcome(
        files_equal && runs_equal && roundtrip && corrupt_ok,
        format!(
            "synthetic files identical {files_equal}, checkpoints and logs identical {runs_equal}, \
             MSQF roundtrip exact {roundtrip}, truncated/corrupt handled {corrupt_ok}"
        ),
    ))
}

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let mut strict_failed = false;
    let mut report = |n: usize, name: &str, strict: bool, o: Outcome| {
        println!("{} {n}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        strict_failed |= strict && !o.pass;
    };

    report(1, "gradient suite", true, guarded(gradient_suite));
    report(2, "attention invariants", true, guarded(attention_invariants));
    report(3, "loss closed forms", true, guarded(loss_closed_forms));
    report(4, "metric oracles", true, guarded(metric_oracles));

    match synth_generate(&SyntheticSpec::default()) {
        Ok(data) => {
            let trained = match catch_unwind(AssertUnwindSafe(|| end_to_end(&data))) {
                Ok(Ok((o, t))) => {
                    report(5, "end-to-end detection", false, o);
                    Some(t)
                }
                Ok(Err(e)) => {
                    report(5, "end-to-end detection", false, outcome(false, format!("error: {e}")));
                    None
                }
                Err(_) => {
                    report(5, "end-to-end detection", false, outcome(false, "panicked"));
                    None
                }
            };
            report(6, "ablation ordering", false, guarded(|| ablation(&data)));
            match trained {
                Some(t) => report(7, "localization", false, guarded(|| localization(&data, &t))),
                None => report(7, "localization", false, outcome(false, "no trained model from criterion 5")),
            }
        }
        Err(e) => {
            for (n, name) in [(5, "end-to-end detection"), (6, "ablation ordering"), (7, "localization")] {
                report(n, name, false, outcome(false, format!("synthetic data: {e}")));
            }
        }
    }

    report(8, "determinism and formats", true, guarded(determinism_and_formats));
    if strict_failed {
        std::process::exit(1);
    }
}
