//! Synthetic audio-visual feature sequences where forgery shows up only as a
//! break in cross-modal correlation.
//!
//! Every window `i` of a video draws a shared latent `z_i ~ N(0, I_k)`,
//! linked across windows by `z_i = φ·z_{i−1} + √(1−φ²)·ξ_i`. Each
//! modality `m` observes `u_m = ρ·z_i + √(1−ρ²)·ε_m` through a fixed random
//! loading `W_m` (`k × d_m`, shared by the whole dataset) plus isotropic
//! noise: `x_m = u_m·W_m + σ·η`. Inside a fake segment a random non-empty
//! proper subset of modalities replaces `z_i` with an independent
//! `N(0, I_k)` draw per window, so each modality's marginal distribution is
//! unchanged while its agreement with the untouched modalities, and with its
//! own neighbouring windows, disappears.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, FeatureSequenceSet, LabelRecord, Modality, Sample, Split};
use crate::error::{Error, Result};
use crate::kv::{self, pair, KvConfig};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub videos: usize,
    pub seqs_per_video: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub d_a: usize,
    pub latent_dim: usize,
    pub fake_video_ratio: f64,
    /// Inclusive range of fake segments per fake video.
    pub fake_segments: (usize, usize),
    /// Inclusive range of segment lengths, in windows.
    pub segment_windows: (usize, usize),
    pub rho: f64,
    /// Lag-one correlation `φ` of the shared latent across windows.
    pub temporal_corr: f64,
    pub noise: f64,
    pub seq_duration: f64,
    pub seq_stride: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            videos: 200,
            seqs_per_video: 20,
            d_v: 32,
            d_l: 32,
            d_a: 32,
            latent_dim: 8,
            fake_video_ratio: 0.5,
            fake_segments: (3, 6),
            segment_windows: (1, 1),
            rho: 0.9,
            temporal_corr: 0.0,
            noise: 0.1,
            seq_duration: 1.0,
            seq_stride: 1.0,
            train_frac: 0.7,
            val_frac: 0.15,
            seed: 7,
        }
    }
}

impl KvConfig for SyntheticSpec {
    fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("synth.") else {
            return Ok(false);
        };
        match k {
            "videos" => self.videos = kv::value(key, v)?,
            "seqs_per_video" => self.seqs_per_video = kv::value(key, v)?,
            "d_v" => self.d_v = kv::value(key, v)?,
            "d_l" => self.d_l = kv::value(key, v)?,
            "d_a" => self.d_a = kv::value(key, v)?,
            "latent_dim" => self.latent_dim = kv::value(key, v)?,
            "fake_video_ratio" => self.fake_video_ratio = kv::value(key, v)?,
            "fake_segments" => self.fake_segments = kv::range(key, v)?,
            "segment_windows" => self.segment_windows = kv::range(key, v)?,
            "rho" => self.rho = kv::value(key, v)?,
            "temporal_corr" => self.temporal_corr = kv::value(key, v)?,
            "noise" => self.noise = kv::value(key, v)?,
            "seq_duration" => self.seq_duration = kv::value(key, v)?,
            "seq_stride" => self.seq_stride = kv::value(key, v)?,
            "train_frac" => self.train_frac = kv::value(key, v)?,
            "val_frac" => self.val_frac = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            pair("synth.videos", self.videos),
            pair("synth.seqs_per_video", self.seqs_per_video),
            pair("synth.d_v", self.d_v),
            pair("synth.d_l", self.d_l),
            pair("synth.d_a", self.d_a),
            pair("synth.latent_dim", self.latent_dim),
            pair("synth.fake_video_ratio", self.fake_video_ratio),
            pair(
                "synth.fake_segments",
                format!("{}-{}", self.fake_segments.0, self.fake_segments.1),
            ),
            pair(
                "synth.segment_windows",
                format!("{}-{}", self.segment_windows.0, self.segment_windows.1),
            ),
            pair("synth.rho", self.rho),
            pair("synth.temporal_corr", self.temporal_corr),
            pair("synth.noise", self.noise),
            pair("synth.seq_duration", self.seq_duration),
            pair("synth.seq_stride", self.seq_stride),
            pair("synth.train_frac", self.train_frac),
            pair("synth.val_frac", self.val_frac),
            pair("synth.seed", self.seed),
        ]
    }
}

impl SyntheticSpec {
    /// Windows consumed by a segment of `k` windows, including the windows
    /// its tail still overlaps.
    fn span(&self, k: usize) -> usize {
        k - 1 + (self.seq_duration / self.seq_stride - 1e-9).ceil().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        for (name, p) in [
            ("fake_video_ratio", self.fake_video_ratio),
            ("rho", self.rho),
            ("temporal_corr", self.temporal_corr),
            ("train_frac", self.train_frac),
            ("val_frac", self.val_frac),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return cfg(format!("synth.{name} = {p} outside [0, 1]"));
            }
        }
        if self.train_frac + self.val_frac > 1.0 + 1e-12 {
            return cfg("synth.train_frac + synth.val_frac exceeds 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return cfg(format!("synth.noise = {} must be finite and >= 0", self.noise));
        }
        if !(self.seq_duration > 0.0 && self.seq_stride > 0.0) {
            return cfg("synth.seq_duration and synth.seq_stride must be positive".into());
        }
        if self.seqs_per_video == 0 || self.latent_dim == 0 {
            return cfg("synth.seqs_per_video and synth.latent_dim must be positive".into());
        }
        if self.d_v == 0 || self.d_l == 0 || self.d_a == 0 {
            return cfg("feature widths must be positive".into());
        }
        let (smin, smax) = self.fake_segments;
        let (kmin, kmax) = self.segment_windows;
        if smin == 0 || smin > smax || kmin == 0 || kmin > kmax {
            return cfg("synth.fake_segments and synth.segment_windows need 1 <= min <= max".into());
        }
        if self.fake_video_ratio > 0.0 && smax * self.span(kmax) > self.seqs_per_video {
            return cfg(format!(
                "{smax} segments of up to {kmax} windows do not fit in {} windows",
                self.seqs_per_video
            ));
        }
        Ok(())
    }

    pub fn video_duration(&self) -> f64 {
        (self.seqs_per_video - 1) as f64 * self.seq_stride + self.seq_duration
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SyntheticDataset {
    pub fn split(&self, s: Split) -> &Dataset {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for s in Split::ALL {
            self.split(s).save(root, s)?;
        }
        Ok(())
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates train/val/test splits. Deterministic in `spec.seed`; each video
/// is drawn from its own seeded stream, so its content does not depend on
/// which split it lands in.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.latent_dim;
    let widths = [spec.d_v, spec.d_l, spec.d_a];
    let scale = 1.0 / (k as f64).sqrt();
    let loadings: Vec<Tensor<f64>> = widths
        .iter()
        .map(|&d| {
            let v: Vec<f64> = normal_vec(&mut master, k * d).into_iter().map(|x| x * scale).collect();
            Tensor::new(k, d, v).expect("loading shape")
        })
        .collect();

    let mut order: Vec<usize> = (0..spec.videos).collect();
    order.shuffle(&mut master);
    let n_train = (spec.videos as f64 * spec.train_frac).round() as usize;
    let n_val = ((spec.videos as f64 * spec.val_frac).round() as usize).min(spec.videos - n_train);
    let mut assignment = vec![Split::Test; spec.videos];
    for (pos, &v) in order.iter().enumerate() {
        assignment[v] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut out = SyntheticDataset {
        train: Dataset::default(),
        val: Dataset::default(),
        test: Dataset::default(),
    };
    for v in 0..spec.videos {
        let mut rng = stream_rng(spec.seed, &[v as u64]);
        let sample = generate_video(spec, &loadings, format!("vid{v:04}"), &mut rng);
        match assignment[v] {
            Split::Train => out.train.samples.push(sample),
            Split::Val => out.val.samples.push(sample),
            Split::Test => out.test.samples.push(sample),
        }
    }
    Ok(out)
}

fn generate_video<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    loadings: &[Tensor<f64>],
    video_id: String,
    rng: &mut R,
) -> Sample {
    let n = spec.seqs_per_video;
    let stride = quantize(spec.seq_stride);
    let duration = quantize(spec.seq_duration);
    let fake = rng.random::<f64>() < spec.fake_video_ratio;

    // (segment, perturbed-modality mask)
    let mut segments: Vec<((f64, f64), u8)> = Vec::new();
    if fake {
        let count = rng.random_range(spec.fake_segments.0..=spec.fake_segments.1);
        let lens: Vec<usize> = (0..count)
            .map(|_| rng.random_range(spec.segment_windows.0..=spec.segment_windows.1))
            .collect();
        let used: usize = lens.iter().map(|&l| spec.span(l)).sum();
        let free = n - used;
        let mut cuts: Vec<usize> = (0..count).map(|_| rng.random_range(0..=free)).collect();
        cuts.sort_unstable();
        let mut consumed = 0;
        for (j, &len) in lens.iter().enumerate() {
            let first = cuts[j] + consumed;
            consumed += spec.span(len);
            let start = first as f64 * stride;
            let end = (first + len - 1) as f64 * stride + duration;
            let mask = rng.random_range(1u8..=6);
            segments.push(((quantize(start), quantize(end)), mask));
        }
    }
    let label = if fake {
        LabelRecord::fake(video_id.clone(), segments.iter().map(|s| s.0).collect())
    } else {
        LabelRecord::real(video_id.clone())
    };

    let k = spec.latent_dim;
    let rho = spec.rho;
    let indep = (1.0 - rho * rho).max(0.0).sqrt();
    let phi = spec.temporal_corr;
    let innov = (1.0 - phi * phi).max(0.0).sqrt();
    let mut z = vec![0.0; k];
    let mut feats: Vec<Vec<f64>> = vec![Vec::new(); 3];
    for i in 0..n {
        let (ws, we) = (i as f64 * stride, i as f64 * stride + duration);
        let mask = segments
            .iter()
            .find(|((s, e), _)| we.min(*e) - ws.max(*s) >= 0.5 * duration - 1e-9)
            .map_or(0u8, |&(_, m)| m);
        let xi = normal_vec(rng, k);
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = if i == 0 { xi[j] } else { phi * *zj + innov * xi[j] };
        }
        for (mi, w) in loadings.iter().enumerate() {
            let fresh = normal_vec(rng, k);
            let eps = normal_vec(rng, k);
            let noise = normal_vec(rng, w.cols());
            let base = if mask & (1 << mi) != 0 { &fresh } else { &z };
            let u: Vec<f64> = (0..k).map(|j| rho * base[j] + indep * eps[j]).collect();
            for c in 0..w.cols() {
                let mut x = spec.noise * noise[c];
                for (j, &uj) in u.iter().enumerate() {
                    x += uj * w.get(j, c);
                }
                feats[mi].push(quantize(x));
            }
        }
    }
    let mut it = feats.into_iter();
    let mut next = |d: usize| Tensor::new(n, d, it.next().unwrap()).expect("feature shape");
    let features = FeatureSequenceSet {
        video_id,
        visual: next(spec.d_v),
        lip: next(spec.d_l),
        audio: next(spec.d_a),
        seq_duration: duration,
        seq_stride: stride,
        video_duration: quantize((n - 1) as f64 * stride + duration),
    };
    debug_assert_eq!(Modality::ALL.len(), 3);
    Sample { features, label }
}
