//! Full detector: per-modality encoders, a fusion block, and per-sequence
//! classification and regression heads.
//!
//! ```text
//! X_m ──BiGRU+dense──▶ E_m (N × d_proj)   for each selected modality m
//! fusion(E_·) = W (N × w)
//! H = act(W·W_h + b_h)                     (N × head_hidden)
//! P = softmax(H·W_c + b_c)                 (N × 2, column 1 = p_fake)
//! Y = relu(H·W_r + b_r)                    (N × 2, start/end offsets)
//! ```

mod checkpoint;
mod loss;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{
    combined_loss, combined_loss_graph, focal_loss, iou_1d, segment_reg_loss, video_score,
    VideoTarget,
};

use crate::attention::{mmms_ba_fuse, mmms_ba_fuse_pair, mmus_sa_fuse, ms_sa_fuse};
use crate::data::{FeatureSequenceSet, Modality, Sample};
use crate::encoder::{encode_modality, EncodeOptions, GruCellVars, ModalityEncoderParams, ModalityEncoderVars};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::kv::{self, pair, KvConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fusion block between the encoders and the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Pairwise cross-modal attention over all sequences.
    MmmsBa,
    /// Self-attention across modalities within each sequence.
    MmusSa,
    /// Self-attention across sequences within each modality.
    MsSa,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MmmsBa, Variant::MmusSa, Variant::MsSa];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MmmsBa => "MMMS-BA",
            Variant::MmusSa => "MMUS-SA",
            Variant::MsSa => "MS-SA",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('_', "-").as_str() {
            "MMMS-BA" => Ok(Variant::MmmsBa),
            "MMUS-SA" => Ok(Variant::MmusSa),
            "MS-SA" => Ok(Variant::MsSa),
            _ => Err(Error::Config(format!("unknown attention variant `{s}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegLossKind {
    Diou,
    Giou,
}

impl FromStr for RegLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "diou" => Ok(RegLossKind::Diou),
            "giou" => Ok(RegLossKind::Giou),
            _ => Err(Error::Config(format!("unknown regression loss `{s}`"))),
        }
    }
}

impl fmt::Display for RegLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegLossKind::Diou => "diou",
            RegLossKind::Giou => "giou",
        })
    }
}

/// Modality subset in V, L, A order, e.g. `"V+L+A"`.
pub fn format_modalities(ms: &[Modality]) -> String {
    ms.iter().map(|m| m.letter().to_string()).collect::<Vec<_>>().join("+")
}

pub fn parse_modalities(s: &str) -> Result<Vec<Modality>> {
    let mut out = Vec::new();
    for c in s.chars().filter(|c| !matches!(c, '+' | ',' | ' ')) {
        let m = Modality::from_letter(c)?;
        if out.contains(&m) {
            return Err(Error::Config(format!("modality {m} repeated in `{s}`")));
        }
        out.push(m);
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Sorted in V, L, A order.
    pub modalities: Vec<Modality>,
    pub d_v: usize,
    pub d_l: usize,
    pub d_a: usize,
    /// GRU hidden width per direction.
    pub hidden: usize,
    pub d_proj: usize,
    /// Width of the dense layer shared by both heads.
    pub head_hidden: usize,
    pub dropout: f64,
    /// Activation of the encoder dense projection; the head layer is always ReLU.
    pub activation: Activation,
    /// Initial GRU update-gate bias.
    pub update_gate_bias: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub lambda_reg: f64,
    pub reg_loss: RegLossKind,
    pub seq_duration: f64,
    pub seq_stride: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::MmmsBa,
            modalities: Modality::ALL.to_vec(),
            d_v: 32,
            d_l: 32,
            d_a: 32,
            hidden: 300,
            d_proj: 100,
            head_hidden: 100,
            dropout: 0.3,
            activation: Activation::Relu,
            update_gate_bias: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            lambda_reg: 1.0,
            reg_loss: RegLossKind::Diou,
            seq_duration: 1.0,
            seq_stride: 1.0,
        }
    }
}

impl KvConfig for ModelConfig {
    fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("model.") else {
            return Ok(false);
        };
        match k {
            "variant" => self.variant = v.parse()?,
            "modalities" => self.modalities = parse_modalities(v)?,
            "d_v" => self.d_v = kv::value(key, v)?,
            "d_l" => self.d_l = kv::value(key, v)?,
            "d_a" => self.d_a = kv::value(key, v)?,
            "hidden" => self.hidden = kv::value(key, v)?,
            "d_proj" => self.d_proj = kv::value(key, v)?,
            "head_hidden" => self.head_hidden = kv::value(key, v)?,
            "dropout" => self.dropout = kv::value(key, v)?,
            "activation" => self.activation = v.parse()?,
            "update_gate_bias" => self.update_gate_bias = kv::value(key, v)?,
            "focal_alpha" => self.focal_alpha = kv::value(key, v)?,
            "focal_gamma" => self.focal_gamma = kv::value(key, v)?,
            "lambda_reg" => self.lambda_reg = kv::value(key, v)?,
            "reg_loss" => self.reg_loss = v.parse()?,
            "seq_duration" => self.seq_duration = kv::value(key, v)?,
            "seq_stride" => self.seq_stride = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            pair("model.variant", self.variant),
            pair("model.modalities", format_modalities(&self.modalities)),
            pair("model.d_v", self.d_v),
            pair("model.d_l", self.d_l),
            pair("model.d_a", self.d_a),
            pair("model.hidden", self.hidden),
            pair("model.d_proj", self.d_proj),
            pair("model.head_hidden", self.head_hidden),
            pair("model.dropout", self.dropout),
            pair("model.activation", self.activation),
            pair("model.update_gate_bias", self.update_gate_bias),
            pair("model.focal_alpha", self.focal_alpha),
            pair("model.focal_gamma", self.focal_gamma),
            pair("model.lambda_reg", self.lambda_reg),
            pair("model.reg_loss", self.reg_loss),
            pair("model.seq_duration", self.seq_duration),
            pair("model.seq_stride", self.seq_stride),
        ]
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(2..=3).contains(&self.modalities.len()) {
            return cfg(format!(
                "pairwise attention needs 2 or 3 modalities, got `{}`",
                format_modalities(&self.modalities)
            ));
        }
        if self.variant != Variant::MmmsBa && self.modalities.len() != 3 {
            return cfg(format!("{} is defined only for all three modalities", self.variant));
        }
        if self.hidden == 0 || self.d_proj == 0 || self.head_hidden == 0 {
            return cfg("model.hidden, model.d_proj and model.head_hidden must be positive".into());
        }
        if self.d_v == 0 || self.d_l == 0 || self.d_a == 0 {
            return cfg("input widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("model.dropout = {} outside [0, 1)", self.dropout));
        }
        if !self.update_gate_bias.is_finite() {
            return cfg(format!("model.update_gate_bias = {} is not finite", self.update_gate_bias));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return cfg(format!("model.lambda_reg = {} must be >= 0", self.lambda_reg));
        }
        if !(self.focal_alpha > 0.0 && self.focal_gamma >= 0.0) {
            return cfg("focal alpha must be positive and gamma non-negative".into());
        }
        if !(self.seq_duration > 0.0 && self.seq_stride > 0.0) {
            return cfg("model.seq_duration and model.seq_stride must be positive".into());
        }
        Ok(())
    }

    pub fn input_width(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.d_v,
            Modality::Lip => self.d_l,
            Modality::Audio => self.d_a,
        }
    }

    /// Width of the fused per-sequence representation.
    pub fn fused_width(&self) -> usize {
        match (self.variant, self.modalities.len()) {
            (Variant::MmmsBa, 2) => 4 * self.d_proj,
            (Variant::MmmsBa, _) => 9 * self.d_proj,
            _ => 6 * self.d_proj,
        }
    }

    /// Short label such as `MMMS-BA V+L+A`.
    pub fn label(&self) -> String {
        format!("{} {}", self.variant, format_modalities(&self.modalities))
    }
}

/// Per-sequence model output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequencePrediction {
    pub p_fake: f64,
    /// Seconds after the window start.
    pub start_offset: f64,
    pub end_offset: f64,
}

/// All learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// One per selected modality, in V, L, A order.
    pub encoders: Vec<ModalityEncoderParams<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    pub cls_w: Tensor<T>,
    pub cls_b: Tensor<T>,
    pub reg_w: Tensor<T>,
    pub reg_b: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            encoders: cfg
                .modalities
                .iter()
                .map(|&m| ModalityEncoderParams::zeros(cfg.input_width(m), cfg.hidden, cfg.d_proj))
                .collect(),
            head_w: Tensor::zeros(cfg.fused_width(), cfg.head_hidden),
            head_b: Tensor::zeros(1, cfg.head_hidden),
            cls_w: Tensor::zeros(cfg.head_hidden, 2),
            cls_b: Tensor::zeros(1, 2),
            reg_w: Tensor::zeros(cfg.head_hidden, 2),
            reg_b: Tensor::zeros(1, 2),
        }
    }

    /// Uniform `±1/√fan_in` weights; biases zero except the update gates.
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let encoders = cfg
            .modalities
            .iter()
            .map(|&m| {
                ModalityEncoderParams::random(cfg.input_width(m), cfg.hidden, cfg.d_proj, rng)
                    .with_update_bias(cfg.update_gate_bias)
            })
            .collect();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        Self {
            encoders,
            head_w: Tensor::uniform(cfg.fused_width(), cfg.head_hidden, fan(cfg.fused_width()), rng),
            head_b: Tensor::zeros(1, cfg.head_hidden),
            cls_w: Tensor::uniform(cfg.head_hidden, 2, fan(cfg.head_hidden), rng),
            cls_b: Tensor::zeros(1, 2),
            reg_w: Tensor::uniform(cfg.head_hidden, 2, fan(cfg.head_hidden), rng),
            reg_b: Tensor::zeros(1, 2),
        }
    }

    /// Every tensor in declaration order (encoders, head, cls, reg).
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.encoders.iter().flat_map(|e| e.tensors()).collect();
        v.extend([&self.head_w, &self.head_b, &self.cls_w, &self.cls_b, &self.reg_w, &self.reg_b]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> =
            self.encoders.iter_mut().flat_map(|e| e.tensors_mut()).collect();
        v.extend([
            &mut self.head_w,
            &mut self.head_b,
            &mut self.cls_w,
            &mut self.cls_b,
            &mut self.reg_w,
            &mut self.reg_b,
        ]);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> ModelVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| g.param(t)).collect();
        ModelVars::from_vars(&vars)
    }
}

/// [`ModelParams`] registered on a graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoders: Vec<ModalityEncoderVars>,
    pub head_w: Var,
    pub head_b: Var,
    pub cls_w: Var,
    pub cls_b: Var,
    pub reg_w: Var,
    pub reg_b: Var,
}

const ENCODER_TENSORS: usize = 20;

impl ModelVars {
    /// From vars in [`ModelParams::tensors`] order.
    pub fn from_vars(v: &[Var]) -> Self {
        let n_enc = (v.len() - 6) / ENCODER_TENSORS;
        let encoders = (0..n_enc)
            .map(|i| {
                let e = &v[i * ENCODER_TENSORS..(i + 1) * ENCODER_TENSORS];
                ModalityEncoderVars {
                    forward: GruCellVars::from_vars(&e[..9]),
                    backward: GruCellVars::from_vars(&e[9..18]),
                    dense_w: e[18],
                    dense_b: e[19],
                }
            })
            .collect();
        let h = &v[n_enc * ENCODER_TENSORS..];
        Self {
            encoders,
            head_w: h[0],
            head_b: h[1],
            cls_w: h[2],
            cls_b: h[3],
            reg_w: h[4],
            reg_b: h[5],
        }
    }

    pub fn to_vec(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.encoders.iter().flat_map(|e| e.to_vec()).collect();
        v.extend([self.head_w, self.head_b, self.cls_w, self.cls_b, self.reg_w, self.reg_b]);
        v
    }
}

/// Graph outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `N × 2` class probabilities, column 1 is fake.
    pub probs: Var,
    /// Logarithms of `probs`, computed from the logits.
    pub log_probs: Var,
    /// `N × 2` non-negative start/end offsets.
    pub offsets: Var,
}

fn check_features(cfg: &ModelConfig, f: &FeatureSequenceSet) -> Result<()> {
    for &m in &cfg.modalities {
        let got = f.modality(m).cols();
        if got != cfg.input_width(m) {
            return Err(Error::Config(format!(
                "{}: {m} features are {got} wide, model expects {}",
                f.video_id,
                cfg.input_width(m)
            )));
        }
    }
    if (f.seq_stride - cfg.seq_stride).abs() > 1e-6 || (f.seq_duration - cfg.seq_duration).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "{}: windows are {}s every {}s, model configured for {}s every {}s",
            f.video_id, f.seq_duration, f.seq_stride, cfg.seq_duration, cfg.seq_stride
        )));
    }
    Ok(())
}

/// Records the forward pass on `g`.
pub fn forward_graph<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    vars: &ModelVars,
    features: &FeatureSequenceSet,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    check_features(cfg, features)?;
    if vars.encoders.len() != cfg.modalities.len() {
        return Err(Error::Config(format!(
            "{} encoders bound for {} modalities",
            vars.encoders.len(),
            cfg.modalities.len()
        )));
    }
    let opts = EncodeOptions {
        dropout: cfg.dropout,
        activation: cfg.activation,
        training,
    };
    let mut emb = Vec::with_capacity(cfg.modalities.len());
    for (enc, &m) in vars.encoders.iter().zip(&cfg.modalities) {
        let x = g.constant_owned(features.modality(m).cast::<T>());
        emb.push(encode_modality(g, enc, x, opts, rng)?);
    }
    let fused = match (cfg.variant, emb.as_slice()) {
        (Variant::MmmsBa, &[v, l, a]) => mmms_ba_fuse(g, v, l, a)?,
        (Variant::MmmsBa, &[p, q]) => {
            // (V, A) pairs with audio attending to visual, matching the
            // three-way layout; other pairs keep V, L, A order.
            if cfg.modalities == [Modality::Visual, Modality::Audio] {
                mmms_ba_fuse_pair(g, q, p)?
            } else {
                mmms_ba_fuse_pair(g, p, q)?
            }
        }
        (Variant::MmusSa, &[v, l, a]) => mmus_sa_fuse(g, v, l, a)?,
        (Variant::MsSa, &[v, l, a]) => ms_sa_fuse(g, v, l, a)?,
        _ => return Err(Error::Config(format!("{} is not a defined configuration", cfg.label()))),
    };
    let h = g.matmul(fused, vars.head_w)?;
    let h = g.add_row(h, vars.head_b)?;
    let h = g.relu(h)?;
    let h = g.dropout(h, cfg.dropout, rng, training)?;
    let logits = g.matmul(h, vars.cls_w)?;
    let logits = g.add_row(logits, vars.cls_b)?;
    let probs = g.row_softmax(logits)?;
    let log_probs = g.row_log_softmax(logits)?;
    let reg = g.matmul(h, vars.reg_w)?;
    let reg = g.add_row(reg, vars.reg_b)?;
    let offsets = g.relu(reg)?;
    Ok(ForwardOutput { probs, log_probs, offsets })
}

pub fn read_predictions<T: Scalar>(g: &Graph<'_, T>, out: &ForwardOutput) -> Vec<SequencePrediction> {
    let (p, o) = (g.value(out.probs), g.value(out.offsets));
    (0..p.rows())
        .map(|i| SequencePrediction {
            p_fake: p.get(i, 1).to_f64_lossy(),
            start_offset: o.get(i, 0).to_f64_lossy(),
            end_offset: o.get(i, 1).to_f64_lossy(),
        })
        .collect()
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::random(&config, rng);
        Ok(Self { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::zeros(&config);
        Ok(Self { config, params })
    }

    /// Evaluation-mode predictions, one per sequence.
    pub fn predict(&self, features: &FeatureSequenceSet) -> Result<Vec<SequencePrediction>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        // evaluation mode never draws from the generator
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = forward_graph(&mut g, &self.config, &vars, features, false, &mut unused)?;
        Ok(read_predictions(&g, &out))
    }

    /// Combined loss of one video and its gradient for every parameter, in
    /// [`ModelParams::tensors`] order.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        sample: &Sample,
        training: bool,
        rng: &mut R,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let target = VideoTarget::from_sample(sample)?;
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let out = forward_graph(&mut g, &self.config, &vars, &sample.features, training, rng)?;
        let loss = combined_loss_graph(&mut g, &self.config, &out, &target)?;
        let value = g.item(loss).to_f64_lossy();
        let mut grads = g.backward(loss)?;
        let grads = vars
            .to_vec()
            .into_iter()
            .zip(self.params.tensors())
            .map(|(v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect();
        Ok((value, grads))
    }
}
