//! Mini-batch Adam training with exponential learning-rate decay and early
//! stopping on validation AUC, plus grid search and the ablation sweep.

mod adam;
mod search;

use rayon::prelude::*;
use rand::seq::SliceRandom;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use search::{
    ablation_configs, format_ablation, grid_points, grid_search, run_ablation, AblationRow, GridPoint,
    GridResult, GridRow,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluate::video_scores;
use crate::graph::Activation;
use crate::kv::{self, pair, KvConfig};
use crate::metrics::auc;
use crate::model::{Model, ModelConfig};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    /// Epochs without strict validation-AUC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Train every grid point and keep the best.
    pub grid_search: bool,
    pub grid_dropout: Vec<f64>,
    pub grid_activation: Vec<Activation>,
    /// Learning rates to search; empty means `learning_rate` only.
    pub grid_lr: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            lr_decay: 0.96,
            adam: AdamConfig::default(),
            max_epochs: 50,
            patience: 10,
            seed: 7,
            grid_search: false,
            grid_dropout: vec![0.2, 0.3],
            grid_activation: vec![Activation::Relu, Activation::Tanh],
            grid_lr: Vec::new(),
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| kv::value(key, s)).collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl KvConfig for TrainConfig {
    fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("train.") else {
            return Ok(false);
        };
        match k {
            "batch_size" => self.batch_size = kv::value(key, v)?,
            "learning_rate" => self.learning_rate = kv::value(key, v)?,
            "lr_decay" => self.lr_decay = kv::value(key, v)?,
            "beta1" => self.adam.beta1 = kv::value(key, v)?,
            "beta2" => self.adam.beta2 = kv::value(key, v)?,
            "epsilon" => self.adam.epsilon = kv::value(key, v)?,
            "max_epochs" => self.max_epochs = kv::value(key, v)?,
            "patience" => self.patience = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            "grid_search" => self.grid_search = kv::value(key, v)?,
            "grid_dropout" => self.grid_dropout = list(key, v)?,
            "grid_activation" => self.grid_activation = list(key, v)?,
            "grid_lr" => self.grid_lr = list(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            pair("train.batch_size", self.batch_size),
            pair("train.learning_rate", self.learning_rate),
            pair("train.lr_decay", self.lr_decay),
            pair("train.beta1", self.adam.beta1),
            pair("train.beta2", self.adam.beta2),
            pair("train.epsilon", self.adam.epsilon),
            pair("train.max_epochs", self.max_epochs),
            pair("train.patience", self.patience),
            pair("train.seed", self.seed),
            pair("train.grid_search", self.grid_search),
            pair("train.grid_dropout", join(&self.grid_dropout)),
            pair("train.grid_activation", join(&self.grid_activation)),
            pair("train.grid_lr", join(&self.grid_lr)),
        ]
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return cfg("train.batch_size, train.patience and train.max_epochs must be at least 1".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return cfg(format!("train.lr_decay = {} outside (0, 1]", self.lr_decay));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return cfg(format!("train.learning_rate = {} must be >= 0", self.learning_rate));
        }
        let AdamConfig { beta1, beta2, epsilon } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) {
            return cfg("Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into());
        }
        Ok(())
    }
}

/// `base · decay^epoch` with `epoch` counted from 0.
pub fn lr_schedule(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32)
}

/// Tracks the best validation metric; improvement must be strict.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records `metric` for `epoch`; true when it is a new best.
    pub fn update(&mut self, epoch: usize, metric: f64) -> bool {
        let improved = self.best.is_none_or(|(_, b)| metric > b);
        if improved {
            self.best = Some((epoch, metric));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_auc,lr";

impl EpochLog {
    pub fn line(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.epoch, self.train_loss, self.val_auc, self.lr)
    }
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in log {
        out.push_str(&e.line());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model<f64>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

/// Random-stream identifiers under the training seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

pub fn validation_auc(model: &Model<f64>, val: &Dataset) -> Result<f64> {
    let (scores, labels) = video_scores(model, val)?;
    auc(&scores, &labels)
}

/// Trains from a seeded initialisation.
pub fn train(
    model_cfg: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let model = Model::new(model_cfg.clone(), &mut stream_rng(cfg.seed, &[STREAM_INIT]))?;
    train_from(model, train_set, val_set, cfg, on_epoch)
}

/// Trains `model` in place of a fresh initialisation.
///
/// Each epoch shuffles the training videos, then for every batch computes
/// per-video losses and gradients (in parallel, dropout drawn from a stream
/// keyed by epoch and video), averages them in video order, and takes one
/// Adam step.
pub fn train_from(
    mut model: Model<f64>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let mut state = AdamState::new(model.params.tensors().iter().map(|t| t.shape()));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_model = model.clone();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let lr = lr_schedule(cfg.learning_rate, cfg.lr_decay, epoch - 1);
        order.shuffle(&mut stream_rng(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, Vec<Tensor<f64>>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream_rng(cfg.seed, &[STREAM_DROPOUT, epoch as u64, i as u64]);
                    model.loss_and_grads(&train_set.samples[i], true, &mut rng)
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor<f64>> =
                model.params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.add_assign(gi);
                }
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                let ids: Vec<&str> = batch
                    .iter()
                    .map(|&i| train_set.samples[i].features.video_id.as_str())
                    .collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient in epoch {epoch}, batch {b} ({})",
                    ids.join(", ")
                )));
            }
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam_step(model.params.tensors_mut(), &grads, &mut state, lr, &cfg.adam)?;
            loss_sum += batch_loss;
        }
        let val_auc = validation_auc(&model, val_set)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_auc,
            lr,
        };
        on_epoch(&entry);
        log.push(entry);
        if stopper.update(epoch, val_auc) {
            best_model = model.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    let (best_epoch, best_val_auc) = stopper.best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: best_model,
        log,
        best_epoch,
        best_val_auc,
    })
}
