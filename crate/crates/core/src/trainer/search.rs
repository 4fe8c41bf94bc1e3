use rayon::prelude::*;

use super::{train, TrainConfig, TrainOutcome};
use crate::data::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::evaluate::video_scores;
use crate::graph::Activation;
use crate::metrics::{auc, Confusion};
use crate::model::{format_modalities, ModelConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub dropout: f64,
    pub activation: Activation,
    pub learning_rate: f64,
}

/// Dropout × activation × learning rate, in declaration order.
pub fn grid_points(cfg: &TrainConfig) -> Vec<GridPoint> {
    let lrs = if cfg.grid_lr.is_empty() { vec![cfg.learning_rate] } else { cfg.grid_lr.clone() };
    let mut out = Vec::new();
    for &dropout in &cfg.grid_dropout {
        for &activation in &cfg.grid_activation {
            for &learning_rate in &lrs {
                out.push(GridPoint { dropout, activation, learning_rate });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridRow {
    pub point: GridPoint,
    pub val_auc: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    /// Index into `rows`.
    pub best: usize,
    pub outcome: TrainOutcome,
}

impl GridResult {
    pub fn table(&self) -> String {
        let mut out = String::from("dropout\tactivation\tlearning_rate\tbest_epoch\tval_auc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.6}\n",
                r.point.dropout, r.point.activation, r.point.learning_rate, r.best_epoch, r.val_auc
            ));
        }
        out
    }
}

/// Trains every grid point and keeps the one with the highest validation
/// AUC; ties go to the smaller dropout, then to the earlier point.
pub fn grid_search(
    model_cfg: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    on_row: &mut dyn FnMut(&GridRow),
) -> Result<GridResult> {
    let points = grid_points(cfg);
    if points.is_empty() {
        return Err(Error::Config("grid search space is empty".into()));
    }
    let mut rows = Vec::with_capacity(points.len());
    let mut best: Option<(usize, TrainOutcome)> = None;
    for p in points {
        let mc = ModelConfig { dropout: p.dropout, activation: p.activation, ..model_cfg.clone() };
        let tc = TrainConfig { learning_rate: p.learning_rate, ..cfg.clone() };
        let outcome = train(&mc, train_set, val_set, &tc, &mut |_| {})?;
        let row = GridRow { point: p, val_auc: outcome.best_val_auc, best_epoch: outcome.best_epoch };
        on_row(&row);
        let wins = match &best {
            None => true,
            Some((i, _)) => {
                let b: &GridRow = &rows[*i];
                row.val_auc > b.val_auc || (row.val_auc == b.val_auc && row.point.dropout < b.point.dropout)
            }
        };
        rows.push(row);
        if wins {
            best = Some((rows.len() - 1, outcome));
        }
    }
    let (best, outcome) = best.expect("non-empty grid");
    Ok(GridResult { rows, best, outcome })
}

/// The defined ablation cells: pairwise attention on every modality subset,
/// then both self-attention variants on all three modalities.
pub fn ablation_configs(base: &ModelConfig) -> Vec<ModelConfig> {
    use Modality::{Audio as A, Lip as L, Visual as V};
    let subsets: [&[Modality]; 4] = [&[V, L, A], &[V, L], &[V, A], &[L, A]];
    let mut out: Vec<ModelConfig> = subsets
        .iter()
        .map(|s| ModelConfig { variant: Variant::MmmsBa, modalities: s.to_vec(), ..base.clone() })
        .collect();
    for v in [Variant::MmusSa, Variant::MsSa] {
        out.push(ModelConfig { variant: v, modalities: vec![V, L, A], ..base.clone() });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub modalities: String,
    /// Test AUC per training seed.
    pub aucs: Vec<f64>,
    pub accs: Vec<f64>,
}

impl AblationRow {
    pub fn mean_auc(&self) -> f64 {
        self.aucs.iter().sum::<f64>() / self.aucs.len() as f64
    }

    pub fn mean_acc(&self) -> f64 {
        self.accs.iter().sum::<f64>() / self.accs.len() as f64
    }
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant\tmodalities\tAUC\tACC\tseeds\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{}\n",
            r.variant,
            r.modalities,
            r.mean_auc(),
            r.mean_acc(),
            r.aucs.len()
        ));
    }
    out
}

/// Trains each cell of [`ablation_configs`] once per seed and scores it on
/// `test_set`. Cells run concurrently; results keep cell order.
pub fn run_ablation(
    base: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let cells = ablation_configs(base);
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let scored: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let tc = TrainConfig { seed, ..cfg.clone() };
            let outcome = train(&cells[c], train_set, val_set, &tc, &mut |_| {})?;
            let (scores, labels) = video_scores(&outcome.model, test_set)?;
            Ok((auc(&scores, &labels)?, Confusion::at(&scores, &labels, 0.5).accuracy()))
        })
        .collect::<Result<_>>()?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, mc)| {
            let mine = &scored[c * seeds.len()..(c + 1) * seeds.len()];
            AblationRow {
                variant: mc.variant,
                modalities: format_modalities(&mc.modalities),
                aucs: mine.iter().map(|r| r.0).collect(),
                accs: mine.iter().map(|r| r.1).collect(),
            }
        })
        .collect())
}
