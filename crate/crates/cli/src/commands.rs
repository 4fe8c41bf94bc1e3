use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mmba::data::{synth_generate, Dataset, Split};
use mmba::evaluate::{evaluate_detection, evaluate_localization};
use mmba::gradcheck::{run_suite, Tolerance};
use mmba::io::write_atomic;
use mmba::localize::write_predictions;
use mmba::model::{read_checkpoint, write_checkpoint, ModelConfig};
use mmba::trainer::{format_ablation, format_log, grid_search, run_ablation, train};
use mmba::{Error, Model, Result};

use crate::config::RunConfig;

pub struct Paths {
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
}

impl Paths {
    fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }
}

fn save_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("config.txt"), cfg.render().as_bytes())
}

/// Saves `cfg` with the model section replaced by what was actually built.
fn save_resolved(cfg: &RunConfig, model: &ModelConfig, dir: &Path) -> Result<()> {
    let mut resolved = cfg.clone();
    resolved.model = model.clone();
    save_config(&resolved, dir)
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let ds = Dataset::load(&cfg.data_dir, split)?;
    if ds.is_empty() {
        return Err(Error::Data(format!("{} split under {} is empty", split, cfg.data_dir.display())));
    }
    Ok(ds)
}

/// Writes the three synthetic splits under `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = synth_generate(&cfg.synth)?;
    data.save(out)?;
    save_config(cfg, out)?;
    println!(
        "wrote {} train, {} val, {} test videos to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let train_set = load_split(cfg, Split::Train)?;
    let val_set = load_split(cfg, Split::Val)?;
    let model_cfg = cfg.model_for(&train_set)?;
    save_resolved(cfg, &model_cfg, &paths.out)?;
    let outcome = if cfg.train.grid_search {
        let grid = grid_search(&model_cfg, &train_set, &val_set, &cfg.train, &mut |row| {
            println!(
                "dropout {} activation {} lr {}: val auc {:.4} at epoch {}",
                row.point.dropout, row.point.activation, row.point.learning_rate, row.val_auc, row.best_epoch
            );
        })?;
        write_atomic(&paths.out.join("grid.tsv"), grid.table().as_bytes())?;
        grid.outcome
    } else {
        train(&model_cfg, &train_set, &val_set, &cfg.train, &mut |e| println!("{}", e.line()))?
    };
    write_checkpoint(&paths.out.join("model.ckpt"), &outcome.model)?;
    write_atomic(&paths.out.join("train_log.csv"), format_log(&outcome.log).as_bytes())?;
    println!("best epoch {} val auc {:.6}", outcome.best_epoch, outcome.best_val_auc);
    Ok(())
}

fn load_model(paths: &Paths) -> Result<Model> {
    read_checkpoint::<f64>(&paths.checkpoint())
}

pub fn eval(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let model = load_model(paths)?;
    let ds = load_split(cfg, paths.split)?;
    let report = evaluate_detection(&model, &ds)?;
    save_config(cfg, &paths.out)?;
    report.write(&paths.out.join(format!("metrics_{}.txt", paths.split)))?;
    print!("{}", report.render());
    Ok(())
}

pub fn localize(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let model = load_model(paths)?;
    let ds = load_split(cfg, paths.split)?;
    let (report, segments) = evaluate_localization(&model, &ds, &cfg.localize)?;
    save_config(cfg, &paths.out)?;
    write_predictions(&paths.out.join(format!("predictions_{}.tsv", paths.split)), &segments)?;
    report.write(&paths.out.join(format!("localization_{}.txt", paths.split)))?;
    print!("{}", report.render());
    Ok(())
}

pub fn ablate(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let train_set = load_split(cfg, Split::Train)?;
    let val_set = load_split(cfg, Split::Val)?;
    let test_set = load_split(cfg, Split::Test)?;
    let base = cfg.model_for(&train_set)?;
    save_resolved(cfg, &base, &paths.out)?;
    let rows = run_ablation(&base, &train_set, &val_set, &test_set, &cfg.train, &cfg.ablate_seeds)?;
    let table = format_ablation(&rows);
    write_atomic(&paths.out.join("ablation.tsv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

/// Runs the finite-difference suite; fails when any entry is out of
/// tolerance.
pub fn gradcheck(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let entries = run_suite(cfg.train.seed, Tolerance::default())?;
    let mut table = String::from("name\tchecked\tmax_rel_error\tmax_abs_error\tstatus\n");
    let mut failed = 0;
    for e in &entries {
        let ok = e.report.passed();
        failed += usize::from(!ok);
        let _ = writeln!(
            table,
            "{}\t{}\t{:.3e}\t{:.3e}\t{}",
            e.name,
            e.report.checked,
            e.report.max_rel_error,
            e.report.max_abs_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    save_config(cfg, &paths.out)?;
    write_atomic(&paths.out.join("gradcheck.tsv"), table.as_bytes())?;
    print!("{table}");
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} over {} entries", entries.len());
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks exceeded tolerance")));
    }
    Ok(())
}
