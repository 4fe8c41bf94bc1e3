//! Trains MMMS-BA on the default synthetic data and prints test metrics.

use std::time::Instant;

use mmba::data::{synth_generate, SyntheticSpec};
use mmba::evaluate::{evaluate_detection, evaluate_localization};
use mmba::localize::LocalizeConfig;
use mmba::model::ModelConfig;
use mmba::kv::KvConfig;
use mmba::trainer::{train, TrainConfig};

fn main() -> mmba::Result<()> {
    let mut spec = SyntheticSpec::default();
    let mut model_cfg = ModelConfig::default();
    let mut train_cfg = TrainConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or_else(|| mmba::Error::Usage(format!("expected key=value, got {arg}")))?;
        let known = spec.apply(k, v)? || model_cfg.apply(k, v)? || train_cfg.apply(k, v)?;
        if !known {
            return Err(mmba::Error::UnknownKey(k.to_string()));
        }
    }
    let data = synth_generate(&spec)?;
    let t0 = Instant::now();
    let out = train(&model_cfg, &data.train, &data.val, &train_cfg, &mut |e| {
        println!("{}  ({:.1}s)", e.line(), t0.elapsed().as_secs_f64());
    })?;
    println!("best epoch {} val auc {:.4}", out.best_epoch, out.best_val_auc);
    for (name, ds) in [("train", &data.train), ("test", &data.test)] {
        let preds = mmba::evaluate::predict_dataset(&out.model, ds)?;
        let (mut sc, mut lb) = (Vec::new(), Vec::new());
        for (p, s) in preds.iter().zip(&ds.samples) {
            sc.extend(p.iter().map(|q| q.p_fake));
            lb.extend(s.sequence_labels());
        }
        println!("{name} window auc {:.4}", mmba::metrics::auc(&sc, &lb)?);
    }
    print!("{}", evaluate_detection(&out.model, &data.test)?.render());
    let (report, _) = evaluate_localization(&out.model, &data.test, &LocalizeConfig::default())?;
    print!("{}", report.render());
    Ok(())
}
