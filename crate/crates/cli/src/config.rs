use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use mmba::data::{Dataset, Modality, SyntheticSpec};
use mmba::kv::{self, KvConfig};
use mmba::localize::LocalizeConfig;
use mmba::model::ModelConfig;
use mmba::trainer::TrainConfig;
use mmba::{Error, Result};

/// Everything a command can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub localize: LocalizeConfig,
    /// Dataset root read by train/eval/localize/ablate and written by synth.
    pub data_dir: PathBuf,
    /// Training seeds per ablation cell.
    pub ablate_seeds: Vec<u64>,
    /// Keys given explicitly, in the file or as overrides.
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SyntheticSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            localize: LocalizeConfig::default(),
            data_dir: PathBuf::from("data"),
            ablate_seeds: vec![1, 2, 3],
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in kv::parse(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let known = match key {
            "data.dir" => {
                self.data_dir = PathBuf::from(v);
                true
            }
            "ablate.seeds" => {
                self.ablate_seeds = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| kv::value(key, s))
                    .collect::<Result<_>>()?;
                true
            }
            _ => {
                self.synth.apply(key, v)?
                    || self.model.apply(key, v)?
                    || self.train.apply(key, v)?
                    || self.localize.apply(key, v)?
            }
        };
        if !known {
            return Err(Error::UnknownKey(key.to_string()));
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("data.dir".to_string(), self.data_dir.display().to_string()),
            (
                "ablate.seeds".to_string(),
                self.ablate_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            ),
        ];
        out.extend(self.synth.to_pairs());
        out.extend(self.model.to_pairs());
        out.extend(self.train.to_pairs());
        out.extend(self.localize.to_pairs());
        out
    }

    pub fn render(&self) -> String {
        kv::render(&self.to_pairs())
    }

    /// Model configuration with input widths and window timing taken from
    /// `data` wherever they were not set explicitly.
    pub fn model_for(&self, data: &Dataset) -> Result<ModelConfig> {
        let first = data
            .samples
            .first()
            .ok_or_else(|| Error::Data("training split is empty".into()))?;
        let f = &first.features;
        let mut m = self.model.clone();
        for (key, modality, slot) in [
            ("model.d_v", Modality::Visual, &mut m.d_v),
            ("model.d_l", Modality::Lip, &mut m.d_l),
            ("model.d_a", Modality::Audio, &mut m.d_a),
        ] {
            if !self.is_explicit(key) {
                *slot = f.modality(modality).cols();
            }
        }
        if !self.is_explicit("model.seq_duration") {
            m.seq_duration = f.seq_duration;
        }
        if !self.is_explicit("model.seq_stride") {
            m.seq_stride = f.seq_stride;
        }
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("model.bogus = 1\n"), Err(Error::UnknownKey(k)) if k == "model.bogus"));
        assert!(matches!(c.set("nope", "1"), Err(Error::UnknownKey(_))));
    }

    #[test]
    fn rendered_config_reloads_identically() {
        let mut c = RunConfig::default();
        c.apply_text("train.max_epochs = 3\nablate.seeds = 4,5\ndata.dir = /tmp/x\nlocalize.nms = hard\n")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.render()).unwrap();
        assert_eq!(back.to_pairs(), c.to_pairs());
        assert_eq!(back.ablate_seeds, vec![4, 5]);
    }
}
