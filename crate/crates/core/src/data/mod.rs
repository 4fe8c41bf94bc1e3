//! Feature sequences, labels, dataset layout on disk, and the synthetic
//! generator.

mod labels;
mod msqf;
mod synth;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use labels::{format_labels, parse_labels, read_labels, write_labels, LabelRecord};
pub use msqf::{decode_features, encode_features, read_features, write_features, MSQF_MAGIC, MSQF_VERSION};
pub use synth::{synth_generate, SyntheticDataset, SyntheticSpec};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

/// Input stream of a sequence: full visual face, lip region or audio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Visual,
    Lip,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Lip, Modality::Audio];

    pub fn letter(self) -> char {
        match self {
            Modality::Visual => 'V',
            Modality::Lip => 'L',
            Modality::Audio => 'A',
        }
    }

    pub fn from_letter(c: char) -> Result<Self> {
        match c.to_ascii_uppercase() {
            'V' => Ok(Modality::Visual),
            'L' => Ok(Modality::Lip),
            'A' => Ok(Modality::Audio),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// One video: `N` sequences with a feature row per modality, plus timing.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequenceSet {
    pub video_id: String,
    pub visual: Tensor<f64>,
    pub lip: Tensor<f64>,
    pub audio: Tensor<f64>,
    pub seq_duration: f64,
    pub seq_stride: f64,
    pub video_duration: f64,
}

impl FeatureSequenceSet {
    pub fn len(&self) -> usize {
        self.visual.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality(&self, m: Modality) -> &Tensor<f64> {
        match m {
            Modality::Visual => &self.visual,
            Modality::Lip => &self.lip,
            Modality::Audio => &self.audio,
        }
    }

    /// Start time of sequence window `i`.
    pub fn window_start(&self, i: usize) -> f64 {
        i as f64 * self.seq_stride
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Data(format!("{}: video has no sequences", self.video_id)));
        }
        if self.lip.rows() != n || self.audio.rows() != n {
            return Err(Error::Data(format!(
                "{}: modality row counts differ ({}, {}, {})",
                self.video_id,
                n,
                self.lip.rows(),
                self.audio.rows()
            )));
        }
        if !(self.seq_duration > 0.0 && self.seq_stride > 0.0) {
            return Err(Error::Data(format!(
                "{}: sequence duration and stride must be positive",
                self.video_id
            )));
        }
        let needed = (n - 1) as f64 * self.seq_stride + self.seq_duration;
        if self.video_duration + 1e-6 < needed {
            return Err(Error::Data(format!(
                "{}: video duration {} shorter than the {n} windows ({needed})",
                self.video_id, self.video_duration
            )));
        }
        for m in Modality::ALL {
            if !self.modality(m).all_finite() {
                return Err(Error::Data(format!("{}: non-finite {m} features", self.video_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: FeatureSequenceSet,
    pub label: LabelRecord,
}

impl Sample {
    /// Per-sequence fake flags: explicit labels when present, otherwise
    /// derived from the segments by the half-window overlap rule.
    pub fn sequence_labels(&self) -> Vec<bool> {
        self.label.sequence_labels(
            self.features.len(),
            self.features.seq_stride,
            self.features.seq_duration,
        )
    }
}

/// The samples of one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split_dir(root: &Path, split: Split) -> PathBuf {
        root.join(split.name())
    }

    /// Writes `<root>/<split>/labels.txt` and one `.msqf` file per video under
    /// `<root>/<split>/features/`.
    pub fn save(&self, root: &Path, split: Split) -> Result<()> {
        let dir = Self::split_dir(root, split);
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir)?;
        for s in &self.samples {
            write_features(&feat_dir.join(format!("{}.msqf", s.features.video_id)), &s.features)?;
        }
        let labels: Vec<LabelRecord> = self.samples.iter().map(|s| s.label.clone()).collect();
        write_atomic(&dir.join("labels.txt"), format_labels(&labels).as_bytes())?;
        Ok(())
    }

    /// Loads a split written by [`Dataset::save`], in label-file order.
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let dir = Self::split_dir(root, split);
        let labels = read_labels(&dir.join("labels.txt"))?;
        let mut samples = Vec::with_capacity(labels.len());
        for label in labels {
            let path = dir.join("features").join(format!("{}.msqf", label.video_id));
            let features = read_features(&path)?;
            if features.video_id != label.video_id {
                return Err(Error::Data(format!(
                    "{}: feature file carries video id `{}`",
                    path.display(),
                    features.video_id
                )));
            }
            label.validate_against(&features)?;
            samples.push(Sample { features, label });
        }
        Ok(Self { samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(n: usize) -> FeatureSequenceSet {
        FeatureSequenceSet {
            video_id: "v".into(),
            visual: Tensor::zeros(n, 2),
            lip: Tensor::zeros(n, 3),
            audio: Tensor::zeros(n, 1),
            seq_duration: 1.0,
            seq_stride: 0.5,
            video_duration: (n as f64 - 1.0) * 0.5 + 1.0,
        }
    }

    #[test]
    fn validate_checks_invariants() {
        assert!(set(3).validate().is_ok());
        assert!(set(0).validate().is_err());
        let mut s = set(3);
        s.video_duration = 1.5;
        assert!(s.validate().is_err());
        let mut s = set(3);
        s.lip = Tensor::zeros(2, 3);
        assert!(s.validate().is_err());
        let mut s = set(3);
        s.seq_stride = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn modality_letters_roundtrip() {
        for m in Modality::ALL {
            assert_eq!(Modality::from_letter(m.letter()).unwrap(), m);
        }
        assert!(Modality::from_letter('x').is_err());
        assert!("dev".parse::<Split>().is_err());
    }
}
