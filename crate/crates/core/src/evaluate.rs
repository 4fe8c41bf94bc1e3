//! Running a trained model over a dataset split.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::Result;
use crate::localize::{localize, LocalizeConfig, VideoSegments};
use crate::metrics::{detection_report, localization_report, MetricsReport, VideoLocalization};
use crate::model::{video_score, Model, SequencePrediction};
use crate::scalar::Scalar;

/// Evaluation-mode predictions for every video, in dataset order.
pub fn predict_dataset<T: Scalar>(model: &Model<T>, ds: &Dataset) -> Result<Vec<Vec<SequencePrediction>>> {
    ds.samples.par_iter().map(|s| model.predict(&s.features)).collect()
}

/// Video scores and video labels, in dataset order.
pub fn video_scores<T: Scalar>(model: &Model<T>, ds: &Dataset) -> Result<(Vec<f64>, Vec<bool>)> {
    let preds = predict_dataset(model, ds)?;
    let scores = preds.iter().map(|p| video_score(p)).collect::<Result<Vec<_>>>()?;
    let labels = ds.samples.iter().map(|s| s.label.fake).collect();
    Ok((scores, labels))
}

pub fn evaluate_detection<T: Scalar>(model: &Model<T>, ds: &Dataset) -> Result<MetricsReport> {
    let (scores, labels) = video_scores(model, ds)?;
    detection_report(&scores, &labels)
}

/// Localized segments per video and the localization metrics against the
/// labelled fake segments.
pub fn evaluate_localization<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    cfg: &LocalizeConfig,
) -> Result<(MetricsReport, Vec<VideoSegments>)> {
    cfg.validate()?;
    let preds = predict_dataset(model, ds)?;
    let segments: Vec<VideoSegments> = ds
        .samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| VideoSegments {
            video_id: s.features.video_id.clone(),
            segments: localize(p, s.features.seq_stride, s.features.video_duration, cfg),
        })
        .collect();
    let loc: Vec<VideoLocalization> = ds
        .samples
        .iter()
        .zip(&segments)
        .map(|(s, v)| VideoLocalization {
            predictions: v.segments.clone(),
            ground_truth: s.label.segments.clone(),
        })
        .collect();
    Ok((localization_report(&loc)?, segments))
}
