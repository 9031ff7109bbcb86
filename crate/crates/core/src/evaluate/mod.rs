//! Video-level scoring by frame averaging and per-subset accuracy tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::datapipe::{make_batches, BatchMode, Label, SampledSplit, Subset};
use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::numerics::Real;
use crate::training::DECISION_THRESHOLD;

/// Arithmetic mean of the frame probabilities.
pub fn aggregate_video(frame_probs: &[f64]) -> Result<f64> {
    if frame_probs.is_empty() {
        return Err(Error::Data("cannot aggregate a video without frame predictions".into()));
    }
    Ok(frame_probs.iter().sum::<f64>() / frame_probs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    pub subset: Subset,
    pub frame_probs: Vec<f64>,
    pub score: f64,
    /// Decision at [`DECISION_THRESHOLD`]; ties go to fake.
    pub predicted: Label,
    pub truth: Label,
}

impl VideoPrediction {
    pub fn new(video_id: impl Into<String>, subset: Subset, truth: Label, frame_probs: Vec<f64>) -> Result<Self> {
        let score = aggregate_video(&frame_probs)?;
        Ok(VideoPrediction {
            video_id: video_id.into(),
            subset,
            predicted: Label::from_score(score, DECISION_THRESHOLD),
            frame_probs,
            score,
            truth,
        })
    }

    pub fn is_correct(&self, threshold: f64) -> bool {
        Label::from_score(self.score, threshold) == self.truth
    }
}

/// Fraction of predictions whose thresholded score matches the truth.
pub fn compute_accuracy(preds: &[VideoPrediction], threshold: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Data("accuracy of an empty prediction set".into()));
    }
    let hits = preds.iter().filter(|p| p.is_correct(threshold)).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub videos: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl ReportRow {
    fn from_counts(videos: usize, correct: usize) -> Self {
        let accuracy = if videos == 0 { 0.0 } else { correct as f64 / videos as f64 };
        ReportRow { videos, correct, accuracy }
    }
}

/// Per-subset accuracies and the pooled accuracy over every video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub threshold: f64,
    pub subsets: BTreeMap<Subset, ReportRow>,
    pub cumulative: ReportRow,
}

impl SubsetReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table, one row per subset and a final cumulative row.
    pub fn to_table(&self) -> String {
        let rows: Vec<(&str, &ReportRow)> = self
            .subsets
            .iter()
            .map(|(s, r)| (s.name(), r))
            .chain(std::iter::once(("Cumulative", &self.cumulative)))
            .collect();
        let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("subset".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<w$}  {:>7}  {:>7}  {:>8}", "subset", "videos", "correct", "accuracy");
        for (name, r) in rows {
            let _ = writeln!(out, "{name:<w$}  {:>7}  {:>7}  {:>7.2}%", r.videos, r.correct, 100.0 * r.accuracy);
        }
        out
    }
}

pub fn group_by_subset(preds: &[VideoPrediction]) -> BTreeMap<Subset, Vec<VideoPrediction>> {
    let mut groups: BTreeMap<Subset, Vec<VideoPrediction>> = BTreeMap::new();
    for p in preds {
        groups.entry(p.subset).or_default().push(p.clone());
    }
    groups
}

/// Accuracy per subset plus the pooled value `sum(correct) / sum(videos)`.
/// Empty groups are left out of the table.
pub fn subset_report(groups: &BTreeMap<Subset, Vec<VideoPrediction>>, threshold: f64) -> SubsetReport {
    let mut subsets = BTreeMap::new();
    let (mut videos, mut correct) = (0, 0);
    for (subset, preds) in groups {
        if preds.is_empty() {
            log::warn!("subset {} has no predictions; omitted from the report", subset.name());
            continue;
        }
        let c = preds.iter().filter(|p| p.is_correct(threshold)).count();
        videos += preds.len();
        correct += c;
        subsets.insert(*subset, ReportRow::from_counts(preds.len(), c));
    }
    SubsetReport { threshold, subsets, cumulative: ReportRow::from_counts(videos, correct) }
}

/// Scores every sampled video by running the model on its frames and
/// averaging the probabilities.
pub fn predict_videos<T: Real>(
    model: &HybridModel<T>,
    split: &SampledSplit,
    augment: &AugmentConfig,
    batch_size: usize,
) -> Result<Vec<VideoPrediction>> {
    let mut out = Vec::with_capacity(split.videos.len());
    for v in &split.videos {
        if v.frames.is_empty() {
            continue;
        }
        let mut batches = make_batches(v.frames.as_slice(), batch_size, 0, 0, BatchMode::Eval, augment)?;
        let mut probs = Vec::with_capacity(v.frames.len());
        while let Some(batch) = batches.next_batch::<T>() {
            probs.extend(model.predict(&batch?.inputs)?);
        }
        out.push(VideoPrediction::new(v.video_id.clone(), v.subset, v.label, probs)?);
    }
    Ok(out)
}

/// Fails with the ids of `expected` videos that have no prediction.
pub fn check_coverage<'a>(expected: impl IntoIterator<Item = &'a str>, preds: &[VideoPrediction]) -> Result<()> {
    let have: BTreeSet<&str> = preds.iter().map(|p| p.video_id.as_str()).collect();
    let missing: Vec<String> = expected.into_iter().filter(|id| !have.contains(id)).map(str::to_string).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingPredictions(missing))
    }
}
