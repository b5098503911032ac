//! Dice overlap and per-ROI evaluation reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;
use crate::volume::Volume;

/// `2 |a ∩ b| / (|a| + |b|)` over two bit sets; two empty sets score 1.
pub fn dice_bits(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimsMismatch(format!("dice over {} and {} voxels", a.len(), b.len())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    Ok(dice_from_counts(inter, na, nb))
}

pub fn dice_from_counts(intersection: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        return 1.0;
    }
    2.0 * intersection as f64 / (a + b) as f64
}

pub fn dsc(auto: &BinaryMask, manual: &BinaryMask) -> Result<f64> {
    if auto.dims() != manual.dims() {
        return Err(Error::DimsMismatch(format!(
            "dsc of {:?} against {:?}",
            auto.dims(),
            manual.dims()
        )));
    }
    dice_bits(auto.bits(), manual.bits())
}

/// Scores of one predicted volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VolumeScores {
    pub per_roi: BTreeMap<u16, f64>,
    /// Foreground-vs-foreground overlap across every label.
    pub all_labels: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvaluationReport {
    pub per_roi: BTreeMap<u16, Summary>,
    pub all_labels: Summary,
    pub volumes: Vec<VolumeScores>,
}

impl EvaluationReport {
    pub fn from_volumes(volumes: Vec<VolumeScores>) -> Result<Self> {
        let first = volumes
            .first()
            .ok_or_else(|| Error::EmptyInput("no volumes to report".into()))?;
        let rois: Vec<u16> = first.per_roi.keys().copied().collect();
        let mut per_roi = BTreeMap::new();
        for roi in rois {
            let values = volumes
                .iter()
                .map(|v| {
                    v.per_roi.get(&roi).copied().ok_or_else(|| {
                        Error::InvalidParameter(format!("volume scores missing ROI {roi}"))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            per_roi.insert(roi, Summary::of(&values));
        }
        let all: Vec<f64> = volumes.iter().map(|v| v.all_labels).collect();
        Ok(EvaluationReport {
            per_roi,
            all_labels: Summary::of(&all),
            volumes,
        })
    }
}

pub fn score_volume(predicted: &Volume, truth: &Volume, rois: &[u16]) -> Result<VolumeScores> {
    if predicted.dims() != truth.dims() {
        return Err(Error::DimsMismatch(format!(
            "prediction {:?} against truth {:?}",
            predicted.dims(),
            truth.dims()
        )));
    }
    let mut per_roi = BTreeMap::new();
    for &roi in rois {
        let a = BinaryMask::from_label(predicted, roi)?;
        let b = BinaryMask::from_label(truth, roi)?;
        per_roi.insert(roi, dsc(&a, &b)?);
    }
    let all_labels = dsc(&BinaryMask::foreground(predicted)?, &BinaryMask::foreground(truth)?)?;
    Ok(VolumeScores { per_roi, all_labels })
}

/// Report over a single predicted volume.
pub fn evaluate(predicted: &Volume, truth: &Volume, rois: &[u16]) -> Result<EvaluationReport> {
    EvaluationReport::from_volumes(vec![score_volume(predicted, truth, rois)?])
}
