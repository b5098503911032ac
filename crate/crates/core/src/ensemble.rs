//! Ensembles of independently trained S-FCNs whose foreground probability
//! maps are averaged at inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::patchsearch::{SampleInput, TrainingSample};
use crate::sfcn::{scale_width, train_sfcn, Sfcn, SfcnSpec, TrainConfig, TrainedSfcn};

pub const DEFAULT_MEMBERS: usize = 3;
pub const DEFAULT_WIDTH_MULTIPLIERS: [f64; 3] = [1.0, 0.75, 1.25];

/// Mixed into a member seed to get its shuffling and dropout stream.
const TRAINING_STREAM: u64 = 0x005e_ed0f_d47a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnsembleSpec {
    pub width_multipliers: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl EnsembleSpec {
    /// `n` members cycling through the default multipliers, with seeds drawn
    /// from `seed`.
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EnsembleSpec {
            width_multipliers: (0..n).map(|i| DEFAULT_WIDTH_MULTIPLIERS[i % 3]).collect(),
            seeds: (0..n).map(|_| rng.random()).collect(),
        }
    }

    /// `n` members sharing one width, with seeds drawn from `seed`.
    pub fn uniform(n: usize, multiplier: f64, seed: u64) -> Self {
        EnsembleSpec {
            width_multipliers: vec![multiplier; n],
            ..Self::new(n, seed)
        }
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidParameter("an ensemble needs at least one member".into()));
        }
        if self.seeds.len() != self.width_multipliers.len() {
            return Err(Error::InvalidParameter(format!(
                "{} seeds for {} width multipliers",
                self.seeds.len(),
                self.width_multipliers.len()
            )));
        }
        for &m in &self.width_multipliers {
            if !(m.is_finite() && m > 0.0) || scale_width(2, m) < 2 {
                return Err(Error::InvalidParameter(format!("width multiplier {m}")));
            }
        }
        Ok(())
    }
}

/// Trains one member: `seed` fixes initialization, and a derived stream
/// fixes shuffling and dropout.
pub fn train_member(
    base: &SfcnSpec,
    width_multiplier: f64,
    seed: u64,
    train: &[TrainingSample],
    val: &[TrainingSample],
    config: &TrainConfig,
) -> Result<TrainedSfcn> {
    let spec = base.clone().with_width(width_multiplier);
    let network = Sfcn::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let config = TrainConfig {
        seed: seed ^ TRAINING_STREAM,
        ..config.clone()
    };
    train_sfcn(network, train, val, &config)
}

/// Trains every member independently; the first failure aborts the ensemble.
pub fn train_mfcn(
    base: &SfcnSpec,
    train: &[TrainingSample],
    val: &[TrainingSample],
    ensemble: &EnsembleSpec,
    config: &TrainConfig,
) -> Result<Vec<TrainedSfcn>> {
    ensemble.validate()?;
    ensemble
        .width_multipliers
        .iter()
        .zip(&ensemble.seeds)
        .map(|(&m, &seed)| train_member(base, m, seed, train, val, config))
        .collect()
}

/// Ensemble output for one ROI patch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPrediction {
    pub roi: u16,
    /// Mean foreground probability, in patch (x-fastest) order.
    pub probability: Vec<f64>,
    /// `probability > 0.5`.
    pub label: Vec<bool>,
    pub center: Point,
    pub size: [usize; 3],
}

impl RoiPrediction {
    pub fn from_probability(roi: u16, probability: Vec<f64>, center: Point, size: [usize; 3]) -> Result<Self> {
        if probability.len() != size.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities for patch {size:?}",
                probability.len()
            )));
        }
        let label = probability.iter().map(|&s| s > 0.5).collect();
        Ok(RoiPrediction {
            roi,
            probability,
            label,
            center,
            size,
        })
    }
}

/// Per-voxel mean of member maps. Each voxel sums its values in sorted
/// order, so the result does not depend on member order.
pub fn average_maps(maps: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::EmptyInput("no member maps to average".into()))?;
    if maps.iter().any(|m| m.len() != first.len()) {
        return Err(Error::ShapeMismatch("member maps differ in size".into()));
    }
    let n = maps.len() as f64;
    let mut column = Vec::with_capacity(maps.len());
    Ok((0..first.len())
        .map(|v| {
            column.clear();
            column.extend(maps.iter().map(|m| m[v]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / n
        })
        .collect())
}

/// Eval-mode ensemble prediction for one test patch.
pub fn predict_roi(members: &[&Sfcn], input: &SampleInput, roi: u16, center: Point) -> Result<RoiPrediction> {
    let first = members
        .first()
        .ok_or_else(|| Error::EmptyInput("no ensemble members".into()))?;
    let size = first.spec().patch_size;
    if members.iter().any(|m| m.spec().patch_size != size || m.spec().k != first.spec().k) {
        return Err(Error::ShapeMismatch("ensemble members disagree on patch size or K".into()));
    }
    let maps = members
        .iter()
        .map(|m| m.predict_foreground(input))
        .collect::<Result<Vec<_>>>()?;
    RoiPrediction::from_probability(roi, average_maps(&maps)?, center, size)
}
