//! The single multi-atlas guided FCN: one branch per input (target patch,
//! then each atlas image/label pair), a seven-layer convolutional encoder and
//! a ten-layer transposed-convolution decoder joined by three long skips.

mod network;
mod train;

pub use network::{stage_inputs, stage_targets, ForwardCache, Gradients, NetInput, Sfcn};
pub use train::{
    train_sfcn, train_sfcn_with, validate_dsc, EarlyStopper, EpochRecord, StopRule, TrainConfig,
    TrainedSfcn,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensornn::DEFAULT_DROPOUT;

pub const DEFAULT_K: usize = 3;
pub const BRANCH_CHANNELS: [usize; 2] = [32, 64];
pub const ENCODER_CHANNELS: [usize; 7] = [256, 64, 128, 128, 256, 256, 512];
pub const DECODER_CHANNELS: [usize; 10] = [768, 256, 256, 384, 128, 128, 192, 64, 64, 2];
/// Smallest patch extent that survives three halvings with room to spare.
pub const MIN_PATCH_AXIS: usize = 8;

/// Decoder layers that upsample by 2 and then take a skip concatenation.
pub(crate) const UPSAMPLING_LAYERS: [usize; 3] = [0, 3, 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SfcnSpec {
    pub k: usize,
    /// `(x, y, z)` patch extent.
    pub patch_size: [usize; 3],
    pub width_multiplier: f64,
    pub branch_channels: [usize; 2],
    pub encoder_channels: [usize; 7],
    /// Post-concatenation widths at the three skip stages, output widths
    /// elsewhere.
    pub decoder_channels: [usize; 10],
    pub dropout: f64,
}

impl SfcnSpec {
    pub fn new(k: usize, patch_size: [usize; 3]) -> Self {
        SfcnSpec {
            k,
            patch_size,
            width_multiplier: 1.0,
            branch_channels: BRANCH_CHANNELS,
            encoder_channels: ENCODER_CHANNELS,
            decoder_channels: DECODER_CHANNELS,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn with_width(mut self, multiplier: f64) -> Self {
        self.width_multiplier = multiplier;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    /// Tensor spatial extent `(d, h, w) = (z, y, x)`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.patch_size[2], self.patch_size[1], self.patch_size[0]]
    }

    /// Checks the invariants and resolves the scaled channel counts.
    pub fn layout(&self) -> Result<Layout> {
        let b = self.branch_channels;
        let e = self.encoder_channels;
        let d = self.decoder_channels;
        if self.k == 0 {
            return Err(Error::InvalidParameter("S-FCN needs at least one atlas".into()));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "width multiplier {}",
                self.width_multiplier
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter(format!("dropout {}", self.dropout)));
        }
        if b.contains(&0) || e.contains(&0) || d.contains(&0) {
            return Err(Error::WidthInconsistency("zero channel count".into()));
        }
        if d[9] != 2 {
            return Err(Error::WidthInconsistency(format!("final width {} is not 2", d[9])));
        }
        for (stage, (total, parts)) in [
            (d[0], (e[6], e[5])),
            (d[3], (d[2], e[2])),
            (d[6], (d[5], b[1])),
        ]
        .into_iter()
        .enumerate()
        {
            if total != parts.0 + parts.1 {
                return Err(Error::WidthInconsistency(format!(
                    "skip stage {}: {total} != {} + {}",
                    stage + 1,
                    parts.0,
                    parts.1
                )));
            }
        }
        if let Some(&axis) = self.patch_size.iter().find(|&&a| a < MIN_PATCH_AXIS) {
            return Err(Error::PatchTooSmall(format!(
                "patch {:?} has an axis of {axis} < {MIN_PATCH_AXIS}",
                self.patch_size
            )));
        }

        let m = self.width_multiplier;
        let branch = b.map(|w| scale_width(w, m));
        let encoder = e.map(|w| scale_width(w, m));
        let mut decoder_out = d.map(|w| scale_width(w, m));
        decoder_out[0] = encoder[6];
        decoder_out[3] = decoder_out[2];
        decoder_out[6] = decoder_out[5];
        decoder_out[9] = 2;
        let skips = [encoder[5], encoder[2], branch[1]];
        let mut decoder_in = [0; 10];
        decoder_in[0] = encoder[6];
        for l in 1..10 {
            decoder_in[l] = decoder_out[l - 1];
            if let Some(s) = UPSAMPLING_LAYERS.iter().position(|&u| u + 1 == l) {
                decoder_in[l] += skips[s];
            }
        }
        Ok(Layout {
            trunk_in: (self.k + 1) * branch[1],
            branch,
            encoder,
            decoder_in,
            decoder_out,
            skips,
        })
    }
}

/// Rounds `width * multiplier` to the nearest even count, at least 2.
pub fn scale_width(width: usize, multiplier: f64) -> usize {
    let scaled = ((width as f64 * multiplier) / 2.0).round() as usize * 2;
    scaled.max(2)
}

/// Resolved channel counts of every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub branch: [usize; 2],
    pub trunk_in: usize,
    pub encoder: [usize; 7],
    pub decoder_in: [usize; 10],
    pub decoder_out: [usize; 10],
    /// Channels joined at the three skip stages, deepest first.
    pub skips: [usize; 3],
}
