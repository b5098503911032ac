use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{stage_inputs, stage_targets, Sfcn};
use crate::error::{Error, Result};
use crate::eval::dice_bits;
use crate::patchsearch::TrainingSample;
use crate::tensornn::{cross_entropy, sgd_step, Mode};

pub const DEFAULT_BATCH_SIZE: usize = 2;
pub const DEFAULT_WARMUP_EPOCHS: usize = 5;
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_MAX_EPOCHS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Drives shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            warmup_epochs: DEFAULT_WARMUP_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            max_epochs: DEFAULT_MAX_EPOCHS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.warmup_epochs == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidParameter(
                "batch size, warmup and max epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Outcome of feeding one epoch's validation score to an [`EarlyStopper`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopRule {
    /// This epoch set a new running maximum.
    pub improved: bool,
    pub stop: bool,
}

/// Runs warmup epochs unconditionally, then stops at the first epoch scoring
/// strictly below the running maximum, or at the epoch cap.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    warmup: usize,
    max_epochs: usize,
    epoch: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopper {
    pub fn new(warmup: usize, max_epochs: usize) -> Self {
        EarlyStopper {
            warmup,
            max_epochs,
            epoch: 0,
            best: None,
        }
    }

    pub fn observe(&mut self, score: f64) -> StopRule {
        self.epoch += 1;
        let improved = self.best.is_none_or(|(_, b)| score > b);
        if improved {
            self.best = Some((self.epoch, score));
        }
        let decreased = !improved && score < self.best.map_or(score, |(_, b)| b);
        let stop = (self.epoch > self.warmup && decreased) || self.epoch >= self.max_epochs;
        StopRule { improved, stop }
    }

    /// 1-based epoch of the first running maximum.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.map(|(_, s)| s)
    }

    pub fn epochs_seen(&self) -> usize {
        self.epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_dsc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedSfcn {
    /// Parameters from the best validation epoch.
    pub network: Sfcn,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

/// Mean over samples of the Dice overlap between the thresholded
/// foreground probability (`> 0.5`) and the label patch.
pub fn validate_dsc(network: &Sfcn, samples: &[TrainingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no validation samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let p = network.predict_foreground(&s.input)?;
        let auto: Vec<bool> = p.iter().map(|&v| v > 0.5).collect();
        let manual: Vec<bool> = s.y.data.iter().map(|&v| v > 0.5).collect();
        total += dice_bits(&auto, &manual)?;
    }
    Ok(total / samples.len() as f64)
}

pub fn train_sfcn(
    network: Sfcn,
    train: &[TrainingSample],
    val: &[TrainingSample],
    config: &TrainConfig,
) -> Result<TrainedSfcn> {
    train_sfcn_with(network, train, val, config, |net, _| validate_dsc(net, val))
}

/// [`train_sfcn`] with an injectable per-epoch validation score.
pub fn train_sfcn_with<F>(
    mut network: Sfcn,
    train: &[TrainingSample],
    val: &[TrainingSample],
    config: &TrainConfig,
    mut validate: F,
) -> Result<TrainedSfcn>
where
    F: FnMut(&Sfcn, usize) -> Result<f64>,
{
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopper::new(config.warmup_epochs, config.max_epochs);
    let mut history = Vec::new();
    let mut best = network.clone();
    loop {
        let epoch = stopper.epochs_seen() + 1;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<_> = chunk.iter().map(|&i| &train[i].input).collect();
            let labels: Vec<_> = chunk.iter().map(|&i| &train[i].y).collect();
            let x = stage_inputs(&inputs)?;
            let y = stage_targets(&labels)?;
            let (p, cache) = network.forward(&x, Mode::Train, &mut rng)?;
            let (loss, grad) = cross_entropy(&p, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let grads = network.backward(&cache, &grad)?;
            network.absorb_batch_stats(&cache);
            for (param, g) in network.params_mut().into_iter().zip(&grads.0) {
                sgd_step(param, g, config.learning_rate);
            }
            loss_sum += loss;
            batches += 1;
        }
        let val_dsc = validate(&network, epoch)?;
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            val_dsc,
        });
        let rule = stopper.observe(val_dsc);
        if rule.improved {
            best = network.clone();
        }
        if rule.stop {
            break;
        }
    }
    Ok(TrainedSfcn {
        network: best,
        best_epoch: stopper.best_epoch().expect("at least one epoch"),
        stopped_epoch: stopper.epochs_seen(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Patch;
    use crate::patchsearch::SampleInput;
    use crate::sfcn::SfcnSpec;
    use proptest::prelude::*;

    fn trace(scores: &[f64], warmup: usize, cap: usize) -> (usize, usize) {
        let mut s = EarlyStopper::new(warmup, cap);
        for &v in scores {
            if s.observe(v).stop {
                break;
            }
        }
        (s.epochs_seen(), s.best_epoch().unwrap())
    }

    #[test]
    fn stopping_traces() {
        assert_eq!(trace(&[0.5, 0.6, 0.7, 0.7, 0.8, 0.75], 5, 15), (6, 5));
        let rising: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        assert_eq!(trace(&rising, 5, 15), (15, 15));
        // a dip inside warmup is ignored; a tie after warmup is not a decrease
        assert_eq!(trace(&[0.5, 0.3, 0.6, 0.6, 0.6, 0.6, 0.59], 5, 15), (7, 3));
        assert_eq!(trace(&[0.9, 0.1, 0.1, 0.1, 0.1, 0.1], 5, 15), (6, 1));
    }

    proptest! {
        #[test]
        fn never_trains_past_first_post_warmup_decrease(scores in prop::collection::vec(0.0f64..1.0, 1..30)) {
            let (stopped, best) = trace(&scores, 5, 15);
            let mut max = f64::NEG_INFINITY;
            let mut expected = scores.len().min(15);
            for (i, &v) in scores.iter().enumerate() {
                if i >= 5 && v < max {
                    expected = expected.min(i + 1);
                    break;
                }
                max = max.max(v);
            }
            prop_assert_eq!(stopped, expected);
            let window = &scores[..stopped];
            let top = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(best, window.iter().position(|&v| v == top).unwrap() + 1);
        }
    }

    /// A bright cube inside a dark patch, with the cube itself as the atlas.
    fn cube_sample(size: usize, lo: usize, hi: usize) -> TrainingSample {
        let n = size * size * size;
        let mut img = vec![0.0f32; n];
        let mut lab = vec![0.0f32; n];
        for z in 0..size {
            for y in 0..size {
                for x in 0..size {
                    if (lo..hi).contains(&x) && (lo..hi).contains(&y) && (lo..hi).contains(&z) {
                        img[x + size * (y + size * z)] = 1.0;
                        lab[x + size * (y + size * z)] = 1.0;
                    }
                }
            }
        }
        let p = |d: Vec<f32>| Patch { size: [size; 3], data: d };
        TrainingSample {
            input: SampleInput {
                x: p(img.clone()),
                atlas_images: vec![p(img)],
                atlas_labels: vec![p(lab.clone())],
            },
            y: p(lab),
        }
    }

    #[test]
    fn injected_scores_drive_the_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Sfcn::new(SfcnSpec::new(1, [8, 8, 8]).with_width(1.0 / 16.0), &mut rng).unwrap();
        let data = vec![cube_sample(8, 2, 6)];
        let scores = [0.5, 0.6, 0.7, 0.7, 0.8, 0.75, 0.9];
        let mut snapshots = Vec::new();
        let out = train_sfcn_with(net, &data, &data, &TrainConfig::default(), |n, e| {
            snapshots.push(n.clone());
            Ok(scores[e - 1])
        })
        .unwrap();
        assert_eq!(out.stopped_epoch, 6);
        assert_eq!(out.best_epoch, 5);
        assert_eq!(out.history.len(), 6);
        assert_eq!(out.network, snapshots[4]);
    }

    #[test]
    fn rejects_empty_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Sfcn::new(SfcnSpec::new(1, [8, 8, 8]).with_width(1.0 / 16.0), &mut rng).unwrap();
        let data = vec![cube_sample(8, 2, 6)];
        assert!(train_sfcn(net.clone(), &[], &data, &TrainConfig::default()).is_err());
        assert!(train_sfcn(net, &data, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn diverging_loss_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Sfcn::new(SfcnSpec::new(1, [8, 8, 8]).with_width(1.0 / 16.0), &mut rng).unwrap();
        let data = vec![cube_sample(8, 2, 6)];
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        let r = train_sfcn_with(net, &data, &data, &cfg, |_, _| Ok(0.5));
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn overfits_four_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = SfcnSpec::new(1, [8, 8, 8]).with_width(0.125);
        let net = Sfcn::new(spec, &mut rng).unwrap();
        let data = vec![cube_sample(8, 2, 6), cube_sample(8, 1, 4), cube_sample(8, 3, 7), cube_sample(8, 4, 8)];
        let cfg = TrainConfig {
            warmup_epochs: 50,
            max_epochs: 50,
            learning_rate: 0.2,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train_sfcn(net, &data, &data, &cfg).unwrap();
        let best = out.history.iter().map(|h| h.val_dsc).fold(0.0, f64::max);
        assert!(best >= 0.95, "best training DSC {best}");
    }

    #[test]
    fn identical_seeds_give_identical_bytes() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let net = Sfcn::new(SfcnSpec::new(1, [8, 8, 8]).with_width(1.0 / 16.0), &mut rng).unwrap();
            let data = vec![cube_sample(8, 2, 6), cube_sample(8, 1, 4), cube_sample(8, 3, 7)];
            let cfg = TrainConfig { max_epochs: 2, seed: 4, ..TrainConfig::default() };
            train_sfcn(net, &data, &data, &cfg).unwrap().network.state_vector()
        };
        let (a, b) = (run(), run());
        let bytes = |v: &[f64]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&a), bytes(&b));
    }
}
