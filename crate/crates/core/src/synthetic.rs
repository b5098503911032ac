//! Synthetic atlas datasets: noisy volumes with ellipsoidal ROIs whose
//! shapes and positions jitter from subject to subject.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pipeline::{AtlasEntry, FieldRef, Manifest, TestEntry, TransformEntry, VolumeKind};
use crate::volume::{coords_of, save_volume, voxel_count, Dims, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub dims: Dims,
    pub templates: usize,
    pub targets: usize,
    pub tests: usize,
    /// Mean ellipsoid per ROI; ROI `i + 1` is `rois[i]`.
    pub rois: Vec<Ellipsoid>,
    /// Per-subject uniform jitter of each radius, in voxels.
    pub radius_jitter: f64,
    /// Per-subject uniform jitter of each center coordinate, in voxels.
    pub center_jitter: f64,
    pub background: f32,
    pub intensities: Vec<f32>,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dims: [32, 32, 32],
            templates: 3,
            targets: 3,
            tests: 2,
            rois: vec![
                Ellipsoid {
                    center: [10.5, 16.0, 16.0],
                    radii: [3.5, 4.0, 3.0],
                },
                Ellipsoid {
                    center: [21.5, 16.0, 16.0],
                    radii: [3.0, 3.5, 4.0],
                },
            ],
            radius_jitter: 0.5,
            center_jitter: 1.0,
            background: 20.0,
            intensities: vec![60.0, 100.0],
            noise_sigma: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub image: Volume,
    pub label: Volume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub templates: Vec<Subject>,
    pub targets: Vec<Subject>,
    pub tests: Vec<Subject>,
}

impl SyntheticDataset {
    pub fn roi_count(&self) -> u16 {
        self.templates
            .iter()
            .chain(&self.targets)
            .chain(&self.tests)
            .filter_map(|s| s.label.label_set().ok())
            .flatten()
            .max()
            .unwrap_or(0)
    }
}

fn validate(cfg: &SyntheticConfig) -> Result<()> {
    if cfg.rois.is_empty() || cfg.rois.len() >= u16::MAX as usize {
        return Err(Error::InvalidParameter(format!("{} ROIs", cfg.rois.len())));
    }
    if cfg.intensities.len() != cfg.rois.len() {
        return Err(Error::InvalidParameter(format!(
            "{} intensities for {} ROIs",
            cfg.intensities.len(),
            cfg.rois.len()
        )));
    }
    if cfg.dims.contains(&0) {
        return Err(Error::InvalidParameter(format!("dims {:?}", cfg.dims)));
    }
    let min_radius = cfg.rois.iter().flat_map(|e| e.radii).fold(f64::INFINITY, f64::min);
    if !(cfg.radius_jitter >= 0.0 && cfg.radius_jitter < min_radius) {
        return Err(Error::InvalidParameter(format!("radius jitter {}", cfg.radius_jitter)));
    }
    if !(cfg.center_jitter >= 0.0) || !(cfg.noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter("jitter and noise must be non-negative".into()));
    }
    Ok(())
}

fn subject(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Subject> {
    let shapes: Vec<Ellipsoid> = cfg
        .rois
        .iter()
        .map(|e| Ellipsoid {
            center: e
                .center
                .map(|c| c + rng.random_range(-1.0..=1.0) * cfg.center_jitter),
            radii: e
                .radii
                .map(|r| r + rng.random_range(-1.0..=1.0) * cfg.radius_jitter),
        })
        .collect();
    let noise = Normal::new(0.0f32, cfg.noise_sigma)
        .map_err(|e| Error::InvalidParameter(format!("noise: {e}")))?;
    let n = voxel_count(cfg.dims);
    let mut labels = vec![0u16; n];
    let mut image = vec![0.0f32; n];
    for v in 0..n {
        let p = coords_of(cfg.dims, v);
        let mut value = cfg.background;
        for (i, e) in shapes.iter().enumerate() {
            if e.contains(p) {
                labels[v] = i as u16 + 1;
                value = cfg.intensities[i];
            }
        }
        image[v] = value + noise.sample(rng);
    }
    Ok(Subject {
        image: Volume::from_f32(cfg.dims, image)?,
        label: Volume::from_labels(cfg.dims, labels)?,
    })
}

/// Templates, then targets, then tests, all drawn from one seeded stream.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |count: usize| (0..count).map(|_| subject(cfg, &mut rng)).collect::<Result<Vec<_>>>();
    Ok(SyntheticDataset {
        templates: draw(cfg.templates)?,
        targets: draw(cfg.targets)?,
        tests: draw(cfg.tests)?,
    })
}

/// Writes every volume under `dir` with a manifest of identity transforms,
/// returning the manifest path.
pub fn write_dataset(dataset: &SyntheticDataset, dir: &Path) -> Result<PathBuf> {
    let write = |name: String, s: &Subject| -> Result<(PathBuf, PathBuf)> {
        let image = PathBuf::from(format!("{name}_image.rvol"));
        let label = PathBuf::from(format!("{name}_label.rvol"));
        save_volume(&s.image, dir.join(&image))?;
        save_volume(&s.label, dir.join(&label))?;
        Ok((image, label))
    };
    let mut templates = Vec::new();
    for (i, s) in dataset.templates.iter().enumerate() {
        let (image, label) = write(format!("template{i}"), s)?;
        templates.push(AtlasEntry { image, label });
    }
    let mut targets = Vec::new();
    for (i, s) in dataset.targets.iter().enumerate() {
        let (image, label) = write(format!("target{i}"), s)?;
        targets.push(AtlasEntry { image, label });
    }
    let mut tests = Vec::new();
    for (i, s) in dataset.tests.iter().enumerate() {
        let (image, label) = write(format!("test{i}"), s)?;
        tests.push(TestEntry {
            image,
            label: Some(label),
        });
    }
    let mut transforms = Vec::new();
    for template in 0..templates.len() {
        for (kind, count) in [(VolumeKind::Target, targets.len()), (VolumeKind::Test, tests.len())] {
            for index in 0..count {
                transforms.push(TransformEntry {
                    template,
                    kind,
                    index,
                    field: FieldRef::Identity,
                });
            }
        }
    }
    let manifest = Manifest {
        roi_count: dataset.roi_count(),
        templates,
        targets,
        tests,
        transforms,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
