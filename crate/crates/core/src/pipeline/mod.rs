//! File-based orchestration: prep, geometry, sample, train, segment and
//! evaluate, each reading the previous stage's artifacts.

mod artifacts;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use artifacts::{
    decode_model, decode_sample, encode_model, encode_sample, load_model, sample_dir, save_model,
    GeometryFile, MemberEntry, ModelHeader, ModelIndex, SampleEntry, SampleIndex, Split,
    MODEL_INDEX, MODEL_MAGIC, SAMPLE_INDEX,
};
pub use manifest::{
    volume_key, AtlasEntry, FieldRef, Manifest, PreparedManifest, PreparedVolume, TestEntry,
    TransformEntry, VolumeKind, WarpedEntry,
};

use crate::ensemble::{predict_roi, train_mfcn, EnsembleSpec, RoiPrediction};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvaluationReport};
use crate::fusion::{fuse, Fused};
use crate::geometry::{
    roi_cuboid, roi_patch_size, sample_training_centers, PatchGeometry, DEFAULT_TRAINING_PATCHES,
};
use crate::io_util::write_json;
use crate::patchsearch::{build_input, build_training_sample, AtlasRef, SearchConfig, DEFAULT_K};
use crate::sfcn::{Sfcn, SfcnSpec, TrainConfig};
use crate::volume::{
    apply_transform_to_grid, histogram_match, load_field, load_volume, save_rvol, save_volume,
    Interpolation, Transform, Volume,
};
use manifest::canonical;

pub const PREPARED_MANIFEST: &str = "prepared.json";
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

fn check_labels(label: &Volume, roi_count: u16, what: &str) -> Result<()> {
    if let Some(&bad) = label.label_set()?.iter().find(|&&l| l > roi_count) {
        return Err(Error::Manifest(format!("{what} carries label {bad} above roiCount {roi_count}")));
    }
    Ok(())
}

fn check_pair(image: &Volume, label: &Volume, what: &str) -> Result<()> {
    if image.dims() != label.dims() {
        return Err(Error::DimsMismatch(format!(
            "{what}: image {:?} vs label {:?}",
            image.dims(),
            label.dims()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepOptions {
    pub manifest: PathBuf,
    pub out: PathBuf,
    /// Template whose intensity histogram every other image is matched to.
    pub reference: Option<usize>,
}

/// Histogram-matches all images to the reference template and resamples
/// every template onto every target and test grid. Returns the path of the
/// prepared manifest.
pub fn prep(opts: &PrepOptions) -> Result<PathBuf> {
    let m = Manifest::load(&opts.manifest)?;
    let reference = opts.reference.unwrap_or(0);
    if reference >= m.templates.len() {
        return Err(Error::Manifest(format!(
            "reference template {reference} of {}",
            m.templates.len()
        )));
    }
    let out = &opts.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let out_abs = canonical(out)?;
    let reference_image = load_volume(&m.templates[reference].image)?;
    let normalize = |image: &Volume, is_reference: bool| -> Result<Volume> {
        if is_reference {
            Ok(image.clone())
        } else {
            histogram_match(image, &reference_image)
        }
    };

    let templates = m
        .templates
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let image = load_volume(&e.image)?;
            let label = load_volume(&e.label)?;
            let what = format!("template {i}");
            check_pair(&image, &label, &what)?;
            check_labels(&label, m.roi_count, &what)?;
            Ok((normalize(&image, i == reference)?, label))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grids = BTreeMap::new();
    let mut prepared = |kind: VolumeKind, index: usize, image: &Path, label: Option<&PathBuf>| -> Result<PreparedVolume> {
        let what = volume_key(kind, index);
        let raw = load_volume(image)?;
        if let Some(l) = label {
            let l = load_volume(l)?;
            check_pair(&raw, &l, &what)?;
            check_labels(&l, m.roi_count, &what)?;
        }
        grids.insert((kind, index), raw.dims());
        let rel = PathBuf::from("images").join(format!("{}{index}.rvol", kind.name()));
        save_volume(&normalize(&raw, false)?, out.join(&rel))?;
        Ok(PreparedVolume {
            source: canonical(image)?,
            image: rel,
            label: label.map(|l| canonical(l)).transpose()?,
        })
    };
    let mut targets = Vec::new();
    for (j, t) in m.targets.iter().enumerate() {
        targets.push(prepared(VolumeKind::Target, j, &t.image, Some(&t.label))?);
    }
    let mut tests = Vec::new();
    for (j, t) in m.tests.iter().enumerate() {
        tests.push(prepared(VolumeKind::Test, j, &t.image, t.label.as_ref())?);
    }

    let mut warped = Vec::new();
    for t in &m.transforms {
        let (image, label) = &templates[t.template];
        let grid = grids[&(t.kind, t.index)];
        let field = match &t.field {
            FieldRef::Identity => None,
            FieldRef::Path(p) => Some(load_field(p)?),
        };
        let transform = field.as_ref().map_or(Transform::Identity, Transform::Field);
        let name = format!("template{}_{}{}", t.template, t.kind.name(), t.index);
        let image_rel = PathBuf::from("warped").join(format!("{name}_image.rvol"));
        let label_rel = PathBuf::from("warped").join(format!("{name}_label.rvol"));
        save_volume(&apply_transform_to_grid(image, transform, Interpolation::Trilinear, grid)?, out.join(&image_rel))?;
        save_volume(&apply_transform_to_grid(label, transform, Interpolation::Nearest, grid)?, out.join(&label_rel))?;
        warped.push(WarpedEntry {
            template: t.template,
            kind: t.kind,
            index: t.index,
            image: image_rel,
            label: label_rel,
        });
    }
    warped.sort_by_key(|w| (w.kind, w.index, w.template));

    let manifest = PreparedManifest {
        roi_count: m.roi_count,
        reference,
        template_count: m.templates.len(),
        targets,
        tests,
        warped,
    };
    let path = out_abs.join(PREPARED_MANIFEST);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loaded volumes of one prepared target or test grid.
#[derive(Debug, Clone)]
pub struct PreparedGrid {
    pub image: Volume,
    pub label: Option<Volume>,
    /// Warped `(image, label)` per template, in template order.
    pub atlases: Vec<(Volume, Volume)>,
}

impl PreparedGrid {
    pub fn load(prepared: &PreparedManifest, kind: VolumeKind, index: usize) -> Result<Self> {
        let v = prepared.volume(kind, index)?;
        let atlases = prepared
            .warped_onto(kind, index)?
            .into_iter()
            .map(|w| Ok((load_volume(&w.image)?, load_volume(&w.label)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedGrid {
            image: load_volume(&v.image)?,
            label: v.label.as_ref().map(load_volume).transpose()?,
            atlases,
        })
    }

    pub fn atlas_refs(&self) -> Vec<AtlasRef<'_>> {
        self.atlases
            .iter()
            .map(|(image, label)| AtlasRef { image, label })
            .collect()
    }

    fn warped_labels(&self) -> Vec<&Volume> {
        self.atlases.iter().map(|(_, l)| l).collect()
    }
}

/// Per-ROI patch size (maximum over the target cuboids) and the patch
/// center on every target and test grid.
pub fn compute_geometry(prepared: &PreparedManifest, dilation: usize) -> Result<GeometryFile> {
    let mut grids = Vec::new();
    for kind in [VolumeKind::Target, VolumeKind::Test] {
        for index in 0..prepared.count(kind) {
            grids.push((kind, index, PreparedGrid::load(prepared, kind, index)?));
        }
    }
    let mut rois = Vec::new();
    for roi in 1..=prepared.roi_count {
        let mut target_cuboids = Vec::new();
        let mut centers = BTreeMap::new();
        for (kind, index, grid) in &grids {
            let cuboid = roi_cuboid(&grid.warped_labels(), roi, dilation)?;
            if *kind == VolumeKind::Target {
                target_cuboids.push(cuboid);
            }
            centers.insert(volume_key(*kind, *index), cuboid.center());
        }
        rois.push(PatchGeometry {
            roi,
            size: roi_patch_size(&target_cuboids)?,
            centers,
        });
    }
    Ok(GeometryFile::new(dilation, rois))
}

pub fn geometry(prepared: &Path, dilation: usize, out: &Path) -> Result<GeometryFile> {
    let g = compute_geometry(&PreparedManifest::load(prepared)?, dilation)?;
    g.save(out)?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOptions {
    pub prepared: PathBuf,
    pub geometry: PathBuf,
    pub roi: u16,
    /// Total over all targets, split as evenly as possible.
    pub count: usize,
    pub k: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub search_stride: usize,
    /// Root directory; samples land in `out/roi<id>/`.
    pub out: PathBuf,
}

impl SampleOptions {
    pub fn new(prepared: PathBuf, geometry: PathBuf, roi: u16, out: PathBuf) -> Self {
        SampleOptions {
            prepared,
            geometry,
            roi,
            count: DEFAULT_TRAINING_PATCHES,
            k: DEFAULT_K,
            seed: 0,
            val_fraction: DEFAULT_VAL_FRACTION,
            search_stride: 1,
            out,
        }
    }
}

/// Draws training centers on every target, builds the K-atlas samples, and
/// splits them into training and validation sets.
pub fn sample(opts: &SampleOptions) -> Result<SampleIndex> {
    if !(opts.val_fraction > 0.0 && opts.val_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("validation fraction {}", opts.val_fraction)));
    }
    let prepared = PreparedManifest::load(&opts.prepared)?;
    let geo = GeometryFile::load(&opts.geometry)?;
    let roi_geo = geo.roi(opts.roi)?;
    let targets = prepared.count(VolumeKind::Target);
    if opts.count < 3 * targets {
        return Err(Error::InvalidParameter(format!(
            "{} samples over {targets} targets; each target needs at least 3",
            opts.count
        )));
    }
    let search = SearchConfig {
        k: opts.k,
        radius: None,
        stride: opts.search_stride,
    };
    let dir = sample_dir(&opts.out, opts.roi);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    for j in 0..targets {
        let share = opts.count / targets + usize::from(j < opts.count % targets);
        let grid = PreparedGrid::load(&prepared, VolumeKind::Target, j)?;
        let label = grid.label.as_ref().expect("targets are labeled");
        let atlases = grid.atlas_refs();
        for c in sample_training_centers(label, opts.roi, roi_geo.size, share, geo.dilation, &mut rng)? {
            let (s, _) = build_training_sample(&grid.image, label, opts.roi, c.center, roi_geo.size, &atlases, &search)?;
            let file = PathBuf::from(format!("{:05}.rvol", entries.len()));
            crate::io_util::write_atomic(&dir.join(&file), &encode_sample(&s)?)?;
            entries.push(SampleEntry {
                file,
                target: j,
                center: c.center,
                pool: c.pool,
                split: Split::Train,
            });
        }
    }
    let n = entries.len();
    let val = ((n as f64 * opts.val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in &order[..val] {
        entries[i].split = Split::Val;
    }
    let index = SampleIndex {
        roi: opts.roi,
        k: opts.k,
        patch_size: roi_geo.size,
        search_stride: opts.search_stride,
        seed: opts.seed,
        manifest: canonical(&opts.prepared)?,
        geometry: canonical(&opts.geometry)?,
        geometry_hash: geo.hash.clone(),
        samples: entries,
    };
    write_json(&dir.join(SAMPLE_INDEX), &index)?;
    Ok(index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Root directory given to `sample`.
    pub samples: PathBuf,
    pub roi: u16,
    pub members: usize,
    /// One width for every member; otherwise the members cycle through the
    /// default multipliers.
    pub width: Option<f64>,
    pub seed: u64,
    pub config: TrainConfig,
    pub out: PathBuf,
}

impl TrainOptions {
    pub fn new(samples: PathBuf, roi: u16, out: PathBuf) -> Self {
        TrainOptions {
            samples,
            roi,
            members: crate::ensemble::DEFAULT_MEMBERS,
            width: None,
            seed: 0,
            config: TrainConfig::default(),
            out,
        }
    }
}

/// Trains one ROI's ensemble and records it in the model index.
pub fn train(opts: &TrainOptions) -> Result<ModelIndex> {
    let dir = sample_dir(&opts.samples, opts.roi);
    let samples = SampleIndex::load(&dir)?;
    GeometryFile::load(&samples.geometry)?.expect_hash(&samples.geometry_hash)?;
    let train_set = samples.read_split(&dir, Split::Train)?;
    let val_set = samples.read_split(&dir, Split::Val)?;
    let ensemble = match opts.width {
        Some(w) => EnsembleSpec::uniform(opts.members, w, opts.seed),
        None => EnsembleSpec::new(opts.members, opts.seed),
    };
    let base = SfcnSpec::new(samples.k, samples.patch_size);
    let trained = train_mfcn(&base, &train_set, &val_set, &ensemble, &opts.config)?;

    let mut index = match ModelIndex::load(&opts.out) {
        Ok(existing) => {
            if existing.geometry_hash != samples.geometry_hash {
                return Err(Error::GeometryMismatch {
                    expected: existing.geometry_hash,
                    found: samples.geometry_hash,
                });
            }
            if existing.manifest != samples.manifest || existing.k != samples.k || existing.search_stride != samples.search_stride {
                return Err(Error::Manifest(format!(
                    "{} holds models for a different dataset or K",
                    opts.out.display()
                )));
            }
            existing
        }
        Err(Error::MissingModel(_)) => ModelIndex {
            manifest: samples.manifest.clone(),
            geometry: samples.geometry.clone(),
            geometry_hash: samples.geometry_hash.clone(),
            k: samples.k,
            search_stride: samples.search_stride,
            rois: BTreeMap::new(),
        },
        Err(e) => return Err(e),
    };
    let mut members = Vec::new();
    for (m, t) in trained.iter().enumerate() {
        let file = PathBuf::from(format!("roi{}_member{m}.rpar", opts.roi));
        let header = ModelHeader {
            roi: opts.roi,
            member: m,
            seed: ensemble.seeds[m],
            spec: t.network.spec().clone(),
            geometry_hash: samples.geometry_hash.clone(),
            best_epoch: t.best_epoch,
            stopped_epoch: t.stopped_epoch,
            history: t.history.clone(),
            state_len: t.network.state_len(),
        };
        save_model(&opts.out.join(&file), &header, &t.network)?;
        members.push(MemberEntry {
            file,
            seed: ensemble.seeds[m],
            width_multiplier: ensemble.width_multipliers[m],
            best_epoch: t.best_epoch,
            stopped_epoch: t.stopped_epoch,
        });
    }
    index.rois.insert(opts.roi, members);
    index.save(&opts.out)?;
    Ok(index)
}

/// Segments one grid: per ROI, ensemble prediction at the geometry center,
/// then fusion.
pub fn segment_grid(
    image: &Volume,
    atlases: &[AtlasRef<'_>],
    geometry: &GeometryFile,
    key: &str,
    models: &BTreeMap<u16, Vec<Sfcn>>,
    search: &SearchConfig,
) -> Result<(Fused, Vec<RoiPrediction>)> {
    let mut predictions = Vec::new();
    for (&roi, members) in models {
        let center = geometry.center(roi, key)?;
        let size = geometry.roi(roi)?.size;
        let (input, _) = build_input(image, roi, center, size, atlases, search)?;
        let refs: Vec<&Sfcn> = members.iter().collect();
        predictions.push(predict_roi(&refs, &input, roi, center)?);
    }
    Ok((fuse(&predictions, image.dims())?, predictions))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOptions {
    /// A test image listed in the prepared manifest, raw or prepared.
    pub image: PathBuf,
    pub models: PathBuf,
    pub out: PathBuf,
    pub confidence: Option<PathBuf>,
}

pub fn segment(opts: &SegmentOptions) -> Result<Fused> {
    let index = ModelIndex::load(&opts.models)?;
    let geo = GeometryFile::load(&index.geometry)?;
    geo.expect_hash(&index.geometry_hash)?;
    let prepared = PreparedManifest::load(&index.manifest)?;
    let test = prepared.find_test(&opts.image)?;
    let mut models = BTreeMap::new();
    for roi in 1..=prepared.roi_count {
        models.insert(roi, index.load_members(&opts.models, roi)?);
    }
    let grid = PreparedGrid::load(&prepared, VolumeKind::Test, test)?;
    let search = SearchConfig {
        k: index.k,
        radius: None,
        stride: index.search_stride,
    };
    let key = volume_key(VolumeKind::Test, test);
    let (fused, _) = segment_grid(&grid.image, &grid.atlas_refs(), &geo, &key, &models, &search)?;
    save_volume(&fused.labels, &opts.out)?;
    if let Some(c) = &opts.confidence {
        save_rvol(&(&fused.confidence).into(), c)?;
    }
    Ok(fused)
}

pub fn evaluate_files(pred: &Path, truth: &Path, rois: &[u16], out: Option<&Path>) -> Result<EvaluationReport> {
    let report = evaluate(&load_volume(pred)?, &load_volume(truth)?, rois)?;
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    Ok(report)
}

/// A prepared manifest path next to `out`, as `prep` writes it.
pub fn prepared_manifest_path(out: &Path) -> PathBuf {
    out.join(PREPARED_MANIFEST)
}
