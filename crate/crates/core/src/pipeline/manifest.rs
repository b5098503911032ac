use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_json, write_json};

/// An image with its label volume. Relative paths are relative to the
/// manifest that lists them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub image: PathBuf,
    pub label: PathBuf,
}

/// A test image; the label is only needed for evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Target,
    Test,
}

impl VolumeKind {
    pub fn name(self) -> &'static str {
        match self {
            VolumeKind::Target => "target",
            VolumeKind::Test => "test",
        }
    }
}

/// Key of a target or test grid in geometry files, e.g. `target:0`.
pub fn volume_key(kind: VolumeKind, index: usize) -> String {
    format!("{}:{index}", kind.name())
}

/// `"identity"` or the path of a displacement-field RVOL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldRef {
    Identity,
    Path(PathBuf),
}

impl Serialize for FieldRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            FieldRef::Identity => s.serialize_str("identity"),
            FieldRef::Path(p) => p.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for FieldRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == "identity" {
            FieldRef::Identity
        } else {
            FieldRef::Path(s.into())
        })
    }
}

/// Warp of template `template` onto target or test `index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformEntry {
    pub template: usize,
    pub kind: VolumeKind,
    pub index: usize,
    pub field: FieldRef,
}

/// The raw dataset description `prep` consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Manifest {
    pub roi_count: u16,
    pub templates: Vec<AtlasEntry>,
    pub targets: Vec<AtlasEntry>,
    pub tests: Vec<TestEntry>,
    pub transforms: Vec<TransformEntry>,
}

pub(crate) fn base_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Manifest {
    /// Reads and validates a manifest, resolving relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Manifest = read_json(path)?;
        let base = base_dir(path);
        for e in m.templates.iter_mut().chain(m.targets.iter_mut()) {
            resolve(&base, &mut e.image);
            resolve(&base, &mut e.label);
        }
        for e in &mut m.tests {
            resolve(&base, &mut e.image);
            if let Some(l) = &mut e.label {
                resolve(&base, l);
            }
        }
        for t in &mut m.transforms {
            if let FieldRef::Path(p) = &mut t.field {
                resolve(&base, p);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_json(path, self)
    }

    pub fn count(&self, kind: VolumeKind) -> usize {
        match kind {
            VolumeKind::Target => self.targets.len(),
            VolumeKind::Test => self.tests.len(),
        }
    }

    /// Exactly one transform per (template, target) and (template, test).
    pub fn validate(&self) -> Result<()> {
        if self.roi_count == 0 {
            return Err(Error::Manifest("roiCount must be at least 1".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Manifest("no templates".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Manifest("no targets".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.transforms {
            if t.template >= self.templates.len() || t.index >= self.count(t.kind) {
                return Err(Error::Manifest(format!(
                    "transform of template {} onto {} does not name listed volumes",
                    t.template,
                    volume_key(t.kind, t.index)
                )));
            }
            if !seen.insert((t.template, t.kind, t.index)) {
                return Err(Error::Manifest(format!(
                    "template {} has two transforms onto {}",
                    t.template,
                    volume_key(t.kind, t.index)
                )));
            }
        }
        for template in 0..self.templates.len() {
            for kind in [VolumeKind::Target, VolumeKind::Test] {
                for index in 0..self.count(kind) {
                    if !seen.contains(&(template, kind, index)) {
                        return Err(Error::Manifest(format!(
                            "missing transform of template {template} onto {}",
                            volume_key(kind, index)
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A histogram-matched target or test volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedVolume {
    /// The image as listed in the raw manifest.
    pub source: PathBuf,
    /// The intensity-normalized image.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

/// A template resampled onto a target or test grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpedEntry {
    pub template: usize,
    pub kind: VolumeKind,
    pub index: usize,
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Output of `prep`; every later stage reads this.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PreparedManifest {
    pub roi_count: u16,
    /// Template whose histogram the other images were matched to.
    pub reference: usize,
    pub template_count: usize,
    pub targets: Vec<PreparedVolume>,
    pub tests: Vec<PreparedVolume>,
    pub warped: Vec<WarpedEntry>,
}

impl PreparedManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: PreparedManifest = read_json(path)?;
        let base = base_dir(path);
        for v in m.targets.iter_mut().chain(m.tests.iter_mut()) {
            resolve(&base, &mut v.source);
            resolve(&base, &mut v.image);
            if let Some(l) = &mut v.label {
                resolve(&base, l);
            }
        }
        for w in &mut m.warped {
            resolve(&base, &mut w.image);
            resolve(&base, &mut w.label);
        }
        if m.targets.iter().any(|t| t.label.is_none()) {
            return Err(Error::Manifest("every target needs a label".into()));
        }
        m.warped.sort_by_key(|w| (w.kind, w.index, w.template));
        for kind in [VolumeKind::Target, VolumeKind::Test] {
            for index in 0..m.count(kind) {
                m.warped_onto(kind, index)?;
            }
        }
        Ok(m)
    }

    pub fn count(&self, kind: VolumeKind) -> usize {
        match kind {
            VolumeKind::Target => self.targets.len(),
            VolumeKind::Test => self.tests.len(),
        }
    }

    pub fn volume(&self, kind: VolumeKind, index: usize) -> Result<&PreparedVolume> {
        let list = match kind {
            VolumeKind::Target => &self.targets,
            VolumeKind::Test => &self.tests,
        };
        list.get(index)
            .ok_or_else(|| Error::Manifest(format!("no {}", volume_key(kind, index))))
    }

    /// Warped templates on one grid, in template order.
    pub fn warped_onto(&self, kind: VolumeKind, index: usize) -> Result<Vec<&WarpedEntry>> {
        let found: Vec<&WarpedEntry> = self
            .warped
            .iter()
            .filter(|w| w.kind == kind && w.index == index)
            .collect();
        let complete = found.len() == self.template_count
            && found.iter().enumerate().all(|(i, w)| w.template == i);
        if !complete {
            return Err(Error::Manifest(format!(
                "warped templates onto {} are incomplete",
                volume_key(kind, index)
            )));
        }
        Ok(found)
    }

    /// The test whose raw or prepared image is `image`.
    pub fn find_test(&self, image: &Path) -> Result<usize> {
        let wanted = canonical(image)?;
        for (i, t) in self.tests.iter().enumerate() {
            for p in [&t.source, &t.image] {
                if canonical(p).map(|c| c == wanted).unwrap_or(false) {
                    return Ok(i);
                }
            }
        }
        Err(Error::Manifest(format!(
            "{} is not a test volume of the prepared manifest",
            image.display()
        )))
    }
}

pub(crate) fn canonical(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p, e))
}
