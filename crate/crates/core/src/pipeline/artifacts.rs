use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CenterPool, Patch, PatchGeometry, Point};
use crate::io_util::{read_json, write_atomic, write_json};
use crate::patchsearch::{SampleInput, TrainingSample};
use crate::sfcn::{EpochRecord, Sfcn, SfcnSpec};
use crate::volume::{encode_rvol, load_rvol, RvolRecord, VoxelData};

/// Per-ROI patch sizes and centers, stamped with a hash of its content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GeometryFile {
    pub dilation: usize,
    pub rois: Vec<PatchGeometry>,
    pub hash: String,
}

#[derive(Serialize)]
struct HashedGeometry<'a> {
    dilation: usize,
    rois: &'a [PatchGeometry],
}

impl GeometryFile {
    pub fn new(dilation: usize, rois: Vec<PatchGeometry>) -> Self {
        let hash = Self::content_hash(dilation, &rois);
        GeometryFile { dilation, rois, hash }
    }

    fn content_hash(dilation: usize, rois: &[PatchGeometry]) -> String {
        let bytes = serde_json::to_vec(&HashedGeometry { dilation, rois })
            .expect("geometry serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Loads and checks the stored hash against the content.
    pub fn load(path: &Path) -> Result<Self> {
        let g: GeometryFile = read_json(path)?;
        let expected = Self::content_hash(g.dilation, &g.rois);
        if g.hash != expected {
            return Err(Error::GeometryMismatch {
                expected,
                found: g.hash,
            });
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn roi(&self, roi: u16) -> Result<&PatchGeometry> {
        self.rois
            .iter()
            .find(|g| g.roi == roi)
            .ok_or_else(|| Error::Manifest(format!("geometry has no ROI {roi}")))
    }

    pub fn center(&self, roi: u16, key: &str) -> Result<Point> {
        self.roi(roi)?
            .centers
            .get(key)
            .copied()
            .ok_or_else(|| Error::Manifest(format!("geometry has no center for ROI {roi} on {key}")))
    }

    pub fn expect_hash(&self, hash: &str) -> Result<()> {
        if self.hash == hash {
            Ok(())
        } else {
            Err(Error::GeometryMismatch {
                expected: hash.to_string(),
                found: self.hash.clone(),
            })
        }
    }
}

/// One training sample as a `2K + 2` channel RVOL: target image, K atlas
/// images, K atlas labels, ground truth.
pub fn encode_sample(sample: &TrainingSample) -> Result<Vec<u8>> {
    let input = &sample.input;
    let mut channels: Vec<&Patch> = vec![&input.x];
    channels.extend(&input.atlas_images);
    channels.extend(&input.atlas_labels);
    channels.push(&sample.y);
    let size = input.x.size;
    if channels.iter().any(|p| p.size != size) || input.atlas_images.len() != input.atlas_labels.len() {
        return Err(Error::ShapeMismatch("sample patches differ in size or count".into()));
    }
    let c = u8::try_from(channels.len())
        .map_err(|_| Error::InvalidParameter(format!("{} sample channels", channels.len())))?;
    let n = input.x.len();
    let mut data = Vec::with_capacity(n * channels.len());
    for v in 0..n {
        data.extend(channels.iter().map(|p| p.data[v]));
    }
    encode_rvol(&RvolRecord {
        dims: size,
        channels: c,
        data: VoxelData::Float32(data),
    })
}

pub fn decode_sample(record: &RvolRecord) -> Result<TrainingSample> {
    let c = record.channels as usize;
    if c < 4 || !c.is_multiple_of(2) {
        return Err(Error::InvalidVolume(format!("{c} channels is not a training sample")));
    }
    let VoxelData::Float32(data) = &record.data else {
        return Err(Error::DtypeMismatch("training samples are float32".into()));
    };
    let k = (c - 2) / 2;
    let size = record.dims;
    let channel = |ch: usize| Patch {
        size,
        data: data.iter().skip(ch).step_by(c).copied().collect(),
    };
    Ok(TrainingSample {
        input: SampleInput {
            x: channel(0),
            atlas_images: (1..=k).map(channel).collect(),
            atlas_labels: (k + 1..=2 * k).map(channel).collect(),
        },
        y: channel(c - 1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SampleEntry {
    /// Relative to the index.
    pub file: PathBuf,
    pub target: usize,
    pub center: Point,
    pub pool: CenterPool,
    pub split: Split,
}

/// `index.json` of one ROI's sample directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SampleIndex {
    pub roi: u16,
    pub k: usize,
    pub patch_size: [usize; 3],
    pub search_stride: usize,
    pub seed: u64,
    pub manifest: PathBuf,
    pub geometry: PathBuf,
    pub geometry_hash: String,
    pub samples: Vec<SampleEntry>,
}

pub const SAMPLE_INDEX: &str = "index.json";

pub fn sample_dir(root: &Path, roi: u16) -> PathBuf {
    root.join(format!("roi{roi}"))
}

impl SampleIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(SAMPLE_INDEX))
    }

    /// Reads and checks every sample of one split.
    pub fn read_split(&self, dir: &Path, split: Split) -> Result<Vec<TrainingSample>> {
        self.samples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let path = dir.join(&e.file);
                let s = decode_sample(&load_rvol(&path)?)?;
                if s.input.k() != self.k || s.input.patch_size() != self.patch_size {
                    return Err(Error::ShapeMismatch(format!(
                        "{} does not match its index",
                        path.display()
                    )));
                }
                Ok(s)
            })
            .collect()
    }
}

pub const MODEL_MAGIC: [u8; 6] = *b"RPAR1\0";

/// JSON header of a model blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelHeader {
    pub roi: u16,
    pub member: usize,
    pub seed: u64,
    pub spec: SfcnSpec,
    pub geometry_hash: String,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub state_len: usize,
}

/// Magic, u32 LE header length, JSON header, then the state vector as f64 LE.
pub fn encode_model(header: &ModelHeader, network: &Sfcn) -> Result<Vec<u8>> {
    let state = network.state_vector();
    if state.len() != header.state_len || network.spec() != &header.spec {
        return Err(Error::InvalidParameter("model header does not describe the network".into()));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::json("model header", e))?;
    let len = u32::try_from(json.len())
        .map_err(|_| Error::InvalidParameter("model header too large".into()))?;
    let mut out = Vec::with_capacity(10 + json.len() + 8 * state.len());
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in state {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<(ModelHeader, Sfcn)> {
    let truncated = |expected: usize| Error::Truncated {
        expected,
        found: bytes.len(),
    };
    let magic: [u8; 6] = bytes.get(..6).ok_or(truncated(6))?.try_into().expect("6 bytes");
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let len_bytes: [u8; 4] = bytes.get(6..10).ok_or(truncated(10))?.try_into().expect("4 bytes");
    let len = u32::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(10..10 + len).ok_or(truncated(10 + len))?;
    let header: ModelHeader = serde_json::from_slice(json).map_err(|e| Error::json("model header", e))?;
    let payload = &bytes[10 + len..];
    let expected = 8 * header.state_len;
    if payload.len() < expected {
        return Err(truncated(10 + len + expected));
    }
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let state: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    // Initialization is overwritten, so any seed will do.
    let mut network = Sfcn::new(header.spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    network.load_state_vector(&state)?;
    Ok((header, network))
}

pub fn save_model(path: &Path, header: &ModelHeader, network: &Sfcn) -> Result<()> {
    write_atomic(path, &encode_model(header, network)?)
}

pub fn load_model(path: &Path) -> Result<(ModelHeader, Sfcn)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MemberEntry {
    /// Relative to the index.
    pub file: PathBuf,
    pub seed: u64,
    pub width_multiplier: f64,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

/// `index.json` of a model directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelIndex {
    pub manifest: PathBuf,
    pub geometry: PathBuf,
    pub geometry_hash: String,
    pub k: usize,
    pub search_stride: usize,
    pub rois: BTreeMap<u16, Vec<MemberEntry>>,
}

pub const MODEL_INDEX: &str = "index.json";

impl ModelIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_INDEX);
        if !path.exists() {
            return Err(Error::MissingModel(format!("no model index in {}", dir.display())));
        }
        read_json(&path)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MODEL_INDEX), self)
    }

    /// Loads every member of `roi`, checking each against the index.
    pub fn load_members(&self, dir: &Path, roi: u16) -> Result<Vec<Sfcn>> {
        let entries = self
            .rois
            .get(&roi)
            .filter(|e| !e.is_empty())
            .ok_or_else(|| Error::MissingModel(format!("no trained members for ROI {roi}")))?;
        entries
            .iter()
            .map(|e| {
                let path = dir.join(&e.file);
                if !path.exists() {
                    return Err(Error::MissingModel(path.display().to_string()));
                }
                let (header, net) = load_model(&path)?;
                if header.geometry_hash != self.geometry_hash {
                    return Err(Error::GeometryMismatch {
                        expected: self.geometry_hash.clone(),
                        found: header.geometry_hash,
                    });
                }
                if header.roi != roi || header.spec.k != self.k {
                    return Err(Error::Manifest(format!("{} is not a ROI {roi} model", path.display())));
                }
                Ok(net)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::decode_rvol;
    use rand::Rng;

    fn random_sample(k: usize, size: [usize; 3], seed: u64) -> TrainingSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = size.iter().product();
        let mut p = || Patch {
            size,
            data: (0..n).map(|_| rng.random_range(-5.0f32..5.0)).collect(),
        };
        TrainingSample {
            input: SampleInput {
                x: p(),
                atlas_images: (0..k).map(|_| p()).collect(),
                atlas_labels: (0..k).map(|_| p()).collect(),
            },
            y: p(),
        }
    }

    #[test]
    fn sample_round_trip() {
        let s = random_sample(3, [4, 5, 6], 1);
        let bytes = encode_sample(&s).unwrap();
        let back = decode_sample(&decode_rvol(&bytes).unwrap()).unwrap();
        assert_eq!(back, s);
        let one = random_sample(1, [2, 2, 2], 2);
        assert_eq!(decode_sample(&decode_rvol(&encode_sample(&one).unwrap()).unwrap()).unwrap(), one);
    }

    #[test]
    fn geometry_hash_detects_edits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("geo.json");
        let g = GeometryFile::new(
            3,
            vec![PatchGeometry {
                roi: 1,
                size: [9, 9, 9],
                centers: [("target:0".to_string(), [4, 4, 4])].into_iter().collect(),
            }],
        );
        g.save(&path).unwrap();
        assert_eq!(GeometryFile::load(&path).unwrap(), g);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"dilation\": 3", "\"dilation\": 2");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(GeometryFile::load(&path), Err(Error::GeometryMismatch { .. })));
        assert_ne!(GeometryFile::new(2, g.rois.clone()).hash, g.hash);
    }

    #[test]
    fn model_round_trip() {
        let spec = SfcnSpec::new(1, [8, 8, 8]).with_width(1.0 / 16.0);
        let net = Sfcn::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let header = ModelHeader {
            roi: 2,
            member: 0,
            seed: 3,
            spec,
            geometry_hash: "ab".into(),
            best_epoch: 1,
            stopped_epoch: 2,
            history: vec![],
            state_len: net.state_len(),
        };
        let bytes = encode_model(&header, &net).unwrap();
        let (h, back) = decode_model(&bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(back.state_vector(), net.state_vector());
        assert_eq!(encode_model(&h, &back).unwrap(), bytes);
        assert!(matches!(decode_model(&bytes[..bytes.len() - 8]), Err(Error::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_model(&extra), Err(Error::SizeMismatch { .. })));
        assert!(matches!(decode_model(b"RVOL1\0xxxx"), Err(Error::BadMagic(_))));
    }

    #[test]
    fn missing_index_is_missing_model() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ModelIndex::load(dir.path()), Err(Error::MissingModel(_))));
    }
}
