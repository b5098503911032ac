//! Volumetric grids, the RVOL file format, histogram matching and
//! application of precomputed displacement fields.
//!
//! All grids are stored x-fastest: voxel `(x, y, z)` lives at
//! `x + dx * (y + dy * z)`.

mod histogram;
mod rvol;
mod transform;

pub use histogram::{histogram_match, HISTOGRAM_BINS};
pub use rvol::{
    decode_rvol, encode_rvol, load_field, load_rvol, load_volume, save_field, save_rvol,
    save_volume, RvolRecord, RVOL_HEADER_LEN, RVOL_MAGIC,
};
pub use transform::{apply_transform, apply_transform_to_grid, Interpolation, Transform};

use crate::error::{Error, Result};

/// Grid extent `(dx, dy, dz)` in voxels.
pub type Dims = [usize; 3];

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// Inverse of [`linear_index`].
#[inline]
pub fn coords_of(dims: Dims, index: usize) -> [usize; 3] {
    let x = index % dims[0];
    let y = (index / dims[0]) % dims[1];
    let z = index / (dims[0] * dims[1]);
    [x, y, z]
}

/// Returns the linear index of a signed coordinate, or `None` outside the grid.
#[inline]
pub fn checked_index(dims: Dims, p: [i64; 3]) -> Option<usize> {
    if p.iter().zip(dims.iter()).any(|(&c, &d)| c < 0 || c >= d as i64) {
        return None;
    }
    Some(linear_index(dims, p[0] as usize, p[1] as usize, p[2] as usize))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    Label16,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::Float32 => 0,
            Dtype::Label16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::Float32),
            1 => Some(Dtype::Label16),
            _ => None,
        }
    }

    pub fn scalar_bytes(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Label16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    Float32(Vec<f32>),
    Label16(Vec<u16>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::Float32(v) => v.len(),
            VoxelData::Label16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VoxelData::Float32(_) => Dtype::Float32,
            VoxelData::Label16(_) => Dtype::Label16,
        }
    }
}

/// A single-channel 3D scalar grid holding either intensities or labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: VoxelData,
    /// Voxel spacing in millimeters. Informational only; not persisted.
    pub spacing: Option<[f32; 3]>,
}

impl Volume {
    pub fn new(dims: Dims, data: VoxelData) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("zero-voxel dims {dims:?}")));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if let VoxelData::Float32(v) = &data {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidVolume("non-finite intensity".into()));
            }
        }
        Ok(Volume {
            dims,
            data,
            spacing: None,
        })
    }

    pub fn from_f32(dims: Dims, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, VoxelData::Float32(data))
    }

    pub fn from_labels(dims: Dims, data: Vec<u16>) -> Result<Self> {
        Self::new(dims, VoxelData::Label16(data))
    }

    pub fn zeros(dims: Dims, dtype: Dtype) -> Result<Self> {
        let n = voxel_count(dims);
        match dtype {
            Dtype::Float32 => Self::from_f32(dims, vec![0.0; n]),
            Dtype::Label16 => Self::from_labels(dims, vec![0; n]),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            VoxelData::Float32(v) => Ok(v),
            VoxelData::Label16(_) => Err(Error::DtypeMismatch("expected float32 volume".into())),
        }
    }

    pub fn as_labels(&self) -> Result<&[u16]> {
        match &self.data {
            VoxelData::Label16(v) => Ok(v),
            VoxelData::Float32(_) => Err(Error::DtypeMismatch("expected label16 volume".into())),
        }
    }

    /// Voxel value widened to `f64`, or 0 outside the grid.
    #[inline]
    pub fn value_or_zero(&self, p: [i64; 3]) -> f64 {
        match checked_index(self.dims, p) {
            None => 0.0,
            Some(i) => match &self.data {
                VoxelData::Float32(v) => v[i] as f64,
                VoxelData::Label16(v) => v[i] as f64,
            },
        }
    }

    /// Sorted distinct labels, including 0 if present.
    pub fn label_set(&self) -> Result<Vec<u16>> {
        let mut labels = self.as_labels()?.to_vec();
        labels.sort_unstable();
        labels.dedup();
        Ok(labels)
    }
}

/// Per-voxel displacement in voxel units on the fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    /// Component-interleaved `(ux, uy, uz)` per voxel, x-fastest.
    vectors: Vec<f32>,
}

impl DisplacementField {
    pub fn new(dims: Dims, vectors: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("zero-voxel dims {dims:?}")));
        }
        if vectors.len() != 3 * voxel_count(dims) {
            return Err(Error::InvalidVolume(format!(
                "displacement length {} does not match 3 x dims {dims:?}",
                vectors.len()
            )));
        }
        Ok(DisplacementField { dims, vectors })
    }

    /// A constant translation over the whole grid.
    pub fn translation(dims: Dims, shift: [f32; 3]) -> Result<Self> {
        let n = voxel_count(dims);
        let mut vectors = Vec::with_capacity(3 * n);
        for _ in 0..n {
            vectors.extend_from_slice(&shift);
        }
        Self::new(dims, vectors)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    #[inline]
    pub fn at(&self, index: usize) -> [f32; 3] {
        let v = &self.vectors[3 * index..3 * index + 3];
        [v[0], v[1], v[2]]
    }
}
