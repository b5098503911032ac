//! Adaptive per-ROI patch geometry.
//!
//! For every target grid, the ROI voxels of all warped template labels are
//! unioned, dilated with a cubic structuring element, and boxed. The patch
//! size of an ROI is the per-axis maximum of those boxes over all targets;
//! the patch center on any grid is the center of that grid's box.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{coords_of, linear_index, voxel_count, Dims, Volume};

pub const DEFAULT_DILATION_RADIUS: usize = 3;
pub const DEFAULT_TRAINING_PATCHES: usize = 1000;

/// Voxel coordinate `(x, y, z)` inside a grid.
pub type Point = [usize; 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(dims: Dims) -> Self {
        BinaryMask {
            dims,
            bits: vec![false; voxel_count(dims)],
        }
    }

    pub fn from_bits(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != voxel_count(dims) {
            return Err(Error::DimsMismatch(format!(
                "{} bits for dims {dims:?}",
                bits.len()
            )));
        }
        Ok(BinaryMask { dims, bits })
    }

    /// Voxels of `labels` equal to `roi`.
    pub fn from_label(labels: &Volume, roi: u16) -> Result<Self> {
        let bits = labels.as_labels()?.iter().map(|&l| l == roi).collect();
        Ok(BinaryMask {
            dims: labels.dims(),
            bits,
        })
    }

    /// Voxels of `labels` with any non-zero label.
    pub fn foreground(labels: &Volume) -> Result<Self> {
        let bits = labels.as_labels()?.iter().map(|&l| l != 0).collect();
        Ok(BinaryMask {
            dims: labels.dims(),
            bits,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[linear_index(self.dims, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = linear_index(self.dims, x, y, z);
        self.bits[i] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| coords_of(self.dims, i))
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Axis-aligned box given by its min corner and size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cuboid {
    pub min: Point,
    pub size: [usize; 3],
}

impl Cuboid {
    pub fn max(&self) -> Point {
        [
            self.min[0] + self.size[0] - 1,
            self.min[1] + self.size[1] - 1,
            self.min[2] + self.size[2] - 1,
        ]
    }

    /// Floor of the continuous midpoint, i.e. `min + size / 2`. This puts the
    /// center at patch index `size / 2`, the same convention as
    /// [`extract_patch`].
    pub fn center(&self) -> Point {
        [
            self.min[0] + self.size[0] / 2,
            self.min[1] + self.size[1] / 2,
            self.min[2] + self.size[2] / 2,
        ]
    }

    pub fn contains(&self, p: Point) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.min[a] + self.size[a])
    }
}

/// Per-ROI patch size with the patch center on each named grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PatchGeometry {
    pub roi: u16,
    pub size: [usize; 3],
    pub centers: BTreeMap<String, Point>,
}

/// Union over volumes of the voxels labeled `roi`.
pub fn roi_union(labels: &[&Volume], roi: u16) -> Result<BinaryMask> {
    let first = labels
        .first()
        .ok_or_else(|| Error::EmptyInput("roi_union needs at least one label volume".into()))?;
    let dims = first.dims();
    let mut mask = BinaryMask::empty(dims);
    for v in labels {
        if v.dims() != dims {
            return Err(Error::DimsMismatch(format!(
                "label volume {:?} vs {dims:?}",
                v.dims()
            )));
        }
        for (bit, &l) in mask.bits.iter_mut().zip(v.as_labels()?) {
            *bit |= l == roi;
        }
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask(roi));
    }
    Ok(mask)
}

/// One-axis running OR over a window of `2 * radius + 1`, clipped at the grid.
fn dilate_axis(bits: &[bool], dims: Dims, axis: usize, radius: usize) -> Vec<bool> {
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let len = dims[axis];
    let mut out = vec![false; bits.len()];
    for (start, _) in bits.iter().enumerate() {
        if (start / stride) % len != 0 {
            continue;
        }
        // `start` is the first voxel of a line along `axis`.
        let mut last_set: Option<usize> = None;
        let mut next_set = vec![usize::MAX; len];
        let mut upcoming = usize::MAX;
        for i in (0..len).rev() {
            if bits[start + i * stride] {
                upcoming = i;
            }
            next_set[i] = upcoming;
        }
        for i in 0..len {
            if bits[start + i * stride] {
                last_set = Some(i);
            }
            let behind = last_set.is_some_and(|j| i - j <= radius);
            let ahead = next_set[i] != usize::MAX && next_set[i] - i <= radius;
            out[start + i * stride] = behind || ahead;
        }
    }
    out
}

/// Chebyshev-ball dilation: a voxel is set iff some set voxel lies within
/// `radius` along every axis.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let mut bits = mask.bits.clone();
    for axis in 0..3 {
        bits = dilate_axis(&bits, mask.dims, axis, radius);
    }
    BinaryMask {
        dims: mask.dims,
        bits,
    }
}

/// Tightest box holding every set voxel.
pub fn bounding_cuboid(mask: &BinaryMask) -> Result<Cuboid> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for p in mask.points() {
        any = true;
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if !any {
        return Err(Error::EmptyInput("bounding_cuboid of an empty mask".into()));
    }
    Ok(Cuboid {
        min: lo,
        size: [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1],
    })
}

/// Box of the dilated ROI union on one grid.
pub fn roi_cuboid(transformed_labels: &[&Volume], roi: u16, dilation_radius: usize) -> Result<Cuboid> {
    let union = roi_union(transformed_labels, roi)?;
    bounding_cuboid(&dilate(&union, dilation_radius))
}

/// Per-axis maximum of the per-target box sizes.
pub fn roi_patch_size(cuboids: &[Cuboid]) -> Result<[usize; 3]> {
    if cuboids.is_empty() {
        return Err(Error::EmptyInput("roi_patch_size needs at least one cuboid".into()));
    }
    let mut size = [0usize; 3];
    for c in cuboids {
        for a in 0..3 {
            size[a] = size[a].max(c.size[a]);
        }
    }
    Ok(size)
}

pub fn roi_patch_center(
    transformed_labels: &[&Volume],
    roi: u16,
    dilation_radius: usize,
) -> Result<Point> {
    Ok(roi_cuboid(transformed_labels, roi, dilation_radius)?.center())
}

/// Which of the three training-center pools a center was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterPool {
    Interior,
    Boundary,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledCenter {
    pub pool: CenterPool,
    pub center: Point,
}

/// Grid step of the regular sampling pool: `ceil(R / 10)` per axis.
pub fn grid_step(patch_size: [usize; 3]) -> [usize; 3] {
    patch_size.map(|r| r.div_ceil(10).max(1))
}

/// Pool sizes for `count` centers: 30% boundary, 30% grid, the rest interior.
pub fn pool_split(count: usize) -> (usize, usize, usize) {
    let boundary = count * 3 / 10;
    let grid = count * 3 / 10;
    (count - boundary - grid, boundary, grid)
}

/// ROI voxels with at least one in-grid 6-neighbor carrying a different label.
pub fn is_boundary(labels: &[u16], dims: Dims, p: Point, roi: u16) -> bool {
    const NEIGHBORS: [[i64; 3]; 6] = [
        [-1, 0, 0],
        [1, 0, 0],
        [0, -1, 0],
        [0, 1, 0],
        [0, 0, -1],
        [0, 0, 1],
    ];
    NEIGHBORS.iter().any(|d| {
        let q = [p[0] as i64 + d[0], p[1] as i64 + d[1], p[2] as i64 + d[2]];
        crate::volume::checked_index(dims, q).is_some_and(|i| labels[i] != roi)
    })
}

fn draw<R: Rng + ?Sized>(pool: &[Point], n: usize, rng: &mut R) -> Vec<Point> {
    if pool.len() >= n {
        pool.choose_multiple(rng, n).copied().collect()
    } else {
        (0..n)
            .map(|_| *pool.choose(rng).expect("non-empty pool"))
            .collect()
    }
}

/// Draws `count` training-patch centers from one target label volume.
///
/// Interior and boundary pools fall back to every ROI voxel when the ROI is
/// too thin to have non-boundary (or boundary) voxels.
pub fn sample_training_centers<R: Rng + ?Sized>(
    target_label: &Volume,
    roi: u16,
    patch_size: [usize; 3],
    count: usize,
    dilation_radius: usize,
    rng: &mut R,
) -> Result<Vec<SampledCenter>> {
    if count < 3 {
        return Err(Error::InvalidParameter(format!(
            "need at least 3 training centers, got {count}"
        )));
    }
    let dims = target_label.dims();
    let labels = target_label.as_labels()?;
    let roi_mask = BinaryMask::from_label(target_label, roi)?;
    if roi_mask.is_empty() {
        return Err(Error::EmptyMask(roi));
    }

    let mut interior = Vec::new();
    let mut boundary = Vec::new();
    for p in roi_mask.points() {
        if is_boundary(labels, dims, p, roi) {
            boundary.push(p);
        } else {
            interior.push(p);
        }
    }
    let all_roi: Vec<Point> = roi_mask.points().collect();
    if interior.is_empty() {
        interior = all_roi.clone();
    }
    if boundary.is_empty() {
        boundary = all_roi;
    }

    let bbox = bounding_cuboid(&dilate(&roi_mask, dilation_radius))?;
    let step = grid_step(patch_size);
    let mut grid = Vec::new();
    for z in (bbox.min[2]..=bbox.max()[2]).step_by(step[2]) {
        for y in (bbox.min[1]..=bbox.max()[1]).step_by(step[1]) {
            for x in (bbox.min[0]..=bbox.max()[0]).step_by(step[0]) {
                grid.push([x, y, z]);
            }
        }
    }

    let (n_interior, n_boundary, n_grid) = pool_split(count);
    let mut out = Vec::with_capacity(count);
    for (pool, points, n) in [
        (CenterPool::Interior, &interior, n_interior),
        (CenterPool::Boundary, &boundary, n_boundary),
        (CenterPool::Grid, &grid, n_grid),
    ] {
        let mut drawn = draw(points, n, rng);
        drawn.shuffle(rng);
        out.extend(drawn.into_iter().map(|center| SampledCenter { pool, center }));
    }
    Ok(out)
}

/// Dense 3D sub-array, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: [usize; 3],
    pub data: Vec<f32>,
}

impl Patch {
    pub fn zeros(size: [usize; 3]) -> Self {
        Patch {
            size,
            data: vec![0.0; voxel_count(size)],
        }
    }

    /// Grid coordinate of patch voxel `(0, 0, 0)` when centered at `center`.
    pub fn origin(center: Point, size: [usize; 3]) -> [i64; 3] {
        [
            center[0] as i64 - (size[0] / 2) as i64,
            center[1] as i64 - (size[1] / 2) as i64,
            center[2] as i64 - (size[2] / 2) as i64,
        ]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `patch[u] = volume[center - size/2 + u]`, zero outside the grid.
pub fn extract_patch(volume: &Volume, center: Point, size: [usize; 3]) -> Patch {
    let origin = Patch::origin(center, size);
    extract_at_origin(volume, origin, size)
}

pub(crate) fn extract_at_origin(volume: &Volume, origin: [i64; 3], size: [usize; 3]) -> Patch {
    let mut patch = Patch::zeros(size);
    let dims = volume.dims();
    let mut i = 0;
    for z in 0..size[2] {
        let gz = origin[2] + z as i64;
        for y in 0..size[1] {
            let gy = origin[1] + y as i64;
            let row_in = gz >= 0 && gz < dims[2] as i64 && gy >= 0 && gy < dims[1] as i64;
            for x in 0..size[0] {
                let gx = origin[0] + x as i64;
                if row_in && gx >= 0 && gx < dims[0] as i64 {
                    let j = linear_index(dims, gx as usize, gy as usize, gz as usize);
                    patch.data[i] = match volume.data() {
                        crate::volume::VoxelData::Float32(v) => v[j],
                        crate::volume::VoxelData::Label16(v) => v[j] as f32,
                    };
                }
                i += 1;
            }
        }
    }
    patch
}

/// Patch of `labels == roi` indicators.
pub fn extract_binary_patch(labels: &Volume, roi: u16, center: Point, size: [usize; 3]) -> Result<Patch> {
    let raw = extract_patch(labels, center, size);
    labels.as_labels()?;
    let data = raw
        .data
        .iter()
        .map(|&l| if l == roi as f32 { 1.0 } else { 0.0 })
        .collect();
    Ok(Patch { size, data })
}
