use super::{coords_of, voxel_count, DisplacementField, Dtype, Volume, VoxelData};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

impl Interpolation {
    /// Nearest for labels, trilinear for intensities.
    pub fn for_dtype(dtype: Dtype) -> Self {
        match dtype {
            Dtype::Float32 => Interpolation::Trilinear,
            Dtype::Label16 => Interpolation::Nearest,
        }
    }
}

/// A spatial mapping from the fixed grid into a moving volume.
#[derive(Debug, Clone, Copy)]
pub enum Transform<'a> {
    Identity,
    Field(&'a DisplacementField),
}

/// Resamples `volume` onto the fixed grid: `out[v] = volume(v + field[v])`.
///
/// Samples falling outside the moving grid read as 0. With trilinear
/// interpolation each out-of-grid corner contributes 0.
pub fn apply_transform(
    volume: &Volume,
    transform: Transform<'_>,
    interpolation: Interpolation,
) -> Result<Volume> {
    match (volume.dtype(), interpolation) {
        (Dtype::Label16, Interpolation::Trilinear) => {
            return Err(Error::InvalidParameter(
                "label volumes must use nearest interpolation".into(),
            ))
        }
        (Dtype::Float32, Interpolation::Nearest) => {
            return Err(Error::InvalidParameter(
                "intensity volumes must use trilinear interpolation".into(),
            ))
        }
        _ => {}
    }
    let field = match transform {
        Transform::Identity => return Ok(volume.clone()),
        Transform::Field(f) => f,
    };
    let out_dims = field.dims();
    let n = voxel_count(out_dims);
    let sample_point = |i: usize| -> [f64; 3] {
        let c = coords_of(out_dims, i);
        let d = field.at(i);
        [
            c[0] as f64 + d[0] as f64,
            c[1] as f64 + d[1] as f64,
            c[2] as f64 + d[2] as f64,
        ]
    };
    let data = match volume.data() {
        VoxelData::Label16(labels) => {
            let mut out = vec![0u16; n];
            for (i, o) in out.iter_mut().enumerate() {
                let p = sample_point(i);
                let q = [
                    (p[0] + 0.5).floor() as i64,
                    (p[1] + 0.5).floor() as i64,
                    (p[2] + 0.5).floor() as i64,
                ];
                if let Some(j) = super::checked_index(volume.dims(), q) {
                    *o = labels[j];
                }
            }
            VoxelData::Label16(out)
        }
        VoxelData::Float32(_) => {
            let mut out = vec![0f32; n];
            for (i, o) in out.iter_mut().enumerate() {
                *o = trilinear(volume, sample_point(i)) as f32;
            }
            VoxelData::Float32(out)
        }
    };
    let mut warped = Volume::new(out_dims, data)?;
    warped.spacing = volume.spacing;
    Ok(warped)
}

/// [`apply_transform`] with an explicit fixed grid that the field (or, for the
/// identity, the volume itself) must match.
pub fn apply_transform_to_grid(
    volume: &Volume,
    transform: Transform<'_>,
    interpolation: Interpolation,
    grid: super::Dims,
) -> Result<Volume> {
    let source_grid = match transform {
        Transform::Identity => volume.dims(),
        Transform::Field(f) => f.dims(),
    };
    if source_grid != grid {
        return Err(Error::DimsMismatch(format!(
            "transform grid {source_grid:?} does not match fixed grid {grid:?}"
        )));
    }
    apply_transform(volume, transform, interpolation)
}

fn trilinear(volume: &Volume, p: [f64; 3]) -> f64 {
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let t = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let b = [base[0] as i64, base[1] as i64, base[2] as i64];
    let mut acc = 0.0;
    for corner in 0..8 {
        let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0;
        for a in 0..3 {
            w *= if off[a] == 1 { t[a] } else { 1.0 - t[a] };
        }
        if w == 0.0 {
            continue;
        }
        let q = [b[0] + off[0] as i64, b[1] + off[1] as i64, b[2] + off[2] as i64];
        acc += w * volume.value_or_zero(q);
    }
    acc
}
