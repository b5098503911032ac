//! Resolves overlapping per-ROI predictions into one label volume.

use std::collections::BTreeSet;

use crate::ensemble::RoiPrediction;
use crate::error::{Error, Result};
use crate::geometry::{Patch, Point};
use crate::volume::{checked_index, Dims, Volume};

/// `(patch_index, voxel_index)` for every patch voxel inside the grid, with
/// the patch placed as by [`crate::geometry::extract_patch`].
pub fn placements(center: Point, size: [usize; 3], dims: Dims) -> Vec<(usize, usize)> {
    let origin = Patch::origin(center, size);
    let mut out = Vec::new();
    for z in 0..size[2] {
        for y in 0..size[1] {
            for x in 0..size[0] {
                let p = [origin[0] + x as i64, origin[1] + y as i64, origin[2] + z as i64];
                if let Some(v) = checked_index(dims, p) {
                    out.push((x + size[0] * (y + size[1] * z), v));
                }
            }
        }
    }
    out
}

/// Sparse `(voxel_index, value)` contributions of a patch; out-of-grid
/// voxels are dropped.
pub fn embed_patch(patch: &Patch, center: Point, dims: Dims) -> Vec<(usize, f32)> {
    placements(center, patch.size, dims)
        .into_iter()
        .map(|(pi, v)| (v, patch.data[pi]))
        .collect()
}

/// Fused labels and the winning `label * probability` per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub labels: Volume,
    pub confidence: Volume,
}

/// Per voxel, the ROI maximizing `label * probability` among the patches
/// covering it. Voxels no ROI claims stay background; ties go to the
/// smallest ROI id.
pub fn fuse(predictions: &[RoiPrediction], dims: Dims) -> Result<Fused> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("no ROI predictions to fuse".into()));
    }
    let mut seen = BTreeSet::new();
    for p in predictions {
        if p.roi == 0 {
            return Err(Error::InvalidParameter("ROI id 0 is reserved for background".into()));
        }
        if !seen.insert(p.roi) {
            return Err(Error::DuplicateRoi(p.roi));
        }
        let n: usize = p.size.iter().product();
        if p.probability.len() != n || p.label.len() != n {
            return Err(Error::ShapeMismatch(format!("ROI {} prediction size", p.roi)));
        }
    }
    let mut order: Vec<&RoiPrediction> = predictions.iter().collect();
    order.sort_by_key(|p| p.roi);

    let n = dims.iter().product();
    let mut labels = vec![0u16; n];
    let mut confidence = vec![0.0f64; n];
    for p in order {
        for (pi, v) in placements(p.center, p.size, dims) {
            let score = if p.label[pi] { p.probability[pi] } else { 0.0 };
            if score > confidence[v] {
                confidence[v] = score;
                labels[v] = p.roi;
            }
        }
    }
    Ok(Fused {
        labels: Volume::from_labels(dims, labels)?,
        confidence: Volume::from_f32(dims, confidence.into_iter().map(|c| c as f32).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::extract_patch;
    use crate::volume::{coords_of, voxel_count};

    fn pred(roi: u16, center: Point, size: [usize; 3], probs: Vec<f64>) -> RoiPrediction {
        RoiPrediction::from_probability(roi, probs, center, size).unwrap()
    }

    #[test]
    fn overlap_cases() {
        let dims = [1, 1, 1];
        let f = fuse(&[pred(1, [0, 0, 0], [1, 1, 1], vec![0.9]), pred(2, [0, 0, 0], [1, 1, 1], vec![0.7])], dims).unwrap();
        assert_eq!(f.labels.as_labels().unwrap(), &[1]);
        assert_eq!(f.confidence.as_f32().unwrap(), &[0.9]);
        let f = fuse(&[pred(2, [0, 0, 0], [1, 1, 1], vec![0.8]), pred(1, [0, 0, 0], [1, 1, 1], vec![0.8])], dims).unwrap();
        assert_eq!(f.labels.as_labels().unwrap(), &[1]);
        let f = fuse(&[pred(1, [0, 0, 0], [1, 1, 1], vec![0.4]), pred(2, [0, 0, 0], [1, 1, 1], vec![0.5])], dims).unwrap();
        assert_eq!(f.labels.as_labels().unwrap(), &[0]);
        assert_eq!(f.confidence.as_f32().unwrap(), &[0.0]);
    }

    #[test]
    fn errors() {
        let a = pred(1, [0, 0, 0], [1, 1, 1], vec![0.9]);
        assert!(matches!(fuse(&[a.clone(), a.clone()], [1, 1, 1]), Err(Error::DuplicateRoi(1))));
        assert!(fuse(&[], [1, 1, 1]).is_err());
    }

    #[test]
    fn embed_inverts_extract() {
        let dims = [5, 4, 6];
        let v = Volume::from_f32(dims, (0..voxel_count(dims)).map(|i| i as f32 + 1.0).collect()).unwrap();
        for center in [[2, 2, 3], [0, 0, 0], [4, 3, 5]] {
            let size = [3, 4, 5];
            let p = extract_patch(&v, center, size);
            let contributions = embed_patch(&p, center, dims);
            for (idx, val) in &contributions {
                assert_eq!(v.as_f32().unwrap()[*idx], *val);
            }
            let inside = (0..voxel_count(dims))
                .filter(|&i| {
                    let c = coords_of(dims, i);
                    (0..3).all(|a| {
                        let o = center[a] as i64 - (size[a] / 2) as i64;
                        (c[a] as i64) >= o && (c[a] as i64) < o + size[a] as i64
                    })
                })
                .count();
            assert_eq!(contributions.len(), inside);
        }
        let p = Patch { size: [3, 3, 3], data: (0..27).map(|i| i as f32).collect() };
        let e = embed_patch(&p, [2, 2, 2], dims);
        assert!(e.contains(&(crate::volume::linear_index(dims, 2, 2, 2), 13.0)));
        assert!(placements([40, 40, 40], [3, 3, 3], dims).is_empty());
    }
}
