//! Similar-atlas-patch retrieval.
//!
//! Around a query center, every warped template image is scanned over a
//! cubic neighborhood of offsets for the patch with the smallest sum of
//! squared intensity differences; the best K templates are kept.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{extract_at_origin, extract_binary_patch, extract_patch, Patch, Point};
use crate::volume::Volume;

pub const DEFAULT_K: usize = 3;
pub const SEARCH_RADIUS_FRACTION: f64 = 0.75;

/// `floor(0.75 * R)` per axis.
pub fn default_search_radius(patch_size: [usize; 3]) -> [usize; 3] {
    patch_size.map(|r| (SEARCH_RADIUS_FRACTION * r as f64).floor() as usize)
}

/// Winning offset of one neighborhood scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub offset: [i64; 3],
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub template_id: usize,
    pub offset: [i64; 3],
    pub distance: f64,
    pub image_patch: Patch,
    /// Template ROI indicator at the same winning offset.
    pub label_patch: Patch,
}

/// A warped template atlas on the query grid.
#[derive(Debug, Clone, Copy)]
pub struct AtlasRef<'a> {
    pub image: &'a Volume,
    pub label: &'a Volume,
}

/// Network input for one patch location: the query image patch plus K
/// retrieved atlas image/label patch pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput {
    pub x: Patch,
    pub atlas_images: Vec<Patch>,
    pub atlas_labels: Vec<Patch>,
}

impl SampleInput {
    pub fn patch_size(&self) -> [usize; 3] {
        self.x.size
    }

    pub fn k(&self) -> usize {
        self.atlas_images.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: SampleInput,
    /// Ground-truth ROI indicator of the target.
    pub y: Patch,
}

/// Lexicographic (z, y, x) comparison.
fn offset_order(a: [i64; 3], b: [i64; 3]) -> Ordering {
    (a[2], a[1], a[0]).cmp(&(b[2], b[1], b[0]))
}

/// Exhaustive minimization of `|query - template(center + o)|^2` over
/// `|o_axis| <= radius_axis`, visiting offsets in (z, y, x) lexicographic
/// order so the first minimum wins ties. `stride` subsamples the offsets.
pub fn most_similar(
    query: &Patch,
    template_image: &Volume,
    center: Point,
    radius: [usize; 3],
    stride: usize,
) -> Match {
    let stride = stride.max(1);
    let size = query.size;
    let origin = Patch::origin(center, size);
    // Zero-padded copy of every voxel any candidate patch can touch.
    let region_size = [
        size[0] + 2 * radius[0],
        size[1] + 2 * radius[1],
        size[2] + 2 * radius[2],
    ];
    let region_origin = [
        origin[0] - radius[0] as i64,
        origin[1] - radius[1] as i64,
        origin[2] - radius[2] as i64,
    ];
    let region: Vec<f64> = extract_at_origin(template_image, region_origin, region_size)
        .data
        .iter()
        .map(|&v| v as f64)
        .collect();
    let q: Vec<f64> = query.data.iter().map(|&v| v as f64).collect();

    let mut best = Match {
        offset: [0, 0, 0],
        distance: f64::INFINITY,
    };
    let range = |r: usize| {
        let r = r as i64;
        let first = -(r / stride as i64) * stride as i64;
        (first..=r).step_by(stride)
    };
    for oz in range(radius[2]) {
        for oy in range(radius[1]) {
            for ox in range(radius[0]) {
                let base = [
                    (ox + radius[0] as i64) as usize,
                    (oy + radius[1] as i64) as usize,
                    (oz + radius[2] as i64) as usize,
                ];
                let mut acc = 0.0f64;
                'slices: for z in 0..size[2] {
                    for y in 0..size[1] {
                        let qrow = &q[size[0] * (y + size[1] * z)..][..size[0]];
                        let start = base[0]
                            + region_size[0] * ((base[1] + y) + region_size[1] * (base[2] + z));
                        let trow = &region[start..start + size[0]];
                        acc += qrow
                            .iter()
                            .zip(trow)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>();
                    }
                    if acc > best.distance {
                        break 'slices;
                    }
                }
                if acc < best.distance {
                    best = Match {
                        offset: [ox, oy, oz],
                        distance: acc,
                    };
                }
            }
        }
    }
    best
}

/// Runs [`most_similar`] on one template and pulls the winning image patch
/// and the co-located ROI indicator patch.
pub fn search_atlas(
    query: &Patch,
    atlas: AtlasRef<'_>,
    template_id: usize,
    roi: u16,
    center: Point,
    radius: [usize; 3],
    stride: usize,
) -> Result<SearchResult> {
    if atlas.image.dims() != atlas.label.dims() {
        return Err(Error::DimsMismatch(format!(
            "template {template_id} image {:?} vs label {:?}",
            atlas.image.dims(),
            atlas.label.dims()
        )));
    }
    let m = most_similar(query, atlas.image, center, radius, stride);
    let origin = Patch::origin(center, query.size);
    let shifted = [
        origin[0] + m.offset[0],
        origin[1] + m.offset[1],
        origin[2] + m.offset[2],
    ];
    let image_patch = extract_at_origin(atlas.image, shifted, query.size);
    let raw_label = extract_at_origin(atlas.label, shifted, query.size);
    atlas.label.as_labels()?;
    let label_patch = Patch {
        size: query.size,
        data: raw_label
            .data
            .iter()
            .map(|&l| if l == roi as f32 { 1.0 } else { 0.0 })
            .collect(),
    };
    Ok(SearchResult {
        template_id,
        offset: m.offset,
        distance: m.distance,
        image_patch,
        label_patch,
    })
}

/// The `k` best results by ascending distance; ties by template id, then offset.
pub fn top_k(mut results: Vec<SearchResult>, k: usize) -> Result<Vec<SearchResult>> {
    if results.len() < k {
        return Err(Error::InsufficientTemplates {
            needed: k,
            available: results.len(),
        });
    }
    results.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.template_id.cmp(&b.template_id))
            .then(offset_order(a.offset, b.offset))
    });
    results.truncate(k);
    Ok(results)
}

/// Search parameters shared by training-sample and test-input construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub k: usize,
    /// Per-axis radius; `None` means `floor(0.75 * R)`.
    pub radius: Option<[usize; 3]>,
    pub stride: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k: DEFAULT_K,
            radius: None,
            stride: 1,
        }
    }
}

impl SearchConfig {
    pub fn radius_for(&self, patch_size: [usize; 3]) -> [usize; 3] {
        self.radius
            .unwrap_or_else(|| default_search_radius(patch_size))
    }
}

/// Extracts the query patch at `center` and retrieves its top-K atlas pairs.
pub fn build_input(
    image: &Volume,
    roi: u16,
    center: Point,
    patch_size: [usize; 3],
    templates: &[AtlasRef<'_>],
    config: &SearchConfig,
) -> Result<(SampleInput, Vec<SearchResult>)> {
    if templates.len() < config.k {
        return Err(Error::InsufficientTemplates {
            needed: config.k,
            available: templates.len(),
        });
    }
    let x = extract_patch(image, center, patch_size);
    let radius = config.radius_for(patch_size);
    let results = templates
        .iter()
        .enumerate()
        .map(|(id, atlas)| search_atlas(&x, *atlas, id, roi, center, radius, config.stride))
        .collect::<Result<Vec<_>>>()?;
    let best = top_k(results, config.k)?;
    let input = SampleInput {
        x,
        atlas_images: best.iter().map(|r| r.image_patch.clone()).collect(),
        atlas_labels: best.iter().map(|r| r.label_patch.clone()).collect(),
    };
    Ok((input, best))
}

pub fn build_training_sample(
    target_image: &Volume,
    target_label: &Volume,
    roi: u16,
    center: Point,
    patch_size: [usize; 3],
    templates: &[AtlasRef<'_>],
    config: &SearchConfig,
) -> Result<(TrainingSample, Vec<SearchResult>)> {
    if target_image.dims() != target_label.dims() {
        return Err(Error::DimsMismatch(format!(
            "target image {:?} vs label {:?}",
            target_image.dims(),
            target_label.dims()
        )));
    }
    let (input, best) = build_input(target_image, roi, center, patch_size, templates, config)?;
    let y = extract_binary_patch(target_label, roi, center, patch_size)?;
    Ok((TrainingSample { input, y }, best))
}
