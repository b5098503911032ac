use super::Volume;
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 256;

fn min_max(v: &[f32]) -> (f32, f32) {
    v.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Reference quantile at fractional rank `pos` in `[0, n-1]`, linearly interpolated.
fn quantile(sorted: &[f32], pos: f64) -> f32 {
    let last = sorted.len() - 1;
    let pos = pos.clamp(0.0, last as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(last);
    let t = pos - lo as f64;
    (sorted[lo] as f64 * (1.0 - t) + sorted[hi] as f64 * t) as f32
}

/// Maps `source` intensities so its empirical CDF follows `reference`.
///
/// Source intensities are binned into 256 equal-width bins. Every bin maps
/// to the reference quantile at the bin's median rank, so the mapping is
/// monotone and stays inside the reference intensity range.
pub fn histogram_match(source: &Volume, reference: &Volume) -> Result<Volume> {
    let src = source.as_f32()?;
    let mut sorted = reference.as_f32()?.to_vec();
    let (rmin, rmax) = min_max(&sorted);
    if rmin == rmax {
        return Err(Error::DegenerateReference);
    }
    sorted.sort_by(|a, b| a.total_cmp(b));

    let (smin, smax) = min_max(src);
    let width = (smax as f64 - smin as f64) / HISTOGRAM_BINS as f64;
    let bin_of = |x: f32| -> usize {
        if width == 0.0 {
            0
        } else {
            (((x as f64 - smin as f64) / width) as usize).min(HISTOGRAM_BINS - 1)
        }
    };

    let mut counts = [0usize; HISTOGRAM_BINS];
    for &x in src {
        counts[bin_of(x)] += 1;
    }

    let n_src = src.len();
    let n_ref = sorted.len();
    let mut mapping = [0f32; HISTOGRAM_BINS];
    let mut below = 0usize;
    for (b, &count) in counts.iter().enumerate() {
        if count > 0 {
            let mid_rank = below as f64 + (count as f64 - 1.0) / 2.0;
            let q = if n_src > 1 {
                mid_rank / (n_src - 1) as f64
            } else {
                0.5
            };
            mapping[b] = quantile(&sorted, q * (n_ref - 1) as f64);
        }
        below += count;
    }

    let out = src.iter().map(|&x| mapping[bin_of(x)]).collect();
    let mut matched = Volume::from_f32(source.dims(), out)?;
    matched.spacing = source.spacing;
    Ok(matched)
}
