use super::tensor::Tensor5;
use crate::error::{Error, Result};

pub fn relu_forward(x: &Tensor5) -> Tensor5 {
    x.map(|v| v.max(0.0))
}

/// Passes the gradient where the input is strictly positive.
pub fn relu_backward(x: &Tensor5, grad_out: &Tensor5) -> Result<Tensor5> {
    grad_out.expect_shape(x.shape(), "relu grad_out")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor5::new(x.shape(), data)
}

/// Per-voxel softmax across channels, with max subtraction.
pub fn softmax_channels(x: &Tensor5) -> Tensor5 {
    let [n, c, ..] = x.shape();
    let vol = x.spatial_len();
    let mut out = Tensor5::zeros(x.shape());
    for b in 0..n {
        let src = x.sample(b);
        let dst = out.sample_mut(b);
        for v in 0..vol {
            let max = (0..c).map(|ch| src[ch * vol + v]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ch in 0..c {
                let e = (src[ch * vol + v] - max).exp();
                dst[ch * vol + v] = e;
                total += e;
            }
            for ch in 0..c {
                dst[ch * vol + v] /= total;
            }
        }
    }
    out
}

pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Mean voxel-wise cross-entropy of softmax `probabilities` against a
/// binary foreground mask, shaped `(n, 1, d, h, w)`.
///
/// The returned gradient is with respect to the logits that produced the
/// probabilities: `(p - onehot) / M`, with `M` the voxel count over the batch.
pub fn cross_entropy(probabilities: &Tensor5, targets: &Tensor5) -> Result<(f64, Tensor5)> {
    let [n, c, d, h, w] = probabilities.shape();
    targets.expect_shape([n, 1, d, h, w], "cross-entropy targets")?;
    if c < 2 {
        return Err(Error::ShapeMismatch("cross-entropy needs at least 2 classes".into()));
    }
    let vol = d * h * w;
    let m = (n * vol) as f64;
    let mut grad = probabilities.clone();
    let mut loss = 0.0;
    for b in 0..n {
        let t = targets.sample(b);
        let p = probabilities.sample(b);
        let g = grad.sample_mut(b);
        for v in 0..vol {
            let class = if t[v] > 0.5 { 1 } else { 0 };
            let pc = p[class * vol + v];
            // NaN must survive so divergence is visible
            loss -= if pc < PROBABILITY_FLOOR { PROBABILITY_FLOOR } else { pc }.ln();
            g[class * vol + v] -= 1.0;
        }
    }
    grad.data_mut().iter_mut().for_each(|g| *g /= m);
    Ok((loss / m, grad))
}
