//! 3D convolution (cross-correlation) and its transpose, lowered to GEMM
//! through im2col / col2im.

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor5};
use crate::error::{Error, Result};

/// Weights, bias, stride and zero padding of a convolution.
///
/// `weight_shape` is `(c_out, c_in, kd, kh, kw)` for a convolution. A
/// transposed convolution stores the weights of the convolution it is the
/// adjoint of, so its shape reads `(c_in, c_out, kd, kh, kw)` and its bias
/// has `c_out = weight_shape[1]` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub weight: Vec<f64>,
    pub weight_shape: [usize; 5],
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: [usize; 3],
}

impl ConvParams {
    pub fn zeros(c_out: usize, c_in: usize, kernel: [usize; 3], stride: usize, padding: [usize; 3]) -> Self {
        let shape = [c_out, c_in, kernel[0], kernel[1], kernel[2]];
        ConvParams {
            weight: vec![0.0; shape.iter().product()],
            weight_shape: shape,
            bias: vec![0.0; c_out],
            stride,
            padding,
        }
    }

    pub fn zeros_transposed(
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: usize,
        padding: [usize; 3],
    ) -> Self {
        let shape = [c_in, c_out, kernel[0], kernel[1], kernel[2]];
        ConvParams {
            weight: vec![0.0; shape.iter().product()],
            weight_shape: shape,
            bias: vec![0.0; c_out],
            stride,
            padding,
        }
    }

    pub fn kernel(&self) -> [usize; 3] {
        [self.weight_shape[2], self.weight_shape[3], self.weight_shape[4]]
    }

    fn kernel_volume(&self) -> usize {
        self.weight_shape[2] * self.weight_shape[3] * self.weight_shape[4]
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.weight_shape.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "conv weight shape {:?} stride {}",
                self.weight_shape, self.stride
            )));
        }
        if self.weight.len() != self.weight_shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch("weight length does not match its shape".into()));
        }
        Ok(())
    }
}

/// Gradients of a convolution or transposed convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor5,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Output spatial size of a convolution, or `None` if the kernel does not fit.
pub fn conv_output_spatial(input: [usize; 3], kernel: [usize; 3], stride: usize, padding: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = input[a] + 2 * padding[a];
        if padded < kernel[a] {
            return None;
        }
        out[a] = (padded - kernel[a]) / stride + 1;
    }
    Some(out)
}

/// Output spatial size of a transposed convolution: `(D - 1) s - 2p + k`.
pub fn deconv_output_spatial(input: [usize; 3], kernel: [usize; 3], stride: usize, padding: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let full = (input[a] - 1) * stride + kernel[a];
        if full <= 2 * padding[a] {
            return None;
        }
        out[a] = full - 2 * padding[a];
    }
    Some(out)
}

/// Index arithmetic shared by im2col and col2im. `big` is the convolution
/// input grid and `small` its output grid.
struct Lowering {
    channels: usize,
    big: [usize; 3],
    small: [usize; 3],
    kernel: [usize; 3],
    stride: usize,
    padding: [usize; 3],
}

impl Lowering {
    fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.small.iter().product()
    }

    /// Output positions `lo..hi` along `axis` whose tap `k` lands inside the
    /// big grid.
    #[inline]
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p) = (self.stride as i64, self.padding[axis] as i64);
        let (big, small, k) = (self.big[axis] as i64, self.small[axis] as i64, k as i64);
        let lo = if k >= p { 0 } else { (p - k + s - 1) / s };
        let last = big - 1 + p - k;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(small) };
        (lo.min(hi) as usize, hi as usize)
    }

    /// Calls `f(col_offset, src_offset, run)` for every in-bounds run of
    /// taps along w. With stride 1 a run is contiguous on both sides.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [bd, bh, bw] = self.big;
        let [_, sh, sw] = self.small;
        let [kd, kh, kw] = self.kernel;
        let s = self.stride;
        let cols = self.cols();
        for c in 0..self.channels {
            for kz in 0..kd {
                let (z0, z1) = self.valid(0, kz);
                for ky in 0..kh {
                    let (y0, y1) = self.valid(1, ky);
                    for kx in 0..kw {
                        let (x0, x1) = self.valid(2, kx);
                        if x0 >= x1 {
                            continue;
                        }
                        let row = ((c * kd + kz) * kh + ky) * kw + kx;
                        let row_base = row * cols;
                        for oz in z0..z1 {
                            let iz = oz * s + kz - self.padding[0];
                            for oy in y0..y1 {
                                let iy = oy * s + ky - self.padding[1];
                                let src = ((c * bd + iz) * bh + iy) * bw + x0 * s + kx - self.padding[2];
                                let col = row_base + (oz * sh + oy) * sw + x0;
                                f(col, src, x1 - x0, s);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, src: &[f64], col: &mut [f64]) {
        self.zero_gaps(col);
        self.for_each_run(|ci, si, run, s| {
            if s == 1 {
                col[ci..ci + run].copy_from_slice(&src[si..si + run]);
            } else {
                for i in 0..run {
                    col[ci + i] = src[si + i * s];
                }
            }
        });
    }

    /// Zeroes exactly the column entries whose tap falls in padding.
    fn zero_gaps(&self, col: &mut [f64]) {
        let [sd, sh, sw] = self.small;
        let [kd, kh, kw] = self.kernel;
        let cols = self.cols();
        for row in 0..self.rows() {
            let kx = row % kw;
            let ky = (row / kw) % kh;
            let kz = (row / (kw * kh)) % kd;
            let (z0, z1) = self.valid(0, kz);
            let (y0, y1) = self.valid(1, ky);
            let (x0, x1) = self.valid(2, kx);
            let line = &mut col[row * cols..(row + 1) * cols];
            if x0 >= x1 {
                line.fill(0.0);
                continue;
            }
            for oz in 0..sd {
                let plane = &mut line[oz * sh * sw..(oz + 1) * sh * sw];
                if oz < z0 || oz >= z1 {
                    plane.fill(0.0);
                    continue;
                }
                for oy in 0..sh {
                    let run = &mut plane[oy * sw..(oy + 1) * sw];
                    if oy < y0 || oy >= y1 {
                        run.fill(0.0);
                    } else {
                        run[..x0].fill(0.0);
                        run[x1..].fill(0.0);
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dst: &mut [f64]) {
        self.for_each_run(|ci, si, run, s| {
            if s == 1 {
                for (d, c) in dst[si..si + run].iter_mut().zip(&col[ci..ci + run]) {
                    *d += c;
                }
            } else {
                for i in 0..run {
                    dst[si + i * s] += col[ci + i];
                }
            }
        });
    }
}

fn add_bias(y: &mut Tensor5, bias: &[f64]) {
    let [n, c, ..] = y.shape();
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            y.channel_mut(b, ch).iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad(grad_out: &Tensor5) -> Vec<f64> {
    let [n, c, ..] = grad_out.shape();
    (0..c)
        .map(|ch| (0..n).map(|b| grad_out.channel(b, ch).iter().sum::<f64>()).sum())
        .collect()
}

fn conv_lowering(x_shape: [usize; 5], p: &ConvParams) -> Result<(Lowering, [usize; 3])> {
    p.validate()?;
    let [_, c_in, d, h, w] = x_shape;
    if c_in != p.weight_shape[1] {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, found {c_in}",
            p.weight_shape[1]
        )));
    }
    let out = conv_output_spatial([d, h, w], p.kernel(), p.stride, p.padding).ok_or_else(|| {
        Error::ShapeMismatch(format!(
            "kernel {:?} larger than padded input {:?}",
            p.kernel(),
            [d, h, w]
        ))
    })?;
    Ok((
        Lowering {
            channels: c_in,
            big: [d, h, w],
            small: out,
            kernel: p.kernel(),
            stride: p.stride,
            padding: p.padding,
        },
        out,
    ))
}

/// `y[n, k] = b_k + sum_c W[k, c] * x[n, c]` (cross-correlation).
pub fn conv3d_forward(x: &Tensor5, p: &ConvParams) -> Result<Tensor5> {
    let (low, out) = conv_lowering(x.shape(), p)?;
    let c_out = p.weight_shape[0];
    let (rows, cols) = (low.rows(), low.cols());
    let mut y = Tensor5::zeros([x.batch(), c_out, out[0], out[1], out[2]]);
    let mut col = vec![0.0; rows * cols];
    for b in 0..x.batch() {
        low.im2col(x.sample(b), &mut col);
        gemm(c_out, rows, cols, &p.weight, false, &col, false, 0.0, y.sample_mut(b));
    }
    add_bias(&mut y, &p.bias);
    Ok(y)
}

pub fn conv3d_backward(x: &Tensor5, p: &ConvParams, grad_out: &Tensor5) -> Result<ConvGrads> {
    let (low, out) = conv_lowering(x.shape(), p)?;
    let c_out = p.weight_shape[0];
    grad_out.expect_shape([x.batch(), c_out, out[0], out[1], out[2]], "conv3d grad_out")?;
    let (rows, cols) = (low.rows(), low.cols());
    let mut grad_x = Tensor5::zeros(x.shape());
    let mut grad_w = vec![0.0; p.weight.len()];
    let mut col = vec![0.0; rows * cols];
    for b in 0..x.batch() {
        low.im2col(x.sample(b), &mut col);
        gemm(c_out, cols, rows, grad_out.sample(b), false, &col, true, 1.0, &mut grad_w);
        gemm(rows, c_out, cols, &p.weight, true, grad_out.sample(b), false, 0.0, &mut col);
        low.col2im(&col, grad_x.sample_mut(b));
    }
    Ok(ConvGrads {
        input: grad_x,
        weight: grad_w,
        bias: bias_grad(grad_out),
    })
}

fn deconv_lowering(x_shape: [usize; 5], p: &ConvParams) -> Result<(Lowering, [usize; 3])> {
    p.validate()?;
    let [_, c_in, d, h, w] = x_shape;
    if c_in != p.weight_shape[0] {
        return Err(Error::ShapeMismatch(format!(
            "deconv expects {} input channels, found {c_in}",
            p.weight_shape[0]
        )));
    }
    let out = deconv_output_spatial([d, h, w], p.kernel(), p.stride, p.padding).ok_or_else(|| {
        Error::ShapeMismatch(format!("deconv of {:?} has empty output", [d, h, w]))
    })?;
    Ok((
        Lowering {
            channels: p.weight_shape[1],
            big: out,
            small: [d, h, w],
            kernel: p.kernel(),
            stride: p.stride,
            padding: p.padding,
        },
        out,
    ))
}

/// Transposed convolution: the adjoint of [`conv3d_forward`] with the same
/// weights, plus a bias on the output channels.
pub fn deconv3d_forward(x: &Tensor5, p: &ConvParams) -> Result<Tensor5> {
    let (low, out) = deconv_lowering(x.shape(), p)?;
    let (c_in, c_out) = (p.weight_shape[0], p.weight_shape[1]);
    let (rows, cols) = (low.rows(), low.cols());
    let mut y = Tensor5::zeros([x.batch(), c_out, out[0], out[1], out[2]]);
    let mut col = vec![0.0; rows * cols];
    for b in 0..x.batch() {
        gemm(rows, c_in, cols, &p.weight, true, x.sample(b), false, 0.0, &mut col);
        low.col2im(&col, y.sample_mut(b));
    }
    add_bias(&mut y, &p.bias);
    Ok(y)
}

pub fn deconv3d_backward(x: &Tensor5, p: &ConvParams, grad_out: &Tensor5) -> Result<ConvGrads> {
    let (low, out) = deconv_lowering(x.shape(), p)?;
    let (c_in, c_out) = (p.weight_shape[0], p.weight_shape[1]);
    grad_out.expect_shape([x.batch(), c_out, out[0], out[1], out[2]], "deconv3d grad_out")?;
    let (rows, cols) = (low.rows(), low.cols());
    let mut grad_x = Tensor5::zeros(x.shape());
    let mut grad_w = vec![0.0; p.weight.len()];
    let mut col = vec![0.0; rows * cols];
    for b in 0..x.batch() {
        low.im2col(grad_out.sample(b), &mut col);
        gemm(c_in, rows, cols, &p.weight, false, &col, false, 0.0, grad_x.sample_mut(b));
        gemm(c_in, cols, rows, x.sample(b), false, &col, true, 1.0, &mut grad_w);
    }
    Ok(ConvGrads {
        input: grad_x,
        weight: grad_w,
        bias: bias_grad(grad_out),
    })
}

/// Number of weighted connections into one output unit of a layer, i.e. the
/// fan-in used by uniform initialization.
pub fn fan_in(p: &ConvParams, transposed: bool) -> usize {
    if transposed {
        let per_axis: usize = p
            .kernel()
            .iter()
            .map(|&k| k.div_ceil(p.stride))
            .product();
        (p.weight_shape[0] * per_axis).max(1)
    } else {
        p.weight_shape[1] * p.kernel_volume()
    }
}
