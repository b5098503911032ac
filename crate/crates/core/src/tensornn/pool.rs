use super::tensor::Tensor5;
use crate::error::Result;

/// 2x2x2 max pooling with stride 2. Odd extents get one trailing voxel of
/// padding that never wins, so each output is `ceil(D / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolOutput {
    pub output: Tensor5,
    /// Flat input index of the maximum behind every output element.
    pub argmax: Vec<usize>,
    pub input_shape: [usize; 5],
}

pub fn pooled_spatial(spatial: [usize; 3]) -> [usize; 3] {
    spatial.map(|d| d.div_ceil(2))
}

pub fn maxpool3d_forward(x: &Tensor5) -> PoolOutput {
    let [n, c, d, h, w] = x.shape();
    let [od, oh, ow] = pooled_spatial([d, h, w]);
    let mut out = Tensor5::zeros([n, c, od, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let data = x.data();
    let mut o = 0;
    for b in 0..n {
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = usize::MAX;
                        for dz in 0..2 {
                            let iz = 2 * z + dz;
                            if iz >= d {
                                continue;
                            }
                            for dy in 0..2 {
                                let iy = 2 * y + dy;
                                if iy >= h {
                                    continue;
                                }
                                for dx in 0..2 {
                                    let ix = 2 * xx + dx;
                                    if ix >= w {
                                        continue;
                                    }
                                    let i = x.index(b, ch, iz, iy, ix);
                                    if best_i == usize::MAX || data[i] > best {
                                        best = data[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.data_mut()[o] = best;
                        argmax.push(best_i);
                        o += 1;
                    }
                }
            }
        }
    }
    PoolOutput {
        output: out,
        argmax,
        input_shape: x.shape(),
    }
}

/// Routes each output gradient to the input position that won the window.
pub fn maxpool3d_backward(pool: &PoolOutput, grad_out: &Tensor5) -> Result<Tensor5> {
    grad_out.expect_shape(pool.output.shape(), "maxpool grad_out")?;
    let mut grad = Tensor5::zeros(pool.input_shape);
    for (&i, &g) in pool.argmax.iter().zip(grad_out.data()) {
        grad.data_mut()[i] += g;
    }
    Ok(grad)
}
