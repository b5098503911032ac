use crate::error::{Error, Result};

/// Dense `(n, c, d, h, w)` tensor, w-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    shape: [usize; 5],
    data: Vec<f64>,
}

impl Tensor5 {
    pub fn new(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero-sized shape {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor5 { shape, data })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor5 {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 5], value: f64) -> Self {
        Tensor5 {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// `(d, h, w)`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        let [_, cs, ds, hs, ws] = self.shape;
        (((n * cs + c) * ds + d) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, d, h, w)]
    }

    /// Contiguous `(d, h, w)` block of one sample and channel.
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let len = self.spatial_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let len = self.spatial_len();
        let start = (n * self.shape[1] + c) * len;
        &mut self.data[start..start + len]
    }

    /// Contiguous `(c, d, h, w)` block of one sample.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape[1] * self.spatial_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape[1] * self.spatial_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn dot(&self, other: &Tensor5) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor5 {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn expect_shape(&self, shape: [usize; 5], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected {shape:?}, found {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Stacks tensors along the channel axis, in argument order.
pub fn concat_channels(tensors: &[&Tensor5]) -> Result<Tensor5> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::EmptyInput("concat_channels of nothing".into()))?;
    let [n, _, d, h, w] = first.shape();
    for t in tensors {
        let s = t.shape();
        if s[0] != n || s[2..] != [d, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "concat of {:?} with {s:?}",
                first.shape()
            )));
        }
    }
    let c: usize = tensors.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(n * c * d * h * w);
    for b in 0..n {
        for t in tensors {
            data.extend_from_slice(t.sample(b));
        }
    }
    Tensor5::new([n, c, d, h, w], data)
}

/// Inverse of [`concat_channels`]: splits by consecutive channel counts.
pub fn split_channels(t: &Tensor5, sizes: &[usize]) -> Result<Vec<Tensor5>> {
    if sizes.iter().sum::<usize>() != t.channels() {
        return Err(Error::ShapeMismatch(format!(
            "split sizes {sizes:?} do not add to {} channels",
            t.channels()
        )));
    }
    let [n, _, d, h, w] = t.shape();
    let vol = d * h * w;
    let mut out: Vec<Tensor5> = sizes.iter().map(|&c| Tensor5::zeros([n, c, d, h, w])).collect();
    for b in 0..n {
        let src = t.sample(b);
        let mut offset = 0;
        for (part, &c) in out.iter_mut().zip(sizes) {
            part.sample_mut(b).copy_from_slice(&src[offset..offset + c * vol]);
            offset += c * vol;
        }
    }
    Ok(out)
}

/// Keeps the leading `(d, h, w)` corner of every channel.
pub fn crop_spatial(t: &Tensor5, size: [usize; 3]) -> Result<Tensor5> {
    let [n, c, d, h, w] = t.shape();
    if size[0] > d || size[1] > h || size[2] > w || size.contains(&0) {
        return Err(Error::ShapeMismatch(format!(
            "cannot crop {:?} to {size:?}",
            t.spatial()
        )));
    }
    if size == [d, h, w] {
        return Ok(t.clone());
    }
    let mut out = Tensor5::zeros([n, c, size[0], size[1], size[2]]);
    for b in 0..n {
        for ch in 0..c {
            let src = t.channel(b, ch);
            let dst = out.channel_mut(b, ch);
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let s = (z * h + y) * w;
                    let o = (z * size[1] + y) * size[2];
                    dst[o..o + size[2]].copy_from_slice(&src[s..s + size[2]]);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`crop_spatial`]: zero-pads back to `spatial`.
pub fn uncrop_spatial(t: &Tensor5, spatial: [usize; 3]) -> Result<Tensor5> {
    let [n, c, d, h, w] = t.shape();
    if d > spatial[0] || h > spatial[1] || w > spatial[2] {
        return Err(Error::ShapeMismatch(format!(
            "cannot pad {:?} to {spatial:?}",
            t.spatial()
        )));
    }
    if [d, h, w] == spatial {
        return Ok(t.clone());
    }
    let mut out = Tensor5::zeros([n, c, spatial[0], spatial[1], spatial[2]]);
    for b in 0..n {
        for ch in 0..c {
            let src = t.channel(b, ch);
            let dst = out.channel_mut(b, ch);
            for z in 0..d {
                for y in 0..h {
                    let s = (z * h + y) * w;
                    let o = (z * spatial[1] + y) * spatial[2];
                    dst[o..o + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
    }
    Ok(out)
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the debug assertions above pin every buffer to the extents the
    // strides address; matrixmultiply reads a and b and writes only c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
