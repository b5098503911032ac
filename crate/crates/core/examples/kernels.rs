//! Convolution and transposed convolution with a finite-difference check of
//! the convolution weight gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atlasforge::tensornn::{conv3d_backward, conv3d_forward, deconv3d_forward, ConvParams, Tensor5};

fn main() -> atlasforge::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor5::new([1, 2, 6, 6, 6], (0..432).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let mut conv = ConvParams::zeros(3, 2, [3, 3, 3], 2, [1, 1, 1]);
    conv.weight.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
    let y = conv3d_forward(&x, &conv)?;
    println!("conv {:?} -> {:?}", x.shape(), y.shape());

    let up = ConvParams::zeros_transposed(3, 2, [2, 2, 2], 2, [0, 0, 0]);
    println!("deconv {:?} -> {:?}", y.shape(), deconv3d_forward(&y, &up)?.shape());

    // loss = sum(y), so dL/dy = 1
    let ones = Tensor5::filled(y.shape(), 1.0);
    let grads = conv3d_backward(&x, &conv, &ones)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in (0..conv.weight.len()).step_by(7) {
        let mut q = conv.clone();
        q.weight[i] += h;
        let up: f64 = conv3d_forward(&x, &q)?.data().iter().sum();
        q.weight[i] -= 2.0 * h;
        let down: f64 = conv3d_forward(&x, &q)?.data().iter().sum();
        worst = worst.max(((up - down) / (2.0 * h) - grads.weight[i]).abs());
    }
    println!("max |analytic - numeric| weight gradient: {worst:.2e}");
    Ok(())
}
