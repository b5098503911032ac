use rand::Rng;

use super::tensor::Tensor5;
use super::Mode;
use crate::error::{Error, Result};

pub const DEFAULT_DROPOUT: f64 = 0.1;

/// Inverted dropout. The returned mask holds the per-element multiplier
/// (`0` or `1 / (1 - p)`), which is also the backward map.
pub fn dropout_forward<R: Rng + ?Sized>(
    x: &Tensor5,
    p: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<(Tensor5, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((Tensor5::new(x.shape(), data)?, Some(mask)))
}

pub fn dropout_backward(mask: Option<&[f64]>, grad_out: &Tensor5) -> Result<Tensor5> {
    match mask {
        None => Ok(grad_out.clone()),
        Some(m) => {
            if m.len() != grad_out.len() {
                return Err(Error::ShapeMismatch("dropout mask length".into()));
            }
            let data = grad_out.data().iter().zip(m).map(|(g, m)| g * m).collect();
            Tensor5::new(grad_out.shape(), data)
        }
    }
}
