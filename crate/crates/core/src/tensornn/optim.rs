use rand::Rng;

/// Plain SGD: `w -= lr * g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], learning_rate: f64) {
    debug_assert_eq!(params.len(), grads.len());
    for (w, g) in params.iter_mut().zip(grads) {
        *w -= learning_rate * g;
    }
}

/// Draws `len` weights from `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform<R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}
