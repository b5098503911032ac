//! Central finite differences for unit tests.

pub(crate) const STEP: f64 = 1e-4;

/// `d f / d v_i` by central differences at every coordinate of `at`.
pub(crate) fn numeric_grad(at: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = at.to_vec();
    (0..v.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + STEP;
            let plus = f(&v);
            v[i] = orig - STEP;
            let minus = f(&v);
            v[i] = orig;
            (plus - minus) / (2.0 * STEP)
        })
        .collect()
}

pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

pub(crate) fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(*a, *n);
        assert!(e < tol, "coordinate {i}: analytic {a} numeric {n} (rel err {e})");
    }
}
