//! Finite-difference gradient oracles.
//!
//! These never touch the tape; they only evaluate a scalar function, so they
//! can check any backward implementation independently.

/// Central differences `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vectors are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
