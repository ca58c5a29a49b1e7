//! Flat parameter arrays and the small dense-linear-algebra helpers shared by
//! the toy backbones. Parameters are keyed by stable dotted names so the
//! optimizer, checkpoint archive and gradient checker all agree on identity.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Gradient accumulator keyed by parameter-array name.
pub type GradMap = BTreeMap<String, Vec<f64>>;

pub fn accumulate<'a>(grads: &'a mut GradMap, name: &str, len: usize) -> &'a mut Vec<f64> {
    grads.entry(name.to_string()).or_insert_with(|| vec![0.0; len])
}

/// Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// y = W x for row-major W of shape (rows, cols).
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x.iter()) {
            acc += a * b;
        }
        y[r] = acc;
    }
    y
}

/// y = W^T d for row-major W of shape (rows, cols); d has length rows.
pub fn matvec_t(w: &[f64], rows: usize, cols: usize, d: &[f64]) -> Vec<f64> {
    debug_assert_eq!(d.len(), rows);
    let mut y = vec![0.0; cols];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            y[c] += row[c] * d[r];
        }
    }
    y
}

/// dW += dout ⊗ x (outer product), row-major (rows=|dout|, cols=|x|).
pub fn outer_acc(dw: &mut [f64], dout: &[f64], x: &[f64]) {
    debug_assert_eq!(dw.len(), dout.len() * x.len());
    let cols = x.len();
    for (r, &d) in dout.iter().enumerate() {
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (w, &v) in row.iter_mut().zip(x.iter()) {
            *w += d * v;
        }
    }
}

pub fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s * scale;
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_against_hand_example() {
        // W = [[1,2],[3,4],[5,6]], x = [1,-1]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = matvec(&w, 3, 2, &[1.0, -1.0]);
        assert_eq!(y, vec![-1.0, -1.0, -1.0]);
        let d = matvec_t(&w, 3, 2, &[1.0, 1.0, 1.0]);
        assert_eq!(d, vec![9.0, 12.0]);
    }

    #[test]
    fn outer_accumulates() {
        let mut dw = vec![0.0; 4];
        outer_acc(&mut dw, &[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(dw, vec![3.0, 4.0, 6.0, 8.0]);
    }
}
