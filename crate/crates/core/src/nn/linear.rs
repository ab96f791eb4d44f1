//! Fully-connected layer.

use crate::{Error, Result};
use ndarray::{Array1, Array2};

/// `y = x W^T + b` with x (B, F), w (O, F).
pub fn linear_forward(x: &Array2<f32>, w: &Array2<f32>, b: Option<&Array1<f32>>) -> Result<Array2<f32>> {
    if x.ncols() != w.ncols() {
        return Err(Error::Shape(format!(
            "linear: input has {} features, weight expects {}",
            x.ncols(),
            w.ncols()
        )));
    }
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        for mut row in y.rows_mut() {
            row += b;
        }
    }
    Ok(y)
}

/// Returns (dx, dw, db).
pub fn linear_backward(
    x: &Array2<f32>,
    w: &Array2<f32>,
    dy: &Array2<f32>,
) -> (Array2<f32>, Array2<f32>, Array1<f32>) {
    let dx = dy.dot(w);
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(ndarray::Axis(0));
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0f32));
        let w = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0f32));
        let b = Array1::from_shape_fn(4, |_| rng.random_range(-0.5..0.5f32));
        let g = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0f32));

        let loss = |x: &Array2<f32>, w: &Array2<f32>, b: &Array1<f32>| -> f64 {
            let y = linear_forward(x, w, Some(b)).unwrap();
            y.iter().zip(g.iter()).map(|(&a, &b)| (a * b) as f64).sum()
        };

        let (dx, dw, db) = linear_backward(&x, &w, &g);
        let h = 1e-3f32;
        for (i, j) in [(0usize, 1usize), (2, 4), (1, 0)] {
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h as f64);
            assert!((fd - dx[[i, j]] as f64).abs() < 1e-3 + 1e-2 * fd.abs());

            let mut wp = w.clone();
            wp[[j.min(3), i]] += h;
            let mut wm = w.clone();
            wm[[j.min(3), i]] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h as f64);
            assert!((fd - dw[[j.min(3), i]] as f64).abs() < 1e-3 + 1e-2 * fd.abs());
        }
        for c in 0..4 {
            let mut bp = b.clone();
            bp[c] += h;
            let mut bm = b.clone();
            bm[c] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h as f64);
            assert!((fd - db[c] as f64).abs() < 1e-3 + 1e-2 * fd.abs());
        }
    }

    #[test]
    fn feature_mismatch_is_an_error() {
        let x = Array2::<f32>::zeros((2, 3));
        let w = Array2::<f32>::zeros((4, 5));
        assert!(linear_forward(&x, &w, None).is_err());
    }
}
