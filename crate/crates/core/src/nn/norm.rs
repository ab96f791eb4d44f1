//! Batch normalization over NCHW activations.
//!
//! Train mode normalizes with batch statistics (biased variance) and is
//! paired with a separate running-statistics update, matching the usual
//! deep-learning convention (unbiased variance in the running estimate).
//! Eval mode folds the frozen statistics into a per-channel affine map.

use ndarray::{Array1, Array4, Axis};

/// Per-channel values cached by the train-mode forward for its backward.
pub struct BnCache {
    pub mean: Array1<f32>,
    /// Biased batch variance (divide by N), as used for normalization.
    pub var: Array1<f32>,
    pub eps: f32,
}

fn channel_moments(x: &Array4<f32>) -> (Array1<f32>, Array1<f32>) {
    let (b, c, h, w) = x.dim();
    let n = (b * h * w) as f64;
    let mut mean = Array1::<f32>::zeros(c);
    let mut var = Array1::<f32>::zeros(c);
    for ci in 0..c {
        let mut s = 0.0f64;
        let mut s2 = 0.0f64;
        for bi in 0..b {
            for v in x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).iter() {
                let v = *v as f64;
                s += v;
                s2 += v * v;
            }
        }
        let m = s / n;
        mean[ci] = m as f32;
        var[ci] = ((s2 / n - m * m).max(0.0)) as f32;
    }
    (mean, var)
}

/// Train-mode forward: normalize with batch statistics, then scale/shift.
pub fn bn_train_forward(
    x: &Array4<f32>,
    gamma: &Array1<f32>,
    beta: &Array1<f32>,
    eps: f32,
) -> (Array4<f32>, BnCache) {
    let (mean, var) = channel_moments(x);
    let (b, c, _, _) = x.dim();
    let mut y = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let a = gamma[ci] / (var[ci] + eps).sqrt();
            let shift = beta[ci] - mean[ci] * a;
            let mut ych = y.index_axis_mut(Axis(0), bi);
            let mut ych = ych.index_axis_mut(Axis(0), ci);
            ych.mapv_inplace(|v| v * a + shift);
        }
    }
    (y, BnCache { mean, var, eps })
}

/// Update running statistics in place. `var` is the biased batch variance
/// from the cache; the running estimate stores the unbiased version.
pub fn bn_update_running(
    cache: &BnCache,
    n_per_channel: usize,
    momentum: f32,
    running_mean: &mut Array1<f32>,
    running_var: &mut Array1<f32>,
) {
    let n = n_per_channel as f32;
    let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    for c in 0..cache.mean.len() {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * cache.mean[c];
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * cache.var[c] * unbias;
    }
}

/// Train-mode backward through the batch statistics.
pub fn bn_train_backward(
    x: &Array4<f32>,
    gamma: &Array1<f32>,
    cache: &BnCache,
    dy: &Array4<f32>,
) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
    let (b, c, h, w) = x.dim();
    let n = (b * h * w) as f64;
    let mut dx = Array4::<f32>::zeros(x.dim());
    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);

    for ci in 0..c {
        let mean = cache.mean[ci] as f64;
        let inv_std = 1.0 / ((cache.var[ci] + cache.eps) as f64).sqrt();
        let g = gamma[ci] as f64;

        // First pass: sums of dy and dy * xhat.
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for bi in 0..b {
            let xch = x.index_axis(Axis(0), bi);
            let xch = xch.index_axis(Axis(0), ci);
            let dych = dy.index_axis(Axis(0), bi);
            let dych = dych.index_axis(Axis(0), ci);
            for (&xv, &dv) in xch.iter().zip(dych.iter()) {
                let xhat = (xv as f64 - mean) * inv_std;
                sum_dy += dv as f64;
                sum_dy_xhat += dv as f64 * xhat;
            }
        }
        dgamma[ci] = sum_dy_xhat as f32;
        dbeta[ci] = sum_dy as f32;

        // Second pass: dx = g*inv_std/N * (N*dy - sum_dy - xhat*sum_dy_xhat).
        let scale = g * inv_std / n;
        for bi in 0..b {
            let xch = x.index_axis(Axis(0), bi);
            let xch = xch.index_axis(Axis(0), ci);
            let dych = dy.index_axis(Axis(0), bi);
            let dych = dych.index_axis(Axis(0), ci);
            let mut dxch = dx.index_axis_mut(Axis(0), bi);
            let mut dxch = dxch.index_axis_mut(Axis(0), ci);
            for ((&xv, &dv), o) in xch.iter().zip(dych.iter()).zip(dxch.iter_mut()) {
                let xhat = (xv as f64 - mean) * inv_std;
                *o = (scale * (n * dv as f64 - sum_dy - xhat * sum_dy_xhat)) as f32;
            }
        }
        let _ = (h, w);
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode forward: per-channel affine with frozen statistics.
pub fn bn_eval_forward(
    x: &Array4<f32>,
    gamma: &Array1<f32>,
    beta: &Array1<f32>,
    running_mean: &Array1<f32>,
    running_var: &Array1<f32>,
    eps: f32,
) -> Array4<f32> {
    let (b, c, _, _) = x.dim();
    let mut y = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let a = gamma[ci] / (running_var[ci] + eps).sqrt();
            let shift = beta[ci] - running_mean[ci] * a;
            let mut ych = y.index_axis_mut(Axis(0), bi);
            let mut ych = ych.index_axis_mut(Axis(0), ci);
            ych.mapv_inplace(|v| v * a + shift);
        }
    }
    y
}

/// Eval-mode backward. Statistics are constants, so this is just the affine
/// adjoint; gamma/beta gradients are still produced for fine-tuning.
pub fn bn_eval_backward(
    x: &Array4<f32>,
    gamma: &Array1<f32>,
    running_mean: &Array1<f32>,
    running_var: &Array1<f32>,
    eps: f32,
    dy: &Array4<f32>,
) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
    let (b, c, _, _) = x.dim();
    let mut dx = dy.clone();
    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);
    for ci in 0..c {
        let inv_std = 1.0 / (running_var[ci] + eps).sqrt();
        let a = gamma[ci] * inv_std;
        let mean = running_mean[ci];
        let mut dg = 0.0f64;
        let mut db = 0.0f64;
        for bi in 0..b {
            let xch = x.index_axis(Axis(0), bi);
            let xch = xch.index_axis(Axis(0), ci);
            let dych = dy.index_axis(Axis(0), bi);
            let dych = dych.index_axis(Axis(0), ci);
            for (&xv, &dv) in xch.iter().zip(dych.iter()) {
                dg += dv as f64 * ((xv - mean) * inv_std) as f64;
                db += dv as f64;
            }
            let mut dxch = dx.index_axis_mut(Axis(0), bi);
            let mut dxch = dxch.index_axis_mut(Axis(0), ci);
            dxch.mapv_inplace(|v| v * a);
        }
        dgamma[ci] = dg as f32;
        dbeta[ci] = db as f32;
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f32> {
        Array4::from_shape_fn(d, |_| rng.random_range(-2.0..2.0f32))
    }

    #[test]
    fn train_forward_normalizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn4(&mut rng, (4, 3, 5, 5));
        let gamma = Array1::ones(3);
        let beta = Array1::zeros(3);
        let (y, _) = bn_train_forward(&x, &gamma, &beta, 1e-5);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| {
                    y.index_axis(Axis(0), b)
                        .index_axis(Axis(0), c)
                        .iter()
                        .map(|&v| v as f64)
                        .collect::<Vec<_>>()
                })
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-2, "channel {c} var {var}");
        }
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn4(&mut rng, (3, 2, 4, 4));
        let gamma = Array1::from_shape_fn(2, |_| rng.random_range(0.5..1.5f32));
        let beta = Array1::from_shape_fn(2, |_| rng.random_range(-0.5..0.5f32));
        let g = randn4(&mut rng, x.dim());
        let eps = 1e-5;

        let loss = |x: &Array4<f32>, gamma: &Array1<f32>, beta: &Array1<f32>| -> f64 {
            let (y, _) = bn_train_forward(x, gamma, beta, eps);
            y.iter().zip(g.iter()).map(|(&a, &b)| (a * b) as f64).sum()
        };

        let (_, cache) = bn_train_forward(&x, &gamma, &beta, eps);
        let (dx, dgamma, dbeta) = bn_train_backward(&x, &gamma, &cache, &g);

        let h = 1e-3f32;
        let mut probe = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let i = [
                probe.random_range(0..3),
                probe.random_range(0..2),
                probe.random_range(0..4),
                probe.random_range(0..4),
            ];
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * h as f64);
            assert!(
                (fd - dx[i] as f64).abs() < 2e-2 + 2e-2 * fd.abs(),
                "dx fd={fd} an={}",
                dx[i]
            );
        }
        for c in 0..2 {
            let mut gp = gamma.clone();
            gp[c] += h;
            let mut gm = gamma.clone();
            gm[c] -= h;
            let fd = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * h as f64);
            assert!((fd - dgamma[c] as f64).abs() < 2e-2 + 2e-2 * fd.abs());
            let mut bp = beta.clone();
            bp[c] += h;
            let mut bm = beta.clone();
            bm[c] -= h;
            let fd = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * h as f64);
            assert!((fd - dbeta[c] as f64).abs() < 2e-2 + 2e-2 * fd.abs());
        }
    }

    #[test]
    fn eval_mode_is_a_frozen_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn4(&mut rng, (2, 3, 4, 4));
        let gamma = Array1::from_shape_fn(3, |_| rng.random_range(0.5..1.5f32));
        let beta = Array1::from_shape_fn(3, |_| rng.random_range(-0.5..0.5f32));
        let rm = Array1::from_shape_fn(3, |_| rng.random_range(-0.5..0.5f32));
        let rv = Array1::from_shape_fn(3, |_| rng.random_range(0.5..1.5f32));
        let y = bn_eval_forward(&x, &gamma, &beta, &rm, &rv, 1e-5);
        // Two inputs that differ by delta map to outputs differing by a*delta.
        let mut x2 = x.clone();
        x2[[0, 1, 2, 2]] += 0.25;
        let y2 = bn_eval_forward(&x2, &gamma, &beta, &rm, &rv, 1e-5);
        let a = gamma[1] / (rv[1] + 1e-5).sqrt();
        let got = y2[[0, 1, 2, 2]] - y[[0, 1, 2, 2]];
        assert!((got - 0.25 * a).abs() < 1e-5);
    }

    #[test]
    fn running_update_uses_unbiased_variance() {
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, cache) = bn_train_forward(&x, &Array1::ones(1), &Array1::zeros(1), 1e-5);
        let mut rm = Array1::zeros(1);
        let mut rv = Array1::ones(1);
        bn_update_running(&cache, 4, 0.1, &mut rm, &mut rv);
        // mean 2.5, biased var 1.25, unbiased 5/3.
        assert!((rm[0] - 0.25).abs() < 1e-6);
        assert!((rv[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-5);
    }
}
