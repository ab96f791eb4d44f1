//! Tensor kernels: convolution, batch norm, linear, pooling, activations.
//!
//! Everything operates on `f32` ndarrays in NCHW layout. Forward functions
//! return whatever caches their matching backward needs; the graph executor
//! in [`crate::netgraph`] owns the plumbing between them.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod softmax;

pub use conv::{conv2d_backward, conv2d_forward, conv2d_forward_naive, ConvGrads};
pub use linear::{linear_backward, linear_forward};
pub use norm::{bn_eval_backward, bn_eval_forward, bn_train_backward, bn_train_forward, BnCache};
pub use pool::{gap_backward, gap_forward, maxpool_backward, maxpool_forward};
pub use softmax::{accuracy, cross_entropy, log_softmax, softmax};

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// ReLU, out of place.
pub fn relu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

/// Backward of ReLU given the forward *output* (y > 0 iff x > 0).
pub fn relu_backward(dy: &mut Array4<f32>, y: &Array4<f32>) {
    dy.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
}

/// He-normal initialization for a conv kernel of shape (co, ci, k, k).
pub fn he_conv<R: Rng>(rng: &mut R, co: usize, ci: usize, k: usize) -> Array4<f32> {
    let std = (2.0 / (ci * k * k) as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array4::from_shape_fn((co, ci, k, k), |_| dist.sample(rng) as f32)
}

/// He-normal initialization for a linear weight of shape (out, inf).
pub fn he_linear<R: Rng>(rng: &mut R, out: usize, inf: usize) -> Array2<f32> {
    let std = (2.0 / inf as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((out, inf), |_| dist.sample(rng) as f32)
}

/// Uniform init in [-bound, bound], the usual choice for small heads.
pub fn uniform_init<R: Rng>(rng: &mut R, n: usize, bound: f32) -> Array1<f32> {
    Array1::from_shape_fn(n, |_| rng.random_range(-bound..bound))
}
