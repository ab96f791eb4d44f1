//! A single LSTM cell with manual forward/backward.
//!
//! Gate layout in the stacked weight rows is `[input, forget, cell, output]`,
//! each block `hidden` rows tall. One shared bias vector (not the two-bias
//! convention some frameworks use).

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// LSTM cell parameters.
#[derive(Debug, Clone)]
pub struct LstmCell {
    /// (4*hidden, input_dim)
    pub wx: Array2<f32>,
    /// (4*hidden, hidden)
    pub wh: Array2<f32>,
    /// (4*hidden,)
    pub b: Array1<f32>,
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub x: Array1<f32>,
    pub h_prev: Array1<f32>,
    pub c_prev: Array1<f32>,
    i: Array1<f32>,
    f: Array1<f32>,
    g: Array1<f32>,
    o: Array1<f32>,
    tc: Array1<f32>,
}

/// Gradients from one backward step.
#[derive(Debug)]
pub struct LstmStepGrads {
    pub dwx: Array2<f32>,
    pub dwh: Array2<f32>,
    pub db: Array1<f32>,
    pub dx: Array1<f32>,
    pub dh_prev: Array1<f32>,
    pub dc_prev: Array1<f32>,
}

impl LstmCell {
    /// Uniform init in ±1/sqrt(hidden), the usual recurrent-cell default.
    pub fn new<R: Rng>(rng: &mut R, input_dim: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f32).sqrt();
        let mut draw = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.random_range(-bound..bound))
        };
        let wx = draw(4 * hidden, input_dim);
        let wh = draw(4 * hidden, hidden);
        let b = Array1::from_shape_fn(4 * hidden, |_| rng.random_range(-bound..bound));
        Self { wx, wh, b }
    }

    pub fn hidden(&self) -> usize {
        self.wh.dim().1
    }

    pub fn input_dim(&self) -> usize {
        self.wx.dim().1
    }

    pub fn param_count(&self) -> usize {
        self.wx.len() + self.wh.len() + self.b.len()
    }

    /// One step: returns (h_next, c_next, cache).
    pub fn step(
        &self,
        x: &Array1<f32>,
        h_prev: &Array1<f32>,
        c_prev: &Array1<f32>,
    ) -> (Array1<f32>, Array1<f32>, LstmStepCache) {
        let hsz = self.hidden();
        let z = self.wx.dot(x) + self.wh.dot(h_prev) + &self.b;
        let i = z.slice(ndarray::s![0..hsz]).mapv(sigmoid);
        let f = z.slice(ndarray::s![hsz..2 * hsz]).mapv(sigmoid);
        let g = z.slice(ndarray::s![2 * hsz..3 * hsz]).mapv(f32::tanh);
        let o = z.slice(ndarray::s![3 * hsz..4 * hsz]).mapv(sigmoid);
        let c = &f * c_prev + &i * &g;
        let tc = c.mapv(f32::tanh);
        let h = &o * &tc;
        let cache = LstmStepCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            i,
            f,
            g,
            o,
            tc,
        };
        (h, c, cache)
    }

    /// Backward through one step given gradients flowing into h_next and
    /// c_next.
    pub fn step_backward(
        &self,
        cache: &LstmStepCache,
        dh: &Array1<f32>,
        dc_next: &Array1<f32>,
    ) -> LstmStepGrads {
        let LstmStepCache { x, h_prev, c_prev, i, f, g, o, tc } = cache;
        let d_o = dh * tc;
        let dc = dc_next + &(dh * o * &tc.mapv(|t| 1.0 - t * t));
        let d_f = &dc * c_prev;
        let dc_prev = &dc * f;
        let d_i = &dc * g;
        let d_g = &dc * i;

        let dz_i = d_i * i * &i.mapv(|v| 1.0 - v);
        let dz_f = d_f * f * &f.mapv(|v| 1.0 - v);
        let dz_g = d_g * &g.mapv(|v| 1.0 - v * v);
        let dz_o = d_o * o * &o.mapv(|v| 1.0 - v);

        let hsz = self.hidden();
        let mut dz = Array1::<f32>::zeros(4 * hsz);
        dz.slice_mut(ndarray::s![0..hsz]).assign(&dz_i);
        dz.slice_mut(ndarray::s![hsz..2 * hsz]).assign(&dz_f);
        dz.slice_mut(ndarray::s![2 * hsz..3 * hsz]).assign(&dz_g);
        dz.slice_mut(ndarray::s![3 * hsz..4 * hsz]).assign(&dz_o);

        let dzc = dz.view().insert_axis(Axis(1));
        let dwx = &dzc * &x.view().insert_axis(Axis(0));
        let dwh = &dzc * &h_prev.view().insert_axis(Axis(0));
        let dx = self.wx.t().dot(&dz);
        let dh_prev = self.wh.t().dot(&dz);
        LstmStepGrads { dwx, dwh, db: dz, dx, dh_prev, dc_prev }
    }
}
