//! Small parameterised layers shared by the network components.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mat, ParamId, ParamStore, Var};

pub const LN_EPS: f64 = 1e-5;

/// Uniform Glorot initialisation.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Mat {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-a..a))
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out));
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros((1, fan_out))));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, width))),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, width))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Width-`k` convolution along rows with circular padding.
#[derive(Debug, Clone, Copy)]
pub struct CircularConv1d {
    pub k: usize,
    pub lin: Linear,
}

impl CircularConv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self { k, lin: Linear::new(store, name, k * c_in, c_out, bias, rng) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let cols = g.im2col_1d_circular(x, self.k);
        self.lin.forward(g, cols)
    }
}

/// Inverted dropout; `rng = None` means evaluation mode.
pub fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask = Mat::from_shape_fn(g.shape(x), |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
            g.mul_const(x, mask)
        }
        _ => x,
    }
}

/// Position-wise feed-forward block with residual and normalisation.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub norm: LayerNorm,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, true, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, true, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, p: f64, mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let h = self.up.forward(g, x);
        let h = g.relu(h);
        let h = dropout(g, h, p, rng.as_deref_mut());
        let h = self.down.forward(g, h);
        let h = dropout(g, h, p, rng);
        let r = g.add(x, h);
        self.norm.forward(g, r)
    }
}
