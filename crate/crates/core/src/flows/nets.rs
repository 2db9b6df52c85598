//! Conditioner networks.

use std::ops::Range;

use rand::RngCore;
use srgbflow_autodiff::{Graph, ParamStore, ParamVars, Tensor, Var};

use super::zero_param;
use crate::error::Result;

/// Same-padded CNN: `depth - 1` hidden ReLU convs, then a zero-initialized
/// output conv.
#[derive(Clone, Debug)]
pub struct ConvNet {
    prefix: String,
    c_in: usize,
    width: usize,
    c_out: usize,
    depth: usize,
    kernel: usize,
}

impl ConvNet {
    pub fn new(prefix: impl Into<String>, c_in: usize, width: usize, c_out: usize, depth: usize, kernel: usize) -> Self {
        Self {
            prefix: prefix.into(),
            c_in,
            width,
            c_out,
            depth: depth.max(1),
            kernel,
        }
    }

    fn layer_dims(&self, i: usize) -> (usize, usize) {
        let cin = if i == 0 { self.c_in } else { self.width };
        let cout = if i + 1 == self.depth { self.c_out } else { self.width };
        (cin, cout)
    }

    fn w(&self, i: usize) -> String {
        format!("{}.conv{i}.w", self.prefix)
    }

    fn b(&self, i: usize) -> String {
        format!("{}.conv{i}.b", self.prefix)
    }

    pub fn init_params(&self, params: &mut ParamStore, rng: &mut dyn RngCore) {
        let k = self.kernel;
        for i in 0..self.depth {
            let (cin, cout) = self.layer_dims(i);
            let shape = [cout, cin, k, k];
            let w = if i + 1 == self.depth {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, (2.0 / (cin * k * k) as f32).sqrt(), rng)
            };
            params.insert(self.w(i), w);
            params.insert(self.b(i), Tensor::zeros(&[cout]));
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.depth {
            let (w, b) = (p.get(&self.w(i))?, p.get(&self.b(i))?);
            h = g.conv2d(h, w, Some(b))?;
            if i + 1 < self.depth {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Zeroes first-layer weights reading the given input channels.
    pub fn zero_inputs(&self, params: &mut ParamStore, channels: Range<usize>) -> Result<()> {
        let k2 = self.kernel * self.kernel;
        let (cin, cout) = self.layer_dims(0);
        let w = params.get_mut(&self.w(0))?;
        let d = w.data_mut();
        for o in 0..cout {
            for c in channels.clone() {
                let base = (o * cin + c) * k2;
                d[base..base + k2].fill(0.0);
            }
        }
        Ok(())
    }

    pub fn head_names(&self) -> (String, String) {
        (self.w(self.depth - 1), self.b(self.depth - 1))
    }
}

/// Dense residual net on the camera/ISO one-hots producing a scalar rescale
/// factor `r = 1 + head(h)` per sample, so `r = 1` at initialization.
#[derive(Clone, Debug)]
pub struct Rescaler {
    prefix: String,
    in_dim: usize,
    width: usize,
}

impl Rescaler {
    pub fn new(prefix: impl Into<String>, in_dim: usize, width: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_dim,
            width,
        }
    }

    fn n(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn init_params(&self, params: &mut ParamStore, rng: &mut dyn RngCore) {
        let (n, w) = (self.in_dim, self.width);
        params.insert(self.n("w1"), Tensor::randn(&[w, n], (2.0 / n as f32).sqrt(), rng));
        params.insert(self.n("b1"), Tensor::zeros(&[w]));
        params.insert(self.n("w2"), Tensor::randn(&[w, w], (2.0 / w as f32).sqrt(), rng));
        params.insert(self.n("b2"), Tensor::zeros(&[w]));
        params.insert(self.n("w3"), Tensor::zeros(&[1, w]));
        params.insert(self.n("b3"), Tensor::zeros(&[1]));
    }

    /// `onehots` is `[N, in_dim]`; returns `[N, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &ParamVars, onehots: Var) -> Result<Var> {
        let h1 = g.dense(onehots, p.get(&self.n("w1"))?, Some(p.get(&self.n("b1"))?))?;
        let h1 = g.relu(h1)?;
        let h2 = g.dense(h1, p.get(&self.n("w2"))?, Some(p.get(&self.n("b2"))?))?;
        let h2 = g.relu(h2)?;
        let h = g.add(h1, h2)?;
        let out = g.dense(h, p.get(&self.n("w3"))?, Some(p.get(&self.n("b3"))?))?;
        Ok(g.add_scalar(out, 1.0)?)
    }

    pub fn zero_inputs(&self, params: &mut ParamStore) -> Result<()> {
        zero_param(params, &self.n("w1"))
    }

    pub fn head_bias_name(&self) -> String {
        self.n("b3")
    }
}
