//! Bijective layers. `forward` maps data to base space and returns the
//! per-sample log-determinant `[N]`; `inverse` maps base to data.

mod coupling;
mod gamma;
mod linear;
mod nets;
mod signal;
mod spline;

use std::fmt;

use rand::RngCore;
use srgbflow_autodiff::{Graph, ParamStore, ParamVars, Tensor, Var};

use crate::context::BoundContext;
use crate::error::{Error, Result};

pub use coupling::{AffineCoupling, ConditionalAffine, NetShape};
pub use gamma::{InverseGamma, GAMMA_EPS};
pub use linear::{CondConv1x1, CondLinear, Conv1x1};
pub use nets::{ConvNet, Rescaler};
pub use signal::{softplus_inv, SignalDependent, SOFTPLUS_ZERO};
pub use spline::{SplineConfig, SplineCoupling};

/// Bound applied to log-scales: `alpha * tanh(v / alpha)`.
pub const LOG_SCALE_BOUND: f32 = 5.0;

pub trait FlowLayer: Send + Sync + fmt::Debug {
    /// Unique parameter prefix of this layer within a model.
    fn name(&self) -> &str;

    /// Stable type name.
    fn kind(&self) -> &'static str;

    fn init_params(&self, params: &mut ParamStore, rng: &mut dyn RngCore) -> Result<()>;

    fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var, ctx: &BoundContext) -> Result<(Var, Var)>;

    fn inverse(&self, g: &mut Graph, p: &ParamVars, y: Var, ctx: &BoundContext) -> Result<Var>;

    /// Zeroes the weights through which conditioning inputs enter, making the
    /// layer's output independent of the context.
    fn zero_conditioning(&self, _params: &mut ParamStore) -> Result<()> {
        Ok(())
    }
}

pub(crate) fn soft_clamp(g: &mut Graph, v: Var) -> Result<Var> {
    let s = g.scale(v, 1.0 / LOG_SCALE_BOUND)?;
    let t = g.tanh(s)?;
    Ok(g.scale(t, LOG_SCALE_BOUND)?)
}

/// Broadcasts a rank-0 value to `[n]`.
pub(crate) fn per_item(g: &mut Graph, scalar: Var, n: usize) -> Result<Var> {
    let ones = g.constant(Tensor::ones(&[n]));
    Ok(g.mul(ones, scalar)?)
}

pub(crate) fn check_image(g: &Graph, x: Var, layer: &str) -> Result<(usize, usize, usize)> {
    match g.shape(x) {
        [n, 3, h, w] => Ok((*n, *h, *w)),
        s => Err(Error::Data(format!("layer `{layer}` expects [N,3,H,W] input, got {s:?}"))),
    }
}

pub(crate) fn check_clean(ctx: &BoundContext, n: usize, h: usize, w: usize, layer: &str) -> Result<()> {
    let s = ctx.batch.clean.shape();
    if s != [n, 3, h, w] {
        return Err(Error::Data(format!(
            "layer `{layer}`: clean patch {s:?} does not match input [{n},3,{h},{w}]"
        )));
    }
    Ok(())
}

pub(crate) fn zero_param(params: &mut ParamStore, name: &str) -> Result<()> {
    params.get_mut(name)?.data_mut().fill(0.0);
    Ok(())
}

/// Orthogonal `[n,n]` matrix from Gram-Schmidt on a Gaussian draw.
pub(crate) fn random_orthogonal(n: usize, rng: &mut dyn RngCore) -> Tensor {
    loop {
        let m = Tensor::randn(&[n, n], 1.0, rng);
        let mut rows: Vec<Vec<f64>> = m.data().chunks(n).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = (0..n).map(|k| rows[i][k] * rows[j][k]).sum();
                for k in 0..n {
                    rows[i][k] -= dot * rows[j][k];
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            let data = rows.into_iter().flatten().map(|v| v as f32).collect();
            return Tensor::new(&[n, n], data).expect("square matrix");
        }
    }
}
