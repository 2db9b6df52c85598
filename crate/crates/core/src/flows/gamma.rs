//! Learnable elementwise power map `y = x^gamma`.

use rand::RngCore;
use srgbflow_autodiff::{Graph, ParamStore, ParamVars, Tensor, TensorError, Var};

use super::{check_clean, check_image, FlowLayer};
use crate::context::{BoundContext, Conditioning};
use crate::error::Result;

/// Inputs are clamped to at least this value before the power.
pub const GAMMA_EPS: f32 = 1e-6;

/// `y = max(x, eps)^gamma` with a learnable scalar `gamma > 0`.
///
/// In anchored mode the layer acts on noise `n` relative to the clean patch
/// `I`: `y = (I + n)^gamma - I^gamma`, mapping image-domain noise through the
/// same power curve.
#[derive(Clone, Debug)]
pub struct InverseGamma {
    name: String,
    anchored: bool,
    init: f32,
}

impl InverseGamma {
    pub fn new(name: impl Into<String>, anchored: bool, init: f32) -> Self {
        Self {
            name: name.into(),
            anchored,
            init,
        }
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }

    fn gamma(&self, g: &mut Graph, p: &ParamVars) -> Result<Var> {
        let gv = p.get(&self.gamma_name())?;
        let val = g.value(gv).item()?;
        if !(val > 0.0) {
            return Err(TensorError::Domain { op: "inverse_gamma" }.into());
        }
        Ok(g.reshape(gv, &[])?)
    }

    /// `I^gamma` for the clamped clean patch, or `None` when not anchored.
    fn anchor(&self, g: &mut Graph, gamma: Var, ctx: &BoundContext) -> Result<Option<(Var, Var)>> {
        if !self.anchored {
            return Ok(None);
        }
        let clean = ctx.clean(g, Conditioning::CLEAN_ONLY);
        let c = g.clamp_min(clean, GAMMA_EPS)?;
        Ok(Some((clean, g.pow(c, gamma)?)))
    }

    fn check(&self, g: &Graph, x: Var, ctx: &BoundContext) -> Result<()> {
        let (n, h, w) = check_image(g, x, &self.name)?;
        if self.anchored {
            check_clean(ctx, n, h, w, &self.name)?;
        }
        Ok(())
    }
}

impl FlowLayer for InverseGamma {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "inverse_gamma"
    }

    fn init_params(&self, params: &mut ParamStore, _rng: &mut dyn RngCore) -> Result<()> {
        params.insert(self.gamma_name(), Tensor::scalar(self.init));
        Ok(())
    }

    fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var, ctx: &BoundContext) -> Result<(Var, Var)> {
        self.check(g, x, ctx)?;
        let gamma = self.gamma(g, p)?;
        let anchor = self.anchor(g, gamma, ctx)?;
        let v = match anchor {
            Some((clean, _)) => g.add(x, clean)?,
            None => x,
        };
        let v = g.clamp_min(v, GAMMA_EPS)?;
        let mut y = g.pow(v, gamma)?;
        if let Some((_, base)) = anchor {
            y = g.sub(y, base)?;
        }
        // logdet = D log(gamma) + (gamma - 1) sum(log v)
        let dims: usize = g.shape(x)[1..].iter().product();
        let lv = g.log(v)?;
        let slv = g.sum_per_item(lv)?;
        let gm1 = g.add_scalar(gamma, -1.0)?;
        let term = g.mul(slv, gm1)?;
        let lg = g.log(gamma)?;
        let lg = g.scale(lg, dims as f32)?;
        Ok((y, g.add(term, lg)?))
    }

    fn inverse(&self, g: &mut Graph, p: &ParamVars, y: Var, ctx: &BoundContext) -> Result<Var> {
        self.check(g, y, ctx)?;
        let gamma = self.gamma(g, p)?;
        let anchor = self.anchor(g, gamma, ctx)?;
        let u = match anchor {
            Some((_, base)) => g.add(y, base)?,
            None => y,
        };
        let u = g.clamp_min(u, GAMMA_EPS)?;
        let one = g.constant(Tensor::scalar(1.0));
        let inv = g.div(one, gamma)?;
        let v = g.pow(u, inv)?;
        Ok(match anchor {
            Some((clean, _)) => g.sub(v, clean)?,
            None => v,
        })
    }
}
