//! Affine couplings and the non-splitting conditional affine layer.

use rand::RngCore;
use srgbflow_autodiff::{Graph, ParamStore, ParamVars, Var};

use super::nets::{ConvNet, Rescaler};
use super::{check_clean, check_image, soft_clamp, FlowLayer};
use crate::context::{BoundContext, Conditioning, Grid};
use crate::error::Result;

/// Shape of the conditioner networks used by a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetShape {
    pub width: usize,
    pub depth: usize,
    pub kernel: usize,
    pub rescale_width: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            width: 32,
            depth: 3,
            kernel: 3,
            rescale_width: 16,
        }
    }
}

fn rescaler(name: &str, cond: Conditioning, grid: Grid, shape: NetShape) -> Option<Rescaler> {
    cond.uses_camera_or_iso()
        .then(|| Rescaler::new(format!("{name}.fr"), grid.n_cam + grid.n_iso, shape.rescale_width))
}

/// Multiplies a `[N,C,H,W]` log-scale by the per-sample rescale factor, then
/// bounds it.
fn rescaled_log_scale(
    g: &mut Graph,
    p: &ParamVars,
    fr: Option<&Rescaler>,
    cond: Conditioning,
    ls: Var,
    ctx: &BoundContext,
) -> Result<Var> {
    let ls = match fr {
        Some(fr) => {
            let oh = ctx.camera_iso(g, cond)?;
            let r = fr.forward(g, p, oh)?;
            let r = g.reshape(r, &[ctx.len(), 1, 1, 1])?;
            g.mul(ls, r)?
        }
        None => ls,
    };
    soft_clamp(g, ls)
}

/// Coupling on the split `A = {0}`, `B = {1, 2}`:
/// `y_B = x_B * exp(LS) + B` with `(LS, B)` computed from `x_A` and, when
/// visible, the clean patch. A camera/ISO rescale factor multiplies `LS`
/// when either of those inputs is visible. With nothing visible this is the
/// plain unconditional affine coupling.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    name: String,
    cond: Conditioning,
    net: ConvNet,
    fr: Option<Rescaler>,
}

impl AffineCoupling {
    pub fn new(name: impl Into<String>, cond: Conditioning, grid: Grid, shape: NetShape) -> Self {
        let name = name.into();
        let c_in = if cond.clean { 4 } else { 1 };
        Self {
            net: ConvNet::new(format!("{name}.st"), c_in, shape.width, 4, shape.depth, shape.kernel),
            fr: rescaler(&name, cond, grid, shape),
            name,
            cond,
        }
    }

    pub fn net(&self) -> &ConvNet {
        &self.net
    }

    pub fn rescaler(&self) -> Option<&Rescaler> {
        self.fr.as_ref()
    }

    fn scale_shift(&self, g: &mut Graph, p: &ParamVars, xa: Var, ctx: &BoundContext) -> Result<(Var, Var)> {
        let inp = if self.cond.clean {
            let clean = ctx.clean(g, self.cond);
            g.concat(&[xa, clean], 1)?
        } else {
            xa
        };
        let out = self.net.forward(g, p, inp)?;
        let ls = g.narrow(out, 1, 0, 2)?;
        let b = g.narrow(out, 1, 2, 2)?;
        let s = rescaled_log_scale(g, p, self.fr.as_ref(), self.cond, ls, ctx)?;
        Ok((s, b))
    }

    fn check(&self, g: &Graph, x: Var, ctx: &BoundContext) -> Result<()> {
        let (n, h, w) = check_image(g, x, &self.name)?;
        if self.cond.clean {
            check_clean(ctx, n, h, w, &self.name)?;
        }
        Ok(())
    }
}

impl FlowLayer for AffineCoupling {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        if self.cond == Conditioning::NONE {
            "affine_coupling"
        } else {
            "cond_affine_coupling"
        }
    }

    fn init_params(&self, params: &mut ParamStore, rng: &mut dyn RngCore) -> Result<()> {
        self.net.init_params(params, rng);
        if let Some(fr) = &self.fr {
            fr.init_params(params, rng);
        }
        Ok(())
    }

    fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var, ctx: &BoundContext) -> Result<(Var, Var)> {
        self.check(g, x, ctx)?;
        let xa = g.narrow(x, 1, 0, 1)?;
        let xb = g.narrow(x, 1, 1, 2)?;
        let (s, b) = self.scale_shift(g, p, xa, ctx)?;
        let es = g.exp(s)?;
        let yb = g.mul(xb, es)?;
        let yb = g.add(yb, b)?;
        let y = g.concat(&[xa, yb], 1)?;
        Ok((y, g.sum_per_item(s)?))
    }

    fn inverse(&self, g: &mut Graph, p: &ParamVars, y: Var, ctx: &BoundContext) -> Result<Var> {
        self.check(g, y, ctx)?;
        let ya = g.narrow(y, 1, 0, 1)?;
        let yb = g.narrow(y, 1, 1, 2)?;
        let (s, b) = self.scale_shift(g, p, ya, ctx)?;
        let centered = g.sub(yb, b)?;
        let neg = g.neg(s)?;
        let es = g.exp(neg)?;
        let xb = g.mul(centered, es)?;
        Ok(g.concat(&[ya, xb], 1)?)
    }

    fn zero_conditioning(&self, params: &mut ParamStore) -> Result<()> {
        if self.cond.clean {
            self.net.zero_inputs(params, 1..4)?;
        }
        if let Some(fr) = &self.fr {
            fr.zero_inputs(params)?;
        }
        Ok(())
    }
}

/// `y = x * exp(LS) + B` on all three channels, with `(LS, B)` computed from
/// the clean patch only and optionally rescaled by camera/ISO.
#[derive(Clone, Debug)]
pub struct ConditionalAffine {
    name: String,
    cond: Conditioning,
    net: ConvNet,
    fr: Option<Rescaler>,
}

impl ConditionalAffine {
    pub fn new(name: impl Into<String>, cond: Conditioning, grid: Grid, shape: NetShape) -> Self {
        let name = name.into();
        Self {
            net: ConvNet::new(format!("{name}.st"), 3, shape.width, 6, shape.depth, shape.kernel),
            fr: rescaler(&name, cond, grid, shape),
            name,
            cond,
        }
    }

    pub fn net(&self) -> &ConvNet {
        &self.net
    }

    fn scale_shift(&self, g: &mut Graph, p: &ParamVars, ctx: &BoundContext) -> Result<(Var, Var)> {
        let clean = ctx.clean(g, self.cond);
        let out = self.net.forward(g, p, clean)?;
        let ls = g.narrow(out, 1, 0, 3)?;
        let b = g.narrow(out, 1, 3, 3)?;
        let s = rescaled_log_scale(g, p, self.fr.as_ref(), self.cond, ls, ctx)?;
        Ok((s, b))
    }

    fn check(&self, g: &Graph, x: Var, ctx: &BoundContext) -> Result<()> {
        let (n, h, w) = check_image(g, x, &self.name)?;
        check_clean(ctx, n, h, w, &self.name)
    }
}

impl FlowLayer for ConditionalAffine {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        if self.fr.is_some() {
            "cond_affine_full"
        } else {
            "cond_affine_clean"
        }
    }

    fn init_params(&self, params: &mut ParamStore, rng: &mut dyn RngCore) -> Result<()> {
        self.net.init_params(params, rng);
        if let Some(fr) = &self.fr {
            fr.init_params(params, rng);
        }
        Ok(())
    }

    fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var, ctx: &BoundContext) -> Result<(Var, Var)> {
        self.check(g, x, ctx)?;
        let (s, b) = self.scale_shift(g, p, ctx)?;
        let es = g.exp(s)?;
        let y = g.mul(x, es)?;
        let y = g.add(y, b)?;
        Ok((y, g.sum_per_item(s)?))
    }

    fn inverse(&self, g: &mut Graph, p: &ParamVars, y: Var, ctx: &BoundContext) -> Result<Var> {
        self.check(g, y, ctx)?;
        let (s, b) = self.scale_shift(g, p, ctx)?;
        let centered = g.sub(y, b)?;
        let neg = g.neg(s)?;
        let es = g.exp(neg)?;
        Ok(g.mul(centered, es)?)
    }

    fn zero_conditioning(&self, params: &mut ParamStore) -> Result<()> {
        self.net.zero_inputs(params, 0..3)?;
        if let Some(fr) = &self.fr {
            fr.zero_inputs(params)?;
        }
        Ok(())
    }
}
