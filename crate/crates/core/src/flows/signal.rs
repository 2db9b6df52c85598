//! Signal-dependent scaling by the heteroscedastic noise level function.

use rand::RngCore;
use srgbflow_autodiff::{Graph, ParamStore, ParamVars, Tensor, Var};

use super::{check_clean, check_image, FlowLayer};
use crate::context::{BoundContext, Conditioning, Grid};
use crate::error::Result;

/// Raw value whose softplus is exactly zero in f32.
pub const SOFTPLUS_ZERO: f32 = -200.0;

/// Inverse of softplus for positive `v`.
pub fn softplus_inv(v: f32) -> f32 {
    if v > 20.0 {
        v
    } else {
        v.exp_m1().ln()
    }
}

/// `y = x / sqrt(beta1 * I + beta2)` per channel, with `beta1, beta2 =
/// softplus(raw)` looked up per camera/ISO cell and `I` the clean patch.
#[derive(Clone, Debug)]
pub struct SignalDependent {
    name: String,
    cond: Conditioning,
    rows: usize,
    init_beta1: f32,
    init_beta2: f32,
}

impl SignalDependent {
    pub fn new(name: impl Into<String>, cond: Conditioning, grid: Grid, init_beta1: f32, init_beta2: f32) -> Self {
        Self {
            name: name.into(),
            cond,
            rows: cond.table_rows(grid),
            init_beta1,
            init_beta2,
        }
    }

    pub fn beta1_name(&self) -> String {
        format!("{}.beta1", self.name)
    }

    pub fn beta2_name(&self) -> String {
        format!("{}.beta2", self.name)
    }

    /// `-0.5 log(beta1 I + beta2)`, shape `[N,3,H,W]`.
    fn log_scale(&self, g: &mut Graph, p: &ParamVars, ctx: &BoundContext) -> Result<Var> {
        let rows = ctx.table_rows(self.cond);
        let n = rows.len();
        let lookup = |g: &mut Graph, name: &str| -> Result<Var> {
            let t = g.select_rows(p.get(name)?, &rows)?;
            let t = g.softplus(t)?;
            Ok(g.reshape(t, &[n, 3, 1, 1])?)
        };
        let b1 = lookup(g, &self.beta1_name())?;
        let b2 = lookup(g, &self.beta2_name())?;
        let clean = ctx.clean(g, Conditioning::CLEAN_ONLY);
        let var = g.mul(clean, b1)?;
        let var = g.add(var, b2)?;
        let lv = g.log(var)?;
        Ok(g.scale(lv, -0.5)?)
    }

    fn check(&self, g: &Graph, x: Var, ctx: &BoundContext) -> Result<()> {
        let (n, h, w) = check_image(g, x, &self.name)?;
        check_clean(ctx, n, h, w, &self.name)
    }
}

impl FlowLayer for SignalDependent {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "signal_dependent"
    }

    fn init_params(&self, params: &mut ParamStore, _rng: &mut dyn RngCore) -> Result<()> {
        let raw = |v: f32| if v > 0.0 { softplus_inv(v) } else { SOFTPLUS_ZERO };
        params.insert(self.beta1_name(), Tensor::full(&[self.rows, 3], raw(self.init_beta1)));
        params.insert(self.beta2_name(), Tensor::full(&[self.rows, 3], raw(self.init_beta2)));
        Ok(())
    }

    fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var, ctx: &BoundContext) -> Result<(Var, Var)> {
        self.check(g, x, ctx)?;
        let ls = self.log_scale(g, p, ctx)?;
        let s = g.exp(ls)?;
        let y = g.mul(x, s)?;
        Ok((y, g.sum_per_item(ls)?))
    }

    fn inverse(&self, g: &mut Graph, p: &ParamVars, y: Var, ctx: &BoundContext) -> Result<Var> {
        self.check(g, y, ctx)?;
        let ls = self.log_scale(g, p, ctx)?;
        let neg = g.neg(ls)?;
        let s = g.exp(neg)?;
        Ok(g.mul(y, s)?)
    }

    fn zero_conditioning(&self, params: &mut ParamStore) -> Result<()> {
        params.get_mut(&self.beta1_name())?.data_mut().fill(SOFTPLUS_ZERO);
        let b2 = params.get_mut(&self.beta2_name())?;
        let first = b2.data()[..3].to_vec();
        for row in b2.data_mut().chunks_mut(3) {
            row.copy_from_slice(&first);
        }
        Ok(())
    }
}
