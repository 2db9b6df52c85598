//! Channel-wise linear layers: invertible 1x1 convolutions and the
//! conditional per-channel scale-and-shift.

use rand::RngCore;
use srgbflow_autodiff::{Graph, ParamStore, ParamVars, Tensor, Var};

use super::{check_image, per_item, random_orthogonal, FlowLayer};
use crate::context::{BoundContext, Conditioning, Grid};
use crate::error::{Error, Result};

/// Invertible 1x1 convolution mixing the three channels of every pixel.
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    name: String,
}

impl Conv1x1 {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into() }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }
}

impl FlowLayer for Conv1x1 {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "conv1x1"
    }

    fn init_params(&self, params: &mut ParamStore, rng: &mut dyn RngCore) -> Result<()> {
        params.insert(self.weight_name(), random_orthogonal(3, rng));
        Ok(())
    }

    fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var, _ctx: &BoundContext) -> Result<(Var, Var)> {
        let (n, h, w) = check_image(g, x, &self.name)?;
        let wt = p.get(&self.weight_name())?;
        let k = g.reshape(wt, &[3, 3, 1, 1])?;
        let y = g.conv2d(x, k, None)?;
        let lad = g.log_abs_det(wt)?;
        let lad = g.scale(lad, (h * w) as f32)?;
        Ok((y, per_item(g, lad, n)?))
    }

    fn inverse(&self, g: &mut Graph, p: &ParamVars, y: Var, _ctx: &BoundContext) -> Result<Var> {
        check_image(g, y, &self.name)?;
        let inv = g.mat_inverse(p.get(&self.weight_name())?)?;
        let k = g.reshape(inv, &[3, 3, 1, 1])?;
        Ok(g.conv2d(y, k, None)?)
    }
}

/// Per-sample channel mixing `y[n] = W[cell(n)] x[n]` with a 3x3 matrix
/// looked up per camera/ISO cell.
#[derive(Clone, Debug)]
pub struct CondConv1x1 {
    name: String,
    cond: Conditioning,
    rows: usize,
}

impl CondConv1x1 {
    pub fn new(name: impl Into<String>, cond: Conditioning, grid: Grid) -> Self {
        Self {
            name: name.into(),
            cond,
            rows: cond.table_rows(grid),
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    /// Distinct rows used by the batch and each sample's position among them.
    fn distinct(&self, ctx: &BoundContext) -> (Vec<usize>, Vec<usize>) {
        let rows = ctx.table_rows(self.cond);
        let mut uniq: Vec<usize> = rows.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let pos = rows.iter().map(|r| uniq.binary_search(r).expect("present")).collect();
        (uniq, pos)
    }

    fn matrix(&self, g: &mut Graph, table: Var, row: usize) -> Result<Var> {
        let m = g.narrow(table, 0, row, 1)?;
        Ok(g.reshape(m, &[3, 3])?)
    }

    fn apply(g: &mut Graph, mats: Var, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let m = g.reshape(mats, &[n, 3, 3, 1])?;
        let xr = g.reshape(x, &[n, 1, 3, h * w])?;
        let prod = g.mul(m, xr)?;
        let y = g.sum_axis(prod, 2, false)?;
        Ok(g.reshape(y, &[n, 3, h, w])?)
    }
}

impl FlowLayer for CondConv1x1 {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "cond_conv1x1"
    }

    fn init_params(&self, params: &mut ParamStore, _rng: &mut dyn RngCore) -> Result<()> {
        let mut t = Tensor::zeros(&[self.rows, 3, 3]);
        for r in 0..self.rows {
            for c in 0..3 {
                t.data_mut()[r * 9 + c * 4] = 1.0;
            }
        }
        params.insert(self.weight_name(), t);
        Ok(())
    }

    fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var, ctx: &BoundContext) -> Result<(Var, Var)> {
        let (n, h, w) = check_image(g, x, &self.name)?;
        let table = p.get(&self.weight_name())?;
        let mats = g.select_rows(table, &ctx.table_rows(self.cond))?;
        let y = Self::apply(g, mats, x, n, h, w)?;
        let (uniq, pos) = self.distinct(ctx);
        let mut dets = Vec::with_capacity(uniq.len());
        for &r in &uniq {
            let m = self.matrix(g, table, r)?;
            let lad = g.log_abs_det(m)?;
            dets.push(g.reshape(lad, &[1])?);
        }
        let dets = g.concat(&dets, 0)?;
        let ld = g.select_rows(dets, &pos)?;
        Ok((y, g.scale(ld, (h * w) as f32)?))
    }

    fn inverse(&self, g: &mut Graph, p: &ParamVars, y: Var, ctx: &BoundContext) -> Result<Var> {
        let (n, h, w) = check_image(g, y, &self.name)?;
        let table = p.get(&self.weight_name())?;
        let (uniq, pos) = self.distinct(ctx);
        let mut invs = Vec::with_capacity(uniq.len());
        for &r in &uniq {
            let m = self.matrix(g, table, r)?;
            let inv = g.mat_inverse(m)?;
            invs.push(g.reshape(inv, &[1, 3, 3])?);
        }
        let invs = g.concat(&invs, 0)?;
        let mats = g.select_rows(invs, &pos)?;
        Self::apply(g, mats, y, n, h, w)
    }

    fn zero_conditioning(&self, params: &mut ParamStore) -> Result<()> {
        copy_first_row(params, &self.weight_name())
    }
}

fn copy_first_row(params: &mut ParamStore, name: &str) -> Result<()> {
    let t = params.get_mut(name)?;
    let per = t.numel() / t.shape()[0];
    let first = t.data()[..per].to_vec();
    for chunk in t.data_mut().chunks_mut(per) {
        chunk.copy_from_slice(&first);
    }
    Ok(())
}

/// `y = x * exp(s[cell]) + t[cell]`, per channel and broadcast over pixels.
///
/// With `channels == 1` the scale is shared across channels; with
/// `bias == false` the layer is a pure gain.
#[derive(Clone, Debug)]
pub struct CondLinear {
    name: String,
    kind: &'static str,
    cond: Conditioning,
    rows: usize,
    channels: usize,
    bias: bool,
}

impl CondLinear {
    pub fn new(name: impl Into<String>, cond: Conditioning, grid: Grid, channels: usize, bias: bool) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!("conditional linear needs 1 or 3 channels, got {channels}")));
        }
        Ok(Self {
            name: name.into(),
            kind: "cond_linear",
            cond,
            rows: cond.table_rows(grid),
            channels,
            bias,
        })
    }

    /// Learned per-ISO scalar gain.
    pub fn gain(name: impl Into<String>, grid: Grid) -> Self {
        Self {
            name: name.into(),
            kind: "gain",
            cond: Conditioning::ISO_ONLY,
            rows: grid.n_iso,
            channels: 1,
            bias: false,
        }
    }

    pub fn log_scale_name(&self) -> String {
        format!("{}.log_scale", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn lookup(&self, g: &mut Graph, p: &ParamVars, ctx: &BoundContext) -> Result<(Var, Option<Var>)> {
        let rows = ctx.table_rows(self.cond);
        let n = rows.len();
        let ls = g.select_rows(p.get(&self.log_scale_name())?, &rows)?;
        let ls = g.reshape(ls, &[n, self.channels, 1, 1])?;
        let t = if self.bias {
            let t = g.select_rows(p.get(&self.bias_name())?, &rows)?;
            Some(g.reshape(t, &[n, self.channels, 1, 1])?)
        } else {
            None
        };
        Ok((ls, t))
    }
}

impl FlowLayer for CondLinear {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        self.kind
    }

    fn init_params(&self, params: &mut ParamStore, _rng: &mut dyn RngCore) -> Result<()> {
        params.insert(self.log_scale_name(), Tensor::zeros(&[self.rows, self.channels]));
        if self.bias {
            params.insert(self.bias_name(), Tensor::zeros(&[self.rows, self.channels]));
        }
        Ok(())
    }

    fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var, ctx: &BoundContext) -> Result<(Var, Var)> {
        let (_, h, w) = check_image(g, x, &self.name)?;
        let (ls, t) = self.lookup(g, p, ctx)?;
        let s = g.exp(ls)?;
        let mut y = g.mul(x, s)?;
        if let Some(t) = t {
            y = g.add(y, t)?;
        }
        let ld = g.sum_per_item(ls)?;
        let ld = g.scale(ld, (h * w * 3 / self.channels) as f32)?;
        Ok((y, ld))
    }

    fn inverse(&self, g: &mut Graph, p: &ParamVars, y: Var, ctx: &BoundContext) -> Result<Var> {
        check_image(g, y, &self.name)?;
        let (ls, t) = self.lookup(g, p, ctx)?;
        let centered = match t {
            Some(t) => g.sub(y, t)?,
            None => y,
        };
        let neg = g.neg(ls)?;
        let s = g.exp(neg)?;
        Ok(g.mul(centered, s)?)
    }

    fn zero_conditioning(&self, params: &mut ParamStore) -> Result<()> {
        copy_first_row(params, &self.log_scale_name())?;
        if self.bias {
            copy_first_row(params, &self.bias_name())?;
        }
        Ok(())
    }
}
