//! Monotone rational-quadratic spline coupling with identity tails.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use srgbflow_autodiff::{Graph, ParamStore, ParamVars, Tensor, Var};

use super::coupling::NetShape;
use super::nets::{ConvNet, Rescaler};
use super::{check_clean, check_image, FlowLayer};
use crate::context::{BoundContext, Conditioning, Grid};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplineConfig {
    pub bins: usize,
    pub tail_bound: f32,
    pub min_bin_width: f32,
    pub min_bin_height: f32,
    pub min_derivative: f32,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            tail_bound: 3.0,
            min_bin_width: 1e-3,
            min_bin_height: 1e-3,
            min_derivative: 1e-3,
        }
    }
}

impl SplineConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.bins as f32;
        let ok = self.bins >= 2
            && self.tail_bound > 0.0
            && self.min_bin_width > 0.0
            && self.min_bin_height > 0.0
            && self.min_derivative > 0.0
            && self.min_bin_width * k < 1.0
            && self.min_bin_height * k < 1.0
            && self.min_derivative < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid spline configuration {self:?}")))
        }
    }

    /// Raw parameters per transformed element: widths, heights and interior
    /// derivatives.
    pub fn params_per_element(&self) -> usize {
        3 * self.bins - 1
    }

    /// Offset making a zero raw derivative map to exactly 1.
    fn derivative_offset(&self) -> f32 {
        ((1.0 - self.min_derivative).exp() - 1.0).ln()
    }
}

/// Unnormalized spline parameters laid out as `[M, K or K-1, L]`.
pub(crate) struct SplineParams {
    pub widths: Var,
    pub heights: Var,
    pub derivatives: Var,
}

struct Knots {
    xs: Var,
    ys: Var,
    widths: Var,
    heights: Var,
    derivs: Var,
}

fn knots(g: &mut Graph, raw: &SplineParams, cfg: &SplineConfig) -> Result<Knots> {
    let k = cfg.bins;
    let t = cfg.tail_bound;
    let shape = g.shape(raw.widths).to_vec();
    let (m, l) = (shape[0], shape[2]);
    let edge_lo = g.constant(Tensor::full(&[m, 1, l], -t));
    let positions = |g: &mut Graph, u: Var, min: f32| -> Result<(Var, Var)> {
        let p = g.softmax(u, 1)?;
        let p = g.scale(p, 1.0 - k as f32 * min)?;
        let p = g.add_scalar(p, min)?;
        let sizes = g.scale(p, 2.0 * t)?;
        let c = g.cumsum(sizes, 1)?;
        let c = g.add_scalar(c, -t)?;
        let pos = g.concat(&[edge_lo, c], 1)?;
        Ok((pos, sizes))
    };
    let (xs, widths) = positions(g, raw.widths, cfg.min_bin_width)?;
    let (ys, heights) = positions(g, raw.heights, cfg.min_bin_height)?;
    let d = g.add_scalar(raw.derivatives, cfg.derivative_offset())?;
    let d = g.softplus(d)?;
    let d = g.add_scalar(d, cfg.min_derivative)?;
    let ones = g.constant(Tensor::ones(&[m, 1, l]));
    let derivs = g.concat(&[ones, d, ones], 1)?;
    Ok(Knots {
        xs,
        ys,
        widths,
        heights,
        derivs,
    })
}

/// Bin index of every value in `v` ([M,1,L]) among knots `pos` ([M,K+1,L]).
fn search(pos: &Tensor, v: &Tensor, bins: usize) -> Vec<usize> {
    let (m, l) = (v.shape()[0], v.shape()[2]);
    let (p, vd) = (pos.data(), v.data());
    let mut out = vec![0usize; m * l];
    for r in 0..m {
        for i in 0..l {
            let x = vd[r * l + i];
            let mut b = 0;
            for k in 1..bins {
                if p[(r * (bins + 1) + k) * l + i] <= x {
                    b = k;
                } else {
                    break;
                }
            }
            out[r * l + i] = b;
        }
    }
    out
}

fn inside_mask(v: &Tensor, bound: f32) -> Tensor {
    v.map(|x| if x.abs() < bound { 1.0 } else { 0.0 })
}

struct Gathered {
    xk: Var,
    yk: Var,
    wk: Var,
    hk: Var,
    dk: Var,
    dk1: Var,
}

fn gather_bins(g: &mut Graph, kn: &Knots, idx: &[usize], shape: &[usize]) -> Result<Gathered> {
    let next: Vec<usize> = idx.iter().map(|i| i + 1).collect();
    Ok(Gathered {
        xk: g.gather(kn.xs, 1, idx, shape)?,
        yk: g.gather(kn.ys, 1, idx, shape)?,
        wk: g.gather(kn.widths, 1, idx, shape)?,
        hk: g.gather(kn.heights, 1, idx, shape)?,
        dk: g.gather(kn.derivs, 1, idx, shape)?,
        dk1: g.gather(kn.derivs, 1, &next, shape)?,
    })
}

/// Elementwise spline on `x` ([M,1,L]); returns `y` and `log dy/dx` (zero in
/// the tails).
pub(crate) fn spline_forward(g: &mut Graph, x: Var, raw: &SplineParams, cfg: &SplineConfig) -> Result<(Var, Var)> {
    let kn = knots(g, raw, cfg)?;
    let shape = g.shape(x).to_vec();
    let mask_t = inside_mask(g.value(x), cfg.tail_bound);
    let outside_t = mask_t.map(|v| 1.0 - v);
    let mask = g.constant(mask_t);
    let outside = g.constant(outside_t);
    let x_in = g.mul(x, mask)?;
    let idx = search(g.value(kn.xs), g.value(x_in), cfg.bins);
    let b = gather_bins(g, &kn, &idx, &shape)?;

    let s = g.div(b.hk, b.wk)?;
    let dx = g.sub(x_in, b.xk)?;
    let xi = g.div(dx, b.wk)?;
    let one_minus = g.neg(xi)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let t = g.mul(xi, one_minus)?;
    let xi2 = g.square(xi)?;

    // y = yk + hk (s xi^2 + dk t) / (s + (dk1 + dk - 2s) t)
    let sxi2 = g.mul(s, xi2)?;
    let dkt = g.mul(b.dk, t)?;
    let inner = g.add(sxi2, dkt)?;
    let num = g.mul(b.hk, inner)?;
    let dsum = g.add(b.dk1, b.dk)?;
    let two_s = g.scale(s, 2.0)?;
    let coef = g.sub(dsum, two_s)?;
    let ct = g.mul(coef, t)?;
    let den = g.add(s, ct)?;
    let frac = g.div(num, den)?;
    let y_in = g.add(b.yk, frac)?;

    // dy/dx = s^2 (dk1 xi^2 + 2 s t + dk (1-xi)^2) / den^2
    let a1 = g.mul(b.dk1, xi2)?;
    let a2 = g.mul(two_s, t)?;
    let om2 = g.square(one_minus)?;
    let a3 = g.mul(b.dk, om2)?;
    let dnum = g.add(a1, a2)?;
    let dnum = g.add(dnum, a3)?;
    let ls = g.log(s)?;
    let ld_num = g.log(dnum)?;
    let ld_den = g.log(den)?;
    let ls2 = g.scale(ls, 2.0)?;
    let lden2 = g.scale(ld_den, -2.0)?;
    let logabs = g.add(ls2, ld_num)?;
    let logabs = g.add(logabs, lden2)?;

    let y_inside = g.mul(y_in, mask)?;
    let y_tail = g.mul(x, outside)?;
    let y = g.add(y_inside, y_tail)?;
    let logabs = g.mul(logabs, mask)?;
    Ok((y, logabs))
}

pub(crate) fn spline_inverse(g: &mut Graph, y: Var, raw: &SplineParams, cfg: &SplineConfig) -> Result<Var> {
    let kn = knots(g, raw, cfg)?;
    let shape = g.shape(y).to_vec();
    let mask_t = inside_mask(g.value(y), cfg.tail_bound);
    let outside_t = mask_t.map(|v| 1.0 - v);
    let mask = g.constant(mask_t);
    let outside = g.constant(outside_t);
    let y_in = g.mul(y, mask)?;
    let idx = search(g.value(kn.ys), g.value(y_in), cfg.bins);
    let b = gather_bins(g, &kn, &idx, &shape)?;

    let s = g.div(b.hk, b.wk)?;
    let dy = g.sub(y_in, b.yk)?;
    let dsum = g.add(b.dk1, b.dk)?;
    let two_s = g.scale(s, 2.0)?;
    let coef = g.sub(dsum, two_s)?;
    let dyc = g.mul(dy, coef)?;
    // a = hk (s - dk) + dy coef; b = hk dk - dy coef; c = -s dy
    let s_dk = g.sub(s, b.dk)?;
    let a = g.mul(b.hk, s_dk)?;
    let a = g.add(a, dyc)?;
    let hd = g.mul(b.hk, b.dk)?;
    let bb = g.sub(hd, dyc)?;
    let c = g.mul(s, dy)?;
    let c = g.neg(c)?;
    let b2 = g.square(bb)?;
    let ac = g.mul(a, c)?;
    let ac4 = g.scale(ac, 4.0)?;
    let disc = g.sub(b2, ac4)?;
    let disc = g.clamp_min(disc, 0.0)?;
    let root = g.sqrt(disc)?;
    // Pick the root formula without cancellation: 2c / (-b - sqrt(D)) when
    // b >= 0, otherwise (-b + sqrt(D)) / 2a.
    let pos_t = g.value(bb).map(|v| if v >= 0.0 { 1.0 } else { 0.0 });
    let neg_t = pos_t.map(|v| 1.0 - v);
    let pos = g.constant(pos_t);
    let neg = g.constant(neg_t);
    let nb = g.neg(bb)?;
    let den1 = g.sub(nb, root)?;
    let den1 = g.mul(den1, pos)?;
    let den1 = g.add(den1, neg)?;
    let c2 = g.scale(c, 2.0)?;
    let xi1 = g.div(c2, den1)?;
    let num2 = g.add(nb, root)?;
    let den2 = g.scale(a, 2.0)?;
    let den2 = g.mul(den2, neg)?;
    let den2 = g.add(den2, pos)?;
    let xi2 = g.div(num2, den2)?;
    let xi1 = g.mul(xi1, pos)?;
    let xi2 = g.mul(xi2, neg)?;
    let xi = g.add(xi1, xi2)?;
    let xw = g.mul(xi, b.wk)?;
    let x_in = g.add(xw, b.xk)?;

    let x_inside = g.mul(x_in, mask)?;
    let x_tail = g.mul(y, outside)?;
    Ok(g.add(x_inside, x_tail)?)
}

/// Coupling with `x_B` transformed by an elementwise spline whose parameters
/// come from `x_A` and, when visible, the clean patch. Bin widths and heights
/// are multiplied by a camera/ISO rescale factor when those are visible.
#[derive(Clone, Debug)]
pub struct SplineCoupling {
    name: String,
    cond: Conditioning,
    cfg: SplineConfig,
    net: ConvNet,
    fr: Option<Rescaler>,
}

impl SplineCoupling {
    pub fn new(
        name: impl Into<String>,
        cond: Conditioning,
        grid: Grid,
        shape: NetShape,
        cfg: SplineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let c_in = if cond.clean { 4 } else { 1 };
        let c_out = 2 * cfg.params_per_element();
        Ok(Self {
            net: ConvNet::new(format!("{name}.st"), c_in, shape.width, c_out, shape.depth, shape.kernel),
            fr: cond
                .uses_camera_or_iso()
                .then(|| Rescaler::new(format!("{name}.fr"), grid.n_cam + grid.n_iso, shape.rescale_width)),
            name,
            cond,
            cfg,
        })
    }

    pub fn net(&self) -> &ConvNet {
        &self.net
    }

    fn raw_params(&self, g: &mut Graph, p: &ParamVars, xa: Var, ctx: &BoundContext) -> Result<SplineParams> {
        let (n, h, w) = (g.shape(xa)[0], g.shape(xa)[2], g.shape(xa)[3]);
        let inp = if self.cond.clean {
            let clean = ctx.clean(g, self.cond);
            g.concat(&[xa, clean], 1)?
        } else {
            xa
        };
        let out = self.net.forward(g, p, inp)?;
        let per = self.cfg.params_per_element();
        let k = self.cfg.bins;
        let out = g.reshape(out, &[n * 2, per, h * w])?;
        let mut widths = g.narrow(out, 1, 0, k)?;
        let mut heights = g.narrow(out, 1, k, k)?;
        let derivatives = g.narrow(out, 1, 2 * k, k - 1)?;
        if let Some(fr) = &self.fr {
            let oh = ctx.camera_iso(g, self.cond)?;
            let r = fr.forward(g, p, oh)?;
            let rows: Vec<usize> = (0..n).flat_map(|i| [i, i]).collect();
            let r = g.select_rows(r, &rows)?;
            let r = g.reshape(r, &[n * 2, 1, 1])?;
            widths = g.mul(widths, r)?;
            heights = g.mul(heights, r)?;
        }
        Ok(SplineParams {
            widths,
            heights,
            derivatives,
        })
    }

    fn check(&self, g: &Graph, x: Var, ctx: &BoundContext) -> Result<(usize, usize, usize)> {
        let (n, h, w) = check_image(g, x, &self.name)?;
        if self.cond.clean {
            check_clean(ctx, n, h, w, &self.name)?;
        }
        Ok((n, h, w))
    }
}

impl FlowLayer for SplineCoupling {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        if self.cond == Conditioning::NONE {
            "spline_coupling"
        } else {
            "cond_spline_coupling"
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
        let (n, h, w) = self.check(g, x, ctx)?;
        let xa = g.narrow(x, 1, 0, 1)?;
        let xb = g.narrow(x, 1, 1, 2)?;
        let raw = self.raw_params(g, p, xa, ctx)?;
        let xb = g.reshape(xb, &[n * 2, 1, h * w])?;
        let (yb, logabs) = spline_forward(g, xb, &raw, &self.cfg)?;
        let yb = g.reshape(yb, &[n, 2, h, w])?;
        let logabs = g.reshape(logabs, &[n, 2 * h * w])?;
        let ld = g.sum_axis(logabs, 1, false)?;
        Ok((g.concat(&[xa, yb], 1)?, ld))
    }

    fn inverse(&self, g: &mut Graph, p: &ParamVars, y: Var, ctx: &BoundContext) -> Result<Var> {
        let (n, h, w) = self.check(g, y, ctx)?;
        let ya = g.narrow(y, 1, 0, 1)?;
        let yb = g.narrow(y, 1, 1, 2)?;
        let raw = self.raw_params(g, p, ya, ctx)?;
        let yb = g.reshape(yb, &[n * 2, 1, h * w])?;
        let xb = spline_inverse(g, yb, &raw, &self.cfg)?;
        let xb = g.reshape(xb, &[n, 2, h, w])?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(g: &mut Graph, m: usize, l: usize, cfg: &SplineConfig, std: f32, rng: &mut ChaCha8Rng) -> SplineParams {
        let k = cfg.bins;
        SplineParams {
            widths: g.constant(Tensor::randn(&[m, k, l], std, rng)),
            heights: g.constant(Tensor::randn(&[m, k, l], std, rng)),
            derivatives: g.constant(Tensor::randn(&[m, k - 1, l], std, rng)),
        }
    }

    #[test]
    fn zero_parameters_give_identity() {
        let cfg = SplineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let p = raw(&mut g, 2, 50, &cfg, 0.0, &mut rng);
        let xt = Tensor::uniform(&[2, 1, 50], -4.0, 4.0, &mut rng);
        let x = g.constant(xt.clone());
        let (y, ld) = spline_forward(&mut g, x, &p, &cfg).unwrap();
        assert!(g.value(y).max_abs_diff(&xt).unwrap() < 1e-5);
        assert!(g.value(ld).data().iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn tails_are_identity() {
        let cfg = SplineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let p = raw(&mut g, 1, 4, &cfg, 1.5, &mut rng);
        let xt = Tensor::new(&[1, 1, 4], vec![-7.0, -3.0, 3.0, 5.5]).unwrap();
        let x = g.constant(xt.clone());
        let (y, ld) = spline_forward(&mut g, x, &p, &cfg).unwrap();
        assert_eq!(g.value(y), &xt);
        assert!(g.value(ld).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_and_monotone_over_random_parameters() {
        let cfg = SplineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut g = Graph::new();
            let p = raw(&mut g, 1, 1, &cfg, 2.0, &mut rng);
            // 100 sorted probes sharing one parameterization.
            let probes: Vec<f32> = (0..100).map(|i| -3.5 + 7.0 * i as f32 / 99.0).collect();
            let mut prev = f32::NEG_INFINITY;
            for &v in &probes {
                let x = g.constant(Tensor::new(&[1, 1, 1], vec![v]).unwrap());
                let (y, ld) = spline_forward(&mut g, x, &p, &cfg).unwrap();
                let yv = g.value(y).data()[0];
                assert!(yv > prev, "not increasing at {v}");
                prev = yv;
                assert!(g.value(ld).data()[0].is_finite());
                let back = spline_inverse(&mut g, y, &p, &cfg).unwrap();
                let xb = g.value(back).data()[0];
                // Inverting a rounded f32 `y` cannot beat ulp(y) / slope in x.
                let slope = g.value(ld).data()[0].exp();
                let ulp = f32::EPSILON * yv.abs().max(1.0);
                let err = (xb - v).abs();
                assert!(err < 1e-5 + 4.0 * ulp / slope, "x={v} err={err} slope={slope}");
                let (y2, _) = spline_forward(&mut g, back, &p, &cfg).unwrap();
                assert!((g.value(y2).data()[0] - yv).abs() < 1e-5);
            }
        }
    }
}
