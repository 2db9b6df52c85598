//! Model specifications and the composed flow.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use srgbflow_autodiff::{checkpoint, Graph, ParamStore, ParamVars, Tensor, TensorError, Var};

use crate::context::{BoundContext, Conditioning, ContextBatch, Grid};
use crate::data::DequantConfig;
use crate::error::{Error, Result};
use crate::flows::{
    AffineCoupling, CondConv1x1, CondLinear, ConditionalAffine, Conv1x1, FlowLayer, InverseGamma, NetShape,
    SignalDependent, SplineConfig, SplineCoupling,
};

/// Conditioner network sizes shared by every layer of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub width: usize,
    pub depth: usize,
    pub kernel: usize,
    pub rescale_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        let s = NetShape::default();
        Self {
            width: s.width,
            depth: s.depth,
            kernel: s.kernel,
            rescale_width: s.rescale_width,
        }
    }
}

impl NetConfig {
    fn shape(&self) -> NetShape {
        NetShape {
            width: self.width,
            depth: self.depth,
            kernel: self.kernel,
            rescale_width: self.rescale_width,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.kernel.is_multiple_of(2) || self.rescale_width == 0 {
            return Err(Error::Config(format!("invalid conditioner network {self:?}")));
        }
        Ok(())
    }
}

fn all() -> Conditioning {
    Conditioning::ALL
}

fn camera_iso() -> Conditioning {
    Conditioning::CAMERA_ISO
}

fn yes() -> bool {
    true
}

fn default_gamma() -> f32 {
    2.2
}

fn default_beta1() -> f32 {
    1e-4
}

fn default_beta2() -> f32 {
    1e-3
}

/// One layer of a model, identified by a stable type name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerDesc {
    /// Per-cell, per-channel scale and shift (`tied` shares one scale).
    CondLinear {
        #[serde(default = "camera_iso")]
        cond: Conditioning,
        #[serde(default)]
        tied: bool,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// Per-ISO scalar gain.
    Gain,
    Conv1x1,
    CondConv1x1 {
        #[serde(default = "camera_iso")]
        cond: Conditioning,
    },
    AffineCoupling,
    CondAffineCoupling {
        #[serde(default = "all")]
        cond: Conditioning,
    },
    SplineCoupling,
    CondSplineCoupling {
        #[serde(default = "all")]
        cond: Conditioning,
    },
    /// Affine on all channels from the clean patch, rescaled by camera/ISO.
    CondAffineFull {
        #[serde(default = "all")]
        cond: Conditioning,
    },
    /// Affine on all channels from the clean patch only.
    CondAffineClean,
    InverseGamma {
        #[serde(default)]
        anchored: bool,
        #[serde(default = "default_gamma")]
        init: f32,
    },
    SignalDependent {
        #[serde(default = "camera_iso")]
        cond: Conditioning,
        #[serde(default = "default_beta1")]
        init_beta1: f32,
        #[serde(default = "default_beta2")]
        init_beta2: f32,
    },
}

impl LayerDesc {
    pub fn type_name(&self) -> &'static str {
        match self {
            LayerDesc::CondLinear { .. } => "cond_linear",
            LayerDesc::Gain => "gain",
            LayerDesc::Conv1x1 => "conv1x1",
            LayerDesc::CondConv1x1 { .. } => "cond_conv1x1",
            LayerDesc::AffineCoupling => "affine_coupling",
            LayerDesc::CondAffineCoupling { .. } => "cond_affine_coupling",
            LayerDesc::SplineCoupling => "spline_coupling",
            LayerDesc::CondSplineCoupling { .. } => "cond_spline_coupling",
            LayerDesc::CondAffineFull { .. } => "cond_affine_full",
            LayerDesc::CondAffineClean => "cond_affine_clean",
            LayerDesc::InverseGamma { .. } => "inverse_gamma",
            LayerDesc::SignalDependent { .. } => "signal_dependent",
        }
    }

    fn build(&self, name: String, spec: &ModelSpec) -> Result<Box<dyn FlowLayer>> {
        let grid = spec.grid();
        let shape = spec.net.shape();
        Ok(match *self {
            LayerDesc::CondLinear { cond, tied, bias } => {
                Box::new(CondLinear::new(name, cond, grid, if tied { 1 } else { 3 }, bias)?)
            }
            LayerDesc::Gain => Box::new(CondLinear::gain(name, grid)),
            LayerDesc::Conv1x1 => Box::new(Conv1x1::new(name)),
            LayerDesc::CondConv1x1 { cond } => Box::new(CondConv1x1::new(name, cond, grid)),
            LayerDesc::AffineCoupling => Box::new(AffineCoupling::new(name, Conditioning::NONE, grid, shape)),
            LayerDesc::CondAffineCoupling { cond } => Box::new(AffineCoupling::new(name, cond, grid, shape)),
            LayerDesc::SplineCoupling => Box::new(SplineCoupling::new(
                name,
                Conditioning::NONE,
                grid,
                shape,
                spec.spline,
            )?),
            LayerDesc::CondSplineCoupling { cond } => {
                Box::new(SplineCoupling::new(name, cond, grid, shape, spec.spline)?)
            }
            LayerDesc::CondAffineFull { cond } => Box::new(ConditionalAffine::new(name, cond, grid, shape)),
            LayerDesc::CondAffineClean => {
                Box::new(ConditionalAffine::new(name, Conditioning::CLEAN_ONLY, grid, shape))
            }
            LayerDesc::InverseGamma { anchored, init } => {
                if !(init > 0.0) {
                    return Err(Error::Config(format!("inverse gamma needs gamma > 0, got {init}")));
                }
                Box::new(InverseGamma::new(name, anchored, init))
            }
            LayerDesc::SignalDependent {
                cond,
                init_beta1,
                init_beta2,
            } => {
                if init_beta1 < 0.0 || !(init_beta2 > 0.0) {
                    return Err(Error::Config(format!(
                        "signal-dependent layer needs beta1 >= 0 and beta2 > 0, got {init_beta1}, {init_beta2}"
                    )));
                }
                Box::new(SignalDependent::new(name, cond, grid, init_beta1, init_beta2))
            }
        })
    }
}

/// Serializable description of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub n_cam: usize,
    pub n_iso: usize,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub spline: SplineConfig,
    #[serde(default)]
    pub dequant: DequantConfig,
    pub layers: Vec<LayerDesc>,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, grid: Grid, layers: Vec<LayerDesc>) -> Self {
        Self {
            name: name.into(),
            n_cam: grid.n_cam,
            n_iso: grid.n_iso,
            net: NetConfig::default(),
            spline: SplineConfig::default(),
            dequant: DequantConfig::default(),
            layers,
        }
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.n_cam, self.n_iso)
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.net.width = width;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("model spec: {e}")))
    }

    /// Parameter prefix of layer `index`.
    pub fn layer_name(&self, index: usize) -> String {
        format!("{index:02}.{}", self.layers[index].type_name())
    }

    fn build_layers(&self) -> Result<Vec<Box<dyn FlowLayer>>> {
        if self.n_cam == 0 || self.n_iso == 0 {
            return Err(Error::Config("model grid must have at least one camera and ISO".into()));
        }
        self.net.validate()?;
        self.spline.validate()?;
        self.dequant.validate()?;
        (0..self.layers.len())
            .map(|i| self.layers[i].build(self.layer_name(i), self))
            .collect()
    }
}

/// Per-layer values recorded by [`FlowModel::trace`].
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub name: String,
    pub output: Tensor,
    pub logdet: Tensor,
}

/// An ordered composition of flow layers with their parameters.
#[derive(Debug)]
pub struct FlowModel {
    spec: ModelSpec,
    layers: Vec<Box<dyn FlowLayer>>,
    params: ParamStore,
}

const LN_2PI: f32 = 1.837_877_1;

impl FlowModel {
    /// Builds the layers and draws initial parameters from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(spec, &mut rng)
    }

    pub fn with_rng(spec: ModelSpec, rng: &mut dyn RngCore) -> Result<Self> {
        let layers = spec.build_layers()?;
        let mut params = ParamStore::new();
        for l in &layers {
            l.init_params(&mut params, rng)?;
        }
        Ok(Self { spec, layers, params })
    }

    /// Attaches stored parameters, checking names and shapes.
    pub fn from_parts(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let reference = Self::new(spec, 0)?;
        let mismatch = |msg: String| Error::Config(format!("checkpoint/model mismatch: {msg}"));
        if reference.params.len() != params.len() {
            return Err(mismatch(format!(
                "model has {} parameters, checkpoint has {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params.get(name).map_err(|_| mismatch(format!("missing `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(mismatch(format!("`{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        let mut ordered = ParamStore::new();
        for name in reference.params.names() {
            ordered.insert(name, params.get(name)?.clone());
        }
        Ok(Self {
            spec: reference.spec,
            layers: reference.layers,
            params: ordered,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn grid(&self) -> Grid {
        self.spec.grid()
    }

    pub fn layers(&self) -> &[Box<dyn FlowLayer>] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Makes every layer independent of its conditioning inputs.
    pub fn zero_conditioning(&mut self) -> Result<()> {
        for l in &self.layers {
            l.zero_conditioning(&mut self.params)?;
        }
        Ok(())
    }

    fn check_batch(&self, batch: &ContextBatch) -> Result<()> {
        if batch.grid != self.grid() {
            return Err(Error::Data(format!(
                "context grid {}x{} does not match model grid {}x{}",
                batch.grid.n_cam, batch.grid.n_iso, self.spec.n_cam, self.spec.n_iso
            )));
        }
        Ok(())
    }

    fn wrap(name: &str, e: Error) -> Error {
        match e {
            Error::Tensor(source) => Error::Layer {
                layer: name.to_string(),
                source,
            },
            other => other,
        }
    }

    /// Data to base space; returns `z` and the summed logdet `[N]`.
    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var, ctx: &BoundContext) -> Result<(Var, Var)> {
        self.check_batch(ctx.batch)?;
        let n = ctx.len();
        let mut total = g.constant(Tensor::zeros(&[n]));
        let mut h = x;
        for l in &self.layers {
            let (y, ld) = l.forward(g, p, h, ctx).map_err(|e| Self::wrap(l.name(), e))?;
            total = g.add(total, ld).map_err(|e| Self::wrap(l.name(), e.into()))?;
            h = y;
        }
        Ok((h, total))
    }

    /// Base to data space.
    pub fn inverse(&self, g: &mut Graph, p: &ParamVars, z: Var, ctx: &BoundContext) -> Result<Var> {
        self.check_batch(ctx.batch)?;
        let mut h = z;
        for l in self.layers.iter().rev() {
            h = l.inverse(g, p, h, ctx).map_err(|e| Self::wrap(l.name(), e))?;
        }
        Ok(h)
    }

    /// Mean negative log-likelihood per dimension as a scalar graph node.
    pub fn nll_graph(&self, g: &mut Graph, p: &ParamVars, x: Var, ctx: &BoundContext) -> Result<Var> {
        let (z, ld) = self.forward(g, p, x, ctx)?;
        let dims: usize = g.shape(x)[1..].iter().product();
        let last = self.layers.last().map(|l| l.name().to_string()).unwrap_or_default();
        let loss = (|| -> Result<Var, TensorError> {
            let sq = g.square(z)?;
            let ssq = g.sum_per_item(sq)?;
            let half = g.scale(ssq, 0.5)?;
            let nll = g.sub(half, ld)?;
            let nll = g.add_scalar(nll, 0.5 * dims as f32 * LN_2PI)?;
            let m = g.mean(nll)?;
            g.scale(m, 1.0 / dims as f32)
        })()
        .map_err(|_| Error::NonFiniteLoss { layer: last.clone() })?;
        if !g.value(loss).all_finite() {
            return Err(Error::NonFiniteLoss { layer: last });
        }
        Ok(loss)
    }

    /// NLL per dimension of `noise` (`[N,3,H,W]`) without recording gradients.
    pub fn nll_per_dim(&self, noise: &Tensor, batch: &ContextBatch) -> Result<f32> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let ctx = BoundContext::bind(&mut g, batch);
        let x = g.constant(noise.clone());
        let loss = self.nll_graph(&mut g, &p, x, &ctx)?;
        Ok(g.value(loss).item()?)
    }

    /// Maps noise to base space; returns `(z, logdet)`.
    pub fn encode(&self, noise: &Tensor, batch: &ContextBatch) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let ctx = BoundContext::bind(&mut g, batch);
        let x = g.constant(noise.clone());
        let (z, ld) = self.forward(&mut g, &p, x, &ctx)?;
        Ok((g.value(z).clone(), g.value(ld).clone()))
    }

    /// Maps base samples to noise.
    pub fn decode(&self, z: &Tensor, batch: &ContextBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let ctx = BoundContext::bind(&mut g, batch);
        let zv = g.constant(z.clone());
        let x = self.inverse(&mut g, &p, zv, &ctx)?;
        Ok(g.value(x).clone())
    }

    /// Output and logdet of every layer in forward order.
    pub fn trace(&self, noise: &Tensor, batch: &ContextBatch) -> Result<Vec<LayerTrace>> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let ctx = BoundContext::bind(&mut g, batch);
        let mut h = g.constant(noise.clone());
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, ld) = l.forward(&mut g, &p, h, &ctx).map_err(|e| Self::wrap(l.name(), e))?;
            out.push(LayerTrace {
                name: l.name().to_string(),
                output: g.value(y).clone(),
                logdet: g.value(ld).clone(),
            });
            h = y;
        }
        Ok(out)
    }

    /// Draws `z ~ N(0, I)` and returns `f^-1(z | ctx)`, shaped like the
    /// batch's clean patches.
    pub fn sample<R: RngCore + ?Sized>(&self, batch: &ContextBatch, rng: &mut R) -> Result<Tensor> {
        let z = Tensor::randn(batch.clean.shape(), 1.0, rng);
        self.decode(&z, batch)
    }

    /// Writes `model.json` and the parameter checkpoint into `dir`.
    pub fn save(&self, dir: &Path, checkpoint_name: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MODEL_FILE), self.spec.to_json()?)?;
        checkpoint::save(dir.join(checkpoint_name), &self.params)?;
        Ok(())
    }

    pub fn load(dir: &Path, checkpoint_name: &str) -> Result<Self> {
        let spec_path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&spec_path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", spec_path.display())))?;
        let spec = ModelSpec::from_json(&text)?;
        let params = checkpoint::load(dir.join(checkpoint_name))
            .map_err(|e| Error::Config(format!("checkpoint {}: {e}", dir.join(checkpoint_name).display())))?;
        Self::from_parts(spec, params)
    }
}

pub const MODEL_FILE: &str = "model.json";

/// Differential entropy of a standard normal per dimension, `0.5 ln(2 pi e)`.
pub fn std_normal_entropy() -> f32 {
    0.5 * (2.0 * PI * std::f32::consts::E).ln()
}
