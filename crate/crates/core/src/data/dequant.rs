use rand::Rng;
use serde::{Deserialize, Serialize};
use srgbflow_autodiff::Tensor;

use super::NoisePatchRecord;
use crate::error::{Error, Result};

/// Uniform dequantization: `v -> (v + u) / levels`, `u ~ U[0,1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DequantConfig {
    pub levels: u32,
}

impl Default for DequantConfig {
    fn default() -> Self {
        Self { levels: 256 }
    }
}

impl DequantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("dequantization needs >= 2 levels, got {}", self.levels)));
        }
        Ok(())
    }
}

/// Dequantized clean and noisy planes and their difference, each `[3,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dequantized {
    pub clean: Tensor,
    pub noisy: Tensor,
    pub noise: Tensor,
}

pub fn dequantize_value<R: Rng + ?Sized>(v: u8, levels: u32, rng: &mut R) -> f32 {
    let u: f32 = rng.random();
    // u < 1 but (v + u) can round up to v + 1 in f32.
    let x = (v as f32 + u) / levels as f32;
    x.min(((v as u32 + 1) as f32 / levels as f32).next_down())
}

/// Independent dither on clean and noisy planes.
pub fn dequantize<R: Rng + ?Sized>(record: &NoisePatchRecord, cfg: DequantConfig, rng: &mut R) -> Result<Dequantized> {
    record.validate()?;
    let shape = [3, record.height, record.width];
    let clean: Vec<f32> = record.clean.iter().map(|&v| dequantize_value(v, cfg.levels, rng)).collect();
    let noisy: Vec<f32> = record.noisy.iter().map(|&v| dequantize_value(v, cfg.levels, rng)).collect();
    let noise = noisy.iter().zip(&clean).map(|(n, c)| n - c).collect();
    Ok(Dequantized {
        clean: Tensor::new(&shape, clean)?,
        noisy: Tensor::new(&shape, noisy)?,
        noise: Tensor::new(&shape, noise)?,
    })
}
