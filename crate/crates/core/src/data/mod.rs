//! Noise patch datasets: records, dequantization, splitting, storage and the
//! synthetic ISP generator.

mod batch;
pub mod blob;
mod dequant;
mod ingest;
mod manifest;
mod patches;
mod split;
pub mod synth;

pub use batch::{assemble_batch, Batch, BatchLoader};
pub use dequant::{dequantize, dequantize_value, DequantConfig, Dequantized};
pub use ingest::ingest_png_dir;
pub use manifest::{CellEntry, Dataset, DatasetManifest, RecordEntry, Split, MANIFEST_FILE, SCHEMA_VERSION};
pub use patches::{extract_patches, ImagePair};
pub use split::{stratified_split, SplitOutcome};
pub use synth::{generate, CameraIsp, CellNoise, SynthIspConfig};

use crate::error::{Error, Result};

/// One clean/noisy patch pair with its acquisition metadata. Planes are
/// stored channel-first, `3 x height x width` bytes each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoisePatchRecord {
    pub camera: u32,
    pub iso: u32,
    pub scene: u32,
    pub height: usize,
    pub width: usize,
    pub clean: Vec<u8>,
    pub noisy: Vec<u8>,
}

impl NoisePatchRecord {
    pub fn new(camera: u32, iso: u32, scene: u32, height: usize, width: usize, clean: Vec<u8>, noisy: Vec<u8>) -> Result<Self> {
        let r = Self {
            camera,
            iso,
            scene,
            height,
            width,
            clean,
            noisy,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = 3 * self.height * self.width;
        if n == 0 || self.clean.len() != n || self.noisy.len() != n {
            return Err(Error::Data(format!(
                "record planes {}/{} bytes, expected {n} for {}x{}",
                self.clean.len(),
                self.noisy.len(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}
