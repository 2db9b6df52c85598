use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srgbflow_autodiff::Tensor;

use super::dequant::{dequantize, DequantConfig};
use super::NoisePatchRecord;
use crate::context::{ContextBatch, Grid};
use crate::error::{Error, Result};

/// Dequantized noise `[N,3,H,W]` with its conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub noise: Tensor,
    pub ctx: ContextBatch,
}

pub fn assemble_batch<R: Rng + ?Sized>(
    records: &[&NoisePatchRecord],
    grid: Grid,
    iso_values: &[u32],
    dequant: DequantConfig,
    rng: &mut R,
) -> Result<Batch> {
    let mut noise = Vec::with_capacity(records.len());
    let mut clean = Vec::with_capacity(records.len());
    let mut cameras = Vec::with_capacity(records.len());
    let mut isos = Vec::with_capacity(records.len());
    for r in records {
        let d = dequantize(r, dequant, rng)?;
        noise.push(d.noise);
        clean.push(d.clean);
        cameras.push(r.camera as usize);
        isos.push(
            iso_values
                .iter()
                .position(|&v| v == r.iso)
                .ok_or_else(|| Error::Data(format!("ISO {} not in grid {iso_values:?}", r.iso)))?,
        );
    }
    Ok(Batch {
        noise: Tensor::stack(&noise)?,
        ctx: ContextBatch::new(grid, Tensor::stack(&clean)?, cameras, isos)?,
    })
}

/// Assembles batches on a worker thread, at most `capacity` ahead of the
/// consumer. Batch `b` is dequantized with its own random stream derived
/// from `seed`, so the output does not depend on thread timing.
pub struct BatchLoader {
    rx: Option<Receiver<Result<Batch>>>,
    handle: Option<JoinHandle<()>>,
}

impl BatchLoader {
    #[allow(clippy::too_many_arguments)]
    pub fn spawn(
        records: Arc<Vec<NoisePatchRecord>>,
        order: Vec<usize>,
        batch_size: usize,
        grid: Grid,
        iso_values: Vec<u32>,
        dequant: DequantConfig,
        seed: u64,
        capacity: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || {
            for (b, chunk) in order.chunks(batch_size.max(1)).enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(b as u64);
                let refs: Vec<&NoisePatchRecord> = chunk.iter().map(|&i| &records[i]).collect();
                let batch = assemble_batch(&refs, grid, &iso_values, dequant, &mut rng);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        Self {
            rx: Some(rx),
            handle: Some(handle),
        }
    }
}

impl Iterator for BatchLoader {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for BatchLoader {
    fn drop(&mut self) {
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
