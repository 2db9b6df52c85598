use super::NoisePatchRecord;
use crate::error::{Error, Result};

/// Aligned full-size clean/noisy images, channel-first u8 planes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImagePair {
    pub camera: u32,
    pub iso: u32,
    pub scene: u32,
    pub height: usize,
    pub width: usize,
    pub clean: Vec<u8>,
    pub noisy: Vec<u8>,
}

fn window(plane: &[u8], height: usize, width: usize, y: usize, x: usize, size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for row in y..y + size {
            let start = (c * height + row) * width + x;
            out.extend_from_slice(&plane[start..start + size]);
        }
    }
    out
}

/// Square `size` patches on a `stride` grid, row-major order.
pub fn extract_patches(pair: &ImagePair, size: usize, stride: usize) -> Result<Vec<NoisePatchRecord>> {
    let n = 3 * pair.height * pair.width;
    if pair.clean.len() != n || pair.noisy.len() != n {
        return Err(Error::Data(format!(
            "image planes do not match {}x{}",
            pair.height, pair.width
        )));
    }
    if size == 0 || stride == 0 {
        return Err(Error::Config("patch size and stride must be positive".into()));
    }
    if pair.height < size || pair.width < size {
        return Err(Error::Data(format!(
            "image {}x{} is smaller than patch size {size}",
            pair.height, pair.width
        )));
    }
    let mut out = Vec::new();
    for y in (0..=pair.height - size).step_by(stride) {
        for x in (0..=pair.width - size).step_by(stride) {
            out.push(NoisePatchRecord {
                camera: pair.camera,
                iso: pair.iso,
                scene: pair.scene,
                height: size,
                width: size,
                clean: window(&pair.clean, pair.height, pair.width, y, x, size),
                noisy: window(&pair.noisy, pair.height, pair.width, y, x, size),
            });
        }
    }
    Ok(out)
}
