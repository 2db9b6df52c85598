//! Paired PNG directories: `clean/` and `noisy/` with identically named
//! images and a `metadata.csv` with columns `file,camera,iso[,scene]`.

use std::path::Path;

use serde::Deserialize;

use super::patches::{extract_patches, ImagePair};
use super::NoisePatchRecord;
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct MetaRow {
    file: String,
    camera: u32,
    iso: u32,
    #[serde(default)]
    scene: Option<u32>,
}

fn read_planes(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut planes = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            planes[c * h * w + p] = raw[3 * p + c];
        }
    }
    Ok((h, w, planes))
}

pub fn ingest_png_dir(dir: &Path, patch_size: usize, stride: usize) -> Result<Vec<NoisePatchRecord>> {
    let meta = dir.join("metadata.csv");
    let mut reader = csv::Reader::from_path(&meta)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", meta.display())))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<MetaRow>().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", meta.display())))?;
        let (h, w, clean) = read_planes(&dir.join("clean").join(&row.file))?;
        let (hn, wn, noisy) = read_planes(&dir.join("noisy").join(&row.file))?;
        if (h, w) != (hn, wn) {
            return Err(Error::Data(format!("{}: clean and noisy sizes differ", row.file)));
        }
        let pair = ImagePair {
            camera: row.camera,
            iso: row.iso,
            scene: row.scene.unwrap_or(i as u32),
            height: h,
            width: w,
            clean,
            noisy,
        };
        out.extend(extract_patches(&pair, patch_size, stride)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no patches found under {}", dir.display())));
    }
    Ok(out)
}
