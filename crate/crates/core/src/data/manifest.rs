use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{blob, NoisePatchRecord};
use crate::context::Grid;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn blob_name(self) -> &'static str {
        match self {
            Split::Train => "train.nfpd",
            Split::Val => "val.nfpd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub split: Split,
    pub blob: String,
    pub index: usize,
    pub camera: u32,
    pub iso: u32,
    pub scene: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellEntry {
    pub camera: u32,
    pub iso: u32,
    pub iso_index: usize,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub patch_height: usize,
    pub patch_width: usize,
    pub n_cam: usize,
    /// ISO values in one-hot order.
    pub iso_values: Vec<u32>,
    pub cells: Vec<CellEntry>,
    pub records: Vec<RecordEntry>,
}

impl DatasetManifest {
    pub fn grid(&self) -> Grid {
        Grid::new(self.n_cam, self.iso_values.len())
    }

    pub fn iso_index(&self, iso: u32) -> Result<usize> {
        self.iso_values
            .iter()
            .position(|&v| v == iso)
            .ok_or_else(|| Error::Data(format!("ISO {iso} is not in the dataset grid {:?}", self.iso_values)))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!("unsupported manifest schema {}", m.schema_version)));
        }
        Ok(m)
    }
}

/// A dataset held in memory, split into train and validation records.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<NoisePatchRecord>,
    pub val: Vec<NoisePatchRecord>,
}

impl Dataset {
    /// Assembles a dataset and its manifest. `iso_values` fixes the ISO
    /// one-hot order.
    pub fn from_records(records: Vec<NoisePatchRecord>, splits: &[Split], n_cam: usize, iso_values: Vec<u32>) -> Result<Self> {
        if records.len() != splits.len() {
            return Err(Error::Data("one split per record required".into()));
        }
        let first = records.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let (h, w) = (first.height, first.width);
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut entries = Vec::with_capacity(records.len());
        let mut counts: BTreeMap<(u32, u32), (usize, usize)> = BTreeMap::new();
        for (r, &split) in records.into_iter().zip(splits) {
            r.validate()?;
            if (r.height, r.width) != (h, w) {
                return Err(Error::Data("all patches must share one size".into()));
            }
            if r.camera as usize >= n_cam {
                return Err(Error::Data(format!("camera {} outside {n_cam} cameras", r.camera)));
            }
            if !iso_values.contains(&r.iso) {
                return Err(Error::Data(format!("ISO {} not in {:?}", r.iso, iso_values)));
            }
            let c = counts.entry((r.camera, r.iso)).or_default();
            let list = match split {
                Split::Train => {
                    c.0 += 1;
                    &mut train
                }
                Split::Val => {
                    c.1 += 1;
                    &mut val
                }
            };
            entries.push(RecordEntry {
                split,
                blob: split.blob_name().to_string(),
                index: list.len(),
                camera: r.camera,
                iso: r.iso,
                scene: r.scene,
            });
            list.push(r);
        }
        let cells = counts
            .into_iter()
            .map(|((camera, iso), (n_train, n_val))| CellEntry {
                camera,
                iso,
                iso_index: iso_values.iter().position(|&v| v == iso).expect("checked"),
                n_train,
                n_val,
            })
            .collect();
        Ok(Self {
            manifest: DatasetManifest {
                schema_version: SCHEMA_VERSION,
                patch_height: h,
                patch_width: w,
                n_cam,
                iso_values,
                cells,
                records: entries,
            },
            train,
            val,
        })
    }

    pub fn grid(&self) -> Grid {
        self.manifest.grid()
    }

    pub fn split(&self, split: Split) -> &[NoisePatchRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// `(camera index, iso index)` of a record.
    pub fn cell_of(&self, r: &NoisePatchRecord) -> Result<(usize, usize)> {
        Ok((r.camera as usize, self.manifest.iso_index(r.iso)?))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (h, w) = (self.manifest.patch_height, self.manifest.patch_width);
        blob::write(&dir.join(Split::Train.blob_name()), &self.train, h, w)?;
        blob::write(&dir.join(Split::Val.blob_name()), &self.val, h, w)?;
        fs::write(dir.join(MANIFEST_FILE), self.manifest.to_json()?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let manifest = DatasetManifest::from_json(&text)?;
        let train = blob::read(&dir.join(Split::Train.blob_name()))?;
        let val = blob::read(&dir.join(Split::Val.blob_name()))?;
        for e in &manifest.records {
            let list = match e.split {
                Split::Train => &train,
                Split::Val => &val,
            };
            let r = list
                .get(e.index)
                .ok_or_else(|| Error::Data(format!("manifest references missing record {} in {}", e.index, e.blob)))?;
            if (r.camera, r.iso, r.scene) != (e.camera, e.iso, e.scene) {
                return Err(Error::Data(format!("record {} in {} disagrees with manifest", e.index, e.blob)));
            }
        }
        if manifest.records.len() != train.len() + val.len() {
            return Err(Error::Data("manifest record count does not match blobs".into()));
        }
        Ok(Self { manifest, train, val })
    }
}
