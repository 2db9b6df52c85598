use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::Split;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitOutcome {
    pub splits: Vec<Split>,
    /// One message per cell that could not be stratified.
    pub warnings: Vec<String>,
}

/// Per-cell random train/validation assignment. `cells[i]` is the
/// `(camera, iso)` key of record `i`. Cells with fewer than two records go
/// entirely to train.
pub fn stratified_split(cells: &[(u32, u32)], train_frac: f64, seed: u64) -> Result<SplitOutcome> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0,1), got {train_frac}")));
    }
    let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, &c) in cells.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = vec![Split::Train; cells.len()];
    let mut warnings = Vec::new();
    for ((cam, iso), mut idx) in groups {
        let n = idx.len();
        if n < 2 {
            warnings.push(format!(
                "cell (camera {cam}, iso {iso}) has {n} record(s); all assigned to train"
            ));
            continue;
        }
        idx.shuffle(&mut rng);
        let n_train = ((n as f64 * train_frac).round() as usize).clamp(1, n - 1);
        for &i in &idx[n_train..] {
            splits[i] = Split::Val;
        }
    }
    Ok(SplitOutcome { splits, warnings })
}
