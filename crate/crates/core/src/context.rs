//! Conditioning inputs: clean patch, camera and ISO.

use serde::{Deserialize, Serialize};
use srgbflow_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};

/// Camera x ISO conditioning grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub n_cam: usize,
    pub n_iso: usize,
}

impl Grid {
    pub fn new(n_cam: usize, n_iso: usize) -> Self {
        Self { n_cam, n_iso }
    }

    pub fn n_pairs(&self) -> usize {
        self.n_cam * self.n_iso
    }

    pub fn pair_index(&self, camera: usize, iso: usize) -> Result<usize> {
        if camera >= self.n_cam || iso >= self.n_iso {
            return Err(Error::Data(format!(
                "cell (camera {camera}, iso index {iso}) outside {}x{} grid",
                self.n_cam, self.n_iso
            )));
        }
        Ok(camera * self.n_iso + iso)
    }

    /// Every (camera, iso index) cell, camera-major.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_cam).flat_map(move |c| (0..self.n_iso).map(move |i| (c, i)))
    }
}

fn one_hot(len: usize, index: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len]);
    t.data_mut()[index] = 1.0;
    t
}

/// Clean patch plus camera, ISO and camera-ISO pair one-hots for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningContext {
    pub clean: Tensor,
    pub camera_onehot: Tensor,
    pub iso_onehot: Tensor,
    pub pair_onehot: Tensor,
    camera: usize,
    iso: usize,
}

impl ConditioningContext {
    /// `clean` is `[3,H,W]` in `[0,1]`; `iso` is the index on the ISO axis.
    pub fn new(clean: Tensor, camera: usize, iso: usize, grid: Grid) -> Result<Self> {
        if clean.rank() != 3 || clean.shape()[0] != 3 {
            return Err(Error::Data(format!("clean patch must be [3,H,W], got {:?}", clean.shape())));
        }
        let pair = grid.pair_index(camera, iso)?;
        Ok(Self {
            clean,
            camera_onehot: one_hot(grid.n_cam, camera),
            iso_onehot: one_hot(grid.n_iso, iso),
            pair_onehot: one_hot(grid.n_pairs(), pair),
            camera,
            iso,
        })
    }

    pub fn camera(&self) -> usize {
        self.camera
    }

    pub fn iso(&self) -> usize {
        self.iso
    }

    pub fn pair_index(&self) -> usize {
        self.camera * self.iso_onehot.numel() + self.iso
    }
}

/// A batch of contexts stored as stacked tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch {
    pub grid: Grid,
    /// `[N,3,H,W]`
    pub clean: Tensor,
    pub cameras: Vec<usize>,
    pub isos: Vec<usize>,
}

impl ContextBatch {
    pub fn new(grid: Grid, clean: Tensor, cameras: Vec<usize>, isos: Vec<usize>) -> Result<Self> {
        let n = cameras.len();
        if clean.rank() != 4 || clean.shape()[0] != n || clean.shape()[1] != 3 || isos.len() != n {
            return Err(Error::Data(format!(
                "context batch: clean {:?} with {} cameras / {} isos",
                clean.shape(),
                n,
                isos.len()
            )));
        }
        for (&c, &i) in cameras.iter().zip(&isos) {
            grid.pair_index(c, i)?;
        }
        Ok(Self {
            grid,
            clean,
            cameras,
            isos,
        })
    }

    pub fn from_contexts(grid: Grid, items: &[ConditioningContext]) -> Result<Self> {
        let cleans: Vec<Tensor> = items.iter().map(|c| c.clean.clone()).collect();
        let clean = Tensor::stack(&cleans)?;
        Self::new(
            grid,
            clean,
            items.iter().map(|c| c.camera).collect(),
            items.iter().map(|c| c.iso).collect(),
        )
    }

    /// The same context repeated `n` times.
    pub fn repeat(ctx: &ConditioningContext, grid: Grid, n: usize) -> Result<Self> {
        Self::from_contexts(grid, &vec![ctx.clone(); n])
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// `(H, W)` of the clean patches.
    pub fn spatial(&self) -> (usize, usize) {
        (self.clean.shape()[2], self.clean.shape()[3])
    }

    pub fn get(&self, index: usize) -> Result<ConditioningContext> {
        ConditioningContext::new(self.clean.batch_item(index)?, self.cameras[index], self.isos[index], self.grid)
    }

    fn one_hots(&self, len: usize, idx: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(&[idx.len(), len]);
        for (row, &i) in idx.iter().enumerate() {
            t.data_mut()[row * len + i] = 1.0;
        }
        t
    }

    pub fn camera_onehots(&self) -> Tensor {
        self.one_hots(self.grid.n_cam, &self.cameras)
    }

    pub fn iso_onehots(&self) -> Tensor {
        self.one_hots(self.grid.n_iso, &self.isos)
    }

    pub fn pair_indices(&self) -> Vec<usize> {
        self.cameras
            .iter()
            .zip(&self.isos)
            .map(|(&c, &i)| c * self.grid.n_iso + i)
            .collect()
    }

    pub fn pair_onehots(&self) -> Tensor {
        self.one_hots(self.grid.n_pairs(), &self.pair_indices())
    }
}

/// Which conditioning inputs a layer may read. Masked inputs are replaced by
/// zeros at the layer interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditioning {
    pub clean: bool,
    pub camera: bool,
    pub iso: bool,
}

impl Conditioning {
    pub const ALL: Self = Self {
        clean: true,
        camera: true,
        iso: true,
    };
    pub const NONE: Self = Self {
        clean: false,
        camera: false,
        iso: false,
    };
    pub const CLEAN_ONLY: Self = Self {
        clean: true,
        camera: false,
        iso: false,
    };
    pub const CAMERA_ONLY: Self = Self {
        clean: false,
        camera: true,
        iso: false,
    };
    pub const ISO_ONLY: Self = Self {
        clean: false,
        camera: false,
        iso: true,
    };
    pub const CAMERA_ISO: Self = Self {
        clean: false,
        camera: true,
        iso: true,
    };

    /// Number of rows of a lookup table indexed by the visible camera/ISO cell.
    pub fn table_rows(&self, grid: Grid) -> usize {
        match (self.camera, self.iso) {
            (true, true) => grid.n_pairs(),
            (true, false) => grid.n_cam,
            (false, true) => grid.n_iso,
            (false, false) => 1,
        }
    }

    pub fn uses_camera_or_iso(&self) -> bool {
        self.camera || self.iso
    }
}

impl Default for Conditioning {
    fn default() -> Self {
        Self::ALL
    }
}

/// A [`ContextBatch`] recorded on a graph as constants.
pub struct BoundContext<'a> {
    pub batch: &'a ContextBatch,
    clean: Var,
    camera: Var,
    iso: Var,
}

impl<'a> BoundContext<'a> {
    pub fn bind(g: &mut Graph, batch: &'a ContextBatch) -> Self {
        Self {
            batch,
            clean: g.constant(batch.clean.clone()),
            camera: g.constant(batch.camera_onehots()),
            iso: g.constant(batch.iso_onehots()),
        }
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn grid(&self) -> Grid {
        self.batch.grid
    }

    /// Clean patch `[N,3,H,W]`, or zeros when masked.
    pub fn clean(&self, g: &mut Graph, cond: Conditioning) -> Var {
        if cond.clean {
            self.clean
        } else {
            g.constant(Tensor::zeros(self.batch.clean.shape()))
        }
    }

    /// `concat(camera_onehot, iso_onehot)` as `[N, n_cam + n_iso]`, with
    /// masked parts zeroed.
    pub fn camera_iso(&self, g: &mut Graph, cond: Conditioning) -> Result<Var> {
        let n = self.len();
        let grid = self.grid();
        let cam = if cond.camera {
            self.camera
        } else {
            g.constant(Tensor::zeros(&[n, grid.n_cam]))
        };
        let iso = if cond.iso {
            self.iso
        } else {
            g.constant(Tensor::zeros(&[n, grid.n_iso]))
        };
        Ok(g.concat(&[cam, iso], 1)?)
    }

    /// Per-sample row of a table indexed by the visible camera/ISO cell.
    pub fn table_rows(&self, cond: Conditioning) -> Vec<usize> {
        let b = self.batch;
        b.cameras
            .iter()
            .zip(&b.isos)
            .map(|(&c, &i)| match (cond.camera, cond.iso) {
                (true, true) => c * b.grid.n_iso + i,
                (true, false) => c,
                (false, true) => i,
                (false, false) => 0,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hots_are_consistent() {
        let grid = Grid::new(5, 5);
        let ctx = ConditioningContext::new(Tensor::zeros(&[3, 2, 2]), 3, 4, grid).unwrap();
        for t in [&ctx.camera_onehot, &ctx.iso_onehot, &ctx.pair_onehot] {
            assert_eq!(t.sum(), 1.0);
            assert_eq!(t.data().iter().filter(|&&v| v == 1.0).count(), 1);
        }
        assert_eq!(ctx.pair_onehot.data()[3 * 5 + 4], 1.0);
        assert_eq!(ctx.pair_index(), 19);
    }

    #[test]
    fn invalid_cells_rejected() {
        let grid = Grid::new(2, 3);
        assert!(ConditioningContext::new(Tensor::zeros(&[3, 2, 2]), 2, 0, grid).is_err());
        assert!(ConditioningContext::new(Tensor::zeros(&[1, 2, 2]), 0, 0, grid).is_err());
    }

    #[test]
    fn masked_table_rows() {
        let grid = Grid::new(2, 3);
        let b = ContextBatch::new(grid, Tensor::zeros(&[2, 3, 1, 1]), vec![1, 0], vec![2, 1]).unwrap();
        let mut g = Graph::new();
        let bc = BoundContext::bind(&mut g, &b);
        assert_eq!(bc.table_rows(Conditioning::ALL), vec![5, 1]);
        assert_eq!(bc.table_rows(Conditioning::CAMERA_ONLY), vec![1, 0]);
        assert_eq!(bc.table_rows(Conditioning::ISO_ONLY), vec![2, 1]);
        assert_eq!(bc.table_rows(Conditioning::NONE), vec![0, 0]);
        assert_eq!(Conditioning::ISO_ONLY.table_rows(grid), 3);
    }
}
