use ndarray::Array3;

use crate::anatomy::Branch;
use crate::error::{Error, Result};

/// The four predicted maps of one exam, all on the input grid.
///
/// Heatmaps are probabilities (`2 x H x W`); offsets are in input-grid
/// pixels (`4 x H x W`, channels `(2c, 2c + 1)` = `(row, col)` of class `c`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub disc_heatmap: Array3<f32>,
    pub disc_offset: Array3<f32>,
    pub vert_heatmap: Array3<f32>,
    pub vert_offset: Array3<f32>,
}

impl ModelOutputs {
    pub fn heatmap(&self, branch: Branch) -> &Array3<f32> {
        match branch {
            Branch::Disc => &self.disc_heatmap,
            Branch::Vertebra => &self.vert_heatmap,
        }
    }

    pub fn offset(&self, branch: Branch) -> &Array3<f32> {
        match branch {
            Branch::Disc => &self.disc_offset,
            Branch::Vertebra => &self.vert_offset,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.disc_heatmap.dim();
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid();
        for (map, c) in [
            (&self.disc_heatmap, 2),
            (&self.disc_offset, 4),
            (&self.vert_heatmap, 2),
            (&self.vert_offset, 4),
        ] {
            if map.dim() != (c, h, w) {
                return Err(Error::shape(&[c, h, w], map.shape()));
            }
        }
        Ok(())
    }
}
