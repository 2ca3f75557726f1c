//! Rectangular edit masks and their training-time augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::grid::Grid;

use super::bbox::BBox;

/// A binary mask whose set region is a single axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskImage {
    pub height: usize,
    pub width: usize,
    pub region: BBox,
}

impl MaskImage {
    pub fn new(height: usize, width: usize, region: BBox) -> Result<Self> {
        let region = region.clamp_to(height as i32, width as i32)?;
        Ok(MaskImage {
            height,
            width,
            region,
        })
    }

    /// Mask value at a pixel: 1 inside the region, 0 outside.
    pub fn value(&self, x: usize, y: usize) -> f32 {
        if self.region.contains_point(x as i32, y as i32) {
            1.0
        } else {
            0.0
        }
    }

    pub fn to_grid(&self) -> Grid {
        let mut g = Grid::zeros(self.width, self.height);
        for y in self.region.y0..self.region.y1 {
            for x in self.region.x0..self.region.x1 {
                g.set(x as usize, y as usize, 1.0);
            }
        }
        g
    }

    /// Fraction of pixels inside the region.
    pub fn coverage(&self) -> f64 {
        self.region.area() as f64 / (self.width * self.height) as f64
    }
}

/// Expands `edit_box` by an independent uniform fraction of its extent
/// on each side (order: left, right, top, bottom), clamped to the
/// canvas. Identical seeds yield identical masks.
pub fn augment_mask(
    edit_box: &BBox,
    canvas_hw: (usize, usize),
    seed: u64,
    max_expand_frac: f64,
) -> Result<MaskImage> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let w = edit_box.width() as f64;
    let h = edit_box.height() as f64;
    let left = (rng.gen::<f64>() * max_expand_frac * w).round() as i32;
    let right = (rng.gen::<f64>() * max_expand_frac * w).round() as i32;
    let top = (rng.gen::<f64>() * max_expand_frac * h).round() as i32;
    let bottom = (rng.gen::<f64>() * max_expand_frac * h).round() as i32;
    let region = BBox {
        x0: edit_box.x0 - left,
        y0: edit_box.y0 - top,
        x1: edit_box.x1 + right,
        y1: edit_box.y1 + bottom,
    };
    MaskImage::new(canvas_hw.0, canvas_hw.1, region)
}
