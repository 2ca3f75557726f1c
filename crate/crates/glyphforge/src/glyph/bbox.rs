//! Axis-aligned pixel bounding boxes.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// An axis-aligned box in pixel coordinates, inclusive-exclusive:
/// the box covers columns `x0..x1` and rows `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl BBox {
    /// Builds a box, rejecting empty extents.
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Geometry(format!(
                "degenerate box ({x0},{y0},{x1},{y1})"
            )));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> i32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width() as i64 * self.height() as i64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }

    /// True when `other` lies fully inside `self`.
    pub fn contains_box(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn contains_point(&self, x: i32, y: i32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// Overlapping region, or `None` when disjoint.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(BBox { x0, y0, x1, y1 })
    }

    /// Intersection-over-union in [0,1].
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersect(other).map_or(0, |b| b.area());
        let union = self.area() + other.area() - inter;
        if union <= 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Box fully clamped into a `(height, width)` canvas.
    pub fn clamp_to(&self, height: i32, width: i32) -> Result<BBox> {
        BBox::new(
            self.x0.clamp(0, width),
            self.y0.clamp(0, height),
            self.x1.clamp(0, width),
            self.y1.clamp(0, height),
        )
    }

    pub fn translated(&self, dx: i32, dy: i32) -> BBox {
        BBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    /// Corner coordinates as `[x0, y0, x1, y1]` floats.
    pub fn as_f64(&self) -> [f64; 4] {
        [self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64]
    }
}

/// A single character paired with its pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharBox {
    pub ch: char,
    pub bbox: BBox,
}

/// The minimal axis-aligned rectangle containing every character box.
///
/// This is the outer rectangle of the edit area used to place glyph
/// conditioning, replacing per-character mask shapes.
pub fn outer_rectangle(char_boxes: &[CharBox]) -> Result<BBox> {
    let mut it = char_boxes.iter();
    let first = it
        .next()
        .ok_or_else(|| Error::invalid("no character boxes"))?;
    Ok(it.fold(first.bbox, |acc, cb| acc.union(&cb.bbox)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cb(ch: char, x0: i32, y0: i32, x1: i32, y1: i32) -> CharBox {
        CharBox {
            ch,
            bbox: BBox::new(x0, y0, x1, y1).unwrap(),
        }
    }

    #[test]
    fn outer_rectangle_two_boxes() {
        let boxes = [cb('A', 0, 0, 10, 10), cb('B', 20, 5, 30, 15)];
        assert_eq!(
            outer_rectangle(&boxes).unwrap(),
            BBox::new(0, 0, 30, 15).unwrap()
        );
    }

    #[test]
    fn outer_rectangle_single_box_is_identity() {
        let boxes = [cb('A', 5, 5, 9, 9)];
        assert_eq!(
            outer_rectangle(&boxes).unwrap(),
            BBox::new(5, 5, 9, 9).unwrap()
        );
    }

    #[test]
    fn outer_rectangle_empty_errors() {
        assert!(outer_rectangle(&[]).is_err());
    }

    #[test]
    fn outer_rectangle_matches_brute_force_scan() {
        // 50 pseudorandom boxes against a coordinate-wise min/max oracle.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 1000) as i32
        };
        let boxes: Vec<CharBox> = (0..50)
            .map(|_| {
                let x0 = next();
                let y0 = next();
                let x1 = x0 + 1 + next() % 100;
                let y1 = y0 + 1 + next() % 100;
                cb('X', x0, y0, x1, y1)
            })
            .collect();
        let got = outer_rectangle(&boxes).unwrap();
        let mut want = boxes[0].bbox;
        for b in &boxes {
            want.x0 = want.x0.min(b.bbox.x0);
            want.y0 = want.y0.min(b.bbox.y0);
            want.x1 = want.x1.max(b.bbox.x1);
            want.y1 = want.y1.max(b.bbox.y1);
        }
        assert_eq!(got, want);
    }

    proptest! {
        #[test]
        fn outer_rectangle_contains_all_and_is_minimal(
            raw in proptest::collection::vec((0i32..500, 0i32..500, 1i32..80, 1i32..80), 1..20)
        ) {
            let boxes: Vec<CharBox> = raw
                .iter()
                .map(|&(x0, y0, w, h)| cb('P', x0, y0, x0 + w, y0 + h))
                .collect();
            let outer = outer_rectangle(&boxes).unwrap();
            for b in &boxes {
                prop_assert!(outer.contains_box(&b.bbox));
            }
            // Minimality: shrinking any edge by one pixel drops some box.
            let shrunk = [
                BBox { x0: outer.x0 + 1, ..outer },
                BBox { y0: outer.y0 + 1, ..outer },
                BBox { x1: outer.x1 - 1, ..outer },
                BBox { y1: outer.y1 - 1, ..outer },
            ];
            for s in shrunk.iter().filter(|s| s.x0 < s.x1 && s.y0 < s.y1) {
                prop_assert!(boxes.iter().any(|b| !s.contains_box(&b.bbox)));
            }
        }
    }
}
