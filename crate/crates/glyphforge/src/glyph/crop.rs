//! Adaptive crop window around the edit region.

use crate::error::Result;

use super::bbox::BBox;

/// Thresholds for [`adaptive_crop`].
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveCropParams {
    /// Texts shorter than this many characters use the per-character
    /// rescaling branch.
    pub char_threshold: usize,
    /// Fraction of the box extent added on each side in the expansion
    /// branch.
    pub expand_ratio: f64,
}

impl Default for AdaptiveCropParams {
    fn default() -> Self {
        AdaptiveCropParams {
            char_threshold: 9,
            expand_ratio: 0.1,
        }
    }
}

/// Clamps `[lo, hi)` into `[0, limit)`, shifting inward before
/// truncating so the requested extent is preserved when it fits.
fn clamp_shift(lo: i32, hi: i32, limit: i32) -> (i32, i32) {
    if hi - lo >= limit {
        return (0, limit);
    }
    let shift = if lo < 0 {
        -lo
    } else if hi > limit {
        limit - hi
    } else {
        0
    };
    (lo + shift, hi + shift)
}

/// Computes the window to crop around `edit_box` before resizing to
/// model resolution. Short texts (fewer than `char_threshold`
/// characters) get a window sized as if the text had `char_threshold`
/// characters at its current per-character width, keeping small edits
/// from collapsing to a few latent cells; longer texts get a plain
/// `expand_ratio` border.
pub fn adaptive_crop(
    image_hw: (usize, usize),
    text_len: usize,
    edit_box: &BBox,
    params: &AdaptiveCropParams,
) -> Result<BBox> {
    let (ih, iw) = (image_hw.0 as i32, image_hw.1 as i32);
    let (x0, y0, x1, y1) = if text_len >= params.char_threshold || text_len == 0 {
        let dx = (edit_box.width() as f64 * params.expand_ratio).round() as i32;
        let dy = (edit_box.height() as f64 * params.expand_ratio).round() as i32;
        (
            edit_box.x0 - dx,
            edit_box.y0 - dy,
            edit_box.x1 + dx,
            edit_box.y1 + dy,
        )
    } else {
        let factor = params.char_threshold as f64 / text_len as f64;
        let (cx, cy) = edit_box.center();
        let half_w = edit_box.width() as f64 * factor / 2.0;
        let half_h = edit_box.height() as f64 * factor / 2.0;
        (
            (cx - half_w).round() as i32,
            (cy - half_h).round() as i32,
            (cx + half_w).round() as i32,
            (cy + half_h).round() as i32,
        )
    };
    let (x0, x1) = clamp_shift(x0, x1, iw);
    let (y0, y1) = clamp_shift(y0, y1, ih);
    BBox::new(x0, y0, x1, y1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn long_text_expands_each_side_by_a_tenth() {
        let eb = BBox::new(100, 100, 340, 140).unwrap();
        let got = adaptive_crop((1024, 1024), 12, &eb, &AdaptiveCropParams::default()).unwrap();
        assert_eq!(got, BBox::new(76, 96, 364, 144).unwrap());
    }

    #[test]
    fn threshold_length_takes_the_expansion_branch() {
        let eb = BBox::new(100, 100, 340, 140).unwrap();
        let at_9 = adaptive_crop((1024, 1024), 9, &eb, &AdaptiveCropParams::default()).unwrap();
        assert_eq!(at_9, BBox::new(76, 96, 364, 144).unwrap());
        let at_8 = adaptive_crop((1024, 1024), 8, &eb, &AdaptiveCropParams::default()).unwrap();
        assert_ne!(at_8, at_9);
    }

    #[test]
    fn short_text_window_scales_to_nine_characters() {
        // width 30, 3 chars → 10 px per char → 9-char window is 90 wide.
        let eb = BBox::new(100, 100, 130, 120).unwrap();
        let got = adaptive_crop((1024, 1024), 3, &eb, &AdaptiveCropParams::default()).unwrap();
        assert_eq!(got.width(), 90);
        assert_eq!(got.height(), 60);
        assert_eq!(got.center(), eb.center());
    }

    #[test]
    fn clamping_shifts_inward_before_truncating() {
        let eb = BBox::new(0, 0, 100, 20).unwrap();
        let got = adaptive_crop((64, 200), 12, &eb, &AdaptiveCropParams::default()).unwrap();
        // Requested (-10, -2, 110, 22): both extents fit, so only shifted.
        assert_eq!(got, BBox::new(0, 0, 120, 24).unwrap());
    }

    #[test]
    fn oversized_request_truncates_to_the_image() {
        let eb = BBox::new(10, 10, 50, 30).unwrap();
        let got = adaptive_crop((32, 60), 1, &eb, &AdaptiveCropParams::default()).unwrap();
        assert_eq!(got, BBox::new(0, 0, 60, 32).unwrap());
    }

    proptest! {
        #[test]
        fn crop_contains_edit_box_and_fits_image(
            x0 in 0i32..400, y0 in 0i32..400,
            w in 1i32..200, h in 1i32..100,
            len in 1usize..20,
        ) {
            let (ih, iw) = (512usize, 512usize);
            let eb = BBox::new(
                x0.min(iw as i32 - w), y0.min(ih as i32 - h),
                (x0.min(iw as i32 - w)) + w, (y0.min(ih as i32 - h)) + h,
            ).unwrap();
            let got = adaptive_crop((ih, iw), len, &eb, &AdaptiveCropParams::default()).unwrap();
            prop_assert!(got.contains_box(&eb), "crop {got:?} loses edit box {eb:?}");
            prop_assert!(got.x0 >= 0 && got.y0 >= 0);
            prop_assert!(got.x1 <= iw as i32 && got.y1 <= ih as i32);
        }
    }
}
