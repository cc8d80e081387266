//! Inset region detection from the canvas marker channel, and box
//! interpolation for latent walks.

use serde::{Deserialize, Serialize};

use crate::diffcore::ImageTensor;
use crate::error::{Error, Result};

/// Smallest accepted box side: two border widths.
pub const MIN_BOX_SIDE: usize = 8;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Integer pixel rectangle; `(row, col)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub const fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        BBox {
            row,
            col,
            height,
            width,
        }
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.height > 0 && self.width > 0 && self.row + self.height <= h && self.col + self.width <= w
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }

    /// Center in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            self.row as f64 + self.height as f64 / 2.0,
            self.col as f64 + self.width as f64 / 2.0,
        )
    }
}

/// Tight box around marker pixels above `threshold`, grown to at least
/// [`MIN_BOX_SIDE`] on each side and clipped to the image.
///
/// `marker_channel` indexes the image channel holding the marker.
pub fn detect_bbox(canvas: &ImageTensor, marker_channel: usize, threshold: f64) -> Result<BBox> {
    let (c, h, w) = canvas.chw()?;
    if marker_channel >= c {
        return Err(Error::invalid(
            "marker_channel",
            format!("image has {c} channels, marker index {marker_channel}"),
        ));
    }
    if h < MIN_BOX_SIDE || w < MIN_BOX_SIDE {
        return Err(Error::invalid(
            "canvas",
            format!("{h}×{w} is smaller than the minimum box side {MIN_BOX_SIDE}"),
        ));
    }
    let plane = &canvas.data()[marker_channel * h * w..(marker_channel + 1) * h * w];
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for col in 0..w {
            if plane[r * w + col] > threshold {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(col);
                c1 = c1.max(col);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::NoInsetRegion { threshold });
    }
    let (row, height) = grow_span(r0, r1 + 1 - r0, h);
    let (col, width) = grow_span(c0, c1 + 1 - c0, w);
    Ok(BBox::new(row, col, height, width))
}

/// Grow `[start, start + len)` symmetrically to `MIN_BOX_SIDE`, then shift it
/// back inside `[0, extent)`.
fn grow_span(start: usize, len: usize, extent: usize) -> (usize, usize) {
    if len >= MIN_BOX_SIDE {
        return (start, len);
    }
    let extra = MIN_BOX_SIDE - len;
    let mut s = start as i64 - (extra / 2) as i64;
    s = s.clamp(0, (extent - MIN_BOX_SIDE) as i64);
    (s as usize, MIN_BOX_SIDE)
}

/// Componentwise linear interpolation of two boxes, rounded to nearest.
pub fn lerp_bbox(start: BBox, end: BBox, f: f64) -> Result<BBox> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::invalid("f", format!("{f} is outside [0, 1]")));
    }
    let lerp = |a: usize, b: usize| -> usize {
        let v = a as f64 + f * (b as f64 - a as f64);
        v.round() as usize
    };
    Ok(BBox::new(
        lerp(start.row, end.row),
        lerp(start.col, end.col),
        lerp(start.height, end.height),
        lerp(start.width, end.width),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use proptest::prelude::*;

    fn marker_square(h: usize, w: usize, b: BBox) -> Tensor {
        let mut t = Tensor::zeros(&[4, h, w]);
        for r in 0..h {
            for c in 0..w {
                if b.contains(r, c) {
                    t.set(3, r, c, 1.0);
                }
                t.set(0, r, c, ((r * 31 + c * 17) % 11) as f64 / 10.0);
            }
        }
        t
    }

    #[test]
    fn detects_constructed_square() {
        let img = marker_square(128, 128, BBox::new(50, 60, 20, 20));
        assert_eq!(detect_bbox(&img, 3, 0.5).unwrap(), BBox::new(50, 60, 20, 20));
    }

    #[test]
    fn all_zero_marker_is_no_region() {
        let img = Tensor::zeros(&[4, 32, 32]);
        assert!(matches!(
            detect_bbox(&img, 3, 0.5),
            Err(Error::NoInsetRegion { .. })
        ));
    }

    #[test]
    fn small_detection_grows_to_minimum_and_stays_inside() {
        let img = marker_square(32, 32, BBox::new(0, 30, 2, 2));
        let b = detect_bbox(&img, 3, 0.5).unwrap();
        assert_eq!((b.height, b.width), (MIN_BOX_SIDE, MIN_BOX_SIDE));
        assert!(b.fits(32, 32));
        assert!(b.contains(0, 30) && b.contains(1, 31));
    }

    #[test]
    fn ignores_color_channels() {
        let a = marker_square(40, 40, BBox::new(5, 7, 12, 9));
        let mut b = a.clone();
        for c in 0..3 {
            for r in 0..40 {
                for col in 0..40 {
                    b.set(c, r, col, 0.99);
                }
            }
        }
        assert_eq!(detect_bbox(&a, 3, 0.5).unwrap(), detect_bbox(&b, 3, 0.5).unwrap());
    }

    #[test]
    fn lerp_endpoints_and_midpoint() {
        let s = BBox::new(0, 0, 16, 16);
        let e = BBox::new(10, 10, 16, 16);
        assert_eq!(lerp_bbox(s, e, 0.0).unwrap(), s);
        assert_eq!(lerp_bbox(s, e, 1.0).unwrap(), e);
        assert_eq!(lerp_bbox(s, e, 0.5).unwrap(), BBox::new(5, 5, 16, 16));
        assert!(lerp_bbox(s, e, 1.5).is_err());
        assert!(lerp_bbox(s, e, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn raising_threshold_never_enlarges(seed in 0u64..500, lo in 0.05f64..0.5, dt in 0.0f64..0.4) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut img = Tensor::uniform(&[4, 24, 24], 0.0, 1.0, &mut rng);
            // guarantee one strong pixel so both detections succeed
            img.set(3, 12, 12, 1.0);
            let a = detect_bbox(&img, 3, lo).unwrap();
            let b = detect_bbox(&img, 3, lo + dt).unwrap();
            prop_assert!(b.height <= a.height && b.width <= a.width);
        }

        #[test]
        fn lerp_area_between_endpoints(r0 in 0usize..50, c0 in 0usize..50, r1 in 0usize..50, c1 in 0usize..50,
                                       s0 in 8usize..40, s1 in 8usize..40, f in 0.0f64..=1.0) {
            let a = BBox::new(r0, c0, s0, s0);
            let b = BBox::new(r1, c1, s1, s1);
            let m = lerp_bbox(a, b, f).unwrap();
            prop_assert!(m.area() >= a.area().min(b.area()));
            prop_assert!(m.area() <= a.area().max(b.area()));
            prop_assert!(m.row >= r0.min(r1) && m.row <= r0.max(r1));
        }
    }
}
