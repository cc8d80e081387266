use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::diffcore::{ImageTensor, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Border width used by the seam losses.
pub const BORDER_WIDTH: usize = 8;

/// Pixel subset a loss is restricted to.
///
/// `Interior` and `Border` are relative to the image they are applied to
/// (a crop); `Exterior` is the canvas outside every listed box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Full,
    Interior { width: usize },
    Border { width: usize },
    Exterior { boxes: Vec<BBox> },
}

impl Region {
    /// `1.0` inside the region, `0.0` elsewhere, for an `h × w` image.
    pub fn plane_mask(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        match self {
            Region::Full => Ok(vec![1.0; h * w]),
            Region::Interior { width } | Region::Border { width } => {
                let x = *width;
                if x == 0 || 2 * x > h || 2 * x > w {
                    return Err(Error::invalid(
                        "region",
                        format!("border width {x} does not fit a {h}×{w} image"),
                    ));
                }
                let interior = matches!(self, Region::Interior { .. });
                let mut m = vec![0.0; h * w];
                for r in 0..h {
                    for c in 0..w {
                        let inner = r >= x && r < h - x && c >= x && c < w - x;
                        if inner == interior {
                            m[r * w + c] = 1.0;
                        }
                    }
                }
                Ok(m)
            }
            Region::Exterior { boxes } => {
                let mut m = vec![1.0; h * w];
                for b in boxes {
                    if !b.fits(h, w) {
                        return Err(Error::OutOfBounds {
                            bbox: *b,
                            height: h,
                            width: w,
                        });
                    }
                    for r in b.row..b.row + b.height {
                        m[r * w + b.col..r * w + b.col + b.width].fill(0.0);
                    }
                }
                Ok(m)
            }
        }
    }

    /// Mask broadcast over `c` channels.
    pub fn mask(&self, c: usize, h: usize, w: usize) -> Result<Tensor> {
        let plane = self.plane_mask(h, w)?;
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            data.extend_from_slice(&plane);
        }
        Tensor::new(vec![c, h, w], data)
    }
}

/// Flat pixel indices of the width-`x` frame: top rows, bottom rows, then the
/// left and right columns of the remaining middle rows.
pub fn border_indices(h: usize, w: usize, x: usize) -> Result<Vec<usize>> {
    if x == 0 || 2 * x > h || 2 * x > w {
        return Err(Error::invalid(
            "x",
            format!("border width {x} does not fit a {h}×{w} image"),
        ));
    }
    let mut idx = Vec::with_capacity(2 * x * (h + w) - 4 * x * x);
    for r in (0..x).chain(h - x..h) {
        idx.extend((0..w).map(|c| r * w + c));
    }
    for cols in [0..x, w - x..w] {
        for r in x..h - x {
            idx.extend(cols.clone().map(|c| r * w + c));
        }
    }
    Ok(idx)
}

/// Border pixels of every channel as a `[c, n]` tensor.
pub fn border_region(img: &ImageTensor, x: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(img.clone());
    let out = border_region_var(&mut tape, v, x)?;
    Ok(tape.value(out).clone())
}

pub fn border_region_var(tape: &mut Tape, img: Var, x: usize) -> Result<Var> {
    let (c, h, w) = tape.value(img).chw()?;
    let plane = border_indices(h, w, x)?;
    let n = plane.len();
    let mut idx = Vec::with_capacity(c * n);
    for ch in 0..c {
        idx.extend(plane.iter().map(|p| ch * h * w + p));
    }
    tape.gather(img, idx, &[c, n])
}

/// Mean absolute color difference across the box outline: each pixel just
/// inside the box against its neighbour just outside. Sides on the image
/// edge have no outside neighbour and are skipped.
pub fn seam_energy(composite: &ImageTensor, bbox: BBox) -> Result<f64> {
    let (c, h, w) = composite.chw()?;
    if !bbox.fits(h, w) {
        return Err(Error::OutOfBounds {
            bbox,
            height: h,
            width: w,
        });
    }
    let channels = c.min(3);
    let mut pairs: Vec<((usize, usize), (usize, usize))> = Vec::new();
    let (r0, c0) = (bbox.row, bbox.col);
    let (r1, c1) = (bbox.row + bbox.height - 1, bbox.col + bbox.width - 1);
    for col in c0..=c1 {
        if r0 > 0 {
            pairs.push(((r0, col), (r0 - 1, col)));
        }
        if r1 + 1 < h {
            pairs.push(((r1, col), (r1 + 1, col)));
        }
    }
    for row in r0..=r1 {
        if c0 > 0 {
            pairs.push(((row, c0), (row, c0 - 1)));
        }
        if c1 + 1 < w {
            pairs.push(((row, c1), (row, c1 + 1)));
        }
    }
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ch in 0..channels {
        for &((ir, ic), (or, oc)) in &pairs {
            total += (composite.at(ch, ir, ic) - composite.at(ch, or, oc)).abs();
        }
    }
    Ok(total / (pairs.len() * channels) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn border_counts() {
        let img = Tensor::full(&[3, 4, 4], 0.25);
        let b = border_region(&img, 1).unwrap();
        assert_eq!(b.shape(), &[3, 12]);
        assert!(b.data().iter().all(|&v| v == 0.25));
        let img = Tensor::zeros(&[1, 16, 16]);
        assert_eq!(border_region(&img, 8).unwrap().shape(), &[1, 256]);
        assert!(border_region(&img, 9).is_err());
        assert!(border_region(&img, 0).is_err());
    }

    #[test]
    fn border_order_is_top_bottom_left_right() {
        let idx = border_indices(4, 5, 1).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 15, 16, 17, 18, 19, 5, 10, 9, 14]);
    }

    #[test]
    fn masks_partition_the_crop() {
        let inner = Region::Interior { width: 8 }.plane_mask(20, 24).unwrap();
        let border = Region::Border { width: 8 }.plane_mask(20, 24).unwrap();
        assert!(inner.iter().zip(&border).all(|(a, b)| a + b == 1.0));
        assert_eq!(border.iter().sum::<f64>() as usize, border_indices(20, 24, 8).unwrap().len());
        let ext = Region::Exterior {
            boxes: vec![BBox::new(2, 3, 4, 5)],
        }
        .plane_mask(10, 10)
        .unwrap();
        assert_eq!(ext.iter().sum::<f64>(), 80.0);
        assert!(Region::Exterior { boxes: vec![BBox::new(8, 8, 4, 4)] }
            .plane_mask(10, 10)
            .is_err());
    }

    #[test]
    fn seam_energy_extremes() {
        let flat = Tensor::full(&[3, 32, 32], 0.4);
        let b = BBox::new(8, 8, 10, 12);
        assert_eq!(seam_energy(&flat, b).unwrap(), 0.0);
        let mut img = Tensor::zeros(&[4, 32, 32]);
        for ch in 0..3 {
            for r in 8..18 {
                for c in 8..20 {
                    img.set(ch, r, c, 1.0);
                }
            }
        }
        // marker channel is ignored
        img.set(3, 7, 8, 5.0);
        assert_eq!(seam_energy(&img, b).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn border_pixel_count(h in 2usize..40, w in 2usize..40, x in 1usize..20) {
            prop_assume!(2 * x <= h.min(w));
            let n = border_indices(h, w, x).unwrap().len();
            prop_assert_eq!(n, 2 * x * (h + w) - 4 * x * x);
        }
    }
}
