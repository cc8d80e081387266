//! Dense `f64` tensors, a reverse-mode tape, and the ADAM update rule.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_update, AdamState, BETA1, BETA2, EPSILON};
pub use gradcheck::{finite_difference_check, GradCheck};
pub use tape::{Tape, Var};
pub use tensor::{ImageTensor, Tensor};

use crate::detector::BBox;
use crate::error::{Error, Result};

/// Bilinear resize of an image value (no tape).
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", "empty spatial extent"));
    }
    let data = kernels::resize_forward(img.data(), c, h, w, out_h, out_w);
    Ok(Tensor::from_parts(vec![c, out_h, out_w], data))
}

/// Crop of an image value (no tape).
pub fn crop(img: &Tensor, bbox: BBox) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    if !bbox.fits(h, w) {
        return Err(Error::OutOfBounds {
            bbox,
            height: h,
            width: w,
        });
    }
    Ok(tape::crop_value(img, c, h, w, bbox))
}

/// Box-average downsample of an image value to `target × target` (no tape).
pub fn downsample_avg(img: &Tensor, target: usize) -> Result<Tensor> {
    let mut t = Tape::new();
    let v = t.constant(img.clone());
    let out = t.downsample_avg(v, target)?;
    Ok(t.value(out).clone())
}
