use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// A w+ code stored as a shared base `w*` plus one offset per layer.
///
/// Row 0 of the backing `[n_layers + 1, latent_dim]` tensor is the base,
/// row `i + 1` is the offset of layer `i`. The code fed to layer `i` is
/// `base + delta_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredLatent {
    rows: Tensor,
}

impl LayeredLatent {
    /// All offsets zero.
    pub fn flat(base: &[f64], n_layers: usize) -> Self {
        let d = base.len();
        let mut data = vec![0.0; (n_layers + 1) * d];
        data[..d].copy_from_slice(base);
        LayeredLatent {
            rows: Tensor::from_parts(vec![n_layers + 1, d], data),
        }
    }

    pub fn from_parts(base: &[f64], deltas: &[Vec<f64>]) -> Result<Self> {
        let d = base.len();
        if let Some(bad) = deltas.iter().find(|v| v.len() != d) {
            return Err(Error::shape(
                "LayeredLatent",
                format!("offset of length {} for latent_dim {d}", bad.len()),
            ));
        }
        let mut data = base.to_vec();
        for delta in deltas {
            data.extend_from_slice(delta);
        }
        Ok(LayeredLatent {
            rows: Tensor::from_parts(vec![deltas.len() + 1, d], data),
        })
    }

    /// Wrap a `[n_layers + 1, latent_dim]` tensor.
    pub fn from_tensor(rows: Tensor) -> Result<Self> {
        if rows.shape().len() != 2 || rows.shape()[0] < 2 {
            return Err(Error::shape(
                "LayeredLatent",
                format!("expected [n_layers + 1, dim], got {:?}", rows.shape()),
            ));
        }
        Ok(LayeredLatent { rows })
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.rows
    }

    pub fn into_tensor(self) -> Tensor {
        self.rows
    }

    pub fn n_layers(&self) -> usize {
        self.rows.shape()[0] - 1
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn base(&self) -> &[f64] {
        &self.rows.data()[..self.dim()]
    }

    pub fn delta(&self, layer: usize) -> &[f64] {
        let d = self.dim();
        &self.rows.data()[(layer + 1) * d..(layer + 2) * d]
    }

    pub fn delta_mut(&mut self, layer: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.rows.data_mut()[(layer + 1) * d..(layer + 2) * d]
    }

    pub fn base_mut(&mut self) -> &mut [f64] {
        let d = self.dim();
        &mut self.rows.data_mut()[..d]
    }

    /// Effective code of layer `i`: `base + delta_i`.
    pub fn code(&self, layer: usize) -> Vec<f64> {
        self.base()
            .iter()
            .zip(self.delta(layer))
            .map(|(b, d)| b + d)
            .collect()
    }

    pub fn is_flat(&self) -> bool {
        self.rows.data()[self.dim()..].iter().all(|&v| v == 0.0)
    }

    /// Convex combination `(1 − f)·self + f·other`, row by row.
    /// `self + f·(other − self)`; exact at `f = 0`, `f = 1` and when both agree.
    pub fn lerp(&self, other: &LayeredLatent, f: f64) -> Result<LayeredLatent> {
        let rows = self
            .rows
            .zip_map(&other.rows, |a, b| if f == 1.0 { b } else { a + f * (b - a) })?;
        Ok(LayeredLatent { rows })
    }
}

/// Mean mapped latent of a generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageLatent {
    pub w_avg: Vec<f64>,
    pub sample_count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_is_base_plus_delta() {
        let l = LayeredLatent::from_parts(&[1.0, 2.0], &[vec![0.5, -1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(l.code(0), vec![1.5, 1.0]);
        assert_eq!(l.code(1), vec![1.0, 2.0]);
        assert!(!l.is_flat());
        assert!(LayeredLatent::flat(&[3.0; 4], 18).is_flat());
        assert!(LayeredLatent::from_parts(&[1.0], &[vec![1.0, 2.0]]).is_err());
    }
}
