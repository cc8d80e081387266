//! Distribution metrics on random-feature embeddings: Fréchet distance,
//! k-NN precision/recall and seam statistics.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::diffcore::{ImageTensor, Tape};
use crate::error::{Error, Result};
use crate::lossbank::{seam_energy, FeatureExtractor};

/// Eigenvalues above `-PSD_TOLERANCE` are clamped to zero.
pub const PSD_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Generated,
}

/// `n` feature vectors, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    rows: DMatrix<f64>,
    pub source: Source,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, source: Source) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::invalid("features", format!("need at least 2 rows, got {n}")));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("FeatureSet", "rows must share a positive length"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features", "non-finite entry"));
        }
        Ok(FeatureSet {
            rows: DMatrix::from_row_iterator(n, d, rows.into_iter().flatten()),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.rows.row(i).iter().copied().collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    fn mean(&self) -> DVector<f64> {
        self.rows.row_mean().transpose()
    }

    /// Unbiased sample covariance.
    fn covariance(&self) -> DMatrix<f64> {
        let mu = self.rows.row_mean();
        let mut centered = self.rows.clone();
        for mut r in centered.row_iter_mut() {
            r -= &mu;
        }
        centered.transpose() * &centered / (self.len() as f64 - 1.0)
    }
}

/// Per-stage channel means and standard deviations of each image.
pub fn embed(images: &[ImageTensor], fx: &FeatureExtractor, source: Source) -> Result<FeatureSet> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("images", "empty list"));
    };
    let shape = first.shape().to_vec();
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape(
                "embed",
                format!("{:?} vs {:?}", img.shape(), shape),
            ));
        }
        let mut tape = Tape::new();
        let v = tape.constant(img.channels(0, 3.min(img.chw()?.0))?);
        let mut row = Vec::new();
        for stage in fx.features(&mut tape, v)? {
            let t = tape.value(stage);
            let (c, h, w) = t.chw()?;
            for plane in t.data().chunks(h * w).take(c) {
                let m = plane.iter().sum::<f64>() / plane.len() as f64;
                let var = plane.iter().map(|x| (x - m).powi(2)).sum::<f64>() / plane.len() as f64;
                row.push(m);
                row.push(var.sqrt());
            }
        }
        rows.push(row);
    }
    FeatureSet::new(rows, source)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::NotPsd(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

fn psd_sqrt_trace(m: &DMatrix<f64>) -> Result<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut total = 0.0;
    for v in SymmetricEigen::new(sym).eigenvalues.iter() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::NotPsd(*v));
        }
        total += v.max(0.0).sqrt();
    }
    Ok(total)
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// `tr((Σa Σb)^{1/2})` is computed as `tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`,
/// which has the same eigenvalues and stays symmetric.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "fid",
            format!("feature dims {} and {}", a.dim(), b.dim()),
        ));
    }
    let dm = a.mean() - b.mean();
    let (ca, cb) = (a.covariance(), b.covariance());
    let sa = psd_sqrt(&ca)?;
    let cross = psd_sqrt_trace(&(&sa * &cb * &sa))?;
    let value = dm.norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

fn sq_dist(m: &DMatrix<f64>, i: usize, o: &DMatrix<f64>, j: usize) -> f64 {
    m.row(i)
        .iter()
        .zip(o.row(j).iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum()
}

/// Squared distance of each row to its k-th nearest other row.
fn knn_radii(m: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let n = m.nrows();
    (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(m, i, m, j)).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

/// Fraction of `points` rows inside the union of `support`'s k-NN balls.
fn coverage(support: &DMatrix<f64>, radii: &[f64], points: &DMatrix<f64>) -> f64 {
    let inside = (0..points.nrows())
        .filter(|&p| (0..support.nrows()).any(|s| sq_dist(points, p, support, s) <= radii[s]))
        .count();
    inside as f64 / points.nrows() as f64
}

/// k-NN manifold precision (generated inside real) and recall (real
/// inside generated).
pub fn precision_recall(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    if real.dim() != gen.dim() {
        return Err(Error::shape(
            "precision_recall",
            format!("feature dims {} and {}", real.dim(), gen.dim()),
        ));
    }
    if k == 0 || k >= real.len().min(gen.len()) {
        return Err(Error::invalid(
            "k",
            format!("{k} must be in 1..{}", real.len().min(gen.len())),
        ));
    }
    let rr = knn_radii(real.matrix(), k);
    let rg = knn_radii(gen.matrix(), k);
    for (name, radii) in [("real", &rr), ("generated", &rg)] {
        if radii.iter().all(|&r| r == 0.0) {
            return Err(Error::Degenerate(format!("{name} set has only duplicate points")));
        }
    }
    Ok((
        coverage(real.matrix(), &rr, gen.matrix()),
        coverage(gen.matrix(), &rg, real.matrix()),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeamSummary {
    pub n: usize,
    pub mean: f64,
    pub max: f64,
}

pub fn seam_summary(items: &[(ImageTensor, BBox)]) -> Result<SeamSummary> {
    if items.is_empty() {
        return Err(Error::invalid("items", "empty list"));
    }
    let values = items
        .iter()
        .map(|(img, b)| seam_energy(img, *b))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SeamSummary {
        n: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

pub fn write_report<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value", "n", "seed", "config_hash"])?;
    for r in rows {
        w.write_record([
            r.metric.clone(),
            format!("{:.12}", r.value),
            r.n.to_string(),
            r.seed.to_string(),
            r.config_hash.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
