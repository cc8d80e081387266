//! Central finite differences against tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Result of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |numeric_i − analytic_i| / max(‖analytic‖∞, ‖numeric‖∞)`;
    /// 0 when both gradients vanish.
    pub max_rel_err: f64,
}

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// `f` builds its graph on the tape it is given, with `x` registered as the
/// only leaf, and returns the scalar loss node. `coords` restricts the check to
/// a subset of flat indices (all of them when `None`).
pub fn finite_difference_check<F>(
    f: F,
    x: &Tensor,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(&mut tape, leaf)?;
    let full = tape.grad(loss, &[leaf])?.remove(0);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let l = t.constant(p.clone());
        let out = f(&mut t, l)?;
        Ok(t.value(out).item())
    };

    let all: Vec<usize>;
    let idx = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut analytic = Vec::with_capacity(idx.len());
    let mut numeric = Vec::with_capacity(idx.len());
    let mut probe = x.clone();
    for &i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
        analytic.push(full.data()[i]);
    }
    let max_rel_err = relative_error(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_err,
    })
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}
