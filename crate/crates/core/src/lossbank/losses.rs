use serde::{Deserialize, Serialize};

use super::features::{perceptual_distance_var, FeatureExtractor};
use super::region::{Region, BORDER_WIDTH};
use crate::diffcore::{ImageTensor, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Side length the coarse appearance loss compares at.
pub const COARSE_SIDE: usize = 64;

/// Weights of the canvas-side objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodyWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda_r1: f64,
    pub lambda_r2: f64,
    pub lambda5: f64,
    pub lambda6: f64,
}

impl Default for BodyWeights {
    fn default() -> Self {
        BodyWeights {
            lambda1: 500.0,
            lambda2: 0.05,
            lambda3: 0.0,
            lambda4: 2500.0,
            lambda_r1: 25000.0,
            lambda_r2: 1.0,
            lambda5: 9000.0,
            lambda6: 0.1,
        }
    }
}

/// Weights of the inset-side objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaceWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda_r1: f64,
    pub lambda_r2: f64,
    pub lambda7: f64,
    pub lambda8: f64,
}

impl Default for FaceWeights {
    fn default() -> Self {
        FaceWeights {
            lambda1: 500.0,
            lambda2: 0.05,
            lambda3: 0.1,
            lambda4: 10000.0,
            lambda_r1: 0.0,
            lambda_r2: 1.0,
            lambda7: 5000.0,
            lambda8: 1.75,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaTable {
    pub body: BodyWeights,
    pub face: FaceWeights,
}

impl LambdaTable {
    /// `(name, value)` pairs in a fixed order, for traces and audits.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let (b, f) = (&self.body, &self.face);
        vec![
            ("body.lambda1", b.lambda1),
            ("body.lambda2", b.lambda2),
            ("body.lambda3", b.lambda3),
            ("body.lambda4", b.lambda4),
            ("body.lambda_r1", b.lambda_r1),
            ("body.lambda_r2", b.lambda_r2),
            ("body.lambda5", b.lambda5),
            ("body.lambda6", b.lambda6),
            ("face.lambda1", f.lambda1),
            ("face.lambda2", f.lambda2),
            ("face.lambda3", f.lambda3),
            ("face.lambda4", f.lambda4),
            ("face.lambda_r1", f.lambda_r1),
            ("face.lambda_r2", f.lambda_r2),
            ("face.lambda7", f.lambda7),
            ("face.lambda8", f.lambda8),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.entries() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("lambda", format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

/// Mean absolute difference, restricted to the nonzero entries of `mask`.
pub fn l1_loss(tape: &mut Tape, a: Var, b: Var, mask: Option<&Tensor>) -> Result<Var> {
    same_shape(tape, "l1", a, b)?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    match mask {
        None => Ok(tape.mean(d)),
        Some(m) => {
            let count = m.data().iter().filter(|&&v| v != 0.0).count();
            let d = tape.mul_const(d, m)?;
            let s = tape.sum(d);
            Ok(tape.scale(s, 1.0 / count.max(1) as f64))
        }
    }
}

fn weighted_sum(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(k, v) in terms {
        let t = tape.scale(v, k);
        total = Some(match total {
            None => t,
            Some(acc) => tape.add(acc, t)?,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// `λa·L1 + λb·percep` on the pixels selected by `mask`; terms with a zero
/// weight are not evaluated.
fn l1_and_percep(
    tape: &mut Tape,
    a: Var,
    b: Var,
    mask: Option<&Tensor>,
    lambda_l1: f64,
    lambda_p: f64,
    fx: &FeatureExtractor,
) -> Result<Var> {
    same_shape(tape, "loss", a, b)?;
    let mut terms = Vec::new();
    if lambda_l1 != 0.0 {
        terms.push((lambda_l1, l1_loss(tape, a, b, mask)?));
    }
    if lambda_p != 0.0 {
        let (ma, mb) = match mask {
            None => (a, b),
            Some(m) => (tape.mul_const(a, m)?, tape.mul_const(b, m)?),
        };
        terms.push((lambda_p, perceptual_distance_var(tape, ma, mb, fx)?));
    }
    weighted_sum(tape, &terms)
}

/// Box-average (or resample) to `COARSE_SIDE × COARSE_SIDE`.
pub fn downsample_64(tape: &mut Tape, x: Var) -> Result<Var> {
    let (_, h, w) = tape.value(x).chw()?;
    if h == COARSE_SIDE && w == COARSE_SIDE {
        Ok(x)
    } else if h == w && h % COARSE_SIDE == 0 {
        tape.downsample_avg(x, COARSE_SIDE)
    } else {
        tape.resize_bilinear(x, COARSE_SIDE, COARSE_SIDE)
    }
}

/// `λ1·L1(D(crop), D(inset)) + λ2·percep(D(crop), D(inset))` at 64×64.
pub fn coarse_appearance_loss(
    tape: &mut Tape,
    canvas_crop: Var,
    inset: Var,
    lambda1: f64,
    lambda2: f64,
    fx: &FeatureExtractor,
) -> Result<Var> {
    let a = downsample_64(tape, canvas_crop)?;
    let b = downsample_64(tape, inset)?;
    l1_and_percep(tape, a, b, None, lambda1, lambda2, fx)
}

fn border_mask(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<Tensor> {
    same_shape(tape, op, a, b)?;
    let (c, h, w) = tape.value(a).chw()?;
    if h <= 2 * BORDER_WIDTH || w <= 2 * BORDER_WIDTH {
        return Err(Error::shape(
            op,
            format!("{h}×{w} is smaller than the minimum 17×17"),
        ));
    }
    Region::Border {
        width: BORDER_WIDTH,
    }
    .mask(c, h, w)
}

/// `λ4·L1(border_8(crop), border_8(inset)) + λ3·percep` on border-masked
/// images. The crop must already be at the inset resolution.
pub fn border_loss(
    tape: &mut Tape,
    canvas_crop: Var,
    inset: Var,
    lambda3: f64,
    lambda4: f64,
    fx: &FeatureExtractor,
) -> Result<Var> {
    let mask = border_mask(tape, "border_loss", canvas_crop, inset)?;
    l1_and_percep(tape, canvas_crop, inset, Some(&mask), lambda4, lambda3, fx)
}

/// Unweighted border L1; the quantity the stopping rule thresholds.
pub fn border_l1(canvas_crop: &ImageTensor, inset: &ImageTensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(canvas_crop.clone()), tape.constant(inset.clone()));
    let mask = border_mask(&tape, "border_l1", a, b)?;
    let l = l1_loss(&mut tape, a, b, Some(&mask))?;
    Ok(tape.value(l).item())
}

/// `λr1·‖w* − w_avg‖ + λr2·Σ‖δ_i‖` for a `[n + 1, d]` latent node.
pub fn latent_regularizer(
    tape: &mut Tape,
    latent: Var,
    w_avg: &[f64],
    lambda_r1: f64,
    lambda_r2: f64,
) -> Result<Var> {
    let (rows, d) = match tape.shape(latent) {
        &[r, d] if r >= 1 => (r, d),
        s => {
            return Err(Error::shape(
                "latent_regularizer",
                format!("expected [n + 1, d], got {s:?}"),
            ))
        }
    };
    if w_avg.len() != d {
        return Err(Error::shape(
            "latent_regularizer",
            format!("latent_dim {d} vs w_avg {}", w_avg.len()),
        ));
    }
    let mut terms = Vec::new();
    if lambda_r1 != 0.0 {
        let base = tape.narrow(latent, 0, 1)?;
        let avg = tape.constant(Tensor::from_parts(vec![1, d], w_avg.to_vec()));
        let diff = tape.sub(base, avg)?;
        terms.push((lambda_r1, tape.norm(diff)));
    }
    if lambda_r2 != 0.0 {
        for i in 1..rows {
            let delta = tape.narrow(latent, i, 1)?;
            terms.push((lambda_r2, tape.norm(delta)));
        }
    }
    weighted_sum(tape, &terms)
}

/// `λa·L1(region(img), region(ref)) + λb·percep` on region-masked images.
pub fn region_preservation_loss(
    tape: &mut Tape,
    img: Var,
    reference: Var,
    region: &Region,
    lambda_a: f64,
    lambda_b: f64,
    fx: &FeatureExtractor,
) -> Result<Var> {
    same_shape(tape, "region_preservation_loss", img, reference)?;
    let (c, h, w) = tape.value(img).chw()?;
    let mask = region.mask(c, h, w)?;
    l1_and_percep(tape, img, reference, Some(&mask), lambda_a, lambda_b, fx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;
    use crate::diffcore::finite_difference_check;
    use crate::lossbank::border_region;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, side: usize) -> Tensor {
        Tensor::uniform(&[3, side, side], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t).unwrap();
        t.value(v).item()
    }

    #[test]
    fn table_defaults() {
        let t = LambdaTable::default();
        assert_eq!(
            (t.body.lambda1, t.body.lambda2, t.body.lambda4, t.body.lambda_r1),
            (500.0, 0.05, 2500.0, 25000.0)
        );
        assert_eq!((t.body.lambda5, t.body.lambda6), (9000.0, 0.1));
        assert_eq!(
            (t.face.lambda1, t.face.lambda2, t.face.lambda3, t.face.lambda4),
            (500.0, 0.05, 0.1, 10000.0)
        );
        assert_eq!((t.face.lambda7, t.face.lambda8), (5000.0, 1.75));
        assert_eq!((t.body.lambda3, t.face.lambda_r1), (0.0, 0.0));
        let parsed: LambdaTable = toml::from_str("[face]\nlambda4 = 1.0\n").unwrap();
        assert_eq!(parsed.face.lambda4, 1.0);
        assert_eq!(parsed.body, BodyWeights::default());
    }

    #[test]
    fn coarse_appearance_values() {
        let fx = FeatureExtractor::new(1);
        let a = img(1, 128);
        assert_eq!(
            eval(|t| {
                let (x, y) = (t.constant(a.clone()), t.constant(a.clone()));
                coarse_appearance_loss(t, x, y, 500.0, 0.05, &fx)
            }),
            0.0
        );
        let b = a.map(|v| v + 0.1);
        let l = eval(|t| {
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            coarse_appearance_loss(t, x, y, 1.0, 0.0, &fx)
        });
        assert!((l - 0.1).abs() < 1e-12);
    }

    #[test]
    fn border_loss_values() {
        let fx = FeatureExtractor::new(1);
        let a = img(2, 64);
        let mut b = img(3, 64);
        // same border, different interior
        for ch in 0..3 {
            for r in 0..64 {
                for c in 0..64 {
                    let edge = !(8..56).contains(&r) || !(8..56).contains(&c);
                    if edge {
                        b.set(ch, r, c, a.at(ch, r, c));
                    }
                }
            }
        }
        let l = eval(|t| {
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            border_loss(t, x, y, 0.0, 1.0, &fx)
        });
        assert_eq!(l, 0.0);
        let shifted = a.map(|v| v + 0.2);
        let l = eval(|t| {
            let (x, y) = (t.constant(a.clone()), t.constant(shifted.clone()));
            border_loss(t, x, y, 0.0, 1.0, &fx)
        });
        assert!((l - 0.2).abs() < 1e-12);
        assert!((border_l1(&a, &shifted).unwrap() - 0.2).abs() < 1e-12);
        let small = img(4, 16);
        assert!(border_l1(&small, &small).is_err());
    }

    #[test]
    fn border_l1_matches_gathered_frame() {
        let (a, b) = (img(5, 64), img(6, 64));
        let ba = border_region(&a, 8).unwrap();
        let bb = border_region(&b, 8).unwrap();
        let direct = ba.mean_abs_diff(&bb).unwrap();
        assert!((border_l1(&a, &b).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn regularizer_values() {
        let w_avg = vec![0.0; 4];
        let mut rows = vec![0.0; 3 * 4];
        assert_eq!(
            eval(|t| {
                let l = t.constant(Tensor::new(vec![3, 4], rows.clone()).unwrap());
                latent_regularizer(t, l, &w_avg, 1.0, 1.0)
            }),
            0.0
        );
        rows[0] = 2.0;
        rows[4] = 0.3;
        rows[9] = -0.4;
        let base_only = eval(|t| {
            let l = t.constant(Tensor::new(vec![3, 4], rows.clone()).unwrap());
            latent_regularizer(t, l, &w_avg, 1.0, 0.0)
        });
        assert_eq!(base_only, 2.0);
        let deltas = eval(|t| {
            let l = t.constant(Tensor::new(vec![3, 4], rows.clone()).unwrap());
            latent_regularizer(t, l, &w_avg, 0.0, 1.0)
        });
        let doubled: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(i, v)| if i >= 4 { 2.0 * v } else { *v })
            .collect();
        let deltas2 = eval(|t| {
            let l = t.constant(Tensor::new(vec![3, 4], doubled.clone()).unwrap());
            latent_regularizer(t, l, &w_avg, 0.0, 1.0)
        });
        assert!((deltas - 0.7).abs() < 1e-12);
        assert!((deltas2 - 2.0 * deltas).abs() < 1e-12);
    }

    #[test]
    fn exterior_preservation_masks_gradient() {
        let fx = FeatureExtractor::new(2);
        let reference = img(7, 32);
        let bbox = BBox::new(6, 9, 12, 10);
        let mut x = reference.clone();
        for ch in 0..3 {
            for r in bbox.row..bbox.row + bbox.height {
                for c in bbox.col..bbox.col + bbox.width {
                    x.set(ch, r, c, 1.0 - x.at(ch, r, c));
                }
            }
        }
        let region = Region::Exterior { boxes: vec![bbox] };
        let l1_only = eval(|t| {
            let (a, b) = (t.constant(x.clone()), t.constant(reference.clone()));
            region_preservation_loss(t, a, b, &region, 1.0, 0.0, &fx)
        });
        assert_eq!(l1_only, 0.0);

        let moved = x.map(|v| v + 0.05);
        let mut t = Tape::new();
        let leaf = t.leaf(moved);
        let r = t.constant(reference.clone());
        let l = region_preservation_loss(&mut t, leaf, r, &region, 9000.0, 0.1, &fx).unwrap();
        let g = t.grad(l, &[leaf]).unwrap().remove(0);
        for ch in 0..3 {
            for rr in 0..32 {
                for c in 0..32 {
                    if bbox.contains(rr, c) {
                        assert_eq!(g.at(ch, rr, c), 0.0);
                    }
                }
            }
        }
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn losses_pass_gradient_checks() {
        let fx = FeatureExtractor::new(3);
        let target = img(8, 24);
        let x = img(9, 24);
        let coords: Vec<usize> = (0..x.len()).step_by(37).collect();
        type Loss<'a> = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>;
        let checks: Vec<Loss> = vec![
            Box::new(|t, v| {
                let r = t.constant(target.clone());
                coarse_appearance_loss(t, r, v, 1.0, 0.5, &fx)
            }),
            Box::new(|t, v| {
                let r = t.constant(target.clone());
                border_loss(t, r, v, 0.5, 1.0, &fx)
            }),
            Box::new(|t, v| {
                let r = t.constant(target.clone());
                let region = Region::Interior { width: 8 };
                region_preservation_loss(t, v, r, &region, 1.0, 0.5, &fx)
            }),
        ];
        for f in checks {
            let chk = finite_difference_check(f, &x, 1e-6, Some(&coords)).unwrap();
            assert!(chk.max_rel_err < 1e-5, "{}", chk.max_rel_err);
        }
    }
}
