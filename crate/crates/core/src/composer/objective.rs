use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::lossbank::LambdaTable;

/// Which application the optimization serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Canvas fixed, insets optimized.
    RefineInset,
    /// Both optimized, canvas held to its starting body.
    JointRefine,
    /// Both optimized, inset held to its starting face.
    BodyForFace,
    /// Both optimized, both held to their references.
    Montage,
    /// Joint refinement with several insets.
    MultiInset,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::RefineInset => "refine_inset",
            Mode::JointRefine => "joint_refine",
            Mode::BodyForFace => "body_for_face",
            Mode::Montage => "montage",
            Mode::MultiInset => "multi_inset",
        }
    }
}

/// The latent a term's gradient is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Canvas,
    Inset(usize),
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Canvas => write!(f, "canvas"),
            Phase::Inset(k) => write!(f, "inset{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossId {
    /// Low-resolution crop vs inset.
    Appearance,
    /// Border frame of crop vs inset.
    Border,
    /// Distance of the latent from the average and offset sizes.
    Regularizer,
    /// Canvas outside the boxes vs the reference body.
    BodyPreservation,
    /// Inset interior vs the reference face.
    FacePreservation,
    /// Inset interior vs its own state at the snapshot iteration.
    Snapshot,
}

impl LossId {
    pub fn symbol(self) -> &'static str {
        match self {
            LossId::Appearance => "L_A",
            LossId::Border => "L_B",
            LossId::Regularizer => "L_R",
            LossId::BodyPreservation => "L_RB",
            LossId::FacePreservation => "L_RF",
            LossId::Snapshot => "L_SNAP",
        }
    }
}

/// One weighted loss term. Its value is `lambda_a·a + lambda_b·b` where
/// `(a, b)` are the term's two raw components (L1 and perceptual, or base and
/// offset norms for the regularizer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub loss: LossId,
    /// Latent whose optimizer receives this term's gradient.
    pub bound: Phase,
    /// Inset the term compares, for per-inset terms.
    pub inset: Option<usize>,
    pub lambda_a: f64,
    pub lambda_b: f64,
}

impl Term {
    pub fn label(&self) -> String {
        let loss = match self.loss {
            LossId::Appearance => "LA",
            LossId::Border => "LB",
            LossId::Regularizer => "LR",
            LossId::BodyPreservation => "LRB",
            LossId::FacePreservation => "LRF",
            LossId::Snapshot => "SNAP",
        };
        match (self.loss, self.inset, self.bound) {
            (LossId::Appearance | LossId::Border, Some(k), Phase::Canvas) => {
                format!("{loss}{k}_canvas")
            }
            (_, _, bound) => format!("{loss}_{bound}"),
        }
    }
}

/// Declarative objective: a mode, its term list and optional references.
#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    pub mode: Mode,
    pub n_insets: usize,
    pub lambdas: LambdaTable,
    pub terms: Vec<Term>,
    /// Body the canvas exterior is held to; the starting canvas if `None`.
    pub body_ref: Option<Tensor>,
    /// Faces the inset interiors are held to; the starting insets if `None`.
    pub face_refs: Vec<Option<Tensor>>,
}

impl ObjectiveSpec {
    pub fn new(mode: Mode, n_insets: usize, lambdas: LambdaTable) -> Result<Self> {
        lambdas.validate()?;
        if n_insets == 0 {
            return Err(Error::invalid("n_insets", "need at least one inset"));
        }
        if mode != Mode::MultiInset && mode != Mode::RefineInset && n_insets != 1 {
            return Err(Error::invalid(
                "n_insets",
                format!("{} takes exactly one inset", mode.name()),
            ));
        }
        let (b, f) = (lambdas.body, lambdas.face);
        let canvas_side = mode != Mode::RefineInset;
        let mut terms = Vec::new();
        for k in 0..n_insets {
            if canvas_side {
                terms.push(Term {
                    loss: LossId::Appearance,
                    bound: Phase::Canvas,
                    inset: Some(k),
                    lambda_a: b.lambda1,
                    lambda_b: b.lambda2,
                });
                terms.push(Term {
                    loss: LossId::Border,
                    bound: Phase::Canvas,
                    inset: Some(k),
                    lambda_a: b.lambda4,
                    lambda_b: b.lambda3,
                });
            }
            terms.push(Term {
                loss: LossId::Appearance,
                bound: Phase::Inset(k),
                inset: Some(k),
                lambda_a: f.lambda1,
                lambda_b: f.lambda2,
            });
            terms.push(Term {
                loss: LossId::Border,
                bound: Phase::Inset(k),
                inset: Some(k),
                lambda_a: f.lambda4,
                lambda_b: f.lambda3,
            });
        }
        if canvas_side {
            terms.push(Term {
                loss: LossId::Regularizer,
                bound: Phase::Canvas,
                inset: None,
                lambda_a: b.lambda_r1,
                lambda_b: b.lambda_r2,
            });
            for k in 0..n_insets {
                terms.push(Term {
                    loss: LossId::Regularizer,
                    bound: Phase::Inset(k),
                    inset: Some(k),
                    lambda_a: f.lambda_r1,
                    lambda_b: f.lambda_r2,
                });
            }
        }
        if matches!(mode, Mode::JointRefine | Mode::Montage | Mode::MultiInset) {
            terms.push(Term {
                loss: LossId::BodyPreservation,
                bound: Phase::Canvas,
                inset: None,
                lambda_a: b.lambda5,
                lambda_b: b.lambda6,
            });
        }
        for k in 0..n_insets {
            if matches!(mode, Mode::BodyForFace | Mode::Montage) {
                terms.push(Term {
                    loss: LossId::FacePreservation,
                    bound: Phase::Inset(k),
                    inset: Some(k),
                    lambda_a: f.lambda7,
                    lambda_b: f.lambda8,
                });
            }
            if mode == Mode::RefineInset {
                terms.push(Term {
                    loss: LossId::Snapshot,
                    bound: Phase::Inset(k),
                    inset: Some(k),
                    lambda_a: f.lambda7,
                    lambda_b: f.lambda8,
                });
            }
        }
        Ok(ObjectiveSpec {
            mode,
            n_insets,
            lambdas,
            terms,
            body_ref: None,
            face_refs: vec![None; n_insets],
        })
    }

    pub fn with_body_ref(mut self, img: Tensor) -> Self {
        self.body_ref = Some(img);
        self
    }

    pub fn with_face_ref(mut self, inset: usize, img: Tensor) -> Self {
        if inset < self.face_refs.len() {
            self.face_refs[inset] = Some(img);
        }
        self
    }

    /// Distinct constituent losses of the objective, in a fixed order.
    /// The snapshot constraint is listed separately by [`Self::constraints`].
    pub fn audit(&self) -> Vec<&'static str> {
        let order = [
            LossId::Appearance,
            LossId::Border,
            LossId::Regularizer,
            LossId::FacePreservation,
            LossId::BodyPreservation,
        ];
        order
            .iter()
            .filter(|id| self.terms.iter().any(|t| t.loss == **id))
            .map(|id| id.symbol())
            .collect()
    }

    /// Auxiliary constraints that are not part of the minimized sum's
    /// definition but are added during optimization.
    pub fn constraints(&self) -> Vec<&'static str> {
        if self.terms.iter().any(|t| t.loss == LossId::Snapshot) {
            vec![LossId::Snapshot.symbol()]
        } else {
            Vec::new()
        }
    }

    pub fn optimizes_canvas(&self) -> bool {
        self.terms.iter().any(|t| t.bound == Phase::Canvas)
    }

    pub fn uses(&self, loss: LossId) -> bool {
        self.terms.iter().any(|t| t.loss == loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audits_match_objectives() {
        let l = LambdaTable::default();
        let audit = |m, n| ObjectiveSpec::new(m, n, l).unwrap().audit();
        assert_eq!(audit(Mode::RefineInset, 1), ["L_A", "L_B"]);
        assert_eq!(audit(Mode::JointRefine, 1), ["L_A", "L_B", "L_R", "L_RB"]);
        assert_eq!(audit(Mode::BodyForFace, 1), ["L_A", "L_B", "L_R", "L_RF"]);
        assert_eq!(audit(Mode::Montage, 1), ["L_A", "L_B", "L_R", "L_RF", "L_RB"]);
        assert_eq!(audit(Mode::MultiInset, 2), ["L_A", "L_B", "L_R", "L_RB"]);
        assert_eq!(
            ObjectiveSpec::new(Mode::RefineInset, 1, l).unwrap().constraints(),
            ["L_SNAP"]
        );
        assert!(ObjectiveSpec::new(Mode::Montage, 2, l).is_err());
        assert!(ObjectiveSpec::new(Mode::MultiInset, 0, l).is_err());
    }

    #[test]
    fn sides_use_their_own_weights() {
        let spec = ObjectiveSpec::new(Mode::Montage, 1, LambdaTable::default()).unwrap();
        let find = |loss, bound| {
            spec.terms
                .iter()
                .find(|t| t.loss == loss && t.bound == bound)
                .map(|t| (t.lambda_a, t.lambda_b))
        };
        assert_eq!(find(LossId::Border, Phase::Canvas), Some((2500.0, 0.0)));
        assert_eq!(find(LossId::Border, Phase::Inset(0)), Some((10000.0, 0.1)));
        assert_eq!(find(LossId::Regularizer, Phase::Canvas), Some((25000.0, 1.0)));
        assert_eq!(find(LossId::Regularizer, Phase::Inset(0)), Some((0.0, 1.0)));
        assert_eq!(find(LossId::BodyPreservation, Phase::Canvas), Some((9000.0, 0.1)));
        assert_eq!(find(LossId::FacePreservation, Phase::Inset(0)), Some((5000.0, 1.75)));
        let labels: Vec<String> = spec.terms.iter().map(Term::label).collect();
        assert!(labels.contains(&"LA0_canvas".to_string()));
        assert!(labels.contains(&"LRF_inset0".to_string()));
        assert!(spec.optimizes_canvas());
        assert!(!ObjectiveSpec::new(Mode::RefineInset, 1, LambdaTable::default())
            .unwrap()
            .optimizes_canvas());
    }
}
