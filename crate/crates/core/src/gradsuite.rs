//! Finite-difference audit of every differentiable primitive, loss,
//! generator and assembled objective.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::composer::{phase_objective, Gan, Latents, Mode, Models, ObjectiveSpec, Phase};
use crate::detector::{detect_bbox, BBox, DEFAULT_THRESHOLD};
use crate::diffcore::{finite_difference_check, GradCheck, Tape, Tensor, Var};
use crate::error::Result;
use crate::genmodel::{GeneratorSpec, InitMode, LayeredLatent, MarkerSpec};
use crate::lossbank::{
    border_loss, coarse_appearance_loss, l1_loss, latent_regularizer, perceptual_distance_var,
    region_preservation_loss, FeatureExtractor, LambdaTable, Region, BORDER_WIDTH,
};

pub const SUITE_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_POINTS: usize = 10;

const EPS: f64 = 1e-6;
const EPS_LATENT: f64 = 1e-5;
/// Coordinates probed per point when the input is large.
const PROBES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Primitive,
    Loss,
    Generator,
    Objective,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Primitive => "primitive",
            Kind::Loss => "loss",
            Kind::Generator => "generator",
            Kind::Objective => "objective",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub kind: Kind,
    pub points: usize,
    pub max_rel_err: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < SUITE_TOLERANCE
    }
}

/// Small models shared by the loss and objective checks.
struct Ctx {
    fx: FeatureExtractor,
    canvas: Gan,
    canvas2: Gan,
    insets: Vec<Gan>,
}

impl Ctx {
    fn new(seed: u64) -> Result<Ctx> {
        let canvas_spec = |markers: Vec<MarkerSpec>| GeneratorSpec {
            out_resolution: 64,
            markers,
            ..GeneratorSpec::canvas(seed + 1)
        };
        let inset_spec = |s: u64| GeneratorSpec {
            out_resolution: 32,
            ..GeneratorSpec::inset(s)
        };
        Ok(Ctx {
            fx: FeatureExtractor::new(seed + 5),
            canvas: Gan::new(&canvas_spec(vec![MarkerSpec::new(0.35, 0.5, 0.14)]), 500, seed)?,
            canvas2: Gan::new(
                &canvas_spec(vec![
                    MarkerSpec::new(0.35, 0.28, 0.13),
                    MarkerSpec::new(0.35, 0.72, 0.13),
                ]),
                500,
                seed,
            )?,
            insets: vec![
                Gan::new(&inset_spec(seed + 2), 500, seed)?,
                Gan::new(&inset_spec(seed + 3), 500, seed)?,
            ],
        })
    }
}

type Case = (&'static str, Kind, fn(&mut ChaCha8Rng, &Ctx) -> Result<f64>);

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Max relative error of `sum(r ⊙ op(x))` for a random projection `r`.
fn projected<F>(x: &Tensor, rng: &mut ChaCha8Rng, eps: f64, op: F) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut t = Tape::new();
    let probe = t.constant(x.clone());
    let out = op(&mut t, probe)?;
    let r = uniform(t.value(out).shape(), -1.0, 1.0, rng);
    let coords = (x.len() > 4 * PROBES).then(|| sample_coords(x.len(), rng));
    let check = finite_difference_check(
        |t, v| {
            let y = op(t, v)?;
            let p = t.mul_const(y, &r)?;
            Ok(t.sum(p))
        },
        x,
        eps,
        coords.as_deref(),
    )?;
    Ok(check.max_rel_err)
}

/// Max relative error of a scalar-valued `op(x)`.
fn scalar<F>(x: &Tensor, rng: &mut ChaCha8Rng, eps: f64, op: F) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords = (x.len() > 4 * PROBES).then(|| sample_coords(x.len(), rng));
    let check: GradCheck = finite_difference_check(op, x, eps, coords.as_deref())?;
    Ok(check.max_rel_err)
}

fn sample_coords(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..PROBES).map(|_| rng.random_range(0..n)).collect()
}

fn image(c: usize, side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(&[c, side, side], 0.05, 0.95, rng)
}

fn primitive_cases() -> Vec<Case> {
    vec![
        ("add", Kind::Primitive, |rng, _| {
            let (x, c) = (uniform(&[2, 3, 4], -1.0, 1.0, rng), uniform(&[2, 3, 4], -1.0, 1.0, rng));
            projected(&x, rng, EPS, |t, v| {
                let k = t.constant(c.clone());
                t.add(v, k)
            })
        }),
        ("sub", Kind::Primitive, |rng, _| {
            let (x, c) = (uniform(&[2, 3, 4], -1.0, 1.0, rng), uniform(&[2, 3, 4], -1.0, 1.0, rng));
            projected(&x, rng, EPS, |t, v| {
                let k = t.constant(c.clone());
                t.sub(k, v)
            })
        }),
        ("mul", Kind::Primitive, |rng, _| {
            let (x, c) = (uniform(&[2, 3, 4], -1.0, 1.0, rng), uniform(&[2, 3, 4], -1.0, 1.0, rng));
            let a = projected(&x, rng, EPS, |t, v| {
                let k = t.constant(c.clone());
                t.mul(v, k)
            })?;
            let b = projected(&x, rng, EPS, |t, v| t.mul(v, v))?;
            Ok(a.max(b))
        }),
        ("scale", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            let k = rng.random_range(-3.0..3.0);
            projected(&x, rng, EPS, move |t, v| Ok(t.scale(v, k)))
        }),
        ("offset", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            let k = rng.random_range(-3.0..3.0);
            projected(&x, rng, EPS, move |t, v| Ok(t.offset(v, k)))
        }),
        ("mul_const", Kind::Primitive, |rng, _| {
            let (x, c) = (uniform(&[2, 3, 4], -1.0, 1.0, rng), uniform(&[2, 3, 4], -1.0, 1.0, rng));
            projected(&x, rng, EPS, |t, v| t.mul_const(v, &c))
        }),
        ("abs", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            projected(&x, rng, EPS, |t, v| Ok(t.abs(v)))
        }),
        ("square", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            projected(&x, rng, EPS, |t, v| Ok(t.square(v)))
        }),
        ("sigmoid", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 3, 4], -4.0, 4.0, rng);
            projected(&x, rng, EPS, |t, v| Ok(t.sigmoid(v)))
        }),
        ("squash", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 3, 4], -4.0, 4.0, rng);
            projected(&x, rng, EPS, |t, v| Ok(t.squash(v)))
        }),
        ("smooth_leaky", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 3, 4], -2.0, 2.0, rng);
            projected(&x, rng, EPS, |t, v| Ok(t.smooth_leaky(v, 0.2)))
        }),
        ("sum", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            projected(&x, rng, EPS, |t, v| Ok(t.sum(v)))
        }),
        ("mean", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            projected(&x, rng, EPS, |t, v| Ok(t.mean(v)))
        }),
        ("norm", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            projected(&x, rng, EPS, |t, v| Ok(t.norm(v)))
        }),
        ("matmul", Kind::Primitive, |rng, _| {
            let (a, b) = (uniform(&[3, 4], -1.0, 1.0, rng), uniform(&[4, 5], -1.0, 1.0, rng));
            let ea = projected(&a, rng, EPS, |t, v| {
                let k = t.constant(b.clone());
                t.matmul(v, k)
            })?;
            let eb = projected(&b, rng, EPS, |t, v| {
                let k = t.constant(a.clone());
                t.matmul(k, v)
            })?;
            Ok(ea.max(eb))
        }),
        ("reshape", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            projected(&x, rng, EPS, |t, v| t.reshape(v, &[6, 4]))
        }),
        ("narrow", Kind::Primitive, |rng, _| {
            let x = uniform(&[4, 3], -1.0, 1.0, rng);
            let start = rng.random_range(0..3);
            projected(&x, rng, EPS, move |t, v| t.narrow(v, start, 2))
        }),
        ("concat", Kind::Primitive, |rng, _| {
            let (x, c) = (uniform(&[2, 3], -1.0, 1.0, rng), uniform(&[1, 3], -1.0, 1.0, rng));
            projected(&x, rng, EPS, |t, v| {
                let k = t.constant(c.clone());
                t.concat(&[v, k, v])
            })
        }),
        ("gather", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..24)).collect();
            projected(&x, rng, EPS, move |t, v| t.gather(v, idx.clone(), &[2, 3]))
        }),
        ("channel_mul", Kind::Primitive, |rng, _| {
            let (x, s) = (uniform(&[3, 4, 5], -1.0, 1.0, rng), uniform(&[3], -1.0, 1.0, rng));
            let ex = projected(&x, rng, EPS, |t, v| {
                let k = t.constant(s.clone());
                t.channel_mul(v, k)
            })?;
            let es = projected(&s, rng, EPS, |t, v| {
                let k = t.constant(x.clone());
                t.channel_mul(k, v)
            })?;
            Ok(ex.max(es))
        }),
        ("channel_add", Kind::Primitive, |rng, _| {
            let (x, s) = (uniform(&[3, 4, 5], -1.0, 1.0, rng), uniform(&[3], -1.0, 1.0, rng));
            let ex = projected(&x, rng, EPS, |t, v| {
                let k = t.constant(s.clone());
                t.channel_add(v, k)
            })?;
            let es = projected(&s, rng, EPS, |t, v| {
                let k = t.constant(x.clone());
                t.channel_add(k, v)
            })?;
            Ok(ex.max(es))
        }),
        ("resize_bilinear", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 5, 6], -1.0, 1.0, rng);
            let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
            projected(&x, rng, EPS, move |t, v| t.resize_bilinear(v, h, w))
        }),
        ("upsample_bilinear_2x", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 4, 4], -1.0, 1.0, rng);
            projected(&x, rng, EPS, |t, v| t.upsample_bilinear_2x(v))
        }),
        ("box_downsample", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 8, 8], -1.0, 1.0, rng);
            projected(&x, rng, EPS, |t, v| t.box_downsample(v, 2))
        }),
        ("downsample_avg", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 8, 8], -1.0, 1.0, rng);
            projected(&x, rng, EPS, |t, v| t.downsample_avg(v, 4))
        }),
        ("crop", Kind::Primitive, |rng, _| {
            let x = uniform(&[2, 8, 8], -1.0, 1.0, rng);
            let b = BBox::new(rng.random_range(0..4), rng.random_range(0..4), 3, 4);
            projected(&x, rng, EPS, move |t, v| t.crop(v, b))
        }),
        ("slice_channels", Kind::Primitive, |rng, _| {
            let x = uniform(&[4, 3, 3], -1.0, 1.0, rng);
            projected(&x, rng, EPS, |t, v| t.slice_channels(v, 1, 2))
        }),
        ("conv3x3", Kind::Primitive, |rng, _| {
            let (x, w) = (uniform(&[2, 5, 4], -1.0, 1.0, rng), uniform(&[3, 2, 3, 3], -1.0, 1.0, rng));
            let ex = projected(&x, rng, EPS, |t, v| {
                let k = t.constant(w.clone());
                t.conv3x3(v, k)
            })?;
            let ew = projected(&w, rng, EPS, |t, v| {
                let k = t.constant(x.clone());
                t.conv3x3(k, v)
            })?;
            Ok(ex.max(ew))
        }),
        ("channel_rms_norm", Kind::Primitive, |rng, _| {
            let x = uniform(&[3, 4, 4], -1.0, 1.0, rng);
            projected(&x, rng, EPS, |t, v| t.channel_rms_norm(v, 1e-4))
        }),
        ("blob", Kind::Primitive, |rng, _| {
            let p = Tensor::vector(vec![
                rng.random_range(4.0..10.0),
                rng.random_range(4.0..8.0),
                rng.random_range(2.0..4.0),
            ]);
            projected(&p, rng, EPS, |t, v| t.blob(v, 14, 12, 0.85, 12.0))
        }),
        ("style_layer", Kind::Primitive, |rng, _| {
            let x = uniform(&[3, 4, 5], -1.0, 1.0, rng);
            let s = uniform(&[3], 0.5, 1.5, rng);
            let b = uniform(&[2], -0.5, 0.5, rng);
            let mix = Arc::new(uniform(&[2, 3], -1.0, 1.0, rng));
            let field = uniform(&[2, 4, 5], -0.5, 0.5, rng);
            let ex = projected(&x, rng, EPS, |t, v| {
                let (sv, bv) = (t.constant(s.clone()), t.constant(b.clone()));
                t.style_layer(v, sv, bv, &mix, &field, 0.2, 1e-4)
            })?;
            let es = projected(&s, rng, EPS, |t, v| {
                let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
                t.style_layer(xv, v, bv, &mix, &field, 0.2, 1e-4)
            })?;
            let eb = projected(&b, rng, EPS, |t, v| {
                let (xv, sv) = (t.constant(x.clone()), t.constant(s.clone()));
                t.style_layer(xv, sv, v, &mix, &field, 0.2, 1e-4)
            })?;
            Ok(ex.max(es).max(eb))
        }),
    ]
}

fn loss_cases() -> Vec<Case> {
    vec![
        ("l1_masked", Kind::Loss, |rng, _| {
            let (a, b) = (image(3, 20, rng), image(3, 20, rng));
            let mask = Region::Border { width: BORDER_WIDTH }.mask(3, 20, 20)?;
            scalar(&a, rng, EPS, |t, v| {
                let k = t.constant(b.clone());
                l1_loss(t, v, k, Some(&mask))
            })
        }),
        ("perceptual", Kind::Loss, |rng, ctx| {
            let (a, b) = (image(3, 32, rng), image(3, 32, rng));
            scalar(&a, rng, EPS, |t, v| {
                let k = t.constant(b.clone());
                perceptual_distance_var(t, v, k, &ctx.fx)
            })
        }),
        ("coarse_appearance", Kind::Loss, |rng, ctx| {
            let (a, b) = (image(3, 32, rng), image(3, 32, rng));
            let ea = scalar(&a, rng, EPS, |t, v| {
                let k = t.constant(b.clone());
                coarse_appearance_loss(t, v, k, 500.0, 0.05, &ctx.fx)
            })?;
            let eb = scalar(&b, rng, EPS, |t, v| {
                let k = t.constant(a.clone());
                coarse_appearance_loss(t, k, v, 500.0, 0.05, &ctx.fx)
            })?;
            Ok(ea.max(eb))
        }),
        ("border", Kind::Loss, |rng, ctx| {
            let (a, b) = (image(3, 32, rng), image(3, 32, rng));
            let ea = scalar(&a, rng, EPS, |t, v| {
                let k = t.constant(b.clone());
                border_loss(t, v, k, 0.1, 10000.0, &ctx.fx)
            })?;
            let eb = scalar(&b, rng, EPS, |t, v| {
                let k = t.constant(a.clone());
                border_loss(t, k, v, 0.1, 10000.0, &ctx.fx)
            })?;
            Ok(ea.max(eb))
        }),
        ("latent_regularizer", Kind::Loss, |rng, _| {
            let x = uniform(&[19, 8], -1.0, 1.0, rng);
            let w_avg: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..0.5)).collect();
            scalar(&x, rng, EPS, |t, v| latent_regularizer(t, v, &w_avg, 25000.0, 1.0))
        }),
        ("body_preservation", Kind::Loss, |rng, ctx| {
            let (a, b) = (image(3, 40, rng), image(3, 40, rng));
            let region = Region::Exterior {
                boxes: vec![BBox::new(rng.random_range(2..10), rng.random_range(2..10), 20, 18)],
            };
            scalar(&a, rng, EPS, |t, v| {
                let k = t.constant(b.clone());
                region_preservation_loss(t, v, k, &region, 9000.0, 0.1, &ctx.fx)
            })
        }),
        ("face_preservation", Kind::Loss, |rng, ctx| {
            let (a, b) = (image(3, 32, rng), image(3, 32, rng));
            let region = Region::Interior { width: BORDER_WIDTH };
            scalar(&a, rng, EPS, |t, v| {
                let k = t.constant(b.clone());
                region_preservation_loss(t, v, k, &region, 5000.0, 1.75, &ctx.fx)
            })
        }),
    ]
}

fn random_latent(gan: &Gan, rng: &mut ChaCha8Rng, spread: f64) -> Result<LayeredLatent> {
    let base = gan
        .generator
        .init_latent(InitMode::TruncatedRandom { alpha: 0.5 }, &gan.w_avg, rng.random())?;
    let mut t = base.into_tensor();
    let noise = Tensor::randn(t.shape(), spread * gan.generator.spec().latent_scale, rng);
    t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, n)| *a += n);
    LayeredLatent::from_tensor(t)
}

fn generator_check(gan: &Gan, rng: &mut ChaCha8Rng) -> Result<f64> {
    let l = random_latent(gan, rng, 0.05)?;
    let eps = EPS_LATENT * gan.generator.spec().latent_scale;
    projected(l.as_tensor(), rng, eps, |t, v| gan.generator.synthesize(t, v))
}

fn generator_cases() -> Vec<Case> {
    vec![
        ("generator_canvas", Kind::Generator, |rng, ctx| generator_check(&ctx.canvas, rng)),
        ("generator_inset", Kind::Generator, |rng, ctx| generator_check(&ctx.insets[0], rng)),
    ]
}

fn objective_check(ctx: &Ctx, mode: Mode, n_insets: usize, phase: Phase, rng: &mut ChaCha8Rng) -> Result<f64> {
    let canvas = if n_insets == 2 { &ctx.canvas2 } else { &ctx.canvas };
    let models = Models {
        canvas,
        insets: &ctx.insets[..n_insets],
        fx: &ctx.fx,
    };
    let draw = |rng: &mut ChaCha8Rng| -> Result<Latents> {
        Ok(Latents {
            canvas: random_latent(canvas, rng, 0.05)?,
            insets: (0..n_insets)
                .map(|k| random_latent(&ctx.insets[k], rng, 0.05))
                .collect::<Result<_>>()?,
        })
    };
    let refs = draw(rng)?;
    let latents = draw(rng)?;
    let canvas_img = canvas.generator.generate(&latents.canvas)?;
    let bboxes: Vec<BBox> = (0..n_insets)
        .map(|k| detect_bbox(&canvas_img, 3 + k, DEFAULT_THRESHOLD))
        .collect::<Result<_>>()?;
    let snapshots: Vec<Option<Tensor>> = (0..n_insets)
        .map(|k| Ok(Some(ctx.insets[k].generator.generate(&refs.insets[k])?.channels(0, 3)?)))
        .collect::<Result<_>>()?;
    let spec = ObjectiveSpec::new(mode, n_insets, LambdaTable::default())?;

    let (_, grad) = phase_objective(models, &spec, &refs, &latents, &bboxes, &snapshots, phase)?;
    let coords = sample_coords(grad.len(), rng);
    let eps = EPS_LATENT
        * match phase {
            Phase::Canvas => canvas,
            Phase::Inset(k) => &ctx.insets[k],
        }
        .generator
        .spec()
        .latent_scale;
    let mut max_diff: f64 = 0.0;
    let mut scale = grad.max_abs();
    let value_at = |i: usize, delta: f64| -> Result<f64> {
        let mut probe = latents.clone();
        let lat = match phase {
            Phase::Canvas => &mut probe.canvas,
            Phase::Inset(k) => &mut probe.insets[k],
        };
        let mut t = lat.as_tensor().clone();
        t.data_mut()[i] += delta;
        *lat = LayeredLatent::from_tensor(t)?;
        Ok(phase_objective(models, &spec, &refs, &probe, &bboxes, &snapshots, phase)?.0)
    };
    for &i in &coords {
        let fd = (value_at(i, eps)? - value_at(i, -eps)?) / (2.0 * eps);
        scale = scale.max(fd.abs());
        max_diff = max_diff.max((fd - grad.data()[i]).abs());
    }
    Ok(if scale == 0.0 { 0.0 } else { max_diff / scale })
}

fn objective_cases() -> Vec<Case> {
    vec![
        ("refine_inset.inset", Kind::Objective, |rng, ctx| {
            objective_check(ctx, Mode::RefineInset, 1, Phase::Inset(0), rng)
        }),
        ("joint_refine.canvas", Kind::Objective, |rng, ctx| {
            objective_check(ctx, Mode::JointRefine, 1, Phase::Canvas, rng)
        }),
        ("joint_refine.inset", Kind::Objective, |rng, ctx| {
            objective_check(ctx, Mode::JointRefine, 1, Phase::Inset(0), rng)
        }),
        ("body_for_face.canvas", Kind::Objective, |rng, ctx| {
            objective_check(ctx, Mode::BodyForFace, 1, Phase::Canvas, rng)
        }),
        ("body_for_face.inset", Kind::Objective, |rng, ctx| {
            objective_check(ctx, Mode::BodyForFace, 1, Phase::Inset(0), rng)
        }),
        ("montage.canvas", Kind::Objective, |rng, ctx| {
            objective_check(ctx, Mode::Montage, 1, Phase::Canvas, rng)
        }),
        ("montage.inset", Kind::Objective, |rng, ctx| {
            objective_check(ctx, Mode::Montage, 1, Phase::Inset(0), rng)
        }),
        ("multi_inset.canvas", Kind::Objective, |rng, ctx| {
            objective_check(ctx, Mode::MultiInset, 2, Phase::Canvas, rng)
        }),
        ("multi_inset.inset1", Kind::Objective, |rng, ctx| {
            objective_check(ctx, Mode::MultiInset, 2, Phase::Inset(1), rng)
        }),
    ]
}

/// Names of every suite entry, in report order.
pub fn suite_names() -> Vec<&'static str> {
    all_cases().iter().map(|c| c.0).collect()
}

fn all_cases() -> Vec<Case> {
    let mut cases = primitive_cases();
    cases.extend(loss_cases());
    cases.extend(generator_cases());
    cases.extend(objective_cases());
    cases
}

/// Run every check at `points` random points. Entries whose name does not
/// contain `filter` are skipped.
pub fn gradient_suite(points: usize, seed: u64, filter: Option<&str>) -> Result<Vec<SuiteRow>> {
    let ctx = Ctx::new(seed)?;
    let mut rows = Vec::new();
    for (i, (name, kind, check)) in all_cases().into_iter().enumerate() {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let mut worst: f64 = 0.0;
        for p in 0..points {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((i as u64) << 32) | p as u64);
            worst = worst.max(check(&mut rng, &ctx)?);
        }
        rows.push(SuiteRow {
            name: name.to_string(),
            kind,
            points,
            max_rel_err: worst,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_entry_passes_at_two_points() {
        let rows = gradient_suite(2, 7, None).unwrap();
        assert_eq!(rows.len(), suite_names().len());
        for r in &rows {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
        }
        let kinds: Vec<Kind> = rows.iter().map(|r| r.kind).collect();
        for k in [Kind::Primitive, Kind::Loss, Kind::Generator, Kind::Objective] {
            assert!(kinds.contains(&k));
        }
    }

    #[test]
    fn filter_selects_entries() {
        let rows = gradient_suite(1, 1, Some("matmul")).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].name, "matmul");
    }
}
