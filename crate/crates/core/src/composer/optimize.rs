use std::fmt;

use rayon::prelude::*;

use super::objective::{LossId, Mode, ObjectiveSpec, Phase};
use super::schedule::{should_stop, ScheduleConfig};
use super::trace::{Trace, TraceRow};
use crate::detector::{detect_bbox, BBox, DEFAULT_THRESHOLD};
use crate::diffcore::{resize_bilinear, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::genmodel::{Generator, GeneratorSpec, LayeredLatent};
use crate::lossbank::{
    border_loss, coarse_appearance_loss, latent_regularizer, region_preservation_loss,
    FeatureExtractor, LambdaTable, Region, BORDER_WIDTH,
};

/// A generator together with its average latent.
#[derive(Clone, Debug)]
pub struct Gan {
    pub generator: Generator,
    pub w_avg: Vec<f64>,
}

impl Gan {
    pub fn new(spec: &GeneratorSpec, avg_samples: usize, avg_seed: u64) -> Result<Self> {
        let generator = Generator::new(spec)?;
        let w_avg = generator.average_latent(avg_samples, avg_seed)?.w_avg;
        Ok(Gan { generator, w_avg })
    }
}

/// Frozen models shared by every job.
#[derive(Clone, Copy, Debug)]
pub struct Models<'a> {
    pub canvas: &'a Gan,
    pub insets: &'a [Gan],
    pub fx: &'a FeatureExtractor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub canvas: LayeredLatent,
    pub insets: Vec<LayeredLatent>,
}

/// Lowest-total state seen so far.
#[derive(Clone, Debug)]
pub struct Best {
    pub total: f64,
    pub iteration: usize,
    pub latents: Latents,
    pub composite: Tensor,
    pub bboxes: Vec<BBox>,
    pub border_l1: Vec<f64>,
}

/// Mutable state of one alternating optimization.
#[derive(Clone, Debug)]
pub struct OptState {
    pub latents: Latents,
    pub adam_canvas: AdamState,
    pub adam_insets: Vec<AdamState>,
    pub iteration: usize,
    pub phase: Phase,
    pub bboxes: Vec<BBox>,
    pub best: Option<Best>,
    /// Inset images captured for the refinement's interior constraint.
    pub snapshots: Vec<Option<Tensor>>,
    pub border_l1: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct JointResult {
    pub latents: Latents,
    pub composite: Tensor,
    pub bboxes: Vec<BBox>,
    pub trace: Trace,
    /// Iterations evaluated.
    pub iterations: usize,
    pub best_iteration: usize,
    pub best_total: f64,
    pub initial_border_l1: Vec<f64>,
    /// Border L1 of the returned state.
    pub border_l1: Vec<f64>,
    /// The border threshold was reached before the iteration cap.
    pub converged: bool,
    /// Composite of the starting latents (plain copy and paste).
    pub initial_composite: Tensor,
    pub initial_bboxes: Vec<BBox>,
}

/// A failed run, with the trace recorded up to the failure.
#[derive(Clone, Debug)]
pub struct RunError {
    pub error: Error,
    pub trace: Box<Trace>,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for RunError {
    fn from(error: Error) -> Self {
        RunError {
            error,
            trace: Box::default(),
        }
    }
}

/// Paste `inset`, resized to the box, over the color channels of `canvas`.
pub fn compose(canvas: &Tensor, inset: &Tensor, bbox: BBox) -> Result<Tensor> {
    let (c, h, w) = canvas.chw()?;
    if c < 3 || inset.chw()?.0 < 3 {
        return Err(Error::shape("compose", "images need three color channels"));
    }
    if !bbox.fits(h, w) {
        return Err(Error::OutOfBounds {
            bbox,
            height: h,
            width: w,
        });
    }
    let mut out = canvas.channels(0, 3)?;
    let patch = resize_bilinear(&inset.channels(0, 3)?, bbox.height, bbox.width)?;
    paste(&mut out, &patch, bbox);
    Ok(out)
}

fn paste(out: &mut Tensor, patch: &Tensor, bbox: BBox) {
    let (_, h, w) = out.chw().expect("image");
    let data = out.data_mut();
    for ch in 0..3 {
        for r in 0..bbox.height {
            let dst = (ch * h + bbox.row + r) * w + bbox.col;
            let src = (ch * bbox.height + r) * bbox.width;
            data[dst..dst + bbox.width]
                .copy_from_slice(&patch.data()[src..src + bbox.width]);
        }
    }
}

/// Run independent jobs on the rayon pool, keeping input order.
pub fn run_batch<T, R, F>(jobs: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    jobs.par_iter().map(f).collect()
}

/// Raw loss components; each term's value is a weighted sum of one pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Key {
    Appearance(usize),
    Border(usize),
    RegCanvas,
    RegInset(usize),
    Body,
    Face(usize),
    Snapshot(usize),
}

impl Key {
    fn of(loss: LossId, bound: Phase, inset: Option<usize>) -> Key {
        let k = inset.unwrap_or(0);
        match loss {
            LossId::Appearance => Key::Appearance(k),
            LossId::Border => Key::Border(k),
            LossId::Regularizer => match bound {
                Phase::Canvas => Key::RegCanvas,
                Phase::Inset(k) => Key::RegInset(k),
            },
            LossId::BodyPreservation => Key::Body,
            LossId::FacePreservation => Key::Face(k),
            LossId::Snapshot => Key::Snapshot(k),
        }
    }

    fn depends_on(self, phase: Phase) -> bool {
        match (self, phase) {
            (Key::Appearance(_) | Key::Border(_) | Key::RegCanvas | Key::Body, Phase::Canvas) => true,
            (Key::Appearance(k) | Key::Border(k), Phase::Inset(j)) => k == j,
            (Key::RegInset(k) | Key::Face(k) | Key::Snapshot(k), Phase::Inset(j)) => k == j,
            _ => false,
        }
    }
}

struct Runner<'a> {
    models: Models<'a>,
    spec: &'a ObjectiveSpec,
    /// Keys in use, with whether each component is needed.
    keys: Vec<(Key, bool, bool)>,
    term_keys: Vec<Key>,
    body_ref: Option<Tensor>,
    face_refs: Vec<Option<Tensor>>,
}

struct Evaluated {
    raw: Vec<(Key, (f64, f64))>,
    grad: Option<Tensor>,
}

impl<'a> Runner<'a> {
    fn new(models: Models<'a>, spec: &'a ObjectiveSpec, images: &Images) -> Result<Runner<'a>> {
        let n = spec.n_insets;
        let mut keys: Vec<(Key, bool, bool)> = Vec::new();
        let term_keys: Vec<Key> = spec
            .terms
            .iter()
            .map(|t| Key::of(t.loss, t.bound, t.inset))
            .collect();
        for (t, key) in spec.terms.iter().zip(&term_keys) {
            let (a, b) = (t.lambda_a != 0.0, t.lambda_b != 0.0);
            match keys.iter_mut().find(|(k, _, _)| k == key) {
                Some(slot) => {
                    slot.1 |= a;
                    slot.2 |= b;
                }
                None => keys.push((*key, a, b)),
            }
        }
        // The stopping rule always needs the unweighted border L1.
        for k in 0..n {
            match keys.iter_mut().find(|(kk, _, _)| *kk == Key::Border(k)) {
                Some(slot) => slot.1 = true,
                None => keys.push((Key::Border(k), true, false)),
            }
        }
        let body_ref = spec
            .uses(LossId::BodyPreservation)
            .then(|| spec.body_ref.clone().map_or_else(|| images.canvas.channels(0, 3), Ok))
            .transpose()?;
        let face_refs = (0..n)
            .map(|k| {
                spec.uses(LossId::FacePreservation).then(|| {
                    spec.face_refs
                        .get(k)
                        .cloned()
                        .flatten()
                        .unwrap_or_else(|| images.insets[k].clone())
                })
            })
            .collect();
        Ok(Runner {
            models,
            spec,
            keys,
            term_keys,
            body_ref,
            face_refs,
        })
    }

    fn gan(&self, phase: Phase) -> &'a Gan {
        match phase {
            Phase::Canvas => self.models.canvas,
            Phase::Inset(k) => &self.models.insets[k],
        }
    }

    /// Evaluate every key that depends on `scope` (all keys when `None`).
    /// With `with_grad`, the objective bound to `scope` is differentiated
    /// with respect to that latent.
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        scope: Option<Phase>,
        with_grad: bool,
        latents: &Latents,
        images: &Images,
        bboxes: &[BBox],
        snapshots: &[Option<Tensor>],
    ) -> Result<Evaluated> {
        let mut tape = Tape::new();
        let wanted: Vec<(Key, bool, bool)> = self
            .keys
            .iter()
            .copied()
            .filter(|(k, _, _)| scope.is_none_or(|p| k.depends_on(p)))
            .filter(|(k, _, _)| !matches!(k, Key::Snapshot(i) if snapshots[*i].is_none()))
            .collect();

        let leaf = match (scope, with_grad) {
            (Some(p), true) => {
                let lat = match p {
                    Phase::Canvas => &latents.canvas,
                    Phase::Inset(k) => &latents.insets[k],
                };
                Some((p, tape.leaf(lat.as_tensor().clone())))
            }
            _ => None,
        };
        let latent_var = |tape: &mut Tape, p: Phase| -> Var {
            match leaf {
                Some((lp, v)) if lp == p => v,
                _ => {
                    let lat = match p {
                        Phase::Canvas => &latents.canvas,
                        Phase::Inset(k) => &latents.insets[k],
                    };
                    tape.constant(lat.as_tensor().clone())
                }
            }
        };

        let needs_canvas = wanted
            .iter()
            .any(|(k, _, _)| matches!(k, Key::Appearance(_) | Key::Border(_) | Key::Body));
        let canvas_color = if needs_canvas {
            let full = match leaf {
                Some((Phase::Canvas, v)) => self.models.canvas.generator.synthesize(&mut tape, v)?,
                _ => tape.constant(images.canvas.clone()),
            };
            Some(tape.slice_channels(full, 0, 3)?)
        } else {
            None
        };
        let mut insets: Vec<Option<Var>> = vec![None; self.spec.n_insets];
        let mut inset_var = |tape: &mut Tape, k: usize| -> Result<Var> {
            if let Some(v) = insets[k] {
                return Ok(v);
            }
            let v = match leaf {
                Some((Phase::Inset(j), lv)) if j == k => {
                    let img = self.models.insets[k].generator.synthesize(tape, lv)?;
                    tape.slice_channels(img, 0, 3)?
                }
                _ => tape.constant(images.insets[k].clone()),
            };
            insets[k] = Some(v);
            Ok(v)
        };
        let mut crops: Vec<Option<Var>> = vec![None; self.spec.n_insets];
        let fx = self.models.fx;

        let mut raw_vars: Vec<(Key, Option<Var>, Option<Var>)> = Vec::new();
        for &(key, need_a, need_b) in &wanted {
            let pair = |tape: &mut Tape, f: &dyn Fn(&mut Tape, f64, f64) -> Result<Var>| -> Result<(Option<Var>, Option<Var>)> {
                let a = if need_a { Some(f(tape, 1.0, 0.0)?) } else { None };
                let b = if need_b { Some(f(tape, 0.0, 1.0)?) } else { None };
                Ok((a, b))
            };
            let (a, b) = match key {
                Key::Appearance(k) | Key::Border(k) => {
                    let inset = inset_var(&mut tape, k)?;
                    let crop = match crops[k] {
                        Some(c) => c,
                        None => {
                            let (_, ih, iw) = tape.value(inset).chw()?;
                            let cc = canvas_color.expect("canvas is built for crop terms");
                            let c = tape.crop(cc, bboxes[k])?;
                            let c = tape.resize_bilinear(c, ih, iw)?;
                            crops[k] = Some(c);
                            c
                        }
                    };
                    if matches!(key, Key::Appearance(_)) {
                        pair(&mut tape, &|t, la, lb| coarse_appearance_loss(t, crop, inset, la, lb, fx))?
                    } else {
                        pair(&mut tape, &|t, la, lb| border_loss(t, crop, inset, lb, la, fx))?
                    }
                }
                Key::RegCanvas | Key::RegInset(_) => {
                    let p = match key {
                        Key::RegCanvas => Phase::Canvas,
                        Key::RegInset(k) => Phase::Inset(k),
                        _ => unreachable!(),
                    };
                    let lv = latent_var(&mut tape, p);
                    let w_avg = &self.gan(p).w_avg;
                    pair(&mut tape, &|t, la, lb| latent_regularizer(t, lv, w_avg, la, lb))?
                }
                Key::Body => {
                    let cc = canvas_color.expect("canvas is built for the body term");
                    let reference = tape.constant(self.body_ref.clone().expect("body reference"));
                    let region = Region::Exterior {
                        boxes: bboxes.to_vec(),
                    };
                    pair(&mut tape, &|t, la, lb| {
                        region_preservation_loss(t, cc, reference, &region, la, lb, fx)
                    })?
                }
                Key::Face(k) | Key::Snapshot(k) => {
                    let inset = inset_var(&mut tape, k)?;
                    let target = match key {
                        Key::Face(_) => self.face_refs[k].clone().expect("face reference"),
                        _ => snapshots[k].clone().expect("snapshot taken"),
                    };
                    let reference = tape.constant(target);
                    let region = Region::Interior {
                        width: BORDER_WIDTH,
                    };
                    pair(&mut tape, &|t, la, lb| {
                        region_preservation_loss(t, inset, reference, &region, la, lb, fx)
                    })?
                }
            };
            raw_vars.push((key, a, b));
        }

        let grad = match leaf {
            Some((phase, lv)) => {
                let mut objective: Option<Var> = None;
                for (term, key) in self.spec.terms.iter().zip(&self.term_keys) {
                    if term.bound != phase {
                        continue;
                    }
                    let Some((_, a, b)) = raw_vars.iter().find(|(k, _, _)| k == key) else {
                        continue;
                    };
                    for (lambda, v) in [(term.lambda_a, a), (term.lambda_b, b)] {
                        if let (true, Some(v)) = (lambda != 0.0, v) {
                            let s = tape.scale(*v, lambda);
                            objective = Some(match objective {
                                None => s,
                                Some(acc) => tape.add(acc, s)?,
                            });
                        }
                    }
                }
                Some(match objective {
                    Some(obj) => tape.grad(obj, &[lv])?.remove(0),
                    None => Tensor::zeros(tape.shape(lv)),
                })
            }
            None => None,
        };
        let val = |v: &Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let raw = raw_vars
            .iter()
            .map(|(k, a, b)| (*k, (val(a), val(b))))
            .collect();
        Ok(Evaluated { raw, grad })
    }
}

/// Current generator outputs.
#[derive(Clone, Debug)]
struct Images {
    canvas: Tensor,
    /// Color channels only.
    insets: Vec<Tensor>,
}

fn generate_inset(gan: &Gan, latent: &LayeredLatent) -> Result<Tensor> {
    let img = gan.generator.generate(latent)?;
    img.channels(0, 3)
}

fn detect_all(canvas: &Tensor, n: usize) -> Result<Vec<BBox>> {
    (0..n)
        .map(|k| detect_bbox(canvas, 3 + k, DEFAULT_THRESHOLD))
        .collect()
}

fn composite_of(images: &Images, bboxes: &[BBox]) -> Result<Tensor> {
    let mut out = images.canvas.channels(0, 3)?;
    for (inset, b) in images.insets.iter().zip(bboxes) {
        let patch = resize_bilinear(inset, b.height, b.width)?;
        paste(&mut out, &patch, *b);
    }
    Ok(out)
}

struct RawCache {
    values: Vec<(Key, (f64, f64))>,
}

impl RawCache {
    fn set(&mut self, updates: Vec<(Key, (f64, f64))>) {
        for (k, v) in updates {
            match self.values.iter_mut().find(|(kk, _)| *kk == k) {
                Some(slot) => slot.1 = v,
                None => self.values.push((k, v)),
            }
        }
    }

    fn get(&self, k: Key) -> (f64, f64) {
        self.values
            .iter()
            .find(|(kk, _)| *kk == k)
            .map_or((0.0, 0.0), |(_, v)| *v)
    }
}

/// Alternating optimization of the canvas and inset latents.
pub fn joint_optimize(
    models: Models<'_>,
    spec: &ObjectiveSpec,
    init: Latents,
    cfg: &ScheduleConfig,
) -> std::result::Result<JointResult, RunError> {
    cfg.validate()?;
    let n = spec.n_insets;
    if init.insets.len() != n || models.insets.len() < n {
        return Err(Error::invalid(
            "insets",
            format!(
                "objective has {n} insets, got {} latents and {} generators",
                init.insets.len(),
                models.insets.len()
            ),
        )
        .into());
    }
    let canvas_spec = models.canvas.generator.spec();
    if canvas_spec.markers.len() < n {
        return Err(Error::invalid(
            "canvas",
            format!("{n} insets need {n} marker channels, canvas has {}", canvas_spec.markers.len()),
        )
        .into());
    }

    let mut images = Images {
        canvas: models.canvas.generator.generate(&init.canvas)?,
        insets: (0..n)
            .map(|k| generate_inset(&models.insets[k], &init.insets[k]))
            .collect::<Result<_>>()?,
    };
    let mut bboxes = detect_all(&images.canvas, n)?;

    let runner = Runner::new(models, spec, &images)?;

    let mut state = OptState {
        adam_canvas: AdamState::new(init.canvas.as_tensor().shape()),
        adam_insets: init
            .insets
            .iter()
            .map(|l| AdamState::new(l.as_tensor().shape()))
            .collect(),
        latents: init,
        iteration: 0,
        phase: cfg.phase_at(0, spec.optimizes_canvas(), n),
        bboxes: bboxes.clone(),
        best: None,
        snapshots: vec![None; n],
        border_l1: vec![0.0; n],
    };

    let mut trace = Trace {
        meta: trace_meta(spec, cfg),
        labels: spec.terms.iter().map(|t| t.label()).collect(),
        rows: Vec::new(),
    };
    let fail = |error: Error, trace: &Trace| RunError {
        error,
        trace: Box::new(trace.clone()),
    };

    let mut cache = RawCache { values: Vec::new() };
    let full = runner
        .evaluate(None, false, &state.latents, &images, &bboxes, &state.snapshots)
        .map_err(|e| fail(e, &trace))?;
    cache.set(full.raw);
    let initial_border_l1: Vec<f64> = (0..n).map(|k| cache.get(Key::Border(k)).0).collect();
    let initial_composite = composite_of(&images, &bboxes).map_err(|e| fail(e, &trace))?;
    let initial_bboxes = bboxes.clone();

    let mut dirty: Option<Phase> = None;
    let mut converged = false;
    let mut evaluated = 0;
    for it in 0..cfg.max_iters {
        let phase = cfg.phase_at(it, spec.optimizes_canvas(), n);
        state.iteration = it;
        state.phase = phase;
        let step = |e: Error| Error::Aborted {
            iteration: it,
            source: Box::new(e),
        };

        if let Some(d) = dirty.take() {
            match d {
                Phase::Canvas => {
                    images.canvas = models
                        .canvas
                        .generator
                        .generate(&state.latents.canvas)
                        .map_err(|e| fail(step(e), &trace))?;
                }
                Phase::Inset(k) => {
                    images.insets[k] = generate_inset(&models.insets[k], &state.latents.insets[k])
                        .map_err(|e| fail(step(e), &trace))?;
                }
            }
            if d != phase {
                let ev = runner
                    .evaluate(Some(d), false, &state.latents, &images, &bboxes, &state.snapshots)
                    .map_err(|e| fail(step(e), &trace))?;
                cache.set(ev.raw);
            }
        }

        let reeval = cfg.reevaluates_at(it);
        if reeval {
            let fresh = detect_all(&images.canvas, n).map_err(|e| fail(step(e), &trace))?;
            if fresh != bboxes {
                bboxes = fresh;
                let ev = runner
                    .evaluate(None, false, &state.latents, &images, &bboxes, &state.snapshots)
                    .map_err(|e| fail(step(e), &trace))?;
                cache.set(ev.raw);
            }
            state.bboxes = bboxes.clone();
        }

        if spec.uses(LossId::Snapshot) && it == cfg.snapshot_at {
            for k in 0..n {
                state.snapshots[k] = Some(images.insets[k].clone());
                cache.set(vec![(Key::Snapshot(k), (0.0, 0.0))]);
            }
        }

        let ev = runner
            .evaluate(Some(phase), true, &state.latents, &images, &bboxes, &state.snapshots)
            .map_err(|e| fail(step(e), &trace))?;
        cache.set(ev.raw);
        let grad = ev.grad.expect("gradient requested");

        let terms: Vec<f64> = spec
            .terms
            .iter()
            .zip(&runner.term_keys)
            .map(|(t, k)| {
                let (a, b) = cache.get(*k);
                weighted(t.lambda_a, a) + weighted(t.lambda_b, b)
            })
            .collect();
        let total: f64 = spec
            .terms
            .iter()
            .zip(&terms)
            .filter(|(t, _)| t.loss != LossId::Snapshot)
            .map(|(_, v)| v)
            .sum();
        state.border_l1 = (0..n).map(|k| cache.get(Key::Border(k)).0).collect();
        if !total.is_finite() || !grad.all_finite() {
            return Err(fail(Error::NonFinite { iteration: it }, &trace));
        }

        if state.best.as_ref().is_none_or(|b| total < b.total) {
            let composite = composite_of(&images, &bboxes).map_err(|e| fail(step(e), &trace))?;
            state.best = Some(Best {
                total,
                iteration: it,
                latents: state.latents.clone(),
                composite,
                bboxes: bboxes.clone(),
                border_l1: state.border_l1.clone(),
            });
        }
        let best_total = state.best.as_ref().map_or(total, |b| b.total);
        let lr = cfg.lr(phase);
        trace.rows.push(TraceRow {
            iteration: it,
            phase,
            lr,
            terms,
            total,
            best_total,
            border_l1: state.border_l1.clone(),
            bboxes: bboxes.clone(),
            reeval,
        });
        evaluated = it + 1;

        if should_stop(&state.border_l1, it, cfg) {
            converged = true;
            break;
        }

        let (latent, adam) = match phase {
            Phase::Canvas => (&mut state.latents.canvas, &mut state.adam_canvas),
            Phase::Inset(k) => (&mut state.latents.insets[k], &mut state.adam_insets[k]),
        };
        let next = adam
            .update(latent.as_tensor(), &grad, lr)
            .map_err(|e| fail(step(e), &trace))?;
        if !next.all_finite() {
            return Err(fail(Error::NonFinite { iteration: it }, &trace));
        }
        *latent = LayeredLatent::from_tensor(next).map_err(|e| fail(step(e), &trace))?;
        dirty = Some(phase);
    }

    let best = state.best.expect("at least one iteration is evaluated");
    Ok(JointResult {
        latents: best.latents,
        composite: best.composite,
        bboxes: best.bboxes,
        trace,
        iterations: evaluated,
        best_iteration: best.iteration,
        best_total: best.total,
        initial_border_l1,
        border_l1: best.border_l1,
        converged,
        initial_composite,
        initial_bboxes,
    })
}

fn weighted(lambda: f64, v: f64) -> f64 {
    if lambda == 0.0 {
        0.0
    } else {
        lambda * v
    }
}

fn trace_meta(spec: &ObjectiveSpec, cfg: &ScheduleConfig) -> Vec<(String, String)> {
    let mut meta = vec![
        ("mode".to_string(), spec.mode.name().to_string()),
        ("lr_canvas".to_string(), cfg.lr_canvas.to_string()),
        ("lr_inset".to_string(), cfg.lr_inset.to_string()),
        ("switch_every".to_string(), cfg.switch_every.to_string()),
        ("bbox_reeval_every".to_string(), cfg.bbox_reeval_every.to_string()),
        ("bbox_reeval_until".to_string(), cfg.bbox_reeval_until.to_string()),
        ("stop_border_l1".to_string(), cfg.stop_border_l1.to_string()),
        ("max_iters".to_string(), cfg.max_iters.to_string()),
    ];
    meta.extend(
        spec.lambdas
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string())),
    );
    meta
}

/// Value and gradient of the objective bound to `phase`, with respect to
/// that phase's latent. Unset references default to the images rendered
/// from `refs`; `snapshots` feed the refinement's interior constraint.
pub fn phase_objective(
    models: Models<'_>,
    spec: &ObjectiveSpec,
    refs: &Latents,
    latents: &Latents,
    bboxes: &[BBox],
    snapshots: &[Option<Tensor>],
    phase: Phase,
) -> Result<(f64, Tensor)> {
    let n = spec.n_insets;
    if latents.insets.len() != n || refs.insets.len() != n || bboxes.len() != n || snapshots.len() != n {
        return Err(Error::invalid("insets", format!("objective has {n} insets")));
    }
    let render = |l: &Latents| -> Result<Images> {
        Ok(Images {
            canvas: models.canvas.generator.generate(&l.canvas)?,
            insets: (0..n)
                .map(|k| generate_inset(&models.insets[k], &l.insets[k]))
                .collect::<Result<_>>()?,
        })
    };
    let runner = Runner::new(models, spec, &render(refs)?)?;
    let images = render(latents)?;
    let ev = runner.evaluate(Some(phase), true, latents, &images, bboxes, snapshots)?;
    let mut value = 0.0;
    for (term, key) in spec.terms.iter().zip(&runner.term_keys) {
        if term.bound != phase {
            continue;
        }
        if let Some((_, (a, b))) = ev.raw.iter().find(|(k, _)| k == key) {
            value += weighted(term.lambda_a, *a) + weighted(term.lambda_b, *b);
        }
    }
    Ok((value, ev.grad.expect("gradient requested")))
}

/// Optimize the inset latent against a fixed canvas.
pub fn refine_inset(
    models: Models<'_>,
    canvas: &LayeredLatent,
    inset: &LayeredLatent,
    lambdas: LambdaTable,
    cfg: &ScheduleConfig,
) -> std::result::Result<JointResult, RunError> {
    let spec = ObjectiveSpec::new(Mode::RefineInset, 1, lambdas)?;
    joint_optimize(
        models,
        &spec,
        Latents {
            canvas: canvas.clone(),
            insets: vec![inset.clone()],
        },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::crop;
    use crate::genmodel::{InitMode, MarkerSpec};
    use crate::lossbank::{BodyWeights, FaceWeights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Toy {
        canvas: Gan,
        insets: Vec<Gan>,
        fx: FeatureExtractor,
    }

    impl Toy {
        fn new(n_insets: usize) -> Toy {
            let markers = (0..n_insets)
                .map(|k| MarkerSpec::new(0.3, 0.3 + 0.4 * k as f64, 0.12))
                .collect();
            let canvas = GeneratorSpec {
                out_resolution: 64,
                markers,
                ..GeneratorSpec::canvas(21)
            };
            let inset = |seed| GeneratorSpec {
                out_resolution: 32,
                ..GeneratorSpec::inset(seed)
            };
            Toy {
                canvas: Gan::new(&canvas, 500, 1).unwrap(),
                insets: (0..n_insets)
                    .map(|k| Gan::new(&inset(30 + k as u64), 500, 2).unwrap())
                    .collect(),
                fx: FeatureExtractor::new(5),
            }
        }

        fn models(&self) -> Models<'_> {
            Models {
                canvas: &self.canvas,
                insets: &self.insets,
                fx: &self.fx,
            }
        }

        fn latents(&self, seed: u64) -> Latents {
            let init = |g: &Gan, s| {
                g.generator
                    .init_latent(InitMode::TruncatedRandom { alpha: 0.7 }, &g.w_avg, s)
                    .unwrap()
            };
            Latents {
                canvas: init(&self.canvas, seed),
                insets: self
                    .insets
                    .iter()
                    .enumerate()
                    .map(|(k, g)| init(g, 100 + seed + k as u64))
                    .collect(),
            }
        }
    }

    fn short(mode: Mode, iters: usize) -> ScheduleConfig {
        ScheduleConfig {
            max_iters: iters,
            bbox_reeval_until: iters.min(75),
            ..ScheduleConfig::for_mode(mode)
        }
    }

    #[test]
    fn compose_replaces_only_the_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let canvas = Tensor::uniform(&[4, 40, 50], 0.0, 1.0, &mut rng);
        let inset = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let b = BBox::new(5, 7, 12, 9);
        let out = compose(&canvas, &inset, b).unwrap();
        assert_eq!(out.shape(), &[3, 40, 50]);
        for ch in 0..3 {
            for r in 0..40 {
                for c in 0..50 {
                    if !b.contains(r, c) {
                        assert_eq!(out.at(ch, r, c), canvas.at(ch, r, c));
                    }
                }
            }
        }
        let resized = resize_bilinear(&inset, 12, 9).unwrap();
        assert_eq!(crop(&out, b).unwrap().data(), resized.data());
        let same = compose(&canvas, &crop(&canvas.channels(0, 3).unwrap(), b).unwrap(), b).unwrap();
        assert_eq!(same.data(), canvas.channels(0, 3).unwrap().data());
        assert!(compose(&canvas, &inset, BBox::new(35, 0, 10, 10)).is_err());
    }

    #[test]
    fn compose_area_fraction() {
        let black = Tensor::zeros(&[3, 20, 30]);
        let white = Tensor::full(&[3, 8, 8], 1.0);
        let out = compose(&black, &white, BBox::new(2, 3, 6, 10)).unwrap();
        assert!((out.mean() - 60.0 / 600.0).abs() < 1e-15);
    }

    #[test]
    fn refine_lowers_border_and_keeps_canvas() {
        let toy = Toy::new(1);
        let l = toy.latents(3);
        let cfg = short(Mode::RefineInset, 150);
        let r = refine_inset(toy.models(), &l.canvas, &l.insets[0], LambdaTable::default(), &cfg)
            .unwrap();
        assert_eq!(r.latents.canvas, l.canvas);
        assert!(r.border_l1[0] < r.initial_border_l1[0]);
        let best = r.trace.rows.iter().map(|row| row.best_total).collect::<Vec<_>>();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.trace.rows.iter().all(|row| row.phase == Phase::Inset(0)));
    }

    #[test]
    fn loose_threshold_stops_at_once() {
        let toy = Toy::new(1);
        let l = toy.latents(4);
        let cfg = ScheduleConfig {
            stop_border_l1: 10.0,
            ..short(Mode::RefineInset, 50)
        };
        let r = refine_inset(toy.models(), &l.canvas, &l.insets[0], LambdaTable::default(), &cfg)
            .unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.latents, l);
    }

    #[test]
    fn body_term_alone_is_stationary() {
        let toy = Toy::new(1);
        let l = toy.latents(5);
        let zero_body = BodyWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda_r1: 0.0,
            lambda_r2: 0.0,
            ..BodyWeights::default()
        };
        let zero_face = FaceWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda_r1: 0.0,
            lambda_r2: 0.0,
            lambda7: 0.0,
            lambda8: 0.0,
        };
        let lambdas = LambdaTable {
            body: zero_body,
            face: zero_face,
        };
        let spec = ObjectiveSpec::new(Mode::JointRefine, 1, lambdas).unwrap();
        let cfg = ScheduleConfig {
            stop_border_l1: 1e-12,
            start_with: super::super::StartWith::Canvas,
            ..short(Mode::Montage, 100)
        };
        let r = joint_optimize(toy.models(), &spec, l.clone(), &cfg).unwrap();
        assert_eq!(r.iterations, 100);
        let moved = r
            .latents
            .canvas
            .as_tensor()
            .zip_map(l.canvas.as_tensor(), |a, b| (a - b).abs())
            .unwrap()
            .max_abs();
        assert!(moved < 1e-9, "{moved}");
        let lrb = r.trace.labels.iter().position(|s| s == "LRB_canvas").unwrap();
        assert!(r.trace.rows.iter().all(|row| row.terms[lrb] == 0.0));
    }

    #[test]
    fn only_the_active_latent_moves() {
        let toy = Toy::new(1);
        let spec = ObjectiveSpec::new(Mode::JointRefine, 1, LambdaTable::default()).unwrap();
        let cfg = ScheduleConfig {
            switch_every: 10,
            bbox_reeval_every: 5,
            stop_border_l1: 1e-6,
            ..short(Mode::JointRefine, 40)
        };
        let r = joint_optimize(toy.models(), &spec, toy.latents(6), &cfg).unwrap();
        let col = |label: &str| r.trace.labels.iter().position(|s| s == label).unwrap();
        let (reg_c, reg_i) = (col("LR_canvas"), col("LR_inset0"));
        for w in r.trace.rows.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            match a.phase {
                Phase::Inset(_) => assert_eq!(a.terms[reg_c], b.terms[reg_c], "iteration {}", b.iteration),
                Phase::Canvas => assert_eq!(a.terms[reg_i], b.terms[reg_i], "iteration {}", b.iteration),
            }
        }
        let phases: Vec<Phase> = r.trace.rows.iter().map(|row| row.phase).collect();
        assert_eq!(phases[9], Phase::Inset(0));
        assert_eq!(phases[10], Phase::Canvas);
        assert_eq!(phases[20], Phase::Inset(0));
    }

    #[test]
    fn runs_are_deterministic() {
        let toy = Toy::new(1);
        let spec = ObjectiveSpec::new(Mode::Montage, 1, LambdaTable::default()).unwrap();
        let cfg = short(Mode::Montage, 60);
        let a = joint_optimize(toy.models(), &spec, toy.latents(7), &cfg).unwrap();
        let b = joint_optimize(toy.models(), &spec, toy.latents(7), &cfg).unwrap();
        assert_eq!(a.trace.to_csv_string(), b.trace.to_csv_string());
        assert_eq!(a.composite.data(), b.composite.data());
        assert_eq!(a.latents, b.latents);
    }

    #[test]
    fn two_insets_are_both_refined() {
        let toy = Toy::new(2);
        let spec = ObjectiveSpec::new(Mode::MultiInset, 2, LambdaTable::default()).unwrap();
        let cfg = short(Mode::MultiInset, 150);
        let r = joint_optimize(toy.models(), &spec, toy.latents(8), &cfg).unwrap();
        assert_eq!(r.bboxes.len(), 2);
        for k in 0..2 {
            assert!(r.border_l1[k] < r.initial_border_l1[k], "inset {k}");
        }
        assert!(r.trace.rows.iter().any(|row| row.phase == Phase::Inset(1)));
    }

    #[test]
    fn nan_reference_aborts_with_iteration() {
        let toy = Toy::new(1);
        let spec = ObjectiveSpec::new(Mode::JointRefine, 1, LambdaTable::default())
            .unwrap()
            .with_body_ref(Tensor::full(&[3, 64, 64], f64::NAN));
        let err = joint_optimize(toy.models(), &spec, toy.latents(1), &short(Mode::JointRefine, 10))
            .unwrap_err();
        assert!(matches!(err.error, Error::NonFinite { iteration: 0 }), "{err}");
    }

    #[test]
    fn mismatched_insets_are_rejected() {
        let toy = Toy::new(1);
        let spec = ObjectiveSpec::new(Mode::MultiInset, 2, LambdaTable::default()).unwrap();
        let cfg = short(Mode::MultiInset, 10);
        assert!(joint_optimize(toy.models(), &spec, toy.latents(1), &cfg).is_err());
    }

    #[test]
    fn batch_keeps_order() {
        let out = run_batch(&[3, 1, 2], |x| x * 10);
        assert_eq!(out, [30, 10, 20]);
    }
}
