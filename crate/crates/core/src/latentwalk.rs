//! Keyframe-to-keyframe walks with per-frame inset re-optimization.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::composer::{compose, Gan};
use crate::detector::{lerp_bbox, BBox};
use crate::diffcore::{crop, resize_bilinear, AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::genmodel::LayeredLatent;
use crate::lossbank::{
    border_l1, border_loss, region_preservation_loss, FeatureExtractor, Region, BORDER_WIDTH,
};

pub const DEFAULT_FRAMES: usize = 30;
pub const DEFAULT_BUDGET: usize = 100;

/// An optimized canvas/inset pair and its box.
#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub canvas: LayeredLatent,
    pub inset: LayeredLatent,
    pub bbox: BBox,
}

/// Weights of the per-frame objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkWeights {
    /// Border L1 against the canvas frame.
    pub edge: f64,
    pub edge_percep: f64,
    /// Interior against the frame's starting inset.
    pub identity: f64,
    pub identity_percep: f64,
    /// Border L1 against the previous composite, stepped toward the end keyframe.
    pub temporal: f64,
}

impl Default for WalkWeights {
    fn default() -> Self {
        WalkWeights {
            edge: 10000.0,
            edge_percep: 0.1,
            identity: 5000.0,
            identity_percep: 1.75,
            temporal: 40000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    /// Frames per segment, both keyframes included.
    pub frames: usize,
    pub budget: usize,
    pub lr: f64,
    /// Append the first keyframe so the walk loops.
    pub cyclic: bool,
    pub weights: WalkWeights,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            frames: DEFAULT_FRAMES,
            budget: DEFAULT_BUDGET,
            lr: 0.002,
            cyclic: true,
            weights: WalkWeights::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct WalkPlan {
    pub keyframes: Vec<Keyframe>,
    pub config: WalkConfig,
}

impl WalkPlan {
    pub fn new(keyframes: Vec<Keyframe>, config: WalkConfig) -> Result<Self> {
        if config.frames < 2 {
            return Err(Error::invalid("frames", "a segment needs at least its two keyframes"));
        }
        if keyframes.len() < 2 && !(config.cyclic && keyframes.len() == 1) {
            return Err(Error::invalid("keyframes", "need at least two keyframes"));
        }
        if !(config.lr.is_finite() && config.lr > 0.0) {
            return Err(Error::invalid("lr", format!("{} must be positive", config.lr)));
        }
        Ok(WalkPlan { keyframes, config })
    }

    /// Keyframe index pairs of every segment.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let k = self.keyframes.len();
        let mut out: Vec<(usize, usize)> = (1..k).map(|i| (i - 1, i)).collect();
        if self.config.cyclic {
            out.push((k - 1, 0));
        }
        out
    }
}

/// One step of the inset recurrence: `f = 1/(n − i)`,
/// `(1 − f)·prev + f·end`, computed as `prev + f·(end − prev)`.
pub fn walk_frame_latent(
    prev: &LayeredLatent,
    end: &LayeredLatent,
    i: usize,
    n: usize,
) -> Result<LayeredLatent> {
    if i >= n {
        return Err(Error::invalid("i", format!("step {i} of {n}")));
    }
    prev.lerp(end, 1.0 / (n - i) as f64)
}

/// Outcome of [`optimize_frame`].
#[derive(Clone, Debug)]
pub struct FrameFit {
    pub latent: LayeredLatent,
    pub border_l1_before: f64,
    pub border_l1: f64,
}

/// Refine the interpolated inset of one frame against its canvas, its own
/// starting render and a reference composite for the border (the previous
/// frame in a walk). Returns the lowest-loss iterate.
pub fn optimize_frame(
    inset: &Gan,
    fx: &FeatureExtractor,
    start: &LayeredLatent,
    canvas_frame: &Tensor,
    bbox: BBox,
    prev_composite: &Tensor,
    cfg: &WalkConfig,
) -> Result<FrameFit> {
    let first = inset.generator.generate(start)?.channels(0, 3)?;
    let (_, h, w) = first.chw()?;
    let target = resize_bilinear(&crop(&canvas_frame.channels(0, 3)?, bbox)?, h, w)?;
    let before = border_l1(&target, &first)?;
    if cfg.budget == 0 {
        return Ok(FrameFit {
            latent: start.clone(),
            border_l1_before: before,
            border_l1: before,
        });
    }
    let prev = resize_bilinear(&crop(prev_composite, bbox)?, h, w)?;
    let wt = cfg.weights;
    let interior = Region::Interior {
        width: BORDER_WIDTH,
    };

    let mut latent = start.clone();
    let mut adam = AdamState::new(latent.as_tensor().shape());
    let mut best: Option<(f64, LayeredLatent)> = None;
    for step in 0..=cfg.budget {
        let mut tape = Tape::new();
        let leaf = tape.leaf(latent.as_tensor().clone());
        let img = inset.generator.synthesize(&mut tape, leaf)?;
        let img = tape.slice_channels(img, 0, 3)?;
        let canvas_t = tape.constant(target.clone());
        let prev_t = tape.constant(prev.clone());
        let first_t = tape.constant(first.clone());
        let edge = border_loss(&mut tape, canvas_t, img, wt.edge_percep, wt.edge, fx)?;
        let temporal = border_loss(&mut tape, prev_t, img, 0.0, wt.temporal, fx)?;
        let identity = region_preservation_loss(
            &mut tape,
            img,
            first_t,
            &interior,
            wt.identity,
            wt.identity_percep,
            fx,
        )?;
        let total = tape.add(edge, temporal)?;
        let total = tape.add(total, identity)?;
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { iteration: step });
        }
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, latent.clone()));
        }
        if step == cfg.budget {
            break;
        }
        let g = tape.grad(total, &[leaf])?.remove(0);
        latent = LayeredLatent::from_tensor(adam.update(latent.as_tensor(), &g, cfg.lr)?)?;
    }
    let latent = best.expect("budget ≥ 1 evaluates at least once").1;
    let after = inset.generator.generate(&latent)?.channels(0, 3)?;
    Ok(FrameFit {
        border_l1: border_l1(&target, &after)?,
        border_l1_before: before,
        latent,
    })
}

#[derive(Clone, Debug)]
pub struct Frame {
    /// Position in the whole walk.
    pub index: usize,
    pub segment: usize,
    pub keyframe: bool,
    pub canvas: LayeredLatent,
    pub inset: LayeredLatent,
    pub bbox: BBox,
    pub composite: Tensor,
    pub border_l1_before: f64,
    pub border_l1: f64,
    /// Mean absolute composite change from the previous frame.
    pub temporal_delta: f64,
    /// Mean absolute change over the box's border frame.
    pub border_delta: f64,
}

/// A walk that stopped at a failing frame.
#[derive(Debug)]
pub struct WalkError {
    pub frames: Vec<Frame>,
    pub error: Error,
}

impl std::fmt::Display for WalkError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for WalkError {}

/// Mean absolute difference over the width-8 frame just inside `bbox`.
fn ring_delta(a: &Tensor, b: &Tensor, bbox: BBox) -> Result<f64> {
    let ca = crop(a, bbox)?;
    let cb = crop(b, bbox)?;
    let (c, h, w) = ca.chw()?;
    let width = BORDER_WIDTH.min(h / 2).min(w / 2).max(1);
    let mask = Region::Border { width }.mask(c, h, w)?;
    let (mut s, mut n) = (0.0, 0.0);
    for ((x, y), m) in ca.data().iter().zip(cb.data()).zip(mask.data()) {
        if *m != 0.0 {
            s += (x - y).abs();
            n += 1.0;
        }
    }
    Ok(if n > 0.0 { s / n } else { 0.0 })
}

struct Render<'a> {
    canvas: &'a Gan,
    inset: &'a Gan,
    fx: &'a FeatureExtractor,
}

impl Render<'_> {
    fn keyframe(&self, k: &Keyframe) -> Result<(Tensor, f64)> {
        let canvas = self.canvas.generator.generate(&k.canvas)?;
        let inset = self.inset.generator.generate(&k.inset)?.channels(0, 3)?;
        let (_, h, w) = inset.chw()?;
        let target = resize_bilinear(&crop(&canvas.channels(0, 3)?, k.bbox)?, h, w)?;
        Ok((compose(&canvas, &inset, k.bbox)?, border_l1(&target, &inset)?))
    }
}

/// Render every segment of `plan`. Keyframes are emitted as their plain
/// composites; shared keyframes appear once.
pub fn render_walk(
    plan: &WalkPlan,
    canvas: &Gan,
    inset: &Gan,
    fx: &FeatureExtractor,
) -> std::result::Result<Vec<Frame>, WalkError> {
    let r = Render { canvas, inset, fx };
    let n = plan.config.frames;
    let mut frames: Vec<Frame> = Vec::new();
    let abort = |frames: Vec<Frame>, index: usize, e: Error| WalkError {
        frames,
        error: Error::FrameAborted {
            frame: index,
            source: Box::new(e),
        },
    };
    let push = |frames: &mut Vec<Frame>, mut f: Frame| -> Result<()> {
        if let Some(prev) = frames.last() {
            f.temporal_delta = f.composite.mean_abs_diff(&prev.composite)?;
            f.border_delta = ring_delta(&f.composite, &prev.composite, f.bbox)?;
        }
        frames.push(f);
        Ok(())
    };

    for (segment, (a, b)) in plan.segments().into_iter().enumerate() {
        let (ka, kb) = (&plan.keyframes[a], &plan.keyframes[b]);
        if frames.is_empty() {
            let index = 0;
            let (composite, l1) = r.keyframe(ka).map_err(|e| abort(Vec::new(), index, e))?;
            frames.push(Frame {
                index,
                segment,
                keyframe: true,
                canvas: ka.canvas.clone(),
                inset: ka.inset.clone(),
                bbox: ka.bbox,
                composite,
                border_l1_before: l1,
                border_l1: l1,
                temporal_delta: 0.0,
                border_delta: 0.0,
            });
        }
        let end = match r.keyframe(kb) {
            Ok(e) => e,
            Err(e) => {
                let index = frames.len() + n - 2;
                return Err(abort(frames, index, e));
            }
        };
        let mut prev_inset = ka.inset.clone();
        for j in 1..n {
            let index = frames.len();
            let frame = if j == n - 1 {
                let (composite, l1) = end.clone();
                Ok(Frame {
                    index,
                    segment,
                    keyframe: true,
                    canvas: kb.canvas.clone(),
                    inset: kb.inset.clone(),
                    bbox: kb.bbox,
                    composite,
                    border_l1_before: l1,
                    border_l1: l1,
                    temporal_delta: 0.0,
                    border_delta: 0.0,
                })
            } else {
                let prev_composite = &frames.last().expect("first keyframe pushed").composite;
                r.inbetween(ka, kb, &prev_inset, j, n, plan, prev_composite, &end.0)
                    .map(|(canvas_latent, fit, bbox, composite)| Frame {
                        index,
                        segment,
                        keyframe: false,
                        canvas: canvas_latent,
                        inset: fit.latent,
                        bbox,
                        composite,
                        border_l1_before: fit.border_l1_before,
                        border_l1: fit.border_l1,
                        temporal_delta: 0.0,
                        border_delta: 0.0,
                    })
            };
            let frame = match frame {
                Ok(f) => f,
                Err(e) => return Err(abort(frames, index, e)),
            };
            prev_inset = frame.inset.clone();
            if let Err(e) = push(&mut frames, frame) {
                return Err(abort(frames, index, e));
            }
        }
    }
    Ok(frames)
}

impl Render<'_> {
    #[allow(clippy::too_many_arguments)]
    fn inbetween(
        &self,
        ka: &Keyframe,
        kb: &Keyframe,
        prev_inset: &LayeredLatent,
        j: usize,
        n: usize,
        plan: &WalkPlan,
        prev_composite: &Tensor,
        end_composite: &Tensor,
    ) -> Result<(LayeredLatent, FrameFit, BBox, Tensor)> {
        let t = j as f64 / (n - 1) as f64;
        let canvas_latent = ka.canvas.lerp(&kb.canvas, t)?;
        let bbox = lerp_bbox(ka.bbox, kb.bbox, t)?;
        let start = walk_frame_latent(prev_inset, &kb.inset, j - 1, n - 1)?;
        let canvas_img = self.canvas.generator.generate(&canvas_latent)?;
        // The temporal reference takes the same step toward the end keyframe
        // as the latent.
        let f = 1.0 / (n - j) as f64;
        let reference = prev_composite.zip_map(end_composite, |a, b| a + f * (b - a))?;
        let fit = optimize_frame(
            self.inset,
            self.fx,
            &start,
            &canvas_img,
            bbox,
            &reference,
            &plan.config,
        )?;
        let inset_img = self.inset.generator.generate(&fit.latent)?;
        let composite = compose(&canvas_img, &inset_img, bbox)?;
        Ok((canvas_latent, fit, bbox, composite))
    }
}

/// Per-frame metrics as CSV.
pub fn write_walk_metrics<W: Write>(frames: &[Frame], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "frame",
        "border_l1",
        "temporal_delta",
        "border_delta",
        "border_l1_init",
        "segment",
        "keyframe",
    ])?;
    for f in frames {
        w.write_record([
            f.index.to_string(),
            format!("{:.9}", f.border_l1),
            format!("{:.9}", f.temporal_delta),
            format!("{:.9}", f.border_delta),
            format!("{:.9}", f.border_l1_before),
            f.segment.to_string(),
            u8::from(f.keyframe).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of `border_delta` over consecutive frame pairs.
pub fn mean_border_delta(frames: &[Frame]) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    frames[1..].iter().map(|f| f.border_delta).sum::<f64>() / (frames.len() - 1) as f64
}

/// Mean of `temporal_delta` over consecutive frame pairs.
pub fn mean_temporal_delta(frames: &[Frame]) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    frames[1..].iter().map(|f| f.temporal_delta).sum::<f64>() / (frames.len() - 1) as f64
}
