use serde::{Deserialize, Serialize};

use super::objective::{Mode, Phase};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartWith {
    Canvas,
    Inset,
}

/// Optimizer schedule. Mode-dependent fields are resolved by [`ScheduleConfig::for_mode`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_canvas: f64,
    pub lr_inset: f64,
    /// Iterations per optimization target before switching.
    pub switch_every: usize,
    pub bbox_reeval_every: usize,
    pub bbox_reeval_until: usize,
    pub stop_border_l1: f64,
    pub max_iters: usize,
    /// Canvas-only iterations before alternation begins.
    pub canvas_warmup: usize,
    pub start_with: StartWith,
    /// Iteration at which the refinement snapshots the inset interior.
    pub snapshot_at: usize,
}

impl ScheduleConfig {
    pub fn for_mode(mode: Mode) -> Self {
        let body_generation = mode == Mode::BodyForFace;
        ScheduleConfig {
            lr_canvas: 0.05,
            lr_inset: 0.002,
            switch_every: 50,
            bbox_reeval_every: 25,
            bbox_reeval_until: if body_generation { 150 } else { 75 },
            stop_border_l1: 0.09,
            max_iters: 1000,
            canvas_warmup: if body_generation { 150 } else { 0 },
            start_with: if matches!(mode, Mode::BodyForFace | Mode::Montage) {
                StartWith::Canvas
            } else {
                StartWith::Inset
            },
            snapshot_at: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_canvas", self.lr_canvas),
            ("lr_inset", self.lr_inset),
            ("stop_border_l1", self.stop_border_l1),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("schedule", format!("{name} = {v} must be positive")));
            }
        }
        let counts = [
            ("switch_every", self.switch_every),
            ("bbox_reeval_every", self.bbox_reeval_every),
            ("max_iters", self.max_iters),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid("schedule", format!("{name} must be positive")));
            }
        }
        if self.bbox_reeval_until > self.max_iters {
            return Err(Error::invalid(
                "schedule",
                format!(
                    "bbox_reeval_until {} exceeds max_iters {}",
                    self.bbox_reeval_until, self.max_iters
                ),
            ));
        }
        Ok(())
    }

    /// Optimization target at iteration `it`.
    pub fn phase_at(&self, it: usize, optimizes_canvas: bool, n_insets: usize) -> Phase {
        if !optimizes_canvas {
            return Phase::Inset((it / self.switch_every) % n_insets);
        }
        if it < self.canvas_warmup {
            return Phase::Canvas;
        }
        // After a canvas warm-up the insets go next.
        let canvas_first = self.start_with == StartWith::Canvas && self.canvas_warmup == 0;
        let slot = ((it - self.canvas_warmup) / self.switch_every) % (n_insets + 1);
        match (canvas_first, slot) {
            (true, 0) => Phase::Canvas,
            (true, s) => Phase::Inset(s - 1),
            (false, s) if s == n_insets => Phase::Canvas,
            (false, s) => Phase::Inset(s),
        }
    }

    /// Whether the box is re-detected before iteration `it`.
    pub fn reevaluates_at(&self, it: usize) -> bool {
        it > 0 && it <= self.bbox_reeval_until && it.is_multiple_of(self.bbox_reeval_every)
    }

    pub fn lr(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Canvas => self.lr_canvas,
            Phase::Inset(_) => self.lr_inset,
        }
    }
}

/// True once every inset's unweighted border L1 is under the threshold, or
/// the iteration cap is reached.
pub fn should_stop(border_l1: &[f64], iteration: usize, cfg: &ScheduleConfig) -> bool {
    iteration >= cfg.max_iters
        || (!border_l1.is_empty() && border_l1.iter().all(|&b| b < cfg.stop_border_l1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_defaults() {
        let c = ScheduleConfig::for_mode(Mode::JointRefine);
        assert_eq!((c.lr_canvas, c.lr_inset), (0.05, 0.002));
        assert_eq!((c.switch_every, c.bbox_reeval_every, c.bbox_reeval_until), (50, 25, 75));
        assert_eq!((c.stop_border_l1, c.max_iters), (0.09, 1000));
        let b = ScheduleConfig::for_mode(Mode::BodyForFace);
        assert_eq!((b.bbox_reeval_until, b.canvas_warmup), (150, 150));
        assert_eq!(ScheduleConfig::for_mode(Mode::Montage).start_with, StartWith::Canvas);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn stop_rule() {
        let c = ScheduleConfig::for_mode(Mode::RefineInset);
        assert!(should_stop(&[0.08], 10, &c));
        assert!(should_stop(&[0.5], 1000, &c));
        assert!(!should_stop(&[0.5], 999, &c));
        assert!(!should_stop(&[0.08, 0.1], 10, &c));
    }

    #[test]
    fn phases_alternate_every_fifty() {
        let c = ScheduleConfig::for_mode(Mode::JointRefine);
        let phases: Vec<Phase> = (0..300).map(|i| c.phase_at(i, true, 1)).collect();
        for (i, p) in phases.iter().enumerate() {
            let expect = if (i / 50) % 2 == 0 {
                Phase::Inset(0)
            } else {
                Phase::Canvas
            };
            assert_eq!(*p, expect, "iteration {i}");
        }
        let b = ScheduleConfig::for_mode(Mode::BodyForFace);
        assert_eq!(b.phase_at(149, true, 1), Phase::Canvas);
        assert_eq!(b.phase_at(150, true, 1), Phase::Inset(0));
        assert_eq!(b.phase_at(200, true, 1), Phase::Canvas);
        let m = ScheduleConfig::for_mode(Mode::Montage);
        assert_eq!(m.phase_at(0, true, 1), Phase::Canvas);
        assert_eq!(m.phase_at(50, true, 1), Phase::Inset(0));
        assert_eq!(c.phase_at(120, true, 2), Phase::Canvas);
        assert_eq!(c.phase_at(60, true, 2), Phase::Inset(1));
        assert_eq!(c.phase_at(60, false, 1), Phase::Inset(0));
    }

    #[test]
    fn reevaluation_cadence() {
        let c = ScheduleConfig::for_mode(Mode::JointRefine);
        let at: Vec<usize> = (0..1000).filter(|&i| c.reevaluates_at(i)).collect();
        assert_eq!(at, [25, 50, 75]);
        let b = ScheduleConfig::for_mode(Mode::BodyForFace);
        let at: Vec<usize> = (0..1000).filter(|&i| b.reevaluates_at(i)).collect();
        assert_eq!(at, [25, 50, 75, 100, 125, 150]);
    }
}
