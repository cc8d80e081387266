//! Joint optimization of a canvas latent and one or more inset latents.

mod objective;
mod optimize;
mod schedule;
mod trace;

pub use objective::{LossId, Mode, ObjectiveSpec, Phase, Term};
pub use optimize::{
    compose, joint_optimize, phase_objective, refine_inset, run_batch, Best, Gan, JointResult, Latents, Models,
    OptState, RunError,
};
pub use schedule::{should_stop, ScheduleConfig, StartWith};
pub use trace::{Trace, TraceRow};
