//! Job configuration. Every field has a default, so an empty file is a
//! complete configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use inset_core::composer::{Mode, ScheduleConfig, StartWith};
use inset_core::genmodel::{GeneratorSpec, InitMode, ADAPTIVE_TRUNCATION, DEFAULT_AVERAGE_SAMPLES};
use inset_core::latentwalk::WalkConfig;
use inset_core::lossbank::LambdaTable;
use inset_core::metrics::DEFAULT_K;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Sample,
    Refine,
    Joint,
    Montage,
    Walk,
    Eval,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Refine => "refine",
            Command::Joint => "joint",
            Command::Montage => "montage",
            Command::Walk => "walk",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How sampled latents are pulled toward the average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Truncation {
    None,
    Scalar {
        t: f64,
    },
    Adaptive {
        #[serde(default = "adaptive_table")]
        table: Vec<f64>,
    },
}

fn adaptive_table() -> Vec<f64> {
    ADAPTIVE_TRUNCATION.to_vec()
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::Adaptive {
            table: adaptive_table(),
        }
    }
}

impl Truncation {
    /// `none`, `adaptive`, or a scalar factor such as `0.7`.
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Truncation::None),
            "adaptive" => Ok(Truncation::default()),
            _ => s
                .parse::<f64>()
                .map(|t| Truncation::Scalar { t })
                .map_err(|_| format!("truncation `{s}` is not none, adaptive or a number")),
        }
    }
}

/// Parse `a..b` (inclusive), `a` or a comma-separated mix of both.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let b = b.strip_prefix('=').unwrap_or(b);
                let (a, b): (u64, u64) = (
                    a.trim()
                        .parse()
                        .map_err(|_| format!("bad seed range `{part}`"))?,
                    b.trim()
                        .parse()
                        .map_err(|_| format!("bad seed range `{part}`"))?,
                );
                if b < a {
                    return Err(format!("seed range `{part}` is empty"));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| format!("bad seed `{part}`"))?),
        }
    }
    if out.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(out)
}

fn seeds_de<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        List(Vec<u64>),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::List(v) => Ok(v),
        Raw::Text(s) => parse_seeds(&s).map_err(serde::de::Error::custom),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AverageConfig {
    pub samples: usize,
    /// Seed of the canvas average; inset `k` uses `seed + 1 + k`.
    pub seed: u64,
}

impl Default for AverageConfig {
    fn default() -> Self {
        AverageConfig {
            samples: DEFAULT_AVERAGE_SAMPLES,
            seed: 7,
        }
    }
}

/// Optional replacements for the mode's schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleOverrides {
    pub lr_canvas: Option<f64>,
    pub lr_inset: Option<f64>,
    pub switch_every: Option<usize>,
    pub bbox_reeval_every: Option<usize>,
    pub bbox_reeval_until: Option<usize>,
    pub stop_border_l1: Option<f64>,
    pub max_iters: Option<usize>,
    pub canvas_warmup: Option<usize>,
    pub start_with: Option<StartWith>,
    pub snapshot_at: Option<usize>,
}

impl ScheduleOverrides {
    pub fn apply(&self, mut c: ScheduleConfig) -> ScheduleConfig {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            lr_canvas,
            lr_inset,
            switch_every,
            bbox_reeval_every,
            bbox_reeval_until,
            stop_border_l1,
            max_iters,
            canvas_warmup,
            start_with,
            snapshot_at
        );
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMode {
    JointRefine,
    BodyForFace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    /// With several insets `joint_refine` runs the multi-inset objective.
    pub mode: JointMode,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            mode: JointMode::JointRefine,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleTarget {
    /// Canvas with each inset pasted into its detected box.
    Composite,
    Canvas,
    Inset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub target: SampleTarget,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            target: SampleTarget::Composite,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkJob {
    /// Run the joint refinement on each keyframe before walking.
    pub optimize_keyframes: bool,
    #[serde(flatten)]
    pub walk: WalkConfig,
}

impl Default for WalkJob {
    fn default() -> Self {
        WalkJob {
            optimize_keyframes: true,
            walk: WalkConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Untruncated samples forming the reference set.
    #[serde(deserialize_with = "seeds_de")]
    pub reference_seeds: Vec<u64>,
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            reference_seeds: (1000..1100).collect(),
            k: DEFAULT_K,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub points: usize,
    pub seed: u64,
    /// Only entries whose name contains this text.
    pub filter: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            points: inset_core::gradsuite::DEFAULT_POINTS,
            seed: 0,
            filter: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    pub command: Option<Command>,
    #[serde(deserialize_with = "seeds_de")]
    pub seeds: Vec<u64>,
    /// Per-seed latent streams derive from this and the seed.
    pub master_seed: u64,
    pub output: PathBuf,
    /// Also write every image as raw little-endian `f64`.
    pub raw: bool,
    pub truncation: Truncation,
    pub init: InitMode,
    pub canvas: GeneratorSpec,
    pub insets: Vec<GeneratorSpec>,
    pub average: AverageConfig,
    pub fx_seed: u64,
    pub lambdas: LambdaTable,
    pub schedule: ScheduleOverrides,
    pub joint: JointConfig,
    pub sample: SampleConfig,
    pub walk: WalkJob,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for JobConfig {
    fn default() -> Self {
        JobConfig {
            command: None,
            seeds: (0..10).collect(),
            master_seed: 0,
            output: PathBuf::from("out"),
            raw: false,
            truncation: Truncation::default(),
            init: InitMode::TruncatedRandom { alpha: 0.7 },
            canvas: GeneratorSpec::canvas(1),
            insets: vec![GeneratorSpec::inset(2)],
            average: AverageConfig::default(),
            fx_seed: 3,
            lambdas: LambdaTable::default(),
            schedule: ScheduleOverrides::default(),
            joint: JointConfig::default(),
            sample: SampleConfig::default(),
            walk: WalkJob::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

fn invalid(field: &str, detail: impl fmt::Display) -> CliError {
    CliError::Validation(format!("{field}: {detail}"))
}

impl JobConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: JobConfig =
            toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("job config serializes")
    }

    /// Hash of every effective parameter. The output directory is not one.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn schedule_for(&self, mode: Mode) -> ScheduleConfig {
        self.schedule.apply(ScheduleConfig::for_mode(mode))
    }

    /// Objective mode and inset count of an optimizing command.
    pub fn mode_of(&self, cmd: Command) -> Option<(Mode, usize)> {
        match cmd {
            Command::Refine => Some((Mode::RefineInset, 1)),
            Command::Montage => Some((Mode::Montage, 1)),
            Command::Joint => Some(match self.joint.mode {
                JointMode::BodyForFace => (Mode::BodyForFace, 1),
                JointMode::JointRefine if self.insets.len() > 1 => {
                    (Mode::MultiInset, self.insets.len())
                }
                JointMode::JointRefine => (Mode::JointRefine, 1),
            }),
            Command::Walk if self.walk.optimize_keyframes => Some((Mode::JointRefine, 1)),
            _ => None,
        }
    }

    /// Schedules checked by [`JobConfig::validate`]: the command's own, or
    /// the joint one when the command has none.
    fn schedule_modes(&self) -> Vec<Mode> {
        match self.command.and_then(|c| self.mode_of(c)) {
            Some((m, _)) => vec![m],
            None => vec![Mode::JointRefine],
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        self.canvas.validate().map_err(|e| invalid("canvas", e))?;
        if self.insets.is_empty() {
            return Err(invalid(
                "insets",
                "at least one inset generator is required",
            ));
        }
        for (k, s) in self.insets.iter().enumerate() {
            s.validate()
                .map_err(|e| invalid(&format!("insets[{k}]"), e))?;
        }
        if self.canvas.markers.len() < self.insets.len() {
            return Err(invalid(
                "canvas.markers",
                format!(
                    "{} insets need as many markers, canvas has {}",
                    self.insets.len(),
                    self.canvas.markers.len()
                ),
            ));
        }
        if self.average.samples == 0 {
            return Err(invalid("average.samples", "must be positive"));
        }
        self.lambdas.validate().map_err(|e| invalid("lambdas", e))?;
        if let InitMode::TruncatedRandom { alpha } = self.init {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(invalid("init.alpha", format!("{alpha} is outside [0, 1]")));
            }
        }
        match &self.truncation {
            Truncation::None => {}
            Truncation::Scalar { t } => {
                if !(0.0..=1.0).contains(t) {
                    return Err(invalid("truncation.t", format!("{t} is outside [0, 1]")));
                }
            }
            Truncation::Adaptive { table } => {
                let n = self.canvas.n_layers;
                if table.len() != n || self.insets.iter().any(|s| s.n_layers != n) {
                    return Err(invalid(
                        "truncation.table",
                        format!("{} factors, generators have {n} layers", table.len()),
                    ));
                }
                if let Some(t) = table.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                    return Err(invalid(
                        "truncation.table",
                        format!("{t} is outside [0, 1]"),
                    ));
                }
            }
        }
        for mode in self.schedule_modes() {
            self.schedule_for(mode)
                .validate()
                .map_err(|e| CliError::Validation(e.to_string()))?;
        }
        let w = &self.walk.walk;
        if w.frames < 2 {
            return Err(invalid("walk.frames", "must be at least 2"));
        }
        if !(w.lr.is_finite() && w.lr > 0.0) {
            return Err(invalid("walk.lr", format!("{} must be positive", w.lr)));
        }
        if self.eval.k == 0 {
            return Err(invalid("eval.k", "must be positive"));
        }
        if self.gradcheck.points == 0 {
            return Err(invalid("gradcheck.points", "must be positive"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<JobConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
    JobConfig::from_toml(&text)
}
