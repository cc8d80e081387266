use inset_core::composer::{
    compose, joint_optimize, refine_inset, run_batch, Gan, JointResult, Latents, Mode, Models,
    ObjectiveSpec, RunError,
};
use inset_core::detector::{detect_bbox, BBox, DEFAULT_THRESHOLD};
use inset_core::diffcore::Tensor;
use inset_core::genmodel::{truncate, truncate_adaptive, InitMode, LayeredLatent};
use inset_core::gradsuite::{gradient_suite, SUITE_TOLERANCE};
use inset_core::latentwalk::{render_walk, write_walk_metrics, Keyframe, WalkPlan};
use inset_core::lossbank::{seam_energy, FeatureExtractor};
use inset_core::metrics::{
    embed, fid, precision_recall, seam_summary, write_report, ReportRow, Source,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Command, JobConfig, SampleTarget, Truncation};
use crate::output::OutDir;
use crate::CliError;

/// The frozen generators and feature extractor of a job.
pub struct World {
    pub canvas: Gan,
    pub insets: Vec<Gan>,
    pub fx: FeatureExtractor,
}

impl World {
    pub fn build(cfg: &JobConfig) -> Result<Self, CliError> {
        let avg = &cfg.average;
        let canvas = Gan::new(&cfg.canvas, avg.samples, avg.seed).map_err(CliError::core)?;
        let insets = cfg
            .insets
            .iter()
            .enumerate()
            .map(|(k, s)| Gan::new(s, avg.samples, avg.seed + 1 + k as u64))
            .collect::<Result<Vec<_>, _>>()
            .map_err(CliError::core)?;
        Ok(World {
            canvas,
            insets,
            fx: FeatureExtractor::new(cfg.fx_seed),
        })
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            canvas: &self.canvas,
            insets: &self.insets,
            fx: &self.fx,
        }
    }
}

/// Seed of latent `slot` for job `seed`: slot 0 is the canvas, slot `1 + k`
/// inset `k`.
pub fn latent_seed(master: u64, seed: u64, slot: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(seed);
    let mut s = rng.next_u64();
    for _ in 0..slot {
        s = rng.next_u64();
    }
    s
}

/// A mapped random latent with `trunc` applied.
pub fn sample_latent(
    gan: &Gan,
    seed: u64,
    trunc: &Truncation,
) -> inset_core::Result<LayeredLatent> {
    let g = &gan.generator;
    let raw = g.init_latent(InitMode::TruncatedRandom { alpha: 0.0 }, &gan.w_avg, seed)?;
    match trunc {
        Truncation::None => Ok(raw),
        Truncation::Scalar { t } => Ok(LayeredLatent::flat(
            &truncate(raw.base(), *t, &gan.w_avg)?,
            raw.n_layers(),
        )),
        Truncation::Adaptive { table } => truncate_adaptive(&raw, table, &gan.w_avg),
    }
}

/// Starting latents of job `seed` for the first `n` insets.
pub fn init_latents(
    world: &World,
    cfg: &JobConfig,
    seed: u64,
    n: usize,
) -> inset_core::Result<Latents> {
    let ls = |slot| latent_seed(cfg.master_seed, seed, slot);
    Ok(Latents {
        canvas: world
            .canvas
            .generator
            .init_latent(cfg.init, &world.canvas.w_avg, ls(0))?,
        insets: (0..n)
            .map(|k| {
                let g = &world.insets[k];
                g.generator.init_latent(cfg.init, &g.w_avg, ls(1 + k))
            })
            .collect::<inset_core::Result<_>>()?,
    })
}

pub fn optimize_seed(
    world: &World,
    cfg: &JobConfig,
    mode: Mode,
    n: usize,
    seed: u64,
) -> Result<JointResult, RunError> {
    let sched = cfg.schedule_for(mode);
    let init = init_latents(world, cfg, seed, n)?;
    if mode == Mode::RefineInset {
        return refine_inset(
            world.models(),
            &init.canvas,
            &init.insets[0],
            cfg.lambdas,
            &sched,
        );
    }
    let spec = ObjectiveSpec::new(mode, n, cfg.lambdas)?;
    joint_optimize(world.models(), &spec, init, &sched)
}

pub fn execute(cfg: &JobConfig) -> Result<(), CliError> {
    let cmd = cfg
        .command
        .ok_or_else(|| CliError::Validation("command: none given".into()))?;
    let out = OutDir::create(&cfg.output, cfg.raw)?;
    let result = match cmd {
        Command::Gradcheck => gradcheck(cfg, &out),
        _ => {
            let world = World::build(cfg)?;
            match cmd {
                Command::Sample => sample(cfg, &world, &out),
                Command::Walk => walk(cfg, &world, &out),
                Command::Eval => eval(cfg, &world, &out),
                _ => optimize(cmd, cfg, &world, &out),
            }
        }
    };
    let status = match &result {
        Ok(()) => "ok",
        Err(_) => "failed",
    };
    out.finish(cmd, cfg, status)?;
    result
}

/// Fold per-seed failures into one error, the more severe kind winning.
fn gather(cfg: &JobConfig, results: Vec<Result<(), CliError>>) -> Result<(), CliError> {
    let mut worst: Option<CliError> = None;
    let mut failed = 0;
    for (seed, r) in cfg.seeds.iter().zip(results) {
        if let Err(e) = r {
            eprintln!("seed {seed}: {e}");
            failed += 1;
            if worst
                .as_ref()
                .is_none_or(|w| e.exit_code() > w.exit_code())
            {
                worst = Some(e);
            }
        }
    }
    match worst {
        None => Ok(()),
        Some(e) => {
            let msg = format!("{failed} of {} seeds failed", cfg.seeds.len());
            Err(match e {
                CliError::Validation(_) => CliError::Validation(msg),
                CliError::Failed(_) => CliError::Failed(msg),
            })
        }
    }
}

fn color(img: &Tensor) -> Result<Tensor, CliError> {
    img.channels(0, 3).map_err(CliError::core)
}

/// Color channels of `canvas_img` with each inset pasted into its detected box.
pub fn paste_all(
    canvas_img: &Tensor,
    insets: &[Tensor],
) -> inset_core::Result<(Tensor, Vec<BBox>)> {
    let mut img = canvas_img.channels(0, 3)?;
    let mut boxes = Vec::new();
    for (k, inset) in insets.iter().enumerate() {
        let b = detect_bbox(canvas_img, 3 + k, DEFAULT_THRESHOLD)?;
        img = compose(&img, inset, b)?;
        boxes.push(b);
    }
    Ok((img, boxes))
}

fn sample(cfg: &JobConfig, world: &World, out: &OutDir) -> Result<(), CliError> {
    let results = run_batch(&cfg.seeds, |&seed| -> Result<(), CliError> {
        let ls = |slot| latent_seed(cfg.master_seed, seed, slot);
        let gen = |gan: &Gan, slot| {
            sample_latent(gan, ls(slot), &cfg.truncation).and_then(|l| gan.generator.generate(&l))
        };
        let canvas = gen(&world.canvas, 0).map_err(CliError::core)?;
        let img = match cfg.sample.target {
            SampleTarget::Canvas => color(&canvas)?,
            SampleTarget::Inset => color(&gen(&world.insets[0], 1).map_err(CliError::core)?)?,
            SampleTarget::Composite => {
                let insets = (0..world.insets.len())
                    .map(|k| gen(&world.insets[k], 1 + k).and_then(|i| i.channels(0, 3)))
                    .collect::<inset_core::Result<Vec<_>>>()
                    .map_err(CliError::core)?;
                paste_all(&canvas, &insets).map_err(CliError::core)?.0
            }
        };
        out.write_image(&format!("sample_{seed:04}"), &img)
    });
    gather(cfg, results)
}

#[derive(Clone, Debug, Default)]
struct SummaryRow {
    seed: u64,
    status: &'static str,
    iterations: usize,
    best_iteration: Option<usize>,
    converged: bool,
    border_l1_init: Option<f64>,
    border_l1: Option<f64>,
    seam_init: Option<f64>,
    seam: Option<f64>,
}

fn max_seam(img: &Tensor, boxes: &[BBox]) -> inset_core::Result<f64> {
    boxes
        .iter()
        .map(|&b| seam_energy(img, b))
        .try_fold(0.0f64, |m, s| s.map(|s| m.max(s)))
}

fn fmax(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

fn optimize(cmd: Command, cfg: &JobConfig, world: &World, out: &OutDir) -> Result<(), CliError> {
    let (mode, n) = cfg.mode_of(cmd).expect("optimizing command");
    let results = run_batch(&cfg.seeds, |&seed| -> (SummaryRow, Result<(), CliError>) {
        let stem = format!("{cmd}_{seed:04}");
        let mut row = SummaryRow {
            seed,
            ..SummaryRow::default()
        };
        let r = match optimize_seed(world, cfg, mode, n, seed) {
            Ok(r) => r,
            Err(e) => {
                row.status = "aborted";
                row.iterations = e.trace.rows.len();
                let wrote = write_trace(out, &stem, &e.trace);
                return (row, wrote.and(Err(CliError::core(e.error))));
            }
        };
        row.status = "ok";
        row.iterations = r.iterations;
        row.best_iteration = Some(r.best_iteration);
        row.converged = r.converged;
        row.border_l1_init = Some(fmax(&r.initial_border_l1));
        row.border_l1 = Some(fmax(&r.border_l1));
        let written = (|| {
            row.seam_init =
                Some(max_seam(&r.initial_composite, &r.initial_bboxes).map_err(CliError::core)?);
            row.seam = Some(max_seam(&r.composite, &r.bboxes).map_err(CliError::core)?);
            out.write_image(&stem, &r.composite)?;
            out.write_image(&format!("{stem}_init"), &r.initial_composite)?;
            write_trace(out, &stem, &r.trace)
        })();
        (row, written)
    });
    let (rows, results): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    for r in &rows {
        if let (Some(a), Some(b)) = (r.border_l1_init, r.border_l1) {
            println!(
                "seed {}: border L1 {a:.4} -> {b:.4} in {} iterations",
                r.seed, r.iterations
            );
        }
    }
    write_summary(out, &format!("{cmd}_summary.csv"), &rows)?;
    gather(cfg, results)
}

fn write_trace(
    out: &OutDir,
    stem: &str,
    trace: &inset_core::composer::Trace,
) -> Result<(), CliError> {
    let text = trace.to_csv_string().map_err(CliError::core)?;
    out.write_bytes(&format!("{stem}_trace.csv"), text.as_bytes())
}

fn write_summary(out: &OutDir, name: &str, rows: &[SummaryRow]) -> Result<(), CliError> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.9}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Validation(format!("{name}: {e}"));
    w.write_record([
        "seed",
        "status",
        "iterations",
        "best_iteration",
        "converged",
        "border_l1_init",
        "border_l1",
        "seam_init",
        "seam",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.status.to_string(),
            r.iterations.to_string(),
            r.best_iteration.map_or(String::new(), |b| b.to_string()),
            u8::from(r.converged).to_string(),
            opt(r.border_l1_init),
            opt(r.border_l1),
            opt(r.seam_init),
            opt(r.seam),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Validation(format!("{name}: {e}")))?;
    out.write_bytes(name, &bytes)
}

fn keyframe(world: &World, cfg: &JobConfig, seed: u64) -> Result<Keyframe, CliError> {
    if cfg.walk.optimize_keyframes {
        let r = optimize_seed(world, cfg, Mode::JointRefine, 1, seed)
            .map_err(|e| CliError::core(e.error))?;
        let mut l = r.latents;
        return Ok(Keyframe {
            canvas: l.canvas,
            inset: l.insets.swap_remove(0),
            bbox: r.bboxes[0],
        });
    }
    let mut l = init_latents(world, cfg, seed, 1).map_err(CliError::core)?;
    let img = world
        .canvas
        .generator
        .generate(&l.canvas)
        .map_err(CliError::core)?;
    Ok(Keyframe {
        bbox: detect_bbox(&img, 3, DEFAULT_THRESHOLD).map_err(CliError::core)?,
        canvas: l.canvas,
        inset: l.insets.swap_remove(0),
    })
}

fn walk(cfg: &JobConfig, world: &World, out: &OutDir) -> Result<(), CliError> {
    if cfg.seeds.len() < 2 {
        return Err(CliError::Validation(
            "seeds: a walk needs at least two keyframe seeds".into(),
        ));
    }
    let keyframes = run_batch(&cfg.seeds, |&s| keyframe(world, cfg, s))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let plan = WalkPlan::new(keyframes, cfg.walk.walk.clone()).map_err(CliError::core)?;
    let (frames, failure) = match render_walk(&plan, &world.canvas, &world.insets[0], &world.fx) {
        Ok(f) => (f, None),
        Err(e) => (e.frames, Some(e.error)),
    };
    for f in &frames {
        out.write_image(&format!("walk_{:04}", f.index), &f.composite)?;
    }
    let mut csv = Vec::new();
    write_walk_metrics(&frames, &mut csv).map_err(CliError::core)?;
    out.write_bytes("walk_metrics.csv", &csv)?;
    println!("walk: {} frames", frames.len());
    match failure {
        Some(e) => Err(CliError::core(e)),
        None => Ok(()),
    }
}

fn eval(cfg: &JobConfig, world: &World, out: &OutDir) -> Result<(), CliError> {
    let sample = |gan: &Gan, seed: u64, slot: usize, trunc: &Truncation| {
        let l = sample_latent(gan, latent_seed(cfg.master_seed, seed, slot), trunc)?;
        gan.generator.generate(&l)
    };
    let run = || -> inset_core::Result<Vec<ReportRow>> {
        let generated = run_batch(&cfg.seeds, |&s| -> inset_core::Result<(Tensor, Tensor)> {
            let canvas = sample(&world.canvas, s, 0, &cfg.truncation)?;
            let inset = sample(&world.insets[0], s, 1, &cfg.truncation)?.channels(0, 3)?;
            Ok((canvas, inset))
        })
        .into_iter()
        .collect::<inset_core::Result<Vec<_>>>()?;
        let reference = run_batch(&cfg.eval.reference_seeds, |&s| {
            sample(&world.canvas, s, 0, &Truncation::None)?.channels(0, 3)
        })
        .into_iter()
        .collect::<inset_core::Result<Vec<_>>>()?;
        let mut gen_color = Vec::with_capacity(generated.len());
        let mut pasted = Vec::with_capacity(generated.len());
        for (canvas, inset) in &generated {
            gen_color.push(canvas.channels(0, 3)?);
            let (img, boxes) = paste_all(canvas, std::slice::from_ref(inset))?;
            pasted.push((img, boxes[0]));
        }
        let real = embed(&reference, &world.fx, Source::Real)?;
        let gen = embed(&gen_color, &world.fx, Source::Generated)?;
        let fid_value = fid(&real, &gen)?;
        let (precision, recall) = precision_recall(&real, &gen, cfg.eval.k)?;
        let seams = seam_summary(&pasted)?;
        let hash = cfg.hash();
        let row = |metric: &str, value: f64| ReportRow {
            metric: metric.to_string(),
            value,
            n: generated.len(),
            seed: cfg.master_seed,
            config_hash: hash.clone(),
        };
        Ok(vec![
            row("fid", fid_value),
            row("precision", precision),
            row("recall", recall),
            row("seam_mean", seams.mean),
            row("seam_max", seams.max),
        ])
    };
    let rows = run().map_err(CliError::core)?;
    for r in &rows {
        println!("{} = {:.6}", r.metric, r.value);
    }
    let mut csv = Vec::new();
    write_report(&rows, &mut csv).map_err(CliError::core)?;
    out.write_bytes("metrics.csv", &csv)
}

fn gradcheck(cfg: &JobConfig, out: &OutDir) -> Result<(), CliError> {
    let g = &cfg.gradcheck;
    let rows = gradient_suite(g.points, g.seed, g.filter.as_deref()).map_err(CliError::core)?;
    if rows.is_empty() {
        return Err(CliError::Validation(format!(
            "gradcheck.filter: `{}` matches no entry",
            g.filter.as_deref().unwrap_or_default()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Validation(format!("gradcheck.csv: {e}"));
    w.write_record(["name", "kind", "points", "max_rel_err", "pass"])
        .map_err(csv_err)?;
    for r in &rows {
        println!(
            "{:<24} {:<9} {:.3e} {}",
            r.name,
            r.kind.name(),
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
        w.write_record([
            r.name.clone(),
            r.kind.name().to_string(),
            r.points.to_string(),
            format!("{:e}", r.max_rel_err),
            u8::from(r.passed()).to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Validation(format!("gradcheck.csv: {e}")))?;
    out.write_bytes("gradcheck.csv", &bytes)?;
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::Failed(format!(
            "{failed} of {} gradient checks exceed {SUITE_TOLERANCE:e}",
            rows.len()
        )));
    }
    Ok(())
}
