use inset_core::composer::{
    compose, joint_optimize, refine_inset, Gan, Latents, Mode, Models, ObjectiveSpec,
    ScheduleConfig,
};
use inset_core::detector::{detect_bbox, DEFAULT_THRESHOLD};
use inset_core::genmodel::{GeneratorSpec, InitMode};
use inset_core::lossbank::{seam_energy, FeatureExtractor, LambdaTable, Region};

struct World {
    canvas: Gan,
    insets: Vec<Gan>,
    fx: FeatureExtractor,
}

impl World {
    fn new() -> Self {
        World {
            canvas: Gan::new(&GeneratorSpec::canvas(1), 512, 7).unwrap(),
            insets: vec![Gan::new(&GeneratorSpec::inset(2), 512, 8).unwrap()],
            fx: FeatureExtractor::new(3),
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
        let init = InitMode::TruncatedRandom { alpha: 0.7 };
        let gan = |g: &Gan, s| g.generator.init_latent(init, &g.w_avg, s).unwrap();
        Latents {
            canvas: gan(&self.canvas, 2 * seed),
            insets: vec![gan(&self.insets[0], 2 * seed + 1)],
        }
    }
}

fn short(mode: Mode, iters: usize) -> ScheduleConfig {
    let mut cfg = ScheduleConfig::for_mode(mode);
    cfg.max_iters = iters;
    cfg.bbox_reeval_until = iters.min(cfg.bbox_reeval_until);
    cfg
}

#[test]
fn joint_run_lowers_the_objective_and_keeps_a_consistent_trace() {
    let world = World::new();
    let spec = ObjectiveSpec::new(Mode::JointRefine, 1, LambdaTable::default()).unwrap();
    let cfg = short(Mode::JointRefine, 30);
    let r = joint_optimize(world.models(), &spec, world.latents(0), &cfg).unwrap();

    assert_eq!(r.trace.rows.len(), r.iterations);
    assert!(r.iterations <= 30);
    let first = &r.trace.rows[0];
    assert!(r.best_total <= first.total);
    let mut best = f64::INFINITY;
    for row in &r.trace.rows {
        best = best.min(row.total);
        assert_eq!(row.best_total, best);
        assert_eq!(row.terms.len(), r.trace.labels.len());
    }
    assert_eq!(r.trace.rows[r.best_iteration].total, r.best_total);
    assert!(r.border_l1[0] < r.initial_border_l1[0]);

    let canvas_img = world.canvas.generator.generate(&r.latents.canvas).unwrap();
    let inset_img = world.insets[0].generator.generate(&r.latents.insets[0]).unwrap();
    let again = compose(&canvas_img, &inset_img, r.bboxes[0]).unwrap();
    assert_eq!(again, r.composite);
    assert!(seam_energy(&r.composite, r.bboxes[0]).unwrap().is_finite());
}

#[test]
fn runs_are_deterministic() {
    let world = World::new();
    let cfg = short(Mode::RefineInset, 8);
    let l = world.latents(1);
    let run = || {
        refine_inset(
            world.models(),
            &l.canvas,
            &l.insets[0],
            LambdaTable::default(),
            &cfg,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.latents, b.latents);
    assert_eq!(a.composite, b.composite);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn refinement_leaves_the_canvas_alone() {
    let world = World::new();
    let cfg = short(Mode::RefineInset, 10);
    let l = world.latents(2);
    let r = refine_inset(
        world.models(),
        &l.canvas,
        &l.insets[0],
        LambdaTable::default(),
        &cfg,
    )
    .unwrap();
    assert_eq!(r.latents.canvas, l.canvas);

    let canvas_img = world.canvas.generator.generate(&l.canvas).unwrap();
    let bbox = detect_bbox(&canvas_img, 3, DEFAULT_THRESHOLD).unwrap();
    assert_eq!(r.bboxes[0], bbox);
    let outside = Region::Exterior { boxes: vec![bbox] }.mask(3, 256, 256).unwrap();
    let base = canvas_img.channels(0, 3).unwrap();
    for (i, m) in outside.data().iter().enumerate() {
        if *m != 0.0 {
            assert_eq!(r.composite.data()[i], base.data()[i]);
        }
    }
}

#[test]
fn mismatched_inset_count_is_rejected() {
    let world = World::new();
    let spec = ObjectiveSpec::new(Mode::MultiInset, 2, LambdaTable::default()).unwrap();
    let err = joint_optimize(
        world.models(),
        &spec,
        world.latents(0),
        &short(Mode::MultiInset, 4),
    )
    .unwrap_err();
    assert!(err.to_string().contains("insets"), "{err}");
    assert!(ObjectiveSpec::new(Mode::Montage, 2, LambdaTable::default()).is_err());
}

#[test]
fn generator_specs_survive_a_toml_round_trip() {
    for spec in [GeneratorSpec::canvas(11), GeneratorSpec::inset(12)] {
        let back = GeneratorSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
