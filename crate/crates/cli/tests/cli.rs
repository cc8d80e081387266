use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn inset(args: &[&str], dir: &Path, config: Option<&str>) -> Output {
    inset_env(args, dir, config, &[])
}

fn inset_env(args: &[&str], dir: &Path, config: Option<&str>, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_inset"));
    cmd.args(args).current_dir(dir);
    if let Some(text) = config {
        let p = dir.join("job.toml");
        fs::write(&p, text).unwrap();
        cmd.arg("--config").arg(p);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn manifest(dir: &Path) -> toml::Table {
    toml::from_str(&fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap()
}

const SHORT: &str = "[schedule]\nmax_iters = 12\nbbox_reeval_until = 10\nbbox_reeval_every = 5\n";

#[test]
fn sample_writes_one_png_per_seed_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = inset(
        &[
            "sample", "--seeds", "0..9", "--trunc", "adaptive", "--out", "s",
        ],
        dir.path(),
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = files(&dir.path().join("s"));
    let pngs: Vec<_> = out.keys().filter(|k| k.ends_with(".png")).collect();
    assert_eq!(pngs.len(), 10);
    let m = manifest(&dir.path().join("s"));
    assert_eq!(m["command"].as_str(), Some("sample"));
    assert_eq!(m["seeds"].as_array().unwrap().len(), 10);
    let arts = m["artifacts"].as_array().unwrap();
    assert_eq!(arts.len(), 10);
    for a in arts {
        let bytes = &out[a["path"].as_str().unwrap()];
        assert_eq!(
            a["sha256"].as_str().unwrap(),
            hex::encode(Sha256::digest(bytes))
        );
        assert!(bytes.starts_with(b"\x89PNG"));
    }
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["config"]["truncation"]["kind"].as_str(), Some("adaptive"));
}

#[test]
fn negative_learning_rate_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = inset(
        &["refine"],
        dir.path(),
        Some("[schedule]\nlr_canvas = -0.05\n"),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lr_canvas"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn malformed_configs_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    for (text, needle) in [
        ("frobnicate = true\n", "frobnicate"),
        ("[schedule]\nlr_inset = \"fast\"\n", "lr_inset"),
        ("fx_seed = 1\nfx_seed = 2\n", "fx_seed"),
        ("command = \"montage\"\n", "montage"),
        ("[lambdas.face]\nlambda9 = 1.0\n", "lambda9"),
        ("[walk]\nframes = 1\n", "walk.frames"),
    ] {
        let o = inset(&["sample"], dir.path(), Some(text));
        assert_eq!(o.status.code(), Some(1), "{text}");
        assert!(stderr(&o).contains(needle), "{text}: {}", stderr(&o));
    }
    let o = inset(&["sample", "--seeds", "9..2"], dir.path(), None);
    assert_eq!(o.status.code(), Some(1));
    let o = inset(&["sample", "--trunc", "1.5"], dir.path(), None);
    assert_eq!(o.status.code(), Some(1));
    let o = inset(&["--no-such-flag"], dir.path(), None);
    assert_eq!(o.status.code(), Some(1));
    let o = inset(&[], dir.path(), None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = inset(
        &["gradcheck", "--out", "g"],
        dir.path(),
        Some("[gradcheck]\npoints = 2\nfilter = \"matmul\"\n"),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("g/gradcheck.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("name,kind,points,max_rel_err,pass"));
    let row: Vec<_> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "matmul");
    assert!(row[3].parse::<f64>().unwrap() < 1e-5);
    assert_eq!(row[4], "1");
    let o = inset(
        &["gradcheck"],
        dir.path(),
        Some("[gradcheck]\nfilter = \"nothing\"\n"),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn lambda_override_reaches_trace_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SHORT}[lambdas.face]\nlambda4 = 12345.0\n");
    let o = inset(
        &["joint", "--seeds", "3", "--out", "j"],
        dir.path(),
        Some(&cfg),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trace = fs::read_to_string(dir.path().join("j/joint_0003_trace.csv")).unwrap();
    assert!(
        trace.lines().any(|l| l == "# face.lambda4=12345"),
        "{trace}"
    );
    assert!(trace.lines().any(|l| l == "# max_iters=12"));
    let m = manifest(&dir.path().join("j"));
    assert_eq!(
        m["config"]["lambdas"]["face"]["lambda4"].as_float(),
        Some(12345.0)
    );
    let summary = fs::read_to_string(dir.path().join("j/joint_summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("3,ok,"));
}

#[test]
fn runs_are_byte_identical_whatever_the_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["refine", "--seeds", "0..2", "--out", out];
    let a = inset_env(
        &args("a"),
        dir.path(),
        Some(SHORT),
        &[("INSET_WORKERS", "1")],
    );
    let b = inset_env(
        &args("b"),
        dir.path(),
        Some(SHORT),
        &[("INSET_WORKERS", "3")],
    );
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    let (fa, fb) = (files(&dir.path().join("a")), files(&dir.path().join("b")));
    assert_eq!(fa.len(), 3 * 3 + 2);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        if name != "manifest.toml" {
            assert!(bytes == &fb[name], "{name} differs");
        }
    }
    let (ma, mb) = (
        manifest(&dir.path().join("a")),
        manifest(&dir.path().join("b")),
    );
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["artifacts"], mb["artifacts"]);
    let o = inset_env(
        &args("c"),
        dir.path(),
        Some(SHORT),
        &[("INSET_WORKERS", "zero")],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn raw_flag_adds_float_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let o = inset(
        &["sample", "--seeds", "1", "--raw", "--out", "r"],
        dir.path(),
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let raw = fs::read(dir.path().join("r/sample_0001.f64")).unwrap();
    let dims: Vec<u64> = (0..3)
        .map(|i| u64::from_le_bytes(raw[8 * i..8 * i + 8].try_into().unwrap()))
        .collect();
    assert_eq!(dims, [3, 256, 256]);
    assert_eq!(raw.len(), 24 + 8 * 3 * 256 * 256);
}

#[test]
fn diverging_optimization_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SHORT}lr_canvas = 1e300\nlr_inset = 1e300\n");
    let o = inset(
        &["joint", "--seeds", "0", "--out", "x"],
        dir.path(),
        Some(&cfg),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    let m = manifest(&dir.path().join("x"));
    assert_eq!(m["status"].as_str(), Some("failed"));
    assert!(dir.path().join("x/joint_0000_trace.csv").exists());
    let summary = fs::read_to_string(dir.path().join("x/joint_summary.csv")).unwrap();
    assert!(summary.contains(",aborted,"));
}

#[test]
fn walk_and_eval_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let walk = "[walk]\noptimize_keyframes = false\nframes = 4\nbudget = 2\ncyclic = false\n";
    let o = inset(
        &["walk", "--seeds", "0..1", "--out", "w"],
        dir.path(),
        Some(walk),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = files(&dir.path().join("w"));
    assert_eq!(out.keys().filter(|k| k.ends_with(".png")).count(), 4);
    let metrics = String::from_utf8(out["walk_metrics.csv"].clone()).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    let o = inset(
        &["walk", "--seeds", "0", "--out", "w1"],
        dir.path(),
        Some(walk),
    );
    assert_eq!(o.status.code(), Some(1));

    let eval = "[eval]\nreference_seeds = \"100..111\"\n";
    let o = inset(
        &["eval", "--seeds", "0..7", "--out", "e"],
        dir.path(),
        Some(eval),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("e/metrics.csv")).unwrap();
    let metrics: Vec<_> = report
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        metrics,
        ["fid", "precision", "recall", "seam_mean", "seam_max"]
    );
    for l in report.lines().skip(1) {
        let f: Vec<_> = l.split(',').collect();
        assert!(f[1].parse::<f64>().unwrap().is_finite());
        assert_eq!(f[2], "8");
    }
}

#[test]
fn printed_config_loads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let o = inset(
        &[
            "montage",
            "--print-config",
            "--seeds",
            "4,8",
            "--trunc",
            "0.6",
        ],
        dir.path(),
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = inset_cli::config::JobConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seeds, [4, 8]);
    assert_eq!(cfg.to_toml(), text);
}
