use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fmd_core::classifier::Classifier;
use fmd_core::{checkpoint, counterfactual, data};
use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
seed = 3

[schedule]
steps = 16
fractions = 4

[synth]
regions = 4
timepoints = 16
n_per_class = 20
block_size = 2

[denoiser]
hidden_dim = 16

[train]
epochs = 3

[distill]
phases = 2

[distill.optim]
epochs = 2

[classifier.optim]
epochs = 60

[biomarker.probe]
epochs = 50
"#;

fn fmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmd"))
        .args(args)
        .env_remove("FMD_CONFIG")
        .output()
        .expect("spawn fmd")
}

fn ok(args: &[&str]) -> Output {
    let out = fmd(args);
    assert!(
        out.status.success(),
        "fmd {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Asserts exit code 1 with a single `error[category]` line and returns the category.
fn fails(args: &[&str]) -> String {
    let out = fmd(args);
    assert_eq!(out.status.code(), Some(1), "fmd {args:?} should fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .find(|l| l.starts_with("error["))
        .unwrap_or_else(|| panic!("no error line in {stderr:?}"));
    assert_eq!(stderr.lines().filter(|l| l.starts_with("error[")).count(), 1);
    line["error[".len()..line.find(']').unwrap()].to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    _dir: TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Run { _dir: dir, root, config }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut full = vec!["--config", s(&self.config)];
        full.extend_from_slice(args);
        ok(&full)
    }

    /// synth → train → distill → classifier.
    fn prepare(&self) {
        self.run(&["synth", "--out", s(&self.p("data"))]);
        self.run(&["train", "--data", s(&self.p("data")), "--out", s(&self.p("prior"))]);
        self.run(&[
            "distill",
            "--checkpoint",
            s(&self.p("prior/prior.ckpt")),
            "--data",
            s(&self.p("data")),
            "--out",
            s(&self.p("distilled")),
        ]);
        self.run(&["classifier", "--data", s(&self.p("data")), "--out", s(&self.p("clf"))]);
    }

    fn explain(&self, out: &str, extra: &[&str]) {
        let (ckpt, clf, data, out) = (
            self.p("distilled/prior.ckpt"),
            self.p("clf/classifier.json"),
            self.p("data"),
            self.p(out),
        );
        let mut args = vec!["explain", "--checkpoint", s(&ckpt), "--classifier", s(&clf), "--input", s(&data)];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", s(&out)]);
        self.run(&args);
    }

    fn evaluate(&self, explained: &str, out: &str) -> Value {
        self.run(&[
            "evaluate",
            "--explained",
            s(&self.p(explained)),
            "--classifier",
            s(&self.p("clf/classifier.json")),
            "--data",
            s(&self.p("data")),
            "--out",
            s(&self.p(out)),
        ]);
        read_json(&self.p(out).join("metrics.json"))
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../schemas")
        .join(format!("{name}.schema.json"));
    jsonschema::validator_for(&read_json(&path)).unwrap()
}

fn assert_valid(name: &str, doc: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{name}: {errors:#?}");
}

fn checkpoint_header(path: &Path) -> Value {
    let bytes = fs::read(path).unwrap();
    let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    serde_json::from_slice(&bytes[4..4 + n]).unwrap()
}

#[test]
fn pipeline_outputs_match_schemas() {
    let r = Run::new();
    r.prepare();
    r.explain("cf", &[]);
    r.evaluate("cf", "eval");
    r.run(&["biomarker", "--explained", s(&r.p("cf")), "--out", s(&r.p("bio"))]);

    assert_valid("manifest", &read_json(&r.p("data/manifest.json")));
    assert_valid("train-stats", &read_json(&r.p("prior/train-stats.json")));
    assert_valid("distill-stats", &read_json(&r.p("distilled/distill-stats.json")));
    assert_valid("classifier", &read_json(&r.p("clf/classifier.json")));
    assert_valid("classifier-stats", &read_json(&r.p("clf/classifier-stats.json")));
    assert_valid("explain", &read_json(&r.p("cf/explain.json")));
    assert_valid("metrics", &read_json(&r.p("eval/metrics.json")));
    assert_valid("probe", &read_json(&r.p("bio/probe.json")));
    for ckpt in ["prior/prior.ckpt", "distilled/prior.ckpt", "distilled/prior-phase1.ckpt"] {
        assert_valid("checkpoint-header", &checkpoint_header(&r.p(ckpt)));
    }

    let stats = read_json(&r.p("distilled/distill-stats.json"));
    let calls: Vec<u64> = stats["phases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["full_rollout_calls"].as_u64().unwrap())
        .collect();
    assert_eq!(calls, [8, 4]);

    for dir in ["data", "prior", "distilled", "clf", "cf", "eval", "bio"] {
        assert!(r.p(dir).join("resolved-config.toml").exists(), "{dir}");
    }
    // diff is the rounded difference; adding it back is exact to an ulp
    let o = data::read_samples(r.p("cf/originals.csv")).unwrap();
    let c = data::read_samples(r.p("cf/counterfactuals.csv")).unwrap();
    let d = data::read_samples(r.p("cf/diffs.csv")).unwrap();
    assert_eq!(o.len(), d.len());
    for ((o, c), d) in o.iter().zip(&c).zip(&d) {
        assert_eq!(&c.values - &o.values, d.values);
        for ((o, d), c) in o.values.iter().zip(&d.values).zip(&c.values) {
            assert!((o + d - c).abs() <= f64::EPSILON * c.abs().max(o.abs()));
        }
    }
    let m = data::read_samples(r.p("cf/mean-diffs.csv")).unwrap();
    assert_eq!(m.len(), o.len(), "two classes: one target per input");
}

#[test]
fn resolved_config_reproduces_run() {
    let r = Run::new();
    r.run(&["synth", "--out", s(&r.p("a"))]);
    r.run(&["train", "--data", s(&r.p("a")), "--out", s(&r.p("ta"))]);
    // re-run from the echoed config only
    let echo = r.p("ta/resolved-config.toml");
    ok(&["--config", s(&echo), "synth", "--out", s(&r.p("b"))]);
    ok(&["--config", s(&echo), "train", "--data", s(&r.p("b")), "--out", s(&r.p("tb"))]);
    assert_eq!(fs::read(r.p("ta/prior.ckpt")).unwrap(), fs::read(r.p("tb/prior.ckpt")).unwrap());
    assert_eq!(
        fs::read(r.p("a/manifest.json")).unwrap(),
        fs::read(r.p("b/manifest.json")).unwrap()
    );
}

#[test]
fn seed_flag_changes_outputs() {
    let r = Run::new();
    r.run(&["synth", "--out", s(&r.p("a"))]);
    r.run(&["--seed", "99", "synth", "--out", s(&r.p("b"))]);
    let a = data::read_dataset(r.p("a")).unwrap();
    let b = data::read_dataset(r.p("b")).unwrap();
    assert_ne!(a.samples[0].values, b.samples[0].values);
    let echo = fs::read_to_string(r.p("b/resolved-config.toml")).unwrap();
    assert!(echo.contains("seed = 99"), "{echo}");
}

#[test]
fn scale_zero_matches_regeneration() {
    let r = Run::new();
    r.prepare();
    r.explain("cf0", &["--scale", "0"]);
    let metrics = r.evaluate("cf0", "eval0");

    let prior = checkpoint::load(r.p("distilled/prior.ckpt")).unwrap();
    let clf = Classifier::load(r.p("clf/classifier.json")).unwrap();
    let inputs = data::read_dataset(r.p("data")).unwrap().test();
    let counterfactuals = data::read_samples(r.p("cf0/counterfactuals.csv")).unwrap();
    let seed = 3u64;
    let delta_t = prior.schedule().steps() / 2;
    let (mut targeted, mut flipped, mut k) = (0, 0, 0);
    for (i, x) in inputs.iter().enumerate() {
        let source = clf.predict(&x.values).unwrap();
        let regen = counterfactual::regenerate(&prior, &x.values, delta_t, seed + i as u64).unwrap();
        assert_eq!(regen, counterfactuals[k].values, "sample {}", x.id);
        k += 1;
        targeted += 1;
        if clf.predict(&regen).unwrap() == 1 - source {
            flipped += 1;
        }
    }
    assert_eq!(k, counterfactuals.len());
    let expect = flipped as f64 / targeted as f64;
    assert_eq!(metrics["report"]["flip_rate"].as_f64().unwrap(), expect);
}

#[test]
fn refuses_to_overwrite_without_force() {
    let r = Run::new();
    r.run(&["synth", "--out", s(&r.p("d"))]);
    let before = fs::read(r.p("d/manifest.json")).unwrap();
    let cfg = s(&r.config);
    assert_eq!(fails(&["--config", cfg, "--seed", "5", "synth", "--out", s(&r.p("d"))]), "output-exists");
    assert_eq!(fs::read(r.p("d/manifest.json")).unwrap(), before);
    ok(&["--config", cfg, "--seed", "5", "--force", "synth", "--out", s(&r.p("d"))]);
    assert_ne!(fs::read(r.p("d/manifest.json")).unwrap(), before);

    // an existing empty directory is fine
    fs::create_dir(r.p("empty")).unwrap();
    ok(&["--config", cfg, "synth", "--out", s(&r.p("empty"))]);
}

#[test]
fn error_categories_are_distinct() {
    let r = Run::new();
    let cfg = s(&r.config);
    let missing = fails(&["--config", cfg, "train", "--data", "/definitely/not/here", "--out", s(&r.p("x"))]);
    let bad_key = fails(&["--config", cfg, "--set", "train.learning_rate=1", "config"]);
    let bad_value = fails(&["--config", cfg, "--set", "schedule.steps=30", "config"]);

    // a classifier for a different sample shape
    r.run(&["synth", "--out", s(&r.p("data"))]);
    r.run(&["train", "--data", s(&r.p("data")), "--out", s(&r.p("prior"))]);
    r.run(&["--set", "synth.regions=5", "synth", "--out", s(&r.p("other"))]);
    let shape = fails(&[
        "--config",
        cfg,
        "explain",
        "--checkpoint",
        s(&r.p("prior/prior.ckpt")),
        "--classifier",
        s(&r.p("nope.json")),
        "--input",
        s(&r.p("other")),
        "--out",
        s(&r.p("cf")),
    ]);
    assert_eq!(missing, "missing-file");
    assert_eq!(bad_key, "invalid-config");
    assert_eq!(bad_value, "invalid-config");
    assert_eq!(shape, "missing-file");

    r.run(&["classifier", "--data", s(&r.p("data")), "--out", s(&r.p("clf"))]);
    let shape = fails(&[
        "--config",
        cfg,
        "explain",
        "--checkpoint",
        s(&r.p("prior/prior.ckpt")),
        "--classifier",
        s(&r.p("clf/classifier.json")),
        "--input",
        s(&r.p("other")),
        "--out",
        s(&r.p("cf")),
    ]);
    assert_eq!(shape, "shape-mismatch");

    let mut trunc = fs::read(r.p("prior/prior.ckpt")).unwrap();
    trunc.truncate(trunc.len() - 7);
    fs::write(r.p("trunc.ckpt"), trunc).unwrap();
    let corrupt = fails(&[
        "--config",
        cfg,
        "distill",
        "--checkpoint",
        s(&r.p("trunc.ckpt")),
        "--data",
        s(&r.p("data")),
        "--out",
        s(&r.p("dx")),
    ]);
    assert_ne!(corrupt, "missing-file");
    assert_ne!(corrupt, shape);
}

#[test]
fn config_env_var_is_default_path() {
    let r = Run::new();
    let out = Command::new(env!("CARGO_BIN_EXE_fmd"))
        .arg("config")
        .env("FMD_CONFIG", &r.config)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 3"), "{text}");
    assert!(text.contains("steps = 16"), "{text}");

    // --set beats the file, flags beat --set
    let out = Command::new(env!("CARGO_BIN_EXE_fmd"))
        .args(["--set", "seed=11", "--set", "schedule.steps=32", "--seed", "12", "config"])
        .env("FMD_CONFIG", &r.config)
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 12") && text.contains("steps = 32"), "{text}");
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["quickstart.toml", "full-scale.toml"] {
        let out = ok(&["--config", s(&root.join(name)), "config"]);
        assert!(!out.stdout.is_empty());
    }
    let full = String::from_utf8(ok(&["--config", s(&root.join("full-scale.toml")), "config"]).stdout).unwrap();
    let v: toml::Table = full.parse().unwrap();
    assert_eq!(v["schedule"]["steps"].as_integer(), Some(1024));
    assert_eq!(v["distill"]["phases"].as_integer(), Some(7));
    assert_eq!(v["train"]["beta1"].as_float(), Some(0.5));
    assert_eq!(v["train"]["beta2"].as_float(), Some(0.9));
}

#[test]
fn jobs_do_not_change_training_outputs() {
    let r = Run::new();
    r.run(&["synth", "--out", s(&r.p("data"))]);
    r.run(&["--jobs", "1", "train", "--data", s(&r.p("data")), "--out", s(&r.p("t1"))]);
    r.run(&["--jobs", "3", "train", "--data", s(&r.p("data")), "--out", s(&r.p("t3"))]);
    assert_eq!(fs::read(r.p("t1/prior.ckpt")).unwrap(), fs::read(r.p("t3/prior.ckpt")).unwrap());
}

#[test]
fn manifest_with_pinned_features_matches_schema() {
    let cfg = data::SynthConfig { regions: 4, timepoints: 8, n_per_class: 5, block_size: 2, ..Default::default() };
    let mut samples = data::synth_samples(&cfg).unwrap();
    for x in &mut samples {
        x.values[(2, 3)] = 1.5;
    }
    let ds = data::zscore(&data::Dataset::new(samples, 0).unwrap()).unwrap();
    let dir = TempDir::new().unwrap();
    data::write_dataset(&ds, dir.path()).unwrap();
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["normalization"]["pinned"], serde_json::json!([[2, 3]]));
    assert_valid("manifest", &manifest);
}
