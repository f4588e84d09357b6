use std::fs;
use std::path::{Path, PathBuf};

use fmd_core::checkpoint;
use fmd_core::classifier::Classifier;
use fmd_core::counterfactual::{generate, CounterfactualResult, GuidanceConfig, GuidanceEvent};
use fmd_core::data::{self, Dataset};
use fmd_core::metrics::{self, FrechetMode};
use fmd_core::prior::{self, FmdPrior, FractionStats, TrainOutcome};
use fmd_core::{Error, Sample};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{self, RunConfig, TargetSpec};
use crate::{Cli, CliError, Command};

pub const RESOLVED_CONFIG: &str = "resolved-config.toml";

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = config::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    apply_flags(&mut cfg, &cli.command)?;
    cfg.validate()?;
    if cli.jobs == 0 {
        return Err(CliError::new("invalid-argument", "--jobs must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::new("invalid-argument", e.to_string()))?;
    pool.install(|| dispatch(&cfg, &cli.command, cli.force))
}

fn apply_flags(cfg: &mut RunConfig, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train { epochs: Some(e), .. } => cfg.train.epochs = *e,
        Command::Distill { phases, epochs, .. } => {
            if let Some(p) = phases {
                cfg.distill.phases = *p;
            }
            if let Some(e) = epochs {
                cfg.distill.optim.epochs = *e;
            }
        }
        Command::Classifier { epochs: Some(e), .. } => cfg.classifier.optim.epochs = *e,
        Command::Explain { target, scale, delta_t, mode, .. } => {
            if let Some(t) = target {
                cfg.guidance.target = TargetSpec::parse(t)?;
            }
            if let Some(s) = scale {
                cfg.guidance.scale = *s;
            }
            if delta_t.is_some() {
                cfg.guidance.delta_t = *delta_t;
            }
            if let Some(m) = mode {
                cfg.guidance.mode = m.parse()?;
            }
        }
        Command::Biomarker { top_pct: Some(p), .. } => cfg.biomarker.top_pct = *p,
        _ => {}
    }
    Ok(())
}

fn dispatch(cfg: &RunConfig, cmd: &Command, force: bool) -> Result<()> {
    match cmd {
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Synth { out } => {
            let out = prepare_out(out, force, cfg)?;
            synth(cfg, &out)
        }
        Command::Train { data, out, .. } => {
            let ds = data::read_dataset(data)?;
            let out = prepare_out(out, force, cfg)?;
            train(cfg, &ds, &out)
        }
        Command::Distill { checkpoint, data, out, .. } => {
            let teacher = checkpoint::load(checkpoint)?;
            let ds = data::read_dataset(data)?;
            let out = prepare_out(out, force, cfg)?;
            distill(cfg, &teacher, &ds, &out)
        }
        Command::Classifier { data, out, .. } => {
            let ds = data::read_dataset(data)?;
            let out = prepare_out(out, force, cfg)?;
            classifier(cfg, &ds, &out)
        }
        Command::Explain { checkpoint, classifier, input, out, .. } => {
            let prior = checkpoint::load(checkpoint)?;
            let clf = Classifier::load(classifier)?;
            let inputs = read_inputs(input)?;
            let out = prepare_out(out, force, cfg)?;
            explain(cfg, &prior, &clf, &inputs, &out)
        }
        Command::Evaluate { explained, classifier, data, out } => {
            let clf = Classifier::load(classifier)?;
            let results = read_explained(explained)?;
            let ds = data::read_dataset(data)?;
            let out = prepare_out(out, force, cfg)?;
            evaluate(cfg, &clf, &results, &ds, &out)
        }
        Command::Biomarker { explained, out, .. } => {
            let results = read_explained(explained)?;
            let out = prepare_out(out, force, cfg)?;
            biomarker(cfg, &results, &out)
        }
    }
}

/// Creates `out`, refusing a non-empty directory unless `force`, and writes
/// the resolved configuration into it.
fn prepare_out(out: &Path, force: bool, cfg: &RunConfig) -> Result<PathBuf> {
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::new(
                "output-exists",
                format!("{} exists and is not a directory", out.display()),
            ));
        }
        let non_empty = fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::new(
                "output-exists",
                format!("{} is not empty; pass --force to overwrite", out.display()),
            ));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    log::info!("resolved config:\n{}", cfg.to_toml());
    Ok(out.to_path_buf())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Format { path: path.to_path_buf(), message: e.to_string() }.into()
    })
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = data::zscore(&data::synth_generate(&cfg.synth_config())?)?;
    let manifest = data::write_dataset(&ds, out)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        ds.samples.len(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        out.display()
    );
    Ok(())
}

fn train_split(ds: &Dataset) -> Result<Vec<Sample>> {
    let train = ds.train();
    if train.is_empty() {
        return Err(CliError::new("invalid-argument", "dataset has an empty train split"));
    }
    Ok(train)
}

#[derive(Serialize)]
struct TrainReport<'a> {
    command: &'a str,
    phase: u32,
    step_size: usize,
    full_rollout_calls: usize,
    fractions: &'a [FractionStats],
}

fn train(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<()> {
    let train = train_split(ds)?;
    let (r, l) = train[0].shape();
    let (sched, layout) = cfg.schedule()?;
    let dcfg = cfg.denoiser_config(r, l);
    // fractions are independent; each has its own seeded stream
    let parts = (1..=layout.fractions())
        .into_par_iter()
        .map(|f| prior::train_fraction(&train, &cfg.train, &sched, &layout, &dcfg, cfg.seed, f))
        .collect::<fmd_core::Result<Vec<_>>>()?;
    let (nets, stats): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let prior = FmdPrior::new(sched.clone(), layout, nets, 0)?;
    checkpoint::save(&prior, out.join("prior.ckpt"))?;
    write_json(
        &out.join("train-stats.json"),
        &TrainReport {
            command: "train",
            phase: 0,
            step_size: 1,
            full_rollout_calls: sched.steps(),
            fractions: &stats,
        },
    )?;
    println!("trained {} fraction networks -> {}", stats.len(), out.join("prior.ckpt").display());
    Ok(())
}

fn distill(cfg: &RunConfig, teacher: &FmdPrior, ds: &Dataset, out: &Path) -> Result<()> {
    let train = train_split(ds)?;
    let mut current = teacher.clone();
    let mut reports = Vec::new();
    for _ in 0..cfg.distill.phases {
        let phase = current.phase() + 1;
        let seed = cfg.seed.wrapping_add(phase as u64);
        let parts = (1..=current.layout().fractions())
            .into_par_iter()
            .map(|f| prior::distill_fraction(&current, &train, &cfg.distill.optim, seed, f))
            .collect::<fmd_core::Result<Vec<_>>>()?;
        let (nets, stats): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        let next = FmdPrior::new(current.schedule().clone(), *current.layout(), nets, phase)?;
        let outcome = TrainOutcome { prior: next, stats };
        let path = out.join(format!("prior-phase{phase}.ckpt"));
        checkpoint::save(&outcome.prior, &path)?;
        let steps = outcome.prior.schedule().steps();
        reports.push(serde_json::json!({
            "phase": phase,
            "step_size": outcome.prior.step_size(),
            "full_rollout_calls": steps / outcome.prior.step_size(),
            "checkpoint": path.file_name().map(|n| n.to_string_lossy().into_owned()),
            "fractions": outcome.stats,
        }));
        println!(
            "phase {phase}: stride {} ({} calls per full rollout)",
            outcome.prior.step_size(),
            steps / outcome.prior.step_size()
        );
        current = outcome.prior;
    }
    checkpoint::save(&current, out.join("prior.ckpt"))?;
    write_json(
        &out.join("distill-stats.json"),
        &serde_json::json!({
            "command": "distill",
            "start_phase": teacher.phase(),
            "final_phase": current.phase(),
            "phases": reports,
        }),
    )
}

fn classifier(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<()> {
    let train = train_split(ds)?;
    let (r, l) = train[0].shape();
    let classes = ds.classes();
    let ccfg = cfg.classifier_config(classes, r, l);
    let (clf, losses) = Classifier::train(ccfg, &train, &cfg.classifier.optim, cfg.seed)?;
    clf.save(out.join("classifier.json"))?;
    let report = serde_json::json!({
        "command": "classifier",
        "classes": classes,
        "train_accuracy": clf.accuracy(&train)?,
        "val_accuracy": clf.accuracy(&ds.val())?,
        "test_accuracy": clf.accuracy(&ds.test())?,
        "epoch_losses": losses,
    });
    write_json(&out.join("classifier-stats.json"), &report)?;
    println!(
        "classifier test accuracy {:.3}",
        report["test_accuracy"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn read_inputs(path: &Path) -> Result<Vec<Sample>> {
    if path.is_dir() && path.join(data::MANIFEST).exists() {
        return Ok(data::read_dataset(path)?.test());
    }
    let samples = data::read_samples_any(path)?;
    if samples.is_empty() {
        return Err(CliError::new(
            "invalid-argument",
            format!("no samples in {}", path.display()),
        ));
    }
    Ok(samples)
}

/// One explained (input, target) pair as recorded in `explain.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExplainRecord {
    id: String,
    counterfactual_id: String,
    target: usize,
    source_prediction: usize,
    flipped: bool,
    target_posterior: f64,
    denoiser_calls: usize,
    delta_t: usize,
    seed: u64,
    trace: Vec<GuidanceEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Skipped {
    id: String,
    target: usize,
    reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExplainReport {
    command: String,
    scale: f64,
    mode: String,
    phase: u32,
    step_size: usize,
    results: Vec<ExplainRecord>,
    skipped: Vec<Skipped>,
}

enum Outcome {
    Done(Box<CounterfactualResult>, u64),
    Skipped(Skipped),
}

fn explain(
    cfg: &RunConfig,
    prior: &FmdPrior,
    clf: &Classifier,
    inputs: &[Sample],
    out: &Path,
) -> Result<()> {
    if inputs[0].shape() != prior.sample_shape() {
        return Err(Error::shape(
            format!("{:?}", prior.sample_shape()),
            format!("{:?} (sample {})", inputs[0].shape(), inputs[0].id),
        )
        .into());
    }
    let g = &cfg.guidance;
    if let TargetSpec::Class(c) = g.target {
        if c >= clf.classes() {
            return Err(CliError::new(
                "invalid-argument",
                format!("target {c} outside 0..{}", clf.classes()),
            ));
        }
    }
    let jobs: Vec<(usize, &Sample, usize)> = inputs
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((i, s, clf.predict(&s.values)?)))
        .collect::<fmd_core::Result<Vec<_>>>()?
        .into_iter()
        .flat_map(|(i, s, pred)| {
            g.target.targets(pred, clf.classes()).into_iter().map(move |t| (i, s, t))
        })
        .collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(i, sample, target)| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let gcfg = GuidanceConfig {
                scale: g.scale,
                delta_t: g.delta_t,
                target,
                seed,
                mode: g.mode,
            };
            match generate(prior, clf, sample, &gcfg) {
                Ok(r) => Ok(Outcome::Done(Box::new(r), seed)),
                Err(Error::AlreadyTarget(t)) => Ok(Outcome::Skipped(Skipped {
                    id: sample.id.clone(),
                    target: t,
                    reason: "input already classified as target".into(),
                })),
                Err(e) => Err(e),
            }
        })
        .collect::<fmd_core::Result<Vec<_>>>()?;

    let mut originals = Vec::new();
    let mut counterfactuals = Vec::new();
    let mut diffs = Vec::new();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Skipped(s) => {
                log::warn!("skipping {}: {}", s.id, s.reason);
                skipped.push(s);
            }
            Outcome::Done(r, seed) => {
                records.push(ExplainRecord {
                    id: r.original.id.clone(),
                    counterfactual_id: r.counterfactual.id.clone(),
                    target: r.target,
                    source_prediction: r.source_prediction,
                    flipped: r.flipped,
                    target_posterior: r.target_posterior,
                    denoiser_calls: r.denoiser_calls,
                    delta_t: r.delta_t,
                    seed,
                    trace: r.trace.clone(),
                });
                diffs.push(Sample::new(format!("{}-diff", r.counterfactual.id), None, r.diff.clone())?);
                originals.push(r.original.clone());
                counterfactuals.push(r.counterfactual.clone());
            }
        }
    }
    data::write_samples(&originals, out.join("originals.csv"))?;
    data::write_samples(&counterfactuals, out.join("counterfactuals.csv"))?;
    data::write_samples(&diffs, out.join("diffs.csv"))?;
    data::write_samples(&mean_diffs(&originals, &diffs)?, out.join("mean-diffs.csv"))?;
    let flipped = records.iter().filter(|r| r.flipped).count();
    write_json(
        &out.join("explain.json"),
        &ExplainReport {
            command: "explain".into(),
            scale: g.scale,
            mode: g.mode.to_string(),
            phase: prior.phase(),
            step_size: prior.step_size(),
            results: records,
            skipped,
        },
    )?;
    println!("{} counterfactuals, {} flipped", counterfactuals.len(), flipped);
    Ok(())
}

/// Averages the diff maps of each input over all of its targets; inputs keep
/// their first-seen order.
fn mean_diffs(originals: &[Sample], diffs: &[Sample]) -> Result<Vec<Sample>> {
    let mut groups: Vec<(String, fmd_core::Mat, usize)> = Vec::new();
    for (o, d) in originals.iter().zip(diffs) {
        match groups.iter_mut().find(|g| g.0 == o.id) {
            Some(g) => {
                g.1 += &d.values;
                g.2 += 1;
            }
            None => groups.push((o.id.clone(), d.values.clone(), 1)),
        }
    }
    groups
        .into_iter()
        .map(|(id, sum, n)| Ok(Sample::new(format!("{id}-mean-diff"), None, sum / n as f64)?))
        .collect()
}

fn read_explained(dir: &Path) -> Result<Vec<CounterfactualResult>> {
    let report: ExplainReport = read_json(&dir.join("explain.json"))?;
    let originals = data::read_samples(dir.join("originals.csv"))?;
    let counterfactuals = data::read_samples(dir.join("counterfactuals.csv"))?;
    let n = report.results.len();
    if originals.len() != n || counterfactuals.len() != n {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            message: format!(
                "{} records but {} originals and {} counterfactuals",
                n,
                originals.len(),
                counterfactuals.len()
            ),
        }
        .into());
    }
    if n == 0 {
        return Err(CliError::new(
            "invalid-argument",
            format!("{} holds no counterfactuals", dir.display()),
        ));
    }
    report
        .results
        .into_iter()
        .zip(originals.into_iter().zip(counterfactuals))
        .map(|(rec, (original, counterfactual))| {
            if original.id != rec.id || counterfactual.id != rec.counterfactual_id {
                return Err(Error::Format {
                    path: dir.to_path_buf(),
                    message: format!("sample order does not match record {}", rec.id),
                }
                .into());
            }
            if original.shape() != counterfactual.shape() {
                return Err(Error::shape(
                    format!("{:?}", original.shape()),
                    format!("{:?}", counterfactual.shape()),
                )
                .into());
            }
            let diff = &counterfactual.values - &original.values;
            Ok(CounterfactualResult {
                original,
                counterfactual,
                target: rec.target,
                source_prediction: rec.source_prediction,
                diff,
                denoiser_calls: rec.denoiser_calls,
                flipped: rec.flipped,
                target_posterior: rec.target_posterior,
                delta_t: rec.delta_t,
                trace: rec.trace,
            })
        })
        .collect()
}

fn evaluate(
    cfg: &RunConfig,
    clf: &Classifier,
    results: &[CounterfactualResult],
    ds: &Dataset,
    out: &Path,
) -> Result<()> {
    let train = train_split(ds)?;
    let thresholds = match cfg.evaluate.sparsity_threshold {
        Some(t) => vec![t],
        None => metrics::feature_std(&train)?,
    };
    let mode: FrechetMode = cfg.evaluate.frechet_mode;
    let (report, rows) = metrics::evaluate(results, clf, &train, &thresholds, mode)?;
    let sparsity_threshold = match cfg.evaluate.sparsity_threshold {
        Some(t) => serde_json::json!(t),
        None => serde_json::json!("train-feature-std"),
    };
    write_json(
        &out.join("metrics.json"),
        &serde_json::json!({
            "command": "evaluate",
            "report": report,
            "sparsity_threshold": sparsity_threshold,
            "reference": "train split",
        }),
    )?;
    let mut csv = String::from("id,target,proximity,sparsity,wasserstein_fc,flipped\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:?},{:?},{:?},{}\n",
            r.id, r.target, r.proximity, r.sparsity, r.wasserstein_fc, r.flipped
        ));
    }
    write_text(&out.join("per-sample.csv"), &csv)?;
    println!(
        "n={} flip_rate={:.3} proximity={:.3} sparsity={:.2}",
        report.n, report.flip_rate, report.proximity, report.sparsity
    );
    Ok(())
}

fn biomarker(cfg: &RunConfig, results: &[CounterfactualResult], out: &Path) -> Result<()> {
    let pairs: Vec<(Sample, Sample)> = results
        .iter()
        .map(|r| (r.original.clone(), r.counterfactual.clone()))
        .collect();
    let ranked = metrics::biomarker_map(&pairs, cfg.biomarker.top_pct)?;
    let mut csv = String::from("rank,region_a,region_b,score\n");
    for f in &ranked {
        csv.push_str(&format!("{},{},{},{:?}\n", f.rank, f.region_a, f.region_b, f.score));
    }
    write_text(&out.join("biomarkers.csv"), &csv)?;

    // probe on FC differences labelled by target class, seeded half split
    let mut feats = Vec::with_capacity(results.len());
    for r in results {
        let a = metrics::fc_features(&r.original.values)?;
        let b = metrics::fc_features(&r.counterfactual.values)?;
        feats.push((b.iter().zip(&a).map(|(x, y)| x - y).collect::<Vec<f64>>(), r.target));
    }
    let split = data::Split::seeded(feats.len(), cfg.seed);
    let order: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
    let (train_idx, test_idx) = order.split_at(order.len() / 2);
    let pick = |idx: &[usize]| idx.iter().map(|&i| feats[i].clone()).collect::<Vec<_>>();
    let (ptrain, ptest) = (pick(train_idx), pick(test_idx));
    let probe = match (
        metrics::logistic_probe(&ptrain, &ptest, &cfg.biomarker.probe),
        metrics::permutation_baseline(&ptrain, &ptest, &cfg.biomarker.probe, cfg.seed),
    ) {
        (Ok(p), Ok(b)) => serde_json::json!({ "probe": p, "permutation_baseline": b }),
        (Err(e), _) | (_, Err(e)) => {
            log::warn!("probe skipped: {e}");
            serde_json::json!({ "probe": null, "permutation_baseline": null, "skipped": e.to_string() })
        }
    };
    write_json(
        &out.join("probe.json"),
        &serde_json::json!({
            "command": "biomarker",
            "top_pct": cfg.biomarker.top_pct,
            "selected": ranked.len(),
            "pairs": pairs.len(),
            "result": probe,
        }),
    )?;
    println!("{} biomarker features selected from {} pairs", ranked.len(), pairs.len());
    Ok(())
}
