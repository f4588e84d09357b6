//! Plain-Rust side of the browser demo. Every entry point returns a JSON
//! string so the same code runs under native tests and behind wasm-bindgen.

use fmd_core::classifier::{Classifier, ClassifierConfig, ClassifierKind, FeatureMap};
use fmd_core::counterfactual::{self, GuidanceConfig, GuidanceMode};
use fmd_core::data::{self, SynthConfig};
use fmd_core::denoiser::DenoiserConfig;
use fmd_core::metrics;
use fmd_core::optim::TrainConfig;
use fmd_core::prior::{self, FmdPrior};
use fmd_core::schedule::{FractionLayout, NoiseSchedule, ScheduleKind};
use fmd_core::{Error, Mat, Sample};
use serde_json::{json, Value};

pub type DemoResult<T> = std::result::Result<T, String>;

fn fail(e: Error) -> String {
    format!("{}: {e}", e.category())
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// JSON has no infinities; the log-SNR is infinite at both ends of the grid.
fn finite(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

pub fn parse_kind(kind: &str) -> DemoResult<ScheduleKind> {
    match kind {
        "cosine" => Ok(ScheduleKind::Cosine),
        "linear-lambda" => Ok(ScheduleKind::LinearLambda),
        _ => Err(format!("invalid-argument: unknown schedule {kind:?}")),
    }
}

/// `alpha_t`, `sigma_t` and `lambda_t` for every `t` in `0..=steps`.
pub fn schedule_curves(steps: usize, kind: &str) -> DemoResult<String> {
    let sched = NoiseSchedule::new(steps, parse_kind(kind)?).map_err(fail)?;
    let doc = json!({
        "steps": steps,
        "kind": kind,
        "alpha": sched.alphas(),
        "sigma": sched.sigmas(),
        "lambda": sched.lambdas().iter().map(|v| finite(*v)).collect::<Vec<_>>(),
    });
    Ok(doc.to_string())
}

/// Denoiser calls per distillation phase: a full rollout from `T`, and one
/// per-fraction counterfactual from depth `delta_t`. Phases whose stride no
/// longer fits a fraction are reported but marked unusable.
pub fn call_budget(steps: usize, fractions: usize, phases: u32, delta_t: usize) -> DemoResult<String> {
    let layout = FractionLayout::new(steps, fractions).map_err(fail)?;
    if delta_t == 0 || delta_t > steps {
        return Err(format!("invalid-argument: delta_t {delta_t} outside 1..={steps}"));
    }
    let mut out = Vec::new();
    for phase in 0..=phases.min(usize::BITS - 1) {
        let k = 1usize << phase;
        let usable = k <= layout.len();
        let on_grid = usable && delta_t.is_multiple_of(k);
        out.push(json!({
            "phase": phase,
            "step_size": k,
            "usable": usable,
            "full_rollout_calls": if usable { json!(steps / k) } else { Value::Null },
            "counterfactual_calls": if on_grid {
                json!(counterfactual::expected_calls(steps, fractions, k, delta_t))
            } else {
                Value::Null
            },
        }));
    }
    let doc = json!({
        "steps": steps,
        "fractions": fractions,
        "fraction_len": layout.len(),
        "delta_t": delta_t,
        "phases": out,
    });
    Ok(doc.to_string())
}

/// Sizes of the in-browser model; small enough to train in a few seconds.
#[derive(Debug, Clone)]
pub struct DemoConfig {
    pub seed: u64,
    pub regions: usize,
    pub timepoints: usize,
    pub n_per_class: usize,
    pub steps: usize,
    pub fractions: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub phases: u32,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            seed: 0,
            regions: 4,
            timepoints: 16,
            n_per_class: 40,
            steps: 32,
            fractions: 4,
            hidden: 32,
            epochs: 60,
            phases: 1,
        }
    }
}

/// Synthetic data, a fraction-wise prior and a linear classifier on FC
/// features, trained once and reused for every explanation request.
pub struct DemoModel {
    prior: FmdPrior,
    clf: Classifier,
    inputs: Vec<Sample>,
    test_accuracy: f64,
}

impl DemoModel {
    pub fn train(cfg: &DemoConfig) -> DemoResult<Self> {
        let synth = SynthConfig {
            regions: cfg.regions,
            timepoints: cfg.timepoints,
            n_per_class: cfg.n_per_class,
            block_size: (cfg.regions / 2).max(1),
            seed: cfg.seed,
            ..Default::default()
        };
        let ds = data::zscore(&data::synth_generate(&synth).map_err(fail)?).map_err(fail)?;
        let train = ds.train();
        let sched = NoiseSchedule::new(cfg.steps, ScheduleKind::Cosine).map_err(fail)?;
        let layout = FractionLayout::new(cfg.steps, cfg.fractions).map_err(fail)?;
        let dcfg = DenoiserConfig { hidden_dim: cfg.hidden, seed: cfg.seed, ..DenoiserConfig::dense(cfg.regions, cfg.timepoints) };
        let tcfg = TrainConfig { epochs: cfg.epochs, lr: 3e-3, batch: 16, final_lr_fraction: 0.1, ..Default::default() };
        let mut prior = prior::train_fractions(&train, &tcfg, &sched, &layout, &dcfg, cfg.seed).map_err(fail)?.prior;
        for phase in 1..=cfg.phases {
            prior = prior::distill_phase(&prior, &train, &tcfg, cfg.seed + phase as u64).map_err(fail)?.prior;
        }

        let ccfg = ClassifierConfig {
            kind: ClassifierKind::SoftmaxLinear,
            feature_map: FeatureMap::FcFeatures,
            classes: 2,
            hidden: 0,
            regions: cfg.regions,
            timepoints: cfg.timepoints,
        };
        let ocfg = TrainConfig { epochs: 100, lr: 1e-2, batch: 16, ..Default::default() };
        let clf = Classifier::train(ccfg, &train, &ocfg, cfg.seed).map_err(fail)?.0;
        let inputs = ds.test();
        let test_accuracy = clf.accuracy(&inputs).map_err(fail)?;
        Ok(DemoModel { prior, clf, inputs, test_accuracy })
    }

    pub fn summary(&self) -> String {
        let (regions, timepoints) = self.prior.sample_shape();
        json!({
            "regions": regions,
            "timepoints": timepoints,
            "steps": self.prior.schedule().steps(),
            "fractions": self.prior.layout().fractions(),
            "phase": self.prior.phase(),
            "step_size": self.prior.step_size(),
            "inputs": self.inputs.len(),
            "test_accuracy": self.test_accuracy,
        })
        .to_string()
    }

    /// Counterfactual for test input `index`, aimed at the class it is not
    /// currently assigned to. `delta_t = 0` picks the default depth.
    pub fn explain(&self, index: usize, scale: f64, delta_t: usize, mode: &str, seed: u64) -> DemoResult<String> {
        let x = self
            .inputs
            .get(index)
            .ok_or_else(|| format!("invalid-argument: input {index} of {}", self.inputs.len()))?;
        let mode: GuidanceMode = mode.parse().map_err(fail)?;
        let source = self.clf.predict(&x.values).map_err(fail)?;
        let cfg = GuidanceConfig {
            scale,
            delta_t: (delta_t > 0).then_some(delta_t),
            mode,
            ..GuidanceConfig::new(1 - source, seed)
        };
        let r = counterfactual::generate(&self.prior, &self.clf, x, &cfg).map_err(fail)?;
        let fc = |m: &Mat| metrics::fc_matrix(m).map(|f| rows(&f.values)).map_err(fail);
        let doc = json!({
            "id": x.id,
            "label": x.label,
            "source_prediction": r.source_prediction,
            "target": r.target,
            "flipped": r.flipped,
            "target_posterior": r.target_posterior,
            "denoiser_calls": r.denoiser_calls,
            "delta_t": r.delta_t,
            "proximity": metrics::proximity(&r.original, &r.counterfactual).map_err(fail)?,
            "original": rows(&r.original.values),
            "counterfactual": rows(&r.counterfactual.values),
            "diff": rows(&r.diff),
            "fc_original": fc(&r.original.values)?,
            "fc_counterfactual": fc(&r.counterfactual.values)?,
            "trace": r.trace,
        });
        Ok(doc.to_string())
    }
}
