//! Declarative run configuration: built-in defaults, then a TOML or JSON
//! file, then `--set key=value` overrides, then dedicated flags.

use std::fs;
use std::path::Path;

use fmd_core::classifier::{ClassifierConfig, ClassifierKind, FeatureMap};
use fmd_core::counterfactual::{GuidanceMode, DEFAULT_SCALE};
use fmd_core::data::SynthConfig;
use fmd_core::denoiser::{Arch, DenoiserConfig};
use fmd_core::metrics::FrechetMode;
use fmd_core::optim::TrainConfig;
use fmd_core::schedule::{FractionLayout, NoiseSchedule, ScheduleKind};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Threads through every random choice of every command.
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub synth: SynthSection,
    pub denoiser: DenoiserSection,
    pub train: TrainConfig,
    pub distill: DistillSection,
    pub classifier: ClassifierSection,
    pub guidance: GuidanceSection,
    pub evaluate: EvaluateSection,
    pub biomarker: BiomarkerSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub fractions: usize,
    pub kind: ScheduleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub regions: usize,
    pub timepoints: usize,
    pub classes: usize,
    pub n_per_class: usize,
    pub class_rho: Vec<f64>,
    pub block_size: usize,
    pub ar: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub arch: Arch,
    pub hidden_dim: usize,
    pub time_embed_dim: usize,
    pub window_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub phases: u32,
    pub optim: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub kind: ClassifierKind,
    pub feature_map: FeatureMap,
    pub hidden: usize,
    pub optim: TrainConfig,
}

/// `"all"` (every class except the current prediction) or a class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    Class(usize),
    Keyword(String),
}

impl TargetSpec {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s.parse::<usize>() {
            Ok(c) => Ok(TargetSpec::Class(c)),
            Err(_) => {
                let t = TargetSpec::Keyword(s.to_string());
                t.validate()?;
                Ok(t)
            }
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        match self {
            TargetSpec::Keyword(k) if k != "all" => Err(CliError::config(format!(
                "guidance.target must be a class index or \"all\", got {k:?}"
            ))),
            _ => Ok(()),
        }
    }

    /// Target classes for an input currently predicted as `predicted`.
    pub fn targets(&self, predicted: usize, classes: usize) -> Vec<usize> {
        match self {
            TargetSpec::Class(c) => vec![*c],
            TargetSpec::Keyword(_) => (0..classes).filter(|&c| c != predicted).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub scale: f64,
    /// Omitted means `T / 2`.
    pub delta_t: Option<usize>,
    pub target: TargetSpec,
    pub mode: GuidanceMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub frechet_mode: FrechetMode,
    /// Scalar sparsity threshold; omitted means the per-feature training std.
    pub sparsity_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiomarkerSection {
    pub top_pct: f64,
    pub probe: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            schedule: ScheduleSection::default(),
            synth: SynthSection::default(),
            denoiser: DenoiserSection::default(),
            train: TrainConfig {
                epochs: 40,
                lr: 1e-3,
                batch: 16,
                final_lr_fraction: 0.1,
                ..TrainConfig::default()
            },
            distill: DistillSection::default(),
            classifier: ClassifierSection::default(),
            guidance: GuidanceSection::default(),
            evaluate: EvaluateSection::default(),
            biomarker: BiomarkerSection::default(),
        }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { steps: 64, fractions: 4, kind: ScheduleKind::Cosine }
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            regions: s.regions,
            timepoints: s.timepoints,
            classes: s.classes,
            n_per_class: s.n_per_class,
            class_rho: s.class_rho,
            block_size: s.block_size,
            ar: s.ar,
            noise_std: s.noise_std,
        }
    }
}

impl Default for DenoiserSection {
    fn default() -> Self {
        DenoiserSection { arch: Arch::Dense, hidden_dim: 128, time_embed_dim: 16, window_len: 8 }
    }
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            phases: 3,
            optim: TrainConfig {
                epochs: 10,
                lr: 1e-3,
                batch: 16,
                final_lr_fraction: 0.1,
                ..TrainConfig::default()
            },
        }
    }
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            kind: ClassifierKind::SoftmaxLinear,
            feature_map: FeatureMap::FcFeatures,
            hidden: 16,
            optim: TrainConfig { epochs: 200, lr: 1e-2, batch: 32, ..TrainConfig::default() },
        }
    }
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            scale: DEFAULT_SCALE,
            delta_t: None,
            target: TargetSpec::Keyword("all".into()),
            mode: GuidanceMode::PerFraction,
        }
    }
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { frechet_mode: FrechetMode::Full, sparsity_threshold: None }
    }
}

impl Default for BiomarkerSection {
    fn default() -> Self {
        BiomarkerSection {
            top_pct: 5.0,
            probe: TrainConfig { epochs: 300, lr: 0.05, ..TrainConfig::default() },
        }
    }
}

impl RunConfig {
    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            regions: s.regions,
            timepoints: s.timepoints,
            classes: s.classes,
            n_per_class: s.n_per_class,
            seed: self.seed,
            class_rho: s.class_rho.clone(),
            block_size: s.block_size,
            ar: s.ar,
            noise_std: s.noise_std,
        }
    }

    pub fn denoiser_config(&self, regions: usize, timepoints: usize) -> DenoiserConfig {
        let d = &self.denoiser;
        DenoiserConfig {
            arch: d.arch,
            hidden_dim: d.hidden_dim,
            time_embed_dim: d.time_embed_dim,
            window_len: d.window_len,
            regions,
            timepoints,
            seed: self.seed,
        }
    }

    pub fn classifier_config(&self, classes: usize, regions: usize, timepoints: usize) -> ClassifierConfig {
        let c = &self.classifier;
        ClassifierConfig {
            kind: c.kind,
            feature_map: c.feature_map,
            classes,
            hidden: c.hidden,
            regions,
            timepoints,
        }
    }

    pub fn schedule(&self) -> Result<(NoiseSchedule, FractionLayout), CliError> {
        let s = &self.schedule;
        Ok((NoiseSchedule::new(s.steps, s.kind)?, FractionLayout::new(s.steps, s.fractions)?))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: fmd_core::Error| CliError::config(e.to_string());
        self.synth_config().validate().map_err(invalid)?;
        self.schedule().map_err(|e| CliError::config(e.message))?;
        for t in [&self.train, &self.distill.optim, &self.classifier.optim, &self.biomarker.probe] {
            t.validate().map_err(invalid)?;
        }
        self.guidance.target.validate()?;
        if !(self.guidance.scale >= 0.0 && self.guidance.scale.is_finite()) {
            return Err(CliError::config(format!("guidance.scale {} must be >= 0", self.guidance.scale)));
        }
        if !(self.biomarker.top_pct > 0.0 && self.biomarker.top_pct <= 100.0) {
            return Err(CliError::config(format!(
                "biomarker.top_pct {} outside (0, 100]",
                self.biomarker.top_pct
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises to TOML")
    }
}

fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = fs::read_to_string(path).map_err(|e| fmd_core::Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let table: toml::Table = serde_json::from_value(value)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Ok(table)
    } else {
        text.parse::<toml::Table>()
            .map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `a.b.c=value`; the value is read as a TOML literal and falls
/// back to a plain string.
fn parse_set(spec: &str) -> Result<toml::Table, CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got {spec:?}")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("bad key in --set {spec:?}")));
    }
    let last = parts.pop().expect("split yields one part");
    let mut table = toml::Table::new();
    table.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = toml::Table::new();
        outer.insert(p.to_string(), toml::Value::Table(table));
        table = outer;
    }
    Ok(table)
}

pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
    let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialise");
    if let Some(p) = path {
        merge(&mut table, read_table(p)?);
    }
    for s in sets {
        merge(&mut table, parse_set(s)?);
    }
    let cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn set_overrides_and_unknown_keys() {
        let cfg = load(None, &["train.lr=0.5".into(), "guidance.target=1".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.guidance.target, TargetSpec::Class(1));
        let err = load(None, &["train.learning_rate=1".into()]).unwrap_err();
        assert_eq!(err.category, "invalid-config");
        assert!(load(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn target_keyword() {
        assert_eq!(TargetSpec::parse("all").unwrap().targets(1, 3), vec![0, 2]);
        assert!(TargetSpec::parse("other").is_err());
    }
}
