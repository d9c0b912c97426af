//! Experiment configuration: one JSON document with a versioned schema.
//! Unknown keys are rejected, and everything is validated before any
//! numerical work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wc4dvar_core::criteria::Formulation;
use wc4dvar_core::models::{AdModelConfig, HeatModelConfig};
use wc4dvar_core::traceest::StopRule;

use crate::commands::Command;
use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "heat1d")]
    Heat1d,
    #[serde(rename = "ad2d")]
    Ad2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelKind,
    #[serde(default)]
    pub scale: Scale,
    /// Root seed. Trial `t` of a repeated estimate uses `seed + t`.
    pub seed: u64,
    #[serde(default)]
    pub heat1d: HeatOverrides,
    #[serde(default)]
    pub ad2d: AdOverrides,
    #[serde(default)]
    pub estimate_eig: EstimateSettings,
    #[serde(default)]
    pub place_sensors: PlacementSettings,
    #[serde(default)]
    pub assimilate: AssimilationSettings,
    #[serde(default)]
    pub gap_study: GapSettings,
}

/// Optional changes to the built-in 1D heat parameters of the chosen scale.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatOverrides {
    pub n_cells: Option<usize>,
    pub n_t: Option<usize>,
    pub steps_per_window: Option<usize>,
    pub n_sensors: Option<usize>,
    pub n_error_samples: Option<usize>,
    pub noise_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdOverrides {
    pub n_vertices: Option<usize>,
    pub n_t: Option<usize>,
    pub n_steps: Option<usize>,
    pub sensor_grid: Option<usize>,
    pub alpha: Option<f64>,
    pub noise_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulationName {
    Preconditioned,
    Unpreconditioned,
    SaddleI,
    SaddleIi,
}

impl FormulationName {
    pub fn to_core(self) -> Formulation {
        match self {
            FormulationName::Preconditioned => Formulation::Preconditioned,
            FormulationName::Unpreconditioned => Formulation::Unpreconditioned,
            FormulationName::SaddleI => Formulation::SaddleI,
            FormulationName::SaddleIi => Formulation::SaddleII,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorName {
    Slq,
    Xnystrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRuleName {
    QuadratureChange,
    TraceChange,
}

impl StopRuleName {
    pub fn to_core(self) -> StopRule {
        match self {
            StopRuleName::QuadratureChange => StopRule::QuadratureChange,
            StopRuleName::TraceChange => StopRule::TraceChange,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSettings {
    pub formulations: Vec<FormulationName>,
    pub estimators: Vec<EstimatorName>,
    pub samples: Vec<usize>,
    pub trials: usize,
    pub lanczos_rel_tol: f64,
    pub lanczos_max_iter: Option<usize>,
    pub stop_rule: StopRuleName,
    /// Largest operator densified for the exact reference.
    pub dense_limit: usize,
}

impl Default for EstimateSettings {
    fn default() -> Self {
        Self {
            formulations: vec![
                FormulationName::Preconditioned,
                FormulationName::Unpreconditioned,
                FormulationName::SaddleI,
                FormulationName::SaddleIi,
            ],
            estimators: vec![EstimatorName::Slq, EstimatorName::Xnystrace],
            samples: vec![8],
            trials: 1,
            lanczos_rel_tol: 1e-10,
            lanczos_max_iter: None,
            stop_rule: StopRuleName::QuadratureChange,
            dense_limit: wc4dvar_core::criteria::DEFAULT_DENSE_LIMIT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorName {
    Gks,
    Raf,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustiveMode {
    /// Enumerate when the count fits the budget, otherwise record a refusal.
    #[default]
    Auto,
    /// Enumerate or fail with a budget refusal.
    Required,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdName {
    #[default]
    Randomized,
    GolubKahan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementSettings {
    pub k: Vec<usize>,
    pub methods: Vec<SelectorName>,
    pub svd: SvdName,
    pub raf_oversampling: usize,
    pub random_designs: usize,
    pub exhaustive: ExhaustiveMode,
    pub exhaustive_budget: u64,
    pub histogram_bins: usize,
}

impl Default for PlacementSettings {
    fn default() -> Self {
        Self {
            k: vec![5],
            methods: vec![SelectorName::Gks, SelectorName::Raf, SelectorName::Greedy],
            svd: SvdName::Randomized,
            raf_oversampling: 20,
            random_designs: 1000,
            exhaustive: ExhaustiveMode::Auto,
            exhaustive_budget: 200_000,
            histogram_bins: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssimilationSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Noise added to the synthetic data; defaults to the model's noise fraction.
    pub data_noise_fraction: Option<f64>,
    /// Assimilate with the model that generated the data.
    pub use_true_model: bool,
    /// Replace every model-error block by `ε I`.
    pub model_error_epsilon: Option<f64>,
}

impl Default for AssimilationSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 20_000,
            data_noise_fraction: None,
            use_true_model: false,
            model_error_epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapSettings {
    pub alphas: Vec<f64>,
    pub k: usize,
    pub raf_oversampling: usize,
    /// Model-error variance of the near-strong-constraint check.
    pub limit_epsilon: f64,
}

impl Default for GapSettings {
    fn default() -> Self {
        Self {
            alphas: vec![0.05, 0.03, 0.02, 0.01],
            k: 10,
            raf_oversampling: 20,
            limit_epsilon: 1e-10,
        }
    }
}

/// Model parameters after applying scale and overrides.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Heat(HeatModelConfig),
    Ad(AdModelConfig),
}

impl ModelSpec {
    pub fn n_sensors(&self) -> usize {
        match self {
            ModelSpec::Heat(c) => c.n_sensors,
            ModelSpec::Ad(c) => c.sensor_grid * c.sensor_grid,
        }
    }

    pub fn noise_fraction(&self) -> f64 {
        match self {
            ModelSpec::Heat(c) => c.noise_fraction,
            ModelSpec::Ad(c) => c.noise_fraction,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the command-line overrides.
    pub fn load(path: &Path, seed: Option<u64>, scale: Option<Scale>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(s) = scale {
            cfg.scale = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn model_spec(&self) -> ModelSpec {
        match self.model {
            ModelKind::Heat1d => {
                let mut c = match self.scale {
                    Scale::Desk => HeatModelConfig::desk(),
                    Scale::Paper => HeatModelConfig::paper(),
                };
                let o = &self.heat1d;
                c.n_cells = o.n_cells.unwrap_or(c.n_cells);
                c.n_t = o.n_t.unwrap_or(c.n_t);
                c.steps_per_window = o.steps_per_window.unwrap_or(c.steps_per_window);
                c.n_sensors = o.n_sensors.unwrap_or(c.n_sensors);
                c.n_error_samples = o.n_error_samples.unwrap_or(c.n_error_samples);
                c.noise_fraction = o.noise_fraction.unwrap_or(c.noise_fraction);
                ModelSpec::Heat(c)
            }
            ModelKind::Ad2d => {
                let mut c = match self.scale {
                    Scale::Desk => AdModelConfig::desk(),
                    Scale::Paper => AdModelConfig::paper(),
                };
                let o = &self.ad2d;
                c.n_vertices = o.n_vertices.unwrap_or(c.n_vertices);
                c.n_t = o.n_t.unwrap_or(c.n_t);
                c.n_steps = o.n_steps.unwrap_or(c.n_steps);
                c.sensor_grid = o.sensor_grid.unwrap_or(c.sensor_grid);
                c.alpha = o.alpha.unwrap_or(c.alpha);
                c.noise_fraction = o.noise_fraction.unwrap_or(c.noise_fraction);
                ModelSpec::Ad(c)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let spec = self.model_spec();
        match &spec {
            ModelSpec::Heat(c) => {
                if c.n_cells < 2 || c.n_t == 0 || c.steps_per_window == 0 || c.n_sensors == 0 {
                    return fail("heat1d sizes must be positive (n_cells ≥ 2)".into());
                }
                if c.n_cells as f64 * c.epsilon < 8.0 - 1e-9 {
                    return fail(format!("heat1d n_cells = {} does not resolve ε = {}", c.n_cells, c.epsilon));
                }
                if c.n_error_samples < 2 {
                    return fail("heat1d needs at least two model-error samples".into());
                }
            }
            ModelSpec::Ad(c) => {
                if c.n_vertices < 3 || c.sensor_grid == 0 || c.n_t == 0 {
                    return fail("ad2d sizes must be positive (n_vertices ≥ 3)".into());
                }
                if c.n_steps % c.n_t != 0 {
                    return fail(format!("ad2d n_steps = {} is not a multiple of n_t = {}", c.n_steps, c.n_t));
                }
                if !(c.alpha > 0.0) {
                    return fail("ad2d alpha must be positive".into());
                }
            }
        }
        if !(spec.noise_fraction() > 0.0) {
            return fail("noise_fraction must be positive".into());
        }

        let e = &self.estimate_eig;
        if e.formulations.is_empty() || e.estimators.is_empty() || e.samples.is_empty() {
            return fail("estimate_eig needs formulations, estimators and sample sizes".into());
        }
        if e.trials == 0 || e.samples.contains(&0) {
            return fail("estimate_eig trials and sample sizes must be positive".into());
        }
        if e.estimators.contains(&EstimatorName::Xnystrace) && e.samples.iter().any(|&n| n < 2) {
            return fail("xnystrace needs at least two samples".into());
        }
        if !(e.lanczos_rel_tol > 0.0) || e.lanczos_max_iter == Some(0) {
            return fail("Lanczos tolerance and iteration cap must be positive".into());
        }

        let p = &self.place_sensors;
        if p.k.is_empty() || p.methods.is_empty() {
            return fail("place_sensors needs k values and methods".into());
        }
        if p.k.contains(&0) {
            return fail("place_sensors k must be positive".into());
        }
        if p.random_designs == 0 || p.histogram_bins == 0 {
            return fail("place_sensors needs random designs and histogram bins".into());
        }

        let a = &self.assimilate;
        if !(a.tol > 0.0) || a.max_iter == 0 {
            return fail("assimilate tolerance and iteration cap must be positive".into());
        }
        if a.data_noise_fraction.is_some_and(|f| !(f >= 0.0)) {
            return fail("data_noise_fraction must be nonnegative".into());
        }
        if a.model_error_epsilon.is_some_and(|eps| !(eps > 0.0)) {
            return fail("model_error_epsilon must be positive".into());
        }

        let g = &self.gap_study;
        if g.alphas.is_empty() || g.alphas.iter().any(|&x| !(x > 0.0)) {
            return fail("gap_study alphas must be positive".into());
        }
        if g.k == 0 {
            return fail("gap_study k must be positive".into());
        }
        if !(g.limit_epsilon > 0.0) {
            return fail("gap_study limit_epsilon must be positive".into());
        }
        Ok(())
    }

    /// General checks plus those that depend on the command.
    pub fn validate_for(&self, command: Command) -> Result<()> {
        self.validate()?;
        let n_s = self.model_spec().n_sensors();
        match command {
            Command::PlaceSensors => {
                if let Some(&k) = self.place_sensors.k.iter().find(|&&k| k > n_s) {
                    return Err(HarnessError::Config(format!("place_sensors k = {k} exceeds {n_s} candidates")));
                }
            }
            Command::GapStudy => {
                if self.model != ModelKind::Ad2d {
                    return Err(HarnessError::Config("gap-study needs the ad2d model".into()));
                }
                if self.gap_study.k > n_s {
                    return Err(HarnessError::Config(format!(
                        "gap_study k = {} exceeds {n_s} candidates",
                        self.gap_study.k
                    )));
                }
            }
            Command::EstimateEig | Command::Assimilate => {}
        }
        Ok(())
    }
}
