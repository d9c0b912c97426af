//! Persisted results. `result.json` holds only seeded quantities so that a
//! rerun reproduces it byte for byte; wall-clock times go to `timing.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FormulationName, SelectorName};
use crate::error::{HarnessError, Result};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub environment: Environment,
    pub outputs: Outputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub package: String,
    pub version: String,
    pub os: String,
    pub arch: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outputs {
    EstimateEig(EstimateOutputs),
    PlaceSensors(PlacementOutputs),
    Assimilate(AssimilationOutputs),
    GapStudy(GapOutputs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub d_s: usize,
    pub n_t: usize,
    pub n_s: usize,
    pub n_d: usize,
    pub n_m: usize,
}

impl From<wc4dvar_core::operators::ProblemDims> for ProblemSummary {
    fn from(d: wc4dvar_core::operators::ProblemDims) -> Self {
        Self {
            d_s: d.d_s(),
            n_t: d.n_t(),
            n_s: d.n_s(),
            n_d: d.n_d(),
            n_m: d.n_m(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOutputs {
    pub problem: ProblemSummary,
    pub exact: Vec<ExactValue>,
    pub rows: Vec<EstimateRow>,
    /// Sample sizes where SLQ and XNysTrace differ by more than 1%.
    pub discrepancies: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactValue {
    pub formulation: FormulationName,
    /// Raw log-determinant of the formulation's operator.
    pub raw: Option<f64>,
    /// Raw value plus the formulation's dropped constant.
    pub phi: Option<f64>,
    /// Constant added to raw values to obtain `Φ`.
    pub offset: Option<f64>,
    pub inertia: Option<(usize, usize)>,
    pub expected_inertia: (usize, usize),
    /// Reason the dense reference is missing.
    pub unavailable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub formulation: FormulationName,
    pub estimator: String,
    pub samples: usize,
    pub trials: usize,
    /// Mean over trials of the raw estimate.
    pub mean: f64,
    /// Across trials when there are several, otherwise the standard error of the one run.
    pub std_dev: f64,
    pub mean_phi: Option<f64>,
    pub mean_rel_error: Option<f64>,
    pub std_rel_error: Option<f64>,
    pub mean_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementOutputs {
    pub problem: ProblemSummary,
    pub per_k: Vec<PlacementForK>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementForK {
    pub k: usize,
    pub methods: Vec<MethodResult>,
    pub exhaustive: ExhaustiveOutcome,
    pub random: RandomSummary,
    pub histogram: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: SelectorName,
    pub design: Vec<usize>,
    pub phi: f64,
    pub percentile_random: f64,
    pub percentile_exhaustive: Option<f64>,
    pub bound: Option<BoundSummary>,
    /// Evolution adjoint applications (sketched selection only).
    pub transpose_applications: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub lower: f64,
    pub upper: f64,
    /// Missing when the selected block of singular vectors is singular.
    pub zeta: Option<f64>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExhaustiveOutcome {
    Enumerated { count: u64, best_design: Vec<usize>, best_value: f64 },
    Refused { count: String, budget: u64 },
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSummary {
    pub count: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssimilationOutputs {
    pub problem: ProblemSummary,
    pub data_noise_fraction: f64,
    pub true_model: bool,
    pub background_rel_error: f64,
    pub runs: Vec<SolveRun>,
    /// Preconditioned over unpreconditioned iterations, when both converged.
    pub iteration_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRun {
    pub preconditioner: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub u0_rel_error: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapOutputs {
    pub problem: ProblemSummary,
    pub k: usize,
    pub sc_reference: ReferenceDesign,
    pub rows: Vec<GapRow>,
    pub limit: LimitCheck,
    /// `Φ^SC(S_WC)` never rises by more than 1% from one α to the next.
    pub non_increasing: bool,
    /// The last value is within 5% of the reference.
    pub terminal_within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDesign {
    pub design: Vec<usize>,
    pub phi_sc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub alpha: f64,
    pub design: Vec<usize>,
    pub phi_sc: f64,
    pub phi: f64,
    pub gap: f64,
    pub upper: f64,
    pub sandwich_holds: bool,
    pub rel_to_reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitCheck {
    pub epsilon: f64,
    pub gap: f64,
}

impl ResultRecord {
    pub fn new(command: &str, config: &ExperimentConfig, outputs: Outputs) -> Self {
        Self {
            schema_version: RECORD_SCHEMA_VERSION,
            command: command.into(),
            config_hash: config.hash(),
            config: config.clone(),
            environment: Environment::current(),
            outputs,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: Self = serde_json::from_str(text)?;
        let found = rec.config.hash();
        if found != rec.config_hash {
            return Err(HarnessError::HashMismatch {
                expected: rec.config_hash,
                found,
            });
        }
        Ok(rec)
    }

    /// Loads a record and checks that it belongs to `expected_hash`.
    pub fn load_matching(path: &Path, expected_hash: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let rec = Self::from_json(&text)?;
        if rec.config_hash != expected_hash {
            return Err(HarnessError::HashMismatch {
                expected: expected_hash.into(),
                found: rec.config_hash,
            });
        }
        Ok(rec)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub command: String,
    pub config_hash: String,
    pub phases: Vec<(String, f64)>,
    pub total_seconds: f64,
}
