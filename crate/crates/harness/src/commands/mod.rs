mod assimilate;
mod estimate;
mod gap;
mod place;

use std::path::Path;
use std::time::Instant;

use wc4dvar_core::models::{export_ad_problem, export_heat_problem, ModelProblem};
use wc4dvar_core::selection::SvdMethod;

use crate::config::{ExperimentConfig, ModelSpec, SvdName};
use crate::error::{HarnessError, Result};
use crate::output::write_text;
use crate::record::{Outputs, ResultRecord, Timing};

pub use assimilate::assimilate;
pub use estimate::estimate_eig;
pub use gap::gap_study;
pub use place::place_sensors;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    EstimateEig,
    PlaceSensors,
    Assimilate,
    GapStudy,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::EstimateEig => "estimate-eig",
            Command::PlaceSensors => "place-sensors",
            Command::Assimilate => "assimilate",
            Command::GapStudy => "gap-study",
        }
    }
}

/// What a command produced before anything is written.
pub struct Artifacts {
    pub outputs: Outputs,
    /// File name and contents of each table or figure.
    pub files: Vec<(String, String)>,
    pub phases: Vec<(String, f64)>,
    /// A failure that is reported only after the outputs are saved.
    pub deferred: Option<HarnessError>,
}

pub struct Outcome {
    pub record: ResultRecord,
    pub deferred: Option<HarnessError>,
}

/// Runs a command and writes `result.json`, its tables and `timing.json` into `out`.
pub fn run(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    cfg.validate_for(command)?;
    let start = Instant::now();
    let artifacts = match command {
        Command::EstimateEig => estimate_eig(cfg)?,
        Command::PlaceSensors => place_sensors(cfg)?,
        Command::Assimilate => assimilate(cfg)?,
        Command::GapStudy => gap_study(cfg)?,
    };
    let total_seconds = start.elapsed().as_secs_f64();
    let record = ResultRecord::new(command.name(), cfg, artifacts.outputs);

    std::fs::create_dir_all(out).map_err(|source| HarnessError::Write {
        path: out.to_path_buf(),
        source,
    })?;
    write_text(&out.join("result.json"), &record.to_json()?)?;
    for (name, body) in &artifacts.files {
        write_text(&out.join(name), body)?;
    }
    let timing = Timing {
        command: command.name().into(),
        config_hash: record.config_hash.clone(),
        phases: artifacts.phases,
        total_seconds,
    };
    write_text(&out.join("timing.json"), &(serde_json::to_string_pretty(&timing)? + "\n"))?;
    Ok(Outcome {
        record,
        deferred: artifacts.deferred,
    })
}

pub(crate) fn build_model(cfg: &ExperimentConfig) -> Result<ModelProblem> {
    Ok(match cfg.model_spec() {
        ModelSpec::Heat(c) => export_heat_problem(&c, cfg.seed)?,
        ModelSpec::Ad(c) => export_ad_problem(&c)?,
    })
}

pub(crate) fn svd_method(name: SvdName, seed: u64) -> SvdMethod {
    match name {
        SvdName::Randomized => SvdMethod::Randomized {
            oversampling: 10,
            power_iterations: 2,
            seed,
        },
        SvdName::GolubKahan => SvdMethod::GolubKahan { extra_steps: 10, seed },
    }
}

/// Collects named wall-clock phases.
pub(crate) struct Stopwatch {
    last: Instant,
    phases: Vec<(String, f64)>,
}

impl Stopwatch {
    pub fn start() -> Self {
        Self {
            last: Instant::now(),
            phases: Vec::new(),
        }
    }

    pub fn lap(&mut self, name: impl Into<String>) {
        let now = Instant::now();
        self.phases.push((name.into(), (now - self.last).as_secs_f64()));
        self.last = now;
    }

    pub fn finish(self) -> Vec<(String, f64)> {
        self.phases
    }
}

pub(crate) fn join_design(d: &[usize]) -> String {
    d.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub(crate) fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
