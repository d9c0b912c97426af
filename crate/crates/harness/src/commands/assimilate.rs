use serde::Serialize;
use wc4dvar_core::assimilation::{
    map_solve, simulate_observations, wc_cost, DAProblem, Preconditioner, SolverOptions,
};
use wc4dvar_core::models::with_scaled_identity_model_error;
use wc4dvar_core::Error as CoreError;

use super::{build_model, Artifacts, Stopwatch};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::output::csv_string;
use crate::record::{AssimilationOutputs, Outputs, SolveRun};

#[derive(Serialize)]
struct CsvRow<'a> {
    config_hash: &'a str,
    preconditioner: &'a str,
    converged: bool,
    iterations: usize,
    final_residual: f64,
    u0_rel_error: f64,
    background_rel_error: f64,
    cost: f64,
}

pub fn assimilate(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let s = &cfg.assimilate;
    let mut clock = Stopwatch::start();
    let mp = build_model(cfg)?;
    let noise = s
        .data_noise_fraction
        .unwrap_or_else(|| cfg.model_spec().noise_fraction());
    let data = simulate_observations(&mp.truth, &mp.true_initial, mp.problem.observation(), noise, cfg.seed)?;
    let y = &data.observations;

    let mut p = if s.use_true_model {
        let base = &mp.problem;
        DAProblem::new(
            mp.truth.clone(),
            base.observation().clone(),
            base.background().clone(),
            base.background_mean().clone(),
            base.model_error().blocks().to_vec(),
            base.noise().blocks().to_vec(),
        )?
    } else {
        mp.problem.clone()
    };
    if let Some(eps) = s.model_error_epsilon {
        p = with_scaled_identity_model_error(&p, eps)?;
    }
    clock.lap("model");

    let d = p.dims().d_s();
    let truth_norm = mp.true_initial.norm();
    let rel_to_truth = |u0: wc4dvar_core::Vector| (u0 - &mp.true_initial).norm() / truth_norm;
    let background_rel_error = rel_to_truth(p.background_mean().clone());

    let mut runs = Vec::new();
    let mut deferred = None;
    for (name, pc) in [
        ("forecast_prior", Preconditioner::ForecastPrior),
        ("none", Preconditioner::None),
    ] {
        let opts = SolverOptions {
            tol: s.tol,
            max_iter: s.max_iter,
            preconditioner: pc,
        };
        let (u, converged, iterations, final_residual) = match map_solve(&p, y, &opts) {
            Ok(r) => (r.map_estimate, true, r.iterations, r.final_residual),
            Err(e) => match e.root() {
                CoreError::NotConverged {
                    iterations,
                    residual,
                    best,
                } => {
                    let out = ((**best).clone(), false, *iterations, *residual);
                    deferred.get_or_insert(HarnessError::Numerical(e));
                    out
                }
                _ => return Err(e.into()),
            },
        };
        runs.push(SolveRun {
            preconditioner: name.into(),
            converged,
            iterations,
            final_residual,
            u0_rel_error: rel_to_truth(u.rows(0, d).into_owned()),
            cost: wc_cost(&p, &u, y)?,
        });
        clock.lap(format!("solve {name}"));
    }
    let iteration_ratio = (runs.iter().all(|r| r.converged) && runs[1].iterations > 0)
        .then(|| runs[0].iterations as f64 / runs[1].iterations as f64);

    let hash = cfg.hash();
    let rows: Vec<CsvRow> = runs
        .iter()
        .map(|r| CsvRow {
            config_hash: &hash,
            preconditioner: &r.preconditioner,
            converged: r.converged,
            iterations: r.iterations,
            final_residual: r.final_residual,
            u0_rel_error: r.u0_rel_error,
            background_rel_error,
            cost: r.cost,
        })
        .collect();
    let table = csv_string(&rows)?;

    Ok(Artifacts {
        outputs: Outputs::Assimilate(AssimilationOutputs {
            problem: p.dims().into(),
            data_noise_fraction: noise,
            true_model: s.use_true_model,
            background_rel_error,
            runs,
            iteration_ratio,
        }),
        files: vec![("table_assimilation.csv".into(), table)],
        phases: clock.finish(),
        deferred,
    })
}
