use serde::Serialize;
use wc4dvar_core::criteria::{
    build_criterion_operator, criterion_estimate, criterion_exact_with_limit, reconcile_constants, CriterionValue,
    Estimate, Method,
};
use wc4dvar_core::operators::SensorDesign;
use wc4dvar_core::traceest::LanczosOptions;
use wc4dvar_core::Error as CoreError;

use super::{build_model, mean, std_dev, Artifacts, Stopwatch};
use crate::config::{EstimatorName, ExperimentConfig, FormulationName};
use crate::output::csv_string;
use crate::record::{EstimateOutputs, EstimateRow, ExactValue, Outputs};

/// Relative SLQ/XNysTrace difference above which a sample size is flagged.
const DISCREPANCY: f64 = 0.01;

#[derive(Serialize)]
struct CsvRow<'a> {
    config_hash: &'a str,
    formulation: FormulationName,
    estimator: &'a str,
    samples: usize,
    trials: usize,
    exact_raw: Option<f64>,
    exact_phi: Option<f64>,
    mean: f64,
    std_dev: f64,
    mean_phi: Option<f64>,
    mean_rel_error: Option<f64>,
    std_rel_error: Option<f64>,
    mean_iterations: f64,
}

fn is_too_large(e: &CoreError) -> bool {
    matches!(e.root(), CoreError::TooLarge { .. })
}

pub fn estimate_eig(cfg: &ExperimentConfig) -> crate::error::Result<Artifacts> {
    let s = &cfg.estimate_eig;
    let mut clock = Stopwatch::start();
    let mp = build_model(cfg)?;
    let p = &mp.problem;
    let full = SensorDesign::full(p.dims().n_s());
    clock.lap("model");

    let lanczos = LanczosOptions {
        rel_tol: s.lanczos_rel_tol,
        max_iter: s.lanczos_max_iter,
        stop_rule: s.stop_rule.to_core(),
    };
    let mut samples = s.samples.clone();
    samples.sort_unstable();
    samples.dedup();
    let n_max = *samples.last().expect("validated");

    let mut exact_values = Vec::new();
    let mut rows = Vec::new();
    for &name in &s.formulations {
        let f = name.to_core();
        let op = build_criterion_operator(p, &full, f)?;
        let (exact, unavailable) = match criterion_exact_with_limit(&op, s.dense_limit) {
            Ok(v) => (Some(v), None),
            Err(e) if is_too_large(&e) => (None, Some(e.to_string())),
            Err(e) => return Err(e.into()),
        };
        let zero = CriterionValue {
            value: 0.0,
            formulation: f,
            convention: f.convention(),
            method: Method::ExactDense,
            inertia: None,
            diagnostics: None,
        };
        let offset = match reconcile_constants(&[zero], p, &full) {
            Ok(v) => Some(v[0]),
            Err(e) if is_too_large(&e) => None,
            Err(e) => return Err(e.into()),
        };
        let raw = exact.as_ref().map(|v| v.value);
        exact_values.push(ExactValue {
            formulation: name,
            raw,
            phi: raw.zip(offset).map(|(r, o)| r + o),
            offset,
            inertia: exact
                .as_ref()
                .and_then(|v| v.inertia)
                .map(|i| (i.positive, i.negative)),
            expected_inertia: op.expected_inertia(),
            unavailable,
        });
        clock.lap(format!("exact {}", f.name()));

        for &est in &s.estimators {
            if est == EstimatorName::Xnystrace && name != FormulationName::Preconditioned {
                continue;
            }
            // per sample size: values and iteration means over trials
            let mut values = vec![Vec::new(); samples.len()];
            let mut iterations = vec![Vec::new(); samples.len()];
            let mut single_std = vec![0.0; samples.len()];
            for t in 0..s.trials {
                let seed = cfg.seed.wrapping_add(t as u64);
                match est {
                    EstimatorName::Slq => {
                        let run = criterion_estimate(&op, &Estimate::Slq { samples: n_max, seed, lanczos })?;
                        let diag = run.diagnostics.expect("estimates carry diagnostics");
                        for (j, &n) in samples.iter().enumerate() {
                            let pre = diag.prefix(n)?;
                            values[j].push(pre.value);
                            iterations[j].push(pre.mean_iterations());
                            single_std[j] = pre.std_dev / (n as f64).sqrt();
                        }
                    }
                    EstimatorName::Xnystrace => {
                        for (j, &n) in samples.iter().enumerate() {
                            let run =
                                criterion_estimate(&op, &Estimate::XNysTrace { samples: n, seed, lanczos })?;
                            let diag = run.diagnostics.expect("estimates carry diagnostics");
                            values[j].push(run.value);
                            iterations[j].push(diag.mean_iterations());
                            single_std[j] = diag.std_dev / (n as f64).sqrt();
                        }
                    }
                }
            }
            for (j, &n) in samples.iter().enumerate() {
                let rel: Option<Vec<f64>> =
                    raw.map(|r| values[j].iter().map(|v| (v - r).abs() / r.abs()).collect());
                let m = mean(&values[j]);
                rows.push(EstimateRow {
                    formulation: name,
                    estimator: estimator_label(est).into(),
                    samples: n,
                    trials: s.trials,
                    mean: m,
                    std_dev: if s.trials > 1 { std_dev(&values[j]) } else { single_std[j] },
                    mean_phi: offset.map(|o| m + o),
                    mean_rel_error: rel.as_ref().map(|r| mean(r)),
                    std_rel_error: rel.as_ref().map(|r| std_dev(r)),
                    mean_iterations: mean(&iterations[j]),
                });
            }
            clock.lap(format!("{} {}", estimator_label(est), f.name()));
        }
    }

    let discrepancies = samples
        .iter()
        .copied()
        .filter(|&n| {
            let pick = |label: &str| {
                rows.iter()
                    .find(|r| r.formulation == FormulationName::Preconditioned && r.estimator == label && r.samples == n)
                    .map(|r| r.mean)
            };
            match (pick("slq"), pick("xnystrace")) {
                (Some(a), Some(b)) => (a - b).abs() > DISCREPANCY * b.abs(),
                _ => false,
            }
        })
        .collect();

    let hash = cfg.hash();
    let csv_rows: Vec<CsvRow> = rows
        .iter()
        .map(|r| {
            let ex = exact_values.iter().find(|e| e.formulation == r.formulation).expect("exact entry");
            CsvRow {
                config_hash: &hash,
                formulation: r.formulation,
                estimator: &r.estimator,
                samples: r.samples,
                trials: r.trials,
                exact_raw: ex.raw,
                exact_phi: ex.phi,
                mean: r.mean,
                std_dev: r.std_dev,
                mean_phi: r.mean_phi,
                mean_rel_error: r.mean_rel_error,
                std_rel_error: r.std_rel_error,
                mean_iterations: r.mean_iterations,
            }
        })
        .collect();
    let table = csv_string(&csv_rows)?;

    Ok(Artifacts {
        outputs: Outputs::EstimateEig(EstimateOutputs {
            problem: p.dims().into(),
            exact: exact_values,
            rows,
            discrepancies,
        }),
        files: vec![("table_estimates.csv".into(), table)],
        phases: clock.finish(),
        deferred: None,
    })
}

fn estimator_label(e: EstimatorName) -> &'static str {
    match e {
        EstimatorName::Slq => "slq",
        EstimatorName::Xnystrace => "xnystrace",
    }
}
