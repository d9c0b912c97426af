use serde::Serialize;
use wc4dvar_core::criteria::{build_criterion_operator, dense_criterion_factor, Formulation, GramEvaluator};
use wc4dvar_core::operators::SensorDesign;
use wc4dvar_core::selection::{
    binomial, enumerate_designs, gks_bound, gks_select, greedy_select, percentile, raf_select, random_design_sample,
    GksOptions, RafOptions,
};
use wc4dvar_core::Error as CoreError;

use super::{build_model, join_design, mean, svd_method, Artifacts, Stopwatch};
use crate::config::{ExhaustiveMode, ExperimentConfig, SelectorName};
use crate::error::Result;
use crate::output::{csv_string, histogram_svg, Marker};
use crate::record::{
    BoundSummary, ExhaustiveOutcome, MethodResult, Outputs, PlacementForK, PlacementOutputs, RandomSummary,
};

const BOUND_SLACK: f64 = 1e-8;

#[derive(Serialize)]
struct CsvRow<'a> {
    config_hash: &'a str,
    k: usize,
    method: &'a str,
    design: String,
    phi: f64,
    percentile_random: Option<f64>,
    percentile_exhaustive: Option<f64>,
    bound_lower: Option<f64>,
    bound_upper: Option<f64>,
}

fn label(m: SelectorName) -> &'static str {
    match m {
        SelectorName::Gks => "gks",
        SelectorName::Raf => "raf",
        SelectorName::Greedy => "greedy",
    }
}

pub fn place_sensors(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let s = &cfg.place_sensors;
    let mut clock = Stopwatch::start();
    let mp = build_model(cfg)?;
    let p = &mp.problem;
    let dims = p.dims();
    let (n_s, nb) = (dims.n_s(), dims.n_blocks());
    let full = SensorDesign::full(n_s);
    let a = dense_criterion_factor(p, &full)?;
    let g = GramEvaluator::from_factor(&a, n_s, nb);
    let op = build_criterion_operator(p, &full, Formulation::Preconditioned)?;
    let factor = op.factor().expect("preconditioned operator has a factor").clone();
    let svd = svd_method(s.svd, cfg.seed);
    clock.lap("model");

    let hash = cfg.hash();
    let mut per_k = Vec::new();
    let mut csv_rows = Vec::new();
    let mut files = Vec::new();
    for &k in &s.k {
        let mut picks = Vec::new();
        for &m in &s.methods {
            let (design, transposes) = match m {
                SelectorName::Gks => {
                    let opts = GksOptions { svd_rank: None, svd };
                    (gks_select(factor.clone(), n_s, nb, k, &opts)?.design, None)
                }
                SelectorName::Raf => {
                    let opts = RafOptions {
                        oversampling: s.raf_oversampling,
                        sketch_rows: None,
                        seed: cfg.seed,
                        svd,
                    };
                    let r = raf_select(p, k, &opts)?;
                    (r.selection.design, Some(r.transpose_applications))
                }
                SelectorName::Greedy => (greedy_select(&g, k)?.design, None),
            };
            picks.push((m, design, transposes));
            clock.lap(format!("{} k={k}", label(m)));
        }

        let exhaustive_pop = match s.exhaustive {
            ExhaustiveMode::Off => None,
            ExhaustiveMode::Required => Some(enumerate_designs(&g, k, s.exhaustive_budget as u128)?),
            ExhaustiveMode::Auto => match enumerate_designs(&g, k, s.exhaustive_budget as u128) {
                Ok(all) => Some(all),
                Err(CoreError::BudgetExceeded { .. }) => None,
                Err(e) => return Err(e.into()),
            },
        };
        let exhaustive = match (&exhaustive_pop, s.exhaustive) {
            (Some(all), _) => {
                let (best_design, best_value) = all
                    .iter()
                    .fold(None::<&(Vec<usize>, f64)>, |acc, x| match acc {
                        Some(b) if b.1 >= x.1 => Some(b),
                        _ => Some(x),
                    })
                    .cloned()
                    .expect("nonempty enumeration");
                ExhaustiveOutcome::Enumerated {
                    count: all.len() as u64,
                    best_design,
                    best_value,
                }
            }
            (None, ExhaustiveMode::Off) => ExhaustiveOutcome::Skipped,
            (None, _) => ExhaustiveOutcome::Refused {
                count: binomial(n_s, k).to_string(),
                budget: s.exhaustive_budget,
            },
        };
        clock.lap(format!("exhaustive k={k}"));

        let random = random_design_sample(&g, k, s.random_designs, cfg.seed)?;
        let rvals: Vec<f64> = random.iter().map(|x| x.1).collect();
        clock.lap(format!("random k={k}"));

        let mut methods = Vec::new();
        for (m, design, transposes) in picks {
            let phi = g.evaluate(&design)?;
            let bound = if m == SelectorName::Greedy {
                None
            } else {
                match gks_bound(&a, n_s, nb, &design) {
                    Ok(b) => Some(BoundSummary {
                        lower: b.lower,
                        upper: b.upper,
                        zeta: b.zeta.is_finite().then_some(b.zeta),
                        holds: b.lower <= phi + BOUND_SLACK && phi <= b.upper + BOUND_SLACK,
                    }),
                    Err(e) if matches!(e, CoreError::TooLarge { .. } | CoreError::InvalidArgument(_)) => None,
                    Err(e) => return Err(e.into()),
                }
            };
            methods.push(MethodResult {
                method: m,
                design: design.indices().to_vec(),
                phi,
                percentile_random: percentile(&random, design.indices(), phi),
                percentile_exhaustive: exhaustive_pop.as_ref().map(|all| percentile(all, design.indices(), phi)),
                bound,
                transpose_applications: transposes,
            });
        }

        let histogram = format!("hist_k{k}.svg");
        let markers: Vec<Marker> = methods
            .iter()
            .map(|m| Marker {
                label: label(m.method).to_uppercase(),
                value: m.phi,
            })
            .collect();
        let title = format!("k = {k}, {} random designs", rvals.len());
        files.push((histogram.clone(), histogram_svg(&title, &rvals, s.histogram_bins, &markers, &hash)));

        for m in &methods {
            csv_rows.push(CsvRow {
                config_hash: &hash,
                k,
                method: label(m.method),
                design: join_design(&m.design),
                phi: m.phi,
                percentile_random: Some(m.percentile_random),
                percentile_exhaustive: m.percentile_exhaustive,
                bound_lower: m.bound.as_ref().map(|b| b.lower),
                bound_upper: m.bound.as_ref().map(|b| b.upper),
            });
        }
        if let ExhaustiveOutcome::Enumerated { best_design, best_value, .. } = &exhaustive {
            csv_rows.push(CsvRow {
                config_hash: &hash,
                k,
                method: "exhaustive",
                design: join_design(best_design),
                phi: *best_value,
                percentile_random: None,
                percentile_exhaustive: None,
                bound_lower: None,
                bound_upper: None,
            });
        }

        per_k.push(PlacementForK {
            k,
            methods,
            exhaustive,
            random: RandomSummary {
                count: rvals.len(),
                min: rvals.iter().copied().fold(f64::INFINITY, f64::min),
                mean: mean(&rvals),
                max: rvals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            },
            histogram,
        });
    }
    files.push(("table_designs.csv".into(), csv_string(&csv_rows)?));

    Ok(Artifacts {
        outputs: Outputs::PlaceSensors(PlacementOutputs {
            problem: dims.into(),
            per_k,
        }),
        files,
        phases: clock.finish(),
        deferred: None,
    })
}
