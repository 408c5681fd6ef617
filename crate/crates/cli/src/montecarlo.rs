//! `montecarlo`: rerun one estimator on fresh simulations and compare it
//! with the truth implied by the design.

use qiv_core::additive::fit_linear_2sls;
use qiv_core::late::{estimate_late, estimate_mte, LateModel, LateOptions, PopulationMoments};
use qiv_core::montecarlo::{run_monte_carlo, Draw, MonteCarloConfig};
use qiv_core::quantile_solver::evaluate;
use qiv_core::{Dataset, Error};
use serde_json::{json, Value};

use crate::commands::{additive_solution, bootstrap_config, quantile_solution, to_value};
use crate::config::{AdditiveEstimator, Estimator, MonteCarloArgs};
use crate::failure::Failure;
use crate::input::{Input, Model};
use crate::warnings;

type Replicate<'a> = Box<dyn Fn(&Dataset) -> qiv_core::Result<Vec<Draw>> + Sync + 'a>;

const QUANTILE_LEVELS: [f64; 3] = [0.25, 0.5, 0.75];

fn mismatch(est: &Estimator, model: &Model) -> Failure {
    Failure::schema(format!(
        "montecarlo {} has no truth for a {} design",
        est.name(),
        model.kind()
    ))
}

fn cell_label(d: usize, w: usize) -> String {
    format!("h(d={},w={})", d + 1, w + 1)
}

/// Named truths and the per-replication estimator.
fn plan<'a>(
    est: &'a Estimator,
    model: &'a Model,
) -> Result<(Vec<(String, f64)>, Replicate<'a>), Failure> {
    Ok(match (est, model) {
        (Estimator::FitLinear(_), Model::Additive(m)) => {
            let h = &m.spec().h;
            let effects: Vec<f64> = (0..h[0].len()).map(|w| h[1][w] - h[0][w]).collect();
            if h.len() != 2 || effects.iter().any(|e| (e - effects[0]).abs() > 1e-12) {
                warnings::push(
                    "treatment effect varies with W; beta_D truth taken at the first W code",
                );
            }
            let replicate: Replicate = Box::new(|data| {
                let fit = fit_linear_2sls(data)?;
                Ok(vec![Draw {
                    value: fit.beta_d(),
                    se: Some(fit.beta_d_se()),
                }])
            });
            (vec![("beta_D".to_string(), effects[0])], replicate)
        }
        (Estimator::FitAdditive(p), Model::Additive(m)) => {
            if p.method == AdditiveEstimator::LinearGmm {
                return Err(mismatch(est, model));
            }
            let s = m.supports();
            let mut truths = Vec::new();
            for w in 0..s.w_card {
                for d in 0..s.d_card {
                    truths.push((cell_label(d, w), m.h(d, w)));
                }
            }
            for z in 0..s.z_card {
                truths.push((format!("g(z={})", z + 1), m.g(z)));
            }
            let replicate: Replicate = Box::new(move |data| {
                let sol = additive_solution(data, p)?;
                Ok(sol
                    .h_hat
                    .iter()
                    .chain(&sol.g_hat)
                    .map(|&value| Draw { value, se: None })
                    .collect())
            });
            (truths, replicate)
        }
        (Estimator::FitLate(p), Model::Late(m)) => {
            let s = m.supports();
            let idx = |code: u32, card: usize| -> Result<usize, Failure> {
                (1..=card as u32)
                    .contains(&code)
                    .then(|| code as usize - 1)
                    .ok_or_else(|| Failure::schema(format!("code {code} outside 1..={card}")))
            };
            let (w, w1, z) = (
                idx(p.w0, s.w_card)?,
                idx(p.w1, s.w_card)?,
                idx(p.z, s.z_card)?,
            );
            let moments = PopulationMoments::new(m);
            let truth = LateModel::new(&moments, p.epsilon)?.late(w, w1, z)?.late;
            let opts = LateOptions {
                epsilon: p.epsilon,
                bootstrap: bootstrap_config(&p.bootstrap),
            };
            let replicate: Replicate = Box::new(move |data| {
                let e = estimate_late(data, w, w1, z, &opts)?;
                Ok(vec![Draw {
                    value: e.late,
                    se: e.se,
                }])
            });
            (vec![("late".to_string(), truth)], replicate)
        }
        (Estimator::FitMte(p), Model::Late(m)) => {
            let s = m.supports();
            if !(1..=s.w_card as u32).contains(&p.w) || !(1..=s.z_card as u32).contains(&p.z) {
                return Err(Failure::schema("--w or --z outside the design's support"));
            }
            let (w, z) = (p.w as usize - 1, p.z as usize - 1);
            let moments = PopulationMoments::new(m);
            let curve = LateModel::new(&moments, p.epsilon)?.mte(w, z, &p.grid, p.step)?;
            let kept: Vec<usize> = (0..curve.points.len())
                .filter(|&i| curve.points[i].value.is_some())
                .collect();
            if kept.is_empty() {
                return Err(Failure::schema(
                    "no MTE point is evaluable at population moments",
                ));
            }
            let truths = kept
                .iter()
                .map(|&i| {
                    (
                        format!("mte(p={})", curve.points[i].p),
                        curve.points[i].value.unwrap(),
                    )
                })
                .collect();
            let opts = LateOptions {
                epsilon: p.epsilon,
                bootstrap: bootstrap_config(&p.bootstrap),
            };
            let replicate: Replicate = Box::new(move |data| {
                let c = estimate_mte(data, w, z, &p.grid, p.step, &opts)?;
                kept.iter()
                    .map(|&i| {
                        let pt = &c.points[i];
                        let value = pt.value.ok_or_else(|| {
                            Error::InvalidInput("MTE point lost in replication".into())
                        })?;
                        Ok(Draw { value, se: pt.se })
                    })
                    .collect()
            });
            (truths, replicate)
        }
        (Estimator::SolveQuantile(p), Model::Quantile(m)) => {
            let s = m.supports();
            let mut truths = Vec::new();
            for w in 0..s.w_card {
                for d in 0..s.d_card {
                    for u in QUANTILE_LEVELS {
                        truths.push((format!("{}(u={u})", cell_label(d, w)), m.h(d, w, u)));
                    }
                }
            }
            let replicate: Replicate = Box::new(move |data| {
                let sol = quantile_solution(Input::Sample(data.clone()), p)?;
                let mut draws = Vec::new();
                for w in 0..s.w_card {
                    for d in 0..s.d_card {
                        for u in QUANTILE_LEVELS {
                            draws.push(Draw {
                                value: evaluate(&sol, d, w, u)?,
                                se: None,
                            });
                        }
                    }
                }
                Ok(draws)
            });
            (truths, replicate)
        }
        _ => return Err(mismatch(est, model)),
    })
}

pub fn run(a: &MonteCarloArgs) -> Result<Value, Failure> {
    let model = Model::from_choice(&a.dgp)?;
    let cfg = MonteCarloConfig {
        reps: a.reps,
        seed: a.seed.expect("validated"),
        level: a.level,
    };
    let (truths, replicate) = plan(&a.estimator, &model)?;
    let named: Vec<(&str, f64)> = truths.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let report = run_monte_carlo(&cfg, &named, |seed| replicate(&model.simulate(a.n, seed)?))?;
    if report.failed > 0 {
        warnings::push(format!(
            "{} of {} replications failed",
            report.failed, report.reps
        ));
    }
    Ok(json!({
        "estimator": a.estimator.name(),
        "design": model.kind(),
        "n": a.n,
        "report": to_value(&report)?,
        "table": report.render_table(),
    }))
}
