//! One function per subcommand, each returning its results payload.

use qiv_core::additive::{
    compare_linear, fit_discrete_additive, fit_polynomial_gmm, AdditiveSolution,
};
use qiv_core::dgp::{population_law, DiscreteQuantileDGP};
use qiv_core::late::{
    build_irrelevance_graph, estimate_late, estimate_mte, estimate_propensity, BootstrapConfig,
    LateModel, LateOptions, PopulationMoments,
};
use qiv_core::pwl::unit_grid;
use qiv_core::quantile_solver::{empirical_law, solve_grid_with, QuantileSolution, SolverOptions};
use qiv_core::relevance::{
    build_m_additive, estimated_propensities, rank_check, sweep_rank, Bases, POPULATION_RANK_TOL,
    SAMPLE_RANK_TOL,
};
use qiv_core::{Dataset, Error};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{
    AdditiveEstimator, AdditiveParams, BootstrapParams, Command, FitAdditiveArgs, FitLateArgs,
    FitLinearArgs, FitMteArgs, LateParams, MteParams, QuantileParams, RelevanceArgs, RunConfig,
    SimulateArgs, SolveQuantileArgs,
};
use crate::failure::Failure;
use crate::input::{write_atomic, Input, Model};
use crate::warnings;

pub fn execute(cfg: &RunConfig) -> Result<Value, Failure> {
    match &cfg.command {
        Command::Simulate(a) => simulate(cfg, a),
        Command::DiagnoseRelevance(a) => diagnose_relevance(a),
        Command::SolveQuantile(a) => solve_quantile(cfg, a),
        Command::FitAdditive(a) => fit_additive(a),
        Command::FitLinear(a) => fit_linear(a),
        Command::FitLate(a) => fit_late(a),
        Command::FitMte(a) => fit_mte(cfg, a),
        Command::Montecarlo(a) => crate::montecarlo::run(a),
    }
}

pub fn to_value(x: &impl Serialize) -> Result<Value, Failure> {
    serde_json::to_value(x).map_err(|e| Failure::from(Error::from(e)))
}

/// Identification failures become `identified: false` results; any other
/// error propagates.
fn verdict(result: qiv_core::Result<Value>) -> Result<Value, Failure> {
    match result {
        Ok(Value::Object(mut map)) => {
            map.insert("identified".into(), Value::Bool(true));
            Ok(Value::Object(map))
        }
        Ok(v) => Ok(json!({ "identified": true, "value": v })),
        Err(e) if e.is_identification_failure() => {
            let report = match &e {
                Error::NotIdentified {
                    report: Some(r), ..
                } => to_value(r)?,
                _ => Value::Null,
            };
            Ok(json!({ "identified": false, "reason": e.to_string(), "rank_report": report }))
        }
        Err(e) => Err(e.into()),
    }
}

/// 0-based positions in LATE outputs become the 1-based codes of the CSV.
pub fn to_codes(v: &mut Value) {
    const INDEX_KEYS: [&str; 9] = [
        "w",
        "w_prime",
        "z",
        "from",
        "to",
        "a",
        "b",
        "w_tilde",
        "w_tilde_prime",
    ];
    match v {
        Value::Object(map) => {
            for (k, x) in map.iter_mut() {
                match x {
                    Value::Number(n) if INDEX_KEYS.contains(&k.as_str()) => {
                        *x = match n.as_u64() {
                            Some(i) => json!(i + 1),
                            None => json!(n.as_f64().unwrap_or(f64::NAN) + 1.0),
                        };
                    }
                    _ => to_codes(x),
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(to_codes),
        _ => {}
    }
}

fn code_to_index(code: u32, card: usize, name: &str) -> Result<usize, Failure> {
    if code == 0 || code as usize > card {
        return Err(Failure::schema(format!(
            "{name} code {code} outside 1..={card}"
        )));
    }
    Ok(code as usize - 1)
}

fn simulate(cfg: &RunConfig, a: &SimulateArgs) -> Result<Value, Failure> {
    let model = Model::from_choice(&a.dgp)?;
    let seed = a.seed.expect("validated");
    let data = model.simulate(a.n, seed)?;
    let csv = data.to_csv_string()?;
    let path = match &a.out {
        Some(p) => p.clone(),
        None => cfg.output_path("data.csv").expect("validated"),
    };
    write_atomic(&path, csv.as_bytes())?;
    let s = data.supports();
    Ok(json!({
        "design": model.kind(),
        "rows": data.len(),
        "supports": { "d": s.d_card, "w": s.w_card, "z": s.z_card },
        "csv": path,
        "csv_sha256": crate::sha256_hex(csv.as_bytes()),
    }))
}

fn z_marginal(data: &Dataset) -> Vec<f64> {
    let mut m = vec![0.0; data.supports().z_card];
    for (wt, row) in data.iter_weighted() {
        m[row.z as usize - 1] += wt;
    }
    let total = data.total_weight();
    m.iter().map(|x| x / total).collect()
}

fn diagnose_relevance(a: &RelevanceArgs) -> Result<Value, Failure> {
    if a.grid < 2 {
        return Err(Failure::schema("--grid needs at least two levels"));
    }
    let additive = |probs: Vec<Vec<Vec<f64>>>, zm: Vec<f64>, tol: f64| -> Result<Value, Failure> {
        let report = rank_check(&build_m_additive(&probs, &zm)?, tol)?;
        Ok(json!({
            "matrix": "additive",
            "verdict": report.verdict,
            "flagged": usize::from(!report.verdict),
            "report": report,
        }))
    };
    match Input::resolve(&a.source)? {
        Input::Population(Model::Quantile(dgp)) => {
            let tol = a.tol.unwrap_or(POPULATION_RANK_TOL);
            let sweep = sweep_rank(&dgp, &unit_grid(a.grid), tol)?;
            let points: Vec<Value> = sweep
                .points
                .iter()
                .map(|(u, r)| {
                    json!({
                        "u": u,
                        "verdict": r.verdict,
                        "rank_estimate": r.rank_estimate,
                        "min_sv_ratio": r.min_sv_ratio,
                    })
                })
                .collect();
            if !sweep.all_full_rank() {
                warnings::push(format!(
                    "relevance fails at {} of {} levels",
                    sweep.failing_u.len(),
                    sweep.points.len()
                ));
            }
            Ok(json!({
                "matrix": "quantile",
                "verdict": sweep.all_full_rank(),
                "flagged": sweep.failing_u.len(),
                "levels": sweep.points.len(),
                "tolerance": tol,
                "failing_u": sweep.failing_u,
                "points": points,
            }))
        }
        Input::Population(Model::Additive(dgp)) => {
            let s = dgp.supports();
            let probs = (0..s.w_card)
                .map(|w| {
                    (0..s.z_card)
                        .map(|z| (0..s.d_card).map(|d| dgp.propensity(d, w, z)).collect())
                        .collect()
                })
                .collect();
            additive(
                probs,
                dgp.spec().z_marginal.clone(),
                a.tol.unwrap_or(POPULATION_RANK_TOL),
            )
        }
        Input::Population(Model::Late(dgp)) => {
            let s = dgp.supports();
            let probs = (0..s.w_card)
                .map(|w| {
                    (0..s.z_card)
                        .map(|z| {
                            let p = dgp.propensity(w, z);
                            vec![1.0 - p, p]
                        })
                        .collect()
                })
                .collect();
            additive(
                probs,
                dgp.spec().z_marginal.clone(),
                a.tol.unwrap_or(POPULATION_RANK_TOL),
            )
        }
        Input::Sample(data) => {
            let tol = a.tol.unwrap_or(if data.is_weighted() {
                POPULATION_RANK_TOL
            } else {
                SAMPLE_RANK_TOL
            });
            additive(estimated_propensities(&data)?, z_marginal(&data), tol)
        }
    }
}

fn outcome_range(dgp: &DiscreteQuantileDGP) -> Vec<f64> {
    let s = dgp.supports();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for d in 0..s.d_card {
        for w in 0..s.w_card {
            lo = lo.min(dgp.h(d, w, 0.0));
            hi = hi.max(dgp.h(d, w, 1.0));
        }
    }
    vec![lo, hi]
}

pub fn quantile_solution(input: Input, p: &QuantileParams) -> qiv_core::Result<QuantileSolution> {
    if p.grid < 2 {
        return Err(Error::InvalidInput(
            "--grid needs at least two levels".into(),
        ));
    }
    let law = match input {
        Input::Sample(data) => empirical_law(&data, p.width)?,
        Input::Population(Model::Quantile(dgp)) => population_law(&dgp, &outcome_range(&dgp))?,
        Input::Population(m) => {
            return Err(Error::InvalidInput(format!(
                "solve-quantile needs data or a quantile design, got {}",
                m.kind()
            )))
        }
    };
    let defaults = SolverOptions::for_kind(law.kind());
    let opts = SolverOptions {
        newton_tol: p.tol.unwrap_or(defaults.newton_tol),
        max_iter: p.max_iter,
        ..defaults
    };
    solve_grid_with(&law, &unit_grid(p.grid), &opts)
}

fn solve_quantile(cfg: &RunConfig, a: &SolveQuantileArgs) -> Result<Value, Failure> {
    let solved = quantile_solution(Input::resolve(&a.source)?, &a.params);
    if let (Ok(sol), Some(h_path), Some(f_path)) = (
        &solved,
        cfg.output_path("h_hat.csv"),
        cfg.output_path("f_hat.csv"),
    ) {
        let mut h = Vec::new();
        sol.write_h_csv(&mut h)?;
        write_atomic(&h_path, &h)?;
        let mut f = Vec::new();
        sol.write_f_csv(&mut f)?;
        write_atomic(&f_path, &f)?;
    }
    verdict(solved.and_then(|s| Ok(json!({ "solution": serde_json::to_value(s)? }))))
}

pub fn additive_solution(data: &Dataset, p: &AdditiveParams) -> qiv_core::Result<AdditiveSolution> {
    match p.method {
        AdditiveEstimator::Discrete => fit_discrete_additive(data),
        AdditiveEstimator::IndicatorGmm => {
            fit_polynomial_gmm(data, &Bases::indicators(data.supports()))
        }
        AdditiveEstimator::LinearGmm => fit_polynomial_gmm(data, &Bases::linear()),
    }
}

fn fit_additive(a: &FitAdditiveArgs) -> Result<Value, Failure> {
    let data = Input::resolve(&a.source)?.into_dataset("fit-additive")?;
    verdict(
        additive_solution(&data, &a.params)
            .and_then(|s| Ok(json!({ "solution": serde_json::to_value(s)? }))),
    )
}

fn fit_linear(a: &FitLinearArgs) -> Result<Value, Failure> {
    let data = Input::resolve(&a.source)?.into_dataset("fit-linear")?;
    let cmp = compare_linear(&data, a.params.compare_ols, a.params.compare_iv)?;
    if cmp.quasi_iv.first_stage.weak_iv {
        warnings::push(format!(
            "weak quasi-instrument: first-stage interaction F = {:.2}",
            cmp.quasi_iv.first_stage.interaction_f
        ));
    }
    Ok(json!({
        "beta_d": cmp.quasi_iv.beta_d(),
        "beta_d_se": cmp.quasi_iv.beta_d_se(),
        "comparison": to_value(&cmp)?,
        "table": cmp.render_table(),
    }))
}

pub fn bootstrap_config(b: &BootstrapParams) -> Option<BootstrapConfig> {
    (b.bootstrap > 0).then(|| BootstrapConfig {
        reps: b.bootstrap,
        seed: b.bootstrap_seed.unwrap_or(0),
    })
}

/// LATE, propensity table, and irrelevance graph; indices are 0-based.
pub fn late_results(input: Input, p: &LateParams) -> Result<qiv_core::Result<Value>, Failure> {
    let run = |w: usize, w1: usize, z: usize| -> qiv_core::Result<Value> {
        match &input {
            Input::Sample(data) => {
                let opts = LateOptions {
                    epsilon: p.epsilon,
                    bootstrap: bootstrap_config(&p.bootstrap),
                };
                let est = estimate_late(data, w, w1, z, &opts)?;
                let table = estimate_propensity(data)?;
                let graph = build_irrelevance_graph(&table, p.epsilon);
                Ok(json!({ "estimate": est, "propensity": table, "graph": graph }))
            }
            Input::Population(Model::Late(dgp)) => {
                if p.bootstrap.bootstrap > 0 {
                    warnings::push("bootstrap ignored at population moments");
                }
                let moments = PopulationMoments::new(dgp);
                let model = LateModel::new(&moments, p.epsilon)?;
                let est = model.late(w, w1, z)?;
                Ok(json!({ "estimate": est, "propensity": model.table(), "graph": model.graph() }))
            }
            Input::Population(m) => Err(Error::InvalidInput(format!(
                "fit-late needs data or a late design, got {}",
                m.kind()
            ))),
        }
    };
    let (w_card, z_card) = late_supports(&input)?;
    let w = code_to_index(p.w0, w_card, "w0")?;
    let w1 = code_to_index(p.w1, w_card, "w1")?;
    let z = code_to_index(p.z, z_card, "z")?;
    Ok(run(w, w1, z))
}

fn late_supports(input: &Input) -> Result<(usize, usize), Failure> {
    let s = match input {
        Input::Sample(d) => d.supports(),
        Input::Population(Model::Late(m)) => m.supports(),
        Input::Population(m) => {
            return Err(Failure::schema(format!(
                "LATE commands need data or a late design, got {}",
                m.kind()
            )))
        }
    };
    Ok((s.w_card, s.z_card))
}

fn fit_late(a: &FitLateArgs) -> Result<Value, Failure> {
    let mut v = verdict(late_results(Input::resolve(&a.source)?, &a.params)?)?;
    to_codes(&mut v);
    Ok(v)
}

/// MTE curve with 0-based indices.
pub fn mte_curve(
    input: &Input,
    p: &MteParams,
) -> Result<qiv_core::Result<qiv_core::late::MteCurve>, Failure> {
    let (w_card, z_card) = late_supports(input)?;
    let w = code_to_index(p.w, w_card, "w")?;
    let z = code_to_index(p.z, z_card, "z")?;
    Ok(match input {
        Input::Sample(data) => {
            let opts = LateOptions {
                epsilon: p.epsilon,
                bootstrap: bootstrap_config(&p.bootstrap),
            };
            estimate_mte(data, w, z, &p.grid, p.step, &opts)
        }
        Input::Population(Model::Late(dgp)) => {
            let moments = PopulationMoments::new(dgp);
            LateModel::new(&moments, p.epsilon).and_then(|m| m.mte(w, z, &p.grid, p.step))
        }
        Input::Population(_) => unreachable!("late_supports rejects other designs"),
    })
}

fn fit_mte(cfg: &RunConfig, a: &FitMteArgs) -> Result<Value, Failure> {
    let curve = mte_curve(&Input::resolve(&a.source)?, &a.params)?;
    if let (Ok(c), Some(path)) = (&curve, cfg.output_path("mte.csv")) {
        let mut csv = String::from("p,mte,se\n");
        for pt in &c.points {
            let cell = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
            csv.push_str(&format!("{},{},{}\n", pt.p, cell(pt.value), cell(pt.se)));
        }
        write_atomic(&path, csv.as_bytes())?;
    }
    if let Ok(c) = &curve {
        let skipped = c.points.iter().filter(|pt| pt.skipped.is_some()).count();
        if skipped > 0 {
            warnings::push(format!(
                "{skipped} of {} MTE points skipped",
                c.points.len()
            ));
        }
    }
    let mut v = verdict(curve.and_then(|c| Ok(json!({ "curve": serde_json::to_value(c)? }))))?;
    to_codes(&mut v);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_fields_become_codes() {
        let mut v = json!({"w": 0, "p": 0.5, "path": [{"from": 0, "to": 1, "z": 2}], "w_tilde": 0.5, "count": [3]});
        to_codes(&mut v);
        assert_eq!(
            v,
            json!({"w": 1, "p": 0.5, "path": [{"from": 1, "to": 2, "z": 3}], "w_tilde": 1.5, "count": [3]})
        );
    }
}
