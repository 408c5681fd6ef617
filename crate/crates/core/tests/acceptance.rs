//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the PASS/FAIL lines always print;
//! exits nonzero when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use qiv_core::additive::{
    compare_linear, fit_discrete_additive, fit_linear_2sls, fit_ols, fit_polynomial_gmm,
};
use qiv_core::dgp::{
    bundled, population_law, simulate_additive, simulate_late, simulate_quantile, AdditiveDGP,
    DiscreteQuantileDGP, LateDGP,
};
use qiv_core::late::{
    self, bootstrap, estimate_late, BootstrapConfig, LateModel, LateOptions, PopulationMoments,
};
use qiv_core::montecarlo::{run_monte_carlo, Draw, MonteCarloConfig};
use qiv_core::pwl::unit_grid;
use qiv_core::quantile_solver::{empirical_law, solve_grid, QuantileSolution};
use qiv_core::relevance::{
    build_m_additive, det_2x2x3, rank_check, sweep_rank, Bases, POPULATION_RANK_TOL,
};
use qiv_core::{Dataset, Error, Result};

/// A named criterion yields one check per quantity it verifies.
type Criterion<'a> = Box<dyn Fn() -> Result<Vec<Check>> + 'a>;

struct Check {
    label: String,
    ok: bool,
}

fn check(ok: bool, label: impl Into<String>) -> Check {
    Check {
        label: label.into(),
        ok,
    }
}

// ---------------------------------------------------------------- oracles

/// `(1 / (b - a)) int_a^b Phi^{-1}(v) dv` by composite Simpson on statrs' quantile.
fn mean_normal_quantile(a: f64, b: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let m = 4000;
    let h = (b - a) / m as f64;
    let mut s = n.inverse_cdf(a) + n.inverse_cdf(b);
    for i in 1..m {
        let c = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += c * n.inverse_cdf(a + i as f64 * h);
    }
    s * h / 3.0 / (b - a)
}

/// `E[Y_1w - Y_0w | a < V <= b, Z = z]` by quadrature over the shock law.
fn complier_effect_oracle(dgp: &LateDGP, w: usize, z: usize, a: f64, b: f64) -> f64 {
    let sh = &dgp.spec().shock;
    dgp.h_level(1, w) - dgp.h_level(0, w) + sh.mu1[z] - sh.mu0[z]
        + (sh.rho1 - sh.rho0) * mean_normal_quantile(a, b)
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

fn recovery_error(dgp: &DiscreteQuantileDGP, sol: &QuantileSolution) -> f64 {
    let s = dgp.supports();
    let mut worst: f64 = 0.0;
    for (k, &u) in sol.u_grid.iter().enumerate() {
        for d in 0..s.d_card {
            for w in 0..s.w_card {
                worst = worst.max((sol.h_values(d, w)[k] - dgp.h(d, w, u)).abs());
            }
        }
        for z in 0..s.z_card {
            worst = worst.max((sol.f_values(z)[k] - dgp.fu(z, u)).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------- criteria

fn quantile_recovery() -> Result<Vec<Check>> {
    let start = Instant::now();
    let dgp = bundled::quantile_2x2x3();
    let sweep = sweep_rank(&dgp, &unit_grid(101), POPULATION_RANK_TOL)?;
    let mut out = vec![check(
        sweep.all_full_rank(),
        "sweep_rank full rank at all 101 levels",
    )];
    let law = population_law(&dgp, &outcome_range(&dgp))?;
    for (n, tol) in [(101, 1e-4), (1001, 1e-5)] {
        let sol = solve_grid(&law, &unit_grid(n), 1e-10, 50)?;
        let err = recovery_error(&dgp, &sol);
        out.push(check(
            err <= tol,
            format!("grid {n}: sup error {err:.2e} <= {tol:e}"),
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    out.push(check(secs <= 30.0, format!("runtime {secs:.2}s <= 30s")));
    Ok(out)
}

fn relevance_determinant() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let additive_config = |rng: &mut ChaCha8Rng| {
        let a = rng.gen_range(0.1..0.3);
        let b = rng.gen_range(0.0..0.3);
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..0.3)).collect();
        let p1 = [a + c[0], a + c[1], a + c[2]];
        let p2 = [a + b + c[0], a + b + c[1], a + b + c[2]];
        (p1, p2)
    };
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (p1, p2) = additive_config(&mut rng);
        worst = worst.max(det_2x2x3(p1, p2)?.abs());
    }
    let mut agree = 0;
    let mut singular = 0;
    for i in 0..100 {
        let (p1, mut p2) = additive_config(&mut rng);
        if i % 2 == 1 {
            p2[1] += rng.gen_range(0.05..0.2);
        }
        let mut zm: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = zm.iter().sum();
        zm.iter_mut().for_each(|p| *p /= total);
        let props: Vec<Vec<Vec<f64>>> = [p1, p2]
            .iter()
            .map(|row| row.iter().map(|&p| vec![p, 1.0 - p]).collect())
            .collect();
        let ratio = rank_check(&build_m_additive(&props, &zm)?, 1e-10)?.min_sv_ratio;
        let det = det_2x2x3(p1, p2)?;
        singular += usize::from(det.abs() < 1e-10);
        agree += usize::from((ratio < 1e-10) == (det.abs() < 1e-10));
    }
    Ok(vec![
        check(
            worst <= 1e-12,
            format!("max |det| over 1000 no-interaction draws {worst:.1e}"),
        ),
        check(
            agree == 100,
            format!(
                "7x7 singularity agrees with det zero-set on {agree}/100 ({singular} singular)"
            ),
        ),
    ])
}

fn identification_failure() -> Result<Vec<Check>> {
    let dgp = bundled::quantile_no_interaction();
    let law = population_law(&dgp, &outcome_range(&dgp))?;
    let solved = solve_grid(&law, &unit_grid(101), 1e-10, 50);
    let cites = matches!(&solved, Err(e @ Error::RankDeficient { .. }) if e.to_string().contains("Assumption 1"));
    let grid = unit_grid(101);
    let sweep = sweep_rank(&dgp, &grid, POPULATION_RANK_TOL)?;
    Ok(vec![
        check(
            cites,
            "solve_grid raises the rank-deficiency error citing Assumption 1",
        ),
        check(
            sweep.failing_u.len() == grid.len(),
            format!(
                "relevance sweep flags {}/{} levels (CLI path covered by the cli tests)",
                sweep.failing_u.len(),
                grid.len()
            ),
        ),
    ])
}

fn linear_truth(dgp: &AdditiveDGP) -> [f64; 4] {
    let s = dgp.spec();
    let mean_z: f64 = s
        .z_marginal
        .iter()
        .enumerate()
        .map(|(z, p)| (z + 1) as f64 * p)
        .sum();
    // h = 1 + 2 d + 0.5 w and g = 0.3 (z - E[Z]) on 1-based codes
    [1.0 - 0.3 * mean_z, 2.0, 0.5, 0.3]
}

fn additive_linear() -> Result<Vec<Check>> {
    let dgp = bundled::linear_additive();
    let truth = linear_truth(&dgp);
    let mut spec = dgp.spec().clone();
    spec.noise_scale = vec![0.0; spec.z_card];
    let noiseless = simulate_additive(&AdditiveDGP::from_spec(spec)?, 2000, 11)?;
    let fit = fit_linear_2sls(&noiseless)?;
    let exact_err = fit
        .second_stage
        .coefficients
        .iter()
        .zip(truth)
        .map(|(b, t)| (b - t).abs())
        .fold(0.0, f64::max);

    let data = simulate_additive(&dgp, 100_000, 12)?;
    let fit = fit_linear_2sls(&data)?;
    let (b, se) = (fit.beta_d(), fit.beta_d_se());
    let ols = fit_ols(&data)?;
    let (ob, ose) = (ols.coef("D").unwrap(), ols.se("D").unwrap());

    let disc = fit_discrete_additive(&data)?;
    let gmm = fit_polynomial_gmm(&data, &Bases::indicators(data.supports()))?;
    let gap = disc
        .h_hat
        .iter()
        .zip(&gmm.h_hat)
        .chain(disc.g_hat.iter().zip(&gmm.g_hat))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let cfg = MonteCarloConfig {
        reps: 200,
        seed: 77,
        level: 0.95,
    };
    let mc = run_monte_carlo(&cfg, &[("beta_D", truth[1])], |seed| {
        let f = fit_linear_2sls(&simulate_additive(&dgp, 10_000, seed)?)?;
        Ok(vec![Draw {
            value: f.beta_d(),
            se: Some(f.beta_d_se()),
        }])
    })?;
    let coverage = mc.targets[0].coverage.unwrap_or(0.0);

    Ok(vec![
        check(
            exact_err <= 1e-10,
            format!("noiseless 2SLS error {exact_err:.1e}"),
        ),
        check(
            (b - truth[1]).abs() <= 3.0 * se,
            format!("quasi-IV beta_D {b:.4} (se {se:.4})"),
        ),
        check(
            ob - truth[1] >= 5.0 * ose,
            format!(
                "OLS beta_D {ob:.4} biased up by {:.1} SEs",
                (ob - truth[1]) / ose
            ),
        ),
        check(
            gap <= 1e-8,
            format!("discrete vs indicator GMM gap {gap:.1e}"),
        ),
        check(
            (0.90..=0.99).contains(&coverage),
            format!("MC coverage {coverage:.3} ({} failed reps)", mc.failed),
        ),
    ])
}

fn late_identification(sample: &Dataset) -> Result<Vec<Check>> {
    let dgp = bundled::late_chain();
    let pop = PopulationMoments::new(&dgp);
    let model = LateModel::new(&pop, None)?;
    let est = model.late(0, 1, 2)?;
    let oracle = complier_effect_oracle(&dgp, 1, 2, est.p, est.p_prime);
    let pop_err = (est.late - oracle).abs();

    let opts = LateOptions {
        epsilon: None,
        bootstrap: Some(BootstrapConfig { reps: 500, seed: 5 }),
    };
    let s_est = estimate_late(sample, 0, 1, 2, &opts)?;
    let se = s_est.se.unwrap_or(f64::NAN);

    let mut worst_gap = est
        .decomposition_gap()
        .abs()
        .max(s_est.decomposition_gap().abs());
    let sm = late::SampleMoments::from_dataset(sample)?;
    let s_model = LateModel::new(&sm, None)?;
    for z in 0..3 {
        for (w, wp) in [(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)] {
            if let Ok(e) = s_model.late(w, wp, z) {
                worst_gap = worst_gap.max(e.decomposition_gap().abs());
            }
        }
    }

    let mut spec = dgp.spec().clone();
    spec.h_levels = vec![vec![0.3; 3], vec![1.1; 3]];
    let excluded = PopulationMoments::new(&LateDGP::from_spec(spec)?);
    let e = LateModel::new(&excluded, None)?.late(0, 1, 2)?;
    let wald = e.outcome_diff / (e.p_prime - e.p);

    Ok(vec![
        check(
            pop_err <= 1e-10,
            format!(
                "population LATE {:.12} vs quadrature {oracle:.12}",
                est.late
            ),
        ),
        check(
            (oracle - 1.5).abs() <= 1e-8,
            "designed complier effect equals 1.5",
        ),
        check(
            (s_est.late - 1.5).abs() <= 3.0 * se,
            format!("n=1e5 LATE {:.4} (bootstrap se {se:.4})", s_est.late),
        ),
        check(
            worst_gap <= 1e-10,
            format!("decomposition identity gap {worst_gap:.1e}"),
        ),
        check(
            (e.late - wald).abs() <= 1e-12,
            format!("W-invariant h: LATE - Wald = {:.1e}", e.late - wald),
        ),
    ])
}

fn chains_and_generalized(sample: &Dataset) -> Result<Vec<Check>> {
    let dgp = bundled::late_chain();
    let pop = PopulationMoments::new(&dgp);
    let model = LateModel::new(&pop, None)?;
    let chain = model.chained_direct_effect(0, 2)?;
    let t1 = dgp.h_level(1, 2) - dgp.h_level(1, 0);
    let t0 = dgp.h_level(0, 2) - dgp.h_level(0, 0);
    let pop_err = (chain.effect.delta1 - t1)
        .abs()
        .max((chain.effect.delta0 - t0).abs());

    let est = late::chained_direct_effect(sample, 0, 2, None)?;
    let boot = bootstrap(sample, BootstrapConfig { reps: 500, seed: 6 }, |d| {
        let c = late::chained_direct_effect(d, 0, 2, None)?;
        Ok(vec![c.effect.delta0, c.effect.delta1])
    })?;
    let z0 = (est.effect.delta0 - t0) / boot.se[0];
    let z1 = (est.effect.delta1 - t1) / boot.se[1];

    let mut worst: f64 = 0.0;
    for base in 0..3 {
        let g = model.generalized_late(base, 2, 0.3, 0.6, false)?;
        worst = worst.max((g.value - complier_effect_oracle(&dgp, base, 2, 0.3, 0.6)).abs());
    }
    Ok(vec![
        check(
            chain.path.len() == 2 && pop_err <= 1e-10,
            format!("two-edge chain, population error {pop_err:.1e}"),
        ),
        check(
            z0.abs() <= 3.0 && z1.abs() <= 3.0,
            format!("n=1e5 chained effects at {z0:.2} and {z1:.2} SEs"),
        ),
        check(
            worst <= 1e-8,
            format!("generalized LATE (0.3, 0.6] vs quadrature {worst:.1e}"),
        ),
    ])
}

fn marginal_effects() -> Result<Vec<Check>> {
    let (w, z) = (10, 0);
    let grid: Vec<f64> = (3..=17).map(|k| k as f64 * 0.05).collect();

    let flat = bundled::late_mte(false);
    let pop = PopulationMoments::new(&flat);
    let curve = LateModel::new(&pop, None)?.mte(w, z, &grid, 0.01)?;
    let sh = &flat.spec().shock;
    let ate = flat.h_level(1, w) - flat.h_level(0, w) + sh.mu1[z] - sh.mu0[z];
    let flat_err = curve
        .evaluated()
        .map(|(_, v)| (v - ate).abs())
        .fold(0.0, f64::max);
    let flat_n = curve.evaluated().count();

    let het = bundled::late_mte(true);
    let pop = PopulationMoments::new(&het);
    let model = LateModel::new(&pop, None)?;
    let window = |p: f64, s: f64| {
        model
            .generalized_late(w, z, p - s / 2.0, p + s / 2.0, true)
            .map(|g| g.value)
    };
    let mut ratios = Vec::new();
    for p in [0.3, 0.7] {
        let (a, b, c) = (window(p, 0.08)?, window(p, 0.04)?, window(p, 0.02)?);
        ratios.push((a - b) / (b - c));
    }
    let curve = model.mte(w, z, &grid, 0.01)?;
    let w_value = het.w_values()[w];
    let mte_err = curve
        .evaluated()
        .map(|(p, v)| (v - het.mte(w_value, z, p)).abs())
        .fold(0.0, f64::max);
    let het_n = curve.evaluated().count();

    Ok(vec![
        check(
            flat_n == grid.len() && flat_err <= 1e-8,
            format!("flat MTE = ATE {ate} at {flat_n} points, error {flat_err:.1e}"),
        ),
        check(
            ratios.iter().all(|r| (3.5..=4.5).contains(r)),
            format!(
                "Richardson ratios {:.3} at p=0.3, {:.3} at p=0.7",
                ratios[0], ratios[1]
            ),
        ),
        check(
            het_n == grid.len() && mte_err <= 1e-3,
            format!("MTE vs analytic at step 0.01: {mte_err:.1e} over {het_n} points"),
        ),
    ])
}

fn determinism_and_round_trip() -> Result<Vec<Check>> {
    let q = bundled::quantile_2x2x3();
    let a = bundled::linear_additive();
    let l = bundled::late_chain();
    let same = simulate_quantile(&q, 3000, 7)?.to_csv_string()?
        == simulate_quantile(&q, 3000, 7)?.to_csv_string()?
        && simulate_additive(&a, 3000, 7)?.to_csv_string()?
            == simulate_additive(&a, 3000, 7)?.to_csv_string()?
        && simulate_late(&l, 3000, 7)?.to_csv_string()?
            == simulate_late(&l, 3000, 7)?.to_csv_string()?;
    let differs = simulate_late(&l, 3000, 7)?.to_csv_string()?
        != simulate_late(&l, 3000, 8)?.to_csv_string()?;

    let late_data = simulate_late(&l, 20_000, 3)?;
    let opts = LateOptions {
        epsilon: None,
        bootstrap: Some(BootstrapConfig { reps: 50, seed: 1 }),
    };
    let report = |d: &Dataset| -> Result<String> {
        Ok(serde_json::to_string(&estimate_late(d, 0, 1, 2, &opts)?)?)
    };
    let reports_same = report(&late_data)? == report(&late_data)?;

    let reread = |d: &Dataset| Dataset::read_csv(d.to_csv_string()?.as_bytes(), Some(d.supports()));
    let late_rt = report(&reread(&late_data)?)? == report(&late_data)?;

    let lin = simulate_additive(&a, 5000, 4)?;
    let lin_json = |d: &Dataset| -> Result<String> {
        Ok(serde_json::to_string(&compare_linear(d, true, true)?)?)
    };
    let lin_rt = lin_json(&reread(&lin)?)? == lin_json(&lin)?;

    let qd = simulate_quantile(&q, 20_000, 1)?;
    let q_json = |d: &Dataset| -> Result<String> {
        solve_grid(&empirical_law(d, 0.2)?, &unit_grid(21), 1e-8, 50)?.to_json()
    };
    let q_rt = q_json(&reread(&qd)?)? == q_json(&qd)?;

    Ok(vec![
        check(same && differs, "same seed gives byte-identical CSV, new seed differs"),
        check(reports_same, "bootstrap LATE report is byte-identical across runs"),
        check(late_rt && lin_rt && q_rt, format!("CSV round-trip equals in-memory fit (late {late_rt}, linear {lin_rt}, quantile {q_rt})")),
    ])
}

fn main() -> ExitCode {
    let late_sample = simulate_late(&bundled::late_chain(), 100_000, 2026);
    let late_sample = match late_sample {
        Ok(d) => d,
        Err(e) => {
            println!("could not simulate the LATE sample: {e}");
            return ExitCode::FAILURE;
        }
    };
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 quantile recovery", Box::new(quantile_recovery)),
        ("2 relevance determinant", Box::new(relevance_determinant)),
        (
            "3 identification-failure detection",
            Box::new(identification_failure),
        ),
        ("4 additive and linear", Box::new(additive_linear)),
        ("5 LATE", Box::new(|| late_identification(&late_sample))),
        (
            "6 chains and generalized LATE",
            Box::new(|| chains_and_generalized(&late_sample)),
        ),
        ("7 MTE", Box::new(marginal_effects)),
        (
            "8 determinism and round-trip",
            Box::new(determinism_and_round_trip),
        ),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let (ok, detail) = match run() {
            Ok(checks) => {
                let ok = checks.iter().all(|c| c.ok);
                let detail: Vec<String> = checks
                    .iter()
                    .map(|c| format!("{}{}", if c.ok { "" } else { "FAILED " }, c.label))
                    .collect();
                (ok, detail.join("; "))
            }
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!(
            "criterion {name}: {} | {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
