use qiv_core::dgp::{bundled, population_law, simulate_quantile, DiscreteQuantileDGP};
use qiv_core::pwl::unit_grid;
use qiv_core::quantile_solver::{empirical_law, solve_grid, QuantileSolution};
use qiv_core::Error;

fn outcome_range(dgp: &DiscreteQuantileDGP) -> Vec<f64> {
    let s = dgp.supports();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
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

#[test]
fn population_recovery_on_coarse_and_fine_grids() {
    let dgp = bundled::quantile_2x2x3();
    let law = population_law(&dgp, &outcome_range(&dgp)).unwrap();
    for (n, tol) in [(101, 1e-4), (1001, 1e-5)] {
        let sol = solve_grid(&law, &unit_grid(n), 1e-10, 50).unwrap();
        let err = recovery_error(&dgp, &sol);
        println!("grid {n}: sup error {err:e}");
        assert!(err <= tol);
    }
}

#[test]
fn no_interaction_is_rank_deficient() {
    let dgp = bundled::quantile_no_interaction();
    let law = population_law(&dgp, &outcome_range(&dgp)).unwrap();
    let err = solve_grid(&law, &unit_grid(101), 1e-10, 50).unwrap_err();
    assert!(matches!(err, Error::RankDeficient { .. }), "{err}");
    assert!(err.to_string().contains("Assumption 1"));
}

#[test]
fn banded_empirical_law_converges_near_the_truth() {
    let dgp = bundled::quantile_2x2x3();
    let data = simulate_quantile(&dgp, 100_000, 0).unwrap();
    let law = empirical_law(&data, 0.1).unwrap();
    let sol = solve_grid(&law, &unit_grid(21), 1e-8, 50).unwrap();
    let mut worst: f64 = 0.0;
    for (k, &u) in sol
        .u_grid
        .iter()
        .enumerate()
        .filter(|(_, &u)| (0.1..=0.9).contains(&u))
    {
        for d in 0..2 {
            for w in 0..2 {
                worst = worst.max((sol.h_values(d, w)[k] - dgp.h(d, w, u)).abs());
            }
        }
    }
    println!("interior h error {worst:.4}");
    assert!(worst < 0.15);
}
