//! Complier effects when `W` enters the outcome and the selection equation
//! but some `z` makes two `W` values equally likely to take treatment.
//!
//! At such a `z*` the shift in `E[Y D]` and `E[Y (1 - D)]` is a pure direct
//! effect of `W`, which is then netted out of the reduced-form change at any
//! other `z`. Direct effects compose along chains of linked `W` values, which
//! extends the construction to generalized LATEs and marginal treatment
//! effects. Indices are 0-based; treatment code 2 is treated.
//!
//! Entry points take either a [`Dataset`] (with optional bootstrap standard
//! errors) or any [`LateMoments`] via [`LateModel`].

mod effects;
mod graph;
mod moments;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use effects::{
    ChainedEffect, DirectEffect, GeneralizedLate, LateEstimate, LateModel, MteCurve, MtePoint,
};
pub use graph::{
    build_irrelevance_graph, estimate_propensity, find_local_irrelevance, Edge, Hop,
    IrrelevanceGraph, IrrelevanceMatch, PropensityTable, POPULATION_EPSILON,
};
pub use moments::{quantile_bins, CellMoments, LateMoments, PopulationMoments, SampleMoments};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Nonparametric bootstrap over rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub reps: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { reps: 500, seed: 0 }
    }
}

/// Standard deviations of the replicated statistics; failed replicates
/// (for example a resample that breaks a local-irrelevance link) are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub reps: usize,
    pub failed: usize,
    pub se: Vec<f64>,
}

/// Replicate `stat` on `cfg.reps` resamples, one ChaCha stream per replicate.
pub fn bootstrap<F>(data: &Dataset, cfg: BootstrapConfig, stat: F) -> Result<BootstrapSummary>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    if data.is_weighted() {
        return Err(Error::invalid("bootstrap needs an unweighted sample"));
    }
    let n = data.len();
    let draws: Vec<Option<Vec<f64>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = crate::dgp::row_rng(cfg.seed, rep);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            data.subset(&idx).and_then(|d| stat(&d)).ok()
        })
        .collect();
    let ok: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
    let failed = cfg.reps - ok.len();
    if ok.len() < 2 {
        return Err(Error::invalid(format!(
            "only {} of {} bootstrap replicates succeeded",
            ok.len(),
            cfg.reps
        )));
    }
    if failed > 0 {
        log::warn!(
            "{failed} of {} bootstrap replicates failed and were dropped",
            cfg.reps
        );
    }
    let k = ok[0].len();
    let m = ok.len() as f64;
    let se = (0..k)
        .map(|j| {
            let mean = ok.iter().map(|v| v[j]).sum::<f64>() / m;
            (ok.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        })
        .collect();
    Ok(BootstrapSummary {
        reps: cfg.reps,
        failed,
        se,
    })
}

/// Settings shared by the dataset entry points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LateOptions {
    /// local-irrelevance tolerance; `None` uses two pooled standard errors
    pub epsilon: Option<f64>,
    pub bootstrap: Option<BootstrapConfig>,
}

fn with_model<T>(
    data: &Dataset,
    epsilon: Option<f64>,
    f: impl FnOnce(&LateModel) -> Result<T>,
) -> Result<T> {
    let moments = SampleMoments::from_dataset(data)?;
    let model = LateModel::new(&moments, epsilon)?;
    f(&model)
}

/// LATE of moving W from `w` to `w'` at `z`, with bootstrap SE on request.
pub fn estimate_late(
    data: &Dataset,
    w: usize,
    w_prime: usize,
    z: usize,
    opts: &LateOptions,
) -> Result<LateEstimate> {
    let mut est = with_model(data, opts.epsilon, |m| m.late(w, w_prime, z))?;
    if let Some(cfg) = opts.bootstrap {
        let b = bootstrap(data, cfg, |d| {
            with_model(d, opts.epsilon, |m| m.late(w, w_prime, z)).map(|e| vec![e.late])
        })?;
        est.se = Some(b.se[0]);
    }
    Ok(est)
}

/// Sum of direct effects along the fewest-hop chain from `w` to `w'`.
pub fn chained_direct_effect(
    data: &Dataset,
    w: usize,
    w_prime: usize,
    epsilon: Option<f64>,
) -> Result<ChainedEffect> {
    with_model(data, epsilon, |m| m.chained_direct_effect(w, w_prime))
}

/// Generalized LATE at base `w` over `(p, p']`; knots only unless `interpolate`.
pub fn estimate_generalized_late(
    data: &Dataset,
    w: usize,
    z: usize,
    (p, p_prime): (f64, f64),
    interpolate: bool,
    opts: &LateOptions,
) -> Result<GeneralizedLate> {
    let run = |d: &Dataset| {
        with_model(d, opts.epsilon, |m| {
            m.generalized_late(w, z, p, p_prime, interpolate)
        })
    };
    let mut est = run(data)?;
    if let Some(cfg) = opts.bootstrap {
        est.se = Some(bootstrap(data, cfg, |d| run(d).map(|g| vec![g.value]))?.se[0]);
    }
    Ok(est)
}

/// MTE curve at base `w`. Bootstrap SEs cover the points evaluated on the
/// full sample; replicates that lose any of them are dropped.
pub fn estimate_mte(
    data: &Dataset,
    w: usize,
    z: usize,
    p_grid: &[f64],
    step: f64,
    opts: &LateOptions,
) -> Result<MteCurve> {
    let run = |d: &Dataset| with_model(d, opts.epsilon, |m| m.mte(w, z, p_grid, step));
    let mut curve = run(data)?;
    if let Some(cfg) = opts.bootstrap {
        let kept: Vec<usize> = (0..curve.points.len())
            .filter(|&i| curve.points[i].value.is_some())
            .collect();
        if kept.is_empty() {
            return Ok(curve);
        }
        let b = bootstrap(data, cfg, |d| {
            let c = run(d)?;
            kept.iter()
                .map(|&i| {
                    c.points[i]
                        .value
                        .ok_or_else(|| Error::invalid("MTE point lost"))
                })
                .collect()
        })?;
        for (&i, se) in kept.iter().zip(b.se) {
            curve.points[i].se = Some(se);
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{bundled, simulate_late};
    use crate::normal;

    #[test]
    fn chain_design_late_is_exact_at_population_moments() {
        let dgp = bundled::late_chain();
        let m = PopulationMoments::new(&dgp);
        let model = LateModel::new(&m, None).unwrap();
        let est = model.late(0, 1, 2).unwrap();
        assert!((est.late - 1.5).abs() < 1e-10);
        assert_eq!(est.z_star.z, 0);
        assert!(est.decomposition_gap().abs() < 1e-12);
    }

    #[test]
    fn unlinked_pair_fails_the_testable_assumption() {
        let m = PopulationMoments::new(&bundled::late_chain());
        let model = LateModel::new(&m, None).unwrap();
        assert!(matches!(
            model.late(0, 2, 2),
            Err(Error::AssumptionFailed(_))
        ));
        assert!(model.late(1, 0, 2).unwrap_err().is_identification_failure());
    }

    #[test]
    fn generalized_late_at_linked_knots_uses_the_chain() {
        let dgp = bundled::late_chain();
        let m = PopulationMoments::new(&dgp);
        let model = LateModel::new(&m, None).unwrap();
        let sh = &dgp.spec().shock;
        let (p, p2) = (dgp.propensity(0, 2), dgp.propensity(2, 2));
        for base in 0..3 {
            let g = model.generalized_late(base, 2, p, p2, false).unwrap();
            assert_eq!((g.w_tilde, g.w_tilde_prime), (0.0, 2.0));
            let want = dgp.h_level(1, base) - dgp.h_level(0, base) + sh.mu1[2] - sh.mu0[2]
                + (sh.rho1 - sh.rho0) * (normal::pdf_at_quantile(p) - normal::pdf_at_quantile(p2))
                    / (p2 - p);
            assert!((g.value - want).abs() < 1e-10, "base {base}");
        }
    }

    #[test]
    fn chained_effects_add_up_h_differences() {
        let dgp = bundled::late_chain();
        let m = PopulationMoments::new(&dgp);
        let model = LateModel::new(&m, None).unwrap();
        let c = model.chained_direct_effect(0, 2).unwrap();
        assert!((c.effect.delta1 - (dgp.h_level(1, 2) - dgp.h_level(1, 0))).abs() < 1e-12);
        assert!((c.effect.delta0 - (dgp.h_level(0, 2) - dgp.h_level(0, 0))).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_is_reproducible() {
        let data = simulate_late(&bundled::late_chain(), 4000, 3).unwrap();
        let opts = LateOptions {
            epsilon: None,
            bootstrap: Some(BootstrapConfig { reps: 40, seed: 9 }),
        };
        let a = estimate_late(&data, 0, 1, 2, &opts).unwrap();
        let b = estimate_late(&data, 0, 1, 2, &opts).unwrap();
        assert_eq!(a.se, b.se);
        assert!(a.se.unwrap() > 0.0);
    }

    #[test]
    fn mte_skips_windows_outside_the_unit_interval() {
        let m = PopulationMoments::new(&bundled::late_mte(true));
        let model = LateModel::new(&m, None).unwrap();
        let curve = model.mte(10, 0, &[0.005, 0.3, 0.95], 0.02).unwrap();
        assert!(curve.points[0].skipped.is_some());
        assert!(curve.points[1].value.is_some());
        assert!(curve.points[2].skipped.is_some());
    }
}
