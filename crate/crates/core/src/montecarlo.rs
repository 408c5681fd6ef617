//! Repeated-sampling harness: bias, spread, and interval coverage of any
//! estimator over fresh simulations.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub reps: usize,
    pub seed: u64,
    /// nominal coverage of the `estimate +- z se` intervals
    pub level: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            reps: 200,
            seed: 0,
            level: 0.95,
        }
    }
}

impl MonteCarloConfig {
    /// Simulation seed of replication `rep`; distinct reps never share a seed.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        self.seed
            .wrapping_add((rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

/// One estimated quantity of a replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub value: f64,
    pub se: Option<f64>,
}

/// Summary of one quantity across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    /// Monte Carlo standard error of the bias, `sd / sqrt(R)`
    pub bias_mc_se: f64,
    /// share of intervals covering the truth; `None` without standard errors
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub reps: usize,
    pub failed: usize,
    pub level: f64,
    pub targets: Vec<TargetSummary>,
}

impl MonteCarloReport {
    pub fn target(&self, name: &str) -> Option<&TargetSummary> {
        self.targets.iter().find(|t| t.name == name)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9}",
            "target", "truth", "mean", "bias", "sd", "rmse", "coverage"
        );
        for t in &self.targets {
            let cov = t
                .coverage
                .map_or_else(|| "-".to_string(), |c| format!("{:.3}", c));
            let _ = writeln!(
                s,
                "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>9}",
                t.name, t.truth, t.mean, t.bias, t.sd, t.rmse, cov
            );
        }
        let _ = writeln!(s, "replications: {} ({} failed)", self.reps, self.failed);
        s
    }
}

/// Run `replicate(seed)` for every replication in parallel and summarize each
/// of its outputs against `truths` (same order). Failed replications are
/// counted and excluded.
pub fn run_monte_carlo<F>(
    cfg: &MonteCarloConfig,
    truths: &[(&str, f64)],
    replicate: F,
) -> Result<MonteCarloReport>
where
    F: Fn(u64) -> Result<Vec<Draw>> + Sync,
{
    if cfg.reps < 2 {
        return Err(Error::invalid(
            "Monte Carlo needs at least two replications",
        ));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::invalid(format!(
            "coverage level must lie in (0, 1), got {}",
            cfg.level
        )));
    }
    let runs: Vec<Result<Vec<Draw>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| replicate(cfg.rep_seed(r)))
        .collect();
    let mut ok = Vec::with_capacity(runs.len());
    for run in runs {
        match run {
            Ok(d) if d.len() == truths.len() => ok.push(d),
            Ok(d) => {
                return Err(Error::invalid(format!(
                    "replication returned {} quantities, expected {}",
                    d.len(),
                    truths.len()
                )))
            }
            Err(e) => log::warn!("Monte Carlo replication failed: {e}"),
        }
    }
    let failed = cfg.reps - ok.len();
    if ok.len() < 2 {
        return Err(Error::invalid(format!(
            "only {} of {} replications succeeded",
            ok.len(),
            cfg.reps
        )));
    }
    let crit = normal::quantile(0.5 + cfg.level / 2.0);
    let m = ok.len() as f64;
    let targets = truths
        .iter()
        .enumerate()
        .map(|(j, &(name, truth))| {
            let vals: Vec<f64> = ok.iter().map(|d| d[j].value).collect();
            let mean = vals.iter().sum::<f64>() / m;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
            let rmse = (vals.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / m).sqrt();
            let coverage = ok
                .iter()
                .map(|d| d[j].se)
                .collect::<Option<Vec<f64>>>()
                .map(|ses| {
                    let hits = vals
                        .iter()
                        .zip(&ses)
                        .filter(|(v, se)| (*v - truth).abs() <= crit * *se)
                        .count();
                    hits as f64 / m
                });
            TargetSummary {
                name: name.to_string(),
                truth,
                mean,
                bias: mean - truth,
                sd,
                rmse,
                bias_mc_se: sd / m.sqrt(),
                coverage,
            }
        })
        .collect();
    Ok(MonteCarloReport {
        reps: cfg.reps,
        failed,
        level: cfg.level,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn normal_means_have_nominal_coverage() {
        let cfg = MonteCarloConfig {
            reps: 2000,
            seed: 5,
            level: 0.95,
        };
        let report = run_monte_carlo(&cfg, &[("mean", 1.0)], |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 50;
            let xs: Vec<f64> = (0..n)
                .map(|_| 1.0 + Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            Ok(vec![Draw {
                value: mean,
                se: Some(1.0 / (n as f64).sqrt()),
            }])
        })
        .unwrap();
        let t = report.target("mean").unwrap();
        assert!((t.coverage.unwrap() - 0.95).abs() < 0.015);
        assert!(t.bias.abs() < 3.0 * t.bias_mc_se);
        assert!((t.sd - (1.0 / 50f64).sqrt()).abs() < 0.01);
    }

    #[test]
    fn failures_are_counted() {
        let cfg = MonteCarloConfig {
            reps: 10,
            seed: 0,
            level: 0.9,
        };
        let report = run_monte_carlo(&cfg, &[("x", 0.0)], |seed| {
            if seed == cfg.rep_seed(3) {
                Err(Error::invalid("boom"))
            } else {
                Ok(vec![Draw {
                    value: 0.0,
                    se: None,
                }])
            }
        })
        .unwrap();
        assert_eq!(report.failed, 1);
        assert_eq!(report.targets[0].coverage, None);
        assert!(report.render_table().contains("(1 failed)"));
    }
}
