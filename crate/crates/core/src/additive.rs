//! Estimators for the additive model `Y = h(D, W) + g(Z) + V`, `E[V | Z, W] = 0`,
//! `E[g(Z)] = 0`: a saturated cell-mean system for discrete supports, one-step
//! GMM on basis expansions, and the linear special case by 2SLS.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CellTable, Dataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::relevance::{
    build_m_additive, estimated_propensities, polynomial_moments, rank_check, Bases, RankReport,
    POPULATION_RANK_TOL, SAMPLE_RANK_TOL,
};

/// First-stage F below this flags a weak instrument.
pub const WEAK_IV_F: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdditiveMethod {
    Discrete,
    PolynomialGmm,
}

/// Estimated `h` and `g`.
///
/// For the discrete method `h_hat[w * d_card + d]` and `g_hat[z]` are levels;
/// for GMM they are the coefficients on the `h` and `g` basis terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveSolution {
    pub method: AdditiveMethod,
    pub h_hat: Vec<f64>,
    pub g_hat: Vec<f64>,
    /// `E[g_hat(Z)]` under the data's `Z` law
    pub g_mean: f64,
    /// norm of the unconstrained equations at the solution
    pub residual_norm: f64,
    pub rank_report: RankReport,
}

fn rank_tolerance(data: &Dataset) -> f64 {
    if data.is_weighted() {
        POPULATION_RANK_TOL
    } else {
        SAMPLE_RANK_TOL
    }
}

/// Stacked cell-mean system
/// `E[Y | w, z] = sum_d P(D = d | w, z) h(d, w) + g(z)` with the centering
/// `sum_z g(z) P(Z = z) = 0` imposed exactly. Cells are weighted by their
/// share of the sample.
pub fn fit_discrete_additive(data: &Dataset) -> Result<AdditiveSolution> {
    let s = data.supports();
    let props = estimated_propensities(data)?;
    let table = CellTable::from_dataset(data);
    let z_marginal = table.z_marginal();
    let m = build_m_additive(&props, &z_marginal)?;
    let report = rank_check(&m, rank_tolerance(data))?;
    if !report.verdict {
        return Err(Error::not_identified(
            "selection matrix of estimated propensities is not of full column rank",
            Some(report),
        ));
    }
    let n_h = s.d_card * s.w_card;
    let n_rows = s.w_card * s.z_card;
    let total: f64 = table.mass.iter().sum();
    let mut a = DMatrix::zeros(n_rows, n_h + s.z_card);
    let mut b = DVector::zeros(n_rows);
    for w in 0..s.w_card {
        for z in 0..s.z_card {
            let c = table.cell(w, z);
            let r = w * s.z_card + z;
            let sw = (table.mass[c] / total).sqrt();
            for d in 0..s.d_card {
                a[(r, w * s.d_card + d)] = sw * props[w][z][d];
            }
            a[(r, n_h + z)] = sw;
            b[r] = sw * table.y_sum[c] / table.mass[c];
        }
    }
    let mut c = DVector::zeros(n_h + s.z_card);
    for z in 0..s.z_card {
        c[n_h + z] = z_marginal[z];
    }
    let x = linalg::lstsq_with_constraint(&a, &b, &c)?;
    let residual_norm = (&a * &x - &b).norm();
    let g_hat: Vec<f64> = x.rows(n_h, s.z_card).iter().copied().collect();
    let g_mean = g_hat.iter().zip(&z_marginal).map(|(g, p)| g * p).sum();
    Ok(AdditiveSolution {
        method: AdditiveMethod::Discrete,
        h_hat: x.rows(0, n_h).iter().copied().collect(),
        g_hat,
        g_mean,
        residual_norm,
        rank_report: report,
    })
}

/// One-step GMM with identity weighting on the moments
/// `E[(Y - sum_j beta_j h_j(D, W) - sum_j alpha_j g_j(Z)) l_k(W, Z)] = 0`,
/// with `l` orthonormalized under the data's `(W, Z)` law. The centering
/// moment `E[sum_j alpha_j g_j(Z)] = 0` is imposed exactly.
pub fn fit_polynomial_gmm(data: &Dataset, bases: &Bases) -> Result<AdditiveSolution> {
    let pm = polynomial_moments(data, bases)?;
    let report = rank_check(&pm.matrix, rank_tolerance(data))?;
    if !report.verdict {
        return Err(Error::not_identified(
            format!(
                "moment matrix has rank {} of the {} required",
                report.rank_estimate, report.n_cols
            ),
            Some(report),
        ));
    }
    let r_l = pm.instrument_coef.len();
    let r_h = bases.h.len();
    let m = &pm.matrix.entries;
    let top = m.rows(0, r_l).into_owned();
    let rhs = pm.rhs.rows(0, r_l).into_owned();
    let c = m.row(r_l).transpose();
    let x = linalg::lstsq_with_constraint(&top, &rhs, &c)?;
    let residual_norm = (&top * &x - &rhs).norm();
    Ok(AdditiveSolution {
        method: AdditiveMethod::PolynomialGmm,
        h_hat: x.rows(0, r_h).iter().copied().collect(),
        g_hat: x.rows(r_h, bases.g.len()).iter().copied().collect(),
        g_mean: c.dot(&x),
        residual_norm,
        rank_report: report,
    })
}

/// Coefficients with heteroskedasticity-robust (HC1) standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub robust_se: Vec<f64>,
    pub n: usize,
}

impl Regression {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.coefficients[i])
    }

    pub fn se(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.robust_se[i])
    }

    pub fn t_stat(&self, name: &str) -> Option<f64> {
        Some(self.coef(name)? / self.se(name)?)
    }
}

/// Regression of `D` on `(1, Z, W, Z*W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStage {
    pub regression: Regression,
    /// squared robust t-statistic of the interaction
    pub interaction_f: f64,
    pub weak_iv: bool,
}

/// Quasi-IV 2SLS of `Y` on `(1, D, W, Z)` with instruments `(1, Z, W, Z*W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// `(intercept, beta_D, beta_W, beta_Z)` under the names `1, D, W, Z`
    pub second_stage: Regression,
    pub first_stage: FirstStage,
    /// sample moments `E[(Y - X b) instrument]` at the estimate
    pub moment_residuals: Vec<f64>,
}

impl LinearFit {
    pub fn beta_d(&self) -> f64 {
        self.second_stage.coefficients[1]
    }

    pub fn beta_d_se(&self) -> f64 {
        self.second_stage.robust_se[1]
    }
}

type Column = fn(&crate::data::Row) -> f64;

const ONE: (&str, Column) = ("1", |_| 1.0);
const D: (&str, Column) = ("D", |r| r.d as f64);
const W: (&str, Column) = ("W", |r| r.w as f64);
const Z: (&str, Column) = ("Z", |r| r.z as f64);
const ZW: (&str, Column) = ("Z*W", |r| r.z as f64 * r.w as f64);

fn design(data: &Dataset, cols: &[(&str, Column)]) -> DMatrix<f64> {
    let rows = data.rows();
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| (cols[j].1)(&rows[i]))
}

fn weights(data: &Dataset) -> DVector<f64> {
    DVector::from_iterator(data.len(), (0..data.len()).map(|i| data.weight(i)))
}

/// Just-identified IV `b = (Q'WX)^{-1} Q'Wy` (OLS when `Q = X`) with HC1 errors.
fn just_identified(
    data: &Dataset,
    outcome: Column,
    regressors: &[(&str, Column)],
    instruments: &[(&str, Column)],
) -> Result<(Regression, Vec<f64>)> {
    let n = data.len();
    let k = regressors.len();
    if n <= k {
        return Err(Error::invalid(format!(
            "need more than {k} observations, got {n}"
        )));
    }
    let x = design(data, regressors);
    let q = design(data, instruments);
    let wt = weights(data);
    let y = DVector::from_iterator(n, data.rows().iter().map(outcome));
    let qw = {
        let mut m = q.clone();
        for (i, mut row) in m.row_iter_mut().enumerate() {
            row *= wt[i];
        }
        m
    };
    let qx = qw.transpose() * &x;
    if linalg::min_sv_ratio(&qx) < 1e-12 {
        let dir = linalg::null_direction(&qx.transpose());
        let combo: Vec<String> = instruments
            .iter()
            .zip(&dir)
            .filter(|(_, c)| c.abs() > 1e-6)
            .map(|((name, _), c)| format!("{c:+.3}*{name}"))
            .collect();
        return Err(Error::Singular(format!(
            "instrument cross-moment matrix is singular along {}",
            combo.join(" ")
        )));
    }
    let qx_inv = linalg::inverse(&qx, "instrument cross-moment matrix")?;
    let b = &qx_inv * (qw.transpose() * &y);
    let e = &y - &x * &b;
    let total = wt.sum();
    let moments: Vec<f64> = (qw.transpose() * &e / total).iter().copied().collect();
    // meat = sum_i w_i e_i^2 q_i q_i'
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let qi = q.row(i);
        meat += qi.transpose() * qi * (wt[i] * e[i] * e[i]);
    }
    let scale = n as f64 / (n - k) as f64;
    let cov = &qx_inv * meat * qx_inv.transpose() * scale;
    let reg = Regression {
        names: regressors.iter().map(|c| c.0.to_string()).collect(),
        coefficients: b.iter().copied().collect(),
        robust_se: (0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        n,
    };
    Ok((reg, moments))
}

/// The quasi-IV first stage: `D` on `(1, Z, W, Z*W)`.
pub fn first_stage(data: &Dataset) -> Result<FirstStage> {
    let cols = [ONE, Z, W, ZW];
    let (regression, _) = just_identified(data, D.1, &cols, &cols)?;
    let t = regression.t_stat("Z*W").unwrap_or(0.0);
    let f = if t.is_finite() { t * t } else { f64::INFINITY };
    Ok(FirstStage {
        regression,
        interaction_f: f,
        weak_iv: f.is_nan() || f < WEAK_IV_F,
    })
}

/// Linear quasi-IV estimator, the moments `E[(Y - X b)(1, Z, W, ZW)] = 0`
/// solved by 2SLS (just identified, so 2SLS is the exact IV solution).
pub fn fit_linear_2sls(data: &Dataset) -> Result<LinearFit> {
    if !data.is_weighted() && data.len() <= 8 {
        return Err(Error::invalid(
            "fit_linear_2sls needs more than 8 observations",
        ));
    }
    let (second_stage, moment_residuals) =
        just_identified(data, |r| r.y, &[ONE, D, W, Z], &[ONE, Z, W, ZW])?;
    Ok(LinearFit {
        second_stage,
        first_stage: first_stage(data)?,
        moment_residuals,
    })
}

/// `Y` on `(1, D)` by OLS.
pub fn fit_ols(data: &Dataset) -> Result<Regression> {
    Ok(just_identified(data, |r| r.y, &[ONE, D], &[ONE, D])?.0)
}

/// Standard IV treating `Z` as a valid instrument: first stage `D` on `(1, Z)`,
/// second stage `Y` on `(1, D)`.
pub fn fit_standard_iv(data: &Dataset) -> Result<(Regression, Regression)> {
    let first = just_identified(data, D.1, &[ONE, Z], &[ONE, Z])?.0;
    let second = just_identified(data, |r| r.y, &[ONE, D], &[ONE, Z])?.0;
    Ok((first, second))
}

/// OLS, standard IV, and quasi-IV estimates side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearComparison {
    pub ols: Option<Regression>,
    pub iv_first_stage: Option<Regression>,
    pub iv: Option<Regression>,
    pub quasi_iv: LinearFit,
}

pub fn compare_linear(data: &Dataset, with_ols: bool, with_iv: bool) -> Result<LinearComparison> {
    let quasi_iv = fit_linear_2sls(data)?;
    let ols = if with_ols { Some(fit_ols(data)?) } else { None };
    let (iv_first_stage, iv) = if with_iv {
        let (f, s) = fit_standard_iv(data)?;
        (Some(f), Some(s))
    } else {
        (None, None)
    };
    Ok(LinearComparison {
        ols,
        iv_first_stage,
        iv,
        quasi_iv,
    })
}

fn stars(t: f64) -> &'static str {
    let t = t.abs();
    if t >= 2.576 {
        "***"
    } else if t >= 1.960 {
        "**"
    } else if t >= 1.645 {
        "*"
    } else {
        ""
    }
}

impl LinearComparison {
    /// Plain-text table with columns OLS | IV (1st, 2nd) | quasi-IV (1st, 2nd).
    pub fn render_table(&self) -> String {
        let qi = &self.quasi_iv;
        let cols: [Option<&Regression>; 5] = [
            self.ols.as_ref(),
            self.iv_first_stage.as_ref(),
            self.iv.as_ref(),
            Some(&qi.first_stage.regression),
            Some(&qi.second_stage),
        ];
        let cell = |reg: Option<&Regression>, name: &str| -> (String, String) {
            match reg.and_then(|r| Some((r.coef(name)?, r.se(name)?))) {
                Some((c, s)) => (format!("{c:.4}{}", stars(c / s)), format!("({s:.4})")),
                None => (String::new(), String::new()),
            }
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22}{:>14}{:>14}{:>14}{:>14}{:>14}",
            "", "OLS", "IV 1st", "IV 2nd", "quasi-IV 1st", "quasi-IV 2nd"
        );
        for (label, name) in [
            ("Treatment D", "D"),
            ("Excluded Z", "Z"),
            ("Exogenous W", "W"),
            ("Interaction Z*W", "Z*W"),
        ] {
            let cells: Vec<(String, String)> = cols
                .iter()
                .enumerate()
                // the treatment is a regressor only in second stages and OLS
                .map(|(i, reg)| {
                    if name == "D" && (i == 1 || i == 3) {
                        Default::default()
                    } else {
                        cell(*reg, name)
                    }
                })
                .collect();
            let _ = write!(out, "{label:<22}");
            for c in &cells {
                let _ = write!(out, "{:>14}", c.0);
            }
            let _ = write!(out, "\n{:<22}", "");
            for c in &cells {
                let _ = write!(out, "{:>14}", c.1);
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "first-stage interaction F = {:.2}{}; observations = {}",
            qi.first_stage.interaction_f,
            if qi.first_stage.weak_iv {
                " (weak instrument)"
            } else {
                ""
            },
            qi.second_stage.n
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Row, Supports};

    #[test]
    fn interaction_f_is_squared_t() {
        // first-stage interaction 2.7197 with robust SE 0.4747
        let t: f64 = 2.7197 / 0.4747;
        assert!((t * t - 32.82).abs() < 0.01);
    }

    #[test]
    fn stars_follow_normal_critical_values() {
        assert_eq!(stars(3.0), "***");
        assert_eq!(stars(-2.0), "**");
        assert_eq!(stars(1.7), "*");
        assert_eq!(stars(1.0), "");
    }

    #[test]
    fn ols_recovers_exact_line() {
        let rows: Vec<Row> = (0..30)
            .map(|i| {
                let d = 1 + (i % 3) as u32;
                Row {
                    y: 0.5 + 1.5 * d as f64,
                    d,
                    w: 1,
                    z: 1,
                }
            })
            .collect();
        let ds = Dataset::new(rows, Supports::new(3, 1, 1).unwrap()).unwrap();
        let r = fit_ols(&ds).unwrap();
        assert!((r.coefficients[0] - 0.5).abs() < 1e-12);
        assert!((r.coefficients[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn singular_instruments_name_the_direction() {
        // W constant: the W instrument duplicates the constant
        let rows: Vec<Row> = (0..30)
            .map(|i| Row {
                y: i as f64,
                d: 1 + (i % 2) as u32,
                w: 1,
                z: 1 + (i % 3) as u32,
            })
            .collect();
        let ds = Dataset::new(rows, Supports::new(2, 2, 3).unwrap()).unwrap();
        let err = fit_linear_2sls(&ds).unwrap_err();
        assert!(err.to_string().contains("singular along"), "{err}");
    }
}
