//! Recovery of `h(d, w, .)` and `F_{U|Z}(. | z)` from the conditional law of
//! `(Y, D)` given `(W, Z)` by continuation in `u`.
//!
//! Unknowns at a level `u` are stacked as `eta = (h_{dw} for w, d; F_z for z)`
//! with `d` varying fastest, matching the column order of the relevance matrix.
//! Residual rows are `sum_d P(Y <= h_{dw}, D = d | w, z) - F_z` per `(w, z)`
//! followed by `sum_z F_z P(Z = z) - u`.

mod law;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use law::{empirical_law, ConditionalLaw, LawKind};

use crate::data::Supports;
use crate::error::{Error, Result};
use crate::linalg;

/// Newton and rank-check settings for [`solve_grid_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub newton_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Jacobian `sigma_min / sigma_max` below this is a rank deficiency.
    pub rank_tol: f64,
}

impl SolverOptions {
    pub fn for_kind(kind: LawKind) -> Self {
        let newton_tol = match kind {
            LawKind::Population => 1e-10,
            LawKind::Empirical => 1e-8,
        };
        Self {
            newton_tol,
            max_iter: 50,
            max_halvings: 20,
            rank_tol: 1e-8,
        }
    }
}

/// Per-grid-point solver trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub u: f64,
    pub iterations: usize,
    pub jacobian_min_sv: f64,
    pub jacobian_sv_ratio: f64,
}

/// Solution of the quantile system on a grid of levels `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSolution {
    pub supports: Supports,
    pub u_grid: Vec<f64>,
    /// `h_hat[w * d_card + d][k]`
    pub h_hat: Vec<Vec<f64>>,
    /// `f_hat[z][k]`
    pub f_hat: Vec<Vec<f64>>,
    pub z_marginal: Vec<f64>,
    pub residual_norms: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl QuantileSolution {
    pub fn h_values(&self, d: usize, w: usize) -> &[f64] {
        &self.h_hat[w * self.supports.d_card + d]
    }

    pub fn f_values(&self, z: usize) -> &[f64] {
        &self.f_hat[z]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long-format CSV `d,w,u,h_hat` with 1-based codes.
    pub fn write_h_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["d", "w", "u", "h_hat"])?;
        for w in 0..self.supports.w_card {
            for d in 0..self.supports.d_card {
                for (u, h) in self.u_grid.iter().zip(self.h_values(d, w)) {
                    wtr.write_record([
                        (d + 1).to_string(),
                        (w + 1).to_string(),
                        u.to_string(),
                        h.to_string(),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Long-format CSV `z,u,f_hat` with 1-based codes.
    pub fn write_f_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["z", "u", "f_hat"])?;
        for (z, f) in self.f_hat.iter().enumerate() {
            for (u, v) in self.u_grid.iter().zip(f) {
                wtr.write_record([(z + 1).to_string(), u.to_string(), v.to_string()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    fn state_at(&self, k: usize) -> Vec<f64> {
        self.h_hat.iter().chain(&self.f_hat).map(|v| v[k]).collect()
    }
}

/// Starting point of the continuation: `h(d, w, 0)` is the pooled infimum of
/// the `(d, w)` support and `F(0 | z) = 0`.
pub fn init_at_zero(law: &ConditionalLaw) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = law.supports();
    let mut h0 = Vec::with_capacity(s.d_card * s.w_card);
    for w in 0..s.w_card {
        for d in 0..s.d_card {
            let (lo, _) = law.support_bounds(d, w).ok_or_else(|| {
                Error::not_identified(
                    format!(
                        "(d={}, w={}) has zero probability at every z, so h(d, w, .) is not identified",
                        d + 1,
                        w + 1
                    ),
                    None,
                )
            })?;
            h0.push(lo);
        }
    }
    Ok((h0, vec![0.0; s.z_card]))
}

/// Exogenous guess at level `u`: `h(d, w, u)` is the `u`-quantile of the
/// `(d, w)` cells pooled over `z` with weights `P(Z = z)`, and `F(u | z) = u`.
fn pooled_quantile_guess(law: &ConditionalLaw, u: f64) -> Vec<f64> {
    let s = law.supports();
    let zm = law.z_marginal();
    let mut out = Vec::with_capacity(s.d_card * s.w_card + s.z_card);
    for w in 0..s.w_card {
        for d in 0..s.d_card {
            let pooled = |y: f64| {
                (0..s.z_card)
                    .map(|z| zm[z] * law.eval(d, w, z, y))
                    .sum::<f64>()
            };
            let total: f64 = (0..s.z_card).map(|z| zm[z] * law.mass(d, w, z)).sum();
            let (mut lo, mut hi) = law.support_bounds(d, w).unwrap_or((0.0, 0.0));
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if pooled(mid) < u * total {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            out.push(0.5 * (lo + hi));
        }
    }
    out.extend(std::iter::repeat_n(u, s.z_card));
    out
}

/// Terminal values: `h(d, w, 1)` is the pooled supremum and `F(1 | z) = 1`.
fn terminal(law: &ConditionalLaw) -> Result<Vec<f64>> {
    let s = law.supports();
    let mut out = Vec::with_capacity(s.d_card * s.w_card + s.z_card);
    for w in 0..s.w_card {
        for d in 0..s.d_card {
            let (_, hi) = law
                .support_bounds(d, w)
                .ok_or_else(|| Error::not_identified("empty (d, w) support", None))?;
            out.push(hi);
        }
    }
    out.extend(std::iter::repeat_n(1.0, s.z_card));
    Ok(out)
}

fn residual(law: &ConditionalLaw, eta: &[f64], u: f64) -> DVector<f64> {
    let s = law.supports();
    let n_h = s.d_card * s.w_card;
    let mut g = DVector::zeros(s.w_card * s.z_card + 1);
    for w in 0..s.w_card {
        for z in 0..s.z_card {
            let mut acc = -eta[n_h + z];
            for d in 0..s.d_card {
                acc += law.eval(d, w, z, eta[w * s.d_card + d]);
            }
            g[w * s.z_card + z] = acc;
        }
    }
    let total: f64 = (0..s.z_card)
        .map(|z| eta[n_h + z] * law.z_marginal()[z])
        .sum();
    g[s.w_card * s.z_card] = total - u;
    g
}

/// Jacobian of the residual, by forward differences of the law in the `h`
/// columns; the `F` columns are exact (`-I` above the last row, `P(Z)` in it).
pub fn jacobian(law: &ConditionalLaw, eta: &[f64]) -> DMatrix<f64> {
    assemble_jacobian(law, eta, |d, w, z, y| law.density(d, w, z, y))
}

/// Jacobian with the `h` columns taken from the law's smoothed slopes.
pub fn smoothed_jacobian(law: &ConditionalLaw, eta: &[f64]) -> DMatrix<f64> {
    assemble_jacobian(law, eta, |d, w, z, y| law.smoothed_slope(d, w, z, y))
}

fn assemble_jacobian(
    law: &ConditionalLaw,
    eta: &[f64],
    slope: impl Fn(usize, usize, usize, f64) -> f64,
) -> DMatrix<f64> {
    let s = law.supports();
    let n_h = s.d_card * s.w_card;
    let rows = s.w_card * s.z_card + 1;
    let mut j = DMatrix::zeros(rows, n_h + s.z_card);
    for w in 0..s.w_card {
        for d in 0..s.d_card {
            let col = w * s.d_card + d;
            for z in 0..s.z_card {
                j[(w * s.z_card + z, col)] = slope(d, w, z, eta[col]);
            }
        }
        for z in 0..s.z_card {
            j[(w * s.z_card + z, n_h + z)] = -1.0;
        }
    }
    for z in 0..s.z_card {
        j[(rows - 1, n_h + z)] = law.z_marginal()[z];
    }
    j
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Solved {
    eta: Vec<f64>,
    residual: f64,
    iterations: usize,
    min_sv: f64,
    sv_ratio: f64,
}

/// Damped (Gauss-)Newton at level `u` from `start`.
///
/// With `check_start` the Jacobian at `start` is rank-checked before any
/// step; the Jacobian at the accepted point is always checked.
fn newton(
    law: &ConditionalLaw,
    start: &[f64],
    u: f64,
    opts: &SolverOptions,
    check_start: bool,
) -> Result<Solved> {
    let s = law.supports();
    let square = s.w_card * s.z_card + 1 == s.d_card * s.w_card + s.z_card;
    let rank_check = |j: &DMatrix<f64>| -> Result<(f64, f64)> {
        let sv = linalg::singular_values(j);
        let (max, min) = (sv[0], *sv.last().unwrap());
        let ratio = if max > 0.0 { min / max } else { 0.0 };
        if ratio < opts.rank_tol || j.nrows() < j.ncols() {
            return Err(Error::RankDeficient {
                u,
                reason: format!(
                    "Jacobian sigma_min/sigma_max = {ratio:.3e} below {:.1e}",
                    opts.rank_tol
                ),
            });
        }
        Ok((min, ratio))
    };

    // rough empirical maps: the rank check and a second search direction
    // use smoothed slopes
    let smooth = law.has_smoothed_slopes();
    let rank_jacobian = |eta: &[f64]| {
        if smooth {
            smoothed_jacobian(law, eta)
        } else {
            jacobian(law, eta)
        }
    };

    let mut eta = start.to_vec();
    let mut g = residual(law, &eta, u);
    let mut norm = inf_norm(&g);
    let mut iterations = 0;
    let mut converged = norm <= opts.newton_tol;
    if check_start {
        rank_check(&rank_jacobian(&eta))?;
    }
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut best = search(law, &eta, &g, norm, u, &jacobian(law, &eta), opts)?;
        if smooth {
            let alt = search(law, &eta, &g, norm, u, &smoothed_jacobian(law, &eta), opts)?;
            if alt
                .as_ref()
                .is_some_and(|a| best.as_ref().is_none_or(|b| a.norm < b.norm))
            {
                best = alt;
            }
        }
        let Some(step) = best else { break };
        let scale = 1.0 + step.eta.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        eta = step.eta;
        g = step.g;
        norm = step.norm;
        converged = norm <= opts.newton_tol || (!square && step.size <= opts.newton_tol * scale);
    }
    // a piecewise-linear sample map can fold, leaving no exact root; a
    // residual below one observation's mass is as close as the data resolve
    if !converged && law.resolution().is_some_and(|r| norm <= r) {
        log::debug!("u = {u}: accepted at data resolution, residual {norm:.3e}");
        converged = true;
    }
    if !converged {
        return Err(Error::NoConvergence { u, residual: norm });
    }
    let (min_sv, sv_ratio) = rank_check(&rank_jacobian(&eta))?;
    Ok(Solved {
        eta,
        residual: norm,
        iterations,
        min_sv,
        sv_ratio,
    })
}

struct Accepted {
    eta: Vec<f64>,
    g: DVector<f64>,
    norm: f64,
    /// inf-norm of the accepted (damped) step
    size: f64,
}

/// Backtracking along the (least-squares) Newton direction of `j`;
/// `None` when no halving gives sufficient decrease.
fn search(
    law: &ConditionalLaw,
    eta: &[f64],
    g: &DVector<f64>,
    norm: f64,
    u: f64,
    j: &DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<Option<Accepted>> {
    let step = linalg::lstsq(j, &(-g))?;
    let mut t = 1.0;
    for _ in 0..=opts.max_halvings {
        let trial: Vec<f64> = eta
            .iter()
            .zip(step.iter())
            .map(|(e, d)| e + t * d)
            .collect();
        let g_trial = residual(law, &trial, u);
        let n_trial = inf_norm(&g_trial);
        if n_trial < (1.0 - 1e-4 * t) * norm || n_trial <= opts.newton_tol {
            let size = t * step.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            return Ok(Some(Accepted {
                eta: trial,
                g: g_trial,
                norm: n_trial,
                size,
            }));
        }
        t *= 0.5;
    }
    Ok(None)
}

/// Continuation over `u_grid` with default options for the law's kind.
pub fn solve_grid(
    law: &ConditionalLaw,
    u_grid: &[f64],
    newton_tol: f64,
    max_iter: usize,
) -> Result<QuantileSolution> {
    let opts = SolverOptions {
        newton_tol,
        max_iter,
        ..SolverOptions::for_kind(law.kind())
    };
    solve_grid_with(law, u_grid, &opts)
}

/// Continuation over `u_grid`, which must run from 0 to 1.
///
/// Each interior level is solved by damped Newton warm-started at the
/// previous level; the accepted point is then projected so that every `h`
/// and `F` path is nondecreasing. Level 1 is pinned to the support suprema.
pub fn solve_grid_with(
    law: &ConditionalLaw,
    u_grid: &[f64],
    opts: &SolverOptions,
) -> Result<QuantileSolution> {
    if u_grid.len() < 2 || u_grid[0] != 0.0 || u_grid[u_grid.len() - 1] != 1.0 {
        return Err(Error::invalid("u_grid must start at 0 and end at 1"));
    }
    if u_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("u_grid must be strictly increasing"));
    }
    if !(opts.newton_tol > 0.0 && opts.rank_tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::invalid(
            "solver tolerances and max_iter must be positive",
        ));
    }
    let s = law.supports();
    let n_h = s.d_card * s.w_card;
    let (h0, f0) = init_at_zero(law)?;
    let last = terminal(law)?;

    let mut states: Vec<Vec<f64>> = Vec::with_capacity(u_grid.len());
    let mut residual_norms = Vec::with_capacity(u_grid.len());
    let mut diagnostics = Vec::with_capacity(u_grid.len());
    let start: Vec<f64> = h0.into_iter().chain(f0).collect();
    residual_norms.push(inf_norm(&residual(law, &start, 0.0)));
    diagnostics.push(StepDiagnostics {
        u: 0.0,
        iterations: 0,
        jacobian_min_sv: f64::NAN,
        jacobian_sv_ratio: f64::NAN,
    });
    states.push(start);

    for (k, &u) in u_grid.iter().enumerate().skip(1) {
        let prev = &states[k - 1];
        if k == u_grid.len() - 1 {
            let mut eta = last.clone();
            for (e, p) in eta.iter_mut().zip(prev) {
                *e = e.max(*p);
            }
            residual_norms.push(inf_norm(&residual(law, &eta, u)));
            diagnostics.push(StepDiagnostics {
                u,
                iterations: 0,
                jacobian_min_sv: f64::NAN,
                jacobian_sv_ratio: f64::NAN,
            });
            states.push(eta);
            break;
        }
        // one-sided slopes vanish at the pooled infimum of empirical cells
        // whose own minimum lies higher, so that start is not rank-checked
        let first_empirical = k == 1 && law.kind() == LawKind::Empirical;
        let solved = if first_empirical {
            let guess: Vec<f64> = pooled_quantile_guess(law, u)
                .iter()
                .zip(prev)
                .map(|(g, p)| g.max(*p))
                .collect();
            newton(law, &guess, u, opts, false)?
        } else {
            newton(law, prev, u, opts, true)?
        };
        let mut eta = solved.eta;
        for (i, (e, p)) in eta.iter_mut().zip(prev).enumerate() {
            *e = e.max(*p);
            if i >= n_h {
                *e = e.min(1.0);
            }
        }
        residual_norms.push(solved.residual);
        diagnostics.push(StepDiagnostics {
            u,
            iterations: solved.iterations,
            jacobian_min_sv: solved.min_sv,
            jacobian_sv_ratio: solved.sv_ratio,
        });
        states.push(eta);
    }

    let h_hat = (0..n_h)
        .map(|i| states.iter().map(|st| st[i]).collect())
        .collect();
    let f_hat = (0..s.z_card)
        .map(|z| states.iter().map(|st| st[n_h + z]).collect())
        .collect();
    Ok(QuantileSolution {
        supports: s,
        u_grid: u_grid.to_vec(),
        h_hat,
        f_hat,
        z_marginal: law.z_marginal().to_vec(),
        residual_norms,
        diagnostics,
    })
}

/// Linear interpolation of `h_hat(d, w, .)` (0-based codes) at `u`.
pub fn evaluate(sol: &QuantileSolution, d: usize, w: usize, u: f64) -> Result<f64> {
    interpolate(
        sol,
        sol.h_values(d, w),
        d < sol.supports.d_card && w < sol.supports.w_card,
        u,
    )
}

/// Linear interpolation of `f_hat(. | z)` at `u`.
pub fn evaluate_f(sol: &QuantileSolution, z: usize, u: f64) -> Result<f64> {
    if z >= sol.supports.z_card {
        return Err(Error::invalid("z code outside support"));
    }
    interpolate(sol, sol.f_values(z), true, u)
}

fn interpolate(sol: &QuantileSolution, values: &[f64], in_support: bool, u: f64) -> Result<f64> {
    if !in_support {
        return Err(Error::invalid("code outside support"));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("u = {u} outside [0, 1]")));
    }
    let grid = &sol.u_grid;
    let i = grid.partition_point(|&g| g <= u).clamp(1, grid.len() - 1) - 1;
    let t = (u - grid[i]) / (grid[i + 1] - grid[i]);
    Ok(values[i] + t * (values[i + 1] - values[i]))
}

/// Solve the system directly at a single level `u in (0, 1)`, warm-started
/// from the nearest stored level below it. Returns `(h by (w, d), F by z)`.
pub fn resolve_at(
    law: &ConditionalLaw,
    sol: &QuantileSolution,
    u: f64,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::invalid("resolve_at needs u strictly inside (0, 1)"));
    }
    let k = sol.u_grid.partition_point(|&g| g <= u) - 1;
    let mut start = sol.state_at(k);
    if sol.u_grid[k] == u {
        let n_h = sol.h_hat.len();
        let f = start.split_off(n_h);
        return Ok((start, f));
    }
    let mut eta = newton(law, &start, u, opts, false)?.eta;
    let f = eta.split_off(sol.h_hat.len());
    Ok((eta, f))
}
