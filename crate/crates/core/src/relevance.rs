//! Selection matrices for the joint-relevance condition and their rank diagnostics.
//!
//! Quantile and additive layouts share one block structure. Rows are indexed
//! by `(w, z)` with `z` fastest, then one centering row. Columns are the
//! `(w, d)` selection probabilities with `d` fastest, then one column per `z`:
//!
//! ```text
//!   [ P_W1   0   ...  s I ]
//!   [  0   P_W2  ...  s I ]
//!   [  0     0   ...  P_Z ]
//! ```
//!
//! where `P_Ww[z][d] = P(D = d | ., W = w, Z = z)` and `s = -1` (quantile)
//! or `+1` (additive).

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Supports};
use crate::dgp::DiscreteQuantileDGP;
use crate::error::{Error, Result};
use crate::linalg;

/// Population rank tolerance on `sigma_min / sigma_max`.
pub const POPULATION_RANK_TOL: f64 = 1e-8;
/// Rank tolerance for matrices estimated from a sample.
pub const SAMPLE_RANK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Quantile,
    Additive,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMatrix {
    pub entries: DMatrix<f64>,
    pub layout: Layout,
}

impl SelectionMatrix {
    pub fn n_rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.entries.ncols()
    }

    /// Row-major copy for serialization.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub n_rows: usize,
    pub n_cols: usize,
    /// descending
    pub singular_values: Vec<f64>,
    pub rank_estimate: usize,
    pub min_sv_ratio: f64,
    pub tolerance: f64,
    /// full column rank at `tolerance`
    pub verdict: bool,
}

/// Probability tables `[w][z][d]` plus `P(Z)` in the shared block layout.
fn assemble(
    probs: &[Vec<Vec<f64>>],
    z_marginal: &[f64],
    sign: f64,
    layout: Layout,
) -> Result<SelectionMatrix> {
    let w_card = probs.len();
    let z_card = z_marginal.len();
    if w_card == 0 || z_card == 0 {
        return Err(Error::invalid("selection tables must be non-empty"));
    }
    let d_card = probs[0].first().map_or(0, Vec::len);
    if d_card == 0
        || probs
            .iter()
            .any(|pw| pw.len() != z_card || pw.iter().any(|v| v.len() != d_card))
    {
        return Err(Error::invalid(
            "selection tables must be indexed [w][z][d] with consistent sizes",
        ));
    }
    for (w, pw) in probs.iter().enumerate() {
        for (z, p) in pw.iter().enumerate() {
            if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::invalid(format!(
                    "selection probabilities at (w={}, z={}) must lie in [0, 1]",
                    w + 1,
                    z + 1
                )));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "selection probabilities at (w={}, z={}) sum to {s}",
                    w + 1,
                    z + 1
                )));
            }
        }
    }
    let n_h = d_card * w_card;
    let rows = 1 + z_card * w_card;
    let mut m = DMatrix::zeros(rows, z_card + n_h);
    for w in 0..w_card {
        for z in 0..z_card {
            let r = w * z_card + z;
            for d in 0..d_card {
                m[(r, w * d_card + d)] = probs[w][z][d];
            }
            m[(r, n_h + z)] = sign;
        }
    }
    for z in 0..z_card {
        m[(rows - 1, n_h + z)] = z_marginal[z];
    }
    Ok(SelectionMatrix { entries: m, layout })
}

/// `M(u)` of the quantile model from the DGP's selection probabilities at `u`.
pub fn build_m_quantile(dgp: &DiscreteQuantileDGP, u: f64) -> Result<SelectionMatrix> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("u = {u} outside [0, 1]")));
    }
    let s = dgp.supports();
    let probs: Vec<Vec<Vec<f64>>> = (0..s.w_card)
        .map(|w| (0..s.z_card).map(|z| dgp.selection(u, w, z)).collect())
        .collect();
    assemble(&probs, dgp.z_marginal(), -1.0, Layout::Quantile)
}

/// Additive-model matrix from propensities `[w][z][d]` and `P(Z)`.
pub fn build_m_additive(
    propensities: &[Vec<Vec<f64>>],
    z_marginal: &[f64],
) -> Result<SelectionMatrix> {
    assemble(propensities, z_marginal, 1.0, Layout::Additive)
}

/// Estimated propensities `[w][z][d]` from a dataset; empty `(w, z)` cells are an error.
pub fn estimated_propensities(data: &Dataset) -> Result<Vec<Vec<Vec<f64>>>> {
    let t = crate::data::CellTable::from_dataset(data);
    let s = data.supports();
    (0..s.w_card)
        .map(|w| {
            (0..s.z_card)
                .map(|z| {
                    (0..s.d_card)
                        .map(|d| {
                            t.propensity(d, w, z).ok_or_else(|| {
                                Error::invalid(format!("empty cell (w={}, z={})", w + 1, z + 1))
                            })
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Closed-form determinant for binary `D` and `W` with three `Z` values.
///
/// `p_w1[z]` and `p_w2[z]` are `P(D = 1 | u, W = w, Z = z)`. The value equals
/// the determinant of the 7x7 quantile matrix when `P(Z)` sums to one.
pub fn det_2x2x3(p_w1: [f64; 3], p_w2: [f64; 3]) -> Result<f64> {
    if p_w1.iter().chain(&p_w2).any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid(
            "det_2x2x3 inputs must be probabilities in [0, 1]",
        ));
    }
    let [p11, p12, p13] = p_w1;
    let [p21, p22, p23] = p_w2;
    Ok(p11 * (p22 - p23) + p12 * (p23 - p21) + p13 * (p21 - p22))
}

/// Singular-value diagnostics; the verdict requires at least as many rows as
/// columns and `sigma_min / sigma_max > tolerance`.
pub fn rank_check(m: &SelectionMatrix, tolerance: f64) -> Result<RankReport> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::invalid("rank tolerance must be positive"));
    }
    let (rows, cols) = (m.n_rows(), m.n_cols());
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("rank check on an empty matrix"));
    }
    if m.entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let sv = linalg::singular_values(&m.entries);
    let max = sv[0];
    let rank = sv
        .iter()
        .filter(|&&s| max > 0.0 && s > tolerance * max)
        .count();
    let min_sv_ratio = if rows >= cols && max > 0.0 {
        sv[cols - 1] / max
    } else {
        0.0
    };
    Ok(RankReport {
        n_rows: rows,
        n_cols: cols,
        singular_values: sv,
        rank_estimate: rank,
        min_sv_ratio,
        tolerance,
        verdict: rows >= cols && min_sv_ratio > tolerance,
    })
}

/// Rank reports of `M(u)` over a grid of levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSweep {
    pub points: Vec<(f64, RankReport)>,
    /// levels where the verdict fails
    pub failing_u: Vec<f64>,
}

impl RankSweep {
    pub fn all_full_rank(&self) -> bool {
        self.failing_u.is_empty()
    }
}

pub fn sweep_rank(dgp: &DiscreteQuantileDGP, u_grid: &[f64], tolerance: f64) -> Result<RankSweep> {
    if u_grid.is_empty() {
        return Err(Error::invalid("u_grid must be non-empty"));
    }
    if u_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("u_grid must be sorted strictly increasing"));
    }
    let points: Vec<(f64, RankReport)> = u_grid
        .par_iter()
        .map(|&u| Ok((u, rank_check(&build_m_quantile(dgp, u)?, tolerance)?)))
        .collect::<Result<_>>()?;
    let failing_u: Vec<f64> = points
        .iter()
        .filter(|(_, r)| !r.verdict)
        .map(|(u, _)| *u)
        .collect();
    debug!(
        "rank sweep: {} of {} levels fail",
        failing_u.len(),
        points.len()
    );
    Ok(RankSweep { points, failing_u })
}

/// A basis function of the 1-based codes `(d, w, z)` used as numeric values.
///
/// `h` terms may depend on `(d, w)`, `g` terms on `z`, and instrument terms on `(w, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Term {
    /// `d^pd * w^pw * z^pz`
    Monomial {
        #[serde(default)]
        pd: u32,
        #[serde(default)]
        pw: u32,
        #[serde(default)]
        pz: u32,
    },
    /// `1{D = d, W = w, Z = z}` over the components that are set
    Indicator {
        #[serde(default)]
        d: Option<u32>,
        #[serde(default)]
        w: Option<u32>,
        #[serde(default)]
        z: Option<u32>,
    },
}

impl Term {
    pub const ONE: Term = Term::Monomial {
        pd: 0,
        pw: 0,
        pz: 0,
    };

    pub fn monomial(pd: u32, pw: u32, pz: u32) -> Self {
        Term::Monomial { pd, pw, pz }
    }

    pub fn eval(&self, d: u32, w: u32, z: u32) -> f64 {
        match *self {
            Term::Monomial { pd, pw, pz } => {
                (d as f64).powi(pd as i32) * (w as f64).powi(pw as i32) * (z as f64).powi(pz as i32)
            }
            Term::Indicator {
                d: dd,
                w: ww,
                z: zz,
            } => {
                let hit = dd.is_none_or(|v| v == d)
                    && ww.is_none_or(|v| v == w)
                    && zz.is_none_or(|v| v == z);
                if hit {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn uses(&self) -> (bool, bool, bool) {
        match *self {
            Term::Monomial { pd, pw, pz } => (pd > 0, pw > 0, pz > 0),
            Term::Indicator { d, w, z } => (d.is_some(), w.is_some(), z.is_some()),
        }
    }
}

/// Outcome basis `h`, centred-effect basis `g`, and instrument basis `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bases {
    pub h: Vec<Term>,
    pub g: Vec<Term>,
    pub l: Vec<Term>,
}

impl Bases {
    /// `h in {1, d, w}`, `g in {1, z}`, `l in {1, z, w, zw}`.
    pub fn linear() -> Self {
        Self {
            h: vec![Term::ONE, Term::monomial(1, 0, 0), Term::monomial(0, 1, 0)],
            g: vec![Term::ONE, Term::monomial(0, 0, 1)],
            l: vec![
                Term::ONE,
                Term::monomial(0, 0, 1),
                Term::monomial(0, 1, 0),
                Term::monomial(0, 1, 1),
            ],
        }
    }

    /// Saturated indicator bases on finite supports: `h` over every `(d, w)`,
    /// `g` over every `z`, `l` over every `(w, z)`.
    pub fn indicators(s: Supports) -> Self {
        let ind = |d: Option<usize>, w: Option<usize>, z: Option<usize>| Term::Indicator {
            d: d.map(|v| v as u32 + 1),
            w: w.map(|v| v as u32 + 1),
            z: z.map(|v| v as u32 + 1),
        };
        let mut h = Vec::new();
        for w in 0..s.w_card {
            for d in 0..s.d_card {
                h.push(ind(Some(d), Some(w), None));
            }
        }
        let g = (0..s.z_card).map(|z| ind(None, None, Some(z))).collect();
        let mut l = Vec::new();
        for w in 0..s.w_card {
            for z in 0..s.z_card {
                l.push(ind(None, Some(w), Some(z)));
            }
        }
        Self { h, g, l }
    }

    fn validate(&self) -> Result<()> {
        if self.h.is_empty() || self.g.is_empty() || self.l.is_empty() {
            return Err(Error::invalid("every basis needs at least one term"));
        }
        if self.h.iter().any(|t| t.uses().2) {
            return Err(Error::invalid("h basis terms may depend on (d, w) only"));
        }
        if self.g.iter().any(|t| t.uses().0 || t.uses().1) {
            return Err(Error::invalid("g basis terms may depend on z only"));
        }
        if self.l.iter().any(|t| t.uses().0) {
            return Err(Error::invalid("instrument terms may depend on (w, z) only"));
        }
        Ok(())
    }
}

/// Moment matrix, right-hand side `(E[Y l_k], 0)`, and the orthonormalized
/// instrument coefficients (`l~_k = sum_j coef[k][j] l_j`).
#[derive(Debug, Clone)]
pub(crate) struct PolynomialMoments {
    pub matrix: SelectionMatrix,
    pub rhs: DVector<f64>,
    pub instrument_coef: Vec<Vec<f64>>,
}

/// Gram-Schmidt on the instrument terms under the weighted `(W, Z)` law of
/// `data`. Numerically dependent terms are dropped.
fn orthonormalize(data: &Dataset, l: &[Term]) -> Vec<Vec<f64>> {
    let total = data.total_weight();
    let k = l.len();
    // Gram matrix of the raw terms
    let mut gram = DMatrix::<f64>::zeros(k, k);
    for (wt, r) in data.iter_weighted() {
        let v: Vec<f64> = l.iter().map(|t| t.eval(r.d, r.w, r.z)).collect();
        for i in 0..k {
            for j in 0..=i {
                gram[(i, j)] += wt * v[i] * v[j] / total;
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            gram[(j, i)] = gram[(i, j)];
        }
    }
    let inner = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                s += a[i] * gram[(i, j)] * b[j];
            }
        }
        s
    };
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..k {
        let mut v = vec![0.0; k];
        v[i] = 1.0;
        let raw_norm = inner(&v, &v).sqrt();
        // two passes keep the result orthogonal to rounding accuracy
        for _ in 0..2 {
            for b in &basis {
                let c = inner(&v, b);
                for (vj, bj) in v.iter_mut().zip(b) {
                    *vj -= c * bj;
                }
            }
        }
        let norm = inner(&v, &v).sqrt();
        if norm <= 1e-10 * raw_norm.max(1e-300) || norm == 0.0 {
            debug!("instrument term {i} is dependent on earlier terms; dropped");
            continue;
        }
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    basis
}

pub(crate) fn polynomial_moments(data: &Dataset, bases: &Bases) -> Result<PolynomialMoments> {
    bases.validate()?;
    let coef = orthonormalize(data, &bases.l);
    let r_l = coef.len();
    let (r_h, r_g) = (bases.h.len(), bases.g.len());
    let total = data.total_weight();
    let mut m = DMatrix::zeros(r_l + 1, r_h + r_g);
    let mut rhs = DVector::zeros(r_l + 1);
    for (wt, r) in data.iter_weighted() {
        let raw: Vec<f64> = bases.l.iter().map(|t| t.eval(r.d, r.w, r.z)).collect();
        let hv: Vec<f64> = bases.h.iter().map(|t| t.eval(r.d, r.w, r.z)).collect();
        let gv: Vec<f64> = bases.g.iter().map(|t| t.eval(r.d, r.w, r.z)).collect();
        let p = wt / total;
        for (k, c) in coef.iter().enumerate() {
            let lk: f64 = c.iter().zip(&raw).map(|(a, b)| a * b).sum();
            for (j, h) in hv.iter().enumerate() {
                m[(k, j)] += p * h * lk;
            }
            for (j, g) in gv.iter().enumerate() {
                m[(k, r_h + j)] += p * g * lk;
            }
            rhs[k] += p * r.y * lk;
        }
        for (j, g) in gv.iter().enumerate() {
            m[(r_l, r_h + j)] += p * g;
        }
    }
    Ok(PolynomialMoments {
        matrix: SelectionMatrix {
            entries: m,
            layout: Layout::Polynomial,
        },
        rhs,
        instrument_coef: coef,
    })
}

/// `(r_l + 1) x (r_h + r_g)` moment matrix with entries `E[h_j l~_k]`,
/// `E[g_j l~_k]` and bottom row `(0, ..., 0, E[g_j])`, where `l~` is the
/// instrument basis orthonormalized under the data's `(W, Z)` law.
pub fn build_m_polynomial(data: &Dataset, bases: &Bases) -> Result<SelectionMatrix> {
    Ok(polynomial_moments(data, bases)?.matrix)
}
