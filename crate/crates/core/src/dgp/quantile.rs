use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{categorical, check_prob_vector, check_sample_size, check_unit_grid, open01, row_rng};
use crate::data::{Dataset, Row, Supports};
use crate::error::{Error, Result};
use crate::pwl::{self, PiecewiseLinear};
use crate::quantile_solver::{ConditionalLaw, LawKind};

/// JSON layout of a [`DiscreteQuantileDGP`]. All tables are tabulated on `u_grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSpec {
    pub d_card: usize,
    pub w_card: usize,
    pub z_card: usize,
    pub u_grid: Vec<f64>,
    /// `h[d][w][k] = h(d, w, u_k)`
    pub h: Vec<Vec<Vec<f64>>>,
    /// `fu_given_z[z][k] = F_{U|Z}(u_k | z)`
    pub fu_given_z: Vec<Vec<f64>>,
    pub z_marginal: Vec<f64>,
    /// `w_given_z[z][w] = P(W = w | Z = z)`
    pub w_given_z: Vec<Vec<f64>>,
    /// `selection[w][z][k][d] = P(D = d | U = u_k, W = w, Z = z)`
    pub selection: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Structural quantile model `Y = h(D, W, U)`, `U | Z ~ F_{U|Z}`, with
/// selection probabilities `p_{d|u,w,z}` on finite supports.
#[derive(Debug, Clone)]
pub struct DiscreteQuantileDGP {
    supports: Supports,
    u_grid: Vec<f64>,
    h: Vec<PiecewiseLinear>,
    fu: Vec<PiecewiseLinear>,
    z_marginal: Vec<f64>,
    w_given_z: Vec<Vec<f64>>,
    // [(w, z)][k][d]
    selection: Vec<Vec<Vec<f64>>>,
}

impl DiscreteQuantileDGP {
    pub fn from_spec(spec: QuantileSpec) -> Result<Self> {
        let QuantileSpec {
            d_card,
            w_card,
            z_card,
            u_grid,
            h,
            fu_given_z,
            z_marginal,
            w_given_z,
            selection,
        } = spec;
        if d_card < 2 || w_card < 2 {
            return Err(Error::model(format!(
                "degenerate support (|D| = {d_card}, |W| = {w_card}); both need at least two values"
            )));
        }
        let supports = Supports::new(d_card, w_card, z_card)?;
        check_unit_grid(&u_grid)?;
        let k = u_grid.len();

        if h.len() != d_card || h.iter().any(|hw| hw.len() != w_card) {
            return Err(Error::model("h table must be indexed [d][w][k]"));
        }
        let mut h_fns = Vec::with_capacity(d_card * w_card);
        for w in 0..w_card {
            for (d, hd) in h.iter().enumerate() {
                let f = PiecewiseLinear::new(u_grid.clone(), hd[w].clone())?;
                if !f.is_strictly_increasing() {
                    return Err(Error::model(format!(
                        "h(d={}, w={}, .) must be strictly increasing in u",
                        d + 1,
                        w + 1
                    )));
                }
                h_fns.push(f);
            }
        }

        check_prob_vector(&z_marginal, "z_marginal")?;
        if z_marginal.len() != z_card || fu_given_z.len() != z_card || w_given_z.len() != z_card {
            return Err(Error::model("z-indexed tables must have z_card entries"));
        }
        let mut fu = Vec::with_capacity(z_card);
        for (z, vals) in fu_given_z.into_iter().enumerate() {
            let f = PiecewiseLinear::new(u_grid.clone(), vals)?;
            if f.y_first() != 0.0 || f.y_last() != 1.0 {
                return Err(Error::model(format!(
                    "F_U|Z(.|{}) must satisfy F(0) = 0, F(1) = 1",
                    z + 1
                )));
            }
            if !f.is_strictly_increasing() {
                return Err(Error::model(format!(
                    "F_U|Z(.|{}) must be strictly increasing",
                    z + 1
                )));
            }
            fu.push(f);
        }
        for (i, &u) in u_grid.iter().enumerate() {
            let total: f64 = fu.iter().zip(&z_marginal).map(|(f, p)| f.ys()[i] * p).sum();
            if (total - u).abs() > 1e-10 {
                return Err(Error::model(format!(
                    "law of total probability violated at u = {u}: sum_z F(u|z) P(z) = {total}"
                )));
            }
        }
        for (z, p) in w_given_z.iter().enumerate() {
            if p.len() != w_card {
                return Err(Error::model("w_given_z rows must have w_card entries"));
            }
            check_prob_vector(p, &format!("w_given_z[z={}]", z + 1))?;
        }

        if selection.len() != w_card || selection.iter().any(|s| s.len() != z_card) {
            return Err(Error::model("selection must be indexed [w][z][k][d]"));
        }
        let mut sel = Vec::with_capacity(w_card * z_card);
        for (w, sw) in selection.into_iter().enumerate() {
            for (z, swz) in sw.into_iter().enumerate() {
                if swz.len() != k {
                    return Err(Error::model(
                        "selection tables must have one row per grid point",
                    ));
                }
                for (i, p) in swz.iter().enumerate() {
                    if p.len() != d_card {
                        return Err(Error::model("selection vectors must have d_card entries"));
                    }
                    check_prob_vector(
                        p,
                        &format!("selection[w={}][z={}][u={}]", w + 1, z + 1, u_grid[i]),
                    )?;
                }
                sel.push(swz);
            }
        }

        Ok(Self {
            supports,
            u_grid,
            h: h_fns,
            fu,
            z_marginal,
            w_given_z,
            selection: sel,
        })
    }

    /// Tabulate closures on `u_grid`. `selection(u, w, z)` returns the d-vector;
    /// indices passed to closures are 0-based.
    #[allow(clippy::too_many_arguments)]
    pub fn from_fns(
        d_card: usize,
        w_card: usize,
        z_card: usize,
        u_grid: &[f64],
        h: impl Fn(usize, usize, f64) -> f64,
        fu: impl Fn(usize, f64) -> f64,
        z_marginal: Vec<f64>,
        w_given_z: Vec<Vec<f64>>,
        selection: impl Fn(f64, usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let spec = QuantileSpec {
            d_card,
            w_card,
            z_card,
            u_grid: u_grid.to_vec(),
            h: (0..d_card)
                .map(|d| {
                    (0..w_card)
                        .map(|w| u_grid.iter().map(|&u| h(d, w, u)).collect())
                        .collect()
                })
                .collect(),
            fu_given_z: (0..z_card)
                .map(|z| u_grid.iter().map(|&u| fu(z, u)).collect())
                .collect(),
            z_marginal,
            w_given_z,
            selection: (0..w_card)
                .map(|w| {
                    (0..z_card)
                        .map(|z| u_grid.iter().map(|&u| selection(u, w, z)).collect())
                        .collect()
                })
                .collect(),
        };
        Self::from_spec(spec)
    }

    pub fn to_spec(&self) -> QuantileSpec {
        let s = self.supports;
        QuantileSpec {
            d_card: s.d_card,
            w_card: s.w_card,
            z_card: s.z_card,
            u_grid: self.u_grid.clone(),
            h: (0..s.d_card)
                .map(|d| {
                    (0..s.w_card)
                        .map(|w| self.h_fn(d, w).ys().to_vec())
                        .collect()
                })
                .collect(),
            fu_given_z: self.fu.iter().map(|f| f.ys().to_vec()).collect(),
            z_marginal: self.z_marginal.clone(),
            w_given_z: self.w_given_z.clone(),
            selection: (0..s.w_card)
                .map(|w| {
                    (0..s.z_card)
                        .map(|z| self.selection[w * s.z_card + z].clone())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn supports(&self) -> Supports {
        self.supports
    }

    pub fn u_grid(&self) -> &[f64] {
        &self.u_grid
    }

    pub fn z_marginal(&self) -> &[f64] {
        &self.z_marginal
    }

    pub fn w_given_z(&self) -> &[Vec<f64>] {
        &self.w_given_z
    }

    /// `h(d, w, .)` with 0-based indices.
    pub fn h_fn(&self, d: usize, w: usize) -> &PiecewiseLinear {
        &self.h[w * self.supports.d_card + d]
    }

    pub fn h(&self, d: usize, w: usize, u: f64) -> f64 {
        self.h_fn(d, w).eval(u)
    }

    pub fn fu_fn(&self, z: usize) -> &PiecewiseLinear {
        &self.fu[z]
    }

    pub fn fu(&self, z: usize, u: f64) -> f64 {
        self.fu[z].eval(u)
    }

    /// `p_{.|u,w,z}`, linearly interpolated in `u`.
    pub fn selection(&self, u: f64, w: usize, z: usize) -> Vec<f64> {
        let table = &self.selection[w * self.supports.z_card + z];
        let (i, t) = locate(&self.u_grid, u);
        if t == 0.0 {
            return table[i].clone();
        }
        table[i]
            .iter()
            .zip(&table[i + 1])
            .map(|(a, b)| a + t * (b - a))
            .collect()
    }

    /// `P(D = d | W = w, Z = z) = int p_{d|u,w,z} dF_{U|Z}(u|z)`, exact.
    pub fn propensity(&self, d: usize, w: usize, z: usize) -> f64 {
        self.cumulative_selection(d, w, z, 1.0)
    }

    /// `int_0^u p_{d|s,w,z} f_{U|Z}(s|z) ds`, exact for the piecewise-linear tables.
    pub fn cumulative_selection(&self, d: usize, w: usize, z: usize, u: f64) -> f64 {
        let table = &self.selection[w * self.supports.z_card + z];
        let f = &self.fu[z];
        let u = u.clamp(0.0, 1.0);
        let mut acc = 0.0;
        for k in 0..self.u_grid.len() - 1 {
            let (u0, u1) = (self.u_grid[k], self.u_grid[k + 1]);
            if u0 >= u {
                break;
            }
            let width = u1 - u0;
            let density = (f.ys()[k + 1] - f.ys()[k]) / width;
            let (p0, p1) = (table[k][d], table[k + 1][d]);
            let t = (u.min(u1) - u0).max(0.0);
            acc += density * (p0 * t + (p1 - p0) * t * t / (2.0 * width));
        }
        acc
    }

    /// Largest deviation `|sum_z F(u|z) P(z) - u|` over `grid`.
    pub fn total_probability_gap(&self, grid: &[f64]) -> f64 {
        grid.iter()
            .map(|&u| {
                let s: f64 = (0..self.supports.z_card)
                    .map(|z| self.fu(z, u) * self.z_marginal[z])
                    .sum();
                (s - u).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Segment index and fractional position of `u` in `grid`.
fn locate(grid: &[f64], u: f64) -> (usize, f64) {
    let n = grid.len();
    if u <= grid[0] {
        return (0, 0.0);
    }
    if u >= grid[n - 1] {
        return (n - 1, 0.0);
    }
    let i = grid.partition_point(|&g| g <= u) - 1;
    (i, (u - grid[i]) / (grid[i + 1] - grid[i]))
}

pub fn simulate_quantile(dgp: &DiscreteQuantileDGP, n: usize, seed: u64) -> Result<Dataset> {
    check_sample_size(n)?;
    let rows: Vec<Row> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = row_rng(seed, i);
            let z = categorical(&dgp.z_marginal, open01(&mut rng));
            let w = categorical(&dgp.w_given_z[z], open01(&mut rng));
            let u = dgp.fu[z].inverse(open01(&mut rng));
            let d = categorical(&dgp.selection(u, w, z), open01(&mut rng));
            Row {
                y: dgp.h(d, w, u),
                d: d as u32 + 1,
                w: w as u32 + 1,
                z: z as u32 + 1,
            }
        })
        .collect();
    Dataset::new(rows, dgp.supports)
}

/// Sub-intervals each DGP grid segment is split into when tabulating the law.
const LAW_REFINEMENT: usize = 16;

/// Population maps `y -> P(Y <= y, D = d | W = w, Z = z)`.
///
/// Each cell map is tabulated at the images `h(d, w, u)` of a refined u-grid
/// together with the points of `y_grid`, using the exact cumulative selection
/// integral, and interpolated linearly in between.
pub fn population_law(dgp: &DiscreteQuantileDGP, y_grid: &[f64]) -> Result<ConditionalLaw> {
    if y_grid.is_empty() {
        return Err(Error::invalid("y_grid must be non-empty"));
    }
    if y_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("y_grid must be sorted strictly increasing"));
    }
    let s = dgp.supports;
    let h_min = dgp
        .h
        .iter()
        .map(|f| f.y_first())
        .fold(f64::INFINITY, f64::min);
    let h_max = dgp
        .h
        .iter()
        .map(|f| f.y_last())
        .fold(f64::NEG_INFINITY, f64::max);
    if y_grid[0] > h_min || y_grid[y_grid.len() - 1] < h_max {
        return Err(Error::invalid(format!(
            "y_grid [{}, {}] does not cover the outcome range [{h_min}, {h_max}]",
            y_grid[0],
            y_grid[y_grid.len() - 1]
        )));
    }
    let fine_u: Vec<f64> = {
        let mut v = Vec::with_capacity((dgp.u_grid.len() - 1) * LAW_REFINEMENT + 1);
        for seg in dgp.u_grid.windows(2) {
            for j in 0..LAW_REFINEMENT {
                v.push(seg[0] + (seg[1] - seg[0]) * j as f64 / LAW_REFINEMENT as f64);
            }
        }
        v.push(1.0);
        v
    };

    let mut cells = Vec::with_capacity(s.w_card * s.z_card * s.d_card);
    for w in 0..s.w_card {
        for z in 0..s.z_card {
            for d in 0..s.d_card {
                let h = dgp.h_fn(d, w);
                let images: Vec<f64> = fine_u.iter().map(|&u| h.eval(u)).collect();
                let inside: Vec<f64> = y_grid
                    .iter()
                    .copied()
                    .filter(|&y| y > h.y_first() && y < h.y_last())
                    .collect();
                let ys = pwl::merge_grids(&images, &inside, 1e-13 * (1.0 + h_max.abs()));
                let vals: Vec<f64> = ys
                    .iter()
                    .map(|&y| dgp.cumulative_selection(d, w, z, h.inverse(y)))
                    .collect();
                cells.push(PiecewiseLinear::new(ys, vals)?);
            }
        }
    }
    ConditionalLaw::new(s, cells, dgp.z_marginal.clone(), None, LawKind::Population)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::bundled;

    #[test]
    fn rejects_degenerate_support() {
        let mut spec = bundled::quantile_2x2x3().to_spec();
        spec.w_card = 1;
        assert!(DiscreteQuantileDGP::from_spec(spec).is_err());
    }

    #[test]
    fn rejects_total_probability_violation() {
        let mut spec = bundled::quantile_2x2x3().to_spec();
        let mid = spec.u_grid.len() / 2;
        spec.fu_given_z[0][mid] += 1e-3;
        let err = DiscreteQuantileDGP::from_spec(spec).unwrap_err();
        assert!(err.to_string().contains("total probability"));
    }

    #[test]
    fn rejects_bad_selection() {
        let mut spec = bundled::quantile_2x2x3().to_spec();
        spec.selection[0][0][3] = vec![0.7, 0.7];
        assert!(DiscreteQuantileDGP::from_spec(spec).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let dgp = bundled::quantile_2x2x3();
        let text = serde_json::to_string(&dgp.to_spec()).unwrap();
        let back: QuantileSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, dgp.to_spec());
    }

    #[test]
    fn identity_outcome_returns_drawn_u() {
        let grid = pwl::unit_grid(11);
        let dgp = DiscreteQuantileDGP::from_fns(
            2,
            2,
            2,
            &grid,
            |_, _, u| u,
            |_, u| u,
            vec![0.5, 0.5],
            vec![vec![0.5, 0.5]; 2],
            |_, _, _| vec![0.5, 0.5],
        )
        .unwrap();
        let ds = simulate_quantile(&dgp, 4, 3).unwrap();
        for (i, r) in ds.rows().iter().enumerate() {
            assert!((0.0..=1.0).contains(&r.y));
            // replay the row stream: z, w, then u
            let mut rng = row_rng(3, i);
            let _ = open01(&mut rng);
            let _ = open01(&mut rng);
            let u = open01(&mut rng);
            assert!((r.y - u).abs() < 1e-15);
        }
    }

    #[test]
    fn cumulative_selection_matches_fine_quadrature() {
        let dgp = bundled::quantile_2x2x3();
        for (d, w, z) in [(0, 0, 0), (1, 1, 2), (0, 1, 1)] {
            let m = 200_000;
            let mut q = 0.0;
            for i in 0..m {
                let u = (i as f64 + 0.5) / m as f64 * 0.6;
                q += dgp.selection(u, w, z)[d] * dgp.fu_fn(z).slope(u) * 0.6 / m as f64;
            }
            assert!((dgp.cumulative_selection(d, w, z, 0.6) - q).abs() < 1e-8);
        }
    }

    #[test]
    fn population_law_limits_and_uniform_selection() {
        let grid = pwl::unit_grid(21);
        let dgp = DiscreteQuantileDGP::from_fns(
            2,
            2,
            3,
            &grid,
            |_, _, u| u,
            |z, u| u + [0.4, 0.0, -0.4][z] * u * (1.0 - u),
            vec![0.25, 0.5, 0.25],
            vec![vec![0.5, 0.5]; 3],
            |_, _, _| vec![0.5, 0.5],
        )
        .unwrap();
        let y_grid = pwl::unit_grid(101);
        let law = population_law(&dgp, &y_grid).unwrap();
        for z in 0..3 {
            for &y in &[0.1, 0.37, 0.8] {
                let expect = dgp.fu(z, y) / 2.0;
                assert!((law.eval(0, 1, z, y) - expect).abs() < 1e-12);
            }
            assert_eq!(law.eval(1, 0, z, -1.0), 0.0);
            assert!((law.eval(1, 0, z, 2.0) - 0.5).abs() < 1e-12);
        }
        assert!(population_law(&dgp, &[0.5, 0.2]).is_err());
        assert!(population_law(&dgp, &[0.2, 0.5]).is_err());
    }
}
