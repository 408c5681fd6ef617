use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{categorical, check_prob_vector, check_sample_size, check_unit_grid, open01, row_rng};
use crate::data::{Dataset, Row, Supports};
use crate::error::{Error, Result};
use crate::normal;

/// JSON layout of an [`AdditiveDGP`].
///
/// The noise is `V = noise_scale[z] * Phi^{-1}(R)` with `R ~ U(0, 1)`
/// independent of `(W, Z)`, so `E[V | Z, W] = 0`. Selection is driven by the
/// same rank `R`, which is what makes `D` endogenous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveSpec {
    pub d_card: usize,
    pub w_card: usize,
    pub z_card: usize,
    /// `h[d][w]`
    pub h: Vec<Vec<f64>>,
    /// `g[z]`, centred: `sum_z g[z] P(Z = z) = 0`
    pub g: Vec<f64>,
    pub noise_scale: Vec<f64>,
    pub r_grid: Vec<f64>,
    /// `selection[w][z][k][d] = P(D = d | R = r_k, W = w, Z = z)`
    pub selection: Vec<Vec<Vec<Vec<f64>>>>,
    pub z_marginal: Vec<f64>,
    pub w_given_z: Vec<Vec<f64>>,
}

/// Additive model `Y = h(D, W) + g(Z) + V` with `E[V | Z, W] = 0`.
#[derive(Debug, Clone)]
pub struct AdditiveDGP {
    spec: AdditiveSpec,
    supports: Supports,
}

impl AdditiveDGP {
    pub fn from_spec(spec: AdditiveSpec) -> Result<Self> {
        let supports = Supports::new(spec.d_card, spec.w_card, spec.z_card)?;
        if spec.d_card < 2 || spec.w_card < 2 {
            return Err(Error::model(
                "degenerate support: |D| and |W| need at least two values",
            ));
        }
        if spec.h.len() != spec.d_card || spec.h.iter().any(|r| r.len() != spec.w_card) {
            return Err(Error::model("h table must be indexed [d][w]"));
        }
        if spec.g.len() != spec.z_card
            || spec.noise_scale.len() != spec.z_card
            || spec.z_marginal.len() != spec.z_card
            || spec.w_given_z.len() != spec.z_card
        {
            return Err(Error::model("z-indexed tables must have z_card entries"));
        }
        if spec
            .h
            .iter()
            .flatten()
            .chain(&spec.g)
            .any(|v| !v.is_finite())
        {
            return Err(Error::model("h and g must be finite"));
        }
        if spec
            .noise_scale
            .iter()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return Err(Error::model("noise_scale must be finite and non-negative"));
        }
        check_prob_vector(&spec.z_marginal, "z_marginal")?;
        for p in &spec.w_given_z {
            if p.len() != spec.w_card {
                return Err(Error::model("w_given_z rows must have w_card entries"));
            }
            check_prob_vector(p, "w_given_z")?;
        }
        let mean_g: f64 = spec
            .g
            .iter()
            .zip(&spec.z_marginal)
            .map(|(g, p)| g * p)
            .sum();
        if mean_g.abs() > 1e-12 {
            return Err(Error::model(format!(
                "g must be centred: E[g(Z)] = {mean_g:e}"
            )));
        }
        check_unit_grid(&spec.r_grid)?;
        if spec.selection.len() != spec.w_card
            || spec.selection.iter().any(|s| s.len() != spec.z_card)
        {
            return Err(Error::model("selection must be indexed [w][z][k][d]"));
        }
        for swz in spec.selection.iter().flatten() {
            if swz.len() != spec.r_grid.len() {
                return Err(Error::model(
                    "selection tables must have one row per grid point",
                ));
            }
            for p in swz {
                if p.len() != spec.d_card {
                    return Err(Error::model("selection vectors must have d_card entries"));
                }
                check_prob_vector(p, "selection")?;
            }
        }
        Ok(Self { spec, supports })
    }

    pub fn spec(&self) -> &AdditiveSpec {
        &self.spec
    }

    pub fn supports(&self) -> Supports {
        self.supports
    }

    pub fn h(&self, d: usize, w: usize) -> f64 {
        self.spec.h[d][w]
    }

    pub fn g(&self, z: usize) -> f64 {
        self.spec.g[z]
    }

    pub fn selection(&self, r: f64, w: usize, z: usize) -> Vec<f64> {
        let grid = &self.spec.r_grid;
        let table = &self.spec.selection[w][z];
        if r <= 0.0 {
            return table[0].clone();
        }
        if r >= 1.0 {
            return table[table.len() - 1].clone();
        }
        let i = grid.partition_point(|&g| g <= r) - 1;
        let t = (r - grid[i]) / (grid[i + 1] - grid[i]);
        table[i]
            .iter()
            .zip(&table[i + 1])
            .map(|(a, b)| a + t * (b - a))
            .collect()
    }

    /// `P(D = d | W = w, Z = z)`, exact trapezoid over the linear selection tables.
    pub fn propensity(&self, d: usize, w: usize, z: usize) -> f64 {
        let grid = &self.spec.r_grid;
        let table = &self.spec.selection[w][z];
        grid.windows(2)
            .enumerate()
            .map(|(k, s)| 0.5 * (s[1] - s[0]) * (table[k][d] + table[k + 1][d]))
            .sum()
    }

    /// `E[V 1{D = d} | W = w, Z = z]`, exact for linear selection segments.
    pub fn noise_mass(&self, d: usize, w: usize, z: usize) -> f64 {
        let grid = &self.spec.r_grid;
        let table = &self.spec.selection[w][z];
        let mut acc = 0.0;
        for (k, s) in grid.windows(2).enumerate() {
            let (r0, r1) = (s[0], s[1]);
            let slope = (table[k + 1][d] - table[k][d]) / (r1 - r0);
            let intercept = table[k][d] - slope * r0;
            acc += intercept * normal::quantile_integral(r0, r1)
                + slope * normal::weighted_quantile_integral(r0, r1);
        }
        self.spec.noise_scale[z] * acc
    }

    /// Closed-form `E[Y | W = w, Z = z] = sum_d p_{d|w,z} h(d, w) + g(z)`.
    pub fn conditional_mean(&self, w: usize, z: usize) -> f64 {
        (0..self.supports.d_card)
            .map(|d| self.propensity(d, w, z) * self.h(d, w))
            .sum::<f64>()
            + self.g(z)
    }

    /// One weighted row per support point `(d, w, z)` carrying `E[Y | d, w, z]`.
    ///
    /// All first and cross moments of `(Y, D, W, Z)` that are linear in `Y`
    /// coincide with the population ones.
    pub fn population_dataset(&self) -> Result<Dataset> {
        let s = self.supports;
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for z in 0..s.z_card {
            for w in 0..s.w_card {
                let pwz = self.spec.z_marginal[z] * self.spec.w_given_z[z][w];
                for d in 0..s.d_card {
                    let p = self.propensity(d, w, z);
                    let weight = pwz * p;
                    if weight <= 0.0 {
                        continue;
                    }
                    let y = self.h(d, w) + self.g(z) + self.noise_mass(d, w, z) / p;
                    rows.push(Row {
                        y,
                        d: d as u32 + 1,
                        w: w as u32 + 1,
                        z: z as u32 + 1,
                    });
                    weights.push(weight);
                }
            }
        }
        Dataset::weighted(rows, s, weights)
    }
}

pub fn simulate_additive(dgp: &AdditiveDGP, n: usize, seed: u64) -> Result<Dataset> {
    check_sample_size(n)?;
    let spec = &dgp.spec;
    let rows: Vec<Row> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = row_rng(seed, i);
            let z = categorical(&spec.z_marginal, open01(&mut rng));
            let w = categorical(&spec.w_given_z[z], open01(&mut rng));
            let r = open01(&mut rng);
            let d = categorical(&dgp.selection(r, w, z), open01(&mut rng));
            let v = spec.noise_scale[z] * normal::quantile(r);
            Row {
                y: dgp.h(d, w) + dgp.g(z) + v,
                d: d as u32 + 1,
                w: w as u32 + 1,
                z: z as u32 + 1,
            }
        })
        .collect();
    Dataset::new(rows, dgp.supports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::bundled;

    #[test]
    fn noiseless_exogenous_outcome_is_table_lookup() {
        let mut spec = bundled::linear_additive().spec().clone();
        spec.g = vec![0.0; spec.z_card];
        spec.noise_scale = vec![0.0; spec.z_card];
        let dgp = AdditiveDGP::from_spec(spec).unwrap();
        let ds = simulate_additive(&dgp, 500, 11).unwrap();
        for r in ds.rows() {
            assert_eq!(r.y, dgp.h(r.d as usize - 1, r.w as usize - 1));
        }
    }

    #[test]
    fn rejects_uncentred_g() {
        let mut spec = bundled::linear_additive().spec().clone();
        spec.g[0] += 0.1;
        assert!(AdditiveDGP::from_spec(spec).is_err());
    }

    #[test]
    fn population_rows_reproduce_conditional_means() {
        let dgp = bundled::linear_additive();
        let pop = dgp.population_dataset().unwrap();
        let s = dgp.supports();
        for w in 0..s.w_card {
            for z in 0..s.z_card {
                let (mut m, mut num) = (0.0, 0.0);
                for (wt, r) in pop.iter_weighted() {
                    if r.w as usize == w + 1 && r.z as usize == z + 1 {
                        m += wt;
                        num += wt * r.y;
                    }
                }
                assert!((num / m - dgp.conditional_mean(w, z)).abs() < 1e-12);
            }
        }
    }
}
