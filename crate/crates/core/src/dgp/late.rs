use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{categorical, check_prob_vector, check_sample_size, open01, row_rng};
use crate::data::{Dataset, Row, Supports};
use crate::error::{Error, Result};
use crate::normal;

/// Joint law of `(U_0, U_1, V)` given `Z = z`.
///
/// `V | Z ~ U(0, 1)` and `U_d = mu_d[z] + rho_d Phi^{-1}(V) + sigma_d e_d` with
/// independent standard normal `e_d`. The law depends on `z` only, so the
/// shocks are independent of `W` given `Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockSpec {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub rho0: f64,
    pub rho1: f64,
    pub sigma0: f64,
    pub sigma1: f64,
}

/// JSON layout of a [`LateDGP`]. `w_values` are the knots of the W support;
/// `g_index` and `h_levels` are interpolated linearly between knots when the
/// model is queried at non-knot values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateSpec {
    pub w_values: Vec<f64>,
    pub z_card: usize,
    pub z_marginal: Vec<f64>,
    /// `w_given_z[z][w]`
    pub w_given_z: Vec<Vec<f64>>,
    /// `g_index[w][z]`
    pub g_index: Vec<Vec<f64>>,
    /// `h_levels[d][w]` for `d in {0, 1}`
    pub h_levels: Vec<Vec<f64>>,
    pub shock: ShockSpec,
}

/// Binary-treatment model `Y_dw = h_dw + U_d`, `D = 1{g(W, Z) >= V}`.
///
/// Dataset coding: treatment code 1 is untreated, code 2 is treated.
#[derive(Debug, Clone)]
pub struct LateDGP {
    spec: LateSpec,
    supports: Supports,
}

impl LateDGP {
    pub fn from_spec(spec: LateSpec) -> Result<Self> {
        let wc = spec.w_values.len();
        if wc < 2 {
            return Err(Error::model("W support needs at least two values"));
        }
        if spec.w_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::model("w_values must be strictly increasing"));
        }
        let supports = Supports::new(2, wc, spec.z_card)?;
        let zc = spec.z_card;
        if spec.z_marginal.len() != zc || spec.w_given_z.len() != zc {
            return Err(Error::model("z-indexed tables must have z_card entries"));
        }
        check_prob_vector(&spec.z_marginal, "z_marginal")?;
        for p in &spec.w_given_z {
            if p.len() != wc {
                return Err(Error::model(
                    "w_given_z rows must have one entry per w value",
                ));
            }
            check_prob_vector(p, "w_given_z")?;
        }
        if spec.g_index.len() != wc || spec.g_index.iter().any(|r| r.len() != zc) {
            return Err(Error::model("g_index must be indexed [w][z]"));
        }
        if spec.h_levels.len() != 2 || spec.h_levels.iter().any(|r| r.len() != wc) {
            return Err(Error::model(
                "h_levels must be indexed [d][w] with d in {0, 1}",
            ));
        }
        let sh = &spec.shock;
        if sh.mu0.len() != zc || sh.mu1.len() != zc {
            return Err(Error::model("shock means must have z_card entries"));
        }
        if sh.sigma0 < 0.0 || sh.sigma1 < 0.0 {
            return Err(Error::model("shock scales must be non-negative"));
        }
        let finite = spec.g_index.iter().flatten().all(|v| !v.is_nan())
            && spec.h_levels.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::model("g_index and h_levels must be numeric"));
        }
        let dgp = Self { spec, supports };
        let p_treat: f64 = (0..zc)
            .map(|z| {
                dgp.spec.z_marginal[z]
                    * (0..wc)
                        .map(|w| dgp.spec.w_given_z[z][w] * dgp.propensity(w, z))
                        .sum::<f64>()
            })
            .sum();
        if p_treat <= 0.0 || p_treat >= 1.0 {
            return Err(Error::model(format!(
                "P(D = 1) = {p_treat} violates 0 < P(D = 1) < 1 (Assumption 4 (v))"
            )));
        }
        Ok(dgp)
    }

    pub fn spec(&self) -> &LateSpec {
        &self.spec
    }

    pub fn supports(&self) -> Supports {
        self.supports
    }

    pub fn w_values(&self) -> &[f64] {
        &self.spec.w_values
    }

    fn interp(&self, values: impl Fn(usize) -> f64, w: f64) -> f64 {
        let xs = &self.spec.w_values;
        let n = xs.len();
        if w <= xs[0] {
            return values(0);
        }
        if w >= xs[n - 1] {
            return values(n - 1);
        }
        let i = xs.partition_point(|&x| x <= w) - 1;
        let t = (w - xs[i]) / (xs[i + 1] - xs[i]);
        let (a, b) = (values(i), values(i + 1));
        a + t * (b - a)
    }

    /// `P(w, z) = F_{V|Z}(g(w, z))` at knot `w` (0-based).
    pub fn propensity(&self, w: usize, z: usize) -> f64 {
        self.spec.g_index[w][z].clamp(0.0, 1.0)
    }

    /// Propensity at an arbitrary W value (linear in the index between knots).
    pub fn propensity_at(&self, w: f64, z: usize) -> f64 {
        self.interp(|i| self.spec.g_index[i][z], w).clamp(0.0, 1.0)
    }

    pub fn h_level(&self, d: usize, w: usize) -> f64 {
        self.spec.h_levels[d][w]
    }

    pub fn h_level_at(&self, d: usize, w: f64) -> f64 {
        self.interp(|i| self.spec.h_levels[d][i], w)
    }

    /// `E[Y_1w - Y_0w | V = p, Z = z]`.
    pub fn mte(&self, w: f64, z: usize, p: f64) -> f64 {
        let sh = &self.spec.shock;
        self.h_level_at(1, w) - self.h_level_at(0, w) + sh.mu1[z] - sh.mu0[z]
            + (sh.rho1 - sh.rho0) * normal::quantile(p)
    }

    /// Analytic `(P(w,z), E[Y D | w,z], E[Y (1-D) | w,z])` at an arbitrary W value.
    pub fn moments_at(&self, w: f64, z: usize) -> (f64, f64, f64) {
        let sh = &self.spec.shock;
        let p = self.propensity_at(w, z);
        let tail = normal::pdf_at_quantile(p);
        // int_0^p Phi^{-1} = -phi(Phi^{-1}(p)), int_p^1 Phi^{-1} = +phi(Phi^{-1}(p))
        let yd = p * (self.h_level_at(1, w) + sh.mu1[z]) - sh.rho1 * tail;
        let y0 = (1.0 - p) * (self.h_level_at(0, w) + sh.mu0[z]) + sh.rho0 * tail;
        (p, yd, y0)
    }
}

pub fn simulate_late(dgp: &LateDGP, n: usize, seed: u64) -> Result<Dataset> {
    check_sample_size(n)?;
    let spec = &dgp.spec;
    let sh = &spec.shock;
    let rows: Vec<Row> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = row_rng(seed, i);
            let z = categorical(&spec.z_marginal, open01(&mut rng));
            let w = categorical(&spec.w_given_z[z], open01(&mut rng));
            let v = open01(&mut rng);
            let e0: f64 = StandardNormal.sample(&mut rng);
            let e1: f64 = StandardNormal.sample(&mut rng);
            let treated = spec.g_index[w][z] >= v;
            let x = normal::quantile(v);
            let y = if treated {
                spec.h_levels[1][w] + sh.mu1[z] + sh.rho1 * x + sh.sigma1 * e1
            } else {
                spec.h_levels[0][w] + sh.mu0[z] + sh.rho0 * x + sh.sigma0 * e0
            };
            Row {
                y,
                d: if treated { 2 } else { 1 },
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
    fn everyone_treated_is_rejected() {
        let mut spec = bundled::late_chain().spec().clone();
        for row in spec.g_index.iter_mut() {
            for g in row.iter_mut() {
                *g = 2.0;
            }
        }
        let err = LateDGP::from_spec(spec).unwrap_err();
        assert!(err.to_string().contains("Assumption 4"));
    }

    #[test]
    fn excluded_w_with_common_shock_gives_identical_outcomes() {
        let mut spec = bundled::late_chain().spec().clone();
        spec.h_levels = vec![vec![0.3; 3], vec![1.1; 3]];
        spec.shock.mu1 = spec.shock.mu0.clone();
        spec.shock.rho1 = spec.shock.rho0;
        spec.shock.sigma1 = spec.shock.sigma0;
        // two worlds that differ only in the value W takes
        let mut at_w1 = spec.clone();
        at_w1.w_given_z = vec![vec![1.0, 0.0, 0.0]; 3];
        let mut at_w3 = spec;
        at_w3.w_given_z = vec![vec![0.0, 0.0, 1.0]; 3];
        let a = simulate_late(&LateDGP::from_spec(at_w1).unwrap(), 3000, 5).unwrap();
        let b = simulate_late(&LateDGP::from_spec(at_w3).unwrap(), 3000, 5).unwrap();
        let mut compared = 0;
        for (ra, rb) in a.rows().iter().zip(b.rows()) {
            assert_eq!(ra.z, rb.z);
            assert_ne!(ra.w, rb.w);
            if ra.d == rb.d {
                assert_eq!(ra.y, rb.y);
                compared += 1;
            }
        }
        assert!(compared > 1000);
    }

    #[test]
    fn moments_at_knots_match_quadrature() {
        let dgp = bundled::late_chain();
        let sh = &dgp.spec().shock;
        for (w, z) in [(0usize, 0usize), (2, 1), (1, 2)] {
            let (p, yd, y0) = dgp.moments_at(dgp.w_values()[w], z);
            let m = 400_000;
            let (mut qd, mut q0) = (0.0, 0.0);
            for i in 0..m {
                let v = (i as f64 + 0.5) / m as f64;
                let x = normal::quantile(v);
                if v <= p {
                    qd += dgp.h_level(1, w) + sh.mu1[z] + sh.rho1 * x;
                } else {
                    q0 += dgp.h_level(0, w) + sh.mu0[z] + sh.rho0 * x;
                }
            }
            assert!((yd - qd / m as f64).abs() < 1e-5);
            assert!((y0 - q0 / m as f64).abs() < 1e-5);
        }
    }
}
