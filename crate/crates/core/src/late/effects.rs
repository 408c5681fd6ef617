use serde::{Deserialize, Serialize};

use super::graph::{
    build_irrelevance_graph, find_local_irrelevance, Hop, IrrelevanceGraph, IrrelevanceMatch,
    PropensityTable,
};
use super::moments::{split_position, CellMoments, LateMoments};
use crate::error::{Error, Result};

/// Slopes below this are treated as a flat propensity.
const FLAT_SLOPE: f64 = 1e-12;

/// Direct effects `(Delta_0, Delta_1)` of moving W, net of selection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectEffect {
    pub delta0: f64,
    pub delta1: f64,
}

impl DirectEffect {
    fn add(self, o: Self) -> Self {
        DirectEffect {
            delta0: self.delta0 + o.delta0,
            delta1: self.delta1 + o.delta1,
        }
    }

    fn lerp(self, o: Self, t: f64) -> Self {
        DirectEffect {
            delta0: self.delta0 + t * (o.delta0 - self.delta0),
            delta1: self.delta1 + t * (o.delta1 - self.delta1),
        }
    }
}

/// Direct effects summed along a path of linked W knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainedEffect {
    pub from: usize,
    pub to: usize,
    pub path: Vec<Hop>,
    pub effect: DirectEffect,
}

/// Complier effect at `w'` of moving W from `w` to `w'` at `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateEstimate {
    pub w: usize,
    pub w_prime: usize,
    pub z: usize,
    pub late: f64,
    pub se: Option<f64>,
    pub p: f64,
    pub p_prime: f64,
    /// `E[Y | w', z] - E[Y | w, z]`
    pub outcome_diff: f64,
    pub direct: DirectEffect,
    /// the `z*` used: closest propensities among the candidates
    pub z_star: IrrelevanceMatch,
    pub candidates: Vec<IrrelevanceMatch>,
}

impl LateEstimate {
    pub fn complier_share(&self) -> f64 {
        self.p_prime - self.p
    }

    /// `outcome_diff - [LATE (p' - p) + Delta_1 p + Delta_0 (1 - p)]`, zero by construction.
    pub fn decomposition_gap(&self) -> f64 {
        self.outcome_diff
            - (self.late * (self.p_prime - self.p)
                + self.direct.delta1 * self.p
                + self.direct.delta0 * (1.0 - self.p))
    }
}

/// Average effect at base `w` for units with `V` in `(p, p']` at `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedLate {
    pub w: usize,
    pub z: usize,
    pub p: f64,
    pub p_prime: f64,
    pub value: f64,
    pub se: Option<f64>,
    /// knot positions with propensity `p` and `p'`
    pub w_tilde: f64,
    pub w_tilde_prime: f64,
    pub direct_tilde: DirectEffect,
    pub direct_tilde_prime: DirectEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtePoint {
    pub p: f64,
    pub value: Option<f64>,
    pub se: Option<f64>,
    /// knot position with propensity `p`
    pub w_tilde: Option<f64>,
    pub skipped: Option<String>,
}

/// Marginal treatment effects at base `w`, approximated by generalized LATEs
/// over `(p - step/2, p + step/2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MteCurve {
    pub w: usize,
    pub z: usize,
    pub step: f64,
    pub points: Vec<MtePoint>,
}

impl MteCurve {
    pub fn evaluated(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points
            .iter()
            .filter_map(|pt| pt.value.map(|v| (pt.p, v)))
    }
}

/// Moments together with the propensity table and irrelevance graph they imply.
pub struct LateModel<'a> {
    moments: &'a dyn LateMoments,
    table: PropensityTable,
    graph: IrrelevanceGraph,
    epsilon: Option<f64>,
}

impl<'a> LateModel<'a> {
    /// `epsilon = None` uses the table default per pair.
    pub fn new(moments: &'a dyn LateMoments, epsilon: Option<f64>) -> Result<Self> {
        if let Some(e) = epsilon {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::invalid(format!(
                    "epsilon must be finite and >= 0, got {e}"
                )));
            }
        }
        let table = PropensityTable::from_moments(moments);
        let graph = build_irrelevance_graph(&table, epsilon);
        Ok(LateModel {
            moments,
            table,
            graph,
            epsilon,
        })
    }

    pub fn table(&self) -> &PropensityTable {
        &self.table
    }

    pub fn graph(&self) -> &IrrelevanceGraph {
        &self.graph
    }

    fn check_index(&self, w: usize, z: usize) -> Result<()> {
        if w >= self.table.w_card || z >= self.table.z_card {
            return Err(Error::invalid(format!(
                "W index {w} / Z index {z} outside supports of size {} / {}",
                self.table.w_card, self.table.z_card
            )));
        }
        Ok(())
    }

    fn cell(&self, pos: f64, z: usize) -> Result<CellMoments> {
        self.moments.at(pos, z).ok_or_else(|| {
            Error::invalid(format!(
                "no observations at W = {}, z = {}",
                pos + 1.0,
                z + 1
            ))
        })
    }

    /// `Delta_1 = (E[YD | to, z*] - E[YD | from, z*]) / P(to, z*)`,
    /// `Delta_0 = (E[Y(1-D) | to, z*] - E[Y(1-D) | from, z*]) / (1 - P(to, z*))`.
    pub fn direct_effect(&self, from: usize, to: usize, z_star: usize) -> Result<DirectEffect> {
        let a = self.cell(from as f64, z_star)?;
        let b = self.cell(to as f64, z_star)?;
        if !(b.p > 0.0 && b.p < 1.0) {
            return Err(Error::not_identified(
                format!(
                    "propensity at W = {}, z = {} is {}, not inside (0, 1)",
                    to + 1,
                    z_star + 1,
                    b.p
                ),
                None,
            ));
        }
        Ok(DirectEffect {
            delta1: (b.eyd - a.eyd) / b.p,
            delta0: (b.ey0 - a.ey0) / (1.0 - b.p),
        })
    }

    /// Sum of direct effects along the fewest-hop path from `from` to `to`.
    pub fn chained_direct_effect(&self, from: usize, to: usize) -> Result<ChainedEffect> {
        let path = self.graph.require_path(from, to)?;
        let effect = path.iter().try_fold(DirectEffect::default(), |acc, h| {
            Ok::<_, Error>(acc.add(self.direct_effect(h.from, h.to, h.z)?))
        })?;
        Ok(ChainedEffect {
            from,
            to,
            path,
            effect,
        })
    }

    /// Direct effect from knot `w` to knot position `pos`, linear between knots.
    fn effect_to_position(&self, w: usize, pos: f64) -> Result<DirectEffect> {
        let (j, t) = split_position(pos, self.table.w_card)
            .ok_or_else(|| Error::invalid(format!("W position {pos} outside the support")))?;
        let left = self.chained_direct_effect(w, j)?.effect;
        if t == 0.0 {
            return Ok(left);
        }
        let right = self.chained_direct_effect(w, j + 1)?.effect;
        Ok(left.lerp(right, t))
    }

    /// Complier effect of moving W from `w` to `w'` at `z`, netting out direct
    /// effects measured at the closest-propensity `z*`.
    pub fn late(&self, w: usize, w_prime: usize, z: usize) -> Result<LateEstimate> {
        self.check_index(w, z)?;
        self.check_index(w_prime, z)?;
        if w == w_prime {
            return Err(Error::invalid("LATE needs two distinct W values"));
        }
        let a = self.cell(w as f64, z)?;
        let b = self.cell(w_prime as f64, z)?;
        if b.p <= a.p {
            return Err(Error::not_identified(
                format!(
                    "no compliers in this direction: P(D=1 | w', z) = {} <= P(D=1 | w, z) = {}",
                    b.p, a.p
                ),
                None,
            ));
        }
        let candidates = find_local_irrelevance(&self.table, w, w_prime, self.epsilon);
        let Some(&z_star) = candidates.first() else {
            return Err(Error::AssumptionFailed(format!(
                "local irrelevance rejected: no z equalizes P(D=1 | W, z) at W knots {} and {} \
                 within the tolerance",
                w + 1,
                w_prime + 1
            )));
        };
        let direct = self.direct_effect(w, w_prime, z_star.z)?;
        let outcome_diff = b.ey - a.ey;
        let late = (outcome_diff - direct.delta1 * a.p - direct.delta0 * (1.0 - a.p)) / (b.p - a.p);
        Ok(LateEstimate {
            w,
            w_prime,
            z,
            late,
            se: None,
            p: a.p,
            p_prime: b.p,
            outcome_diff,
            direct,
            z_star,
            candidates,
        })
    }

    /// Knot position in the component of `w` where `P(., z) = target`.
    ///
    /// Without interpolation only knots qualify, within the tolerance of the
    /// table. With it, segments between linked knots are inverted linearly
    /// and the crossing closest to `near` wins.
    fn locate(
        &self,
        w: usize,
        z: usize,
        target: f64,
        interpolate: bool,
        near: Option<f64>,
    ) -> Result<f64> {
        let comp = self.graph.component(w);
        let in_comp = |k: usize| comp.binary_search(&k).is_ok();
        let mut candidates: Vec<f64> = Vec::new();
        if interpolate {
            for j in 0..self.table.w_card.saturating_sub(1) {
                if !(in_comp(j) && in_comp(j + 1)) {
                    continue;
                }
                let (Some(a), Some(b)) = (self.table.get(j, z), self.table.get(j + 1, z)) else {
                    continue;
                };
                if (b - a).abs() <= FLAT_SLOPE {
                    if (a - target).abs() <= FLAT_SLOPE {
                        candidates.push(j as f64);
                    }
                    continue;
                }
                let t = (target - a) / (b - a);
                if (0.0..=1.0).contains(&t) {
                    candidates.push(j as f64 + t);
                }
            }
        } else {
            for &k in &comp {
                let Some(p) = self.table.get(k, z) else {
                    continue;
                };
                let tol = self
                    .epsilon
                    .unwrap_or_else(|| self.node_tolerance(k, z, target));
                if (p - target).abs() <= tol {
                    candidates.push(k as f64);
                }
            }
        }
        let anchor = near.unwrap_or(w as f64);
        candidates
            .into_iter()
            .min_by(|a, b| {
                (a - anchor)
                    .abs()
                    .total_cmp(&(b - anchor).abs())
                    .then(a.total_cmp(b))
            })
            .ok_or_else(|| {
                Error::not_identified(
                    format!(
                        "no W value linked to W = {} has P(D=1 | W, z = {}) = {target}",
                        w + 1,
                        z + 1
                    ),
                    None,
                )
            })
    }

    fn node_tolerance(&self, k: usize, z: usize, target: f64) -> f64 {
        if self.table.population {
            return super::graph::POPULATION_EPSILON;
        }
        let n = self.moments.node(k, z).map_or(1, |c| c.count.max(1)) as f64;
        2.0 * (target * (1.0 - target) / n).sqrt()
    }

    /// `E[Y_{1w} - Y_{0w} | p < V <= p', Z = z]` for `w` and the `W` values
    /// linked to it.
    pub fn generalized_late(
        &self,
        w: usize,
        z: usize,
        p: f64,
        p_prime: f64,
        interpolate: bool,
    ) -> Result<GeneralizedLate> {
        self.generalized_late_near(w, z, p, p_prime, interpolate, None)
    }

    fn generalized_late_near(
        &self,
        w: usize,
        z: usize,
        p: f64,
        p_prime: f64,
        interpolate: bool,
        near: Option<f64>,
    ) -> Result<GeneralizedLate> {
        self.check_index(w, z)?;
        if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&p_prime) || p >= p_prime {
            return Err(Error::invalid(format!(
                "need 0 <= p < p' <= 1, got p = {p}, p' = {p_prime}"
            )));
        }
        let lo = self.locate(w, z, p, interpolate, near)?;
        let hi = self.locate(w, z, p_prime, interpolate, near)?;
        let (a, b) = (self.cell(lo, z)?, self.cell(hi, z)?);
        if (b.p - a.p).abs() <= f64::EPSILON {
            return Err(Error::not_identified(
                "matched W values have equal propensity",
                None,
            ));
        }
        let da = self.effect_to_position(w, lo)?;
        let db = self.effect_to_position(w, hi)?;
        let value = (b.ey - a.ey - db.delta1 * b.p + da.delta1 * a.p - db.delta0 * (1.0 - b.p)
            + da.delta0 * (1.0 - a.p))
            / (b.p - a.p);
        Ok(GeneralizedLate {
            w,
            z,
            p: a.p,
            p_prime: b.p,
            value,
            se: None,
            w_tilde: lo,
            w_tilde_prime: hi,
            direct_tilde: da,
            direct_tilde_prime: db,
        })
    }

    /// Generalized LATEs over `(p - step/2, p + step/2]` at each `p` in the
    /// grid. A point is evaluated only when `P(., z)` crosses `p` with nonzero
    /// slope strictly inside the span of the component of `w`.
    pub fn mte(&self, w: usize, z: usize, p_grid: &[f64], step: f64) -> Result<MteCurve> {
        self.check_index(w, z)?;
        if !(step > 0.0 && step < 1.0) {
            return Err(Error::invalid(format!(
                "MTE step must lie in (0, 1), got {step}"
            )));
        }
        let comp = self.graph.component(w);
        let (first, last) = (comp[0] as f64, comp[comp.len() - 1] as f64);
        let points = p_grid
            .iter()
            .map(|&p| {
                let skip = |reason: String, w_tilde: Option<f64>| MtePoint {
                    p,
                    value: None,
                    se: None,
                    w_tilde,
                    skipped: Some(reason),
                };
                let (lo, hi) = (p - step / 2.0, p + step / 2.0);
                if lo < 0.0 || hi > 1.0 {
                    return skip("window leaves [0, 1]".into(), None);
                }
                let pos = match self.locate(w, z, p, true, None) {
                    Ok(pos) => pos,
                    Err(e) => return skip(e.to_string(), None),
                };
                if pos <= first || pos >= last {
                    return skip(
                        "propensity reached only at the edge of the linked W set".into(),
                        Some(pos),
                    );
                }
                let j = (pos.floor() as usize).min(self.table.w_card - 2);
                let slope = match (self.table.get(j, z), self.table.get(j + 1, z)) {
                    (Some(a), Some(b)) => b - a,
                    _ => 0.0,
                };
                if slope.abs() <= FLAT_SLOPE {
                    return skip("propensity is flat in W here".into(), Some(pos));
                }
                match self.generalized_late_near(w, z, lo, hi, true, Some(pos)) {
                    Ok(g) => MtePoint {
                        p,
                        value: Some(g.value),
                        se: None,
                        w_tilde: Some(pos),
                        skipped: None,
                    },
                    Err(e) => skip(e.to_string(), Some(pos)),
                }
            })
            .collect();
        Ok(MteCurve { w, z, step, points })
    }
}
