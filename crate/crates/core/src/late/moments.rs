use serde::{Deserialize, Serialize};

use crate::data::{CellTable, Dataset};
use crate::dgp::LateDGP;
use crate::error::{Error, Result};

/// First and mixed moments of `(Y, D)` in one `(w, z)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMoments {
    /// `P(D = 1 | w, z)`
    pub p: f64,
    /// `E[Y | w, z]`
    pub ey: f64,
    /// `E[Y D | w, z]`
    pub eyd: f64,
    /// `E[Y (1 - D) | w, z]`
    pub ey0: f64,
    /// rows behind the cell; 0 for population moments
    pub count: usize,
}

impl CellMoments {
    fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let mix = |x: f64, y: f64| x + t * (y - x);
        CellMoments {
            p: mix(a.p, b.p),
            ey: mix(a.ey, b.ey),
            eyd: mix(a.eyd, b.eyd),
            ey0: mix(a.ey0, b.ey0),
            count: a.count.min(b.count),
        }
    }
}

/// Source of cell moments indexed by W knot (0-based) and Z index.
///
/// Fractional knot positions address the segment between adjacent knots.
pub trait LateMoments: Sync {
    fn w_card(&self) -> usize;

    fn z_card(&self) -> usize;

    fn node(&self, w: usize, z: usize) -> Option<CellMoments>;

    /// Exact moments; local irrelevance is then tested with a tight tolerance.
    fn is_population(&self) -> bool;

    /// W value at knot position `pos`; sample moments use the 1-based code.
    fn w_value(&self, pos: f64) -> f64 {
        pos + 1.0
    }

    /// Moments at knot position `pos`, linear between knots.
    fn at(&self, pos: f64, z: usize) -> Option<CellMoments> {
        let (j, t) = split_position(pos, self.w_card())?;
        if t == 0.0 {
            return self.node(j, z);
        }
        let a = self.node(j, z)?;
        let b = self.node(j + 1, z)?;
        Some(CellMoments::lerp(&a, &b, t))
    }
}

/// `(j, t)` with `pos = j + t`, `t` in `[0, 1)`, except at the last knot.
pub(crate) fn split_position(pos: f64, w_card: usize) -> Option<(usize, f64)> {
    let last = w_card.checked_sub(1)? as f64;
    if !(0.0..=last).contains(&pos) {
        return None;
    }
    let j = pos.floor() as usize;
    if j as f64 == last {
        return Some((j, 0.0));
    }
    Some((j, pos - j as f64))
}

/// Cell moments of a dataset. A weighted dataset is read as a population law.
#[derive(Debug, Clone)]
pub struct SampleMoments {
    w_card: usize,
    z_card: usize,
    cells: Vec<Option<CellMoments>>,
    population: bool,
}

impl SampleMoments {
    /// Treatment code 2 is treated; the dataset must have binary D.
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let s = data.supports();
        if s.d_card != 2 {
            return Err(Error::invalid(format!(
                "LATE estimation needs binary treatment (codes 1, 2), got {} treatment values",
                s.d_card
            )));
        }
        let t = CellTable::from_dataset(data);
        let cells = (0..s.w_card * s.z_card)
            .map(|c| {
                let mass = t.mass[c];
                (mass > 0.0).then(|| CellMoments {
                    p: t.d_mass[2 * c + 1] / mass,
                    ey: t.y_sum[c] / mass,
                    eyd: t.yd_sum[2 * c + 1] / mass,
                    ey0: t.yd_sum[2 * c] / mass,
                    count: t.count[c],
                })
            })
            .collect();
        Ok(SampleMoments {
            w_card: s.w_card,
            z_card: s.z_card,
            cells,
            population: data.is_weighted(),
        })
    }
}

impl LateMoments for SampleMoments {
    fn w_card(&self) -> usize {
        self.w_card
    }

    fn z_card(&self) -> usize {
        self.z_card
    }

    fn node(&self, w: usize, z: usize) -> Option<CellMoments> {
        if w >= self.w_card || z >= self.z_card {
            return None;
        }
        self.cells[w * self.z_card + z]
    }

    fn is_population(&self) -> bool {
        self.population
    }
}

/// Closed-form moments of a [`LateDGP`], including between knots.
#[derive(Debug, Clone)]
pub struct PopulationMoments {
    dgp: LateDGP,
}

impl PopulationMoments {
    pub fn new(dgp: &LateDGP) -> Self {
        PopulationMoments { dgp: dgp.clone() }
    }

    fn at_value(&self, w: f64, z: usize) -> CellMoments {
        let (p, yd, y0) = self.dgp.moments_at(w, z);
        CellMoments {
            p,
            ey: yd + y0,
            eyd: yd,
            ey0: y0,
            count: 0,
        }
    }
}

impl LateMoments for PopulationMoments {
    fn w_card(&self) -> usize {
        self.dgp.w_values().len()
    }

    fn z_card(&self) -> usize {
        self.dgp.spec().z_card
    }

    fn node(&self, w: usize, z: usize) -> Option<CellMoments> {
        let v = *self.dgp.w_values().get(w)?;
        (z < self.z_card()).then(|| self.at_value(v, z))
    }

    fn is_population(&self) -> bool {
        true
    }

    fn w_value(&self, pos: f64) -> f64 {
        let xs = self.dgp.w_values();
        match split_position(pos, xs.len()) {
            Some((j, t)) if t > 0.0 => xs[j] + t * (xs[j + 1] - xs[j]),
            Some((j, _)) => xs[j],
            None => f64::NAN,
        }
    }

    fn at(&self, pos: f64, z: usize) -> Option<CellMoments> {
        split_position(pos, self.w_card())?;
        (z < self.z_card()).then(|| self.at_value(self.w_value(pos), z))
    }
}

/// Equal-frequency bin codes (1-based) for a continuous W, for use as the
/// `w` column of a dataset.
pub fn quantile_bins(values: &[f64], bins: usize) -> Result<Vec<u32>> {
    if bins == 0 || values.is_empty() {
        return Err(Error::invalid(
            "quantile_bins needs at least one value and one bin",
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("quantile_bins needs finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // upper edges at the k/bins empirical quantiles
    let edges: Vec<f64> = (1..bins)
        .map(|k| sorted[(k * n / bins).min(n - 1)])
        .collect();
    Ok(values
        .iter()
        .map(|v| edges.iter().filter(|&&e| *v >= e).count() as u32 + 1)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Row, Supports};
    use crate::dgp::bundled;

    #[test]
    fn split_position_handles_endpoints() {
        assert_eq!(split_position(0.0, 3), Some((0, 0.0)));
        assert_eq!(split_position(1.25, 3), Some((1, 0.25)));
        assert_eq!(split_position(2.0, 3), Some((2, 0.0)));
        assert_eq!(split_position(2.5, 3), None);
        assert_eq!(split_position(-0.1, 3), None);
    }

    #[test]
    fn sample_moments_split_outcomes_by_treatment() {
        let rows = vec![
            Row {
                y: 1.0,
                d: 2,
                w: 1,
                z: 1,
            },
            Row {
                y: 3.0,
                d: 1,
                w: 1,
                z: 1,
            },
            Row {
                y: 5.0,
                d: 1,
                w: 1,
                z: 1,
            },
            Row {
                y: 2.0,
                d: 2,
                w: 2,
                z: 1,
            },
        ];
        let data = Dataset::new(rows, Supports::new(2, 2, 1).unwrap()).unwrap();
        let m = SampleMoments::from_dataset(&data).unwrap();
        let c = m.node(0, 0).unwrap();
        assert!((c.p - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.ey - 3.0).abs() < 1e-15);
        assert!((c.eyd - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.ey0 - 8.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.count, 3);
        let mid = m.at(0.5, 0).unwrap();
        assert!((mid.p - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn population_moments_between_knots_use_the_dgp() {
        let dgp = bundled::late_mte(true);
        let m = PopulationMoments::new(&dgp);
        let pos = 3.4;
        let w = m.w_value(pos);
        assert!((w - 0.17).abs() < 1e-15);
        let c = m.at(pos, 0).unwrap();
        assert!((c.p - dgp.propensity_at(w, 0)).abs() < 1e-15);
        assert!((c.ey - c.eyd - c.ey0).abs() < 1e-15);
    }

    #[test]
    fn quantile_bins_are_balanced() {
        let v: Vec<f64> = (0..100).map(|i| (i as f64 * 7.3) % 10.0).collect();
        let codes = quantile_bins(&v, 4).unwrap();
        for b in 1..=4 {
            assert_eq!(codes.iter().filter(|&&c| c == b).count(), 25);
        }
    }
}
