use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{CellTable, Dataset, Supports};
use crate::error::{Error, Result};
use crate::pwl::PiecewiseLinear;

/// Whether a law comes from a DGP (exact up to interpolation) or a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    Population,
    Empirical,
}

/// Joint law of `(Y, D)` given `(W, Z)` as per-cell sub-CDFs
/// `y -> P(Y <= y, D = d | W = w, Z = z)`.
///
/// Cells are indexed `(w * z_card + z) * d_card + d`, all 0-based. Each map is
/// nondecreasing from 0 to the cell mass `P(D = d | W = w, Z = z)`, and the
/// masses of a `(w, z)` cell sum to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalLaw {
    supports: Supports,
    cells: Vec<PiecewiseLinear>,
    z_marginal: Vec<f64>,
    /// observations per `(d, w, z)` cell for empirical laws
    counts: Option<Vec<usize>>,
    kind: LawKind,
    /// per-cell half-width of the secant used for smoothed slopes; empty
    /// for population laws
    #[serde(default)]
    slope_bandwidth: Vec<f64>,
}

const MASS_TOL: f64 = 1e-9;

impl ConditionalLaw {
    pub fn new(
        supports: Supports,
        cells: Vec<PiecewiseLinear>,
        z_marginal: Vec<f64>,
        counts: Option<Vec<usize>>,
        kind: LawKind,
    ) -> Result<Self> {
        let n_cells = supports.d_card * supports.w_card * supports.z_card;
        if cells.len() != n_cells {
            return Err(Error::invalid(format!(
                "law needs {n_cells} cells, got {}",
                cells.len()
            )));
        }
        if z_marginal.len() != supports.z_card {
            return Err(Error::invalid("z_marginal must have z_card entries"));
        }
        if counts.as_ref().is_some_and(|c| c.len() != n_cells) {
            return Err(Error::invalid("counts must have one entry per cell"));
        }
        for (i, c) in cells.iter().enumerate() {
            if !c.is_nondecreasing() || c.y_first() < 0.0 || c.y_first() > MASS_TOL {
                return Err(Error::invalid(format!(
                    "cell {i}: sub-CDF must be nondecreasing and start at 0"
                )));
            }
        }
        let law = Self {
            supports,
            cells,
            z_marginal,
            counts,
            kind,
            slope_bandwidth: Vec::new(),
        };
        for w in 0..supports.w_card {
            for z in 0..supports.z_card {
                let total: f64 = (0..supports.d_card).map(|d| law.mass(d, w, z)).sum();
                if (total - 1.0).abs() > MASS_TOL {
                    return Err(Error::invalid(format!(
                        "cell masses of (w={}, z={}) sum to {total}, not 1",
                        w + 1,
                        z + 1
                    )));
                }
            }
        }
        Ok(law)
    }

    #[inline]
    fn index(&self, d: usize, w: usize, z: usize) -> usize {
        (w * self.supports.z_card + z) * self.supports.d_card + d
    }

    pub fn supports(&self) -> Supports {
        self.supports
    }

    pub fn kind(&self) -> LawKind {
        self.kind
    }

    pub fn z_marginal(&self) -> &[f64] {
        &self.z_marginal
    }

    pub fn cell(&self, d: usize, w: usize, z: usize) -> &PiecewiseLinear {
        &self.cells[self.index(d, w, z)]
    }

    pub fn count(&self, d: usize, w: usize, z: usize) -> Option<usize> {
        self.counts.as_ref().map(|c| c[self.index(d, w, z)])
    }

    /// Largest probability carried by a single observation of any cell:
    /// the finest residual an empirical map can resolve. `None` for
    /// population laws.
    pub fn resolution(&self) -> Option<f64> {
        let counts = self.counts.as_ref()?;
        counts
            .iter()
            .zip(&self.cells)
            .filter(|(&n, _)| n > 0)
            .map(|(&n, c)| c.y_last() / n as f64)
            .reduce(f64::max)
    }

    /// `P(Y <= y, D = d | W = w, Z = z)`.
    pub fn eval(&self, d: usize, w: usize, z: usize, y: f64) -> f64 {
        self.cell(d, w, z).eval(y)
    }

    /// `P(D = d | W = w, Z = z)`.
    pub fn mass(&self, d: usize, w: usize, z: usize) -> f64 {
        self.cell(d, w, z).y_last()
    }

    /// Forward finite difference of the cell map at `y`.
    pub fn density(&self, d: usize, w: usize, z: usize, y: f64) -> f64 {
        let step = fd_step(y);
        let c = self.cell(d, w, z);
        (c.eval(y + step) - c.eval(y)) / step
    }

    /// Central secant slope over the cell's smoothing bandwidth.
    ///
    /// Between adjacent order statistics an empirical map has slope
    /// `1 / (n * gap)`, which is far too noisy to steer Newton; the secant
    /// averages over many gaps. Falls back to [`Self::density`] without a
    /// bandwidth.
    pub fn smoothed_slope(&self, d: usize, w: usize, z: usize, y: f64) -> f64 {
        match self.slope_bandwidth.get(self.index(d, w, z)) {
            Some(&b) if b > 0.0 => {
                let c = self.cell(d, w, z);
                (c.eval(y + b) - c.eval(y - b)) / (2.0 * b)
            }
            _ => self.density(d, w, z, y),
        }
    }

    pub fn has_smoothed_slopes(&self) -> bool {
        self.slope_bandwidth.iter().any(|&b| b > 0.0)
    }

    /// `[inf, sup]` of the support of `Y` given `D = d, W = w`, pooled over `z`;
    /// `None` when the `(d, w)` pair has no mass at any `z`.
    pub fn support_bounds(&self, d: usize, w: usize) -> Option<(f64, f64)> {
        let mut bounds: Option<(f64, f64)> = None;
        for z in 0..self.supports.z_card {
            let c = self.cell(d, w, z);
            if c.y_last() <= 0.0 {
                continue;
            }
            let lo = support_min(c);
            let hi = c.inverse(c.y_last());
            bounds = Some(match bounds {
                Some((a, b)) => (a.min(lo), b.max(hi)),
                None => (lo, hi),
            });
        }
        bounds
    }

    /// Largest distance between the two laws over all cells, measured at the
    /// union of both knot sets.
    pub fn sup_distance(&self, other: &ConditionalLaw) -> Result<f64> {
        if self.supports != other.supports {
            return Err(Error::invalid("laws have different supports"));
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.cells.iter().zip(&other.cells) {
            for &y in a.xs().iter().chain(b.xs()) {
                worst = worst.max((a.eval(y) - b.eval(y)).abs());
            }
        }
        Ok(worst)
    }
}

pub(crate) fn fd_step(y: f64) -> f64 {
    1e-8 * (1.0 + y.abs())
}

/// `sup { y : F(y) <= 0 }` for a nondecreasing piecewise-linear `F` with `F > 0` somewhere.
fn support_min(c: &PiecewiseLinear) -> f64 {
    let ys = c.ys();
    match ys.iter().position(|&v| v > 0.0) {
        Some(0) | None => c.x_min(),
        Some(i) => c.xs()[i - 1],
    }
}

/// Empirical law with per-cell sub-CDFs linearly interpolated between order statistics.
///
/// With `smoothing_width = 0` the knots are `(y_(i), (i - 1) / (n - 1))`, so
/// the map rises from 0 at the cell minimum to 1 at the cell maximum. With a
/// positive width every observation spreads its mass uniformly over a band
/// of that width centred on it, which keeps the map piecewise linear but
/// averages its slopes over neighbouring observations. Values are then
/// scaled by the cell mass. Weighted datasets use cumulative weights in
/// place of ranks.
pub fn empirical_law(data: &Dataset, smoothing_width: f64) -> Result<ConditionalLaw> {
    if !(smoothing_width.is_finite() && smoothing_width >= 0.0) {
        return Err(Error::invalid(
            "smoothing_width must be finite and non-negative",
        ));
    }
    let s = data.supports();
    let table = CellTable::from_dataset(data);
    let n_cells = s.d_card * s.w_card * s.z_card;
    let mut samples: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_cells];
    for (wt, r) in data.iter_weighted() {
        let (d, w, z) = (r.d as usize - 1, r.w as usize - 1, r.z as usize - 1);
        samples[(w * s.z_card + z) * s.d_card + d].push((r.y, wt));
    }
    for w in 0..s.w_card {
        for z in 0..s.z_card {
            if table.mass[table.cell(w, z)] <= 0.0 {
                return Err(Error::invalid(format!(
                    "no observations with (w={}, z={}); the conditional law is undefined there",
                    w + 1,
                    z + 1
                )));
            }
        }
    }
    let mut cells = Vec::with_capacity(n_cells);
    let mut counts = Vec::with_capacity(n_cells);
    let mut bandwidth = Vec::with_capacity(n_cells);
    for (idx, mut obs) in samples.into_iter().enumerate() {
        let d = idx % s.d_card;
        let wz = idx / s.d_card;
        counts.push(obs.len());
        if obs.is_empty() {
            warn!(
                "empty cell (d={}, w={}, z={}): mass set to 0",
                d + 1,
                wz / s.z_card + 1,
                wz % s.z_card + 1
            );
            cells.push(PiecewiseLinear::new(vec![0.0], vec![0.0])?);
            bandwidth.push(0.0);
            continue;
        }
        let mass = table.d_mass[idx] / table.mass[wz];
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        bandwidth.push(silverman_bandwidth(&obs).max(smoothing_width));
        cells.push(cell_ecdf(&obs, mass, smoothing_width)?);
    }
    let mut law = ConditionalLaw::new(
        s,
        cells,
        table.z_marginal(),
        Some(counts),
        LawKind::Empirical,
    )?;
    law.slope_bandwidth = bandwidth;
    Ok(law)
}

/// `0.9 min(sd, IQR / 1.34) n^(-1/5)` of sorted, unweighted values.
fn silverman_bandwidth(sorted: &[(f64, f64)]) -> f64 {
    let n = sorted.len();
    if n < 2 {
        return 0.0;
    }
    let mean = sorted.iter().map(|o| o.0).sum::<f64>() / n as f64;
    let sd = (sorted.iter().map(|o| (o.0 - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let iqr = sorted[(3 * n) / 4].0 - sorted[n / 4].0;
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (n as f64).powf(-0.2)
}

fn cell_ecdf(sorted: &[(f64, f64)], mass: f64, width: f64) -> Result<PiecewiseLinear> {
    let total: f64 = sorted.iter().map(|o| o.1).sum();
    let last_w = sorted[sorted.len() - 1].1;
    let mut xs = Vec::with_capacity(sorted.len() + 2);
    let mut ys = Vec::with_capacity(sorted.len() + 2);
    let mut push = |x: f64, v: f64| match xs.last() {
        // ties: keep the largest cumulative value (right continuity)
        Some(&prev) if x <= prev => *ys.last_mut().unwrap() = v,
        _ => {
            xs.push(x);
            ys.push(v);
        }
    };
    if width > 0.0 {
        // each observation spreads its mass uniformly over `y +- width / 2`
        let half = 0.5 * width;
        let mut events: Vec<(f64, f64)> = sorted
            .iter()
            .flat_map(|&(y, wt)| {
                let rate = mass * wt / (total * width);
                [(y - half, rate), (y + half, -rate)]
            })
            .collect();
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (mut value, mut rate, mut prev) = (0.0_f64, 0.0_f64, events[0].0);
        for (x, change) in events {
            // cancelled rates can round below zero; the map must not dip
            value = (value + rate.max(0.0) * (x - prev)).min(mass);
            push(x, value);
            rate += change;
            prev = x;
        }
        *ys.last_mut().unwrap() = mass;
    } else if sorted.len() == 1 || total - last_w <= 0.0 {
        let y = sorted[sorted.len() - 1].0;
        push(y, mass);
    } else {
        let mut before = 0.0;
        for &(y, wt) in sorted {
            push(y, mass * (before / (total - last_w)).min(1.0));
            before += wt;
        }
    }
    if ys[0] > 0.0 {
        // an atom at the minimum becomes a steep ramp ending there
        let x0 = xs[0];
        xs.insert(0, x0 - 1e-9 * (1.0 + x0.abs()));
        ys.insert(0, 0.0);
    }
    PiecewiseLinear::new(xs, ys)
}
