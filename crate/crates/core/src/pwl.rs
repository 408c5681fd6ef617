//! Piecewise-linear functions on a sorted knot grid.
//!
//! Structural functions (quantile functions, conditional CDFs, cell sub-CDFs)
//! are all stored in this representation. Evaluation outside the knot range
//! is flat: the function is clamped to its first and last values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PiecewiseLinear {
    /// Knots must be strictly increasing in `x` and finite.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::invalid(format!(
                "piecewise-linear function needs matching non-empty knots (got {} x, {} y)",
                xs.len(),
                ys.len()
            )));
        }
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("piecewise-linear knots must be finite"));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "piecewise-linear knots must be strictly increasing",
            ));
        }
        Ok(Self { xs, ys })
    }

    /// Tabulate `f` on `grid`.
    pub fn from_fn(grid: &[f64], f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid.to_vec(), grid.iter().map(|&x| f(x)).collect())
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn x_min(&self) -> f64 {
        self.xs[0]
    }

    pub fn x_max(&self) -> f64 {
        self.xs[self.xs.len() - 1]
    }

    pub fn y_first(&self) -> f64 {
        self.ys[0]
    }

    pub fn y_last(&self) -> f64 {
        self.ys[self.ys.len() - 1]
    }

    /// Index `i` of the segment `[x_i, x_{i+1}]` containing `x` (clamped).
    fn segment(&self, x: f64) -> usize {
        let n = self.xs.len();
        if n < 2 || x <= self.xs[0] {
            return 0;
        }
        if x >= self.xs[n - 1] {
            return n - 2;
        }
        // partition_point gives the first knot strictly greater than x
        self.xs.partition_point(|&k| k <= x) - 1
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if n == 1 || x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let i = self.segment(x);
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let t = (x - x0) / (x1 - x0);
        self.ys[i] + t * (self.ys[i + 1] - self.ys[i])
    }

    /// Slope of the segment containing `x`; zero outside the knot range.
    pub fn slope(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if n < 2 || x < self.xs[0] || x > self.xs[n - 1] {
            return 0.0;
        }
        let i = self.segment(x);
        (self.ys[i + 1] - self.ys[i]) / (self.xs[i + 1] - self.xs[i])
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.ys.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.ys.windows(2).all(|w| w[1] > w[0])
    }

    /// Generalized inverse `inf { x : f(x) >= y }` of a nondecreasing function.
    pub fn inverse(&self, y: f64) -> f64 {
        let n = self.ys.len();
        if y <= self.ys[0] {
            return self.xs[0];
        }
        if y > self.ys[n - 1] {
            return self.xs[n - 1];
        }
        let j = self.ys.partition_point(|&v| v < y);
        // ys[j-1] < y <= ys[j]
        let (y0, y1) = (self.ys[j - 1], self.ys[j]);
        let (x0, x1) = (self.xs[j - 1], self.xs[j]);
        if y1 == y0 {
            return x1;
        }
        x0 + (y - y0) / (y1 - y0) * (x1 - x0)
    }

    /// Integral of `f` over the full knot range (exact trapezoid).
    pub fn integral(&self) -> f64 {
        self.xs
            .windows(2)
            .zip(self.ys.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }
}

/// `n` equispaced points on `[0, 1]`, both endpoints included.
pub fn unit_grid(n: usize) -> Vec<f64> {
    assert!(n >= 2, "grid needs at least two points");
    let last = (n - 1) as f64;
    (0..n).map(|i| i as f64 / last).collect()
}

/// Merge sorted grids, dropping points closer than `tol` to their predecessor.
pub fn merge_grids(a: &[f64], b: &[f64], tol: f64) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    all.sort_by(|x, y| x.total_cmp(y));
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for x in all {
        match out.last() {
            Some(&prev) if x - prev <= tol => {}
            _ => out.push(x),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_clamps_and_interpolates() {
        let f = PiecewiseLinear::new(vec![0.0, 1.0, 3.0], vec![0.0, 2.0, 3.0]).unwrap();
        assert_eq!(f.eval(-1.0), 0.0);
        assert_eq!(f.eval(0.5), 1.0);
        assert_eq!(f.eval(2.0), 2.5);
        assert_eq!(f.eval(10.0), 3.0);
        assert_eq!(f.slope(0.5), 2.0);
        assert_eq!(f.slope(5.0), 0.0);
    }

    #[test]
    fn inverse_of_flat_section_is_leftmost() {
        let f = PiecewiseLinear::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 0.5, 0.5, 1.0]).unwrap();
        assert_eq!(f.inverse(0.25), 0.5);
        assert_eq!(f.inverse(0.5), 1.0);
        assert_eq!(f.inverse(0.75), 2.5);
        assert_eq!(f.inverse(-1.0), 0.0);
    }

    #[test]
    fn rejects_unsorted_knots() {
        assert!(PiecewiseLinear::new(vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(PiecewiseLinear::new(vec![], vec![]).is_err());
    }

    #[test]
    fn merge_drops_near_duplicates() {
        let g = merge_grids(&[0.0, 0.5, 1.0], &[0.5 + 1e-15, 0.75], 1e-12);
        assert_eq!(g, vec![0.0, 0.5, 0.75, 1.0]);
    }
}
