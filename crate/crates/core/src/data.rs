//! Observation tables `(y, d, w, z)` with 1-based discrete codes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub y: f64,
    pub d: u32,
    pub w: u32,
    pub z: u32,
}

/// Support sizes `|D|`, `|W|`, `|Z|`; codes run over `1..=card`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Supports {
    pub d_card: usize,
    pub w_card: usize,
    pub z_card: usize,
}

impl Supports {
    pub fn new(d_card: usize, w_card: usize, z_card: usize) -> Result<Self> {
        if d_card == 0 || w_card == 0 || z_card == 0 {
            return Err(Error::invalid("support sizes must be positive"));
        }
        Ok(Self {
            d_card,
            w_card,
            z_card,
        })
    }

    fn contains(&self, row: &Row) -> bool {
        (1..=self.d_card as u32).contains(&row.d)
            && (1..=self.w_card as u32).contains(&row.w)
            && (1..=self.z_card as u32).contains(&row.z)
    }
}

/// A sample, or a weighted population surrogate when `weights` is set.
///
/// Weighted datasets carry exact population moments (one row per support
/// point, weight = probability) and let every estimator run noise-free.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: Vec<Row>,
    supports: Supports,
    weights: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(rows: Vec<Row>, supports: Supports) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("dataset must contain at least one row"));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| !supports.contains(r)) {
            return Err(Error::invalid(format!(
                "row {i} has codes (d={}, w={}, z={}) outside supports {:?}",
                r.d, r.w, r.z, supports
            )));
        }
        if let Some(i) = rows.iter().position(|r| !r.y.is_finite()) {
            return Err(Error::invalid(format!("row {i} has a non-finite outcome")));
        }
        Ok(Self {
            rows,
            supports,
            weights: None,
        })
    }

    pub fn weighted(rows: Vec<Row>, supports: Supports, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != rows.len() {
            return Err(Error::invalid("weights length must match rows"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("weights must have positive total"));
        }
        let mut ds = Self::new(rows, supports)?;
        ds.weights = Some(weights);
        Ok(ds)
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn supports(&self) -> Supports {
        self.supports
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_weighted(&self) -> bool {
        self.weights.is_some()
    }

    /// Weight of row `i` (1 for unweighted data).
    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// Iterate `(weight, row)` pairs.
    pub fn iter_weighted(&self) -> impl Iterator<Item = (f64, &Row)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .map(move |(i, r)| (self.weight(i), r))
    }

    pub fn total_weight(&self) -> f64 {
        match &self.weights {
            Some(w) => w.iter().sum(),
            None => self.rows.len() as f64,
        }
    }

    /// Rows selected by index (with repetition), used by the bootstrap.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let rows = idx.iter().map(|&i| self.rows[i]).collect();
        let mut ds = Self::new(rows, self.supports)?;
        if let Some(w) = &self.weights {
            ds.weights = Some(idx.iter().map(|&i| w[i]).collect());
        }
        Ok(ds)
    }

    /// CSV with header `y,d,w,z`. Weights are not serialized.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["y", "d", "w", "z"])?;
        for r in &self.rows {
            wtr.write_record([
                format!("{}", r.y),
                r.d.to_string(),
                r.w.to_string(),
                r.z.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Read a `y,d,w,z` CSV. Supports default to the largest code seen per column.
    pub fn read_csv<R: Read>(input: R, supports: Option<Supports>) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let expected = ["y", "d", "w", "z"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
            return Err(Error::invalid(format!(
                "expected CSV header y,d,w,z, found {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<Row>().enumerate() {
            let row = rec.map_err(|e| Error::invalid(format!("CSV row {}: {e}", i + 1)))?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::invalid("CSV contains no observations"));
        }
        let supports = match supports {
            Some(s) => s,
            None => {
                let max = |f: fn(&Row) -> u32| rows.iter().map(f).max().unwrap_or(1) as usize;
                Supports::new(max(|r| r.d), max(|r| r.w), max(|r| r.z))?
            }
        };
        Self::new(rows, supports)
    }
}

/// Per-`(w, z)` cell tallies shared by several estimators.
#[derive(Debug, Clone)]
pub(crate) struct CellTable {
    pub w_card: usize,
    pub z_card: usize,
    pub d_card: usize,
    /// weight per (w, z)
    pub mass: Vec<f64>,
    /// weight per (d, w, z), index `(w * z_card + z) * d_card + d`
    pub d_mass: Vec<f64>,
    /// weighted sum of y per (w, z)
    pub y_sum: Vec<f64>,
    /// weighted sum of y per (d, w, z)
    pub yd_sum: Vec<f64>,
    /// row counts per (w, z)
    pub count: Vec<usize>,
}

impl CellTable {
    pub fn from_dataset(data: &Dataset) -> Self {
        let s = data.supports();
        let cells = s.w_card * s.z_card;
        let mut t = CellTable {
            w_card: s.w_card,
            z_card: s.z_card,
            d_card: s.d_card,
            mass: vec![0.0; cells],
            d_mass: vec![0.0; cells * s.d_card],
            y_sum: vec![0.0; cells],
            yd_sum: vec![0.0; cells * s.d_card],
            count: vec![0; cells],
        };
        for (wt, r) in data.iter_weighted() {
            let c = t.cell(r.w as usize - 1, r.z as usize - 1);
            let cd = c * s.d_card + r.d as usize - 1;
            t.mass[c] += wt;
            t.d_mass[cd] += wt;
            t.y_sum[c] += wt * r.y;
            t.yd_sum[cd] += wt * r.y;
            t.count[c] += 1;
        }
        t
    }

    #[inline]
    pub fn cell(&self, w: usize, z: usize) -> usize {
        w * self.z_card + z
    }

    pub fn propensity(&self, d: usize, w: usize, z: usize) -> Option<f64> {
        let c = self.cell(w, z);
        (self.mass[c] > 0.0).then(|| self.d_mass[c * self.d_card + d] / self.mass[c])
    }

    pub fn z_marginal(&self) -> Vec<f64> {
        let total: f64 = self.mass.iter().sum();
        (0..self.z_card)
            .map(|z| {
                (0..self.w_card)
                    .map(|w| self.mass[self.cell(w, z)])
                    .sum::<f64>()
                    / total
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let rows = vec![
            Row {
                y: 0.1,
                d: 1,
                w: 1,
                z: 1,
            },
            Row {
                y: -2.5e-7,
                d: 2,
                w: 2,
                z: 3,
            },
            Row {
                y: 1.0 / 3.0,
                d: 1,
                w: 2,
                z: 2,
            },
        ];
        Dataset::new(rows, Supports::new(2, 2, 3).unwrap()).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = tiny();
        let text = ds.to_csv_string().unwrap();
        assert!(text.starts_with("y,d,w,z\n"));
        let back = Dataset::read_csv(text.as_bytes(), Some(ds.supports())).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_codes_outside_support() {
        let rows = vec![Row {
            y: 0.0,
            d: 3,
            w: 1,
            z: 1,
        }];
        assert!(Dataset::new(rows, Supports::new(2, 2, 3).unwrap()).is_err());
        let rows = vec![Row {
            y: 0.0,
            d: 0,
            w: 1,
            z: 1,
        }];
        assert!(Dataset::new(rows, Supports::new(2, 2, 3).unwrap()).is_err());
    }

    #[test]
    fn rejects_empty_and_bad_header() {
        assert!(Dataset::new(vec![], Supports::new(1, 1, 1).unwrap()).is_err());
        assert!(Dataset::read_csv("a,b,c,d\n1,1,1,1\n".as_bytes(), None).is_err());
        assert!(Dataset::read_csv("y,d,w,z\n".as_bytes(), None).is_err());
    }

    #[test]
    fn cell_table_tallies() {
        let t = CellTable::from_dataset(&tiny());
        assert_eq!(t.propensity(1, 1, 2), Some(1.0));
        assert_eq!(t.propensity(0, 0, 1), None);
        let zm = t.z_marginal();
        assert!((zm.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
