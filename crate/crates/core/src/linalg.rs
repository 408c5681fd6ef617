//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Ratio of smallest to largest singular value; the smallest is taken over
/// `min(rows, cols)` values, so a wide matrix is never reported as full column rank here.
pub fn min_sv_ratio(m: &DMatrix<f64>) -> f64 {
    let sv = singular_values(m);
    match (sv.first(), sv.last()) {
        (Some(&max), Some(&min)) if max > 0.0 => min / max,
        _ => 0.0,
    }
}

/// Minimum-norm least-squares solution of `a x = b` via SVD.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = max_sv * 1e-13 * (a.nrows().max(a.ncols()) as f64);
    svd.solve(b, eps)
        .map_err(|e| Error::Singular(format!("least-squares solve failed: {e}")))
}

/// Solve a square system by LU, failing when the matrix is numerically singular.
pub fn solve_square(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let ratio = min_sv_ratio(a);
    if ratio < 1e-13 {
        return Err(Error::Singular(format!(
            "{what} is singular (sigma_min/sigma_max = {ratio:.3e})"
        )));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular(format!("{what} is singular")))
}

pub fn inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let ratio = min_sv_ratio(a);
    if ratio < 1e-13 {
        return Err(Error::Singular(format!(
            "{what} is singular (sigma_min/sigma_max = {ratio:.3e})"
        )));
    }
    a.clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("{what} is singular")))
}

/// Minimise `|a x - b|^2` subject to the single linear constraint `c . x = 0`.
///
/// Solved through the bordered (KKT) system; `a` must have full column rank
/// on the constraint's null space.
pub fn lstsq_with_constraint(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DVector<f64>,
) -> Result<DVector<f64>> {
    let k = a.ncols();
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    let ata = a.transpose() * a;
    kkt.view_mut((0, 0), (k, k)).copy_from(&ata);
    for j in 0..k {
        kkt[(j, k)] = c[j];
        kkt[(k, j)] = c[j];
    }
    let mut rhs = DVector::zeros(k + 1);
    rhs.rows_mut(0, k).copy_from(&(a.transpose() * b));
    let sol = solve_square(&kkt, &rhs, "constrained least-squares system")?;
    Ok(sol.rows(0, k).into_owned())
}

/// Direction of the right singular vector for the smallest singular value.
pub fn null_direction(m: &DMatrix<f64>) -> Vec<f64> {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    v_t.row(idx).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constrained_solution_meets_constraint() {
        let a = DMatrix::from_row_slice(4, 3, &[1., 0., 1., 0., 1., 1., 1., 1., 0., 2., 1., 1.]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let c = DVector::from_vec(vec![0.3, 0.3, 0.4]);
        let x = lstsq_with_constraint(&a, &b, &c).unwrap();
        assert!(c.dot(&x).abs() < 1e-12);
    }

    #[test]
    fn singular_values_descending() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        assert_eq!(singular_values(&m), vec![3.0, 1.0]);
    }

    #[test]
    fn solve_square_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(solve_square(&m, &b, "m").is_err());
    }
}
