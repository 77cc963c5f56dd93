//! Small dense linear-algebra helpers shared by the regression and mixed
//! model code.

use nalgebra::{DMatrix, DVector};

/// Columns of `x` that are (numerically) linear combinations of earlier
/// columns, found by modified Gram–Schmidt. A column is dependent when its
/// residual norm falls below `rtol` times its original norm; all-zero
/// columns are always dependent.
pub fn dependent_columns(x: &DMatrix<f64>, rtol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            dependent.push(j);
            continue;
        }
        let mut r = col;
        for q in &basis {
            let proj = q.dot(&r);
            r.axpy(-proj, q, 1.0);
        }
        // second pass for numerical orthogonality
        for q in &basis {
            let proj = q.dot(&r);
            r.axpy(-proj, q, 1.0);
        }
        let rn = r.norm();
        if rn <= rtol * norm {
            dependent.push(j);
        } else {
            basis.push(r / rn);
        }
    }
    dependent
}

/// Solves `a x = b` for symmetric positive-definite `a`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.inverse())
}

/// Arithmetic mean and population standard deviation of a column.
pub fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
