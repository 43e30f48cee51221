//! Dense helpers: Cholesky solves, SVD pseudoinverse, spectra and plain-text
//! matrix files.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Condition number above which the Cholesky path hands over to SVD.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Returns `None` when a pivot is not strictly positive.
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d.is_nan() || d <= 0.0 || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Some(Self { l })
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solve `A x = b` by forward then backward substitution.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.l.nrows();
        let mut x = b.clone();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Extreme eigenvalues `(λ_min, λ_max)` of a symmetric matrix.
pub fn eig_extremes(a: &DMatrix<f64>) -> (f64, f64) {
    let ev = symmetric_eigenvalues(a);
    (ev[0], ev[ev.len() - 1])
}

/// Relative tolerance below which singular values count as zero.
pub fn rank_tolerance(a: &DMatrix<f64>, largest_singular: f64) -> f64 {
    f64::EPSILON * a.nrows().max(a.ncols()) as f64 * largest_singular
}

/// Moore-Penrose pseudoinverse via a thin SVD, dropping singular values
/// below `tol` (default: [`rank_tolerance`]).
pub fn pseudoinverse(a: &DMatrix<f64>, tol: Option<f64>) -> DMatrix<f64> {
    let svd = SVD::new(a.clone(), true, true);
    let smax = svd.singular_values.max();
    let tol = tol.unwrap_or_else(|| rank_tolerance(a, smax));
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    for (k, &sv) in svd.singular_values.iter().enumerate() {
        if sv > tol {
            out += (v_t.row(k).transpose() / sv) * u.column(k).transpose();
        }
    }
    out
}

/// Singular values in descending order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = SVD::new(a.clone(), false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Orthonormal basis (as columns) of the null space of a wide matrix `a`.
///
/// `a` is padded with zero rows to a square matrix so that the SVD returns a
/// full set of right singular vectors.
pub fn null_space_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = a.shape();
    let n = r.max(c);
    let mut sq = DMatrix::zeros(n, c);
    sq.rows_mut(0, r).copy_from(a);
    let svd = SVD::new(sq, false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.max();
    let tol = rank_tolerance(a, smax);
    let cols: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &sv)| sv <= tol)
        .map(|(k, _)| v_t.row(k).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(c, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Write a matrix row-major, one row per line, space-separated.
pub fn write_matrix<W: Write>(mut w: W, a: &DMatrix<f64>) -> std::io::Result<()> {
    for i in 0..a.nrows() {
        let line: Vec<String> = a.row(i).iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_matrix<R: BufRead>(r: R) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|e| Error::ConfigParse {
                    line: idx + 1,
                    column: 0,
                    message: format!("bad number {t:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::dim("read_matrix row width", first.len(), row.len()));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
}
