//! Small dense linear-algebra helpers and the deterministic reduction used
//! throughout the crate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Leaf size of the pairwise summation tree.
const PAIRWISE_LEAF: usize = 8;

/// Sums `value(0) + ... + value(n - 1)` over a fixed binary tree.
///
/// Indices are split at `n / 2` recursively until a block holds at most eight
/// terms, which are then added left to right. The association order depends
/// only on `n`, so results are bit-identical however the caller schedules work.
pub fn pairwise_sum<F: Fn(usize) -> f64>(n: usize, value: F) -> f64 {
    pairwise_range(0, n, &value)
}

fn pairwise_range<F: Fn(usize) -> f64>(lo: usize, hi: usize, value: &F) -> f64 {
    let len = hi - lo;
    if len <= PAIRWISE_LEAF {
        let mut acc = 0.0;
        for i in lo..hi {
            acc += value(i);
        }
        acc
    } else {
        let mid = lo + len / 2;
        pairwise_range(lo, mid, value) + pairwise_range(mid, hi, value)
    }
}

/// Pairwise sum of a slice.
pub fn pairwise_sum_slice(values: &[f64]) -> f64 {
    pairwise_sum(values.len(), |i| values[i])
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Positive semidefinite up to `tol` on the smallest eigenvalue.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    min_eigenvalue(m) >= -tol
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).iter().all(|v| v.abs() <= tol)
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

/// Cholesky factor of a symmetric matrix, `None` when it is not numerically
/// positive definite.
pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m))
}

/// `xᵀ M y`.
pub fn bilinear(x: &DVector<f64>, m: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    x.dot(&(m * y))
}

/// `xᵀ M x` for a row-major slice `x`.
pub fn quad_form_slice(x: &[f64], m: &DMatrix<f64>) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += m[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

/// Parses a matrix literal: rows separated by `;`, entries by `,`.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>, String> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|e| {
                    let e = e.trim();
                    e.parse::<f64>()
                        .map_err(|err| format!("bad number `{e}`: {err}"))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let ncols = rows.first().map_or(0, Vec::len);
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("ragged or empty matrix `{text}`"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Formats a matrix in the same `;`/`,` syntax with round-trip precision.
pub fn format_matrix(m: &DMatrix<f64>) -> String {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| format!("{:?}", m[(i, j)]))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join(";")
}
