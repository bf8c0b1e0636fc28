//! Dense row-major matrices, column standardization and the two regression
//! solvers used by graph inference (normal-equation OLS and cyclic
//! coordinate-descent lasso).

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Real matrix stored in row-major order.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Single-column matrix.
    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn select_columns(&self, cols: &[usize]) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, cols.len(), |r, k| self.get(r, cols[k]))
    }

    pub fn select_rows(&self, rows: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        DenseMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Permutes columns so that output column `k` is input column `perm[k]`.
    pub fn permute_columns(&self, perm: &[usize]) -> DenseMatrix {
        self.select_columns(perm)
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes the matrix as CSV with an optional header row.
    pub fn write_csv<W: Write>(&self, mut w: W, header: Option<&[String]>) -> std::io::Result<()> {
        if let Some(h) = header {
            writeln!(w, "{}", h.join(","))?;
        }
        let mut line = String::new();
        for r in 0..self.rows {
            line.clear();
            for (c, v) in self.row(r).iter().enumerate() {
                if c > 0 {
                    line.push(',');
                }
                line.push_str(&format_real(*v));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Reads a CSV matrix. A first row that does not parse as numbers is
    /// treated as the header.
    pub fn read_csv<R: Read>(r: R) -> Result<(Option<Vec<String>>, DenseMatrix)> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(r);
        let mut header = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, rec) in reader.records().enumerate() {
            let line = idx + 1;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            let parsed: std::result::Result<Vec<f64>, _> =
                rec.iter().map(|s| s.trim().parse::<f64>()).collect();
            match parsed {
                Ok(vals) => {
                    if let Some(first) = rows.first() {
                        if first.len() != vals.len() {
                            return Err(Error::Parse {
                                line,
                                message: format!(
                                    "expected {} fields, found {}",
                                    first.len(),
                                    vals.len()
                                ),
                            });
                        }
                    } else if let Some(h) = &header {
                        let h: &Vec<String> = h;
                        if h.len() != vals.len() {
                            return Err(Error::Parse {
                                line,
                                message: format!(
                                    "header has {} fields, row has {}",
                                    h.len(),
                                    vals.len()
                                ),
                            });
                        }
                    }
                    if let Some(bad) = vals.iter().position(|v| !v.is_finite()) {
                        return Err(Error::Parse {
                            line,
                            message: format!("non-finite value in column {bad}"),
                        });
                    }
                    rows.push(vals);
                }
                Err(e) => {
                    if idx == 0 {
                        header = Some(rec.iter().map(|s| s.trim().to_string()).collect());
                    } else {
                        return Err(Error::Parse {
                            line,
                            message: format!("non-numeric cell: {e}"),
                        });
                    }
                }
            }
        }
        let m = DenseMatrix::from_rows(&rows)?;
        Ok((header, m))
    }

    pub fn save_csv(&self, path: &Path, header: Option<&[String]>) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w, header)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<(Option<Vec<String>>, DenseMatrix)> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        DenseMatrix::read_csv(std::io::BufReader::new(f))
    }
}

/// Shortest decimal representation that parses back to the same `f64`.
pub(crate) fn format_real(v: f64) -> String {
    let s = format!("{v}");
    if s == "-0" {
        "0".to_string()
    } else {
        s
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
pub(crate) fn gemm(
    alpha: f64,
    a: &DenseMatrix,
    trans_a: bool,
    b: &DenseMatrix,
    trans_b: bool,
    beta: f64,
    c: &mut DenseMatrix,
) {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!((m, n), c.shape(), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.data.iter_mut().for_each(|v| *v = 0.0);
        } else {
            c.scale(beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: strides and extents describe exactly the backing buffers,
    // whose lengths were checked against the shapes above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Column-wise z-scoring with the population (1/n) variance. Constant
/// columns become all zeros.
pub fn standardize_columns(m: &DenseMatrix) -> Result<DenseMatrix> {
    if m.rows < 2 {
        return Err(Error::Dimension(format!(
            "standardization needs at least 2 rows, got {}",
            m.rows
        )));
    }
    let n = m.rows as f64;
    let mut out = m.clone();
    for c in 0..m.cols {
        let mean = (0..m.rows).map(|r| m.get(r, c)).sum::<f64>() / n;
        let var = (0..m.rows)
            .map(|r| {
                let d = m.get(r, c) - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        // Treat variance at rounding level as zero.
        let constant = !(sd > 1e-12 * mean.abs().max(1.0));
        for r in 0..m.rows {
            let v = if constant {
                0.0
            } else {
                (m.get(r, c) - mean) / sd
            };
            out.set(r, c, v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionResult {
    pub coefficients: Vec<f64>,
    pub residual_sum_squares: f64,
    pub iterations: usize,
    /// Set when the normal equations were singular and diagonal jitter was added.
    pub jittered: bool,
}

/// In-place Cholesky factorization of a symmetric matrix (lower triangle).
/// Fails when a pivot is not safely positive.
pub(crate) fn cholesky(a: &mut [f64], n: usize) -> bool {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let tiny = 1e-13 * scale;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > tiny) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L Lᵀ x = b` given the factor from [`cholesky`].
pub(crate) fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves the SPD system `gram · x = rhs`, adding diagonal jitter
/// (starting at 1e-10 relative to the largest diagonal entry) when the
/// factorization fails. Returns the solution and whether jitter was used.
pub(crate) fn solve_spd(gram: &[f64], n: usize, rhs: &[f64]) -> (Vec<f64>, bool) {
    let max_diag = (0..n).map(|i| gram[i * n + i].abs()).fold(0.0, f64::max).max(1.0);
    let mut jitter = 0.0;
    let mut attempt = 0;
    loop {
        let mut l = gram.to_vec();
        for i in 0..n {
            l[i * n + i] += jitter;
        }
        if cholesky(&mut l, n) {
            let mut x = rhs.to_vec();
            cholesky_solve(&l, n, &mut x);
            return (x, jitter > 0.0);
        }
        jitter = if jitter == 0.0 {
            1e-10 * max_diag
        } else {
            jitter * 100.0
        };
        attempt += 1;
        if attempt > 12 {
            // Degenerate beyond repair: fall back to the zero solution.
            return (vec![0.0; n], true);
        }
    }
}

fn residual_sum_squares(x: &DenseMatrix, y: &[f64], beta: &[f64]) -> f64 {
    (0..x.rows)
        .map(|r| {
            let fit: f64 = x.row(r).iter().zip(beta).map(|(a, b)| a * b).sum();
            let e = y[r] - fit;
            e * e
        })
        .sum()
}

/// Ordinary least squares (no intercept) via the normal equations.
pub fn ols_fit(x: &DenseMatrix, y: &[f64]) -> Result<RegressionResult> {
    if x.rows != y.len() {
        return Err(Error::Dimension(format!(
            "design has {} rows but response has {} values",
            x.rows,
            y.len()
        )));
    }
    if x.rows < x.cols {
        return Err(Error::Dimension(format!(
            "OLS needs rows >= cols, got {}x{}",
            x.rows, x.cols
        )));
    }
    let p = x.cols;
    let mut gram = DenseMatrix::zeros(p, p);
    gemm(1.0, x, true, x, false, 0.0, &mut gram);
    let mut xty = vec![0.0; p];
    for r in 0..x.rows {
        let yr = y[r];
        for (acc, v) in xty.iter_mut().zip(x.row(r)) {
            *acc += v * yr;
        }
    }
    let (beta, jittered) = solve_spd(gram.as_slice(), p, &xty);
    if jittered {
        log::warn!("ols_fit: singular normal equations, solved with diagonal jitter");
    }
    let rss = residual_sum_squares(x, y, &beta);
    Ok(RegressionResult {
        coefficients: beta,
        residual_sum_squares: rss,
        iterations: 1,
        jittered,
    })
}

pub fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

pub const LASSO_TOLERANCE: f64 = 1e-8;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

/// `(1/2n)‖y − xβ‖² + λ‖β‖₁`
pub fn lasso_objective(x: &DenseMatrix, y: &[f64], beta: &[f64], lambda_reg: f64) -> f64 {
    let n = x.rows.max(1) as f64;
    residual_sum_squares(x, y, beta) / (2.0 * n)
        + lambda_reg * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Cyclic coordinate-descent lasso without intercept, warm-started at zero.
pub fn lasso_fit(x: &DenseMatrix, y: &[f64], lambda_reg: f64) -> Result<RegressionResult> {
    lasso_fit_traced(x, y, lambda_reg, |_, _| {})
}

/// As [`lasso_fit`], calling `on_sweep(sweep, beta)` after every full sweep.
pub(crate) fn lasso_fit_traced(
    x: &DenseMatrix,
    y: &[f64],
    lambda_reg: f64,
    mut on_sweep: impl FnMut(usize, &[f64]),
) -> Result<RegressionResult> {
    if !(lambda_reg >= 0.0) || !lambda_reg.is_finite() {
        return Err(Error::Argument(format!(
            "lambda_reg must be finite and >= 0, got {lambda_reg}"
        )));
    }
    if x.rows != y.len() {
        return Err(Error::Dimension(format!(
            "design has {} rows but response has {} values",
            x.rows,
            y.len()
        )));
    }
    let n = x.rows as f64;
    let p = x.cols;
    let cols: Vec<Vec<f64>> = (0..p).map(|c| x.column(c)).collect();
    let sq_norm: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / n)
        .collect();
    let mut beta = vec![0.0; p];
    let mut resid = y.to_vec();
    let mut sweeps = 0;
    while sweeps < LASSO_MAX_SWEEPS {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for k in 0..p {
            if sq_norm[k] <= 0.0 {
                continue;
            }
            let col = &cols[k];
            let old = beta[k];
            let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / n
                + sq_norm[k] * old;
            let new = soft_threshold(rho, lambda_reg) / sq_norm[k];
            let delta = new - old;
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(col) {
                    *r -= a * delta;
                }
                beta[k] = new;
            }
            max_change = max_change.max(delta.abs());
        }
        on_sweep(sweeps, &beta);
        if max_change < LASSO_TOLERANCE {
            break;
        }
    }
    let rss = residual_sum_squares(x, y, &beta);
    Ok(RegressionResult {
        coefficients: beta,
        residual_sum_squares: rss,
        iterations: sweeps,
        jittered: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a = gaussian(4, 3, 1);
        let b = gaussian(4, 5, 2);
        let mut c = DenseMatrix::zeros(3, 5);
        gemm(1.0, &a, true, &b, false, 0.0, &mut c);
        let naive = a.transpose().matmul(&b).unwrap();
        let direct = DenseMatrix::from_fn(3, 5, |i, j| (0..4).map(|k| a.get(k, i) * b.get(k, j)).sum());
        assert!(c.max_abs_diff(&direct) < 1e-12);
        assert!(naive.max_abs_diff(&direct) < 1e-12);
        let mut d = DenseMatrix::zeros(3, 3);
        gemm(1.0, &a, true, &a.transpose(), true, 0.0, &mut d);
        let direct = DenseMatrix::from_fn(3, 3, |i, j| (0..4).map(|k| a.get(k, i) * a.get(k, j)).sum());
        assert!(d.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn standardize_constant_column_is_zero() {
        let m = DenseMatrix::from_rows(&[[1.0, 2.0], [1.0, 4.0], [1.0, 9.0]]).unwrap();
        let s = standardize_columns(&m).unwrap();
        assert_eq!(s.column(0), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn standardize_two_point_column() {
        // Population variance of [-1, 1] is 1, so the column is unchanged.
        let m = DenseMatrix::from_rows(&[[-1.0], [1.0]]).unwrap();
        let s = standardize_columns(&m).unwrap();
        assert_eq!(s.column(0), vec![-1.0, 1.0]);
        let m = DenseMatrix::from_rows(&[[3.0], [7.0]]).unwrap();
        let s = standardize_columns(&m).unwrap();
        assert_eq!(s.column(0), vec![-1.0, 1.0]);
    }

    #[test]
    fn standardize_removes_means() {
        let m = DenseMatrix::from_rows(&[[4.0, 7.0], [5.0, 10.0], [6.0, 13.0], [5.0, 10.0]]).unwrap();
        let s = standardize_columns(&m).unwrap();
        for c in 0..2 {
            let col = s.column(c);
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn standardize_needs_two_rows() {
        let m = DenseMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(standardize_columns(&m), Err(Error::Dimension(_))));
    }

    #[test]
    fn ols_identity_design() {
        let x = DenseMatrix::identity(3);
        let fit = ols_fit(&x, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(fit.coefficients, vec![1.0, 2.0, 3.0]);
        assert_eq!(fit.residual_sum_squares, 0.0);
    }

    #[test]
    fn ols_exact_line() {
        let x = DenseMatrix::column_vector(&[1.0, 2.0, 3.0]);
        let fit = ols_fit(&x, &[2.0, 4.0, 6.0]).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-14);
        assert!(fit.residual_sum_squares < 1e-24);
    }

    #[test]
    fn ols_recovers_planted_coefficients() {
        let x = gaussian(50, 3, 7);
        let truth = [0.5, -1.5, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..50)
            .map(|r| {
                let noise: f64 = rng.sample(StandardNormal);
                x.row(r).iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + 0.01 * noise
            })
            .collect();
        let fit = ols_fit(&x, &y).unwrap();
        for (b, t) in fit.coefficients.iter().zip(&truth) {
            assert!((b - t).abs() < 0.01, "{b} vs {t}");
        }
        assert!(!fit.jittered);
    }

    #[test]
    fn ols_collinear_design_uses_jitter() {
        let x = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [4.0, 8.0]]).unwrap();
        let fit = ols_fit(&x, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(fit.jittered);
        assert!(fit.coefficients.iter().all(|b| b.is_finite()));
        assert!(fit.residual_sum_squares < 1e-6);
    }

    #[test]
    fn ols_rejects_wide_design() {
        let x = DenseMatrix::zeros(2, 3);
        assert!(ols_fit(&x, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn lasso_rejects_negative_lambda() {
        let x = DenseMatrix::identity(2);
        assert!(matches!(lasso_fit(&x, &[1.0, 1.0], -0.1), Err(Error::Argument(_))));
    }

    #[test]
    fn lasso_full_shrinkage() {
        let x = standardize_columns(&gaussian(40, 4, 3)).unwrap();
        let y = gaussian(40, 1, 4).into_vec();
        let n = 40.0;
        let lmax = (0..4)
            .map(|k| x.column(k).iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().abs() / n)
            .fold(0.0, f64::max);
        let fit = lasso_fit(&x, &y, lmax).unwrap();
        assert!(fit.coefficients.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn lasso_objective_monotone_over_sweeps() {
        let base = gaussian(60, 5, 11);
        // Correlated columns make descent take several sweeps.
        let x = DenseMatrix::from_fn(60, 5, |r, c| base.get(r, c) + 0.8 * base.get(r, 0));
        let x = standardize_columns(&x).unwrap();
        let y: Vec<f64> = (0..60).map(|r| x.get(r, 1) - 0.5 * x.get(r, 3) + 0.1 * base.get(r, 4)).collect();
        let mut objectives = Vec::new();
        let fit = lasso_fit_traced(&x, &y, 0.02, |_, b| objectives.push(lasso_objective(&x, &y, b, 0.02))).unwrap();
        assert!(fit.iterations > 2);
        let start = lasso_objective(&x, &y, &[0.0; 5], 0.02);
        let mut prev = start;
        for o in objectives {
            assert!(o <= prev + 1e-15, "{o} > {prev}");
            prev = o;
        }
    }

    proptest! {
        #[test]
        fn standardize_is_idempotent(seed in 0u64..1000, rows in 2usize..20, cols in 1usize..5) {
            let m = gaussian(rows, cols, seed);
            let once = standardize_columns(&m).unwrap();
            let twice = standardize_columns(&once).unwrap();
            prop_assert!(once.max_abs_diff(&twice) < 1e-10);
        }

        #[test]
        fn lasso_rss_monotone_in_lambda(seed in 0u64..500, l1 in 0.0f64..0.5, l2 in 0.0f64..0.5) {
            let x = standardize_columns(&gaussian(30, 4, seed)).unwrap();
            let y: Vec<f64> = (0..30).map(|r| x.get(r, 0) * 0.7 + x.get(r, 2) * 0.3).collect();
            let noise = gaussian(30, 1, seed + 1).into_vec();
            let y: Vec<f64> = y.iter().zip(&noise).map(|(a, b)| a + 0.5 * b).collect();
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let rss_lo = lasso_fit(&x, &y, lo).unwrap().residual_sum_squares;
            let rss_hi = lasso_fit(&x, &y, hi).unwrap().residual_sum_squares;
            prop_assert!(rss_hi >= rss_lo - 1e-8);
        }

        #[test]
        fn ols_residual_orthogonal(seed in 0u64..500) {
            let x = gaussian(25, 4, seed);
            let y = gaussian(25, 1, seed + 7).into_vec();
            let fit = ols_fit(&x, &y).unwrap();
            for k in 0..4 {
                let col = x.column(k);
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = (0..25)
                    .map(|r| {
                        let fitted: f64 = x.row(r).iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum();
                        col[r] * (y[r] - fitted)
                    })
                    .sum();
                prop_assert!(dot.abs() / norm < 1e-6);
            }
        }

        #[test]
        fn csv_round_trip_is_exact(seed in 0u64..200) {
            let m = gaussian(5, 3, seed);
            let mut buf = Vec::new();
            let header: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
            m.write_csv(&mut buf, Some(&header)).unwrap();
            let (h, back) = DenseMatrix::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(h, Some(header));
            prop_assert_eq!(back, m);
        }
    }
}
