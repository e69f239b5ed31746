//! Small dense linear algebra: a row-major `f64` matrix, products, a one-sided
//! Jacobi SVD, the polar-factor solution of `max tr(G·R)` over orthogonal `R`,
//! and Kronecker products for checking the structured rotation paths.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Off-diagonal tolerance of the Jacobi sweeps, relative to the column norms.
pub const SVD_TOLERANCE: f64 = 1e-12;
/// Maximum number of Jacobi sweeps before giving up.
pub const SVD_MAX_SWEEPS: usize = 100;

/// Row-major real matrix with at least one row and one column.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Builds a matrix from row-major values, rejecting empty shapes, length
    /// mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite matrix entry at index {pos}"
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.values[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m.values[i * d.len() + i] = x;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        t
    }

    pub fn scale(&self, k: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * k).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry-wise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `‖MᵀM − I‖∞` (entry-wise max), the orthogonality defect of a square matrix.
    pub fn orthogonality_error(&self) -> f64 {
        let gram = matmul_at_b(self, self);
        let mut worst = 0.0f64;
        for i in 0..gram.rows {
            for j in 0..gram.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.get(i, j) - target).abs());
            }
        }
        worst
    }
}

/// Row-major GEMM on raw slices: `c = alpha·op(a)·op(b) + beta·c` where the
/// strides select the transposition. Shared with the training hot path.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_row_stride: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= (m - 1) * c_row_stride as usize + n);
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n and
    // m×n views; the debug assertion above checks the output extent.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_row_stride,
            1,
        );
    }
}

fn product(a: &DenseMatrix, a_t: bool, b: &DenseMatrix, b_t: bool) -> DenseMatrix {
    let (m, k) = if a_t { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if b_t { b.rows } else { b.cols };
    let a_strides = if a_t {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let b_strides = if b_t {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    let mut out = DenseMatrix::zeros(m, n);
    gemm(
        m,
        k,
        n,
        1.0,
        &a.values,
        a_strides,
        &b.values,
        b_strides,
        0.0,
        &mut out.values,
        n as isize,
    );
    out
}

/// Standard matrix product `a·b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(product(a, false, b, false))
}

/// `aᵀ·b` without materializing the transpose. Panics on mismatch.
pub fn matmul_at_b(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.rows, b.rows, "aᵀb inner dimension");
    product(a, true, b, false)
}

/// `a·bᵀ` without materializing the transpose. Panics on mismatch.
pub fn matmul_a_bt(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols, b.cols, "abᵀ inner dimension");
    product(a, false, b, true)
}

/// Kronecker product `a ⊗ b`.
pub fn kronecker(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    let mut out = DenseMatrix::zeros(rows, cols);
    for ar in 0..a.rows {
        for ac in 0..a.cols {
            let s = a.get(ar, ac);
            for br in 0..b.rows {
                let dst = (ar * b.rows + br) * cols + ac * b.cols;
                for (o, &v) in out.values[dst..dst + b.cols].iter_mut().zip(b.row(br)) {
                    *o = s * v;
                }
            }
        }
    }
    out
}

/// `a = u · diag(s) · vt` with `u` m×m, `vt` n×n and `s` descending.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SvdResult {
    /// Rebuilds `u · diag(s) · vt` (m×n).
    pub fn reconstruct(&self) -> DenseMatrix {
        let m = self.u.rows;
        let n = self.vt.rows;
        let mut us = DenseMatrix::zeros(m, n);
        for r in 0..m {
            for (c, &sv) in self.s.iter().enumerate() {
                us.values[r * n + c] = self.u.get(r, c) * sv;
            }
        }
        product(&us, false, &self.vt, false)
    }
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Left singular vectors are sign-normalized so that the first non-negligible
/// entry of every column of `u` is non-negative; the matching row of `vt` is
/// flipped with it.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    if a.rows < a.cols {
        let t = svd_tall(&a.transpose())?;
        // aᵀ = U S Vᵀ  ⇒  a = V S Uᵀ; renormalize signs on the new left factor.
        let mut out = SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        };
        normalize_signs(&mut out);
        return Ok(out);
    }
    let mut out = svd_tall(a)?;
    normalize_signs(&mut out);
    Ok(out)
}

fn svd_tall(a: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = (a.rows, a.cols);
    // Column-major working copies: column j of A lives at work[j*m..(j+1)*m].
    let mut work = a.transpose().values;
    let mut v = DenseMatrix::identity(n).values;
    let mut norms: Vec<f64> = (0..n)
        .map(|j| work[j * m..(j + 1) * m].iter().map(|x| x * x).sum())
        .collect();

    // Columns this small are numerically zero; pairing them with anything only
    // churns rounding noise and never converges.
    let negligible = {
        let frob_sq: f64 = norms.iter().sum();
        frob_sq * (m as f64) * f64::EPSILON * f64::EPSILON
    };
    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == SVD_MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps });
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let (cp, cq) = column_pair(&mut work, m, p, q);
                let gamma: f64 = cp.iter().zip(cq.iter()).map(|(x, y)| x * y).sum();
                if gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = c * xp - s * xq;
                    *y = s * xp + c * xq;
                }
                norms[p] = alpha - t * gamma;
                norms[q] = beta + t * gamma;
                let (vp, vq) = column_pair(&mut v, n, p, q);
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = c * xp - s * xq;
                    *y = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            converged = true;
        } else {
            // Refresh the running norms so drift never stalls convergence.
            for (j, nj) in norms.iter_mut().enumerate() {
                *nj = work[j * m..(j + 1) * m].iter().map(|x| x * x).sum();
            }
        }
    }

    let sigma: Vec<f64> = (0..n)
        .map(|j| work[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let s: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let cutoff = s.first().copied().unwrap_or(0.0) * (m.max(n) as f64) * f64::EPSILON;

    // u columns, column-major, m each.
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    for &j in &order {
        if sigma[j] > cutoff && sigma[j] > 0.0 {
            u_cols.push(work[j * m..(j + 1) * m].iter().map(|x| x / sigma[j]).collect());
        } else {
            break;
        }
    }
    complete_basis(&mut u_cols, m);

    let mut u = DenseMatrix::zeros(m, m);
    for (c, col) in u_cols.iter().enumerate() {
        for r in 0..m {
            u.values[r * m + c] = col[r];
        }
    }
    // vt row i = column order[i] of V (column-major in `v`).
    let mut vt = DenseMatrix::zeros(n, n);
    for (i, &j) in order.iter().enumerate() {
        vt.values[i * n..(i + 1) * n].copy_from_slice(&v[j * n..(j + 1) * n]);
    }
    Ok(SvdResult { u, s, vt })
}

fn column_pair(buf: &mut [f64], len: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = buf.split_at_mut(q * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

/// Extends orthonormal columns to a full basis of R^m using standard basis
/// candidates, picking the candidate with the largest residual each time.
fn complete_basis(cols: &mut Vec<Vec<f64>>, m: usize) {
    while cols.len() < m {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..m {
            let mut cand = vec![0.0; m];
            cand[k] = 1.0;
            for _ in 0..2 {
                for c in cols.iter() {
                    let d: f64 = c.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    for (x, y) in cand.iter_mut().zip(c) {
                        *x -= d * y;
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("m > 0");
        cols.push(cand.into_iter().map(|x| x / norm).collect());
    }
}

fn normalize_signs(res: &mut SvdResult) {
    let m = res.u.rows;
    let n = res.vt.rows;
    for c in 0..m {
        let first = (0..m)
            .map(|r| res.u.get(r, c))
            .find(|x| x.abs() > 1e-12)
            .unwrap_or(0.0);
        if first < 0.0 {
            for r in 0..m {
                res.u.values[r * m + c] = -res.u.values[r * m + c];
            }
            if c < n {
                for x in &mut res.vt.values[c * n..(c + 1) * n] {
                    *x = -*x;
                }
            }
        }
    }
}

/// Orthogonal `R` maximizing `tr(g·R)`: with `g = U·S·Vᵀ`, `R = V·Uᵀ`.
pub fn polar_maximize_trace(g: &DenseMatrix) -> Result<DenseMatrix> {
    if !g.is_square() {
        return Err(Error::Shape(format!(
            "trace maximization needs a square matrix, got {}x{}",
            g.rows, g.cols
        )));
    }
    let svd = svd(g)?;
    // V·Uᵀ = (vt)ᵀ·(u)ᵀ
    Ok(product(&svd.vt, true, &svd.u, true))
}

/// Haar-distributed orthogonal matrix from a seeded Gaussian matrix via
/// modified Gram–Schmidt with the QR sign correction.
pub fn random_orthogonal(n: usize, seed: u64) -> DenseMatrix {
    assert!(n >= 1, "random_orthogonal needs n >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Column-major Gaussian draws.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for j in 0..n {
        for i in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let qi = &done[i];
            let d: f64 = qi.iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            for (x, y) in rest[0].iter_mut().zip(qi) {
                *x -= d * y;
            }
        }
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut cols[j] {
            *x /= norm;
        }
    }
    let mut q = DenseMatrix::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            q.values[r * n + c] = x;
        }
    }
    q
}

/// Seeded matrix of independent standard normal entries.
pub fn random_gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}
