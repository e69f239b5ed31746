//! Bi-rotation alignment of a weight block to the binary hypercube.
//!
//! A layer's flat weights `w` (length `n`) are laid out row-major as an
//! `n1 × n2` block `W`. The large rotation `R = R1 ⊗ R2` is never formed: its
//! transpose acts on `w` as `R1ᵀ·W·R2`. Alignment alternately maximizes
//! `tr(B·R2ᵀ·Wᵀ·R1)` over the sign matrix `B` and the two orthogonal factors.

use crate::error::{Error, Result};
use crate::linalg::{kronecker, matmul, matmul_a_bt, matmul_at_b, polar_maximize_trace, DenseMatrix};
use crate::quantize::sign;

pub const DEFAULT_CYCLES: usize = 3;

/// `(n1, n2)` with `n1·n2 = n`, `n1 ≤ n2` and `n2 − n1` minimal.
pub fn balanced_factorization(n: usize) -> (usize, usize) {
    assert!(n >= 1, "cannot factor zero");
    let mut n1 = (n as f64).sqrt() as usize;
    // Guard against the float square root landing one off.
    while n1 * n1 > n {
        n1 -= 1;
    }
    while (n1 + 1) * (n1 + 1) <= n {
        n1 += 1;
    }
    while n % n1 != 0 {
        n1 -= 1;
    }
    (n1, n / n1)
}

/// One layer's weights as an `n1 × n2` block plus what is needed to restore
/// the original tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlock {
    pub matrix: DenseMatrix,
    pub original_shape: Vec<usize>,
    pub layer_id: String,
}

impl WeightBlock {
    pub fn n1(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n2(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.n1() * self.n2()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// True when `n > 1` has no factor pair better than `(1, n)`, so the
    /// bi-rotation degenerates to a single full rotation.
    pub fn is_unbalanced(&self) -> bool {
        self.n1() == 1 && self.len() > 1
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.layer_id = id.into();
        self
    }
}

/// Row-major fill of an `n1 × n2` block from the flat weight vector.
pub fn reshape_to_block(weights: &[f64], shape: &[usize]) -> Result<WeightBlock> {
    let expected: usize = shape.iter().product();
    if shape.is_empty() || expected == 0 {
        return Err(Error::InvalidInput(format!("invalid tensor shape {shape:?}")));
    }
    if weights.len() != expected {
        return Err(Error::Shape(format!(
            "shape {shape:?} needs {expected} weights, got {}",
            weights.len()
        )));
    }
    let (n1, n2) = balanced_factorization(expected);
    Ok(WeightBlock {
        matrix: DenseMatrix::new(n1, n2, weights.to_vec())?,
        original_shape: shape.to_vec(),
        layer_id: String::new(),
    })
}

pub fn flatten_from_block(block: &WeightBlock) -> Vec<f64> {
    block.matrix.as_slice().to_vec()
}

/// `R1` (`n1 × n1`) and `R2` (`n2 × n2`), standing in for `R = R1 ⊗ R2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationPair {
    pub r1: DenseMatrix,
    pub r2: DenseMatrix,
}

impl RotationPair {
    pub fn identity(n1: usize, n2: usize) -> Self {
        Self {
            r1: DenseMatrix::identity(n1),
            r2: DenseMatrix::identity(n2),
        }
    }

    pub fn new(r1: DenseMatrix, r2: DenseMatrix) -> Result<Self> {
        if !r1.is_square() || !r2.is_square() {
            return Err(Error::Shape("rotation factors must be square".into()));
        }
        Ok(Self { r1, r2 })
    }

    pub fn n1(&self) -> usize {
        self.r1.rows()
    }

    pub fn n2(&self) -> usize {
        self.r2.rows()
    }

    fn check(&self, w: &DenseMatrix) -> Result<()> {
        if w.rows() != self.n1() || w.cols() != self.n2() {
            return Err(Error::Shape(format!(
                "rotation pair {}x{} does not fit a {}x{} block",
                self.n1(),
                self.n2(),
                w.rows(),
                w.cols()
            )));
        }
        Ok(())
    }

    /// `R1ᵀ·W·R2`, i.e. `Rᵀw` on the flattened block.
    pub fn rotate(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        self.check(w)?;
        Ok(matmul(&matmul_at_b(&self.r1, w), &self.r2)?)
    }

    /// `R1·G·R2ᵀ`, i.e. `R·g`: the adjoint of [`RotationPair::rotate`].
    pub fn rotate_adjoint(&self, g: &DenseMatrix) -> Result<DenseMatrix> {
        self.check(g)?;
        Ok(matmul_a_bt(&matmul(&self.r1, g)?, &self.r2))
    }

    /// Largest orthogonality defect of the two factors.
    pub fn orthogonality_error(&self) -> f64 {
        self.r1.orthogonality_error().max(self.r2.orthogonality_error())
    }

    /// The explicit `n × n` rotation `R1 ⊗ R2`. Verification only.
    pub fn full(&self) -> DenseMatrix {
        kronecker(&self.r1, &self.r2)
    }
}

/// `tr(B·R2ᵀ·Wᵀ·R1) = Σ B ∘ (R1ᵀ·W·R2)`.
pub fn objective(w: &WeightBlock, b: &DenseMatrix, rot: &RotationPair) -> Result<f64> {
    let rotated = rot.rotate(&w.matrix)?;
    if b.rows() != rotated.rows() || b.cols() != rotated.cols() {
        return Err(Error::Shape("binary matrix does not match block".into()));
    }
    Ok(rotated
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, s)| x * s)
        .sum())
}

/// `B = sign(R1ᵀ·W·R2)`.
pub fn binarize_step(w: &WeightBlock, rot: &RotationPair) -> Result<DenseMatrix> {
    let rotated = rot.rotate(&w.matrix)?;
    let (r, c) = (rotated.rows(), rotated.cols());
    let signs = rotated.into_vec().into_iter().map(sign).collect();
    DenseMatrix::new(r, c, signs)
}

fn check_binary(w: &WeightBlock, b: &DenseMatrix) -> Result<()> {
    if b.rows() != w.n1() || b.cols() != w.n2() {
        return Err(Error::Shape(format!(
            "binary matrix {}x{} does not match block {}x{}",
            b.rows(),
            b.cols(),
            w.n1(),
            w.n2()
        )));
    }
    if b.as_slice().iter().any(|&x| x != 1.0 && x != -1.0) {
        return Err(Error::InvalidInput("binary matrix entries must be ±1".into()));
    }
    Ok(())
}

/// Maximizes `tr(G1·R1)` with `G1 = B·R2ᵀ·Wᵀ`: `R1 = V1·U1ᵀ`.
pub fn r1_step(w: &WeightBlock, b: &DenseMatrix, r2: &DenseMatrix) -> Result<DenseMatrix> {
    check_binary(w, b)?;
    if r2.rows() != w.n2() || !r2.is_square() {
        return Err(Error::Shape("R2 does not match block columns".into()));
    }
    // B·R2ᵀ·Wᵀ = B·(W·R2)ᵀ
    let w_r2 = matmul(&w.matrix, r2)?;
    let g1 = matmul_a_bt(b, &w_r2);
    polar_maximize_trace(&g1)
}

/// Maximizes `tr(R2ᵀ·G2)` with `G2 = Wᵀ·R1·B`: `R2 = U2·V2ᵀ`, obtained as the
/// trace maximizer of `G2ᵀ`.
pub fn r2_step(w: &WeightBlock, b: &DenseMatrix, r1: &DenseMatrix) -> Result<DenseMatrix> {
    check_binary(w, b)?;
    if r1.rows() != w.n1() || !r1.is_square() {
        return Err(Error::Shape("R1 does not match block rows".into()));
    }
    let g2 = matmul_at_b(&w.matrix, &matmul(r1, b)?);
    polar_maximize_trace(&g2.transpose())
}

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub rotation: RotationPair,
    pub binary: DenseMatrix,
    /// Objective after every sub-step (binary, R1, R2), three per cycle.
    pub objective_trace: Vec<f64>,
    /// Cosine between `w` and `sign(w)`; `None` for an all-zero block.
    pub cos_before: Option<f64>,
    /// Cosine between `Rᵀw` and `sign(Rᵀw)` for the final rotation.
    pub cos_after: Option<f64>,
}

impl AlignmentResult {
    /// `|f_end(cycle) − f_end(cycle−1)| / |f_end(cycle)|` for 1-based `cycle ≥ 2`.
    pub fn relative_change(&self, cycle: usize) -> Option<f64> {
        if cycle < 2 || 3 * cycle > self.objective_trace.len() {
            return None;
        }
        let now = self.objective_trace[3 * cycle - 1];
        let prev = self.objective_trace[3 * cycle - 4];
        if now == 0.0 {
            return Some(0.0);
        }
        Some((now - prev).abs() / now.abs())
    }

    /// Whether the objective never decreases by more than `rel_tol·|f|`.
    pub fn is_monotone(&self, rel_tol: f64) -> bool {
        self.objective_trace
            .windows(2)
            .all(|p| p[1] >= p[0] - rel_tol * p[0].abs().max(p[1].abs()))
    }
}

/// `‖x‖₁ / (√n·‖x‖₂)`: cosine between `x` and `sign(x)`. `None` for zero input.
pub fn sign_cosine(x: &[f64]) -> Option<f64> {
    let l2 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return None;
    }
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    Some((l1 / ((x.len() as f64).sqrt() * l2)).clamp(-1.0, 1.0))
}

/// Alternates B-, R1- and R2-steps for `cycles` rounds, starting from
/// `warm_start` or the identity pair.
pub fn align(w: &WeightBlock, cycles: usize, warm_start: Option<&RotationPair>) -> Result<AlignmentResult> {
    if cycles == 0 {
        return Err(Error::InvalidInput("alignment needs at least one cycle".into()));
    }
    let (n1, n2) = (w.n1(), w.n2());
    let mut rot = match warm_start {
        Some(r) => {
            r.check(&w.matrix)?;
            r.clone()
        }
        None => RotationPair::identity(n1, n2),
    };

    let cos_before = sign_cosine(w.matrix.as_slice());
    if cos_before.is_none() {
        // Zero block: the cosine is undefined and every rotation is optimal.
        return Ok(AlignmentResult {
            rotation: RotationPair::identity(n1, n2),
            binary: DenseMatrix::from_fn(n1, n2, |_, _| 1.0),
            objective_trace: vec![0.0; 3 * cycles],
            cos_before: None,
            cos_after: None,
        });
    }

    let mut history = Vec::with_capacity(3 * cycles);
    let mut b = binarize_step(w, &rot)?;
    for cycle in 0..cycles {
        if cycle > 0 {
            b = binarize_step(w, &rot)?;
        }
        history.push(objective(w, &b, &rot)?);
        rot.r1 = r1_step(w, &b, &rot.r2)?;
        history.push(objective(w, &b, &rot)?);
        rot.r2 = r2_step(w, &b, &rot.r1)?;
        history.push(objective(w, &b, &rot)?);
    }

    let rotated = rot.rotate(&w.matrix)?;
    let cos_after = sign_cosine(rotated.as_slice());
    Ok(AlignmentResult {
        rotation: rot,
        binary: b,
        objective_trace: history,
        cos_before,
        cos_after,
    })
}
