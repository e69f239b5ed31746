//! Binarization semantics: the scaled-sign baseline, the adjustable rotated
//! weight vector, and the scheduled sign approximation `F` with its slope.

use std::f64::consts::{FRAC_PI_2, SQRT_2};

use crate::error::{Error, Result};

pub const DEFAULT_T_MIN: f64 = -2.0;
pub const DEFAULT_T_MAX: f64 = 1.0;

/// `sign` with the global tie-break `sign(0) = +1`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Controls the sharpness of the sign approximation as training progresses.
///
/// `t = 10^(t_min + (e/E)(t_max − t_min))` and `k = max(1/t, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxSchedule {
    t_min: f64,
    t_max: f64,
    total_epochs: usize,
    epoch: usize,
    t: f64,
    k: f64,
}

impl ApproxSchedule {
    /// Schedule with the default exponents (−2, 1).
    pub fn new(total_epochs: usize, epoch: usize) -> Result<Self> {
        Self::with_exponents(DEFAULT_T_MIN, DEFAULT_T_MAX, total_epochs, epoch)
    }

    pub fn with_exponents(t_min: f64, t_max: f64, total_epochs: usize, epoch: usize) -> Result<Self> {
        if total_epochs == 0 {
            return Err(Error::InvalidInput("schedule needs at least one epoch".into()));
        }
        if epoch > total_epochs {
            return Err(Error::InvalidInput(format!(
                "epoch {epoch} is past the last epoch {total_epochs}"
            )));
        }
        if !t_min.is_finite() || !t_max.is_finite() {
            return Err(Error::InvalidInput("schedule exponents must be finite".into()));
        }
        let progress = epoch as f64 / total_epochs as f64;
        let t = 10f64.powf(t_min + progress * (t_max - t_min));
        let k = (1.0 / t).max(1.0);
        Ok(Self {
            t_min,
            t_max,
            total_epochs,
            epoch,
            t,
            k,
        })
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn progress(&self) -> f64 {
        self.epoch as f64 / self.total_epochs as f64
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// `√2/t`: beyond this magnitude `F` saturates at `±k` and `F′` is zero.
    pub fn saturation(&self) -> f64 {
        SQRT_2 / self.t
    }

    /// `F(x)`.
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        let (t, k) = (self.t, self.k);
        if x.abs() < SQRT_2 / t {
            let quad = sign(x) * (t * t * (x * x)) / 2.0;
            k * (-quad + (SQRT_2 * t) * x)
        } else {
            sign(x) * k
        }
    }

    /// `F′(x) = max(k(√2·t − |t²x|), 0)`.
    #[inline]
    pub fn slope(&self, x: f64) -> f64 {
        let (t, k) = (self.t, self.k);
        (k * (SQRT_2 * t - (t * t * x).abs())).max(0.0)
    }
}

/// Elementwise `F`.
pub fn approx_forward(x: &[f64], sched: &ApproxSchedule) -> Vec<f64> {
    x.iter().map(|&v| sched.value(v)).collect()
}

/// Elementwise `F′`.
pub fn approx_backward(x: &[f64], sched: &ApproxSchedule) -> Vec<f64> {
    x.iter().map(|&v| sched.slope(v)).collect()
}

/// Per-layer interpolation coefficient `α = |sin β|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjustState {
    pub beta: f64,
}

impl Default for AdjustState {
    /// `β = π/2`, so the rotated weights are trusted fully at the start.
    fn default() -> Self {
        Self { beta: FRAC_PI_2 }
    }
}

impl AdjustState {
    pub fn new(beta: f64) -> Self {
        Self { beta }
    }

    pub fn alpha(&self) -> f64 {
        self.beta.sin().abs()
    }

    /// `dα/dβ = sign(sin β)·cos β` (zero at the kinks where `sin β = 0`).
    pub fn dalpha_dbeta(&self) -> f64 {
        let s = self.beta.sin();
        if s == 0.0 {
            0.0
        } else {
            s.signum() * self.beta.cos()
        }
    }
}

/// `λ·b` with `b = sign(w)` and `λ = mean|w|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledBinary {
    pub binary: Vec<f64>,
    pub lambda: f64,
    /// Set when the input was all zeros (λ = 0).
    pub degenerate: bool,
}

impl ScaledBinary {
    pub fn dequantize(&self) -> Vec<f64> {
        self.binary.iter().map(|b| b * self.lambda).collect()
    }
}

/// Scaled-sign binarization: the minimizer of `‖λb − w‖²` for `b = sign(w)`.
pub fn xnor_binarize(w: &[f64]) -> Result<ScaledBinary> {
    if w.is_empty() {
        return Err(Error::InvalidInput("cannot binarize an empty vector".into()));
    }
    let lambda = w.iter().map(|x| x.abs()).sum::<f64>() / w.len() as f64;
    Ok(ScaledBinary {
        binary: w.iter().map(|&x| sign(x)).collect(),
        lambda,
        degenerate: lambda == 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizationError {
    /// `min_λ ‖λ·sign(w) − w‖²`.
    pub error: f64,
    /// `‖w‖²·sin²θ` with `cos θ = ‖w‖₁ / (√n·‖w‖₂)`.
    pub angular_bound: f64,
    pub cos_theta: f64,
}

impl QuantizationError {
    pub fn per_weight(&self, n: usize) -> f64 {
        self.error / n as f64
    }
}

/// Residual of the optimally scaled sign, alongside the angular lower bound.
///
/// The residual is evaluated directly from `λ·sign(w) − w`; the bound comes
/// from the angle. A zero vector yields zero for both.
pub fn quantization_error(w: &[f64]) -> Result<QuantizationError> {
    let scaled = xnor_binarize(w)?;
    let norm_sq: f64 = w.iter().map(|x| x * x).sum();
    if norm_sq == 0.0 {
        return Ok(QuantizationError {
            error: 0.0,
            angular_bound: 0.0,
            cos_theta: 1.0,
        });
    }
    let error: f64 = w
        .iter()
        .zip(&scaled.binary)
        .map(|(x, b)| (scaled.lambda * b - x).powi(2))
        .sum();
    let l1: f64 = w.iter().map(|x| x.abs()).sum();
    let cos_theta = (l1 / ((w.len() as f64).sqrt() * norm_sq.sqrt())).min(1.0);
    let angular_bound = norm_sq * (1.0 - cos_theta * cos_theta);
    assert!(
        error >= angular_bound - 1e-12 * norm_sq.max(1.0),
        "quantization error {error} below its angular bound {angular_bound}"
    );
    Ok(QuantizationError {
        error,
        angular_bound,
        cos_theta,
    })
}

/// `w̃ = w + (rotated − w)·α`.
pub fn adjusted_weights(w: &[f64], rotated: &[f64], adjust: &AdjustState) -> Result<Vec<f64>> {
    check_lengths(w, rotated)?;
    let alpha = adjust.alpha();
    Ok(w.iter()
        .zip(rotated)
        .map(|(&x, &r)| x + (r - x) * alpha)
        .collect())
}

/// `∂L/∂α = Σ_j upstream_j·(rotated_j − w_j)`.
pub fn alpha_gradient(upstream: &[f64], w: &[f64], rotated: &[f64]) -> Result<f64> {
    check_lengths(w, rotated)?;
    check_lengths(upstream, w)?;
    Ok(upstream
        .iter()
        .zip(w.iter().zip(rotated))
        .map(|(g, (x, r))| g * (r - x))
        .sum())
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}
