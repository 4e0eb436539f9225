//! Diagonal Gaussian distributions and the closed-form operations the model
//! is built from.
//!
//! Every entity (item, user, behavior, position, behavior relation) is
//! represented as a Gaussian with diagonal covariance, stored as a mean
//! vector and a per-dimension **variance** vector of the same length.
//!
//! Operations:
//!
//! * `elu_plus_one`   — x ↦ x + 1 for x ≥ 0, exp(x) otherwise; maps ℝ onto
//!   (0, ∞) and is C¹ at 0. Used everywhere a raw parameter has to become a
//!   strictly positive variance.
//! * `wasserstein_sq` — squared 2-Wasserstein distance between two diagonal
//!   Gaussians: ‖μ_a − μ_b‖² + Σ_d (√v_a,d − √v_b,d)².
//! * `sagp`           — behavior-aware Gaussian product of two distributions
//!   with variance-led interpolation weights and an optional feature-space
//!   alignment matrix applied to the second mean.
//! * `tri_sagp`       — three-way product used for key/query fusion; the
//!   output precision is the sum of the input precisions.
//! * `gaussian_aggregate` — attention-style mixture: weights act linearly on
//!   means and quadratically on variances.

use crate::error::{PbatError, Result};

/// Variances are clamped to at least this before any division. Keeps the
/// fusion formulas finite when an upstream scale factor collapses to zero.
pub const VAR_FLOOR: f64 = 1e-8;

/// A Gaussian with diagonal covariance. `var` holds per-dimension variances,
/// all strictly positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(PbatError::ShapeMismatch {
                name: "DiagonalGaussian".into(),
                expected: vec![mean.len()],
                got: vec![var.len()],
            });
        }
        if let Some(bad) = mean.iter().find(|m| !m.is_finite()) {
            return Err(PbatError::InvalidParameter {
                name: "mean",
                reason: format!("non-finite entry {bad}"),
            });
        }
        if let Some(bad) = var.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(PbatError::InvalidParameter {
                name: "var",
                reason: format!("variance entries must be finite and > 0, got {bad}"),
            });
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// x + 1 for x ≥ 0, exp(x) for x < 0. Strictly positive, strictly
/// increasing, and both value and first derivative are continuous at 0.
#[inline]
pub fn elu_plus_one(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Squared 2-Wasserstein distance between two diagonal Gaussians:
///
/// ```text
/// W²(a, b) = Σ_d (μ_a,d − μ_b,d)² + Σ_d (√v_a,d − √v_b,d)²
/// ```
pub fn wasserstein_sq(a: &DiagonalGaussian, b: &DiagonalGaussian) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(PbatError::ShapeMismatch {
            name: "wasserstein_sq".into(),
            expected: vec![a.dim()],
            got: vec![b.dim()],
        });
    }
    let mut acc = 0.0;
    for d in 0..a.dim() {
        let dm = a.mean[d] - b.mean[d];
        let ds = a.var[d].sqrt() - b.var[d].sqrt();
        acc += dm * dm + ds * ds;
    }
    Ok(acc)
}

/// y = x · W for a row vector x of length `in_dim` and a row-major
/// `in_dim × out_dim` matrix. The whole crate uses this row-vector
/// convention for linear maps.
pub(crate) fn matvec(x: &[f64], w: &[f64], out_dim: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), x.len() * out_dim);
    let mut y = vec![0.0; out_dim];
    for (k, &xk) in x.iter().enumerate() {
        let row = &w[k * out_dim..(k + 1) * out_dim];
        for (j, &wkj) in row.iter().enumerate() {
            y[j] += xk * wkj;
        }
    }
    y
}

/// Variance-led product of two Gaussians. Per dimension:
///
/// ```text
/// α₁ = v_v / (v_v + v_u)        α₂ = v_u / (v_v + v_u)
/// mean = α₁ · μ_u + α₂ · (μ_v · W)
/// var  = 2 · v_u · v_v / (v_u + v_v)        (harmonic mean)
/// ```
///
/// The component with the smaller variance dominates the mean, and the
/// output variance always sits inside the [min, max] envelope of the two
/// inputs. `align`, when given, is a row-major dim×dim matrix applied to
/// the second mean only; identity when absent.
pub fn sagp(
    u: &DiagonalGaussian,
    v: &DiagonalGaussian,
    align: Option<&[f64]>,
) -> Result<DiagonalGaussian> {
    let d = u.dim();
    if v.dim() != d {
        return Err(PbatError::ShapeMismatch {
            name: "sagp".into(),
            expected: vec![d],
            got: vec![v.dim()],
        });
    }
    if let Some(w) = align {
        if w.len() != d * d {
            return Err(PbatError::ShapeMismatch {
                name: "sagp.align".into(),
                expected: vec![d, d],
                got: vec![w.len()],
            });
        }
    }
    let v_mean = match align {
        Some(w) => matvec(&v.mean, w, d),
        None => v.mean.clone(),
    };
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..d {
        let denom = (u.var[i] + v.var[i]).max(VAR_FLOOR);
        let a1 = v.var[i] / denom;
        let a2 = u.var[i] / denom;
        mean[i] = a1 * u.mean[i] + a2 * v_mean[i];
        var[i] = 2.0 * u.var[i] * v.var[i] / denom;
        debug_assert!(var[i] >= u.var[i].min(v.var[i]) - 1e-12);
        debug_assert!(var[i] <= u.var[i].max(v.var[i]) + 1e-12);
    }
    DiagonalGaussian::new(mean, var)
}

/// Three-way fusion of a base distribution with impact-factor and position
/// distributions. Precisions add:
///
/// ```text
/// 1/var = 1/v_base + 1/v_ip + 1/v_pos
/// mean  = var ⊙ ( μ_base/v_base + (μ_ip/v_ip)·W_ip + (μ_pos/v_pos)·W_p )
/// ```
///
/// `w_ip` and `w_p` are row-major dim×dim alignment matrices for the two
/// auxiliary means. Input variances are floored at [`VAR_FLOOR`] before the
/// divisions, so the output variance is strictly smaller than any input.
pub fn tri_sagp(
    base: &DiagonalGaussian,
    ip: &DiagonalGaussian,
    pos: &DiagonalGaussian,
    w_ip: &[f64],
    w_p: &[f64],
) -> Result<DiagonalGaussian> {
    let d = base.dim();
    for (other, name) in [(ip.dim(), "tri_sagp.ip"), (pos.dim(), "tri_sagp.pos")] {
        if other != d {
            return Err(PbatError::ShapeMismatch {
                name: name.into(),
                expected: vec![d],
                got: vec![other],
            });
        }
    }
    if w_ip.len() != d * d || w_p.len() != d * d {
        return Err(PbatError::ShapeMismatch {
            name: "tri_sagp.align".into(),
            expected: vec![d, d],
            got: vec![w_ip.len(), w_p.len()],
        });
    }
    let ip_scaled: Vec<f64> = (0..d)
        .map(|i| ip.mean[i] / ip.var[i].max(VAR_FLOOR))
        .collect();
    let pos_scaled: Vec<f64> = (0..d)
        .map(|i| pos.mean[i] / pos.var[i].max(VAR_FLOOR))
        .collect();
    let ip_term = matvec(&ip_scaled, w_ip, d);
    let pos_term = matvec(&pos_scaled, w_p, d);
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..d {
        let precision = 1.0 / base.var[i].max(VAR_FLOOR)
            + 1.0 / ip.var[i].max(VAR_FLOOR)
            + 1.0 / pos.var[i].max(VAR_FLOOR);
        var[i] = 1.0 / precision;
        mean[i] = var[i] * (base.mean[i] / base.var[i].max(VAR_FLOOR) + ip_term[i] + pos_term[i]);
    }
    DiagonalGaussian::new(mean, var)
}

/// Mixture of Gaussians under attention weights: the mean is the weighted
/// sum of means, the variance the squared-weighted sum of variances.
pub fn gaussian_aggregate(
    weights: &[f64],
    gaussians: &[DiagonalGaussian],
) -> Result<DiagonalGaussian> {
    if weights.len() != gaussians.len() || gaussians.is_empty() {
        return Err(PbatError::ShapeMismatch {
            name: "gaussian_aggregate".into(),
            expected: vec![weights.len()],
            got: vec![gaussians.len()],
        });
    }
    let d = gaussians[0].dim();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for (w, g) in weights.iter().zip(gaussians) {
        if g.dim() != d {
            return Err(PbatError::ShapeMismatch {
                name: "gaussian_aggregate".into(),
                expected: vec![d],
                got: vec![g.dim()],
            });
        }
        for i in 0..d {
            mean[i] += w * g.mean[i];
            var[i] += w * w * g.var[i];
        }
    }
    DiagonalGaussian::new(mean, var)
}
