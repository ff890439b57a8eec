//! Trace (positive-pair) loss, feature-decorrelation loss, and their gradients.
//!
//! With batch embeddings `z` (anchors) and `z⁺` (positives):
//!
//! * trace term: mean over all `B·K` entries of `(z - z⁺)²`
//! * decorrelation term: `Σ_{k≠l} c_kl²` with `c = zᵀz / B`
//! * total: `trace + γ · decorrelation`
//!
//! The decorrelation term only sees the anchors.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{invalid, shape_mismatch, Result};
use crate::scalar::Scalar;

/// Default decorrelation weight `γ`.
pub const DEFAULT_GAMMA: f64 = 0.005;

/// How the squared positive-pair distance is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Mean over all `B·K` entries.
    #[default]
    ElementMean,
    /// Mean over the `B` pairs of the squared Euclidean distance.
    PairMean,
}

/// Weight of the decorrelation term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gamma<T>(T);

impl<T: Scalar> Gamma<T> {
    pub fn new(gamma: T) -> Result<Self> {
        if !(gamma > T::zero() && gamma.is_finite()) {
            return Err(invalid(format!("gamma must be positive and finite, got {gamma}")));
        }
        Ok(Self(gamma))
    }

    /// `γ = 0`: the trace-only ablation.
    pub fn trace_only() -> Self {
        Self(T::zero())
    }

    pub fn value(self) -> T {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub trace_term: T,
    pub decorrelation_term: T,
    pub gamma: T,
    pub total: T,
}

/// Gradients of the total loss with respect to both arguments.
#[derive(Debug, Clone)]
pub struct LossGradients<T> {
    pub anchors: Array2<T>,
    pub positives: Array2<T>,
}

fn check_pair<T>(z: &ArrayView2<T>, z_pos: &ArrayView2<T>) -> Result<()> {
    if z.dim() != z_pos.dim() {
        return Err(shape_mismatch(format!("{:?}", z.dim()), format!("{:?}", z_pos.dim())));
    }
    if z.is_empty() {
        return Err(invalid("empty embedding batch"));
    }
    Ok(())
}

pub fn trace_loss<T: Scalar>(z: ArrayView2<T>, z_pos: ArrayView2<T>) -> Result<T> {
    trace_loss_with(z, z_pos, Reduction::ElementMean)
}

pub fn trace_loss_with<T: Scalar>(z: ArrayView2<T>, z_pos: ArrayView2<T>, reduction: Reduction) -> Result<T> {
    check_pair(&z, &z_pos)?;
    let sum: T = z
        .iter()
        .zip(z_pos.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    let denom = match reduction {
        Reduction::ElementMean => z.len(),
        Reduction::PairMean => z.nrows(),
    };
    Ok(sum / T::from_usize_lossy(denom))
}

/// `∂ trace_loss / ∂ z`; the gradient for `z_pos` is its negation.
pub fn trace_loss_grad<T: Scalar>(z: ArrayView2<T>, z_pos: ArrayView2<T>, reduction: Reduction) -> Result<Array2<T>> {
    check_pair(&z, &z_pos)?;
    let denom = match reduction {
        Reduction::ElementMean => z.len(),
        Reduction::PairMean => z.nrows(),
    };
    let scale = T::lit(2.0) / T::from_usize_lossy(denom);
    Ok((&z - &z_pos) * scale)
}

/// Uncentered batch second-moment matrix `zᵀz / B`.
pub fn batch_covariance<T: Scalar>(z: ArrayView2<T>) -> Array2<T> {
    let b = T::from_usize_lossy(z.nrows());
    z.t().dot(&z) / b
}

pub fn decorrelation_loss<T: Scalar>(z: ArrayView2<T>) -> Result<T> {
    if z.nrows() < 2 {
        return Err(invalid("decorrelation loss needs a batch of at least 2"));
    }
    let c = batch_covariance(z);
    Ok(c
        .indexed_iter()
        .filter(|((k, l), _)| k != l)
        .map(|(_, &v)| v * v)
        .sum())
}

/// `∂/∂z Σ_{k≠l} c_kl² = (4/B) · z · offdiag(c)`.
pub fn decorrelation_loss_grad<T: Scalar>(z: ArrayView2<T>) -> Result<Array2<T>> {
    if z.nrows() < 2 {
        return Err(invalid("decorrelation loss needs a batch of at least 2"));
    }
    let mut c = batch_covariance(z);
    c.diag_mut().fill(T::zero());
    let scale = T::lit(4.0) / T::from_usize_lossy(z.nrows());
    Ok(z.dot(&c) * scale)
}

/// Total loss with the trace term taken between `z_target` and `z_pair`
/// (anchors and positives when unmixed; mixed anchors and mixed positives
/// under manifold mixup) and decorrelation on the anchors `z`.
pub fn total_loss_mixed<T: Scalar>(
    z: ArrayView2<T>,
    z_target: ArrayView2<T>,
    z_pair: ArrayView2<T>,
    gamma: Gamma<T>,
) -> Result<LossBreakdown<T>> {
    let trace_term = trace_loss(z_target, z_pair)?;
    let decorrelation_term = decorrelation_loss(z)?;
    Ok(LossBreakdown {
        trace_term,
        decorrelation_term,
        gamma: gamma.value(),
        total: trace_term + gamma.value() * decorrelation_term,
    })
}

pub fn total_loss<T: Scalar>(z: ArrayView2<T>, z_pos: ArrayView2<T>, gamma: Gamma<T>) -> Result<LossBreakdown<T>> {
    total_loss_mixed(z, z, z_pos, gamma)
}

/// Gradients of [`total_loss`] with respect to `z` and `z_pos`.
pub fn total_loss_grad<T: Scalar>(z: ArrayView2<T>, z_pos: ArrayView2<T>, gamma: Gamma<T>) -> Result<LossGradients<T>> {
    let trace = trace_loss_grad(z, z_pos, Reduction::ElementMean)?;
    let decor = decorrelation_loss_grad(z)?;
    let positives = trace.mapv(|v| -v);
    Ok(LossGradients {
        anchors: trace + decor * gamma.value(),
        positives,
    })
}

/// `|‖zᵀz/B‖_F² − (1/B²) Σ_ij (z_iᵀz_j)²|`.
pub fn frobenius_identity_gap<T: Scalar>(z: ArrayView2<T>) -> Result<T> {
    if z.nrows() < 2 {
        return Err(invalid("identity check needs a batch of at least 2"));
    }
    let b = T::from_usize_lossy(z.nrows());
    let feature_side: T = batch_covariance(z).iter().map(|&v| v * v).sum();
    let gram = z.dot(&z.t());
    let sample_side: T = gram.iter().map(|&v| v * v).sum::<T>() / (b * b);
    Ok((feature_side - sample_side).abs())
}

/// Closed-form anchor gradient
/// `(2/B)((1−γ) z_i − z_i⁺ + γ Σ_j (z_iᵀz_j / B) z_j)`, which assumes unit-norm
/// rows and treats the pair term per pair. A diagnostic comparator only; the
/// training gradient is [`total_loss_grad`].
pub fn analytic_anchor_gradient<T: Scalar>(
    z: ArrayView2<T>,
    z_pos: ArrayView2<T>,
    gamma: T,
    i: usize,
) -> Result<Array1<T>> {
    check_pair(&z, &z_pos)?;
    let b = z.nrows();
    if i >= b {
        return Err(invalid(format!("row {i} out of range for batch of {b}")));
    }
    let bt = T::from_usize_lossy(b);
    let zi = z.row(i);
    let mut push = Array1::zeros(z.ncols());
    for zj in z.rows() {
        let w = zi.dot(&zj) / bt;
        push.scaled_add(w, &zj);
    }
    let pull = &zi * (T::one() - gamma) - z_pos.row(i);
    Ok((pull + push * gamma) * (T::lit(2.0) / bt))
}

/// Weights `ω_j ∝ z_iᵀz_j` with which the decorrelation gradient at anchor
/// `i` combines the batch rows.
pub fn negative_weights<T: Scalar>(z: ArrayView2<T>, i: usize) -> Result<Array1<T>> {
    if i >= z.nrows() {
        return Err(invalid(format!("row {i} out of range for batch of {}", z.nrows())));
    }
    let bt = T::from_usize_lossy(z.nrows());
    Ok(z.dot(&z.row(i)) / bt)
}
