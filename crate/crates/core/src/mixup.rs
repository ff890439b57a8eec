//! Manifold mixup on positive views and the differentiable training step.
//!
//! One batch step, with anchors `x` and positives `x⁺`:
//!
//! ```text
//! z      = f(x)
//! h      = g_L(x⁺)
//! z⁺_mix = f_L(λ h + (1-λ) h[perm])
//! z_mix  = λ z + (1-λ) z[perm]
//! loss   = trace(z_mix, z⁺_mix) + γ · decorrelation(z)
//! ```
//!
//! Batch statistics are invariant to row order, so `g_L(x⁺[perm])` equals
//! `g_L(x⁺)[perm]` and the hidden batch is computed once.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::encoder::{Gradients, MlpEncoder, SplitPoint};
use crate::error::{invalid, shape_mismatch, Result};
use crate::loss::{self, Gamma, LossBreakdown, Reduction};
use crate::scalar::Scalar;

/// Default Beta concentration for the mixing coefficient.
pub const DEFAULT_ALPHA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub enabled: bool,
    pub alpha: f64,
    /// Split layers to sample from; `None` uses every eligible split.
    pub eligible_layers: Option<Vec<usize>>,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: DEFAULT_ALPHA,
            eligible_layers: None,
        }
    }
}

/// Per-batch mixing decision.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan<T> {
    lambda: T,
    split: SplitPoint,
    permutation: Vec<usize>,
}

impl<T: Scalar> MixPlan<T> {
    pub fn new(lambda: T, split: SplitPoint, permutation: Vec<usize>) -> Result<Self> {
        if !(lambda >= T::zero() && lambda <= T::one()) {
            return Err(invalid(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        let mut seen = vec![false; permutation.len()];
        for &p in &permutation {
            if p >= permutation.len() || seen[p] {
                return Err(invalid("permutation is not a bijection"));
            }
            seen[p] = true;
        }
        Ok(Self {
            lambda,
            split,
            permutation,
        })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn split(&self) -> SplitPoint {
        self.split
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }
}

/// Draws `λ ~ Beta(α, α)`, a split uniformly from `eligible`, and a uniform
/// batch permutation, in that order.
pub fn sample_mix_plan<T: Scalar, R: Rng + ?Sized>(
    alpha: f64,
    eligible: &[SplitPoint],
    batch_size: usize,
    rng: &mut R,
) -> Result<MixPlan<T>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid(format!("mixup alpha must be positive, got {alpha}")));
    }
    if eligible.is_empty() {
        return Err(invalid("no eligible split layers"));
    }
    if batch_size < 2 {
        return Err(invalid("mixup needs a batch of at least 2"));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| invalid(e.to_string()))?;
    let lambda = beta.sample(rng).clamp(0.0, 1.0);
    let split = eligible[rng.random_range(0..eligible.len())];
    let mut permutation: Vec<usize> = (0..batch_size).collect();
    permutation.shuffle(rng);
    MixPlan::new(T::lit(lambda), split, permutation)
}

/// Resolves configured split indices against an encoder.
pub fn eligible_splits<T: Scalar>(encoder: &MlpEncoder<T>, layers: Option<&[usize]>) -> Result<Vec<SplitPoint>> {
    match layers {
        None => Ok(encoder.eligible_splits()),
        Some(ls) => {
            if ls.is_empty() {
                return Err(invalid("no eligible split layers"));
            }
            ls.iter().map(|&l| SplitPoint::new(l, encoder)).collect()
        }
    }
}

/// `λ a + (1-λ) b`, elementwise.
pub fn mix_hidden<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>, lambda: T) -> Result<Array2<T>> {
    if a.dim() != b.dim() {
        return Err(shape_mismatch(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(&a * lambda + &b * (T::one() - lambda))
}

/// `λ v + (1-λ) v[perm]`.
fn mix_with_permutation<T: Scalar>(v: &Array2<T>, lambda: T, perm: &[usize]) -> Array2<T> {
    let permuted = v.select(Axis(0), perm);
    v * lambda + &permuted * (T::one() - lambda)
}

/// Adjoint of [`mix_with_permutation`].
fn unmix_gradient<T: Scalar>(g: &Array2<T>, lambda: T, perm: &[usize]) -> Array2<T> {
    let mut out = g * lambda;
    let rest = T::one() - lambda;
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).scaled_add(rest, &g.row(i));
    }
    out
}

#[derive(Debug, Clone)]
pub struct MixedTargets<T> {
    /// `f(x)`, used for decorrelation.
    pub z: Array2<T>,
    /// `f_L(λ g_L(x⁺) + (1-λ) g_L(x⁺)[perm])`.
    pub z_pos_mix: Array2<T>,
    /// `λ z + (1-λ) z[perm]`.
    pub z_mix: Array2<T>,
}

fn check_batches<T: Scalar>(encoder: &MlpEncoder<T>, x: &ArrayView2<T>, x_pos: &ArrayView2<T>) -> Result<()> {
    if x.dim() != x_pos.dim() {
        return Err(shape_mismatch(format!("{:?}", x.dim()), format!("{:?}", x_pos.dim())));
    }
    if x.ncols() != encoder.input_dim() {
        return Err(shape_mismatch(
            format!("{} input columns", encoder.input_dim()),
            format!("{}", x.ncols()),
        ));
    }
    Ok(())
}

fn check_plan<T: Scalar>(encoder: &MlpEncoder<T>, plan: &MixPlan<T>, rows: usize) -> Result<()> {
    if plan.permutation.len() != rows {
        return Err(shape_mismatch(
            format!("permutation of {rows}"),
            format!("{}", plan.permutation.len()),
        ));
    }
    SplitPoint::new(plan.split.layer_index(), encoder).map(|_| ())
}

pub fn mixed_step_targets<T: Scalar>(
    encoder: &MlpEncoder<T>,
    x: ArrayView2<T>,
    x_pos: ArrayView2<T>,
    plan: &MixPlan<T>,
) -> Result<MixedTargets<T>> {
    check_batches(encoder, &x, &x_pos)?;
    check_plan(encoder, plan, x.nrows())?;
    let z = encoder.forward(x)?;
    let h = encoder.forward_split(x_pos, plan.split)?;
    let mixed = mix_with_permutation(&h, plan.lambda, &plan.permutation);
    let z_pos_mix = encoder.forward_from(mixed.view(), plan.split)?;
    let z_mix = mix_with_permutation(&z, plan.lambda, &plan.permutation);
    Ok(MixedTargets { z, z_pos_mix, z_mix })
}

/// Loss and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    pub loss: LossBreakdown<T>,
    pub gradients: Gradients<T>,
}

/// Evaluates the loss of one paired batch and its exact parameter gradients.
/// `plan = None` runs the unmixed pipeline `trace(f(x), f(x⁺))`.
pub fn training_step<T: Scalar>(
    encoder: &MlpEncoder<T>,
    x: ArrayView2<T>,
    x_pos: ArrayView2<T>,
    plan: Option<&MixPlan<T>>,
    gamma: Gamma<T>,
) -> Result<StepOutcome<T>> {
    check_batches(encoder, &x, &x_pos)?;
    let mut grads = Gradients::zeros_like(encoder);
    let anchor = encoder.forward_traced(x)?;
    let z = anchor.output();
    let decor_grad = if gamma.value() > T::zero() {
        Some(loss::decorrelation_loss_grad(z.view())?)
    } else {
        None
    };

    let (breakdown, g_z) = match plan {
        None => {
            let positive = encoder.forward_traced(x_pos)?;
            let zp = positive.output();
            let breakdown = loss::total_loss(z.view(), zp.view(), gamma)?;
            let g = loss::trace_loss_grad(z.view(), zp.view(), Reduction::ElementMean)?;
            encoder.backward_into(&positive, g.mapv(|v| -v).view(), &mut grads)?;
            (breakdown, g)
        }
        Some(plan) => {
            check_plan(encoder, plan, x.nrows())?;
            let split = plan.split.layer_index();
            let prefix = encoder.trace_range(x_pos, 0, split)?;
            let mixed = mix_with_permutation(prefix.output(), plan.lambda, &plan.permutation);
            let suffix = encoder.trace_range(mixed.view(), split, encoder.num_layers())?;
            let z_pos_mix = suffix.output();
            let z_mix = mix_with_permutation(z, plan.lambda, &plan.permutation);
            let breakdown = loss::total_loss_mixed(z.view(), z_mix.view(), z_pos_mix.view(), gamma)?;

            let g_mix = loss::trace_loss_grad(z_mix.view(), z_pos_mix.view(), Reduction::ElementMean)?;
            let g_hidden_mix = encoder.backward_into(&suffix, g_mix.mapv(|v| -v).view(), &mut grads)?;
            let g_hidden = unmix_gradient(&g_hidden_mix, plan.lambda, &plan.permutation);
            encoder.backward_into(&prefix, g_hidden.view(), &mut grads)?;
            (breakdown, unmix_gradient(&g_mix, plan.lambda, &plan.permutation))
        }
    };
    let g_z = match decor_grad {
        Some(d) => g_z + d * gamma.value(),
        None => g_z,
    };
    encoder.backward_into(&anchor, g_z.view(), &mut grads)?;
    Ok(StepOutcome {
        loss: breakdown,
        gradients: grads,
    })
}
