//! Multilayer perceptron encoder `f_θ` with per-batch standardization.
//!
//! Every layer is `affine → [standardize] → [rectify]`. Standardization uses
//! the statistics of the batch being evaluated (biased variance, `ε` inside the
//! square root) and has no learnable scale or shift, so a final standardizing
//! layer pins every output dimension to zero mean and unit variance.
//!
//! The encoder can be evaluated over any contiguous layer range, which is what
//! manifold mixup needs: `g_L` is layers `0..L` and `f_L` is layers `L..`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::scalar::Scalar;

/// Added to the batch variance before taking the square root.
pub const STANDARDIZE_EPS: f64 = 1e-5;

/// Default hidden widths (`input → 256 → 256 → K`).
pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];
/// Default embedding dimension.
pub const DEFAULT_EMBEDDING_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer<T> {
    /// `in × out`; applied as `x · W`.
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub standardize: bool,
    pub rectify: bool,
}

impl<T: Scalar> AffineLayer<T> {
    pub fn new(weights: Array2<T>, bias: Array1<T>, standardize: bool, rectify: bool) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(shape_mismatch(
                format!("bias of length {}", weights.ncols()),
                format!("bias of length {}", bias.len()),
            ));
        }
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(invalid("layer dimensions must be positive"));
        }
        Ok(Self {
            weights,
            bias,
            standardize,
            rectify,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Layer boundary at which the encoder is split into `g_L` (layers `0..L`)
/// and `f_L` (layers `L..`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SplitPoint(usize);

impl SplitPoint {
    pub fn new<T: Scalar>(layer_index: usize, encoder: &MlpEncoder<T>) -> Result<Self> {
        if layer_index >= encoder.num_layers() {
            return Err(invalid(format!(
                "split layer {layer_index} out of range for {} layers",
                encoder.num_layers()
            )));
        }
        Ok(Self(layer_index))
    }

    pub fn layer_index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct MlpEncoder<T> {
    layers: Vec<AffineLayer<T>>,
    // Bumped on every mutable access so stale traces can be detected.
    version: u64,
}

impl<T: PartialEq> PartialEq for MlpEncoder<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    input: Array2<T>,
    // Output of the standardization step (or of the affine map when off).
    normalized: Array2<T>,
    inv_std: Option<Array1<T>>,
}

/// Activations recorded by a traced forward pass over layers `start..end`.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    start: usize,
    end: usize,
    version: u64,
    caches: Vec<LayerCache<T>>,
    output: Array2<T>,
}

impl<T> ForwardTrace<T> {
    pub fn output(&self) -> &Array2<T> {
        &self.output
    }

    pub fn into_output(self) -> Array2<T> {
        self.output
    }

    pub fn layer_range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

/// Parameter gradients with the same layout as the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGradient<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(encoder: &MlpEncoder<T>) -> Self {
        Self {
            layers: encoder
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> T {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

/// Result of [`MlpEncoder::backward`].
#[derive(Debug, Clone)]
pub struct Backprop<T> {
    pub params: Gradients<T>,
    pub input: Array2<T>,
}

impl<T: Scalar> MlpEncoder<T> {
    /// Xavier-uniform weights, zero biases. Hidden layers standardize and
    /// rectify; the output layer standardizes only.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        Self::with_final_standardize(layer_dims, true, seed)
    }

    pub fn with_final_standardize(layer_dims: &[usize], final_standardize: bool, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(invalid("encoder needs at least input and output dimensions"));
        }
        if layer_dims.contains(&0) {
            return Err(invalid("layer dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = layer_dims.len() - 2;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    T::lit(rng.random_range(-bound..bound))
                });
                let hidden = i < last;
                AffineLayer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    standardize: hidden || final_standardize,
                    rectify: hidden,
                }
            })
            .collect();
        Ok(Self { layers, version: 0 })
    }

    /// `input → DEFAULT_HIDDEN → embedding_dim`.
    pub fn default_architecture(input_dim: usize, embedding_dim: usize, seed: u64) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend(DEFAULT_HIDDEN);
        dims.push(embedding_dim);
        Self::new(&dims, seed)
    }

    pub fn from_layers(layers: Vec<AffineLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("encoder needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(shape_mismatch(
                    format!("layer {} input width {}", i + 1, pair[0].out_dim()),
                    format!("{}", pair[1].in_dim()),
                ));
            }
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn layers(&self) -> &[AffineLayer<T>] {
        &self.layers
    }

    /// Mutable parameter access; invalidates outstanding traces.
    pub fn layers_mut(&mut self) -> &mut [AffineLayer<T>] {
        self.version += 1;
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Width of the representation at layer boundary `index` (0 = input).
    pub fn width_at(&self, index: usize) -> usize {
        if index == 0 {
            self.input_dim()
        } else {
            self.layers[index - 1].out_dim()
        }
    }

    pub fn final_standardize(&self) -> bool {
        self.layers[self.layers.len() - 1].standardize
    }

    /// Split points in front of every standardizing layer.
    pub fn eligible_splits(&self) -> Vec<SplitPoint> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.standardize)
            .map(|(i, _)| SplitPoint(i))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, batch: ArrayView2<T>) -> Result<Array2<T>> {
        self.forward_range(batch, 0, self.num_layers())
    }

    /// `g_L(x)`.
    pub fn forward_split(&self, batch: ArrayView2<T>, split: SplitPoint) -> Result<Array2<T>> {
        self.check_split(split)?;
        self.forward_range(batch, 0, split.0)
    }

    /// `f_L(h)`.
    pub fn forward_from(&self, hidden: ArrayView2<T>, split: SplitPoint) -> Result<Array2<T>> {
        self.check_split(split)?;
        self.forward_range(hidden, split.0, self.num_layers())
    }

    pub fn forward_range(&self, batch: ArrayView2<T>, start: usize, end: usize) -> Result<Array2<T>> {
        Ok(self.trace_range(batch, start, end)?.output)
    }

    pub fn forward_traced(&self, batch: ArrayView2<T>) -> Result<ForwardTrace<T>> {
        self.trace_range(batch, 0, self.num_layers())
    }

    /// Traced evaluation of layers `start..end`; `start == end` is the identity.
    pub fn trace_range(&self, batch: ArrayView2<T>, start: usize, end: usize) -> Result<ForwardTrace<T>> {
        if start > end || end > self.num_layers() {
            return Err(invalid(format!(
                "layer range {start}..{end} invalid for {} layers",
                self.num_layers()
            )));
        }
        if batch.ncols() != self.width_at(start) {
            return Err(shape_mismatch(
                format!("{} input columns", self.width_at(start)),
                format!("{}", batch.ncols()),
            ));
        }
        let rows = batch.nrows();
        if rows == 0 {
            return Err(invalid("empty batch"));
        }
        if rows < 2 && self.layers[start..end].iter().any(|l| l.standardize) {
            return Err(invalid(
                "batch standardization needs at least 2 rows",
            ));
        }
        let eps = T::lit(STANDARDIZE_EPS);
        let b = T::from_usize_lossy(rows);
        let mut caches = Vec::with_capacity(end - start);
        let mut current = batch.to_owned();
        for layer in &self.layers[start..end] {
            let mut pre = current.dot(&layer.weights);
            pre += &layer.bias;
            let inv_std = if layer.standardize {
                let mean = pre.sum_axis(Axis(0)) / b;
                pre -= &mean;
                let var = pre.map_axis(Axis(0), |c| c.iter().map(|&v| v * v).sum::<T>()) / b;
                let inv = var.mapv(|v| (v + eps).sqrt().recip());
                pre *= &inv;
                Some(inv)
            } else {
                None
            };
            let out = if layer.rectify {
                pre.mapv(|v| v.max(T::zero()))
            } else {
                pre.clone()
            };
            caches.push(LayerCache {
                input: current,
                normalized: pre,
                inv_std,
            });
            current = out;
        }
        Ok(ForwardTrace {
            start,
            end,
            version: self.version,
            caches,
            output: current,
        })
    }

    /// Exact reverse-mode gradients for a traced pass.
    pub fn backward(&self, trace: &ForwardTrace<T>, upstream: ArrayView2<T>) -> Result<Backprop<T>> {
        let mut params = Gradients::zeros_like(self);
        let input = self.backward_into(trace, upstream, &mut params)?;
        Ok(Backprop { params, input })
    }

    /// Like [`Self::backward`] but accumulates parameter gradients into `grads`
    /// and returns the gradient with respect to the trace input.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace<T>,
        upstream: ArrayView2<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Array2<T>> {
        if trace.version != self.version {
            return Err(Error::StaleTrace(
                "encoder parameters changed since the forward pass".into(),
            ));
        }
        if trace.end > self.num_layers() || trace.caches.len() != trace.end - trace.start {
            return Err(Error::StaleTrace("trace does not match this encoder".into()));
        }
        if upstream.dim() != trace.output.dim() {
            return Err(Error::StaleTrace(format!(
                "upstream gradient {:?} does not match traced output {:?}",
                upstream.dim(),
                trace.output.dim()
            )));
        }
        if grads.layers.len() != self.num_layers() {
            return Err(shape_mismatch(
                format!("{} gradient layers", self.num_layers()),
                format!("{}", grads.layers.len()),
            ));
        }
        let b = T::from_usize_lossy(upstream.nrows());
        let mut g = upstream.to_owned();
        for (offset, cache) in trace.caches.iter().enumerate().rev() {
            let idx = trace.start + offset;
            let layer = &self.layers[idx];
            if layer.rectify {
                Zip::from(&mut g)
                    .and(&cache.normalized)
                    .for_each(|gv, &x| {
                        if x <= T::zero() {
                            *gv = T::zero();
                        }
                    });
            }
            if let Some(inv_std) = &cache.inv_std {
                let xhat = &cache.normalized;
                let mean_g = g.sum_axis(Axis(0)) / b;
                let mean_gx = (&g * xhat).sum_axis(Axis(0)) / b;
                g -= &mean_g;
                g -= &(xhat * &mean_gx);
                g *= inv_std;
            }
            let lg = &mut grads.layers[idx];
            lg.weights += &cache.input.t().dot(&g);
            lg.bias += &g.sum_axis(Axis(0));
            g = g.dot(&layer.weights.t());
        }
        Ok(g)
    }

    fn check_split(&self, split: SplitPoint) -> Result<()> {
        if split.0 >= self.num_layers() {
            return Err(invalid(format!(
                "split layer {} out of range for {} layers",
                split.0,
                self.num_layers()
            )));
        }
        Ok(())
    }

    /// Converts parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> MlpEncoder<U> {
        let conv = |v: &T| U::lit(v.to_f64_lossy());
        MlpEncoder {
            layers: self
                .layers
                .iter()
                .map(|l| AffineLayer {
                    weights: l.weights.map(conv),
                    bias: l.bias.map(conv),
                    standardize: l.standardize,
                    rectify: l.rectify,
                })
                .collect(),
            version: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = MlpEncoder::<f64>::new(&[2, 8, 4], 7).unwrap();
        let b = MlpEncoder::<f64>::new(&[2, 8, 4], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers()[0].weights.dim(), (2, 8));
        assert_eq!(a.layers()[1].weights.dim(), (8, 4));
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= bound));
        assert_ne!(a, MlpEncoder::<f64>::new(&[2, 8, 4], 8).unwrap());
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(MlpEncoder::<f64>::new(&[], 0).is_err());
        assert!(MlpEncoder::<f64>::new(&[3], 0).is_err());
        assert!(MlpEncoder::<f64>::new(&[3, 0, 2], 0).is_err());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = AffineLayer::new(Array2::eye(3), Array1::zeros(3), false, false).unwrap();
        let enc = MlpEncoder::from_layers(vec![layer]).unwrap();
        let x = array![[1.0, -2.0, 3.5]];
        assert_eq!(enc.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn final_standardization_moments() {
        let enc = MlpEncoder::<f64>::new(&[5, 16, 4], 3).unwrap();
        let z = enc.forward(random_batch(32, 5, 1).view()).unwrap();
        for col in z.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn single_row_rejected_when_standardizing() {
        let enc = MlpEncoder::<f64>::new(&[3, 4, 2], 0).unwrap();
        assert!(enc.forward(Array2::zeros((1, 3)).view()).is_err());
        let plain = MlpEncoder::<f64>::from_layers(vec![
            AffineLayer::new(Array2::eye(2), Array1::zeros(2), false, true).unwrap(),
        ])
        .unwrap();
        assert!(plain.forward(Array2::zeros((1, 2)).view()).is_ok());
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let enc = MlpEncoder::<f32>::new(&[4, 16, 16, 8], 11).unwrap();
        let x = random_batch(10, 4, 2).mapv(|v| v as f32);
        assert_eq!(enc.forward(x.view()).unwrap(), enc.forward(x.view()).unwrap());
    }

    #[test]
    fn split_composition_matches_forward() {
        let enc = MlpEncoder::<f64>::new(&[4, 16, 12, 8], 5).unwrap();
        let x = random_batch(12, 4, 3);
        let full = enc.forward(x.view()).unwrap();
        assert_eq!(enc.eligible_splits().len(), 3);
        for split in enc.eligible_splits() {
            let h = enc.forward_split(x.view(), split).unwrap();
            assert_eq!(h.ncols(), enc.width_at(split.layer_index()));
            let z = enc.forward_from(h.view(), split).unwrap();
            assert_abs_diff_eq!(z, full, epsilon = 1e-6);
        }
        let s0 = SplitPoint::new(0, &enc).unwrap();
        assert_eq!(enc.forward_split(x.view(), s0).unwrap(), x);
        assert!(SplitPoint::new(3, &enc).is_err());
        let h1 = enc.forward_split(x.view(), SplitPoint::new(1, &enc).unwrap()).unwrap();
        assert!(enc
            .forward_from(h1.view(), SplitPoint::new(2, &enc).unwrap())
            .is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let layer = AffineLayer::new(random_batch(3, 2, 9), Array1::zeros(2), false, false).unwrap();
        let enc = MlpEncoder::from_layers(vec![layer]).unwrap();
        let x = random_batch(4, 3, 1);
        let trace = enc.forward_traced(x.view()).unwrap();
        let bp = enc.backward(&trace, Array2::zeros((4, 2)).view()).unwrap();
        assert_eq!(bp.params.max_abs(), 0.0);
        assert!(bp.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut enc = MlpEncoder::<f64>::new(&[3, 4, 2], 0).unwrap();
        let x = random_batch(5, 3, 0);
        let trace = enc.forward_traced(x.view()).unwrap();
        enc.layers_mut()[0].bias[0] = 0.5;
        let err = enc.backward(&trace, Array2::ones((5, 2)).view()).unwrap_err();
        assert!(matches!(err, Error::StaleTrace(_)));

        let trace = enc.forward_traced(x.view()).unwrap();
        assert!(enc.backward(&trace, Array2::ones((4, 2)).view()).is_err());
    }

    #[test]
    fn standardization_input_gradient_is_shift_invariant() {
        let layer = AffineLayer::new(Array2::eye(3), Array1::zeros(3), true, false).unwrap();
        let enc = MlpEncoder::from_layers(vec![layer]).unwrap();
        let x = random_batch(6, 3, 4);
        let trace = enc.forward_traced(x.view()).unwrap();
        let bp = enc.backward(&trace, random_batch(6, 3, 5).view()).unwrap();
        for col in bp.input.columns() {
            assert!(col.sum().abs() < 1e-8);
        }
    }

    /// Scalarized output `Σ w ⊙ f(x)` and its finite-difference gradient.
    fn scalarized(enc: &MlpEncoder<f64>, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (&enc.forward(x.view()).unwrap() * w).sum()
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let mut enc = MlpEncoder::<f64>::new(&[3, 5, 4, 2], 21).unwrap();
        for l in enc.layers_mut() {
            l.bias.mapv_inplace(|_| 0.1);
        }
        let x = random_batch(6, 3, 8);
        let w = random_batch(6, 2, 9);
        let trace = enc.forward_traced(x.view()).unwrap();
        let bp = enc.backward(&trace, w.view()).unwrap();
        let h = 1e-4;
        for li in 0..enc.num_layers() {
            let (rows, cols) = enc.layers()[li].weights.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = enc.clone();
                    plus.layers_mut()[li].weights[[r, c]] += h;
                    let mut minus = enc.clone();
                    minus.layers_mut()[li].weights[[r, c]] -= h;
                    let fd = (scalarized(&plus, &x, &w) - scalarized(&minus, &x, &w)) / (2.0 * h);
                    let an = bp.params.layers[li].weights[[r, c]];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                    assert!(rel < 1e-5, "layer {li} w[{r},{c}]: fd {fd} vs {an}");
                }
            }
        }
        // input gradient
        for r in 0..6 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (scalarized(&enc, &xp, &w) - scalarized(&enc, &xm, &w)) / (2.0 * h);
                let an = bp.input[[r, c]];
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) < 1e-5);
            }
        }
    }

    #[test]
    fn cast_round_trips_through_f64() {
        let e32 = MlpEncoder::<f32>::new(&[3, 4, 2], 1).unwrap();
        let back: MlpEncoder<f32> = e32.cast::<f64>().cast();
        assert_eq!(back, e32);
    }
}
