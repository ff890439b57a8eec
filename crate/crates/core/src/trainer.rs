//! SGD training loop: paired batches, optional manifold mixup, momentum with
//! decoupled-from-bias weight decay, and a per-step cosine schedule.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentationConfig, AugmentationPolicy, PairedBatchStream, UnlabeledFeatures};
use crate::encoder::{Gradients, MlpEncoder};
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::loss::{Gamma, DEFAULT_GAMMA};
use crate::mixup::{self, MixupConfig};
use crate::scalar::Scalar;
use crate::spectral::symmetric_eigen;

/// Singular values below this fraction of the largest do not count towards
/// the effective rank.
pub const EFFECTIVE_RANK_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    /// Admits `gamma = 0` (trace-only ablation).
    pub ablation: bool,
    pub mixup: MixupConfig,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            gamma: DEFAULT_GAMMA,
            ablation: false,
            mixup: MixupConfig::default(),
            augmentation: AugmentationConfig::default(),
            seed: 0,
        }
    }
}

fn config_error(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(config_error("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(config_error("batch_size", "must be at least 2"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(config_error("lr0", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_error("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_error("weight_decay", "must be nonnegative"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(config_error("gamma", format!("must be nonnegative, got {}", self.gamma)));
        }
        if self.gamma == 0.0 && !self.ablation {
            return Err(config_error("gamma", "zero is only allowed with `ablation: true`"));
        }
        if self.mixup.enabled && !(self.mixup.alpha > 0.0 && self.mixup.alpha.is_finite()) {
            return Err(config_error("mixup.alpha", "must be positive"));
        }
        if matches!(&self.mixup.eligible_layers, Some(l) if l.is_empty()) {
            return Err(config_error("mixup.eligible_layers", "must not be empty"));
        }
        let aug = &self.augmentation;
        if !(aug.noise_sigma >= 0.0 && aug.noise_sigma.is_finite()) {
            return Err(config_error("augmentation.noise_sigma", "must be nonnegative"));
        }
        if !(aug.scale_lo > 0.0 && aug.scale_lo <= aug.scale_hi && aug.scale_hi.is_finite()) {
            return Err(config_error("augmentation.scale_lo", "need 0 < scale_lo <= scale_hi"));
        }
        if !(0.0..1.0).contains(&aug.mask_prob) {
            return Err(config_error("augmentation.mask_prob", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `lr0 · ½ (1 + cos(π t / T))`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(invalid(format!("step {step} beyond schedule length {total_steps}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Heavy-ball update: `v ← μv + (g + λw)`, `w ← w − ηv`. Biases are not decayed.
pub fn sgd_step<T: Scalar>(
    encoder: &mut MlpEncoder<T>,
    grads: &Gradients<T>,
    velocity: &mut Gradients<T>,
    params: SgdParams,
) -> Result<()> {
    let n = encoder.num_layers();
    if grads.layers.len() != n || velocity.layers.len() != n {
        return Err(shape_mismatch(
            format!("{n} gradient layers"),
            format!("{} / {}", grads.layers.len(), velocity.layers.len()),
        ));
    }
    for ((layer, g), v) in encoder.layers().iter().zip(&grads.layers).zip(&velocity.layers) {
        if g.weights.dim() != layer.weights.dim()
            || v.weights.dim() != layer.weights.dim()
            || g.bias.len() != layer.bias.len()
            || v.bias.len() != layer.bias.len()
        {
            return Err(shape_mismatch(
                format!("{:?}", layer.weights.dim()),
                format!("{:?}", g.weights.dim()),
            ));
        }
    }
    let lr = T::lit(params.lr);
    let mu = T::lit(params.momentum);
    let wd = T::lit(params.weight_decay);
    for ((layer, g), v) in encoder
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.layers)
    {
        ndarray::Zip::from(&mut v.weights)
            .and(&g.weights)
            .and(&layer.weights)
            .for_each(|v, &g, &w| *v = mu * *v + g + wd * w);
        ndarray::Zip::from(&mut v.bias)
            .and(&g.bias)
            .for_each(|v, &g| *v = mu * *v + g);
        layer.weights.scaled_add(-lr, &v.weights);
        layer.bias.scaled_add(-lr, &v.bias);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseMetrics {
    pub effective_rank: usize,
    pub min_dim_std: f64,
    pub mean_dim_std: f64,
}

/// Effective rank (singular values above [`EFFECTIVE_RANK_THRESHOLD`] of the
/// largest) and per-dimension standard deviations of an embedding matrix.
pub fn collapse_metrics<T: Scalar>(z: ArrayView2<T>) -> Result<CollapseMetrics> {
    if z.nrows() < 2 {
        return Err(invalid("collapse metrics need at least 2 rows"));
    }
    let z = z.mapv(|v| v.to_f64_lossy());
    if z.iter().any(|v| !v.is_finite()) {
        return Err(invalid("embedding contains non-finite values"));
    }
    let n = z.nrows() as f64;
    let std = z.map_axis(Axis(0), |col| {
        let mean = col.sum() / n;
        (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    });
    let min_dim_std = std.fold(f64::INFINITY, |m, &v| m.min(v));
    let mean_dim_std = std.mean().unwrap_or(0.0);

    // Singular values of z are square roots of the Gram eigenvalues; scale
    // first so the threshold comparison is well conditioned.
    let scale = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let effective_rank = if scale == 0.0 {
        0
    } else {
        let zs = &z / scale;
        let g: Array2<f64> = zs.t().dot(&zs);
        let gram = (&g + &g.t()) * 0.5;
        let eig = symmetric_eigen(gram.view())?;
        let sigma: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
        let max = sigma.iter().cloned().fold(0.0, f64::max);
        sigma.iter().filter(|&&s| s > EFFECTIVE_RANK_THRESHOLD * max).count()
    };
    Ok(CollapseMetrics {
        effective_rank,
        min_dim_std,
        mean_dim_std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub trace_term: f64,
    pub decorrelation_term: f64,
    pub total: f64,
    /// Rate used by the epoch's last step.
    pub learning_rate: f64,
    pub effective_rank: usize,
    pub min_dim_std: f64,
    pub mean_dim_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for record in &self.epochs {
            w.serialize(record).map_err(std::io::Error::other)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains `encoder` in place. Deterministic for a fixed dataset, config and
/// starting encoder.
pub fn train<T: Scalar>(
    encoder: &mut MlpEncoder<T>,
    data: UnlabeledFeatures<'_, T>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with_observer(encoder, data, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_observer<T: Scalar>(
    encoder: &mut MlpEncoder<T>,
    data: UnlabeledFeatures<'_, T>,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(invalid(format!(
            "dataset of {} rows cannot fill one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    if data.features().ncols() != encoder.input_dim() {
        return Err(shape_mismatch(
            format!("{} feature columns", encoder.input_dim()),
            format!("{}", data.features().ncols()),
        ));
    }
    let gamma = if cfg.gamma == 0.0 {
        Gamma::trace_only()
    } else {
        Gamma::new(T::lit(cfg.gamma))?
    };
    let policy = AugmentationPolicy::from_config(&cfg.augmentation, data.features())?;
    let mut stream = PairedBatchStream::new(data, policy, cfg.batch_size, cfg.seed)?;
    let mut mix_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mix_rng.set_stream(1);
    let eligible = if cfg.mixup.enabled {
        mixup::eligible_splits(encoder, cfg.mixup.eligible_layers.as_deref())
            .map_err(|e| config_error("mixup.eligible_layers", e.to_string()))?
    } else {
        Vec::new()
    };

    let steps_per_epoch = stream.batches_per_epoch();
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut velocity = Gradients::zeros_like(encoder);
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut trace_sum, mut decor_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for batch in stream.next_epoch() {
            let plan = if cfg.mixup.enabled {
                Some(mixup::sample_mix_plan(
                    cfg.mixup.alpha,
                    &eligible,
                    cfg.batch_size,
                    &mut mix_rng,
                )?)
            } else {
                None
            };
            let outcome = mixup::training_step(
                encoder,
                batch.x.view(),
                batch.x_pos.view(),
                plan.as_ref(),
                gamma,
            )?;
            let loss = outcome.loss;
            if !loss.total.is_finite() || !outcome.gradients.is_finite() {
                return Err(Error::Divergence { step });
            }
            lr = cosine_lr(cfg.lr0, step, total_steps)?;
            sgd_step(
                encoder,
                &outcome.gradients,
                &mut velocity,
                SgdParams {
                    lr,
                    momentum: cfg.momentum,
                    weight_decay: cfg.weight_decay,
                },
            )?;
            trace_sum += loss.trace_term.to_f64_lossy();
            decor_sum += loss.decorrelation_term.to_f64_lossy();
            total_sum += loss.total.to_f64_lossy();
            step += 1;
        }
        let z = encoder.forward(data.features())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        let metrics = collapse_metrics(z.view())?;
        let steps = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            trace_term: trace_sum / steps,
            decorrelation_term: decor_sum / steps,
            total: total_sum / steps,
            learning_rate: lr,
            effective_rank: metrics.effective_rank,
            min_dim_std: metrics.min_dim_std,
            mean_dim_std: metrics.mean_dim_std,
        };
        observe(&record);
        report.epochs.push(record);
    }
    Ok(report)
}
