//! Datasets, vector-space augmentations, and paired-view batch streams.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::scalar::Scalar;

/// Feature matrix with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: Array2<T>,
    labels: Option<Vec<usize>>,
    class_count: Option<usize>,
}

/// Features with labels stripped; the only view the training path accepts.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledFeatures<'a, T>(ArrayView2<'a, T>);

impl<'a, T> UnlabeledFeatures<'a, T> {
    pub fn new(features: ArrayView2<'a, T>) -> Self {
        Self(features)
    }

    pub fn features(&self) -> ArrayView2<'a, T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

impl<T: Scalar> Dataset<T> {
    /// Labels must cover `0..max+1` with no empty class.
    pub fn new(features: Array2<T>, labels: Option<Vec<usize>>) -> Result<Self> {
        let class_count = match &labels {
            None => None,
            Some(l) => {
                if l.len() != features.nrows() {
                    return Err(shape_mismatch(
                        format!("{} labels", features.nrows()),
                        format!("{}", l.len()),
                    ));
                }
                let count = l.iter().max().map_or(0, |m| m + 1);
                let mut seen = vec![false; count];
                for &c in l {
                    seen[c] = true;
                }
                if let Some(empty) = seen.iter().position(|s| !s) {
                    return Err(invalid(format!("class {empty} has no samples")));
                }
                Some(count)
            }
        };
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, T> {
        self.features.view()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn class_count(&self) -> Option<usize> {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn unlabeled(&self) -> UnlabeledFeatures<'_, T> {
        UnlabeledFeatures(self.features.view())
    }

    /// Returns the dataset with rows reordered by `order`.
    pub fn select(&self, order: &[usize]) -> Result<Self> {
        let features = self.features.select(Axis(0), order);
        let labels = self.labels.as_ref().map(|l| order.iter().map(|&i| l[i]).collect());
        Self::new(features, labels)
    }

    pub fn read_csv<R: Read>(input: R, has_labels: bool) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut width: Option<usize> = None;
        let mut rows = 0usize;
        for (idx, record) in reader.records().enumerate() {
            let line = idx + 1;
            let record = record.map_err(|e| Error::Parse {
                line,
                reason: e.to_string(),
            })?;
            let mut fields = record.iter();
            if has_labels {
                let raw = fields.next().unwrap_or("");
                let label = raw.parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    reason: format!("label `{raw}` is not a nonnegative integer"),
                })?;
                labels.push(label);
            }
            let mut count = 0;
            for cell in fields {
                let v: T = cell.parse().map_err(|_| Error::Parse {
                    line,
                    reason: format!("non-numeric cell `{cell}`"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        reason: format!("non-finite cell `{cell}`"),
                    });
                }
                values.push(v);
                count += 1;
            }
            match width {
                None if count == 0 => {
                    return Err(Error::Parse {
                        line,
                        reason: "row has no feature columns".into(),
                    })
                }
                None => width = Some(count),
                Some(w) if w != count => {
                    return Err(Error::Parse {
                        line,
                        reason: format!("ragged row: {count} features, expected {w}"),
                    })
                }
                Some(_) => {}
            }
            rows += 1;
        }
        let width = width.ok_or_else(|| invalid("dataset file is empty"))?;
        let features = Array2::from_shape_vec((rows, width), values)
            .map_err(|e| invalid(e.to_string()))?;
        Self::new(features, has_labels.then_some(labels))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for (i, row) in self.features.rows().into_iter().enumerate() {
            let mut record: Vec<String> = Vec::with_capacity(row.len() + 1);
            if let Some(l) = &self.labels {
                record.push(l[i].to_string());
            }
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record).map_err(std::io::Error::other)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>, has_labels: bool) -> Result<Self> {
        Self::read_csv(BufReader::new(File::open(path)?), has_labels)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(BufWriter::new(File::create(path)?))
    }
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng) -> T {
    T::lit(std_normal(rng))
}

/// Isotropic unit-variance Gaussian classes centered at `separation · e_c`.
pub fn generate_blobs<T: Scalar>(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return Err(invalid("blobs need classes >= 2, per_class >= 1, dim >= 1"));
    }
    if classes > dim {
        return Err(invalid(format!(
            "{classes} classes need at least {classes} dimensions for distinct axis means"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(invalid("separation must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for i in 0..per_class {
            let r = c * per_class + i;
            for d in 0..dim {
                features[[r, d]] = gaussian(&mut rng);
            }
            features[[r, c]] += T::lit(separation);
            labels.push(c);
        }
    }
    Dataset::new(features, Some(labels))
}

/// Two interleaved half circles of radius 1.
pub fn generate_moons<T: Scalar>(per_class: usize, noise: f64, seed: u64) -> Result<Dataset<T>> {
    if per_class == 0 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(invalid("moons need per_class >= 1 and finite noise >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * per_class;
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    let step = if per_class > 1 {
        PI / (per_class - 1) as f64
    } else {
        0.0
    };
    for c in 0..2 {
        for i in 0..per_class {
            let t = step * i as f64;
            let (x, y) = if c == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let r = c * per_class + i;
            features[[r, 0]] = T::lit(x + noise * std_normal(&mut rng));
            features[[r, 1]] = T::lit(y + noise * std_normal(&mut rng));
            labels.push(c);
        }
    }
    Dataset::new(features, Some(labels))
}

/// Concentric circles of radius `1 + 2c` with uniformly random angles.
pub fn generate_rings<T: Scalar>(classes: usize, per_class: usize, noise: f64, seed: u64) -> Result<Dataset<T>> {
    if classes < 2 || per_class == 0 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(invalid("rings need classes >= 2, per_class >= 1, finite noise >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let radius = 1.0 + 2.0 * c as f64;
        for i in 0..per_class {
            let angle = rng.random_range(0.0..2.0 * PI);
            let r = c * per_class + i;
            features[[r, 0]] = T::lit(radius * angle.cos() + noise * std_normal(&mut rng));
            features[[r, 1]] = T::lit(radius * angle.sin() + noise * std_normal(&mut rng));
            labels.push(c);
        }
    }
    Dataset::new(features, Some(labels))
}

/// Population standard deviation of every column.
pub fn per_dimension_std<T: Scalar>(features: ArrayView2<T>) -> Array1<T> {
    let n = T::from_usize_lossy(features.nrows().max(1));
    features.map_axis(Axis(0), |col| {
        let mean = col.sum() / n;
        (col.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n).sqrt()
    })
}

/// Augmentation parameters as they appear in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Noise standard deviation as a fraction of each feature's spread.
    pub noise_sigma: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub mask_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            scale_lo: 0.8,
            scale_hi: 1.2,
            mask_prob: 0.1,
        }
    }
}

/// Random global scaling, additive Gaussian noise, and coordinate masking.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy<T> {
    noise_sigma: T,
    noise_scale: Option<Array1<T>>,
    scale_range: (T, T),
    mask_prob: f64,
}

impl<T: Scalar> AugmentationPolicy<T> {
    pub fn new(noise_sigma: T, scale_range: (T, T), mask_prob: f64) -> Result<Self> {
        let (lo, hi) = scale_range;
        if !(noise_sigma >= T::zero() && noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma must be finite and nonnegative"));
        }
        if !(lo > T::zero() && lo <= hi && hi.is_finite()) {
            return Err(invalid("scale range must satisfy 0 < lo <= hi"));
        }
        if !(0.0..1.0).contains(&mask_prob) {
            return Err(invalid("mask_prob must lie in [0, 1)"));
        }
        Ok(Self {
            noise_sigma,
            noise_scale: None,
            scale_range,
            mask_prob,
        })
    }

    /// No-op augmentation.
    pub fn identity() -> Self {
        Self {
            noise_sigma: T::zero(),
            noise_scale: None,
            scale_range: (T::one(), T::one()),
            mask_prob: 0.0,
        }
    }

    /// Multiplies the noise level per coordinate (e.g. by feature spread).
    pub fn with_noise_scale(mut self, scale: Array1<T>) -> Self {
        self.noise_scale = Some(scale);
        self
    }

    /// Policy from config, with noise relative to the spread of `features`.
    pub fn from_config(cfg: &AugmentationConfig, features: ArrayView2<T>) -> Result<Self> {
        Ok(Self::new(
            T::lit(cfg.noise_sigma),
            (T::lit(cfg.scale_lo), T::lit(cfg.scale_hi)),
            cfg.mask_prob,
        )?
        .with_noise_scale(per_dimension_std(features)))
    }

    pub fn mask_prob(&self) -> f64 {
        self.mask_prob
    }

    /// Scale, then noise, then mask, drawing from `rng` in that order.
    pub fn augment<R: Rng + ?Sized>(&self, x: ArrayView1<T>, rng: &mut R) -> Array1<T> {
        let (lo, hi) = self.scale_range;
        let scale = if lo < hi {
            T::lit(rng.random_range(lo.to_f64_lossy()..hi.to_f64_lossy()))
        } else {
            lo
        };
        let mut out = x.mapv(|v| v * scale);
        if self.noise_sigma > T::zero() {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            for (d, v) in out.iter_mut().enumerate() {
                let sigma = match &self.noise_scale {
                    Some(s) => self.noise_sigma * s[d],
                    None => self.noise_sigma,
                };
                let eps: f64 = normal.sample(rng);
                *v += sigma * T::lit(eps);
            }
        }
        if self.mask_prob > 0.0 {
            for v in out.iter_mut() {
                if rng.random_bool(self.mask_prob) {
                    *v = T::zero();
                }
            }
        }
        out
    }
}

/// Two independent augmentations of the same `B` source rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch<T> {
    pub x: Array2<T>,
    pub x_pos: Array2<T>,
    pub source_ids: Vec<usize>,
}

/// Endless sequence of epochs; each epoch shuffles the sources and cuts them
/// into full batches, dropping the remainder.
#[derive(Debug)]
pub struct PairedBatchStream<'a, T> {
    features: ArrayView2<'a, T>,
    policy: AugmentationPolicy<T>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> PairedBatchStream<'a, T> {
    pub fn new(
        data: UnlabeledFeatures<'a, T>,
        policy: AugmentationPolicy<T>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        if batch_size > data.len() {
            return Err(invalid(format!(
                "batch size {batch_size} exceeds dataset size {}",
                data.len()
            )));
        }
        Ok(Self {
            features: data.features(),
            policy,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.features.nrows() / self.batch_size
    }

    /// Builds the next epoch's batches.
    pub fn next_epoch(&mut self) -> Vec<PairedBatch<T>> {
        let mut order: Vec<usize> = (0..self.features.nrows()).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks_exact(self.batch_size)
            .map(|ids| self.make_batch(ids))
            .collect()
    }

    fn make_batch(&mut self, ids: &[usize]) -> PairedBatch<T> {
        let dim = self.features.ncols();
        let mut x = Array2::zeros((ids.len(), dim));
        let mut x_pos = Array2::zeros((ids.len(), dim));
        for (r, &id) in ids.iter().enumerate() {
            let src = self.features.row(id);
            x.row_mut(r).assign(&self.policy.augment(src, &mut self.rng));
            x_pos.row_mut(r).assign(&self.policy.augment(src, &mut self.rng));
        }
        PairedBatch {
            x,
            x_pos,
            source_ids: ids.to_vec(),
        }
    }
}
