//! Few-shot episodes, the L2-regularized logistic probe, and linear evaluation
//! on frozen embeddings.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::MlpEncoder;
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_PROBE_REG: f64 = 1.0;
pub const DEFAULT_EPISODES: usize = 600;
/// Stop once the probe gradient's largest entry falls below this.
pub const PROBE_GRAD_TOL: f64 = 1e-5;
pub const PROBE_MAX_ITER: usize = 1000;

/// Which representation the probes see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProbePoint {
    /// Encoder output.
    Output,
    /// Output of the layers before the last `projector_layers`.
    Backbone { projector_layers: usize },
}

impl Default for ProbePoint {
    fn default() -> Self {
        ProbePoint::Backbone { projector_layers: 2 }
    }
}

/// Embeds `features` in one full-batch pass at the requested probe point.
pub fn embed<T: Scalar>(encoder: &MlpEncoder<T>, features: ArrayView2<T>, point: ProbePoint) -> Result<Array2<T>> {
    let end = match point {
        ProbePoint::Output => encoder.num_layers(),
        ProbePoint::Backbone { projector_layers } => {
            if projector_layers >= encoder.num_layers() {
                return Err(invalid(format!(
                    "{projector_layers} projector layers leave no backbone in a {}-layer encoder",
                    encoder.num_layers()
                )));
            }
            encoder.num_layers() - projector_layers
        }
    };
    encoder.forward_range(features, 0, end)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FewShotProtocol {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub reg: f64,
}

impl FewShotProtocol {
    pub fn new(n_way: usize, k_shot: usize, q_query: usize) -> Self {
        Self {
            n_way,
            k_shot,
            q_query,
            reg: DEFAULT_PROBE_REG,
        }
    }
}

/// One N-way K-shot task. Labels are remapped to `0..n_way` in the order of
/// `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T> {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    /// Original labels of the episode classes.
    pub classes: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
    pub support_x: Array2<T>,
    pub support_y: Vec<usize>,
    pub query_x: Array2<T>,
    pub query_y: Vec<usize>,
}

/// Row indices per class.
fn class_members(labels: &[usize], class_count: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
}

fn check_protocol(class_count: usize, members: &[Vec<usize>], p: &FewShotProtocol) -> Result<()> {
    if p.n_way < 2 || p.k_shot == 0 || p.q_query == 0 {
        return Err(invalid("episodes need n_way >= 2, k_shot >= 1, q_query >= 1"));
    }
    if p.n_way > class_count {
        return Err(invalid(format!(
            "{}-way episodes need {} classes, dataset has {class_count}",
            p.n_way, p.n_way
        )));
    }
    let needed = p.k_shot + p.q_query;
    for (class, m) in members.iter().enumerate() {
        if m.len() < needed {
            return Err(Error::InsufficientClass {
                class,
                available: m.len(),
                needed,
            });
        }
    }
    Ok(())
}

fn labeled<T: Scalar>(ds: &Dataset<T>) -> Result<(&[usize], usize)> {
    match (ds.labels(), ds.class_count()) {
        (Some(l), Some(c)) => Ok((l, c)),
        _ => Err(invalid("evaluation needs a labeled dataset")),
    }
}

fn draw_episode<T: Scalar, R: Rng + ?Sized>(
    features: ArrayView2<T>,
    members: &[Vec<usize>],
    p: &FewShotProtocol,
    rng: &mut R,
) -> Episode<T> {
    let classes: Vec<usize> = index::sample(rng, members.len(), p.n_way).into_vec();
    let mut support_indices = Vec::with_capacity(p.n_way * p.k_shot);
    let mut query_indices = Vec::with_capacity(p.n_way * p.q_query);
    let mut support_y = Vec::with_capacity(p.n_way * p.k_shot);
    let mut query_y = Vec::with_capacity(p.n_way * p.q_query);
    for (new_label, &c) in classes.iter().enumerate() {
        let pool = &members[c];
        let picks = index::sample(rng, pool.len(), p.k_shot + p.q_query);
        for (j, pick) in picks.iter().enumerate() {
            if j < p.k_shot {
                support_indices.push(pool[pick]);
                support_y.push(new_label);
            } else {
                query_indices.push(pool[pick]);
                query_y.push(new_label);
            }
        }
    }
    Episode {
        n_way: p.n_way,
        k_shot: p.k_shot,
        q_query: p.q_query,
        classes,
        support_x: features.select(Axis(0), &support_indices),
        query_x: features.select(Axis(0), &query_indices),
        support_indices,
        query_indices,
        support_y,
        query_y,
    }
}

/// Samples classes without replacement, then support and query rows without
/// replacement within each class.
pub fn sample_episode<T: Scalar, R: Rng + ?Sized>(
    ds: &Dataset<T>,
    protocol: &FewShotProtocol,
    rng: &mut R,
) -> Result<Episode<T>> {
    let (labels, class_count) = labeled(ds)?;
    let members = class_members(labels, class_count);
    check_protocol(class_count, &members, protocol)?;
    Ok(draw_episode(ds.features(), &members, protocol, rng))
}

/// Multinomial logistic regression `softmax(x Wᵀ + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel<T> {
    /// `classes × features`.
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub reg: T,
    pub iterations: usize,
}

impl<T: Scalar> ProbeModel<T> {
    pub fn logits(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut out = x.dot(&self.weights.t());
        out += &self.bias;
        out
    }

    /// Row-wise class probabilities.
    pub fn predict_proba(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut p = self.logits(x);
        softmax_rows(&mut p);
        p
    }

    pub fn predict(&self, x: ArrayView2<T>) -> Vec<usize> {
        self.logits(x).rows().into_iter().map(argmax).collect()
    }

    pub fn accuracy(&self, x: ArrayView2<T>, y: &[usize]) -> f64 {
        let pred = self.predict(x);
        let hits = pred.iter().zip(y).filter(|(a, b)| a == b).count();
        hits as f64 / y.len().max(1) as f64
    }
}

fn argmax<T: Scalar>(row: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Mean cross-entropy plus `reg · ½ ‖W‖²`, and its gradients.
fn probe_objective<T: Scalar>(
    x: ArrayView2<T>,
    y: &[usize],
    w: &Array2<T>,
    b: &Array1<T>,
    reg: T,
    want_grad: bool,
) -> (T, Option<(Array2<T>, Array1<T>)>) {
    let n = T::from_usize_lossy(x.nrows());
    let mut logits = x.dot(&w.t());
    logits += b;
    let mut ce = T::zero();
    for (row, &label) in logits.rows().into_iter().zip(y) {
        let max = row.fold(T::neg_infinity(), |a, &v| a.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        ce = ce + lse - row[label];
    }
    let penalty = w.iter().map(|&v| v * v).sum::<T>() * reg * T::lit(0.5);
    let value = ce / n + penalty;
    if !want_grad {
        return (value, None);
    }
    softmax_rows(&mut logits);
    for (mut row, &label) in logits.rows_mut().into_iter().zip(y) {
        row[label] -= T::one();
    }
    logits.mapv_inplace(|v| v / n);
    let gw = logits.t().dot(&x) + &(w * reg);
    let gb = logits.sum_axis(Axis(0));
    (value, Some((gw, gb)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            max_iter: PROBE_MAX_ITER,
            grad_tol: PROBE_GRAD_TOL,
        }
    }
}

pub fn fit_probe<T: Scalar>(x: ArrayView2<T>, y: &[usize], classes: usize, reg: f64) -> Result<ProbeModel<T>> {
    fit_probe_with(x, y, classes, reg, ProbeOptions::default())
}

/// Full-batch gradient descent with Armijo backtracking, started from zero.
pub fn fit_probe_with<T: Scalar>(
    x: ArrayView2<T>,
    y: &[usize],
    classes: usize,
    reg: f64,
    opts: ProbeOptions,
) -> Result<ProbeModel<T>> {
    if classes < 2 {
        return Err(invalid("probe needs at least 2 classes"));
    }
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(invalid("probe regularization must be positive"));
    }
    if x.nrows() != y.len() || x.nrows() == 0 {
        return Err(shape_mismatch(format!("{} labels", x.nrows()), format!("{}", y.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("probe features must be finite"));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(invalid(format!("label {bad} outside 0..{classes}")));
    }
    let reg_t = T::lit(reg);
    let mut w = Array2::<T>::zeros((classes, x.ncols()));
    let mut b = Array1::<T>::zeros(classes);
    let (mut value, mut grad) = probe_objective(x, y, &w, &b, reg_t, true);
    let mut step = T::one();
    let half = T::lit(0.5);
    let tol = T::lit(opts.grad_tol);
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let (gw, gb) = grad.take().expect("gradient computed");
        let gmax = gw.iter().chain(gb.iter()).fold(T::zero(), |m, &v| m.max(v.abs()));
        if gmax < tol {
            break;
        }
        let gnorm2 = gw.iter().chain(gb.iter()).map(|&v| v * v).sum::<T>();
        // Armijo backtracking; a step that fails to decrease is never taken.
        let mut accepted = None;
        for _ in 0..60 {
            let w_new = &w - &(&gw * step);
            let b_new = &b - &(&gb * step);
            let (v_new, _) = probe_objective(x, y, &w_new, &b_new, reg_t, false);
            if v_new <= value - half * step * gnorm2 {
                accepted = Some((w_new, b_new));
                break;
            }
            step *= half;
        }
        iterations += 1;
        match accepted {
            Some((w_new, b_new)) => {
                w = w_new;
                b = b_new;
                let (v, g) = probe_objective(x, y, &w, &b, reg_t, true);
                value = v;
                grad = g;
                step = step + step;
            }
            None => break,
        }
    }
    Ok(ProbeModel {
        weights: w,
        bias: b,
        reg: reg_t,
        iterations,
    })
}

/// Objective value of a fitted probe on its training data.
pub fn probe_loss<T: Scalar>(model: &ProbeModel<T>, x: ArrayView2<T>, y: &[usize]) -> T {
    probe_objective(x, y, &model.weights, &model.bias, model.reg, false).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub mean_accuracy: f64,
    /// `1.96 · s / √E` with the sample standard deviation `s`.
    pub ci95: f64,
    /// Per-episode query accuracy, in episode order.
    pub accuracies: Vec<f64>,
}

/// Mean and 95% half-width of a list of accuracies.
pub fn summarize(accuracies: Vec<f64>) -> Result<FewShotResult> {
    let e = accuracies.len();
    if e < 2 {
        return Err(invalid("confidence interval needs at least 2 episodes"));
    }
    let mean = accuracies.iter().sum::<f64>() / e as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (e - 1) as f64;
    Ok(FewShotResult {
        mean_accuracy: mean,
        ci95: 1.96 * var.sqrt() / (e as f64).sqrt(),
        accuracies,
    })
}

/// Few-shot accuracy of fixed features. Episode `i` draws from its own
/// stream of `seed`, so the result does not depend on scheduling.
pub fn evaluate_fewshot_features<T: Scalar>(
    ds: &Dataset<T>,
    protocol: &FewShotProtocol,
    episodes: usize,
    seed: u64,
) -> Result<FewShotResult> {
    if episodes < 2 {
        return Err(invalid("confidence interval needs at least 2 episodes"));
    }
    let (labels, class_count) = labeled(ds)?;
    let members = class_members(labels, class_count);
    check_protocol(class_count, &members, protocol)?;
    let features = ds.features();
    let accuracies = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let ep = draw_episode(features, &members, protocol, &mut rng);
            let probe = fit_probe(ep.support_x.view(), &ep.support_y, protocol.n_way, protocol.reg)?;
            Ok(probe.accuracy(ep.query_x.view(), &ep.query_y))
        })
        .collect::<Result<Vec<f64>>>()?;
    summarize(accuracies)
}

/// Embeds `ds` with the frozen encoder, then runs [`evaluate_fewshot_features`].
pub fn evaluate_fewshot<T: Scalar>(
    encoder: &MlpEncoder<T>,
    ds: &Dataset<T>,
    point: ProbePoint,
    protocol: &FewShotProtocol,
    episodes: usize,
    seed: u64,
) -> Result<FewShotResult> {
    let embedded = embed(encoder, ds.features(), point)?;
    let ds = Dataset::new(embedded, ds.labels().map(<[usize]>::to_vec))?;
    evaluate_fewshot_features(&ds, protocol, episodes, seed)
}

/// Minibatch SGD schedule for the linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearSchedule {
    pub epochs: usize,
    pub lr0: f64,
    /// Epochs after which the rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LinearSchedule {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: 0.3,
            milestones: vec![60, 80],
            decay: 0.1,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl LinearSchedule {
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr0 * self.decay.powi(passed as i32)
    }
}

/// Linear classifier weights `classes × features` and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> LinearClassifier<T> {
    pub fn predict(&self, x: ArrayView2<T>) -> Vec<usize> {
        let mut logits = x.dot(&self.weights.t());
        logits += &self.bias;
        logits.rows().into_iter().map(argmax).collect()
    }

    pub fn accuracy(&self, x: ArrayView2<T>, y: &[usize]) -> f64 {
        let pred = self.predict(x);
        pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len().max(1) as f64
    }
}

/// Unregularized softmax regression by minibatch SGD with momentum.
pub fn train_linear_classifier<T: Scalar>(
    x: ArrayView2<T>,
    y: &[usize],
    classes: usize,
    schedule: &LinearSchedule,
) -> Result<LinearClassifier<T>> {
    if x.nrows() != y.len() || x.nrows() == 0 {
        return Err(shape_mismatch(format!("{} labels", x.nrows()), format!("{}", y.len())));
    }
    if schedule.epochs == 0 || schedule.batch_size == 0 || !(schedule.lr0 > 0.0) {
        return Err(invalid("linear schedule needs epochs, batch size, and lr0 positive"));
    }
    if !(0.0..1.0).contains(&schedule.momentum) {
        return Err(invalid("linear schedule momentum must lie in [0, 1)"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("features must be finite"));
    }
    let mut w = Array2::<T>::zeros((classes, x.ncols()));
    let mut b = Array1::<T>::zeros(classes);
    let mut vw = w.clone();
    let mut vb = b.clone();
    let mu = T::lit(schedule.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for epoch in 0..schedule.epochs {
        let lr = T::lit(schedule.rate_at(epoch));
        order.shuffle(&mut rng);
        for chunk in order.chunks(schedule.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let (_, grad) = probe_objective(xb.view(), &yb, &w, &b, T::zero(), true);
            let (gw, gb) = grad.expect("gradient computed");
            vw = &vw * mu + &gw;
            vb = &vb * mu + &gb;
            w.scaled_add(-lr, &vw);
            b.scaled_add(-lr, &vb);
        }
    }
    if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: schedule.epochs });
    }
    Ok(LinearClassifier { weights: w, bias: b })
}

/// Trains a linear classifier on frozen train embeddings and reports test
/// accuracy. Each split is embedded with its own full-set statistics.
pub fn linear_evaluation<T: Scalar>(
    encoder: &MlpEncoder<T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    point: ProbePoint,
    schedule: &LinearSchedule,
) -> Result<f64> {
    let (train_y, _) = labeled(train)?;
    let (test_y, _) = labeled(test)?;
    let train_classes: BTreeSet<usize> = train_y.iter().copied().collect();
    let test_classes: BTreeSet<usize> = test_y.iter().copied().collect();
    if train_classes != test_classes {
        return Err(invalid(format!(
            "train classes {train_classes:?} differ from test classes {test_classes:?}"
        )));
    }
    let classes = train_classes.len();
    let train_z = embed(encoder, train.features(), point)?;
    let test_z = embed(encoder, test.features(), point)?;
    let clf = train_linear_classifier(train_z.view(), train_y, classes, schedule)?;
    Ok(clf.accuracy(test_z.view(), test_y))
}

/// Order-independent parameter fingerprint (sum of absolute values and of
/// squares in f64).
pub fn parameter_fingerprint<T: Scalar>(encoder: &MlpEncoder<T>) -> (f64, f64) {
    encoder
        .layers()
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
        .fold((0.0, 0.0), |(a, q), &v| {
            let v = v.to_f64_lossy();
            (a + v.abs(), q + v * v)
        })
}
