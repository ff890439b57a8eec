//! Data, training, checkpoint, and evaluation working together.

use deep_eigenmaps::checkpoint::{load_checkpoint, save_checkpoint};
use deep_eigenmaps::data::{generate_blobs, AugmentationPolicy, Dataset, PairedBatchStream};
use deep_eigenmaps::encoder::MlpEncoder;
use deep_eigenmaps::fewshot::{
    evaluate_fewshot, evaluate_fewshot_features, fit_probe_with, linear_evaluation, parameter_fingerprint,
    probe_loss, FewShotProtocol, LinearSchedule, ProbeOptions, ProbePoint,
};
use deep_eigenmaps::trainer::{collapse_metrics, cosine_lr, train, TrainConfig};
use deep_eigenmaps::Error;
use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn short_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let ds = generate_blobs::<f64>(3, 20, 4, 4.0, 1).unwrap();
    let run = |seed| {
        let mut enc = MlpEncoder::<f64>::new(&[4, 16, 8], 3).unwrap();
        let report = train(&mut enc, ds.unlabeled(), &short_config(seed)).unwrap();
        (enc, report)
    };
    let (a, ra) = run(5);
    let (b, rb) = run(5);
    let (c, _) = run(6);
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_ne!(a, c);
    assert_eq!(ra.epochs.len(), 3);
    assert!(ra.epochs.iter().all(|r| r.total.is_finite()));
}

#[test]
fn learning_rate_follows_cosine_per_step() {
    let ds = generate_blobs::<f64>(2, 16, 2, 4.0, 2).unwrap();
    let mut enc = MlpEncoder::<f64>::new(&[2, 8, 4], 0).unwrap();
    let report = train(&mut enc, ds.unlabeled(), &short_config(0)).unwrap();
    // 32 rows in batches of 16: two steps per epoch, six in total.
    let rates: Vec<f64> = report.epochs.iter().map(|r| r.learning_rate).collect();
    for (epoch, rate) in rates.iter().enumerate() {
        assert_eq!(*rate, cosine_lr(0.05, 2 * epoch + 1, 6).unwrap());
    }
    assert!((cosine_lr(0.05, 0, 10).unwrap() - 0.05).abs() < 1e-15);
    assert!((cosine_lr(0.05, 5, 10).unwrap() - 0.025).abs() < 1e-15);
}

#[test]
fn divergence_is_reported() {
    let ds = generate_blobs::<f64>(2, 16, 2, 4.0, 2).unwrap();
    let mut enc = MlpEncoder::<f64>::new(&[2, 8, 4], 0).unwrap();
    let cfg = TrainConfig {
        lr0: 1e300,
        ..short_config(0)
    };
    assert!(matches!(train(&mut enc, ds.unlabeled(), &cfg), Err(Error::Divergence { .. })));
}

#[test]
fn paired_batches_cover_each_source_once_per_epoch() {
    let ds = generate_blobs::<f64>(2, 25, 3, 3.0, 4).unwrap();
    let mut stream = PairedBatchStream::new(ds.unlabeled(), AugmentationPolicy::identity(), 8, 1).unwrap();
    let batches = stream.next_epoch();
    assert_eq!(batches.len(), 6);
    let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.source_ids.clone()).collect();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 48);
    for b in &batches {
        assert_eq!(b.x, b.x_pos);
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.dlem");
    let enc = MlpEncoder::<f32>::new(&[4, 9, 3], 12).unwrap();
    save_checkpoint(&enc, &path).unwrap();
    let back: MlpEncoder<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back, enc);
    let wide: MlpEncoder<f64> = load_checkpoint(&path).unwrap();
    assert_eq!(wide.cast::<f32>(), enc);
}

fn reference_rank(z: &Array2<f64>) -> usize {
    let m = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[[i, j]]);
    let s = m.singular_values();
    let max = s.max();
    s.iter().filter(|&&v| v > 0.01 * max).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn effective_rank_matches_svd(rank in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, k) = (40, 8);
        let left = Array2::from_shape_simple_fn((b, rank), || rng.random_range(-1.0..1.0));
        let right = Array2::from_shape_simple_fn((rank, k), || rng.random_range(-1.0..1.0));
        let noise = Array2::from_shape_simple_fn((b, k), || rng.random_range(-1e-6..1e-6));
        let z = left.dot(&right) + noise;
        let m = collapse_metrics(z.view()).unwrap();
        prop_assert_eq!(m.effective_rank, reference_rank(&z));
        prop_assert!(m.effective_rank <= rank);
    }

    #[test]
    fn standardized_outputs_have_unit_std(seed in any::<u64>(), rows in 4usize..40) {
        let enc = MlpEncoder::<f64>::new(&[3, 10, 5], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Array2::from_shape_simple_fn((rows, 3), || rng.random_range(-3.0..3.0));
        let z = enc.forward(x.view()).unwrap();
        let m = collapse_metrics(z.view()).unwrap();
        // A column whose pre-activation variance is tiny is shrunk by ε.
        prop_assert!(m.mean_dim_std <= 1.0 + 1e-9);
        prop_assert!(m.min_dim_std >= 0.0);
    }

    #[test]
    fn dataset_csv_round_trip(values in prop::collection::vec(-1e6f64..1e6, 6..60), labeled in any::<bool>()) {
        let rows = values.len() / 3;
        let features = Array2::from_shape_vec((rows, 3), values[..rows * 3].to_vec()).unwrap();
        let labels = labeled.then(|| (0..rows).map(|i| i % 2).collect::<Vec<_>>());
        prop_assume!(rows >= 2);
        let ds = Dataset::new(features, labels).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::<f64>::read_csv(buf.as_slice(), labeled).unwrap();
        prop_assert_eq!(back.features(), ds.features());
        prop_assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn more_probe_iterations_never_raise_the_objective(seed in any::<u64>(), iters in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((12, 4), || rng.random_range(-2.0..2.0));
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let fit = |max_iter| {
            let m = fit_probe_with(x.view(), &y, 3, 1.0, ProbeOptions { max_iter, grad_tol: 0.0 }).unwrap();
            probe_loss(&m, x.view(), &y)
        };
        prop_assert!(fit(2 * iters) <= fit(iters) + 1e-12);
    }
}

fn one_hot_dataset(classes: usize, per_class: usize) -> Dataset<f64> {
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let features = Array2::from_shape_fn((n, classes), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
    Dataset::new(features, Some(labels)).unwrap()
}

#[test]
fn perfect_features_score_perfectly() {
    let ds = one_hot_dataset(6, 20);
    let r = evaluate_fewshot_features(&ds, &FewShotProtocol::new(5, 1, 15), 50, 3).unwrap();
    assert_eq!(r.mean_accuracy, 1.0);
    assert_eq!(r.ci95, 0.0);
    assert_eq!(r.accuracies.len(), 50);
}

#[test]
fn random_features_sit_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 10 * 40;
    let features = Array2::from_shape_simple_fn((n, 16), || rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let ds = Dataset::new(features, Some(labels)).unwrap();
    let r = evaluate_fewshot_features(&ds, &FewShotProtocol::new(5, 5, 15), 600, 0).unwrap();
    assert!(
        (r.mean_accuracy - 0.2).abs() <= r.ci95,
        "{} ± {}",
        r.mean_accuracy,
        r.ci95
    );
}

#[test]
fn evaluation_leaves_encoder_untouched() {
    let ds = generate_blobs::<f64>(4, 30, 4, 4.0, 8).unwrap();
    let enc = MlpEncoder::<f64>::new(&[4, 12, 12, 6], 1).unwrap();
    let before = parameter_fingerprint(&enc);
    let clone = enc.clone();
    evaluate_fewshot(&enc, &ds, ProbePoint::default(), &FewShotProtocol::new(3, 2, 5), 20, 1).unwrap();
    linear_evaluation(&enc, &ds, &ds, ProbePoint::Output, &LinearSchedule { epochs: 5, ..LinearSchedule::default() })
        .unwrap();
    assert_eq!(parameter_fingerprint(&enc), before);
    assert_eq!(enc, clone);
}

#[test]
fn too_few_samples_for_protocol() {
    let ds = one_hot_dataset(3, 4);
    let err = evaluate_fewshot_features(&ds, &FewShotProtocol::new(3, 2, 5), 10, 0).unwrap_err();
    assert!(matches!(err, Error::InsufficientClass { needed: 7, .. }));
    let err = evaluate_fewshot_features(&one_hot_dataset(3, 20), &FewShotProtocol::new(3, 1, 1), 1, 0).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn permuted_labels_train_to_chance() {
    let train_ds = generate_blobs::<f64>(4, 100, 4, 6.0, 21).unwrap();
    let test_ds = generate_blobs::<f64>(4, 100, 4, 6.0, 22).unwrap();
    let enc = MlpEncoder::<f64>::new(&[4, 16, 8], 2).unwrap();
    let schedule = LinearSchedule::default();
    let honest = linear_evaluation(&enc, &train_ds, &test_ds, ProbePoint::Output, &schedule).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shuffled: Vec<usize> = (0..train_ds.len()).map(|_| rng.random_range(0..4)).collect();
    let null_ds = Dataset::new(train_ds.features().to_owned(), Some(shuffled)).unwrap();
    let null = linear_evaluation(&enc, &null_ds, &test_ds, ProbePoint::Output, &schedule).unwrap();
    assert!(honest > 0.9, "honest {honest}");
    assert!((null - 0.25).abs() < 0.1, "null {null}");
}
