//! Acceptance suite: each criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. The process fails if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use deep_eigenmaps::data::{generate_blobs, generate_moons, Dataset};
use deep_eigenmaps::encoder::MlpEncoder;
use deep_eigenmaps::fewshot::{evaluate_fewshot, evaluate_fewshot_features, FewShotProtocol, ProbePoint};
use deep_eigenmaps::graph::{median_pairwise_distance, Partition, WeightedGraph};
use deep_eigenmaps::loss::{analytic_anchor_gradient, decorrelation_loss, trace_loss_with, Reduction};
use deep_eigenmaps::spectral::{
    adjusted_rand_index, brute_force_optimal_partition, for_each_set_partition, generalized_eigenmaps, sign_split,
    trace_objective,
};
use deep_eigenmaps::trainer::{train, TrainConfig, TrainReport};
use deep_eigenmaps::verify::{frobenius_suite, gradient_suite, random_graph};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn check(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

/// Largest `|Tr(ZᵀLZ) − c·Σ P(C̄_k|C_k)|` over every partition of 200 random
/// graphs, for the given coefficient `c`.
fn cut_identity_gap(coefficient: f64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut cases) = (0.0f64, 0);
    for _ in 0..200 {
        let n = rng.random_range(3..=10);
        let k = rng.random_range(2..=3);
        let g = random_graph(n, &mut rng).unwrap();
        for_each_set_partition(n, k, &mut |a| {
            let p = Partition::new(a.to_vec(), k).unwrap();
            let z = g.indicator_matrix(&p).unwrap();
            let lhs = trace_objective(&g, z.view()).unwrap();
            let escape: f64 = p
                .clusters()
                .iter()
                .enumerate()
                .map(|(c, members)| g.subset_transition_probability(members, &p.complement(c)).unwrap())
                .sum();
            worst = worst.max((lhs - coefficient * escape).abs());
            cases += 1;
        });
    }
    (worst, cases)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (worst, cases) = cut_identity_gap(0.5);
    let elapsed = start.elapsed();
    let (unit_gap, _) = cut_identity_gap(1.0);
    check(
        worst < 1e-10 && within(elapsed, 10),
        format!(
            "max |Tr(ZᵀLZ) − ½ΣP(C̄|C)| = {worst:.3e} over {cases} partitions (tol 1e-10), {elapsed:.2?}; \
             without the ½ the gap is {unit_gap:.3e}"
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::NEG_INFINITY;
    let mut largest_gap = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(3..=12);
        let g = random_graph(n, &mut rng).unwrap();
        let relaxed: f64 = generalized_eigenmaps(&g, 2).unwrap().eigenvalues.sum();
        let (_, discrete) = brute_force_optimal_partition(&g, 2).unwrap();
        worst = worst.max(relaxed - discrete);
        largest_gap = largest_gap.max(discrete - relaxed);
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-9 && within(elapsed, 60),
        format!(
            "max (relaxed − discrete) = {worst:.3e} (tol 1e-9), largest relaxation gap {largest_gap:.4}, {elapsed:.2?}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let report = frobenius_suite(100, 3).unwrap();
    let elapsed = start.elapsed();
    check(
        report.worst < 1e-10 && within(elapsed, 1),
        format!("max frobenius gap {:.3e} over {} matrices (tol 1e-10), {elapsed:.2?}", report.worst, report.cases),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let report = gradient_suite(20, 4).unwrap();
    let elapsed = start.elapsed();
    check(
        report.worst <= 1e-5 && within(elapsed, 30),
        format!(
            "max relative gradient error {:.3e} over {} instances (tol 1e-5), {elapsed:.2?}",
            report.worst, report.cases
        ),
    )
}

fn anchor_objective(z: &Array2<f64>, z_pos: &Array2<f64>, gamma: f64) -> f64 {
    trace_loss_with(z.view(), z_pos.view(), Reduction::PairMean).unwrap() + gamma * decorrelation_loss(z.view()).unwrap()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut min_cos = f64::INFINITY;
    let (mut ratio_lo, mut ratio_hi) = (f64::INFINITY, 0.0f64);
    let mut batches = 0;
    for gamma in [0.001, 0.005, 0.01] {
        for _ in 0..10 {
            let (b, k) = (rng.random_range(8..=64), rng.random_range(2..=16));
            let z = Array2::from_shape_simple_fn((b, k), || StandardNormal.sample(&mut rng));
            let z_pos = &z + &Array2::from_shape_simple_fn((b, k), || {
                let e: f64 = StandardNormal.sample(&mut rng);
                0.3 * e
            });
            let i = rng.random_range(0..b);
            let analytic = analytic_anchor_gradient(z.view(), z_pos.view(), gamma, i).unwrap();
            let h = 1e-6;
            let numeric = Array1::from_shape_fn(k, |c| {
                let mut up = z.clone();
                up[[i, c]] += h;
                let mut down = z.clone();
                down[[i, c]] -= h;
                (anchor_objective(&up, &z_pos, gamma) - anchor_objective(&down, &z_pos, gamma)) / (2.0 * h)
            });
            let (na, nn) = (analytic.dot(&analytic).sqrt(), numeric.dot(&numeric).sqrt());
            min_cos = min_cos.min(analytic.dot(&numeric) / (na * nn));
            ratio_lo = ratio_lo.min(na / nn);
            ratio_hi = ratio_hi.max(na / nn);
            batches += 1;
        }
    }
    check(
        min_cos >= 0.99,
        format!(
            "min cosine {min_cos:.5} over {batches} batches (γ ≤ 0.01, need ≥ 0.99); \
             |analytic|/|numeric| in [{ratio_lo:.3}, {ratio_hi:.3}]"
        ),
    )
}

fn collapse_run(gamma: f64) -> TrainReport {
    let ds = generate_blobs::<f32>(3, 200, 8, 5.0, 1).unwrap();
    let mut enc = MlpEncoder::<f32>::default_architecture(ds.dim(), 64, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 1200,
        gamma,
        ablation: gamma == 0.0,
        seed: 1,
        ..TrainConfig::default()
    };
    train(&mut enc, ds.unlabeled(), &cfg).unwrap()
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let trace_only = *collapse_run(0.0).last().unwrap();
    let full = *collapse_run(0.005).last().unwrap();
    let elapsed = start.elapsed();
    let rank_ok = trace_only.effective_rank <= 2 && full.effective_rank >= 3;
    let std_ok = trace_only.min_dim_std < 0.1 * full.min_dim_std;
    check(
        rank_ok && std_ok && within(elapsed, 300),
        format!(
            "γ=0: rank {} min_std {:.4}; γ=0.005: rank {} min_std {:.4}; rank clause {}, min_std clause {} \
             (need {:.4} < {:.4}), {elapsed:.2?}",
            trace_only.effective_rank,
            trace_only.min_dim_std,
            full.effective_rank,
            full.min_dim_std,
            if rank_ok { "holds" } else { "fails" },
            if std_ok { "holds" } else { "fails" },
            trace_only.min_dim_std,
            0.1 * full.min_dim_std,
        ),
    )
}

const FEWSHOT_DIM: usize = 32;
const FEWSHOT_SEPARATION: f64 = 4.0;
const FEWSHOT_EMBEDDING: usize = 16;

fn fewshot_config(seed: u64, mixup: bool) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.mixup.enabled = mixup;
    cfg.augmentation.noise_sigma = 1.0;
    cfg
}

fn fewshot_test_set() -> Dataset<f64> {
    generate_blobs(8, 100, FEWSHOT_DIM, FEWSHOT_SEPARATION, 12).unwrap()
}

/// Trains on unlabeled blobs and returns (trained, untrained) encoders.
fn fewshot_encoders(per_class: usize, seed: u64, mixup: bool) -> (MlpEncoder<f64>, MlpEncoder<f64>) {
    let ds = generate_blobs::<f32>(8, per_class, FEWSHOT_DIM, FEWSHOT_SEPARATION, 11).unwrap();
    let untrained = MlpEncoder::<f32>::default_architecture(FEWSHOT_DIM, FEWSHOT_EMBEDDING, seed).unwrap();
    let mut enc = untrained.clone();
    train(&mut enc, ds.unlabeled(), &fewshot_config(seed, mixup)).unwrap();
    (enc.cast(), untrained.cast())
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let test = fewshot_test_set();
    let protocol = FewShotProtocol::new(3, 5, 15);
    let (trained, untrained) = fewshot_encoders(100, 3, true);
    let a = evaluate_fewshot(&trained, &test, ProbePoint::Output, &protocol, 600, 5).unwrap();
    let b = evaluate_fewshot(&untrained, &test, ProbePoint::Output, &protocol, 600, 5).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Array2::from_shape_simple_fn((test.len(), FEWSHOT_EMBEDDING), || StandardNormal.sample(&mut rng));
    let random = Dataset::<f64>::new(noise, test.labels().map(<[usize]>::to_vec)).unwrap();
    let chance = evaluate_fewshot_features(&random, &protocol, 600, 5).unwrap();
    let elapsed = start.elapsed();

    let gap = a.mean_accuracy - b.mean_accuracy;
    let calibrated = (chance.mean_accuracy - 1.0 / 3.0).abs() <= chance.ci95;
    check(
        a.mean_accuracy >= 0.9 && gap >= 0.15 && calibrated && within(elapsed, 600),
        format!(
            "trained {:.2}% ± {:.2}, untrained {:.2}% ± {:.2} (gap {:.1} pts), random features {:.2}% ± {:.2}, \
             {elapsed:.2?}",
            100.0 * a.mean_accuracy,
            100.0 * a.ci95,
            100.0 * b.mean_accuracy,
            100.0 * b.ci95,
            100.0 * gap,
            100.0 * chance.mean_accuracy,
            100.0 * chance.ci95,
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let test = fewshot_test_set();
    let protocol = FewShotProtocol::new(3, 5, 15);
    let seeds = [1u64, 2, 3, 4, 5];
    let mut with = Vec::new();
    let mut without = Vec::new();
    for &seed in &seeds {
        for (mixup, out) in [(true, &mut with), (false, &mut without)] {
            let (enc, _) = fewshot_encoders(30, seed, mixup);
            out.push(evaluate_fewshot(&enc, &test, ProbePoint::Output, &protocol, 600, 5).unwrap().mean_accuracy);
        }
    }
    let elapsed = start.elapsed();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m_with, m_without) = (mean(&with), mean(&without));
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{:.2}", 100.0 * a)).collect::<Vec<_>>().join(" ");
    check(
        m_with >= m_without,
        format!(
            "mixup {:.2}% [{}] vs no mixup {:.2}% [{}], gap {:+.2} pts, {elapsed:.2?}",
            100.0 * m_with,
            fmt(&with),
            100.0 * m_without,
            fmt(&without),
            100.0 * (m_with - m_without),
        ),
    )
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let ds = generate_moons::<f64>(100, 0.05, 9).unwrap();
    let h = median_pairwise_distance(ds.features()).unwrap();
    let g = WeightedGraph::from_kernel(ds.features(), h).unwrap();
    let r = generalized_eigenmaps(&g, 2).unwrap();
    let ari = adjusted_rand_index(ds.labels().unwrap(), &sign_split(r.embedding.column(1))).unwrap();
    let elapsed = start.elapsed();
    let narrow = WeightedGraph::from_kernel(ds.features(), 0.1 * h).unwrap();
    let r = generalized_eigenmaps(&narrow, 2).unwrap();
    let narrow_ari = adjusted_rand_index(ds.labels().unwrap(), &sign_split(r.embedding.column(1))).unwrap();
    check(
        ari >= 0.9 && within(elapsed, 10),
        format!(
            "ARI {ari:.4} (need ≥ 0.9) at median bandwidth {h:.4}, {elapsed:.2?}; \
             at 0.1× median the ARI is {narrow_ari:.4}"
        ),
    )
}

fn dlem(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dlem")).args(args).output().expect("dlem runs")
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"epochs": 5, "seed": 3,
            "data": {"source": "blobs", "classes": 3, "per_class": 40, "dim": 6, "separation": 4.0},
            "model": {"hidden": [32, 32], "embedding_dim": 8}}"#,
    )
    .unwrap();
    let train_into = |name: &str| {
        let out = dir.path().join(name);
        let status = dlem(&["train", "--config", path_str(&config), "--out", path_str(&out)]).status;
        (status.code(), std::fs::read(out.join("encoder.dlem")).unwrap_or_default())
    };
    let (code_a, a) = train_into("a");
    let (code_b, b) = train_into("b");
    let verify = dlem(&["verify"]);
    let identical = code_a == Some(0) && code_b == Some(0) && !a.is_empty() && a == b;
    check(
        identical && verify.status.success(),
        format!(
            "checkpoints {} ({} bytes), verify exit {:?}",
            if identical { "byte-identical" } else { "differ" },
            a.len(),
            verify.status.code()
        ),
    )
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 cut identity with ½ factor", criterion_1),
        ("2 relaxation bound", criterion_2),
        ("3 frobenius identity", criterion_3),
        ("4 gradient correctness", criterion_4),
        ("5 anchor gradient diagnostic", criterion_5),
        ("6 collapse ablation", criterion_6),
        ("7 few-shot sanity", criterion_7),
        ("8 mixup ablation direction", criterion_8),
        ("9 spectral oracle recovery", criterion_9),
        ("10 determinism", criterion_10),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let outcome = run();
        println!("{} criterion {name}: {}", if outcome.passed { "PASS" } else { "FAIL" }, outcome.detail);
        if !outcome.passed {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        println!("{} of 10 criteria failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
