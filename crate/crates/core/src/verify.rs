//! Self-check suites for the numerical identities the library relies on.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::encoder::{Gradients, MlpEncoder};
use crate::error::Result;
use crate::graph::{Partition, WeightedGraph};
use crate::loss::{frobenius_identity_gap, Gamma};
use crate::mixup::{sample_mix_plan, training_step, MixPlan};
use crate::spectral::{brute_force_optimal_partition, for_each_set_partition, generalized_eigenmaps, trace_objective};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Largest violation observed (suite-specific units).
    pub worst: f64,
    pub tolerance: f64,
}

/// Symmetric graph on `n` vertices with roughly 30% of edges absent; no
/// vertex is left isolated.
pub fn random_graph<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<WeightedGraph<f64>> {
    let mut s = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.7) {
                let w = rng.random_range(0.05..1.0);
                s[[i, j]] = w;
                s[[j, i]] = w;
            }
        }
    }
    for i in 0..n {
        if s.row(i).sum() == 0.0 {
            let j = (i + 1) % n;
            s[[i, j]] = 0.5;
            s[[j, i]] = 0.5;
        }
    }
    WeightedGraph::from_similarity(s)
}

/// `Tr(ZᵀLZ) = Σ_k P(C̄_k | C_k)` and `ZᵀDZ = I` over every partition of
/// random graphs.
pub fn cut_identity_suite(graphs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for _ in 0..graphs {
        let n = rng.random_range(3..=9);
        let k = rng.random_range(2..=3);
        let g = random_graph(n, &mut rng)?;
        let mut failure = None;
        for_each_set_partition(n, k, &mut |a| {
            if failure.is_some() {
                return;
            }
            let outcome = (|| -> Result<f64> {
                let p = Partition::new(a.to_vec(), k)?;
                let z = g.indicator_matrix(&p)?;
                let lhs = trace_objective(&g, z.view())?;
                let mut rhs = 0.0;
                for (c, members) in p.clusters().iter().enumerate() {
                    rhs += g.subset_transition_probability(members, &p.complement(c))?;
                }
                let d = g.degrees();
                let ztdz = z.t().dot(&(&z * &d.view().insert_axis(Axis(1))));
                let ortho = (&ztdz - &Array2::<f64>::eye(k)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                Ok((lhs - rhs).abs().max(ortho))
            })();
            match outcome {
                Ok(gap) => {
                    worst = worst.max(gap);
                    cases += 1;
                }
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok(SuiteReport {
        name: "cut-identity",
        passed: worst < 1e-10,
        cases,
        worst,
        tolerance: 1e-10,
    })
}

/// The sum of the `k` smallest generalized eigenvalues lower-bounds the best
/// discrete cut objective.
pub fn relaxation_bound_suite(graphs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..graphs {
        let n = rng.random_range(3..=10);
        let g = random_graph(n, &mut rng)?;
        let relaxed: f64 = generalized_eigenmaps(&g, 2)?.eigenvalues.sum();
        let (_, discrete) = brute_force_optimal_partition(&g, 2)?;
        worst = worst.max(relaxed - discrete);
    }
    Ok(SuiteReport {
        name: "relaxation-bound",
        passed: worst <= 1e-9,
        cases: graphs,
        worst,
        tolerance: 1e-9,
    })
}

pub fn frobenius_suite(matrices: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..matrices {
        let b = rng.random_range(2..=16);
        let k = rng.random_range(1..=16);
        let z = Array2::from_shape_simple_fn((b, k), || StandardNormal.sample(&mut rng));
        worst = worst.max(frobenius_identity_gap::<f64>(z.view())?);
    }
    Ok(SuiteReport {
        name: "frobenius-identity",
        passed: worst < 1e-10,
        cases: matrices,
        worst,
        tolerance: 1e-10,
    })
}

fn step_loss(
    enc: &MlpEncoder<f64>,
    x: &Array2<f64>,
    xp: &Array2<f64>,
    plan: Option<&MixPlan<f64>>,
    gamma: Gamma<f64>,
) -> Result<f64> {
    Ok(training_step(enc, x.view(), xp.view(), plan, gamma)?.loss.total)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all parameters.
pub fn relative_gradient_error(a: &Gradients<f64>, b: &Gradients<f64>) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (x, y) in la.weights.iter().chain(la.bias.iter()).zip(lb.weights.iter().chain(lb.bias.iter())) {
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    let scale = na.max(nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Central differences of the full training-step loss over every parameter.
pub fn finite_difference_gradients(
    enc: &MlpEncoder<f64>,
    x: &Array2<f64>,
    xp: &Array2<f64>,
    plan: Option<&MixPlan<f64>>,
    gamma: Gamma<f64>,
    h: f64,
) -> Result<Gradients<f64>> {
    let mut out = Gradients::zeros_like(enc);
    let mut probe = enc.clone();
    for l in 0..enc.num_layers() {
        let (rows, cols) = enc.layers()[l].weights.dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = enc.layers()[l].weights[[i, j]];
                probe.layers_mut()[l].weights[[i, j]] = orig + h;
                let up = step_loss(&probe, x, xp, plan, gamma)?;
                probe.layers_mut()[l].weights[[i, j]] = orig - h;
                let down = step_loss(&probe, x, xp, plan, gamma)?;
                probe.layers_mut()[l].weights[[i, j]] = orig;
                out.layers[l].weights[[i, j]] = (up - down) / (2.0 * h);
            }
        }
        for j in 0..cols {
            let orig = enc.layers()[l].bias[j];
            probe.layers_mut()[l].bias[j] = orig + h;
            let up = step_loss(&probe, x, xp, plan, gamma)?;
            probe.layers_mut()[l].bias[j] = orig - h;
            let down = step_loss(&probe, x, xp, plan, gamma)?;
            probe.layers_mut()[l].bias[j] = orig;
            out.layers[l].bias[j] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Analytic training-step gradients (mixed and unmixed) against central
/// differences on small random encoders.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..instances {
        let d_in = rng.random_range(2..=4);
        let hidden = rng.random_range(3..=6);
        let k = rng.random_range(2..=4);
        let b = rng.random_range(4..=6);
        let enc = MlpEncoder::<f64>::new(&[d_in, hidden, k], rng.random())?;
        let x = Array2::from_shape_simple_fn((b, d_in), || StandardNormal.sample(&mut rng));
        let xp = &x + &Array2::from_shape_simple_fn((b, d_in), || {
            let e: f64 = StandardNormal.sample(&mut rng);
            0.3 * e
        });
        let gamma = Gamma::new(rng.random_range(0.001..0.5))?;
        let plan = if case % 2 == 0 {
            Some(sample_mix_plan(2.0, &enc.eligible_splits(), b, &mut rng)?)
        } else {
            None
        };
        let analytic = training_step(&enc, x.view(), xp.view(), plan.as_ref(), gamma)?.gradients;
        let numeric = finite_difference_gradients(&enc, &x, &xp, plan.as_ref(), gamma, 1e-5)?;
        worst = worst.max(relative_gradient_error(&analytic, &numeric));
    }
    Ok(SuiteReport {
        name: "gradient-check",
        passed: worst <= 1e-5,
        cases: instances,
        worst,
        tolerance: 1e-5,
    })
}

/// Every suite at its default size.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        cut_identity_suite(200, seed)?,
        relaxation_bound_suite(100, seed.wrapping_add(1))?,
        frobenius_suite(100, seed.wrapping_add(2))?,
        gradient_suite(20, seed.wrapping_add(3))?,
    ])
}
