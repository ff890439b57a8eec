//! Exact spectral solution of the relaxed trace-minimization problem
//! `min Tr(ZᵀLZ)` subject to `ZᵀDZ = I`,
//! via the symmetric reduction `D^{-1/2} L D^{-1/2} v = λ v`, `z = D^{-1/2} v`,
//! diagonalized with cyclic Jacobi rotations. Small graphs can also be solved
//! in their discrete form by exhaustive enumeration of partitions.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::graph::{Partition, WeightedGraph};
use crate::scalar::{tolerance, Scalar};

/// Maximum number of cyclic Jacobi sweeps.
pub const MAX_SWEEPS: usize = 100;

/// Off-diagonal Frobenius norm at which a Jacobi solve is considered converged
/// (double precision; narrower types use a multiple of their epsilon).
pub const OFF_DIAGONAL_TOLERANCE: f64 = 1e-12;

/// Largest residual `‖Lz - λDz‖∞` accepted from [`generalized_eigenmaps`],
/// relative to `max(1, max degree)`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

/// Vertex bound for [`brute_force_optimal_partition`].
pub const BRUTE_FORCE_MAX_VERTICES: usize = 12;
/// Cluster bound for [`brute_force_optimal_partition`].
pub const BRUTE_FORCE_MAX_CLUSTERS: usize = 3;

/// Eigendecomposition of a real symmetric matrix, eigenvalues ascending and
/// eigenvectors in the matching columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    pub values: Array1<T>,
    pub vectors: Array2<T>,
    pub sweeps: usize,
}

/// The `k` smallest generalized eigenpairs of `Lz = λDz`.
#[derive(Debug, Clone)]
pub struct EigenmapResult<T> {
    /// Ascending.
    pub eigenvalues: Array1<T>,
    /// `n × k`, columns D-orthonormal.
    pub embedding: Array2<T>,
    /// `max_k ‖L z_k - λ_k D z_k‖∞`.
    pub residual: T,
}

fn off_diagonal_norm<T: Scalar>(a: &Array2<T>) -> T {
    let mut acc = T::zero();
    for ((i, j), &v) in a.indexed_iter() {
        if i != j {
            acc += v * v;
        }
    }
    acc.sqrt()
}

/// Cyclic Jacobi eigensolver for a dense symmetric matrix.
///
/// Stops once the off-diagonal Frobenius norm drops below
/// [`OFF_DIAGONAL_TOLERANCE`] or after [`MAX_SWEEPS`] sweeps; the latter is
/// reported as [`Error::NoConvergence`].
pub fn symmetric_eigen<T: Scalar>(matrix: ArrayView2<T>) -> Result<SymmetricEigen<T>> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(shape_mismatch(
            "square matrix",
            format!("{}x{}", n, matrix.ncols()),
        ));
    }
    for i in 0..n {
        for j in 0..i {
            if matrix[[i, j]] != matrix[[j, i]] {
                return Err(invalid(format!("matrix is not symmetric at ({i},{j})")));
            }
        }
    }
    let mut a = matrix.to_owned();
    let mut v = Array2::<T>::eye(n);
    let frob = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let tol: T = tolerance::<T>(OFF_DIAGONAL_TOLERANCE, 0.0).max(T::epsilon() * frob);

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a);
        if off < tol || n < 2 {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                off_norm: off.to_f64_lossy(),
                residual: f64::NAN,
            });
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = (t * t + T::one()).sqrt().recip();
                let s = t * c;
                // A ← A J
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                // A ← Jᵀ A
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                a[[p, q]] = T::zero();
                a[[q, p]] = T::zero();
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[[i, i]]
            .partial_cmp(&a[[j, j]])
            .expect("finite eigenvalues")
    });
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let vectors = v.select(Axis(1), &order);
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

/// Flips `column` so that its largest-magnitude entry is positive.
fn fix_sign<T: Scalar>(mut column: ndarray::ArrayViewMut1<T>) {
    let mut best = T::zero();
    let mut best_val = T::zero();
    for &x in column.iter() {
        if x.abs() > best {
            best = x.abs();
            best_val = x;
        }
    }
    if best_val < T::zero() {
        column.mapv_inplace(|x| -x);
    }
}

/// Solves `Lz = λDz` for the `k` smallest eigenpairs.
pub fn generalized_eigenmaps<T: Scalar>(
    graph: &WeightedGraph<T>,
    k: usize,
) -> Result<EigenmapResult<T>> {
    let n = graph.n();
    if k == 0 || k > n {
        return Err(invalid(format!("k must be in 1..={n}, got {k}")));
    }
    let inv_sqrt: Array1<T> = graph.degrees().mapv(|d| d.sqrt().recip());
    let lap = graph.laplacian();
    let reduced = Array2::from_shape_fn((n, n), |(i, j)| lap[[i, j]] * inv_sqrt[i] * inv_sqrt[j]);
    // Enforce exact symmetry lost to rounding in the product above.
    let reduced = Array2::from_shape_fn((n, n), |(i, j)| {
        if i <= j {
            reduced[[i, j]]
        } else {
            reduced[[j, i]]
        }
    });
    let eig = symmetric_eigen(reduced.view())?;

    let eigenvalues = eig.values.slice(ndarray::s![..k]).to_owned();
    let mut embedding = eig.vectors.slice(ndarray::s![.., ..k]).to_owned();
    for (mut row, &s) in embedding.rows_mut().into_iter().zip(inv_sqrt.iter()) {
        row.mapv_inplace(|x| x * s);
    }
    for col in embedding.columns_mut() {
        fix_sign(col);
    }

    let residual = eigen_residual(graph, &eigenvalues, embedding.view());
    let max_degree = graph
        .degrees()
        .iter()
        .fold(T::one(), |m, &d| if d > m { d } else { m });
    let limit = tolerance::<T>(RESIDUAL_TOLERANCE, 1e4) * max_degree;
    if !(residual <= limit) {
        return Err(Error::NoConvergence {
            sweeps: eig.sweeps,
            off_norm: f64::NAN,
            residual: residual.to_f64_lossy(),
        });
    }
    Ok(EigenmapResult {
        eigenvalues,
        embedding,
        residual,
    })
}

/// `max_k ‖L z_k - λ_k D z_k‖∞`.
pub fn eigen_residual<T: Scalar>(
    graph: &WeightedGraph<T>,
    eigenvalues: &Array1<T>,
    embedding: ArrayView2<T>,
) -> T {
    let lz = graph.laplacian().dot(&embedding);
    let d = graph.degrees();
    let mut worst = T::zero();
    for ((i, k), &v) in lz.indexed_iter() {
        let r = (v - eigenvalues[k] * d[i] * embedding[[i, k]]).abs();
        if r > worst {
            worst = r;
        }
    }
    worst
}

/// `Tr(ZᵀLZ) = Σ_k z_kᵀ L z_k`.
pub fn trace_objective<T: Scalar>(graph: &WeightedGraph<T>, z: ArrayView2<T>) -> Result<T> {
    if z.nrows() != graph.n() {
        return Err(shape_mismatch(
            format!("{} rows", graph.n()),
            format!("{} rows", z.nrows()),
        ));
    }
    let lz = graph.laplacian().dot(&z);
    Ok(lz.iter().zip(z.iter()).map(|(&a, &b)| a * b).sum())
}

/// Exhaustively searches all partitions of the vertices into exactly `k`
/// nonempty clusters and returns one minimizing `Tr(ZᵀLZ)` over indicator
/// matrices. Ties keep the first partition in restricted-growth order.
pub fn brute_force_optimal_partition<T: Scalar>(
    graph: &WeightedGraph<T>,
    k: usize,
) -> Result<(Partition, T)> {
    let n = graph.n();
    if n > BRUTE_FORCE_MAX_VERTICES || k > BRUTE_FORCE_MAX_CLUSTERS {
        return Err(invalid(format!(
            "enumeration limited to n <= {BRUTE_FORCE_MAX_VERTICES}, k <= {BRUTE_FORCE_MAX_CLUSTERS} (got n = {n}, k = {k})"
        )));
    }
    if k == 0 || k > n {
        return Err(invalid(format!("k must be in 1..={n}, got {k}")));
    }
    let mut best: Option<(Vec<usize>, T)> = None;
    for_each_set_partition(n, k, &mut |assignment| {
        let p = Partition::new(assignment.to_vec(), k).expect("enumerated partitions are valid");
        let value = graph
            .partition_cut_objective(&p)
            .expect("partition matches graph");
        if best.as_ref().is_none_or(|(_, b)| value < *b) {
            best = Some((assignment.to_vec(), value));
        }
    });
    let (assignment, value) = best.expect("at least one partition exists for k <= n");
    Ok((Partition::new(assignment, k)?, value))
}

/// Calls `visit` once per partition of `0..n` into exactly `k` blocks, encoded
/// as a restricted growth string.
pub fn for_each_set_partition(n: usize, k: usize, visit: &mut dyn FnMut(&[usize])) {
    fn recurse(
        pos: usize,
        used: usize,
        n: usize,
        k: usize,
        buf: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if pos == n {
            if used == k {
                visit(buf);
            }
            return;
        }
        // Not enough positions left to open the remaining blocks.
        if k - used > n - pos {
            return;
        }
        let limit = (used + 1).min(k);
        for c in 0..limit {
            buf.push(c);
            recurse(pos + 1, used.max(c + 1), n, k, buf, visit);
            buf.pop();
        }
    }
    if k == 0 || k > n {
        return;
    }
    let mut buf = Vec::with_capacity(n);
    recurse(0, 0, n, k, &mut buf, visit);
}

/// Two-way split by the sign of a vector (nonnegative entries → cluster 0).
pub fn sign_split<T: Scalar>(v: ArrayView1<T>) -> Vec<usize> {
    v.iter().map(|&x| usize::from(x < T::zero())).collect()
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_mismatch(
            format!("{} labels", a.len()),
            format!("{} labels", b.len()),
        ));
    }
    let n = a.len();
    if n < 2 {
        return Err(invalid("ARI needs at least 2 items"));
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let choose2 = |m: u64| (m * m.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&m| choose2(m)).sum();
    let row: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let col: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = choose2(n as u64);
    let expected = row * col / total;
    let max = 0.5 * (row + col);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn triangle() -> WeightedGraph<f64> {
        WeightedGraph::from_similarity(array![[0., 1., 1.], [1., 0., 1.], [1., 1., 0.]]).unwrap()
    }

    fn barbell() -> WeightedGraph<f64> {
        let mut s = Array2::zeros((6, 6));
        for &(i, j) in &[(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5), (2, 3)] {
            s[[i, j]] = 1.0;
            s[[j, i]] = 1.0;
        }
        WeightedGraph::from_similarity(s).unwrap()
    }

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        // eigenvalues of [[2,1],[1,2]] are 1 and 3
        let eig = symmetric_eigen(array![[2.0, 1.0], [1.0, 2.0]].view()).unwrap();
        assert_abs_diff_eq!(eig.values[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(eig.values[1], 3.0, epsilon = 1e-14);
        let v = &eig.vectors;
        assert_abs_diff_eq!(v.t().dot(v), Array2::eye(2), epsilon = 1e-14);
    }

    #[test]
    fn jacobi_rejects_asymmetric() {
        assert!(symmetric_eigen(array![[1.0, 2.0], [0.0, 1.0]].view()).is_err());
    }

    #[test]
    fn triangle_spectrum() {
        let r = generalized_eigenmaps(&triangle(), 2).unwrap();
        assert_abs_diff_eq!(r.eigenvalues[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(r.eigenvalues[1], 1.5, epsilon = 1e-10);
        assert!(r.residual < 1e-8);
    }

    #[test]
    fn first_eigenvector_is_constant() {
        let g = barbell();
        let r = generalized_eigenmaps(&g, 1).unwrap();
        assert_abs_diff_eq!(r.eigenvalues[0], 0.0, epsilon = 1e-10);
        let col = r.embedding.column(0);
        let c = 1.0 / g.total_volume().sqrt();
        for &x in col {
            assert_abs_diff_eq!(x, c, epsilon = 1e-8);
        }
    }

    #[test]
    fn disconnected_components_have_zero_eigenvalues() {
        let g = WeightedGraph::from_similarity(array![
            [0., 1., 0., 0., 0., 0.],
            [1., 0., 0., 0., 0., 0.],
            [0., 0., 0., 2., 0., 0.],
            [0., 0., 2., 0., 0., 0.],
            [0., 0., 0., 0., 0., 0.5],
            [0., 0., 0., 0., 0.5, 0.]
        ])
        .unwrap();
        let r = generalized_eigenmaps(&g, 3).unwrap();
        for &l in &r.eigenvalues {
            assert_abs_diff_eq!(l, 0.0, epsilon = 1e-10);
        }
        let d = Array2::from_diag(&g.degrees());
        let gram = r.embedding.t().dot(&d).dot(&r.embedding);
        assert_abs_diff_eq!(gram, Array2::eye(3), epsilon = 1e-8);
    }

    #[test]
    fn eigenmaps_rejects_bad_k() {
        assert!(generalized_eigenmaps(&triangle(), 0).is_err());
        assert!(generalized_eigenmaps(&triangle(), 4).is_err());
    }

    #[test]
    fn trace_objective_zero_and_shape() {
        let g = triangle();
        assert_eq!(trace_objective(&g, Array2::zeros((3, 2)).view()).unwrap(), 0.0);
        assert!(trace_objective(&g, Array2::zeros((2, 2)).view()).is_err());
    }

    #[test]
    fn brute_force_examples() {
        let (_, v) = brute_force_optimal_partition(&triangle(), 2).unwrap();
        assert_abs_diff_eq!(v, 1.5, epsilon = 1e-12);

        let (p, v) = brute_force_optimal_partition(&barbell(), 2).unwrap();
        assert_eq!(p.assignment(), &[0, 0, 0, 1, 1, 1]);
        // one bridge edge, both sides volume 7
        assert_abs_diff_eq!(v, 2.0 / 7.0, epsilon = 1e-12);

        let big = WeightedGraph::from_similarity(Array2::from_shape_fn((13, 13), |(i, j)| {
            if i == j {
                0.0
            } else {
                1.0
            }
        }))
        .unwrap();
        assert!(brute_force_optimal_partition(&big, 2).is_err());
        assert!(brute_force_optimal_partition(&triangle(), 4).is_err());
    }

    #[test]
    fn set_partition_counts_are_stirling_numbers() {
        let count = |n, k| {
            let mut c = 0;
            for_each_set_partition(n, k, &mut |_| c += 1);
            c
        };
        assert_eq!(count(3, 2), 3);
        assert_eq!(count(4, 2), 7);
        assert_eq!(count(5, 3), 25);
        assert_eq!(count(12, 3), 86526);
        assert_eq!(count(2, 3), 0);
    }

    #[test]
    fn ari_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!(ari < 0.0);
    }
}
