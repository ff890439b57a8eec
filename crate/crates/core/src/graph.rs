//! Weighted similarity graphs over augmented views.
//!
//! A [`WeightedGraph`] stores a dense symmetric similarity matrix `S` with a
//! zero diagonal together with the vertex degrees `d_i = Σ_j s_ij`. From it we
//! derive the unnormalized Laplacian `L = D - S`, the random-walk transition
//! matrix `P = D⁻¹S`, its stationary distribution, and the cluster-level
//! transition probabilities that the eigenmap objective is built on.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Dense, symmetric, nonnegative similarity graph without self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph<T> {
    similarity: Array2<T>,
    degrees: Array1<T>,
}

/// Assignment of vertices to `k` nonempty clusters.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    assignment: Vec<usize>,
    k: usize,
}

impl Partition {
    pub fn new(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("partition needs at least one cluster"));
        }
        let mut seen = vec![false; k];
        for (vertex, &c) in assignment.iter().enumerate() {
            if c >= k {
                return Err(invalid(format!(
                    "vertex {vertex} assigned to cluster {c}, but k = {k}"
                )));
            }
            seen[c] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("cluster {empty} is empty")));
        }
        Ok(Self { assignment, k })
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Vertex lists, one per cluster, in cluster-id order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (v, &c) in self.assignment.iter().enumerate() {
            out[c].push(v);
        }
        out
    }

    /// Vertices outside cluster `c`.
    pub fn complement(&self, c: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(v, &a)| (a != c).then_some(v))
            .collect()
    }
}

/// One augmented view: the id of the raw sample it came from plus its features.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView<S, T> {
    pub source: S,
    pub features: Array1<T>,
}

impl<T: Scalar> WeightedGraph<T> {
    /// Validates `similarity` and caches degrees.
    pub fn from_similarity(similarity: Array2<T>) -> Result<Self> {
        let (rows, cols) = similarity.dim();
        if rows != cols {
            return Err(Error::InvalidGraph(format!(
                "similarity must be square, got {rows}x{cols}"
            )));
        }
        if rows < 2 {
            return Err(Error::InvalidGraph("graph needs at least 2 vertices".into()));
        }
        for i in 0..rows {
            if similarity[[i, i]] != T::zero() {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {i}")));
            }
            for j in 0..cols {
                let s = similarity[[i, j]];
                if !s.is_finite() || s < T::zero() {
                    return Err(Error::InvalidGraph(format!(
                        "entry ({i},{j}) = {s} is not a finite nonnegative weight"
                    )));
                }
                if s != similarity[[j, i]] {
                    return Err(Error::InvalidGraph(format!(
                        "asymmetric entries at ({i},{j})"
                    )));
                }
            }
        }
        let degrees: Array1<T> = similarity.rows().into_iter().map(|r| r.sum()).collect();
        if let Some(vertex) = degrees.iter().position(|&d| d <= T::zero()) {
            return Err(Error::IsolatedVertex { vertex });
        }
        Ok(Self {
            similarity,
            degrees,
        })
    }

    /// Graph whose only edges join distinct views of the same source sample.
    pub fn from_augmented_views<S: Eq + Hash>(
        views: &[AugmentedView<S, T>],
        same_source_weight: T,
    ) -> Result<Self> {
        if views.len() < 2 {
            return Err(invalid("augmentation graph needs at least 2 views"));
        }
        if !(same_source_weight > T::zero() && same_source_weight.is_finite()) {
            return Err(invalid("same-source weight must be positive and finite"));
        }
        let mut ids: HashMap<&S, usize> = HashMap::new();
        let mut group = Vec::with_capacity(views.len());
        let mut counts = Vec::new();
        for view in views {
            let next = ids.len();
            let id = *ids.entry(&view.source).or_insert(next);
            if id == counts.len() {
                counts.push(0usize);
            }
            counts[id] += 1;
            group.push(id);
        }
        if ids.len() < 2 {
            return Err(invalid("augmentation graph needs at least 2 distinct sources"));
        }
        if let Some(vertex) = group.iter().position(|&g| counts[g] < 2) {
            return Err(Error::IsolatedVertex { vertex });
        }
        let n = views.len();
        let similarity = Array2::from_shape_fn((n, n), |(i, j)| {
            if i != j && group[i] == group[j] {
                same_source_weight
            } else {
                T::zero()
            }
        });
        Self::from_similarity(similarity)
    }

    /// Dense Gaussian-kernel graph, `s_ij = exp(-|x_i - x_j|² / (2 h²))`.
    pub fn from_kernel(points: ArrayView2<T>, bandwidth: T) -> Result<Self> {
        if !(bandwidth > T::zero() && bandwidth.is_finite()) {
            return Err(invalid(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let n = points.nrows();
        if n < 2 {
            return Err(invalid("kernel graph needs at least 2 points"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(invalid("points must have finite coordinates"));
        }
        let denom = T::lit(2.0) * bandwidth * bandwidth;
        let mut similarity = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let d2 = squared_distance(points.row(i), points.row(j));
                let s = (-d2 / denom).exp();
                similarity[[i, j]] = s;
                similarity[[j, i]] = s;
            }
        }
        Self::from_similarity(similarity)
    }

    pub fn n(&self) -> usize {
        self.degrees.len()
    }

    pub fn similarity(&self) -> ArrayView2<'_, T> {
        self.similarity.view()
    }

    pub fn degrees(&self) -> ArrayView1<'_, T> {
        self.degrees.view()
    }

    /// `Vol(C) = Σ_{i∈C} d_i`.
    pub fn volume(&self, subset: &[usize]) -> Result<T> {
        if subset.is_empty() {
            return Err(invalid("volume of an empty subset"));
        }
        self.check_indices(subset)?;
        Ok(subset.iter().map(|&i| self.degrees[i]).sum())
    }

    pub fn total_volume(&self) -> T {
        self.degrees.sum()
    }

    /// `L = D - S`.
    pub fn laplacian(&self) -> Array2<T> {
        let mut l = self.similarity.mapv(|s| -s);
        for (i, &d) in self.degrees.iter().enumerate() {
            l[[i, i]] = d;
        }
        l
    }

    /// Row-stochastic transition matrix `P = D⁻¹S`.
    pub fn random_walk_matrix(&self) -> Array2<T> {
        let mut p = self.similarity.clone();
        for (mut row, &d) in p.rows_mut().into_iter().zip(self.degrees.iter()) {
            row.mapv_inplace(|s| s / d);
        }
        p
    }

    /// `π_i = d_i / Vol(X)`.
    pub fn stationary_distribution(&self) -> Array1<T> {
        let vol = self.total_volume();
        self.degrees.mapv(|d| d / vol)
    }

    /// Probability that one random-walk step started (at stationarity) in
    /// `from` lands in `to`: `Σ_{i∈from, j∈to} s_ij / Vol(from)`.
    pub fn subset_transition_probability(&self, from: &[usize], to: &[usize]) -> Result<T> {
        if from.is_empty() {
            return Err(invalid("transition source set is empty"));
        }
        self.check_indices(from)?;
        self.check_indices(to)?;
        let from_set: HashSet<usize> = from.iter().copied().collect();
        if let Some(v) = to.iter().find(|v| from_set.contains(v)) {
            return Err(invalid(format!("vertex {v} appears in both sets")));
        }
        let mut flow = T::zero();
        for &i in from {
            for &j in to {
                flow += self.similarity[[i, j]];
            }
        }
        Ok(flow / self.volume(from)?)
    }

    /// Volume-scaled cluster indicators: `z_ik = 1/√Vol(C_k)` for `i ∈ C_k`.
    pub fn indicator_matrix(&self, partition: &Partition) -> Result<Array2<T>> {
        self.check_partition(partition)?;
        let clusters = partition.clusters();
        let scale: Vec<T> = clusters
            .iter()
            .map(|c| self.volume(c).map(|v| v.sqrt().recip()))
            .collect::<Result<_>>()?;
        let mut z = Array2::zeros((self.n(), partition.k()));
        for (i, &c) in partition.assignment().iter().enumerate() {
            z[[i, c]] = scale[c];
        }
        Ok(z)
    }

    /// `Tr(ZᵀLZ)` for the indicator matrix of `partition`; equals the sum of
    /// the clusters' escape probabilities `Σ_k P(C̄_k | C_k)`.
    pub fn partition_cut_objective(&self, partition: &Partition) -> Result<T> {
        let z = self.indicator_matrix(partition)?;
        crate::spectral::trace_objective(self, z.view())
    }

    /// Same quantity as [`Self::partition_cut_objective`] computed from cut
    /// weights and volumes without forming `Z`.
    pub fn normalized_cut(&self, partition: &Partition) -> Result<T> {
        self.check_partition(partition)?;
        let mut cut = vec![T::zero(); partition.k()];
        let mut vol = vec![T::zero(); partition.k()];
        let a = partition.assignment();
        for i in 0..self.n() {
            vol[a[i]] += self.degrees[i];
            for j in 0..self.n() {
                if a[i] != a[j] {
                    cut[a[i]] += self.similarity[[i, j]];
                }
            }
        }
        Ok(cut.iter().zip(&vol).map(|(&c, &v)| c / v).sum())
    }

    /// Writes the upper triangle as `i,j,weight` lines.
    pub fn write_edges_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for i in 0..self.n() {
            for j in (i + 1)..self.n() {
                let s = self.similarity[[i, j]];
                if s != T::zero() {
                    w.write_record([i.to_string(), j.to_string(), s.to_string()])
                        .map_err(csv_to_io)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `i,j,weight` triples. The vertex count is one more than the largest
    /// index; edges are mirrored, and repeating an edge in either orientation
    /// is an error.
    pub fn read_edges_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut edges = Vec::new();
        let mut seen = HashSet::new();
        let mut n = 0usize;
        for (idx, record) in reader.records().enumerate() {
            let line = idx + 1;
            let record = record.map_err(|e| Error::Parse {
                line,
                reason: e.to_string(),
            })?;
            if record.len() != 3 {
                return Err(Error::Parse {
                    line,
                    reason: format!("expected 3 fields, found {}", record.len()),
                });
            }
            let parse_index = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    reason: format!("invalid vertex index `{s}`"),
                })
            };
            let i = parse_index(&record[0])?;
            let j = parse_index(&record[1])?;
            let w: T = record[2].parse().map_err(|_| Error::Parse {
                line,
                reason: format!("invalid weight `{}`", &record[2]),
            })?;
            if i == j {
                return Err(Error::Parse {
                    line,
                    reason: format!("self-loop at vertex {i}"),
                });
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::Parse {
                    line,
                    reason: format!("duplicate edge ({i},{j})"),
                });
            }
            n = n.max(i + 1).max(j + 1);
            edges.push((i, j, w));
        }
        let mut similarity = Array2::zeros((n, n));
        for (i, j, w) in edges {
            similarity[[i, j]] = w;
            similarity[[j, i]] = w;
        }
        Self::from_similarity(similarity)
    }

    fn check_indices(&self, subset: &[usize]) -> Result<()> {
        match subset.iter().find(|&&i| i >= self.n()) {
            Some(i) => Err(invalid(format!(
                "vertex {i} out of range for graph with {} vertices",
                self.n()
            ))),
            None => Ok(()),
        }
    }

    fn check_partition(&self, partition: &Partition) -> Result<()> {
        if partition.len() != self.n() {
            return Err(invalid(format!(
                "partition covers {} vertices, graph has {}",
                partition.len(),
                self.n()
            )));
        }
        Ok(())
    }
}

pub(crate) fn squared_distance<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Median of all pairwise Euclidean distances; the default kernel bandwidth.
pub fn median_pairwise_distance<T: Scalar>(points: ArrayView2<T>) -> Result<T> {
    let n = points.nrows();
    if n < 2 {
        return Err(invalid("median distance needs at least 2 points"));
    }
    let mut d: Vec<T> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(squared_distance(points.row(i), points.row(j)).sqrt());
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        (d[m / 2 - 1] + d[m / 2]) / T::lit(2.0)
    };
    if median > T::zero() {
        Ok(median)
    } else {
        Err(invalid("all points coincide; median distance is zero"))
    }
}

fn csv_to_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}
