//! K-means clustering of token sets and the bookkeeping the sparse executor
//! needs: centroids, sizes, and a permutation that makes every cluster's
//! tokens contiguous.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // unused only when std is in the build graph
use num_traits::Float;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{dist_sq, dot, matmul_transposed, Matrix, TokenMatrix};

/// Default Lloyd iteration budget.
pub const DEFAULT_MAX_ITERS: usize = 25;

/// A partition of `N` tokens into `C` non-empty clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    assignments: Vec<usize>,
    centroids: TokenMatrix,
    sizes: Vec<usize>,
    permutation: Vec<usize>,
    offsets: Vec<usize>,
}

/// How tight a clustering is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringQuality {
    /// Mean squared distance from each token to its centroid.
    pub delta_sq: f64,
    /// Largest euclidean norm over the tokens.
    pub k_max: f64,
    /// Total within-cluster sum of squares.
    pub inertia: f64,
}

impl ClusterModel {
    /// Build a model from explicit assignments; centroids are the cluster means.
    pub fn from_assignments(
        tokens: &TokenMatrix,
        assignments: Vec<usize>,
        num_clusters: usize,
    ) -> Result<Self> {
        if assignments.len() != tokens.rows() {
            return Err(Error::DimensionMismatch {
                op: "from_assignments",
                left_rows: assignments.len(),
                left_cols: 1,
                right_rows: tokens.rows(),
                right_cols: tokens.cols(),
            });
        }
        if num_clusters == 0 || num_clusters > tokens.rows() {
            return Err(Error::InvalidClusterCount {
                clusters: num_clusters,
                tokens: tokens.rows(),
            });
        }
        let mut sizes = vec![0usize; num_clusters];
        for &a in &assignments {
            if a >= num_clusters {
                return Err(Error::InvalidParameter(alloc::format!(
                    "assignment {a} out of range for {num_clusters} clusters"
                )));
            }
            sizes[a] += 1;
        }
        if let Some(c) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidParameter(alloc::format!("cluster {c} is empty")));
        }
        let centroids = TokenMatrix::try_from(cluster_means(tokens, &assignments, &sizes))?;

        let mut offsets = Vec::with_capacity(num_clusters);
        let mut start = 0;
        for &s in &sizes {
            offsets.push(start);
            start += s;
        }
        let mut cursor = offsets.clone();
        let mut permutation = vec![0usize; assignments.len()];
        for (i, &a) in assignments.iter().enumerate() {
            permutation[cursor[a]] = i;
            cursor[a] += 1;
        }

        Ok(Self {
            assignments,
            centroids,
            sizes,
            permutation,
            offsets,
        })
    }

    /// Every token in its own cluster.
    pub fn singletons(tokens: &TokenMatrix) -> Result<Self> {
        Self::from_assignments(tokens, (0..tokens.rows()).collect(), tokens.rows())
    }

    #[inline]
    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }

    #[inline]
    pub fn num_tokens(&self) -> usize {
        self.assignments.len()
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    #[inline]
    pub fn cluster_of(&self, token: usize) -> usize {
        self.assignments[token]
    }

    pub fn centroids(&self) -> &TokenMatrix {
        &self.centroids
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// `permutation[p]` is the original index of the token at permuted position `p`.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Original indices of the tokens in cluster `c`, ascending.
    #[inline]
    pub fn members(&self, c: usize) -> &[usize] {
        &self.permutation[self.offsets[c]..self.offsets[c] + self.sizes[c]]
    }

    /// Per-cluster means of `values` under this model's assignments.
    ///
    /// Used for value centroids, which follow the key clustering.
    pub fn means_of(&self, values: &TokenMatrix) -> Result<TokenMatrix> {
        if values.rows() != self.num_tokens() {
            return Err(Error::DimensionMismatch {
                op: "means_of",
                left_rows: values.rows(),
                left_cols: values.cols(),
                right_rows: self.num_tokens(),
                right_cols: self.centroids.cols(),
            });
        }
        TokenMatrix::try_from(cluster_means(values, &self.assignments, &self.sizes))
    }

    /// The `N × d` matrix whose row `i` is the centroid of token `i`'s cluster.
    pub fn expand_centroids(&self) -> TokenMatrix {
        let d = self.centroids.cols();
        let mut data = Vec::with_capacity(self.num_tokens() * d);
        for &a in &self.assignments {
            data.extend_from_slice(self.centroids.row(a));
        }
        TokenMatrix::new(self.num_tokens(), d, data).expect("centroids are finite")
    }

    pub fn quality(&self, tokens: &TokenMatrix) -> ClusteringQuality {
        let n = tokens.rows();
        let mut inertia = 0.0;
        let mut k_max_sq = 0.0f64;
        for i in 0..n {
            inertia += dist_sq(tokens.row(i), self.centroids.row(self.assignments[i]));
            k_max_sq = k_max_sq.max(tokens.row_norm_sq(i));
        }
        ClusteringQuality {
            delta_sq: if n == 0 { 0.0 } else { inertia / n as f64 },
            k_max: k_max_sq.sqrt(),
            inertia,
        }
    }

    /// Reorder rows so each cluster is contiguous.
    pub fn permute_rows(&self, tokens: &Matrix) -> Result<Matrix> {
        self.check_rows("permute_rows", tokens)?;
        let d = tokens.cols();
        let mut data = Vec::with_capacity(tokens.rows() * d);
        for &src in &self.permutation {
            data.extend_from_slice(tokens.row(src));
        }
        Matrix::new(tokens.rows(), d, data)
    }

    /// Undo [`permute_rows`](Self::permute_rows).
    pub fn inverse_permute_rows(&self, permuted: &Matrix) -> Result<Matrix> {
        self.check_rows("inverse_permute_rows", permuted)?;
        let mut out = Matrix::zeros(permuted.rows(), permuted.cols());
        for (p, &dst) in self.permutation.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(permuted.row(p));
        }
        Ok(out)
    }

    fn check_rows(&self, op: &'static str, m: &Matrix) -> Result<()> {
        if m.rows() != self.num_tokens() {
            return Err(Error::DimensionMismatch {
                op,
                left_rows: m.rows(),
                left_cols: m.cols(),
                right_rows: self.num_tokens(),
                right_cols: m.cols(),
            });
        }
        Ok(())
    }
}

/// Means shifted by each cluster's first member, so a cluster of identical
/// tokens gets that token back bit for bit.
fn cluster_means(tokens: &Matrix, assignments: &[usize], sizes: &[usize]) -> Matrix {
    let d = tokens.cols();
    let mut first: Vec<Option<usize>> = vec![None; sizes.len()];
    let mut sums = Matrix::zeros(sizes.len(), d);
    for (i, &a) in assignments.iter().enumerate() {
        let f = *first[a].get_or_insert(i);
        for t in 0..d {
            let delta = tokens.get(i, t) - tokens.get(f, t);
            sums.row_mut(a)[t] += delta;
        }
    }
    for (c, &n) in sizes.iter().enumerate() {
        let Some(f) = first[c] else { continue };
        let n = n as f64;
        for (t, s) in sums.row_mut(c).iter_mut().enumerate() {
            *s = tokens.get(f, t) + *s / n;
        }
    }
    sums
}

/// Lloyd's algorithm with k-means++ seeding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeans {
    pub num_clusters: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Independent seeded runs; the lowest-inertia one wins.
    pub restarts: usize,
}

/// Result of a k-means run along with its trace.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: ClusterModel,
    /// Inertia after every centroid update of the winning run.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Multiply-add FLOPs spent across all restarts (2 per multiply-add).
    pub flops: u64,
}

impl KMeans {
    pub fn new(num_clusters: usize, seed: u64) -> Self {
        Self {
            num_clusters,
            max_iters: DEFAULT_MAX_ITERS,
            seed,
            restarts: 1,
        }
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn fit(&self, tokens: &TokenMatrix) -> Result<KMeansFit> {
        let n = tokens.rows();
        if self.num_clusters == 0 || self.num_clusters > n {
            return Err(Error::InvalidClusterCount {
                clusters: self.num_clusters,
                tokens: n,
            });
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be at least 1".into()));
        }
        let mut master = ChaCha8Rng::seed_from_u64(self.seed);
        let mut best: Option<KMeansFit> = None;
        let mut flops = 0;
        for _ in 0..self.restarts {
            let mut rng = ChaCha8Rng::seed_from_u64(master.random());
            let fit = lloyd(tokens, self.num_clusters, self.max_iters, &mut rng)?;
            flops += fit.flops;
            let better = match &best {
                None => true,
                Some(b) => fit.final_inertia() < b.final_inertia(),
            };
            if better {
                best = Some(fit);
            }
        }
        let mut best = best.expect("at least one restart");
        best.flops = flops;
        Ok(best)
    }
}

impl KMeansFit {
    pub fn final_inertia(&self) -> f64 {
        self.inertia_trace.last().copied().unwrap_or(0.0)
    }
}

/// Cluster `tokens` into `num_clusters` groups.
pub fn kmeans(
    tokens: &TokenMatrix,
    num_clusters: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ClusterModel> {
    Ok(KMeans::new(num_clusters, seed)
        .with_max_iters(max_iters)
        .fit(tokens)?
        .model)
}

fn lloyd(tokens: &TokenMatrix, k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> Result<KMeansFit> {
    let n = tokens.rows();
    let d = tokens.cols() as u64;
    let mut centroids = plus_plus_init(tokens, k, rng);
    let mut prev: Option<Vec<usize>> = None;
    let mut trace = Vec::new();
    let mut flops = 0u64;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        let mut assignments = assign_nearest(tokens, &centroids)?;
        flops += 2 * (n as u64) * (k as u64) * d;
        repair_empty(tokens, &mut assignments, &mut centroids, k);
        if prev.as_deref() == Some(assignments.as_slice()) {
            converged = true;
            break;
        }
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        centroids = cluster_means(tokens, &assignments, &sizes);
        flops += (n as u64) * d;
        trace.push(
            (0..n)
                .map(|i| dist_sq(tokens.row(i), centroids.row(assignments[i])))
                .sum(),
        );
        prev = Some(assignments);
    }

    let assignments = prev.expect("at least one iteration");
    Ok(KMeansFit {
        model: ClusterModel::from_assignments(tokens, assignments, k)?,
        inertia_trace: trace,
        iterations,
        converged,
        flops,
    })
}

fn plus_plus_init(tokens: &TokenMatrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = tokens.rows();
    let mut centroids = Matrix::zeros(k, tokens.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(tokens.row(first));
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| dist_sq(tokens.row(i), tokens.row(first)))
        .collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&nearest) {
            Ok(dist) => dist.sample(rng),
            // every token coincides with a chosen center
            Err(_) => rng.random_range(0..n),
        };
        centroids.row_mut(c).copy_from_slice(tokens.row(pick));
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(dist_sq(tokens.row(i), tokens.row(pick)));
        }
    }
    centroids
}

/// Nearest centroid via `‖x‖² - 2x·c + ‖c‖²`; ties go to the lower index.
fn assign_nearest(tokens: &TokenMatrix, centroids: &Matrix) -> Result<Vec<usize>> {
    let cross = matmul_transposed(tokens, centroids)?;
    let c_norms: Vec<f64> = (0..centroids.rows())
        .map(|c| dot(centroids.row(c), centroids.row(c)))
        .collect();
    Ok((0..tokens.rows())
        .map(|i| {
            let x_norm = tokens.row_norm_sq(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &cn) in c_norms.iter().enumerate() {
                let dist = x_norm - 2.0 * cross.get(i, c) + cn;
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Give every empty cluster the token farthest from its current centroid,
/// taken from a cluster that can spare one.
fn repair_empty(tokens: &TokenMatrix, assignments: &mut [usize], centroids: &mut Matrix, k: usize) {
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, &a) in assignments.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            let dd = dist_sq(tokens.row(i), centroids.row(a));
            if dd > far_d {
                far_d = dd;
                far = Some(i);
            }
        }
        let i = far.expect("k <= n guarantees a donor cluster");
        sizes[assignments[i]] -= 1;
        assignments[i] = empty;
        sizes[empty] = 1;
        centroids.row_mut(empty).copy_from_slice(tokens.row(i));
    }
}
