//! Cheap compensation-error estimates per (query cluster, key cluster) block.
//!
//! Every query in a cluster is represented by the cluster centroid, so the
//! cost is `O(C_q · N_k · d)` instead of the `O(N_q · N_k · d)` an exact
//! error table would need. Exponentials are taken relative to a per query
//! cluster stabilizer (the largest centroid logit of that query centroid),
//! recorded in the table.
//!
//! Two error flavours are supported:
//!
//! - `Plain`: squared difference of exponentiated logits,
//!   `(exp(q̄·k̄ⱼ/√d) - exp(q̄·kⱼ/√d))²`.
//! - `ValueAware`: squared norm of the weighted value residual,
//!   `‖exp(q̄·k̄ⱼ/√d)·v̄ⱼ - exp(q̄·kⱼ/√d)·vⱼ‖²`.
//!
//! [`estimate_errors_streaming`] computes the value-aware table tile by tile
//! with a running maximum per block, never holding more than one tile of
//! logits.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // unused only when std is in the build graph
use num_traits::Float;

use crate::clustering::ClusterModel;
use crate::error::{Error, Result};
use crate::knapsack::{ratio_order, Item};
use crate::linalg::{dot, Matrix, Scalar, TokenMatrix};

/// Default number of keys per streaming tile.
pub const DEFAULT_TILE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EstimatorMode {
    Plain,
    #[default]
    ValueAware,
}

/// Aggregated squared errors for every `C_q × C_k` block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockErrorTable {
    error_sum: Matrix,
    ratios: Matrix,
    q_sizes: Vec<usize>,
    k_sizes: Vec<usize>,
    stabilizers: Vec<f64>,
    mode: EstimatorMode,
    flops: u64,
}

/// One block in ranked order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedBlock {
    pub q_cluster: usize,
    pub k_cluster: usize,
    pub ratio: f64,
    pub error: f64,
    pub size: u64,
}

impl BlockErrorTable {
    /// Assemble a table from per-block error sums.
    pub fn new(
        error_sum: Matrix,
        q_sizes: Vec<usize>,
        k_sizes: Vec<usize>,
        stabilizers: Vec<f64>,
        mode: EstimatorMode,
        flops: u64,
    ) -> Result<Self> {
        if error_sum.shape() != (q_sizes.len(), k_sizes.len()) || stabilizers.len() != q_sizes.len()
        {
            return Err(Error::DimensionMismatch {
                op: "BlockErrorTable::new",
                left_rows: error_sum.rows(),
                left_cols: error_sum.cols(),
                right_rows: q_sizes.len(),
                right_cols: k_sizes.len(),
            });
        }
        if q_sizes.iter().chain(&k_sizes).any(|&s| s == 0) {
            return Err(Error::InvalidParameter("cluster sizes must be positive".into()));
        }
        if error_sum.as_slice().iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
            return Err(Error::InvalidParameter(
                "block errors must be finite and non-negative".into(),
            ));
        }
        let ratios = Matrix::from_fn(q_sizes.len(), k_sizes.len(), |a, b| {
            error_sum.get(a, b) / (q_sizes[a] as f64 * k_sizes[b] as f64)
        });
        Ok(Self {
            error_sum,
            ratios,
            q_sizes,
            k_sizes,
            stabilizers,
            mode,
            flops,
        })
    }

    pub fn q_clusters(&self) -> usize {
        self.q_sizes.len()
    }

    pub fn k_clusters(&self) -> usize {
        self.k_sizes.len()
    }

    pub fn q_sizes(&self) -> &[usize] {
        &self.q_sizes
    }

    pub fn k_sizes(&self) -> &[usize] {
        &self.k_sizes
    }

    pub fn error_sum(&self) -> &Matrix {
        &self.error_sum
    }

    pub fn error(&self, qc: usize, kc: usize) -> f64 {
        self.error_sum.get(qc, kc)
    }

    pub fn ratios(&self) -> &Matrix {
        &self.ratios
    }

    #[inline]
    pub fn block_size(&self, qc: usize, kc: usize) -> u64 {
        self.q_sizes[qc] as u64 * self.k_sizes[kc] as u64
    }

    /// Per query cluster constant subtracted inside every exponential.
    pub fn stabilizers(&self) -> &[f64] {
        &self.stabilizers
    }

    pub fn mode(&self) -> EstimatorMode {
        self.mode
    }

    /// FLOPs spent building the table (a multiply-add counts 2).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn total_error(&self) -> f64 {
        self.error_sum.as_slice().iter().sum()
    }

    /// Blocks as knapsack items in row-major block order.
    pub fn items(&self) -> Vec<Item> {
        (0..self.q_clusters())
            .flat_map(|a| (0..self.k_clusters()).map(move |b| (a, b)))
            .map(|(a, b)| Item::new(self.error(a, b), self.block_size(a, b)))
            .collect()
    }

    /// The blocks of one query cluster row as knapsack items.
    pub fn row_items(&self, qc: usize) -> Vec<Item> {
        (0..self.k_clusters())
            .map(|b| Item::new(self.error(qc, b), self.block_size(qc, b)))
            .collect()
    }

    /// Blocks by descending error-to-size ratio; ties by larger error, then
    /// by block index.
    pub fn to_ratios(&self) -> Vec<RankedBlock> {
        let kc = self.k_clusters();
        ratio_order(&self.items())
            .into_iter()
            .map(|idx| {
                let (a, b) = (idx / kc, idx % kc);
                RankedBlock {
                    q_cluster: a,
                    k_cluster: b,
                    ratio: self.ratios.get(a, b),
                    error: self.error(a, b),
                    size: self.block_size(a, b),
                }
            })
            .collect()
    }
}

/// Largest centroid logit per query centroid.
pub fn default_stabilizers(q_model: &ClusterModel, k_model: &ClusterModel) -> Vec<f64> {
    let scale = 1.0 / (q_model.centroids().cols() as f64).sqrt();
    let kbar = k_model.centroids();
    (0..q_model.num_clusters())
        .map(|c| {
            let qbar = q_model.centroids().row(c);
            (0..kbar.rows())
                .map(|b| dot(qbar, kbar.row(b)) * scale)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Plain centroid-proxy error table.
pub fn estimate_errors(
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    k: &TokenMatrix,
) -> Result<BlockErrorTable> {
    let stab = default_stabilizers(q_model, k_model);
    estimate_with_stabilizers(q_model, k_model, k, None, &stab)
}

/// Value-aware error table.
pub fn estimate_errors_value_aware(
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    k: &TokenMatrix,
    v: &TokenMatrix,
) -> Result<BlockErrorTable> {
    let stab = default_stabilizers(q_model, k_model);
    estimate_with_stabilizers(q_model, k_model, k, Some(v), &stab)
}

/// Error table in either mode with caller-chosen stabilizers. Passing `v`
/// selects the value-aware mode.
pub fn estimate_with_stabilizers(
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    k: &TokenMatrix,
    v: Option<&TokenMatrix>,
    stabilizers: &[f64],
) -> Result<BlockErrorTable> {
    check_inputs(q_model, k_model, k, v)?;
    if stabilizers.len() != q_model.num_clusters() {
        return Err(Error::InvalidParameter(alloc::format!(
            "expected {} stabilizers, got {}",
            q_model.num_clusters(),
            stabilizers.len()
        )));
    }
    let d = k.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let kbar = k_model.centroids();
    let vbar = match v {
        Some(v) => Some(k_model.means_of(v)?),
        None => None,
    };
    let (c_q, c_k) = (q_model.num_clusters(), k_model.num_clusters());
    let mut sums = Matrix::zeros(c_q, c_k);
    let mut flops = 0u64;
    let mut y = vec![0.0; d];

    for c in 0..c_q {
        let qbar = q_model.centroids().row(c);
        let s_c = stabilizers[c];
        for b in 0..c_k {
            let centroid_logit = dot(qbar, kbar.row(b)) * scale;
            flops += 2 * d as u64;
            let e_bar = (centroid_logit - s_c).exp();
            if let Some(vbar) = &vbar {
                for (yt, &vt) in y.iter_mut().zip(vbar.row(b)) {
                    *yt = e_bar * vt;
                }
                flops += d as u64;
            }
            let mut acc = 0.0;
            for &j in k_model.members(b) {
                let e = (dot(qbar, k.row(j)) * scale - s_c).exp();
                flops += 2 * d as u64;
                match v {
                    Some(v) => {
                        acc += value_residual(e, v.row(j), &y);
                        flops += 4 * d as u64;
                    }
                    None => {
                        let diff = e_bar - e;
                        acc += diff * diff;
                        flops += 3;
                    }
                }
            }
            sums.set(c, b, q_model.sizes()[c] as f64 * acc);
        }
    }
    let mode = if v.is_some() {
        EstimatorMode::ValueAware
    } else {
        EstimatorMode::Plain
    };
    BlockErrorTable::new(
        sums,
        q_model.sizes().to_vec(),
        k_model.sizes().to_vec(),
        stabilizers.to_vec(),
        mode,
        flops,
    )
}

/// `‖e·v - y‖²`, summed in index order.
#[inline]
fn value_residual<T: Float>(e: T, v: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&vt, &yt) in v.iter().zip(y) {
        let r = e * vt - yt;
        acc = acc + r * r;
    }
    acc
}

fn check_inputs(
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    k: &TokenMatrix,
    v: Option<&TokenMatrix>,
) -> Result<()> {
    let qd = q_model.centroids().cols();
    if k.rows() != k_model.num_tokens() || k.cols() != qd {
        return Err(Error::DimensionMismatch {
            op: "estimate_errors",
            left_rows: k.rows(),
            left_cols: k.cols(),
            right_rows: k_model.num_tokens(),
            right_cols: qd,
        });
    }
    if let Some(v) = v {
        if v.rows() != k.rows() || v.cols() != k.cols() {
            return Err(Error::DimensionMismatch {
                op: "estimate_errors_value_aware",
                left_rows: v.rows(),
                left_cols: v.cols(),
                right_rows: k.rows(),
                right_cols: k.cols(),
            });
        }
    }
    Ok(())
}

/// Value-aware table computed in tiles of `tile` keys with per-block running
/// maxima, in precision `T`.
///
/// Keys are walked in cluster-contiguous order. For every tile segment that
/// belongs to one key cluster, the block's running maximum advances to cover
/// the segment; the accumulated error is rescaled by `α²` and the centroid
/// reference vector by `α`, where `α = exp(m_old - m_new)`. At the end each
/// block is brought back to the query cluster's reference stabilizer.
pub fn estimate_errors_streaming<T: Scalar>(
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    k: &TokenMatrix,
    v: &TokenMatrix,
    tile: usize,
) -> Result<BlockErrorTable> {
    check_inputs(q_model, k_model, k, Some(v))?;
    if tile == 0 {
        return Err(Error::InvalidParameter("tile size must be at least 1".into()));
    }
    let d = k.cols();
    let n_k = k.rows();
    let (c_q, c_k) = (q_model.num_clusters(), k_model.num_clusters());
    let cast = |m: &Matrix| -> Vec<T> { m.as_slice().iter().map(|&x| T::from_f64(x)).collect() };
    let k_perm = cast(&k_model.permute_rows(k)?);
    let v_perm = cast(&k_model.permute_rows(v)?);
    let kbar = cast(k_model.centroids());
    let vbar = cast(k_model.means_of(v)?.as_matrix());
    let qbar = cast(q_model.centroids());
    // cluster of each permuted key position
    let mut owner = vec![0usize; n_k];
    for b in 0..c_k {
        let start = k_model.offsets()[b];
        owner[start..start + k_model.sizes()[b]].fill(b);
    }
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let two = T::from_f64(2.0);

    let mut sums = Matrix::zeros(c_q, c_k);
    let mut stabilizers = Vec::with_capacity(c_q);
    let mut flops = 0u64;
    let mut err = vec![T::zero(); c_k];
    let mut local_max = vec![T::zero(); c_k];
    let mut y = vec![T::zero(); c_k * d];
    let mut logits = vec![T::zero(); tile];

    for c in 0..c_q {
        let qc = &qbar[c * d..(c + 1) * d];
        let mut m_ref = T::neg_infinity();
        let mut centroid_logits = vec![T::zero(); c_k];
        for (b, cl) in centroid_logits.iter_mut().enumerate() {
            *cl = dot(qc, &kbar[b * d..(b + 1) * d]) * scale;
            flops += 2 * d as u64;
            if *cl > m_ref {
                m_ref = *cl;
            }
        }
        for b in 0..c_k {
            let e = (centroid_logits[b] - m_ref).exp();
            for t in 0..d {
                y[b * d + t] = e * vbar[b * d + t];
            }
            flops += d as u64;
            err[b] = T::zero();
            local_max[b] = m_ref;
        }

        let mut start = 0;
        while start < n_k {
            let end = (start + tile).min(n_k);
            for (slot, p) in logits.iter_mut().zip(start..end) {
                *slot = dot(qc, &k_perm[p * d..(p + 1) * d]) * scale;
                flops += 2 * d as u64;
            }
            let mut seg = start;
            while seg < end {
                let b = owner[seg];
                let seg_end = (seg..end).find(|&p| owner[p] != b).unwrap_or(end);
                let seg_logits = &logits[seg - start..seg_end - start];
                let seg_max = seg_logits.iter().copied().fold(T::neg_infinity(), T::max);
                if seg_max > local_max[b] {
                    let alpha = (local_max[b] - seg_max).exp();
                    err[b] = err[b] * alpha * alpha;
                    for yt in &mut y[b * d..(b + 1) * d] {
                        *yt = *yt * alpha;
                    }
                    local_max[b] = seg_max;
                }
                let yb = &y[b * d..(b + 1) * d];
                for (p, &s) in (seg..seg_end).zip(seg_logits) {
                    let e = (s - local_max[b]).exp();
                    err[b] = err[b] + value_residual(e, &v_perm[p * d..(p + 1) * d], yb);
                    flops += 4 * d as u64;
                }
                seg = seg_end;
            }
            start = end;
        }

        let q_size = q_model.sizes()[c] as f64;
        for b in 0..c_k {
            // err is relative to local_max; move it to the m_ref reference
            let to_ref = (two * (local_max[b] - m_ref)).exp();
            sums.set(c, b, q_size * (err[b] * to_ref).to_f64());
        }
        stabilizers.push(m_ref.to_f64());
    }
    BlockErrorTable::new(
        sums,
        q_model.sizes().to_vec(),
        k_model.sizes().to_vec(),
        stabilizers,
        EstimatorMode::ValueAware,
        flops,
    )
}
