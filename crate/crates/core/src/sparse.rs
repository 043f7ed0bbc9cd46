//! Block-sparse attention executor with centroid compensation.
//!
//! Pass one runs streaming softmax over the keys of every selected block and
//! leaves a normalized partial output plus its log-sum-exp. Pass two seeds a
//! running state from that partial result and merges one centroid logit per
//! compensated key cluster, offset by `ln |k_c|` so the cluster counts once
//! per key it stands in for.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // unused only when std is in the build graph
use num_traits::Float;

use crate::clustering::ClusterModel;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, Scalar, SoftmaxState, TokenMatrix};
use crate::oracle::{compensated_output, sparse_map_direct};
use crate::router::BlockMask;

/// Multiply-adds count as two FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopCounter {
    pub exact_block: u64,
    pub compensation: u64,
    pub estimation: u64,
    pub clustering: u64,
}

impl FlopCounter {
    pub fn total(&self) -> u64 {
        self.exact_block + self.compensation + self.estimation + self.clustering
    }

    /// Attention work only.
    pub fn attention(&self) -> u64 {
        self.exact_block + self.compensation
    }
}

/// Result of the exact pass, rows in original query order.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialOutput<T> {
    /// `N_q × d`, row-major. Zero rows for queries without exact blocks.
    pub output: Vec<T>,
    /// `-inf` for queries without exact blocks.
    pub lse: Vec<T>,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub output: TokenMatrix,
    pub lse: Vec<f64>,
    pub flops: FlopCounter,
    pub density: f64,
}

/// Executor over one attention instance and its two clusterings.
#[derive(Debug, Clone)]
pub struct SparseAttention<'a> {
    q: &'a TokenMatrix,
    q_model: &'a ClusterModel,
    k_model: &'a ClusterModel,
    k_perm: Matrix,
    v_perm: Matrix,
    v_bar: TokenMatrix,
}

impl<'a> SparseAttention<'a> {
    pub fn new(
        q: &'a TokenMatrix,
        k: &'a TokenMatrix,
        v: &'a TokenMatrix,
        q_model: &'a ClusterModel,
        k_model: &'a ClusterModel,
    ) -> Result<Self> {
        let d = q.cols();
        if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
            return Err(Error::DimensionMismatch {
                op: "SparseAttention::new",
                left_rows: k.rows(),
                left_cols: k.cols(),
                right_rows: v.rows(),
                right_cols: v.cols(),
            });
        }
        if q_model.num_tokens() != q.rows()
            || k_model.num_tokens() != k.rows()
            || q_model.centroids().cols() != d
            || k_model.centroids().cols() != d
        {
            return Err(Error::DimensionMismatch {
                op: "SparseAttention::new clusterings",
                left_rows: q.rows(),
                left_cols: k.rows(),
                right_rows: q_model.num_tokens(),
                right_cols: k_model.num_tokens(),
            });
        }
        if q.rows() == 0 || k.rows() == 0 || d == 0 {
            return Err(Error::Empty("attention inputs"));
        }
        Ok(Self {
            q,
            q_model,
            k_model,
            k_perm: k_model.permute_rows(k)?,
            v_perm: k_model.permute_rows(v)?,
            v_bar: k_model.means_of(v)?,
        })
    }

    fn d(&self) -> usize {
        self.q.cols()
    }

    /// Streaming softmax over the keys of each query's selected blocks.
    pub fn exact_block_pass<T: Scalar>(&self, mask: &BlockMask) -> Result<PartialOutput<T>> {
        mask.check_models(self.q_model, self.k_model)?;
        let d = self.d();
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let k_perm = cast::<T>(self.k_perm.as_slice());
        let v_perm = cast::<T>(self.v_perm.as_slice());
        let n_q = self.q.rows();
        let mut output = vec![T::zero(); n_q * d];
        let mut lse = vec![T::neg_infinity(); n_q];
        let mut flops = 0u64;
        let mut qi = vec![T::zero(); d];

        for a in 0..self.q_model.num_clusters() {
            let blocks: Vec<usize> = (0..self.k_model.num_clusters())
                .filter(|&b| mask.is_selected(a, b))
                .collect();
            for &i in self.q_model.members(a) {
                load(&mut qi, self.q.row(i));
                let acc = &mut output[i * d..(i + 1) * d];
                let mut state = SoftmaxState::<T>::empty();
                for &b in &blocks {
                    let start = self.k_model.offsets()[b];
                    for p in start..start + self.k_model.sizes()[b] {
                        let s = dot(&qi, &k_perm[p * d..(p + 1) * d]) * scale;
                        state.merge(s, &v_perm[p * d..(p + 1) * d], acc);
                    }
                    flops += 4 * (d * self.k_model.sizes()[b]) as u64;
                }
                state.finish(acc);
                lse[i] = state.lse();
            }
        }
        Ok(PartialOutput { output, lse, flops })
    }

    /// Merge centroid contributions of compensated clusters in ascending
    /// cluster order.
    pub fn compensation_pass<T: Scalar>(
        &self,
        mask: &BlockMask,
        partial: PartialOutput<T>,
    ) -> Result<AttentionResult> {
        let order: Vec<usize> = (0..self.k_model.num_clusters()).collect();
        self.compensation_pass_ordered(mask, partial, &order)
    }

    /// As [`compensation_pass`](Self::compensation_pass), visiting key
    /// clusters in `order`, which must be a permutation of `0..C_k`.
    pub fn compensation_pass_ordered<T: Scalar>(
        &self,
        mask: &BlockMask,
        partial: PartialOutput<T>,
        order: &[usize],
    ) -> Result<AttentionResult> {
        mask.check_models(self.q_model, self.k_model)?;
        let c_k = self.k_model.num_clusters();
        let mut seen = vec![false; c_k];
        if order.len() != c_k || order.iter().any(|&b| b >= c_k || core::mem::replace(&mut seen[b], true)) {
            return Err(Error::InvalidParameter(
                "cluster order must be a permutation of the key clusters".into(),
            ));
        }
        let d = self.d();
        let n_q = self.q.rows();
        if partial.output.len() != n_q * d || partial.lse.len() != n_q {
            return Err(Error::LengthMismatch {
                rows: n_q,
                cols: d,
                len: partial.output.len(),
            });
        }
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let k_bar = cast::<T>(self.k_model.centroids().as_slice());
        let v_bar = cast::<T>(self.v_bar.as_slice());
        let log_sizes: Vec<T> = self
            .k_model
            .sizes()
            .iter()
            .map(|&s| T::from_f64((s as f64).ln()))
            .collect();

        let PartialOutput {
            mut output,
            lse: partial_lse,
            flops: exact_flops,
        } = partial;
        let mut lse = vec![0.0; n_q];
        let mut comp_flops = 0u64;
        let mut qi = vec![T::zero(); d];

        for a in 0..self.q_model.num_clusters() {
            let blocks: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&b| !mask.is_selected(a, b))
                .collect();
            for &i in self.q_model.members(a) {
                load(&mut qi, self.q.row(i));
                let acc = &mut output[i * d..(i + 1) * d];
                let mut state = SoftmaxState::seeded(partial_lse[i]);
                for &b in &blocks {
                    let s = dot(&qi, &k_bar[b * d..(b + 1) * d]) * scale + log_sizes[b];
                    state.merge(s, &v_bar[b * d..(b + 1) * d], acc);
                }
                comp_flops += 4 * (d * blocks.len()) as u64;
                if state.is_empty() {
                    return Err(Error::EmptySoftmaxRow(i));
                }
                state.finish(acc);
                lse[i] = Scalar::to_f64(state.lse());
            }
        }

        let out = Matrix::new(n_q, d, output.iter().map(|&x| Scalar::to_f64(x)).collect())?;
        Ok(AttentionResult {
            output: TokenMatrix::try_from(out)?,
            lse,
            flops: FlopCounter {
                exact_block: exact_flops,
                compensation: comp_flops,
                ..FlopCounter::default()
            },
            density: mask.density(),
        })
    }

    /// Both passes in precision `T`.
    pub fn attend<T: Scalar>(&self, mask: &BlockMask) -> Result<AttentionResult> {
        let partial = self.exact_block_pass::<T>(mask)?;
        self.compensation_pass(mask, partial)
    }
}

fn cast<T: Scalar>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::from_f64(x)).collect()
}

fn load<T: Scalar>(dst: &mut [T], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = T::from_f64(s);
    }
}

/// Compensated sparse attention in double precision.
pub fn sparse_attend(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    mask: &BlockMask,
) -> Result<AttentionResult> {
    SparseAttention::new(q, k, v, q_model, k_model)?.attend::<f64>(mask)
}

/// Dense two-pass reference: materialize the compensated map, then weight
/// values for selected entries and value centroids for compensated ones.
pub fn reference_sparse_output(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    mask: &BlockMask,
) -> Result<TokenMatrix> {
    let map = sparse_map_direct(q, k, q_model, k_model, mask)?;
    compensated_output(&map, v, q_model, k_model, mask)
}

/// Closed-form FLOPs of the exact pass: `4·d` per computed entry.
pub fn exact_block_flops(mask: &BlockMask, d: usize) -> u64 {
    4 * mask.density_entries() * d as u64
}

/// Closed-form FLOPs of the compensation pass: `4·d` per query and
/// compensated key cluster.
pub fn compensation_flops(mask: &BlockMask, d: usize) -> u64 {
    (0..mask.q_clusters())
        .map(|a| mask.q_sizes()[a] as u64 * mask.compensated_in_row(a) as u64)
        .sum::<u64>()
        * 4
        * d as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::full_attention;

    fn tm(rows: usize, cols: usize, data: &[f64]) -> TokenMatrix {
        TokenMatrix::new(rows, cols, data.to_vec()).unwrap()
    }

    fn hand() -> (TokenMatrix, TokenMatrix, TokenMatrix, ClusterModel, ClusterModel) {
        let q = tm(4, 1, &[1.0, 0.5, -1.0, 2.0]);
        let k = tm(4, 1, &[0.2, 0.6, -0.4, 1.0]);
        let v = tm(4, 1, &[1.0, -1.0, 2.0, 4.0]);
        let qm = ClusterModel::from_assignments(&q, vec![0, 1, 0, 1], 2).unwrap();
        let km = ClusterModel::from_assignments(&k, vec![0, 0, 1, 1], 2).unwrap();
        (q, k, v, qm, km)
    }

    #[test]
    fn full_mask_matches_dense() {
        let (q, k, v, qm, km) = hand();
        let (_, full) = full_attention(&q, &k, &v).unwrap();
        let r = sparse_attend(&q, &k, &v, &qm, &km, &BlockMask::full_for(&qm, &km)).unwrap();
        assert!(r.output.max_abs_diff(&full).unwrap() <= 1e-10);
        assert_eq!(r.density, 1.0);
    }

    #[test]
    fn full_mask_compensation_is_a_no_op() {
        let (q, k, v, qm, km) = hand();
        let exec = SparseAttention::new(&q, &k, &v, &qm, &km).unwrap();
        let mask = BlockMask::full_for(&qm, &km);
        let partial = exec.exact_block_pass::<f64>(&mask).unwrap();
        let before = partial.output.clone();
        let r = exec.compensation_pass(&mask, partial).unwrap();
        assert_eq!(r.output.as_slice(), &before[..]);
        assert_eq!(r.flops.compensation, 0);
    }

    #[test]
    fn empty_mask_gives_sentinels() {
        let (q, k, v, qm, km) = hand();
        let exec = SparseAttention::new(&q, &k, &v, &qm, &km).unwrap();
        let p = exec.exact_block_pass::<f64>(&BlockMask::empty_for(&qm, &km)).unwrap();
        assert!(p.lse.iter().all(|&l| l == f64::NEG_INFINITY));
        assert!(p.output.iter().all(|&x| x == 0.0));
        assert_eq!(p.flops, 0);
    }

    #[test]
    fn one_compensated_block_by_hand() {
        let (q, k, v, qm, km) = hand();
        let mut mask = BlockMask::full_for(&qm, &km);
        mask.set(0, 1, false);
        let r = sparse_attend(&q, &k, &v, &qm, &km, &mask).unwrap();
        // queries 0 and 2 see keys 2, 3 through centroid 0.3 with value 3
        let kv = [(0.2, 1.0), (0.6, -1.0), (0.3, 3.0), (0.3, 3.0)];
        for (i, &qi) in [1.0, 0.5, -1.0, 2.0].iter().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for (j, &(kj, vj)) in kv.iter().enumerate() {
                let (kk, vv) = if i % 2 == 1 { (k.get(j, 0), v.get(j, 0)) } else { (kj, vj) };
                let w = f64::exp(qi * kk);
                num += w * vv;
                den += w;
            }
            assert!((r.output.get(i, 0) - num / den).abs() <= 1e-10);
            assert!((r.lse[i] - den.ln()).abs() <= 1e-12);
        }
        let reference = reference_sparse_output(&q, &k, &v, &qm, &km, &mask).unwrap();
        assert!(r.output.max_abs_diff(&reference).unwrap() <= 1e-12);
    }

    #[test]
    fn singleton_keys_make_compensation_exact() {
        let (q, k, v, qm, _) = hand();
        let km = ClusterModel::singletons(&k).unwrap();
        let (_, full) = full_attention(&q, &k, &v).unwrap();
        let r = sparse_attend(&q, &k, &v, &qm, &km, &BlockMask::empty_for(&qm, &km)).unwrap();
        assert!(r.output.max_abs_diff(&full).unwrap() <= 1e-10);
    }

    #[test]
    fn flop_counts_match_closed_form() {
        let (q, k, v, qm, km) = hand();
        let mut mask = BlockMask::empty_for(&qm, &km);
        mask.set(1, 0, true);
        let r = sparse_attend(&q, &k, &v, &qm, &km, &mask).unwrap();
        assert_eq!(r.flops.exact_block, exact_block_flops(&mask, 1));
        assert_eq!(r.flops.exact_block, 4 * 4);
        assert_eq!(r.flops.compensation, compensation_flops(&mask, 1));
        assert_eq!(r.flops.compensation, 4 * (2 * 2 + 2));
    }

    #[test]
    fn bad_cluster_order_rejected() {
        let (q, k, v, qm, km) = hand();
        let exec = SparseAttention::new(&q, &k, &v, &qm, &km).unwrap();
        let mask = BlockMask::empty_for(&qm, &km);
        let p = exec.exact_block_pass::<f64>(&mask).unwrap();
        assert!(exec.compensation_pass_ordered(&mask, p.clone(), &[0, 0]).is_err());
        assert!(exec.compensation_pass_ordered(&mask, p, &[1, 0]).is_ok());
    }

    #[test]
    fn single_precision_tracks_double() {
        let (q, k, v, qm, km) = hand();
        let exec = SparseAttention::new(&q, &k, &v, &qm, &km).unwrap();
        let mut mask = BlockMask::empty_for(&qm, &km);
        mask.set(0, 0, true);
        let a = exec.attend::<f64>(&mask).unwrap();
        let b = exec.attend::<f32>(&mask).unwrap();
        assert!(a.output.max_abs_diff(&b.output).unwrap() <= 1e-5);
    }

    #[test]
    fn mask_shape_checked() {
        let (q, k, v, qm, km) = hand();
        let wrong = BlockMask::filled(&[4], &[2, 2], true);
        assert!(sparse_attend(&q, &k, &v, &qm, &km, &wrong).is_err());
    }
}
