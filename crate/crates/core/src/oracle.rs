//! Brute-force ground truth for small instances: dense attention maps,
//! per-entry compensation errors and the exact knapsack router.

use alloc::vec::Vec;

#[allow(unused_imports)] // unused only when std is in the build graph
use num_traits::Float;

use crate::clustering::ClusterModel;
use crate::error::{Error, Result};
use crate::estimator::{BlockErrorTable, EstimatorMode};
use crate::knapsack::{solve_exact, OracleLimits};
use crate::linalg::{check_same_shape, dot, Matrix, TokenMatrix};
use crate::router::{BlockMask, EntryBudget};

/// A dense `N_q × N_k` attention map with its per-row softmax constants.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    probs: Matrix,
    row_max: Vec<f64>,
    normalizers: Vec<f64>,
}

impl AttentionMap {
    /// Row-softmax of `logits`. Rows that are entirely `-inf` become zero
    /// rows with normalizer 0.
    pub fn from_logits(logits: Matrix) -> Self {
        let mut probs = logits;
        let rows = probs.rows();
        let mut row_max = Vec::with_capacity(rows);
        let mut normalizers = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = probs.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                row.fill(0.0);
                row_max.push(m);
                normalizers.push(0.0);
                continue;
            }
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
            row_max.push(m);
            normalizers.push(z);
        }
        Self {
            probs,
            row_max,
            normalizers,
        }
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn rows(&self) -> usize {
        self.probs.rows()
    }

    pub fn cols(&self) -> usize {
        self.probs.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs.get(i, j)
    }

    /// Stabilization constant `m_i` of each row.
    pub fn row_max(&self) -> &[f64] {
        &self.row_max
    }

    /// `Z_i = Σ_j exp(logit(i, j) − m_i)`.
    pub fn normalizers(&self) -> &[f64] {
        &self.normalizers
    }

    /// `ln Σ_j exp(logit(i, j))` per row.
    pub fn lse(&self) -> Vec<f64> {
        self.row_max
            .iter()
            .zip(&self.normalizers)
            .map(|(&m, &z)| if z == 0.0 { f64::NEG_INFINITY } else { m + z.ln() })
            .collect()
    }

    /// `probs · v`.
    pub fn apply(&self, v: &Matrix) -> Result<Matrix> {
        if v.rows() != self.cols() {
            return Err(Error::DimensionMismatch {
                op: "AttentionMap::apply",
                left_rows: self.rows(),
                left_cols: self.cols(),
                right_rows: v.rows(),
                right_cols: v.cols(),
            });
        }
        let mut out = Matrix::zeros(self.rows(), v.cols());
        for i in 0..self.rows() {
            let dst = out.row_mut(i);
            for (j, &p) in self.probs.row(i).iter().enumerate() {
                for (o, &x) in dst.iter_mut().zip(v.row(j)) {
                    *o += p * x;
                }
            }
        }
        Ok(out)
    }
}

fn check_qk(q: &TokenMatrix, k: &TokenMatrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::DimensionMismatch {
            op: "attention",
            left_rows: q.rows(),
            left_cols: q.cols(),
            right_rows: k.rows(),
            right_cols: k.cols(),
        });
    }
    if q.rows() == 0 || k.rows() == 0 || q.cols() == 0 {
        return Err(Error::Empty("attention inputs"));
    }
    Ok(())
}

fn check_kv(k: &TokenMatrix, v: &TokenMatrix) -> Result<()> {
    if k.rows() != v.rows() || k.cols() != v.cols() {
        return Err(Error::DimensionMismatch {
            op: "attention values",
            left_rows: k.rows(),
            left_cols: k.cols(),
            right_rows: v.rows(),
            right_cols: v.cols(),
        });
    }
    Ok(())
}

fn check_models(
    q: &TokenMatrix,
    k: &TokenMatrix,
    q_model: &ClusterModel,
    k_model: &ClusterModel,
) -> Result<()> {
    if q_model.num_tokens() != q.rows() || k_model.num_tokens() != k.rows() {
        return Err(Error::DimensionMismatch {
            op: "clusterings",
            left_rows: q.rows(),
            left_cols: k.rows(),
            right_rows: q_model.num_tokens(),
            right_cols: k_model.num_tokens(),
        });
    }
    Ok(())
}

fn scaled_logits(q: &Matrix, k: &Matrix) -> Matrix {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    Matrix::from_fn(q.rows(), k.rows(), |i, j| dot(q.row(i), k.row(j)) * scale)
}

/// Dense softmax attention and its output.
pub fn full_attention(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
) -> Result<(AttentionMap, TokenMatrix)> {
    check_qk(q, k)?;
    check_kv(k, v)?;
    let map = AttentionMap::from_logits(scaled_logits(q, k));
    let out = TokenMatrix::try_from(map.apply(v)?)?;
    Ok((map, out))
}

/// Logits where selected blocks see their keys and compensated blocks see
/// the key-cluster centroid. Tokens stay in their original order.
fn compensated_logits(
    q: &TokenMatrix,
    k: &TokenMatrix,
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    mask: &BlockMask,
) -> Result<Matrix> {
    check_qk(q, k)?;
    check_models(q, k, q_model, k_model)?;
    mask.check_models(q_model, k_model)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let kbar = k_model.centroids();
    Ok(Matrix::from_fn(q.rows(), k.rows(), |i, j| {
        let (a, b) = (q_model.cluster_of(i), k_model.cluster_of(j));
        let key = if mask.is_selected(a, b) {
            k.row(j)
        } else {
            kbar.row(b)
        };
        dot(q.row(i), key) * scale
    }))
}

/// The compensated sparse attention map: one entry per key, with
/// compensated keys using the centroid logit.
pub fn sparse_map_direct(
    q: &TokenMatrix,
    k: &TokenMatrix,
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    mask: &BlockMask,
) -> Result<AttentionMap> {
    Ok(AttentionMap::from_logits(compensated_logits(
        q, k, q_model, k_model, mask,
    )?))
}

/// The map when unselected blocks are simply dropped (logit `-inf`).
/// Queries whose whole row is dropped get a zero row.
pub fn dropped_map(
    q: &TokenMatrix,
    k: &TokenMatrix,
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    mask: &BlockMask,
) -> Result<AttentionMap> {
    check_qk(q, k)?;
    check_models(q, k, q_model, k_model)?;
    mask.check_models(q_model, k_model)?;
    let mut logits = scaled_logits(q, k);
    for i in 0..q.rows() {
        let a = q_model.cluster_of(i);
        for j in 0..k.rows() {
            if !mask.is_selected(a, k_model.cluster_of(j)) {
                logits.set(i, j, f64::NEG_INFINITY);
            }
        }
    }
    Ok(AttentionMap::from_logits(logits))
}

/// Output of a compensated map: selected entries weight their own value,
/// compensated entries weight the value centroid of their key cluster.
pub fn compensated_output(
    map: &AttentionMap,
    v: &TokenMatrix,
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    mask: &BlockMask,
) -> Result<TokenMatrix> {
    check_kv_map(map, v)?;
    let vbar = k_model.means_of(v)?;
    let mut out = Matrix::zeros(map.rows(), v.cols());
    for i in 0..map.rows() {
        let a = q_model.cluster_of(i);
        let dst = out.row_mut(i);
        for j in 0..map.cols() {
            let b = k_model.cluster_of(j);
            let src = if mask.is_selected(a, b) {
                v.row(j)
            } else {
                vbar.row(b)
            };
            let p = map.get(i, j);
            for (o, &x) in dst.iter_mut().zip(src) {
                *o += p * x;
            }
        }
    }
    TokenMatrix::try_from(out)
}

fn check_kv_map(map: &AttentionMap, v: &TokenMatrix) -> Result<()> {
    if map.cols() != v.rows() {
        return Err(Error::DimensionMismatch {
            op: "map values",
            left_rows: map.rows(),
            left_cols: map.cols(),
            right_rows: v.rows(),
            right_cols: v.cols(),
        });
    }
    Ok(())
}

/// Exact per-entry compensation errors and the per-row constants they are
/// stabilized with.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryErrors {
    /// `(exp(q_i·k̄_j/√d − c_i) − exp(q_i·k_j/√d − c_i))²`.
    pub errors: Matrix,
    pub stabilizers: Vec<f64>,
}

/// Per-entry errors stabilized by the row max of the full logits.
pub fn exact_entry_errors(
    q: &TokenMatrix,
    k: &TokenMatrix,
    k_model: &ClusterModel,
) -> Result<EntryErrors> {
    check_qk(q, k)?;
    let logits = scaled_logits(q, k);
    let stab = (0..q.rows())
        .map(|i| logits.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect::<Vec<_>>();
    exact_entry_errors_with(q, k, k_model, &stab)
}

/// Per-entry errors with caller-chosen stabilizers.
pub fn exact_entry_errors_with(
    q: &TokenMatrix,
    k: &TokenMatrix,
    k_model: &ClusterModel,
    stabilizers: &[f64],
) -> Result<EntryErrors> {
    check_qk(q, k)?;
    if k_model.num_tokens() != k.rows() {
        return Err(Error::DimensionMismatch {
            op: "exact_entry_errors",
            left_rows: k.rows(),
            left_cols: k.cols(),
            right_rows: k_model.num_tokens(),
            right_cols: k_model.centroids().cols(),
        });
    }
    if stabilizers.len() != q.rows() {
        return Err(Error::InvalidParameter(alloc::format!(
            "expected {} stabilizers, got {}",
            q.rows(),
            stabilizers.len()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let kbar = k_model.centroids();
    let errors = Matrix::from_fn(q.rows(), k.rows(), |i, j| {
        let c = stabilizers[i];
        let exact = (dot(q.row(i), k.row(j)) * scale - c).exp();
        let proxy = (dot(q.row(i), kbar.row(k_model.cluster_of(j))) * scale - c).exp();
        let t = proxy - exact;
        t * t
    });
    Ok(EntryErrors {
        errors,
        stabilizers: stabilizers.to_vec(),
    })
}

/// Block sums of exact per-entry errors, every query in a cluster stabilized
/// with that cluster's constant. Comparable entry for entry with the plain
/// estimator table built from the same stabilizers.
pub fn exact_block_table(
    q: &TokenMatrix,
    k: &TokenMatrix,
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    cluster_stabilizers: &[f64],
) -> Result<BlockErrorTable> {
    check_models(q, k, q_model, k_model)?;
    if cluster_stabilizers.len() != q_model.num_clusters() {
        return Err(Error::InvalidParameter(alloc::format!(
            "expected {} stabilizers, got {}",
            q_model.num_clusters(),
            cluster_stabilizers.len()
        )));
    }
    let per_query: Vec<f64> = (0..q.rows())
        .map(|i| cluster_stabilizers[q_model.cluster_of(i)])
        .collect();
    let entries = exact_entry_errors_with(q, k, k_model, &per_query)?;
    let mut sums = Matrix::zeros(q_model.num_clusters(), k_model.num_clusters());
    for a in 0..q_model.num_clusters() {
        for b in 0..k_model.num_clusters() {
            let mut acc = 0.0;
            for &i in q_model.members(a) {
                for &j in k_model.members(b) {
                    acc += entries.errors.get(i, j);
                }
            }
            sums.set(a, b, acc);
        }
    }
    BlockErrorTable::new(
        sums,
        q_model.sizes().to_vec(),
        k_model.sizes().to_vec(),
        cluster_stabilizers.to_vec(),
        EstimatorMode::Plain,
        0,
    )
}

/// The optimal mask for a budget. Per-cluster budgets are solved row by row.
pub fn knapsack_oracle(
    table: &BlockErrorTable,
    budget: &EntryBudget,
    limits: &OracleLimits,
) -> Result<BlockMask> {
    let mut mask = BlockMask::for_table(table, false);
    match budget {
        EntryBudget::Global(cap) => {
            let sel = solve_exact(&table.items(), *cap, limits)?;
            for (idx, &c) in sel.chosen.iter().enumerate() {
                mask.set(idx / table.k_clusters(), idx % table.k_clusters(), c);
            }
        }
        EntryBudget::PerCluster(caps) => {
            if caps.len() != table.q_clusters() {
                return Err(Error::InvalidParameter(alloc::format!(
                    "{} per-cluster budgets for {} query clusters",
                    caps.len(),
                    table.q_clusters()
                )));
            }
            for (a, &cap) in caps.iter().enumerate() {
                let sel = solve_exact(&table.row_items(a), cap, limits)?;
                for (b, &c) in sel.chosen.iter().enumerate() {
                    mask.set(a, b, c);
                }
            }
        }
    }
    Ok(mask)
}

/// Mean squared entry difference.
pub fn map_mse(a: &AttentionMap, b: &AttentionMap) -> Result<f64> {
    check_same_shape("map_mse", &a.probs, &b.probs)?;
    Ok(mean_sq_diff(a.probs.as_slice(), b.probs.as_slice()))
}

/// Mean squared difference of two equally shaped matrices.
pub fn matrix_mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_same_shape("matrix_mse", a, b)?;
    Ok(mean_sq_diff(a.as_slice(), b.as_slice()))
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let t = x - y;
        acc += t * t;
    }
    acc / a.len() as f64
}

/// A mask that selects every block.
pub fn full_mask(q_model: &ClusterModel, k_model: &ClusterModel) -> BlockMask {
    BlockMask::full_for(q_model, k_model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::estimator::estimate_with_stabilizers;
    use crate::linalg::row_softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tm(rows: usize, cols: usize, data: &[f64]) -> TokenMatrix {
        TokenMatrix::new(rows, cols, data.to_vec()).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> TokenMatrix {
        tm(
            rows,
            cols,
            &(0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn full_attention_examples() {
        let (map, out) = full_attention(
            &tm(1, 1, &[0.0]),
            &tm(2, 1, &[0.0, 0.0]),
            &tm(2, 1, &[1.0, 3.0]),
        )
        .unwrap();
        assert_eq!(map.probs().as_slice(), &[0.5, 0.5]);
        assert_eq!(out.as_slice(), &[2.0]);

        let (map, out) =
            full_attention(&tm(2, 2, &[1.0, 2.0, -3.0, 0.5]), &tm(1, 2, &[0.3, 0.1]), &tm(1, 2, &[7.0, -2.0]))
                .unwrap();
        assert_eq!(map.probs().as_slice(), &[1.0, 1.0]);
        assert_eq!(out.as_slice(), &[7.0, -2.0, 7.0, -2.0]);
    }

    #[test]
    fn full_attention_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (q, k, v) = (random(8, 4, &mut rng), random(8, 4, &mut rng), random(8, 4, &mut rng));
        let (_, out) = full_attention(&q, &k, &v).unwrap();
        for i in 0..8 {
            let mut w = [0.0f64; 8];
            for j in 0..8 {
                let mut s = 0.0;
                for t in 0..4 {
                    s += q.get(i, t) * k.get(j, t);
                }
                w[j] = (s / 2.0).exp();
            }
            let z: f64 = w.iter().sum();
            for t in 0..4 {
                let o: f64 = (0..8).map(|j| w[j] / z * v.get(j, t)).sum();
                assert!((o - out.get(i, t)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dimension_errors() {
        let q = tm(1, 2, &[0.0, 0.0]);
        let k = tm(1, 3, &[0.0; 3]);
        assert!(full_attention(&q, &k, &k).is_err());
        let k2 = tm(2, 2, &[0.0; 4]);
        let v = tm(3, 2, &[0.0; 6]);
        assert!(full_attention(&q, &k2, &v).is_err());
    }

    #[test]
    fn full_mask_is_full_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (random(12, 3, &mut rng), random(10, 3, &mut rng), random(10, 3, &mut rng));
        let qm = ClusterModel::from_assignments(&q, (0..12).map(|i| i % 3).collect(), 3).unwrap();
        let km = ClusterModel::from_assignments(&k, (0..10).map(|i| i % 4).collect(), 4).unwrap();
        let (full, _) = full_attention(&q, &k, &v).unwrap();
        let sparse = sparse_map_direct(&q, &k, &qm, &km, &full_mask(&qm, &km)).unwrap();
        assert!(full.probs().max_abs_diff(sparse.probs()).unwrap() <= 1e-12);
    }

    #[test]
    fn zero_mask_with_exact_centroids() {
        let q = tm(2, 1, &[0.5, -1.0]);
        let k = tm(4, 1, &[1.0, 1.0, -2.0, -2.0]);
        let v = tm(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let qm = ClusterModel::singletons(&q).unwrap();
        let km = ClusterModel::from_assignments(&k, vec![0, 0, 1, 1], 2).unwrap();
        let (full, _) = full_attention(&q, &k, &v).unwrap();
        let sparse = sparse_map_direct(&q, &k, &qm, &km, &BlockMask::empty_for(&qm, &km)).unwrap();
        assert!(full.probs().max_abs_diff(sparse.probs()).unwrap() <= 1e-12);
    }

    #[test]
    fn mixed_mask_hand_instance() {
        // d = 1, queries {0,1} {2,3}, keys {0,1} {2,3}
        let q = tm(4, 1, &[1.0, 0.5, -1.0, 2.0]);
        let k = tm(4, 1, &[0.2, 0.6, -0.4, 1.0]);
        let qm = ClusterModel::from_assignments(&q, vec![0, 0, 1, 1], 2).unwrap();
        let km = ClusterModel::from_assignments(&k, vec![0, 0, 1, 1], 2).unwrap();
        let mut mask = BlockMask::empty_for(&qm, &km);
        mask.set(0, 0, true);
        mask.set(1, 1, true);
        let map = sparse_map_direct(&q, &k, &qm, &km, &mask).unwrap();
        let kbar = [0.4, 0.4, 0.3, 0.3];
        let sel = |i: usize, j: usize| (i < 2) == (j < 2);
        let mut logits = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let key = if sel(i, j) { k.get(j, 0) } else { kbar[j] };
                logits.set(i, j, q.get(i, 0) * key);
            }
        }
        let want = row_softmax(&logits).unwrap();
        assert!(want.max_abs_diff(map.probs()).unwrap() <= 1e-12);
        for i in 0..4 {
            let s: f64 = map.probs().row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn dropped_rows_without_blocks_are_zero() {
        let q = tm(2, 1, &[1.0, 2.0]);
        let k = tm(2, 1, &[1.0, -1.0]);
        let qm = ClusterModel::singletons(&q).unwrap();
        let km = ClusterModel::singletons(&k).unwrap();
        let mut mask = BlockMask::empty_for(&qm, &km);
        mask.set(0, 1, true);
        let map = dropped_map(&q, &k, &qm, &km, &mask).unwrap();
        assert_eq!(map.probs().as_slice(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(map.normalizers()[1], 0.0);
    }

    #[test]
    fn entry_error_examples() {
        let q = tm(1, 1, &[1.0]);
        let k = tm(2, 1, &[4f64.ln(), -4f64.ln()]);
        let km = ClusterModel::from_assignments(&k, vec![0, 0], 1).unwrap();
        let e = exact_entry_errors_with(&q, &k, &km, &[0.0]).unwrap();
        assert!((e.errors.get(0, 0) - 9.0).abs() < 1e-12);
        assert!((e.errors.get(0, 1) - 0.5625).abs() < 1e-12);

        let single = ClusterModel::singletons(&k).unwrap();
        let z = exact_entry_errors(&q, &k, &single).unwrap();
        assert!(z.errors.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stabilizer_rescales_analytically() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (q, k) = (random(8, 8, &mut rng), random(8, 8, &mut rng));
        let km = ClusterModel::from_assignments(&k, (0..8).map(|j| j / 3).collect(), 3).unwrap();
        let stab = exact_entry_errors(&q, &k, &km).unwrap();
        let raw = exact_entry_errors_with(&q, &k, &km, &[0.0; 8]).unwrap();
        for i in 0..8 {
            let f = (-2.0 * stab.stabilizers[i]).exp();
            for j in 0..8 {
                let want = raw.errors.get(i, j) * f;
                assert!((want - stab.errors.get(i, j)).abs() <= 1e-10 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn block_table_matches_estimator_when_queries_sit_on_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let base = random(3, 4, &mut rng);
        let rows: Vec<f64> = (0..9).flat_map(|i| base.row(i % 3).to_vec()).collect();
        let q = tm(9, 4, &rows);
        let k = random(10, 4, &mut rng);
        let qm = ClusterModel::from_assignments(&q, (0..9).map(|i| i % 3).collect(), 3).unwrap();
        let km = ClusterModel::from_assignments(&k, (0..10).map(|j| j % 4).collect(), 4).unwrap();
        let stab = [0.1, -0.3, 0.7];
        let est = estimate_with_stabilizers(&qm, &km, &k, None, &stab).unwrap();
        let exact = exact_block_table(&q, &k, &qm, &km, &stab).unwrap();
        let diff = est.error_sum().max_abs_diff(exact.error_sum()).unwrap();
        assert!(diff <= 1e-10, "{diff}");
    }

    #[test]
    fn oracle_dominates_greedy_example() {
        let table = BlockErrorTable::new(
            Matrix::new(1, 3, vec![10.0, 6.0, 5.0]).unwrap(),
            vec![1],
            vec![5, 3, 3],
            vec![0.0],
            EstimatorMode::Plain,
            0,
        )
        .unwrap();
        let m = knapsack_oracle(&table, &EntryBudget::Global(6), &OracleLimits::default()).unwrap();
        assert_eq!(m.selected(), &[false, true, true]);
        let all = knapsack_oracle(&table, &EntryBudget::Global(11), &OracleLimits::default()).unwrap();
        assert_eq!(all.density(), 1.0);
        let none = knapsack_oracle(&table, &EntryBudget::Global(0), &OracleLimits::default()).unwrap();
        assert_eq!(none.density_entries(), 0);
    }

    #[test]
    fn mse_examples() {
        let a = AttentionMap::from_logits(Matrix::new(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap());
        assert_eq!(map_mse(&a, &a).unwrap(), 0.0);
        let x = Matrix::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let y = Matrix::new(2, 2, vec![0.6, 0.5, 0.5, 0.5]).unwrap();
        assert!((matrix_mse(&x, &y).unwrap() - 0.0025).abs() < 1e-15);
        let b = AttentionMap::from_logits(Matrix::new(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(map_mse(&a, &b).is_err());
    }
}
