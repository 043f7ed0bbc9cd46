//! Routing: turn an error table or centroid scores plus a compute budget into
//! a block mask that says which blocks run exactly and which are compensated.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // unused only when std is in the build graph
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::ClusterModel;
use crate::error::{Error, Result};
use crate::estimator::BlockErrorTable;
use crate::knapsack::{greedy, ratio_order, Overshoot, Selection};
use crate::linalg::{dot, softmax_in_place};

/// Block-level routing decision: `true` runs the block exactly, `false`
/// replaces it with the key-cluster centroid.
///
/// All queries of a cluster share a row; all keys of a cluster share a column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    q_sizes: Vec<usize>,
    k_sizes: Vec<usize>,
    selected: Vec<bool>,
}

impl BlockMask {
    pub fn new(q_sizes: Vec<usize>, k_sizes: Vec<usize>, selected: Vec<bool>) -> Result<Self> {
        if selected.len() != q_sizes.len() * k_sizes.len() {
            return Err(Error::LengthMismatch {
                rows: q_sizes.len(),
                cols: k_sizes.len(),
                len: selected.len(),
            });
        }
        Ok(Self {
            q_sizes,
            k_sizes,
            selected,
        })
    }

    pub fn filled(q_sizes: &[usize], k_sizes: &[usize], value: bool) -> Self {
        Self {
            selected: vec![value; q_sizes.len() * k_sizes.len()],
            q_sizes: q_sizes.to_vec(),
            k_sizes: k_sizes.to_vec(),
        }
    }

    /// Everything compensated.
    pub fn empty_for(q: &ClusterModel, k: &ClusterModel) -> Self {
        Self::filled(q.sizes(), k.sizes(), false)
    }

    /// Everything exact.
    pub fn full_for(q: &ClusterModel, k: &ClusterModel) -> Self {
        Self::filled(q.sizes(), k.sizes(), true)
    }

    pub fn for_table(table: &BlockErrorTable, value: bool) -> Self {
        Self::filled(table.q_sizes(), table.k_sizes(), value)
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

    #[inline]
    pub fn is_selected(&self, qc: usize, kc: usize) -> bool {
        self.selected[qc * self.k_sizes.len() + kc]
    }

    pub fn set(&mut self, qc: usize, kc: usize, value: bool) {
        let k = self.k_sizes.len();
        self.selected[qc * k + kc] = value;
    }

    /// Row-major selection flags.
    pub fn selected(&self) -> &[bool] {
        &self.selected
    }

    #[inline]
    pub fn block_size(&self, qc: usize, kc: usize) -> u64 {
        self.q_sizes[qc] as u64 * self.k_sizes[kc] as u64
    }

    /// Attention entries computed exactly.
    pub fn density_entries(&self) -> u64 {
        let kc = self.k_clusters();
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(idx, _)| self.block_size(idx / kc, idx % kc))
            .sum()
    }

    pub fn total_entries(&self) -> u64 {
        let nq: u64 = self.q_sizes.iter().map(|&s| s as u64).sum();
        let nk: u64 = self.k_sizes.iter().map(|&s| s as u64).sum();
        nq * nk
    }

    pub fn density(&self) -> f64 {
        self.density_entries() as f64 / self.total_entries() as f64
    }

    pub fn selected_in_row(&self, qc: usize) -> usize {
        (0..self.k_clusters()).filter(|&b| self.is_selected(qc, b)).count()
    }

    pub fn compensated_in_row(&self, qc: usize) -> usize {
        self.k_clusters() - self.selected_in_row(qc)
    }

    /// Fails unless the mask shape and block sizes match the two clusterings.
    pub fn check_models(&self, q: &ClusterModel, k: &ClusterModel) -> Result<()> {
        if self.q_sizes != q.sizes() || self.k_sizes != k.sizes() {
            return Err(Error::MaskMismatch {
                mask_q: self.q_clusters(),
                mask_k: self.k_clusters(),
                q_clusters: q.num_clusters(),
                k_clusters: k.num_clusters(),
            });
        }
        Ok(())
    }

    fn check_table(&self, table: &BlockErrorTable) -> Result<()> {
        if self.q_sizes != table.q_sizes() || self.k_sizes != table.k_sizes() {
            return Err(Error::MaskMismatch {
                mask_q: self.q_clusters(),
                mask_k: self.k_clusters(),
                q_clusters: table.q_clusters(),
                k_clusters: table.k_clusters(),
            });
        }
        Ok(())
    }
}

/// How much exact computation a router may spend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensityBudget {
    /// `floor(rho · N_q · N_k)` entries over the whole map.
    Global { rho: f64 },
    /// Each query cluster gets the entries its top-p key clusters would cost.
    PerClusterTopP { p: f64 },
}

impl DensityBudget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Global { rho } if !(0.0..=1.0).contains(&rho) => Err(Error::InvalidParameter(
                alloc::format!("rho must lie in [0, 1], got {rho}"),
            )),
            Self::PerClusterTopP { p } if !(p > 0.0 && p <= 1.0) => Err(Error::InvalidParameter(
                alloc::format!("p must lie in (0, 1], got {p}"),
            )),
            _ => Ok(()),
        }
    }
}

/// A budget in attention entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryBudget {
    Global(u64),
    PerCluster(Vec<u64>),
}

impl EntryBudget {
    pub fn total(&self) -> u64 {
        match self {
            Self::Global(n) => *n,
            Self::PerCluster(v) => v.iter().sum(),
        }
    }
}

/// Whether top-p scores add `ln |k_c|` so a key cluster's mass scales with its size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreWeighting {
    #[default]
    SizeWeighted,
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouterConfig {
    pub overshoot: Overshoot,
    pub single_item_fallback: bool,
    pub score_weighting: ScoreWeighting,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            overshoot: Overshoot::FillRemainder,
            single_item_fallback: true,
            score_weighting: ScoreWeighting::SizeWeighted,
        }
    }
}

/// Turn a density budget into entry counts for the given clusterings.
pub fn resolve_budget(
    budget: &DensityBudget,
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    weighting: ScoreWeighting,
) -> Result<EntryBudget> {
    budget.validate()?;
    Ok(match *budget {
        DensityBudget::Global { rho } => {
            let total = q_model.num_tokens() as u64 * k_model.num_tokens() as u64;
            EntryBudget::Global(((rho * total as f64).floor() as u64).min(total))
        }
        DensityBudget::PerClusterTopP { p } => {
            EntryBudget::PerCluster(score_top_p_budget(q_model, k_model, p, weighting)?)
        }
    })
}

/// Greedy error-aware routing by error-to-size ratio.
pub fn route_error_aware(
    table: &BlockErrorTable,
    budget: &EntryBudget,
    config: &RouterConfig,
) -> Result<BlockMask> {
    route_with(table, budget, ratio_order, config.overshoot, config.single_item_fallback)
}

/// Control baseline: the same fill rule over a seeded random block order.
pub fn route_random(
    table: &BlockErrorTable,
    budget: &EntryBudget,
    seed: u64,
    overshoot: Overshoot,
) -> Result<BlockMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    route_with(
        table,
        budget,
        |items| {
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.shuffle(&mut rng);
            order
        },
        overshoot,
        false,
    )
}

fn route_with(
    table: &BlockErrorTable,
    budget: &EntryBudget,
    mut order_of: impl FnMut(&[crate::knapsack::Item]) -> Vec<usize>,
    overshoot: Overshoot,
    fallback: bool,
) -> Result<BlockMask> {
    let mut mask = BlockMask::for_table(table, false);
    match budget {
        EntryBudget::Global(capacity) => {
            let items = table.items();
            let order = order_of(&items);
            let sel = greedy(&items, &order, *capacity, overshoot, fallback);
            mask.selected.copy_from_slice(&sel.chosen);
        }
        EntryBudget::PerCluster(caps) => {
            if caps.len() != table.q_clusters() {
                return Err(Error::InvalidParameter(alloc::format!(
                    "{} per-cluster budgets for {} query clusters",
                    caps.len(),
                    table.q_clusters()
                )));
            }
            for (qc, &cap) in caps.iter().enumerate() {
                let items = table.row_items(qc);
                let order = order_of(&items);
                let sel: Selection = greedy(&items, &order, cap, overshoot, fallback);
                for (kc, &c) in sel.chosen.iter().enumerate() {
                    mask.set(qc, kc, c);
                }
            }
        }
    }
    Ok(mask)
}

/// Approximate attention mass of every key cluster for query cluster `qc`,
/// from centroid logits.
pub fn centroid_scores(
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    qc: usize,
    weighting: ScoreWeighting,
) -> Vec<f64> {
    let scale = 1.0 / (q_model.centroids().cols() as f64).sqrt();
    let qbar = q_model.centroids().row(qc);
    let mut scores: Vec<f64> = (0..k_model.num_clusters())
        .map(|b| {
            let s = dot(qbar, k_model.centroids().row(b)) * scale;
            match weighting {
                ScoreWeighting::SizeWeighted => s + (k_model.sizes()[b] as f64).ln(),
                ScoreWeighting::Unweighted => s,
            }
        })
        .collect();
    softmax_in_place(&mut scores);
    scores
}

/// Key clusters kept for one row: the shortest prefix by descending score
/// (ties to the lower index) whose cumulative mass reaches `p`.
fn top_p_row(scores: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    if p >= 1.0 {
        return order;
    }
    let mut cum = 0.0;
    let mut keep = Vec::new();
    for b in order {
        keep.push(b);
        cum += scores[b];
        if cum >= p {
            break;
        }
    }
    keep
}

fn check_p(p: f64) -> Result<()> {
    DensityBudget::PerClusterTopP { p }.validate()
}

/// Score-based baseline: per query cluster, keep the top-p key clusters.
pub fn score_top_p(
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    p: f64,
    weighting: ScoreWeighting,
) -> Result<BlockMask> {
    check_p(p)?;
    let mut mask = BlockMask::empty_for(q_model, k_model);
    for qc in 0..q_model.num_clusters() {
        for b in top_p_row(&centroid_scores(q_model, k_model, qc, weighting), p) {
            mask.set(qc, b, true);
        }
    }
    Ok(mask)
}

/// Entries each query cluster would spend under [`score_top_p`].
pub fn score_top_p_budget(
    q_model: &ClusterModel,
    k_model: &ClusterModel,
    p: f64,
    weighting: ScoreWeighting,
) -> Result<Vec<u64>> {
    check_p(p)?;
    Ok((0..q_model.num_clusters())
        .map(|qc| {
            let keys: u64 = top_p_row(&centroid_scores(q_model, k_model, qc, weighting), p)
                .into_iter()
                .map(|b| k_model.sizes()[b] as u64)
                .sum();
            q_model.sizes()[qc] as u64 * keys
        })
        .collect())
}

/// Estimated error left in compensated blocks.
pub fn relaxed_objective(table: &BlockErrorTable, mask: &BlockMask) -> Result<f64> {
    mask.check_table(table)?;
    Ok(sum_where(table, mask, false))
}

/// Estimated error captured by exact blocks.
pub fn selected_value(table: &BlockErrorTable, mask: &BlockMask) -> Result<f64> {
    mask.check_table(table)?;
    Ok(sum_where(table, mask, true))
}

fn sum_where(table: &BlockErrorTable, mask: &BlockMask, want: bool) -> f64 {
    let mut acc = 0.0;
    for qc in 0..table.q_clusters() {
        for kc in 0..table.k_clusters() {
            if mask.is_selected(qc, kc) == want {
                acc += table.error(qc, kc);
            }
        }
    }
    acc
}
