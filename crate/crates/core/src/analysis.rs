//! Experiment logic: the end-to-end pipeline per seed, routing policies,
//! error/density sweeps, the error bound check and the clustering study.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)] // unused only when std is in the build graph
use num_traits::Float;

use crate::clustering::{ClusterModel, KMeans, DEFAULT_MAX_ITERS};
use crate::error::{Error, Result};
use crate::estimator::{
    estimate_errors, estimate_errors_streaming, BlockErrorTable, EstimatorMode, DEFAULT_TILE,
};
use crate::knapsack::OracleLimits;
use crate::linalg::TokenMatrix;
use crate::oracle::{
    dropped_map, full_attention, knapsack_oracle, map_mse, matrix_mse, sparse_map_direct,
    AttentionMap,
};
use crate::router::{
    relaxed_objective, resolve_budget, route_error_aware, route_random, score_top_p, BlockMask,
    DensityBudget, EntryBudget, RouterConfig,
};
use crate::sparse::{FlopCounter, SparseAttention};
use crate::synth::Instance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    TopPDrop,
    TopPCompensated,
    ErrorAwareCompensated,
    Random,
    OracleKnapsack,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::TopPDrop,
        Policy::TopPCompensated,
        Policy::ErrorAwareCompensated,
        Policy::Random,
        Policy::OracleKnapsack,
    ];

    /// The three curves of the error/density comparison.
    pub const MAIN: [Policy; 3] = [
        Policy::TopPDrop,
        Policy::TopPCompensated,
        Policy::ErrorAwareCompensated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::TopPDrop => "topPDrop",
            Policy::TopPCompensated => "topPCompensated",
            Policy::ErrorAwareCompensated => "errorAwareCompensated",
            Policy::Random => "random",
            Policy::OracleKnapsack => "oracleKnapsack",
        }
    }

    /// Whether unselected blocks are compensated rather than dropped.
    pub fn compensates(self) -> bool {
        self != Policy::TopPDrop
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidParameter(alloc::format!("unknown policy `{s}`")))
    }
}

/// Arithmetic of the attention executor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub c_q: usize,
    pub c_k: usize,
    pub estimator: EstimatorMode,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    pub router: RouterConfig,
    pub oracle_limits: OracleLimits,
    pub tile: usize,
    pub precision: Precision,
    /// Build the dense attention map and output to score against. Without
    /// it, records carry NaN errors and the bound cannot be checked.
    pub dense_reference: bool,
}

impl PipelineConfig {
    pub fn new(c_q: usize, c_k: usize) -> Self {
        Self {
            c_q,
            c_k,
            estimator: EstimatorMode::ValueAware,
            kmeans_restarts: 1,
            kmeans_max_iters: DEFAULT_MAX_ITERS,
            router: RouterConfig::default(),
            oracle_limits: OracleLimits::default(),
            tile: DEFAULT_TILE,
            precision: Precision::Double,
            dense_reference: true,
        }
    }
}

/// One evaluated (policy, budget, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub policy: Policy,
    pub density: f64,
    pub relaxed_objective: f64,
    pub map_mse: f64,
    pub output_mse: f64,
    pub flops: u64,
    pub flop_breakdown: FlopCounter,
    pub seed: u64,
    pub c_q: usize,
    pub c_k: usize,
}

/// Both sides of the map error bound for one mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub lhs_mse: f64,
    /// `(2 / (N_q N_k)) Σ (1 − M) ε̂² / Z_i²`.
    pub estimated_term: f64,
    /// `8 δ_q² K_max² / (N_k d)`.
    pub residual_term: f64,
    pub rhs: f64,
    pub holds: bool,
    pub slack: f64,
    pub delta_sq: f64,
    pub k_max: f64,
    /// `max_i |Z̃_i / Z_i − 1|` between the compensated and the full map.
    pub normalizer_perturbation: f64,
}

/// Independent streams from one seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const Q_STREAM: u64 = 1;
const K_STREAM: u64 = 2;
const ROUTE_STREAM: u64 = 3;

/// Everything that depends only on the instance and seed: clusterings,
/// the error table and the dense reference.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    pub instance: &'a Instance,
    pub config: PipelineConfig,
    pub seed: u64,
    pub q_model: ClusterModel,
    pub k_model: ClusterModel,
    pub table: BlockErrorTable,
    pub reference: Option<(AttentionMap, TokenMatrix)>,
    pub clustering_flops: u64,
}

impl<'a> Prepared<'a> {
    /// Cluster with k-means, estimate, and compute dense attention.
    pub fn new(instance: &'a Instance, config: &PipelineConfig, seed: u64) -> Result<Self> {
        let fit = |tokens: &TokenMatrix, clusters: usize, stream: u64| {
            KMeans::new(clusters, derive_seed(seed, stream))
                .with_restarts(config.kmeans_restarts.max(1))
                .with_max_iters(config.kmeans_max_iters)
                .fit(tokens)
        };
        let q_fit = fit(&instance.q, config.c_q, Q_STREAM)?;
        let k_fit = fit(&instance.k, config.c_k, K_STREAM)?;
        let flops = q_fit.flops + k_fit.flops;
        Self::from_models(instance, config, seed, q_fit.model, k_fit.model, flops)
    }

    /// Use given clusterings instead of k-means.
    pub fn from_models(
        instance: &'a Instance,
        config: &PipelineConfig,
        seed: u64,
        q_model: ClusterModel,
        k_model: ClusterModel,
        clustering_flops: u64,
    ) -> Result<Self> {
        let table = match config.estimator {
            EstimatorMode::Plain => estimate_errors(&q_model, &k_model, &instance.k)?,
            EstimatorMode::ValueAware => estimate_errors_streaming::<f64>(
                &q_model,
                &k_model,
                &instance.k,
                &instance.v,
                config.tile,
            )?,
        };
        let reference = if config.dense_reference {
            Some(full_attention(&instance.q, &instance.k, &instance.v)?)
        } else {
            None
        };
        let mut config = *config;
        config.c_q = q_model.num_clusters();
        config.c_k = k_model.num_clusters();
        Ok(Self {
            instance,
            config,
            seed,
            q_model,
            k_model,
            table,
            reference,
            clustering_flops,
        })
    }

    fn total_entries(&self) -> u64 {
        self.instance.n_q() as u64 * self.instance.n_k() as u64
    }

    /// The mask a policy picks under a budget.
    ///
    /// Under a global density, top-p policies use the `p` whose mask density
    /// is closest to the target (ties to the sparser mask). Under a per-cluster
    /// top-p budget, every other policy gets exactly the entries top-p spends
    /// in each query cluster.
    pub fn mask(&self, policy: Policy, budget: &DensityBudget) -> Result<BlockMask> {
        budget.validate()?;
        let weighting = self.config.router.score_weighting;
        match policy {
            Policy::TopPDrop | Policy::TopPCompensated => match *budget {
                DensityBudget::PerClusterTopP { p } => {
                    score_top_p(&self.q_model, &self.k_model, p, weighting)
                }
                DensityBudget::Global { rho } => self.top_p_for_density(rho),
            },
            Policy::ErrorAwareCompensated => {
                let entries = resolve_budget(budget, &self.q_model, &self.k_model, weighting)?;
                route_error_aware(&self.table, &entries, &self.config.router)
            }
            Policy::Random => {
                let entries = resolve_budget(budget, &self.q_model, &self.k_model, weighting)?;
                route_random(
                    &self.table,
                    &entries,
                    derive_seed(self.seed, ROUTE_STREAM),
                    self.config.router.overshoot,
                )
            }
            Policy::OracleKnapsack => {
                let entries = resolve_budget(budget, &self.q_model, &self.k_model, weighting)?;
                knapsack_oracle(&self.table, &entries, &self.config.oracle_limits)
            }
        }
    }

    /// Top-p mask whose density lands closest to `rho`.
    pub fn top_p_for_density(&self, rho: f64) -> Result<BlockMask> {
        let weighting = self.config.router.score_weighting;
        let at = |p: f64| score_top_p(&self.q_model, &self.k_model, p, weighting);
        let target = (rho * self.total_entries() as f64).floor() as u64;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut hi_mask = at(hi)?;
        if hi_mask.density_entries() < target {
            return Ok(hi_mask);
        }
        let mut lo_mask: Option<BlockMask> = None;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let m = at(mid)?;
            if m.density_entries() >= target {
                hi = mid;
                hi_mask = m;
            } else {
                lo = mid;
                lo_mask = Some(m);
            }
        }
        Ok(match lo_mask {
            Some(lo_mask)
                if target - lo_mask.density_entries() <= hi_mask.density_entries() - target =>
            {
                lo_mask
            }
            _ => hi_mask,
        })
    }

    /// FLOPs a policy spends before attention: table or centroid scoring.
    fn selection_flops(&self, policy: Policy) -> u64 {
        match policy {
            Policy::TopPDrop | Policy::TopPCompensated => {
                2 * (self.q_model.num_clusters() * self.k_model.num_clusters() * self.instance.d())
                    as u64
            }
            Policy::ErrorAwareCompensated | Policy::OracleKnapsack => self.table.flops(),
            Policy::Random => 0,
        }
    }

    /// Executor output for a policy's mask: compensated or dropped.
    pub fn attend(&self, policy: Policy, mask: &BlockMask) -> Result<(TokenMatrix, FlopCounter)> {
        let inst = self.instance;
        let exec = SparseAttention::new(&inst.q, &inst.k, &inst.v, &self.q_model, &self.k_model)?;
        if policy.compensates() {
            let r = match self.config.precision {
                Precision::Double => exec.attend::<f64>(mask)?,
                Precision::Single => exec.attend::<f32>(mask)?,
            };
            return Ok((r.output, r.flops));
        }
        let (output, flops) = match self.config.precision {
            Precision::Double => {
                let p = exec.exact_block_pass::<f64>(mask)?;
                (p.output, p.flops)
            }
            Precision::Single => {
                let p = exec.exact_block_pass::<f32>(mask)?;
                (p.output.iter().map(|&x| x as f64).collect(), p.flops)
            }
        };
        let flops = FlopCounter {
            exact_block: flops,
            ..FlopCounter::default()
        };
        Ok((TokenMatrix::new(inst.n_q(), inst.d(), output)?, flops))
    }

    /// Dense attention map a policy's mask induces.
    pub fn policy_map(&self, policy: Policy, mask: &BlockMask) -> Result<AttentionMap> {
        let inst = self.instance;
        if policy.compensates() {
            sparse_map_direct(&inst.q, &inst.k, &self.q_model, &self.k_model, mask)
        } else {
            dropped_map(&inst.q, &inst.k, &self.q_model, &self.k_model, mask)
        }
    }

    fn require_reference(&self) -> Result<&(AttentionMap, TokenMatrix)> {
        self.reference
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("dense reference was not built".into()))
    }

    /// Score a mask against the dense reference; errors are NaN without one.
    pub fn evaluate(&self, policy: Policy, mask: &BlockMask) -> Result<SweepRecord> {
        let (output, mut flops) = self.attend(policy, mask)?;
        flops.estimation = self.selection_flops(policy);
        flops.clustering = self.clustering_flops;
        let (map_err, output_err) = match &self.reference {
            Some((full_map, full_output)) => (
                map_mse(&self.policy_map(policy, mask)?, full_map)?,
                matrix_mse(&output, full_output)?,
            ),
            None => (f64::NAN, f64::NAN),
        };
        Ok(SweepRecord {
            policy,
            density: mask.density(),
            relaxed_objective: relaxed_objective(&self.table, mask)?,
            map_mse: map_err,
            output_mse: output_err,
            flops: flops.total(),
            flop_breakdown: flops,
            seed: self.seed,
            c_q: self.q_model.num_clusters(),
            c_k: self.k_model.num_clusters(),
        })
    }

    pub fn run(&self, policy: Policy, budget: &DensityBudget) -> Result<SweepRecord> {
        let mask = self.mask(policy, budget)?;
        self.evaluate(policy, &mask)
    }

    /// Both sides of the bound for `mask`.
    ///
    /// The estimated term uses the plain table stabilized per query cluster
    /// by `s_c`; each query's share is moved onto its own full-map constants
    /// with `exp(2(s_c − m_i)) / Z_i²`.
    pub fn verify_bound(&self, mask: &BlockMask) -> Result<BoundReport> {
        let inst = self.instance;
        let plain;
        let table = if self.table.mode() == EstimatorMode::Plain {
            &self.table
        } else {
            plain = estimate_errors(&self.q_model, &self.k_model, &inst.k)?;
            &plain
        };
        let (full_map, _) = self.require_reference()?;
        let sparse = sparse_map_direct(&inst.q, &inst.k, &self.q_model, &self.k_model, mask)?;
        let lhs_mse = map_mse(&sparse, full_map)?;

        let row_max = full_map.row_max();
        let z = full_map.normalizers();
        let mut weighted = 0.0;
        for a in 0..self.q_model.num_clusters() {
            let s_c = table.stabilizers()[a];
            let per_query: f64 = self
                .q_model
                .members(a)
                .iter()
                .map(|&i| (2.0 * (s_c - row_max[i])).exp() / (z[i] * z[i]))
                .sum();
            let size = self.q_model.sizes()[a] as f64;
            for b in 0..self.k_model.num_clusters() {
                if !mask.is_selected(a, b) {
                    weighted += table.error(a, b) / size * per_query;
                }
            }
        }
        let entries = self.total_entries() as f64;
        let estimated_term = 2.0 * weighted / entries;
        let q_quality = self.q_model.quality(&inst.q);
        let k_quality = self.k_model.quality(&inst.k);
        let residual_term = residual_term(
            q_quality.delta_sq,
            k_quality.k_max,
            inst.n_k(),
            inst.d(),
        );
        let rhs = estimated_term + residual_term;

        let sparse_lse = sparse.lse();
        let full_lse = full_map.lse();
        let normalizer_perturbation = sparse_lse
            .iter()
            .zip(&full_lse)
            .map(|(&s, &f)| ((s - f).exp() - 1.0).abs())
            .fold(0.0, f64::max);

        Ok(BoundReport {
            lhs_mse,
            estimated_term,
            residual_term,
            rhs,
            holds: lhs_mse <= rhs,
            slack: rhs - lhs_mse,
            delta_sq: q_quality.delta_sq,
            k_max: k_quality.k_max,
            normalizer_perturbation,
        })
    }
}

/// `8 δ_q² K_max² / (N_k d)`.
pub fn residual_term(delta_sq: f64, k_max: f64, n_k: usize, d: usize) -> f64 {
    8.0 * delta_sq * k_max * k_max / (n_k as f64 * d as f64)
}

/// Every (seed, policy, budget) cell, in that nesting order.
pub fn policy_sweep(
    instance: &Instance,
    config: &PipelineConfig,
    policies: &[Policy],
    budgets: &[DensityBudget],
    seeds: &[u64],
) -> Result<Vec<SweepRecord>> {
    if budgets.is_empty() {
        return Err(Error::Empty("density grid"));
    }
    let mut out = Vec::with_capacity(seeds.len() * policies.len() * budgets.len());
    for &seed in seeds {
        let prepared = Prepared::new(instance, config, seed)?;
        for &policy in policies {
            for budget in budgets {
                out.push(prepared.run(policy, budget)?);
            }
        }
    }
    Ok(out)
}

/// One point of the clustering study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringPoint {
    pub c_q: usize,
    pub delta_sq: f64,
    pub map_mse: f64,
    pub density: f64,
}

/// Error-aware compensated routing at each query cluster count, with the
/// key clustering and budget held fixed.
pub fn clustering_study(
    instance: &Instance,
    q_counts: &[usize],
    base: &PipelineConfig,
    budget: &DensityBudget,
    seed: u64,
) -> Result<Vec<ClusteringPoint>> {
    q_counts
        .iter()
        .map(|&c_q| {
            let config = PipelineConfig { c_q, ..*base };
            let prepared = Prepared::new(instance, &config, seed)?;
            let rec = prepared.run(Policy::ErrorAwareCompensated, budget)?;
            Ok(ClusteringPoint {
                c_q,
                delta_sq: prepared.q_model.quality(&instance.q).delta_sq,
                map_mse: rec.map_mse,
                density: rec.density,
            })
        })
        .collect()
}

/// Greedy routing against the exact knapsack on the same tables.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretReport {
    /// Greedy selected value over optimal selected value, per instance.
    pub ratios: Vec<f64>,
    pub min: f64,
    pub mean: f64,
}

pub fn greedy_vs_oracle(
    instances: &[(BlockErrorTable, EntryBudget)],
    router: &RouterConfig,
    limits: &OracleLimits,
) -> Result<RegretReport> {
    let mut ratios = Vec::with_capacity(instances.len());
    for (table, budget) in instances {
        let greedy = route_error_aware(table, budget, router)?;
        let oracle = knapsack_oracle(table, budget, limits)?;
        let g = crate::router::selected_value(table, &greedy)?;
        let o = crate::router::selected_value(table, &oracle)?;
        ratios.push(if o > 0.0 { g / o } else { 1.0 });
    }
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = if ratios.is_empty() {
        f64::NAN
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    Ok(RegretReport { ratios, min, mean })
}
