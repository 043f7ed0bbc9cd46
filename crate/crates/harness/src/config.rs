//! Run configuration: JSON file, preset and flag overrides, resolved into a
//! validated [`RunConfig`].
//!
//! Precedence, lowest first: built-in defaults, `--preset paper`, the JSON
//! file, individual command-line flags.

use std::path::Path;

use ear_core::analysis::{PipelineConfig, Policy, Precision};
use ear_core::estimator::EstimatorMode;
use ear_core::router::DensityBudget;
use ear_core::synth::BlobSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum BudgetMode {
    Global,
    PerClusterTopP,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EstimatorName {
    Plain,
    ValueAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PrecisionName {
    Double,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PolicyName {
    TopPDrop,
    TopPCompensated,
    ErrorAwareCompensated,
    Random,
    OracleKnapsack,
}

impl From<PolicyName> for Policy {
    fn from(p: PolicyName) -> Self {
        match p {
            PolicyName::TopPDrop => Policy::TopPDrop,
            PolicyName::TopPCompensated => Policy::TopPCompensated,
            PolicyName::ErrorAwareCompensated => Policy::ErrorAwareCompensated,
            PolicyName::Random => Policy::Random,
            PolicyName::OracleKnapsack => Policy::OracleKnapsack,
        }
    }
}

impl From<Policy> for PolicyName {
    fn from(p: Policy) -> Self {
        match p {
            Policy::TopPDrop => PolicyName::TopPDrop,
            Policy::TopPCompensated => PolicyName::TopPCompensated,
            Policy::ErrorAwareCompensated => PolicyName::ErrorAwareCompensated,
            Policy::Random => PolicyName::Random,
            Policy::OracleKnapsack => PolicyName::OracleKnapsack,
        }
    }
}

/// Parameters of the synthetic generator used by `gen`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct BlobConfig {
    pub q_blobs: usize,
    pub k_blobs: usize,
    pub sigma: f64,
    pub center_scale: f64,
    pub value_sigma: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        let s = BlobSpec::new(1, 1, 1);
        Self {
            q_blobs: s.q_blobs,
            k_blobs: s.k_blobs,
            sigma: s.sigma,
            center_scale: s.center_scale,
            value_sigma: s.value_sigma,
        }
    }
}

/// The JSON file as written: every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(rename = "nQ")]
    pub n_q: Option<usize>,
    #[serde(rename = "nK")]
    pub n_k: Option<usize>,
    pub d: Option<usize>,
    #[serde(rename = "cQ")]
    pub c_q: Option<usize>,
    #[serde(rename = "cK")]
    pub c_k: Option<usize>,
    pub budget_mode: Option<BudgetMode>,
    pub rho: Option<f64>,
    pub p: Option<f64>,
    pub estimator_mode: Option<EstimatorName>,
    pub policy: Option<PolicyName>,
    pub seeds: Option<Vec<u64>>,
    pub precision: Option<PrecisionName>,
    pub kmeans_restarts: Option<usize>,
    /// Largest `nQ · nK` for which dense reference maps are built.
    pub oracle_max_entries: Option<u64>,
    pub blobs: Option<BlobConfig>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Fields of `top` that are set replace those of `self`.
    pub fn overlay(self, top: ConfigFile) -> ConfigFile {
        ConfigFile {
            n_q: top.n_q.or(self.n_q),
            n_k: top.n_k.or(self.n_k),
            d: top.d.or(self.d),
            c_q: top.c_q.or(self.c_q),
            c_k: top.c_k.or(self.c_k),
            budget_mode: top.budget_mode.or(self.budget_mode),
            rho: top.rho.or(self.rho),
            p: top.p.or(self.p),
            estimator_mode: top.estimator_mode.or(self.estimator_mode),
            policy: top.policy.or(self.policy),
            seeds: top.seeds.or(self.seeds),
            precision: top.precision.or(self.precision),
            kmeans_restarts: top.kmeans_restarts.or(self.kmeans_restarts),
            oracle_max_entries: top.oracle_max_entries.or(self.oracle_max_entries),
            blobs: top.blobs.or(self.blobs),
        }
    }
}

/// Defaults before any preset.
pub fn builtin_defaults() -> ConfigFile {
    ConfigFile {
        budget_mode: Some(BudgetMode::Global),
        rho: Some(0.25),
        estimator_mode: Some(EstimatorName::ValueAware),
        policy: Some(PolicyName::ErrorAwareCompensated),
        seeds: Some(vec![0]),
        precision: Some(PrecisionName::Double),
        kmeans_restarts: Some(1),
        oracle_max_entries: Some(DEFAULT_ORACLE_MAX_ENTRIES),
        ..ConfigFile::default()
    }
}

pub const DEFAULT_ORACLE_MAX_ENTRIES: u64 = 1 << 22;

/// Top-p 0.85, value-aware estimation, error-aware routing under per-cluster
/// budgets.
pub fn preset_defaults() -> ConfigFile {
    ConfigFile {
        budget_mode: Some(BudgetMode::PerClusterTopP),
        p: Some(0.85),
        estimator_mode: Some(EstimatorName::ValueAware),
        policy: Some(PolicyName::ErrorAwareCompensated),
        ..ConfigFile::default()
    }
}

/// Query clusters when unset: one per 12 queries, at least 4.
pub fn default_c_q(n_q: usize) -> usize {
    (n_q / 12).max(4).min(n_q)
}

/// Key clusters when unset: one per 3.6 keys, at least 8.
pub fn default_c_k(n_k: usize) -> usize {
    ((n_k as f64 / 3.6).floor() as usize).max(8).min(n_k)
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RunConfig {
    #[serde(rename = "nQ")]
    pub n_q: usize,
    #[serde(rename = "nK")]
    pub n_k: usize,
    pub d: usize,
    #[serde(rename = "cQ")]
    pub c_q: usize,
    #[serde(rename = "cK")]
    pub c_k: usize,
    pub budget_mode: BudgetMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    pub estimator_mode: EstimatorName,
    pub policy: PolicyName,
    pub seeds: Vec<u64>,
    pub precision: PrecisionName,
    pub kmeans_restarts: usize,
    pub oracle_max_entries: u64,
    pub blobs: BlobConfig,
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("config field `{name}`: {msg}"))
}

impl RunConfig {
    /// Validate a merged file. `shape` fills `nQ`, `nK`, `d` from a tensor
    /// file and must agree with any values given.
    pub fn resolve(
        file: ConfigFile,
        shape: Option<(usize, usize, usize)>,
    ) -> Result<Self, CliError> {
        let pick = |name: &str, given: Option<usize>, from_shape: Option<usize>| {
            match (given, from_shape) {
                (Some(g), Some(s)) if g != s => Err(CliError::Input(format!(
                    "config field `{name}` is {g} but the tensor file has {s}"
                ))),
                (g, s) => g.or(s).ok_or_else(|| field(name, "required")),
            }
        };
        let n_q = pick("nQ", file.n_q, shape.map(|s| s.0))?;
        let n_k = pick("nK", file.n_k, shape.map(|s| s.1))?;
        let d = pick("d", file.d, shape.map(|s| s.2))?;
        for (name, x) in [("nQ", n_q), ("nK", n_k), ("d", d)] {
            if x == 0 {
                return Err(field(name, "must be at least 1"));
            }
        }
        let c_q = file.c_q.unwrap_or_else(|| default_c_q(n_q));
        let c_k = file.c_k.unwrap_or_else(|| default_c_k(n_k));
        if c_q == 0 || c_q > n_q {
            return Err(field("cQ", format!("must lie in [1, nQ = {n_q}], got {c_q}")));
        }
        if c_k == 0 || c_k > n_k {
            return Err(field("cK", format!("must lie in [1, nK = {n_k}], got {c_k}")));
        }
        let budget_mode = file.budget_mode.ok_or_else(|| field("budgetMode", "required"))?;
        if let Some(rho) = file.rho {
            if !(0.0..=1.0).contains(&rho) {
                return Err(field("rho", format!("must lie in [0, 1], got {rho}")));
            }
        }
        if let Some(p) = file.p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(field("p", format!("must lie in (0, 1], got {p}")));
            }
        }
        match budget_mode {
            BudgetMode::Global if file.rho.is_none() => {
                return Err(field("rho", "required when budgetMode is global"))
            }
            BudgetMode::PerClusterTopP if file.p.is_none() => {
                return Err(field("p", "required when budgetMode is perClusterTopP"))
            }
            _ => {}
        }
        let seeds = file.seeds.ok_or_else(|| field("seeds", "required"))?;
        if seeds.is_empty() {
            return Err(field("seeds", "must not be empty"));
        }
        let kmeans_restarts = file.kmeans_restarts.unwrap_or(1);
        if kmeans_restarts == 0 {
            return Err(field("kmeansRestarts", "must be at least 1"));
        }
        let blobs = file.blobs.unwrap_or_default();
        if blobs.q_blobs == 0 || blobs.k_blobs == 0 {
            return Err(field("blobs", "blob counts must be at least 1"));
        }
        for (name, x) in [
            ("blobs.sigma", blobs.sigma),
            ("blobs.centerScale", blobs.center_scale),
            ("blobs.valueSigma", blobs.value_sigma),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(field(name, format!("must be finite and non-negative, got {x}")));
            }
        }
        Ok(Self {
            n_q,
            n_k,
            d,
            c_q,
            c_k,
            budget_mode,
            rho: file.rho,
            p: file.p,
            estimator_mode: file.estimator_mode.ok_or_else(|| field("estimatorMode", "required"))?,
            policy: file.policy.ok_or_else(|| field("policy", "required"))?,
            seeds,
            precision: file.precision.ok_or_else(|| field("precision", "required"))?,
            kmeans_restarts,
            oracle_max_entries: file.oracle_max_entries.unwrap_or(DEFAULT_ORACLE_MAX_ENTRIES),
            blobs,
        })
    }

    pub fn budget(&self) -> DensityBudget {
        match self.budget_mode {
            BudgetMode::Global => DensityBudget::Global {
                rho: self.rho.expect("checked in resolve"),
            },
            BudgetMode::PerClusterTopP => DensityBudget::PerClusterTopP {
                p: self.p.expect("checked in resolve"),
            },
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let mut cfg = PipelineConfig::new(self.c_q, self.c_k);
        cfg.estimator = match self.estimator_mode {
            EstimatorName::Plain => EstimatorMode::Plain,
            EstimatorName::ValueAware => EstimatorMode::ValueAware,
        };
        cfg.precision = match self.precision {
            PrecisionName::Double => Precision::Double,
            PrecisionName::Single => Precision::Single,
        };
        cfg.kmeans_restarts = self.kmeans_restarts;
        cfg
    }

    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec::new(self.n_q, self.n_k, self.d)
            .blobs(self.blobs.q_blobs, self.blobs.k_blobs)
            .sigma(self.blobs.sigma)
            .center_scale(self.blobs.center_scale)
            .value_sigma(self.blobs.value_sigma)
    }

    /// Whether dense reference maps fit the configured limit.
    pub fn oracle_fits(&self) -> bool {
        (self.n_q as u64).saturating_mul(self.n_k as u64) <= self.oracle_max_entries
    }
}
