//! `gen`, `run`, `sweep` and `verify`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ear_core::analysis::{BoundReport, Policy, Precision, Prepared, SweepRecord};
use ear_core::estimator::{estimate_errors_streaming, estimate_errors_value_aware};
use ear_core::router::DensityBudget;
use ear_core::sparse::{reference_sparse_output, FlopCounter, SparseAttention};
use ear_core::{Instance, Matrix};
use rayon::prelude::*;
use serde::Serialize;

use crate::cli::{Cli, Command, Common, Preset};
use crate::config::{builtin_defaults, preset_defaults, ConfigFile, PolicyName, RunConfig};
use crate::error::CliError;
use crate::tensor::{Dtype, TensorFile};
use crate::CSV_HEADER;

/// Executor against dense reference, double precision.
pub const EXECUTOR_TOL_DOUBLE: f64 = 1e-9;
/// Executor against dense reference, single precision, relative to the
/// largest reference magnitude.
pub const EXECUTOR_TOL_SINGLE_REL: f64 = 1e-4;
/// Streaming against naive estimator, relative to the largest block error.
pub const STREAMING_TOL_REL: f64 = 1e-10;

pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { output, common } => gen(&output, &common),
        Command::Run { tensor, common, out } => {
            with_output(out.as_deref(), stdout, |w| run(&tensor, &common, w))
        }
        Command::Sweep {
            tensor,
            density_grid,
            common,
            out,
        } => with_output(out.as_deref(), stdout, |w| {
            sweep(&tensor, density_grid.as_deref(), &common, w)
        }),
        Command::Verify { tensor, common, out } => {
            with_output(out.as_deref(), stdout, |w| verify(&tensor, &common, w))
        }
    }
}

fn with_output(
    path: Option<&Path>,
    stdout: &mut dyn Write,
    body: impl FnOnce(&mut dyn Write) -> Result<(), CliError>,
) -> Result<(), CliError> {
    match path {
        None => body(stdout),
        Some(p) => {
            let file = File::create(p).map_err(|e| write_error(p, e))?;
            let mut w = BufWriter::new(file);
            let result = body(&mut w);
            w.flush().map_err(|e| write_error(p, e))?;
            result
        }
    }
}

fn write_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("cannot write {}: {e}", path.display()))
}

fn io_error(e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("write failed: {e}"))
}

/// Defaults, preset, file, flags; `policy` overrides the merged policy.
fn layered(common: &Common, policy: Option<Policy>) -> Result<ConfigFile, CliError> {
    let mut merged = builtin_defaults();
    if common.preset == Some(Preset::Paper) {
        merged = merged.overlay(preset_defaults());
    }
    if let Some(path) = &common.config {
        merged = merged.overlay(ConfigFile::load(path)?);
    }
    let mut flags = common.as_layer();
    flags.policy = policy.map(PolicyName::from);
    Ok(merged.overlay(flags))
}

fn parse_policies(flag: &str) -> Result<Vec<Policy>, CliError> {
    let policies = flag
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<Policy>()
                .map_err(|e| CliError::Config(format!("flag `--policy`: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(policies)
}

fn single_policy(common: &Common) -> Result<Option<Policy>, CliError> {
    match common.policy.as_deref() {
        None => Ok(None),
        Some(flag) => match parse_policies(flag)?.as_slice() {
            [p] => Ok(Some(*p)),
            _ => Err(CliError::Config("flag `--policy`: expected one policy".into())),
        },
    }
}

fn parse_grid(flag: Option<&str>) -> Result<Vec<f64>, CliError> {
    let flag = flag.ok_or_else(|| CliError::Config("sweep needs `--density-grid`".into()))?;
    let mut grid = Vec::new();
    for part in flag.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let rho: f64 = part
            .parse()
            .map_err(|_| CliError::Config(format!("flag `--density-grid`: bad number `{part}`")))?;
        if !(0.0..=1.0).contains(&rho) {
            return Err(CliError::Config(format!(
                "flag `--density-grid`: {rho} is outside [0, 1]"
            )));
        }
        grid.push(rho);
    }
    if grid.is_empty() {
        return Err(CliError::Config("flag `--density-grid`: empty density grid".into()));
    }
    Ok(grid)
}

fn load(path: &Path) -> Result<Instance, CliError> {
    let file = TensorFile::read(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(file.to_instance()?)
}

fn resolve_for(instance: &Instance, layers: ConfigFile) -> Result<RunConfig, CliError> {
    RunConfig::resolve(layers, Some((instance.n_q(), instance.n_k(), instance.d())))
}

fn pool(common: &Common) -> Result<rayon::ThreadPool, CliError> {
    if common.workers == Some(0) {
        return Err(CliError::Config("flag `--workers`: must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Capability(format!("cannot start worker threads: {e}")))
}

fn require_reference(rc: &RunConfig, what: &str) -> Result<(), CliError> {
    if rc.oracle_fits() {
        Ok(())
    } else {
        Err(CliError::Capability(format!(
            "{what} needs the dense reference, but nQ·nK = {} exceeds oracleMaxEntries = {}",
            rc.n_q as u64 * rc.n_k as u64,
            rc.oracle_max_entries
        )))
    }
}

fn gen(output: &Path, common: &Common) -> Result<(), CliError> {
    let rc = RunConfig::resolve(layered(common, single_policy(common)?)?, None)?;
    let dtype = match rc.precision {
        crate::config::PrecisionName::Double => Dtype::F64,
        crate::config::PrecisionName::Single => Dtype::F32,
    };
    let instance = rc.blob_spec().generate(rc.seeds[0])?;
    TensorFile::from_instance(&instance, dtype)
        .write(output)
        .map_err(|e| CliError::Input(format!("{}: {e}", output.display())))
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct FlopBreakdown {
    exact_block: u64,
    compensation: u64,
    estimation: u64,
    clustering: u64,
}

impl From<FlopCounter> for FlopBreakdown {
    fn from(f: FlopCounter) -> Self {
        Self {
            exact_block: f.exact_block,
            compensation: f.compensation,
            estimation: f.estimation,
            clustering: f.clustering,
        }
    }
}

#[derive(Debug, Serialize)]
struct Timing {
    seconds: f64,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct RunLine<'a> {
    policy: &'static str,
    density: f64,
    relaxed_objective: f64,
    /// `null` when the dense reference was skipped.
    map_mse: Option<f64>,
    output_mse: Option<f64>,
    flops: u64,
    flop_breakdown: FlopBreakdown,
    seed: u64,
    #[serde(rename = "cQ")]
    c_q: usize,
    #[serde(rename = "cK")]
    c_k: usize,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    timing: Option<Timing>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn write_json_line(w: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    serde_json::to_writer(&mut *w, value).map_err(io_error)?;
    w.write_all(b"\n").map_err(io_error)
}

fn run(tensor: &Path, common: &Common, w: &mut dyn Write) -> Result<(), CliError> {
    let instance = load(tensor)?;
    let rc = resolve_for(&instance, layered(common, single_policy(common)?)?)?;
    let policy = Policy::from(rc.policy);
    if policy == Policy::OracleKnapsack {
        require_reference(&rc, "policy oracleKnapsack")?;
    }
    let mut pipeline = rc.pipeline();
    pipeline.dense_reference = rc.oracle_fits();
    let budget = rc.budget();

    let results = pool(common)?.install(|| {
        rc.seeds
            .par_iter()
            .map(|&seed| {
                let start = Instant::now();
                let prepared = Prepared::new(&instance, &pipeline, seed)?;
                let mask = prepared.mask(policy, &budget)?;
                let record = prepared.evaluate(policy, &mask)?;
                Ok((record, start.elapsed().as_secs_f64()))
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    for (r, seconds) in results {
        let line = RunLine {
            policy: r.policy.name(),
            density: r.density,
            relaxed_objective: r.relaxed_objective,
            map_mse: finite(r.map_mse),
            output_mse: finite(r.output_mse),
            flops: r.flops,
            flop_breakdown: r.flop_breakdown.into(),
            seed: r.seed,
            c_q: r.c_q,
            c_k: r.c_k,
            config: &rc,
            timing: (!common.no_timing).then_some(Timing { seconds }),
        };
        write_json_line(w, &line)?;
    }
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn csv_row(r: &SweepRecord) -> [String; 9] {
    [
        r.policy.name().to_string(),
        num(r.density),
        num(r.relaxed_objective),
        num(r.map_mse),
        num(r.output_mse),
        r.flops.to_string(),
        r.seed.to_string(),
        r.c_q.to_string(),
        r.c_k.to_string(),
    ]
}

fn sweep(
    tensor: &Path,
    grid: Option<&str>,
    common: &Common,
    w: &mut dyn Write,
) -> Result<(), CliError> {
    let grid = parse_grid(grid)?;
    let policies = match common.policy.as_deref() {
        Some(flag) => parse_policies(flag)?,
        None => Policy::MAIN.to_vec(),
    };
    let instance = load(tensor)?;
    let rc = resolve_for(&instance, layered(common, None)?)?;
    require_reference(&rc, "sweep")?;
    let pipeline = rc.pipeline();
    let budgets: Vec<DensityBudget> = grid.iter().map(|&rho| DensityBudget::Global { rho }).collect();
    let cells: Vec<(Policy, &DensityBudget)> = policies
        .iter()
        .flat_map(|&p| budgets.iter().map(move |b| (p, b)))
        .collect();

    let records = pool(common)?.install(|| {
        rc.seeds
            .par_iter()
            .map(|&seed| {
                let prepared = Prepared::new(&instance, &pipeline, seed)?;
                cells
                    .par_iter()
                    .map(|&(policy, budget)| Ok(prepared.run(policy, budget)?))
                    .collect::<Result<Vec<_>, CliError>>()
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER).map_err(io_error)?;
    for r in records.iter().flatten() {
        out.write_record(csv_row(r)).map_err(io_error)?;
    }
    out.flush().map_err(io_error)
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct BoundJson {
    lhs_mse: f64,
    estimated_term: f64,
    residual_term: f64,
    rhs: f64,
    holds: bool,
    slack: f64,
    delta_sq: f64,
    k_max: f64,
    normalizer_perturbation: f64,
}

impl From<BoundReport> for BoundJson {
    fn from(b: BoundReport) -> Self {
        Self {
            lhs_mse: b.lhs_mse,
            estimated_term: b.estimated_term,
            residual_term: b.residual_term,
            rhs: b.rhs,
            holds: b.holds,
            slack: b.slack,
            delta_sq: b.delta_sq,
            k_max: b.k_max,
            normalizer_perturbation: b.normalizer_perturbation,
        }
    }
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct Check {
    max_abs_diff: f64,
    /// Absolute threshold the difference is held to.
    tolerance: f64,
    pass: bool,
}

impl Check {
    fn new(max_abs_diff: f64, tolerance: f64) -> Self {
        Self {
            max_abs_diff,
            tolerance,
            pass: max_abs_diff <= tolerance,
        }
    }
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct VerifyLine {
    seed: u64,
    policy: &'static str,
    density: f64,
    /// Reported only; the bound is conditional and never fails the command.
    bound: BoundJson,
    executor_vs_reference: Check,
    streaming_vs_naive: Check,
    pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    timing: Option<Timing>,
}

fn max_abs(m: &Matrix) -> f64 {
    m.as_slice().iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

fn verify_seed(
    instance: &Instance,
    rc: &RunConfig,
    policy: Policy,
    seed: u64,
    timed: bool,
) -> Result<VerifyLine, CliError> {
    let start = Instant::now();
    let pipeline = rc.pipeline();
    let prepared = Prepared::new(instance, &pipeline, seed)?;
    let mask = prepared.mask(policy, &rc.budget())?;
    let bound = prepared.verify_bound(&mask)?;

    let (qm, km) = (&prepared.q_model, &prepared.k_model);
    let exec = SparseAttention::new(&instance.q, &instance.k, &instance.v, qm, km)?;
    let output = match pipeline.precision {
        Precision::Double => exec.attend::<f64>(&mask)?.output,
        Precision::Single => exec.attend::<f32>(&mask)?.output,
    };
    let reference = reference_sparse_output(&instance.q, &instance.k, &instance.v, qm, km, &mask)?;
    let exec_tol = match pipeline.precision {
        Precision::Double => EXECUTOR_TOL_DOUBLE,
        Precision::Single => EXECUTOR_TOL_SINGLE_REL * max_abs(&reference).max(1.0),
    };
    let executor = Check::new(output.max_abs_diff(&reference)?, exec_tol);

    let naive = estimate_errors_value_aware(qm, km, &instance.k, &instance.v)?;
    let streamed = estimate_errors_streaming::<f64>(qm, km, &instance.k, &instance.v, pipeline.tile)?;
    let streaming = Check::new(
        streamed.error_sum().max_abs_diff(naive.error_sum())?,
        STREAMING_TOL_REL * max_abs(naive.error_sum()).max(1.0),
    );

    Ok(VerifyLine {
        seed,
        policy: policy.name(),
        density: mask.density(),
        pass: executor.pass && streaming.pass,
        bound: bound.into(),
        executor_vs_reference: executor,
        streaming_vs_naive: streaming,
        timing: timed.then(|| Timing {
            seconds: start.elapsed().as_secs_f64(),
        }),
    })
}

fn verify(tensor: &Path, common: &Common, w: &mut dyn Write) -> Result<(), CliError> {
    let instance = load(tensor)?;
    let rc = resolve_for(&instance, layered(common, single_policy(common)?)?)?;
    require_reference(&rc, "verify")?;
    let policy = Policy::from(rc.policy);
    let lines = pool(common)?.install(|| {
        rc.seeds
            .par_iter()
            .map(|&seed| verify_seed(&instance, &rc, policy, seed, !common.no_timing))
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    for line in &lines {
        write_json_line(w, line)?;
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    if failed > 0 {
        return Err(CliError::Verification(format!(
            "{failed} of {} seeds failed the executor or estimator check",
            lines.len()
        )));
    }
    Ok(())
}
