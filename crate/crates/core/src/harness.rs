//! Experiment runners: instance generation from a config, single solver
//! runs, timing and noise studies, CSV records and plot-ready TSV series.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{self, AdmmConfig};
use crate::certify::{accuracy, extract_state, Accuracy};
use crate::chordal::manual_chain_decomposition;
use crate::ctro::{self, CtroConfig, CtroInstance};
use crate::dsdp::{self, DsdpResult};
use crate::error::{Error, Result};
use crate::local_gn::{self, GnConfig, GnResult, InitMode};
use crate::model::{LiftedProblem, ProblemKind};
use crate::mw::{self, MwConfig, MwInstance, MwLiftOptions};
use crate::solver::{SolveStatus, SolverSettings};

/// Version tag written as a comment above every record file.
pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const RECORD_HEADER_COMMENT: &str = "# chordal-sdp experiment records, schema v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Ctro,
    Mw,
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Problem::Ctro => "ctro",
            Problem::Mw => "mw",
        })
    }
}

impl FromStr for Problem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ctro" | "ct-ro" => Ok(Problem::Ctro),
            "mw" => Ok(Problem::Mw),
            other => Err(Error::Parse(format!("unknown problem '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SolverKind {
    #[serde(rename = "local")]
    Local,
    #[serde(rename = "local-gt")]
    LocalGt,
    #[serde(rename = "sdp")]
    Sdp,
    #[serde(rename = "dsdp")]
    Dsdp,
    #[serde(rename = "dsdp-admm")]
    DsdpAdmm,
}

impl SolverKind {
    pub const ALL: [SolverKind; 5] = [
        SolverKind::Local,
        SolverKind::LocalGt,
        SolverKind::Sdp,
        SolverKind::Dsdp,
        SolverKind::DsdpAdmm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Local => "local",
            SolverKind::LocalGt => "local-gt",
            SolverKind::Sdp => "sdp",
            SolverKind::Dsdp => "dsdp",
            SolverKind::DsdpAdmm => "dsdp-admm",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown solver '{s}'")))
    }
}

/// A generated instance of either problem, as stored by `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "lowercase")]
pub enum Instance {
    Ctro(CtroInstance),
    Mw(MwInstance),
}

impl Instance {
    pub fn problem(&self) -> Problem {
        match self {
            Instance::Ctro(_) => Problem::Ctro,
            Instance::Mw(_) => Problem::Mw,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Instance::Ctro(i) => i.n_states(),
            Instance::Mw(i) => i.n_poses(),
        }
    }

    pub fn n_landmarks(&self) -> usize {
        match self {
            Instance::Ctro(i) => i.landmarks.len(),
            Instance::Mw(i) => i.landmarks.len(),
        }
    }

    /// Squared-distance STD for CT-RO, pixel STD for MW.
    pub fn noise(&self) -> f64 {
        match self {
            Instance::Ctro(i) => i.config.sigma_d_meas,
            Instance::Mw(i) => i.config.sigma_u,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Instance::Ctro(i) => i.config.seed,
            Instance::Mw(i) => i.config.seed,
        }
    }

    pub fn gt_raw(&self) -> Vec<Vec<f64>> {
        match self {
            Instance::Ctro(i) => i.gt_raw(),
            Instance::Mw(i) => i.gt_raw(),
        }
    }

    pub fn kind(&self) -> ProblemKind {
        match self {
            Instance::Ctro(_) => ProblemKind::Ctro,
            Instance::Mw(_) => ProblemKind::Mw,
        }
    }

    pub fn lift(&self, redundant: bool) -> Result<LiftedProblem> {
        match self {
            Instance::Ctro(i) => ctro::lift_ctro(i),
            Instance::Mw(i) => mw::lift_mw_with(
                i,
                MwLiftOptions {
                    redundant,
                    ..MwLiftOptions::default()
                },
            ),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Deterministic instance for `(problem, N, N_m, noise, seed)`.
pub fn generate(problem: Problem, n: usize, n_landmarks: usize, noise: Option<f64>, seed: u64) -> Result<Instance> {
    match problem {
        Problem::Ctro => {
            let mut c = CtroConfig::new(n, n_landmarks, seed);
            if let Some(s) = noise {
                c.sigma_d_meas = s;
            }
            Ok(Instance::Ctro(ctro::simulate_seeded(&c)?))
        }
        Problem::Mw => {
            let mut c = MwConfig::new(n, n_landmarks, seed);
            if let Some(s) = noise {
                c = c.with_pixel_noise(s);
            }
            Ok(Instance::Mw(mw::simulate_seeded(&c)?))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub solvers: Vec<SolverKind>,
    pub sizes: Vec<usize>,
    pub noises: Vec<f64>,
    pub n_landmarks: usize,
    pub n_seeds: usize,
    /// First instance seed; seed `k` of a sweep is `seed + k`.
    pub seed: u64,
    pub redundant: bool,
    pub solver: SolverSettings,
    pub admm: AdmmConfig,
    pub gn: GnConfig,
    /// Random restarts of the local solver per instance.
    pub local_restarts: usize,
    /// The full SDP is skipped above this size.
    pub sdp_max_n: usize,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `problem`.
    pub fn defaults(problem: Problem) -> Self {
        let (sizes, noises) = match problem {
            Problem::Ctro => (vec![8, 16, 32, 64, 128], vec![0.01, 0.05, 0.1, 0.2, 0.5]),
            Problem::Mw => (vec![4, 8, 16, 32, 64], vec![0.5, 1.0, 2.0, 5.0]),
        };
        Self {
            problem,
            solvers: SolverKind::ALL.to_vec(),
            sizes,
            noises,
            n_landmarks: 8,
            n_seeds: 10,
            seed: 0,
            redundant: true,
            solver: SolverSettings::default(),
            admm: AdmmConfig {
                fixed_iterations: Some(3),
                ..AdmmConfig::default()
            },
            gn: GnConfig::default(),
            local_restarts: 5,
            sdp_max_n: 32,
            out_dir: PathBuf::from("results"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.noises.is_empty() || self.solvers.is_empty() {
            return Err(Error::InvalidConfig("size, noise and solver lists must be non-empty".into()));
        }
        if self.n_seeds == 0 {
            return Err(Error::InvalidConfig("n_seeds must be at least 1".into()));
        }
        if self.local_restarts == 0 {
            return Err(Error::InvalidConfig("local_restarts must be at least 1".into()));
        }
        self.solver.validate()?;
        self.admm.validate()?;
        self.gn.validate()
    }

    /// Parses `key = value` lines on top of the defaults of the `problem`
    /// key (CT-RO when absent). `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let problem = match pairs.iter().find(|(k, _)| k == "problem") {
            Some((_, v)) => v.parse()?,
            None => Problem::Ctro,
        };
        let mut c = Self::defaults(problem);
        for (k, v) in &pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Parse(format!("{key}: cannot parse '{v}'")))
        }
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s.trim())).collect()
        }
        match key {
            "problem" => self.problem = value.parse()?,
            "solvers" => {
                self.solvers = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "sizes" => self.sizes = list(key, value)?,
            "noises" => self.noises = list(key, value)?,
            "n_landmarks" => self.n_landmarks = num(key, value)?,
            "n_seeds" => self.n_seeds = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "redundant" => self.redundant = parse_switch(value)?,
            "tol" => self.solver.tol = num(key, value)?,
            "max_iterations" => self.solver.max_iterations = num(key, value)?,
            "admm_rho0" => self.admm.rho0 = num(key, value)?,
            "admm_eps_rel" => self.admm.eps_rel = num(key, value)?,
            "admm_max_iterations" => self.admm.max_outer_iterations = num(key, value)?,
            "admm_fixed_iterations" => {
                self.admm.fixed_iterations = match value {
                    "none" | "off" | "0" => None,
                    v => Some(num(key, v)?),
                }
            }
            "admm_inner_tol" => self.admm.inner_tol = num(key, value)?,
            "threads" => self.admm.threads = Some(num(key, value)?),
            "gn_grad_tol" => self.gn.grad_tol = num(key, value)?,
            "gn_max_iterations" => self.gn.max_iterations = num(key, value)?,
            "gn_init_std" => self.gn.init_std = num(key, value)?,
            "local_restarts" => self.local_restarts = num(key, value)?,
            "sdp_max_n" => self.sdp_max_n = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Parse(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

/// `on`/`off`, `true`/`false`, `1`/`0`.
pub fn parse_switch(v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(Error::Parse(format!("expected on/off, got '{other}'"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub problem: Problem,
    pub solver: SolverKind,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "N_m")]
    pub n_m: usize,
    pub noise: f64,
    pub seed: u64,
    pub wall_time_s: f64,
    pub assembly_time_s: f64,
    pub objective: Option<f64>,
    pub evr: Option<f64>,
    pub pos_rmse: Option<f64>,
    pub rot_rmse: Option<f64>,
    pub iterations: usize,
    pub status: String,
}

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Optimal => "optimal",
        SolveStatus::MaxIter => "max_iter",
        SolveStatus::InfeasibleDetected => "infeasible",
        SolveStatus::NumericalFailure => "numerical_failure",
    }
}

impl ExperimentRecord {
    fn blank(instance: &Instance, solver: SolverKind) -> Self {
        Self {
            problem: instance.problem(),
            solver,
            n: instance.n(),
            n_m: instance.n_landmarks(),
            noise: instance.noise(),
            seed: instance.seed(),
            wall_time_s: 0.0,
            assembly_time_s: 0.0,
            objective: None,
            evr: None,
            pos_rmse: None,
            rot_rmse: None,
            iterations: 0,
            status: String::new(),
        }
    }

    fn set_accuracy(&mut self, acc: Accuracy) {
        self.pos_rmse = Some(acc.pos_rmse);
        self.rot_rmse = acc.rot_rmse;
    }
}

/// Outcome of a relaxation solve together with its record.
pub struct RelaxationRun {
    pub record: ExperimentRecord,
    pub result: DsdpResult,
    pub estimate: Option<Vec<Vec<f64>>>,
}

/// Runs one relaxation solver (sdp, dsdp or dsdp-admm).
pub fn run_relaxation(instance: &Instance, solver: SolverKind, config: &ExperimentConfig) -> Result<RelaxationRun> {
    let problem = instance.lift(config.redundant)?;
    let mut rec = ExperimentRecord::blank(instance, solver);
    let result = match solver {
        SolverKind::Sdp => dsdp::solve_full(&problem, &config.solver)?,
        SolverKind::Dsdp => dsdp::solve_dsdp(&problem, &manual_chain_decomposition(&problem)?, &config.solver)?,
        SolverKind::DsdpAdmm => admm::run(&problem, &manual_chain_decomposition(&problem)?, &config.admm)?.result,
        SolverKind::Local | SolverKind::LocalGt => {
            return Err(Error::InvalidConfig(format!("{solver} is not a relaxation solver")))
        }
    };
    rec.wall_time_s = result.wall_time_s;
    rec.assembly_time_s = result.assembly_time_s;
    rec.objective = Some(result.objective);
    rec.iterations = result.solution.iterations;
    rec.status = status_name(result.solution.status).to_string();
    let estimate = match extract_state(&result, &problem) {
        Ok((raw, cert)) => {
            rec.evr = Some(cert.evr);
            rec.set_accuracy(accuracy(&raw, &instance.gt_raw(), instance.kind())?);
            Some(raw)
        }
        Err(e) => {
            rec.status = format!("{}; extraction: {e}", rec.status);
            None
        }
    };
    Ok(RelaxationRun {
        record: rec,
        result,
        estimate,
    })
}

/// Runs the local solver from ground truth or from a random start drawn
/// with `rng_seed`.
pub fn run_local(instance: &Instance, from_gt: bool, rng_seed: u64, gn: &GnConfig) -> Result<(ExperimentRecord, GnResult)> {
    let solver = if from_gt { SolverKind::LocalGt } else { SolverKind::Local };
    let mut cfg = gn.clone();
    cfg.init_mode = if from_gt { InitMode::GroundTruth } else { InitMode::RandomAroundGt };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let t0 = Instant::now();
    let res = match instance {
        Instance::Ctro(i) => {
            let init = local_gn::init_ctro(i, &cfg, None, &mut rng)?;
            local_gn::gn_ctro(i, &init, &cfg)?
        }
        Instance::Mw(i) => {
            let init = local_gn::init_mw(i, &cfg, None, &mut rng)?;
            local_gn::gn_mw(i, &init, &cfg)?
        }
    };
    let mut rec = ExperimentRecord::blank(instance, solver);
    rec.wall_time_s = t0.elapsed().as_secs_f64();
    rec.objective = Some(res.cost);
    rec.iterations = res.iterations;
    rec.status = if res.converged { "converged" } else { "max_iter" }.to_string();
    rec.set_accuracy(accuracy(&res.estimate, &instance.gt_raw(), instance.kind())?);
    Ok((rec, res))
}

fn failure_record(instance: &Instance, solver: SolverKind, e: &Error) -> ExperimentRecord {
    let mut rec = ExperimentRecord::blank(instance, solver);
    rec.status = format!("failed: {e}");
    rec
}

/// Seed of the `r`-th random restart on an instance.
fn restart_seed(instance_seed: u64, r: usize) -> u64 {
    instance_seed.wrapping_mul(1_000_003).wrapping_add(r as u64)
}

/// Every configured solver on one instance; failures become status rows.
/// `local` contributes one row per restart.
pub fn run_all(instance: &Instance, config: &ExperimentConfig) -> Vec<ExperimentRecord> {
    let mut out = Vec::new();
    for &solver in &config.solvers {
        match solver {
            SolverKind::Local => {
                for r in 0..config.local_restarts {
                    out.push(
                        run_local(instance, false, restart_seed(instance.seed(), r), &config.gn)
                            .map_or_else(|e| failure_record(instance, solver, &e), |x| x.0),
                    );
                }
            }
            SolverKind::LocalGt => out.push(
                run_local(instance, true, 0, &config.gn).map_or_else(|e| failure_record(instance, solver, &e), |x| x.0),
            ),
            SolverKind::Sdp if instance.n() > config.sdp_max_n => {}
            _ => out.push(
                run_relaxation(instance, solver, config)
                    .map_or_else(|e| failure_record(instance, solver, &e), |x| x.record),
            ),
        }
    }
    out
}

/// CSV sink that writes the versioned header comment first.
pub struct RecordWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{RECORD_HEADER_COMMENT}")?;
        Ok(Self {
            inner: csv::Writer::from_writer(out),
        })
    }

    pub fn write(&mut self, rec: &ExperimentRecord) -> Result<()> {
        self.inner.serialize(rec)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_records<R: std::io::Read>(input: R) -> Result<Vec<ExperimentRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn read_records_file(path: &Path) -> Result<Vec<ExperimentRecord>> {
    read_records(fs::File::open(path)?)
}

fn open_sink(path: Option<&Path>) -> Result<Option<RecordWriter<fs::File>>> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            Ok(Some(RecordWriter::new(fs::File::create(p)?)?))
        }
        None => Ok(None),
    }
}

/// One instance per size, solvers run sequentially. Rows are appended to
/// `sink` as they are produced.
pub fn run_timing_study(config: &ExperimentConfig, sink: Option<&Path>) -> Result<Vec<ExperimentRecord>> {
    config.validate()?;
    if config.sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("timing sizes must be sorted".into()));
    }
    let mut writer = open_sink(sink)?;
    let noise = config.noises[0];
    let mut records = Vec::new();
    for &n in &config.sizes {
        let rows = match generate(config.problem, n, config.n_landmarks, Some(noise), config.seed) {
            Ok(inst) => run_all(&inst, config),
            Err(e) => vec![ExperimentRecord {
                problem: config.problem,
                solver: config.solvers[0],
                n,
                n_m: config.n_landmarks,
                noise,
                seed: config.seed,
                wall_time_s: 0.0,
                assembly_time_s: 0.0,
                objective: None,
                evr: None,
                pos_rmse: None,
                rot_rmse: None,
                iterations: 0,
                status: format!("failed: {e}"),
            }],
        };
        for r in rows {
            if let Some(w) = writer.as_mut() {
                w.write(&r)?;
            }
            records.push(r);
        }
    }
    Ok(records)
}

/// `n_seeds` instances per noise level at the first configured size.
/// Instances run in parallel; rows are emitted in (noise, seed) order.
pub fn run_noise_study(config: &ExperimentConfig, sink: Option<&Path>) -> Result<Vec<ExperimentRecord>> {
    config.validate()?;
    if config.noises.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::InvalidConfig("noise levels must be non-negative".into()));
    }
    let mut writer = open_sink(sink)?;
    let n = config.sizes[0];
    let mut records = Vec::new();
    for &noise in &config.noises {
        let per_seed: Vec<Vec<ExperimentRecord>> = (0..config.n_seeds as u64)
            .into_par_iter()
            .map(|k| match generate(config.problem, n, config.n_landmarks, Some(noise), config.seed + k) {
                Ok(inst) => run_all(&inst, config),
                Err(e) => config
                    .solvers
                    .iter()
                    .map(|&s| ExperimentRecord {
                        problem: config.problem,
                        solver: s,
                        n,
                        n_m: config.n_landmarks,
                        noise,
                        seed: config.seed + k,
                        wall_time_s: 0.0,
                        assembly_time_s: 0.0,
                        objective: None,
                        evr: None,
                        pos_rmse: None,
                        rot_rmse: None,
                        iterations: 0,
                        status: format!("failed: {e}"),
                    })
                    .collect(),
            })
            .collect();
        for r in per_seed.into_iter().flatten() {
            if let Some(w) = writer.as_mut() {
                w.write(&r)?;
            }
            records.push(r);
        }
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            count: v.len(),
        }
    }
}

/// Per `(solver, noise)` aggregates of a noise study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub solver: SolverKind,
    pub noise: f64,
    pub evr: MeanStd,
    pub pos_rmse: MeanStd,
    pub rot_rmse: MeanStd,
}

pub fn summarize_noise(records: &[ExperimentRecord]) -> Vec<NoiseSummary> {
    let mut groups: BTreeMap<(SolverKind, u64), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.solver, r.noise.to_bits())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((solver, bits), rs)| NoiseSummary {
            solver,
            noise: f64::from_bits(bits),
            evr: MeanStd::of(rs.iter().filter_map(|r| r.evr)),
            pos_rmse: MeanStd::of(rs.iter().filter_map(|r| r.pos_rmse)),
            rot_rmse: MeanStd::of(rs.iter().filter_map(|r| r.rot_rmse)),
        })
        .collect()
}

/// Least-squares slope of `log(time)` against `log(N)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Mean wall time per `(solver, N)` over successful rows.
pub fn timing_series(records: &[ExperimentRecord]) -> BTreeMap<SolverKind, Vec<(usize, MeanStd, f64, f64)>> {
    let mut groups: BTreeMap<SolverKind, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.status.starts_with("failed")) {
        groups.entry(r.solver).or_default().entry(r.n).or_default().push(r.wall_time_s);
    }
    groups
        .into_iter()
        .map(|(s, by_n)| {
            let rows = by_n
                .into_iter()
                .map(|(n, ts)| {
                    let lo = ts.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = ts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (n, MeanStd::of(ts), lo, hi)
                })
                .collect();
            (s, rows)
        })
        .collect()
}

/// Writes plot-ready TSV files into `out_dir`: one timing series per solver
/// with `O(N)` and `O(N^3)` reference lines, and one noise series per
/// solver. Returns the paths written.
pub fn write_report(records: &[ExperimentRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: String, body: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    let series = timing_series(records);
    let mut anchor: Option<(f64, f64)> = None;
    for (solver, rows) in &series {
        let mut body = String::from("N\tmean_time_s\tstd_time_s\tmin_time_s\tmax_time_s\n");
        for (n, ms, lo, hi) in rows {
            body += &format!("{n}\t{:.6e}\t{:.6e}\t{lo:.6e}\t{hi:.6e}\n", ms.mean, ms.std);
        }
        if anchor.is_none() || *solver == SolverKind::Dsdp {
            if let Some((n, ms, _, _)) = rows.first() {
                anchor = Some((*n as f64, ms.mean));
            }
        }
        emit(format!("timing_{solver}.tsv"), body)?;
    }
    if let Some((n0, t0)) = anchor {
        let ns: Vec<usize> = series.values().flat_map(|r| r.iter().map(|x| x.0)).collect();
        let (lo, hi) = (
            ns.iter().copied().min().unwrap_or(1) as f64,
            ns.iter().copied().max().unwrap_or(1) as f64,
        );
        for (name, p) in [("linear", 1.0), ("cubic", 3.0)] {
            let mut body = String::from("N\ttime_s\n");
            for n in [lo, hi] {
                body += &format!("{n}\t{:.6e}\n", t0 * (n / n0).powf(p));
            }
            emit(format!("timing_ref_{name}.tsv"), body)?;
        }
    }
    let mut by_solver: BTreeMap<SolverKind, Vec<NoiseSummary>> = BTreeMap::new();
    for s in summarize_noise(records) {
        by_solver.entry(s.solver).or_default().push(s);
    }
    for (solver, rows) in by_solver {
        let mut body = String::from("noise\tmean_evr\tstd_evr\tmean_pos_rmse\tstd_pos_rmse\tmean_rot_rmse\tstd_rot_rmse\tcount\n");
        for s in rows {
            body += &format!(
                "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{}\n",
                s.noise, s.evr.mean, s.evr.std, s.pos_rmse.mean, s.pos_rmse.std, s.rot_rmse.mean, s.rot_rmse.std, s.pos_rmse.count
            );
        }
        emit(format!("noise_{solver}.tsv"), body)?;
    }
    Ok(written)
}

/// Study metadata written next to the records.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyMetadata {
    pub study: String,
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub note: String,
}

pub fn write_metadata(path: &Path, study: &str, config: &ExperimentConfig) -> Result<()> {
    let note = match study {
        "noise" => format!(
            "desk scale: N = {}, N_m = {}, {} seeds per noise level",
            config.sizes[0], config.n_landmarks, config.n_seeds
        ),
        _ => format!("desk scale: sizes {:?}, full SDP skipped above N = {}", config.sizes, config.sdp_max_n),
    };
    let meta = StudyMetadata {
        study: study.to_string(),
        schema_version: RECORD_SCHEMA_VERSION,
        config: config.clone(),
        note,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads every `*.csv` record file in `dir`.
pub fn read_record_dir(dir: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_records_file(&p)?);
    }
    Ok(out)
}

/// Reads the first line of a record file and checks the schema comment.
pub fn check_schema(path: &Path) -> Result<()> {
    let f = fs::File::open(path)?;
    let mut first = String::new();
    std::io::BufReader::new(f).read_line(&mut first)?;
    if first.trim_end() == RECORD_HEADER_COMMENT {
        Ok(())
    } else {
        Err(Error::Parse(format!("{}: missing or unknown schema header", path.display())))
    }
}
