//! Consensus ADMM over the clique tree.
//!
//! Each clique keeps its own PSD matrix `c_t`; a consensus vector `z` holds
//! one value per lifted entry `(g_i, g_j)` of the aggregate pattern, and
//! `S^t z` reads the entries of clique `t` out of it. One outer iteration is
//!
//! ```text
//! c_t <- argmin  q_t'c - lambda_t'c + rho/2 ||S^t z - c||^2   (PSD, A_t c = b_t)
//! z   <- mean over cliques of (c_t - lambda_t / rho)
//! lambda_t <- lambda_t + rho (S^t z - c_t)
//! ```
//!
//! followed by the residual-balancing penalty update.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_dsdp, ConicProgram, RowKind};
use crate::chordal::CliqueDecomposition;
use crate::dsdp::{finish, DsdpResult};
use crate::error::{Error, Result};
use crate::model::LiftedProblem;
use crate::solver::{solve, ConicSolution, Residuals, SolveStatus, SolverSettings};
use crate::symcone::{mat_from_slice, vech_entry, vech_len, SymMat, VecSym};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "CHORDAL_SDP_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub rho0: f64,
    pub mu: f64,
    pub tau_scale: f64,
    pub eps_rel: f64,
    pub max_outer_iterations: usize,
    /// Run exactly this many outer iterations, ignoring the stopping test.
    pub fixed_iterations: Option<usize>,
    pub inner_tol: f64,
    /// Worker threads; `None` defers to `CHORDAL_SDP_THREADS`, then rayon's default.
    pub threads: Option<usize>,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho0: 1.0,
            mu: 10.0,
            tau_scale: 2.0,
            eps_rel: 1e-10,
            max_outer_iterations: 10,
            fixed_iterations: None,
            inner_tol: 1e-3,
            threads: None,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho0 > 0.0) {
            return Err(Error::InvalidConfig(format!("rho0 must be positive, got {}", self.rho0)));
        }
        if !(self.mu > 1.0) || !(self.tau_scale > 1.0) {
            return Err(Error::InvalidConfig("mu and tau_scale must exceed 1".into()));
        }
        if !(self.eps_rel > 0.0) || !(self.inner_tol > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.fixed_iterations == Some(0) || (self.fixed_iterations.is_none() && self.max_outer_iterations == 0) {
            return Err(Error::InvalidConfig("at least one outer iteration is required".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("thread count must be positive".into()));
        }
        Ok(())
    }

    fn thread_count(&self) -> Option<usize> {
        self.threads.or_else(|| {
            std::env::var(THREADS_ENV)
                .ok()
                .and_then(|v| v.trim().parse().ok())
                .filter(|&n: &usize| n > 0)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub iter: usize,
    pub rho: f64,
    pub pri_res: f64,
    pub dual_res: f64,
    pub objective: f64,
}

/// Maps the vech entries of every clique to consensus indices.
#[derive(Clone, Debug)]
pub struct ConsensusMap {
    /// `index[t][k]` is the consensus slot of vech entry `k` of clique `t`.
    pub index: Vec<Vec<usize>>,
    /// How many cliques hold each slot.
    pub multiplicity: Vec<usize>,
    /// Global `(row, col)` pair behind each slot.
    pub pairs: Vec<(usize, usize)>,
}

impl ConsensusMap {
    pub fn new(program: &ConicProgram) -> Self {
        let mut slots: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut pairs = Vec::new();
        let mut multiplicity = Vec::new();
        let index = program
            .global_index
            .iter()
            .map(|g| {
                (0..vech_len(g.len()))
                    .map(|k| {
                        let (p, q) = vech_entry(k);
                        let key = (g[p].min(g[q]), g[p].max(g[q]));
                        let next = pairs.len();
                        let s = *slots.entry(key).or_insert(next);
                        if s == next {
                            pairs.push(key);
                            multiplicity.push(0);
                        }
                        multiplicity[s] += 1;
                        s
                    })
                    .collect()
            })
            .collect();
        Self {
            index,
            multiplicity,
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `S^t z`.
    pub fn gather(&self, t: usize, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.index[t].len(), self.index[t].iter().map(|&s| z[s]))
    }
}

#[derive(Clone, Debug)]
pub struct AdmmState {
    pub c: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    pub z: DVector<f64>,
    pub rho: f64,
    pub iteration: usize,
    pub history: Vec<ResidualRecord>,
}

impl AdmmState {
    pub fn new(program: &ConicProgram, map: &ConsensusMap, rho: f64) -> Self {
        let zeros: Vec<DVector<f64>> = program.vech_dims().iter().map(|&d| DVector::zeros(d)).collect();
        Self {
            c: zeros.clone(),
            lambda: zeros,
            z: DVector::zeros(map.len()),
            rho,
            iteration: 0,
            history: Vec::new(),
        }
    }

    /// Residual history as CSV: `iter,rho,pri_res,dual_res,objective`.
    pub fn write_history_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.history {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Single-clique program holding the cost, node and homogenization rows of
/// clique `t` (overlap rows are dropped; consensus replaces them).
pub fn clique_program(program: &ConicProgram, t: usize) -> ConicProgram {
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut kinds = Vec::new();
    for ((r, &b), &k) in program.rows.iter().zip(&program.rhs).zip(&program.row_kinds) {
        if k == RowKind::Overlap || r.entries.is_empty() || r.entries.iter().any(|e| e.0 != t) {
            continue;
        }
        let mut r = r.clone();
        for e in &mut r.entries {
            e.0 = 0;
        }
        rows.push(r);
        rhs.push(b);
        kinds.push(k);
    }
    ConicProgram {
        blocks: vec![program.blocks[t]],
        cost: vec![program.cost[t].clone()],
        quad_cost: None,
        rows,
        rhs,
        row_kinds: kinds,
        global_index: vec![program.global_index[t].clone()],
        labels: program.labels.clone(),
    }
}

/// Clique update: the c-dependent part of the augmented Lagrangian,
/// `(q_t - lambda_t - rho S^t z)'c + rho/2 ||c||^2`, over the clique's
/// feasible set.
pub fn clique_subproblem(
    base: &ConicProgram,
    sz: &DVector<f64>,
    lambda: &DVector<f64>,
    rho: f64,
    settings: &SolverSettings,
) -> Result<ConicSolution> {
    let mut p = base.clone();
    let lin = base.cost[0].values() - lambda - sz * rho;
    p.cost = vec![VecSym::new(lin)?];
    p.quad_cost = Some(vec![rho]);
    let sol = solve(&p, settings)?;
    if sol.primal.iter().any(|x| !x.is_all_finite()) {
        return Err(Error::NumericalFailure("clique subproblem returned non-finite iterate".into()));
    }
    Ok(sol)
}

/// Consensus step: each slot is the mean of `c_t - lambda_t / rho` over the
/// cliques holding it.
pub fn consensus_update(map: &ConsensusMap, c: &[DVector<f64>], lambda: &[DVector<f64>], rho: f64) -> DVector<f64> {
    let mut z = DVector::zeros(map.len());
    for ((idx, ct), lt) in map.index.iter().zip(c).zip(lambda) {
        for (k, &s) in idx.iter().enumerate() {
            z[s] += ct[k] - lt[k] / rho;
        }
    }
    for (zs, &m) in z.iter_mut().zip(&map.multiplicity) {
        *zs /= m as f64;
    }
    z
}

/// `lambda_t + rho (S^t z - c_t)`.
pub fn dual_update(lambda: &DVector<f64>, sz: &DVector<f64>, c: &DVector<f64>, rho: f64) -> DVector<f64> {
    lambda + (sz - c) * rho
}

/// Residual balancing. The multipliers are kept in unscaled form, so they
/// need no adjustment when `rho` changes.
pub fn penalty_adapt(rho: f64, pri_res: f64, dual_res: f64, mu: f64, tau: f64) -> f64 {
    if pri_res > mu * dual_res {
        rho * tau
    } else if dual_res > mu * pri_res {
        rho / tau
    } else {
        rho
    }
}

fn stack_norm<'a>(vs: impl Iterator<Item = &'a DVector<f64>>) -> f64 {
    vs.map(|v| v.norm_squared()).sum::<f64>().sqrt()
}

pub struct AdmmOutput {
    pub result: DsdpResult,
    pub state: AdmmState,
    pub converged: bool,
}

/// Runs consensus ADMM from `z = 0`, `lambda = 0`.
pub fn run(problem: &LiftedProblem, decomposition: &CliqueDecomposition, config: &AdmmConfig) -> Result<AdmmOutput> {
    config.validate()?;
    let t0 = Instant::now();
    let program = assemble_dsdp(problem, decomposition)?;
    let assembly_time_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = config.thread_count() {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
    };
    let (state, converged) = pool.install(|| iterate(&program, config))?;
    let wall_time_s = t1.elapsed().as_secs_f64();

    let last = state.history.last().copied();
    let primal: Vec<SymMat> = state
        .c
        .iter()
        .zip(&program.blocks)
        .map(|(c, &n)| SymMat::from_matrix(mat_from_slice(c.as_slice(), n)))
        .collect();
    let objective: f64 = program.cost.iter().zip(&state.c).map(|(q, c)| q.values().dot(c)).sum();
    let solution = ConicSolution {
        status: if converged { SolveStatus::Optimal } else { SolveStatus::MaxIter },
        primal,
        slack: Vec::new(),
        dual: Vec::new(),
        objective,
        dual_objective: f64::NAN,
        residuals: Residuals {
            primal: last.map_or(f64::NAN, |r| r.pri_res),
            dual: last.map_or(f64::NAN, |r| r.dual_res),
            gap: f64::NAN,
        },
        iterations: state.iteration,
        dropped_rows: Vec::new(),
        log: Vec::new(),
    };
    let result = finish(problem, decomposition, program, solution, wall_time_s, assembly_time_s);
    Ok(AdmmOutput {
        result,
        state,
        converged,
    })
}

fn iterate(program: &ConicProgram, config: &AdmmConfig) -> Result<(AdmmState, bool)> {
    let map = ConsensusMap::new(program);
    let bases: Vec<ConicProgram> = (0..program.n_blocks()).map(|t| clique_program(program, t)).collect();
    let inner = SolverSettings::with_tol(config.inner_tol);
    let mut st = AdmmState::new(program, &map, config.rho0);
    let cap = config.fixed_iterations.unwrap_or(config.max_outer_iterations);
    let mut converged = false;

    while st.iteration < cap {
        let it = st.iteration;
        let rho = st.rho;
        let sz_old: Vec<DVector<f64>> = (0..bases.len()).map(|t| map.gather(t, &st.z)).collect();
        let new_c: Vec<DVector<f64>> = bases
            .par_iter()
            .enumerate()
            .map(|(t, base)| {
                let sol = clique_subproblem(base, &sz_old[t], &st.lambda[t], rho, &inner)?;
                Ok(sol.primal_vech().swap_remove(0))
            })
            .collect::<Result<_>>()
            .map_err(|e| Error::Admm {
                iteration: it,
                source: Box::new(e),
            })?;
        st.c = new_c;
        let z_old = std::mem::replace(&mut st.z, consensus_update(&map, &st.c, &st.lambda, rho));
        let sz: Vec<DVector<f64>> = (0..bases.len()).map(|t| map.gather(t, &st.z)).collect();
        st.lambda = st
            .lambda
            .iter()
            .zip(&sz)
            .zip(&st.c)
            .map(|((l, s), c)| dual_update(l, s, c, rho))
            .collect();

        let r: Vec<DVector<f64>> = sz.iter().zip(&st.c).map(|(s, c)| s - c).collect();
        let dz = &st.z - z_old;
        let s: Vec<DVector<f64>> = (0..bases.len()).map(|t| map.gather(t, &dz) * rho).collect();
        let pri_res = stack_norm(r.iter());
        let dual_res = stack_norm(s.iter());
        let objective: f64 = program.cost.iter().zip(&st.c).map(|(q, c)| q.values().dot(c)).sum();
        st.history.push(ResidualRecord {
            iter: it + 1,
            rho,
            pri_res,
            dual_res,
            objective,
        });
        st.iteration += 1;

        let eps_pri = config.eps_rel * stack_norm(sz.iter()).max(stack_norm(st.c.iter()));
        let eps_dual = config.eps_rel * stack_norm(st.lambda.iter());
        if pri_res <= eps_pri && dual_res <= eps_dual {
            converged = true;
            if config.fixed_iterations.is_none() {
                break;
            }
        }
        st.rho = penalty_adapt(rho, pri_res, dual_res, config.mu, config.tau_scale);
    }
    Ok((st, converged))
}
