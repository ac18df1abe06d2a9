//! End-to-end centralized solves: the full SDP and the clique-decomposed
//! program handed to the conic solver as one multi-block problem.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_dsdp, ConicProgram};
use crate::chordal::CliqueDecomposition;
use crate::error::Result;
use crate::model::LiftedProblem;
use crate::solver::{solve, ConicSolution, SolverSettings};
use crate::symcone::SymMat;

/// Entries of the lifted matrix known from the cliques, indexed by global
/// `(row, col)` with `row <= col`. Overlapping cliques are averaged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialMatrix {
    pub dim: usize,
    pub entries: BTreeMap<(usize, usize), f64>,
}

impl PartialMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries.get(&(i.min(j), i.max(j))).copied()
    }

    pub fn from_cliques(program: &ConicProgram, mats: &[SymMat], dim: usize) -> Self {
        let mut sum: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for (g, m) in program.global_index.iter().zip(mats) {
            for j in 0..g.len() {
                for i in 0..=j {
                    let key = (g[i].min(g[j]), g[i].max(g[j]));
                    let e = sum.entry(key).or_insert((0.0, 0));
                    e.0 += m.get(i, j);
                    e.1 += 1;
                }
            }
        }
        Self {
            dim,
            entries: sum.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
        }
    }

    /// Largest disagreement between cliques on a shared entry.
    pub fn max_overlap_disagreement(program: &ConicProgram, mats: &[SymMat]) -> f64 {
        let mut seen: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut worst = 0.0f64;
        for (g, m) in program.global_index.iter().zip(mats) {
            for j in 0..g.len() {
                for i in 0..=j {
                    let key = (g[i].min(g[j]), g[i].max(g[j]));
                    let v = m.get(i, j);
                    match seen.get(&key) {
                        Some(&prev) => worst = worst.max((prev - v).abs()),
                        None => {
                            seen.insert(key, v);
                        }
                    }
                }
            }
        }
        worst
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DsdpResult {
    pub solution: ConicSolution,
    pub decomposition: CliqueDecomposition,
    pub program: ConicProgram,
    pub clique_matrices: Vec<SymMat>,
    pub stitched: PartialMatrix,
    pub objective: f64,
    pub wall_time_s: f64,
    pub assembly_time_s: f64,
}

impl DsdpResult {
    pub fn is_full(&self) -> bool {
        self.clique_matrices.len() == 1
    }
}

/// The monolithic relaxation: a single clique holding every block.
pub fn solve_full(problem: &LiftedProblem, settings: &SolverSettings) -> Result<DsdpResult> {
    solve_dsdp(problem, &CliqueDecomposition::single(problem.n_blocks()), settings)
}

pub fn solve_dsdp(
    problem: &LiftedProblem,
    decomposition: &CliqueDecomposition,
    settings: &SolverSettings,
) -> Result<DsdpResult> {
    let t0 = Instant::now();
    let program = assemble_dsdp(problem, decomposition)?;
    let assembly_time_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let solution = solve(&program, settings)?;
    let wall_time_s = t1.elapsed().as_secs_f64();
    Ok(finish(problem, decomposition, program, solution, wall_time_s, assembly_time_s))
}

pub(crate) fn finish(
    problem: &LiftedProblem,
    decomposition: &CliqueDecomposition,
    program: ConicProgram,
    solution: ConicSolution,
    wall_time_s: f64,
    assembly_time_s: f64,
) -> DsdpResult {
    let clique_matrices = solution.primal.clone();
    let stitched = PartialMatrix::from_cliques(&program, &clique_matrices, problem.full_dim());
    DsdpResult {
        objective: solution.objective,
        solution,
        decomposition: decomposition.clone(),
        program,
        clique_matrices,
        stitched,
        wall_time_s,
        assembly_time_s,
    }
}
