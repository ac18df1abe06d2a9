//! Primal-dual interior-point solver for programs over products of PSD
//! cones with linear equalities and an optional isotropic quadratic term.
//!
//! Infeasible-start Mehrotra predictor-corrector with Nesterov-Todd scaling.
//! The Schur complement `M = A G A^T` is held in envelope storage, so
//! chain-structured clique programs factor in time linear in the number of
//! cliques.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::assembly::{ConicProgram, SparseRow};
use crate::error::{Error, Result};
use crate::linalg::Envelope;
use crate::symcone::{mat_from_slice, vech_entry, vech_into, vech_len, SymMat, SQRT_2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iterations: usize,
    pub verbosity: u8,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 100,
            verbosity: 0,
        }
    }
}

impl SolverSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidConfig("tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    InfeasibleDetected,
    NumericalFailure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub pres: f64,
    pub dres: f64,
    pub gap: f64,
    pub step: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `||A x - b|| / (1 + ||b||)`.
    pub primal: f64,
    /// `||c + P x - A^T y - s|| / (1 + ||c||)`.
    pub dual: f64,
    /// `|pobj - dobj| / (1 + |pobj|)`, in the program's own cost units.
    pub gap: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub primal: Vec<SymMat>,
    pub slack: Vec<SymMat>,
    /// One multiplier per row of the original program (0 for dropped rows).
    pub dual: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
    pub dropped_rows: Vec<usize>,
    pub log: Vec<IterationLog>,
}

impl ConicSolution {
    /// vech of every primal block.
    pub fn primal_vech(&self) -> Vec<DVector<f64>> {
        self.primal
            .iter()
            .map(|x| {
                let mut v = DVector::zeros(vech_len(x.dim()));
                vech_into(x.as_matrix(), v.as_mut_slice());
                v
            })
            .collect()
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Iteration log as CSV: `iter,pres,dres,gap,step`.
    pub fn write_log_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.log {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Capabilities {
    pub supports_quadratic_objective: bool,
    pub supports_multi_block: bool,
}

/// A conic backend. Implementations must be deterministic and reentrant.
pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;
    fn capabilities(&self) -> Capabilities;
    fn solve(&self, program: &ConicProgram, settings: &SolverSettings) -> Result<ConicSolution>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct InteriorPoint;

impl Backend for InteriorPoint {
    fn name(&self) -> &'static str {
        "ipm"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_quadratic_objective: true,
            supports_multi_block: true,
        }
    }

    fn solve(&self, program: &ConicProgram, settings: &SolverSettings) -> Result<ConicSolution> {
        solve(program, settings)
    }
}

#[derive(Clone, Debug)]
pub struct Presolved {
    pub program: ConicProgram,
    /// Original indices of the rows that were kept.
    pub kept: Vec<usize>,
    pub n_original: usize,
}

impl Presolved {
    pub fn dropped(&self) -> Vec<usize> {
        let mut keep = vec![false; self.n_original];
        for &k in &self.kept {
            keep[k] = true;
        }
        (0..self.n_original).filter(|&i| !keep[i]).collect()
    }

    /// Maps multipliers of the reduced program back to the original rows.
    pub fn reinflate_duals(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_original];
        for (&k, &v) in self.kept.iter().zip(y) {
            out[k] = v;
        }
        out
    }
}


const SCHUR_PIVOT_TOL: f64 = 1e-14;
const SCHUR_PIVOT_TOL_LOOSE: f64 = 1e-12;
/// A stalled pass within this factor of the tolerance is not retried.
const STALL_ACCEPT: f64 = 1e3;
const PRESOLVE_PIVOT_TOL: f64 = 1e-12;
const PRESOLVE_RHS_TOL: f64 = 1e-9;

fn row_blocks_first(rows: &[SparseRow], n_blocks: usize) -> Vec<usize> {
    let mut min_row = vec![usize::MAX; n_blocks];
    for (i, r) in rows.iter().enumerate() {
        for b in r.blocks() {
            min_row[b] = min_row[b].min(i);
        }
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| r.blocks().map(|b| min_row[b]).min().unwrap_or(i).min(i))
        .collect()
}

/// Removes numerically dependent rows (pivoted in the given order) and
/// checks that their right-hand sides are consistent with the rest.
pub fn presolve(program: &ConicProgram) -> Result<Presolved> {
    program.validate()?;
    let m = program.n_rows();
    let norms: Vec<f64> = program.rows.iter().map(|r| r.norm()).collect();
    let mut gram = Envelope::new(row_blocks_first(&program.rows, program.n_blocks()));
    let offsets: Vec<usize> = program
        .vech_dims()
        .iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let total: usize = program.vech_dims().iter().sum();
    let mut touching: Vec<Vec<(usize, f64)>> = vec![Vec::new(); total];
    for (i, r) in program.rows.iter().enumerate() {
        for &(b, k, v) in &r.entries {
            touching[offsets[b] + k].push((i, v / norms[i]));
        }
    }
    for list in &touching {
        for (a, &(i, vi)) in list.iter().enumerate() {
            for &(j, vj) in &list[..=a] {
                gram.add(i, j, vi * vj);
            }
        }
    }
    let mut factor = gram.clone();
    factor.cholesky_drop(PRESOLVE_PIVOT_TOL);
    let dropped: Vec<usize> = (0..m).filter(|&i| factor.dropped()[i]).collect();
    if !dropped.is_empty() {
        // Minimum-norm solution of the kept rows, then check the others.
        let mut y: Vec<f64> = program.rhs.iter().zip(&norms).map(|(b, n)| b / n).collect();
        factor.solve(&mut y);
        let scaled: Vec<f64> = y.iter().zip(&norms).map(|(v, n)| v / n).collect();
        let x = program.adjoint(&scaled);
        for &j in &dropped {
            let r = program.rows[j].dot(&x) - program.rhs[j];
            if r.abs() > PRESOLVE_RHS_TOL * (1.0 + program.rhs[j].abs()) {
                return Err(Error::InfeasibleInput(format!(
                    "row {j} depends on earlier rows but its rhs is off by {r:.3e}"
                )));
            }
        }
    }
    let kept: Vec<usize> = (0..m).filter(|&i| !factor.dropped()[i]).collect();
    let mut reduced = program.clone();
    reduced.rows = kept.iter().map(|&i| program.rows[i].clone()).collect();
    reduced.rhs = kept.iter().map(|&i| program.rhs[i]).collect();
    reduced.row_kinds = kept.iter().map(|&i| program.row_kinds[i]).collect();
    Ok(Presolved {
        program: reduced,
        kept,
        n_original: m,
    })
}

/// Upper-triangle matrix entries `(p, q, a)` of one row restricted to a block.
type BlockRow = Vec<(usize, usize, f64)>;

struct Prepared {
    sides: Vec<usize>,
    m: usize,
    /// Per block: rows touching it with their matrix entries.
    block_rows: Vec<Vec<(usize, BlockRow)>>,
    c: Vec<DMatrix<f64>>,
    rho: Vec<f64>,
    b: DVector<f64>,
    row_scale: Vec<f64>,
    cost_scale: f64,
    dscale: Vec<DVector<f64>>,
    envelope_first: Vec<usize>,
}

/// Symmetric diagonal scaling per block, `X = D Xs D`. Entries are keyed by
/// global variable so that blocks sharing a variable scale it identically.
/// Blocks with a quadratic term are left unscaled. `c` holds the dense cost
/// blocks of `p`.
fn diagonal_scaling(p: &ConicProgram, c: &[DMatrix<f64>]) -> Vec<DVector<f64>> {
    let nb = p.n_blocks();
    let rho = p.quad_cost.clone().unwrap_or_else(|| vec![0.0; nb]);
    let ones = || p.blocks.iter().map(|&n| DVector::from_element(n, 1.0)).collect();
    let consistent = p.global_index.len() == nb && p.global_index.iter().zip(&p.blocks).all(|(g, &n)| g.len() == n);
    if !consistent || rho.iter().any(|&r| r > 0.0) {
        return ones();
    }
    let n_global = p.global_index.iter().flatten().max().map_or(0, |m| m + 1);
    let mut diag = vec![0.0f64; n_global];
    for (g, cb) in p.global_index.iter().zip(c) {
        for (k, &gi) in g.iter().enumerate() {
            diag[gi] += cb[(k, k)].abs();
        }
    }
    let positive: Vec<f64> = diag.iter().copied().filter(|&d| d > 0.0).collect();
    if positive.is_empty() {
        return ones();
    }
    let floor = (positive.iter().map(|d| d.ln()).sum::<f64>() / positive.len() as f64).exp();
    let d: Vec<f64> = diag.iter().map(|&v| 1.0 / v.max(floor).sqrt()).collect();
    p.global_index
        .iter()
        .map(|g| DVector::from_iterator(g.len(), g.iter().map(|&gi| d[gi])))
        .collect()
}

impl Prepared {
    fn new(p: &ConicProgram) -> Self {
        let nb = p.n_blocks();
        let c_raw: Vec<DMatrix<f64>> = p
            .cost
            .iter()
            .zip(&p.blocks)
            .map(|(c, &n)| mat_from_slice(c.values().as_slice(), n))
            .collect();
        let dscale = diagonal_scaling(p, &c_raw);
        let c_diag: Vec<DMatrix<f64>> = c_raw
            .iter()
            .zip(&dscale)
            .map(|(c, d)| DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[(i, j)] * d[i] * d[j]))
            .collect();
        let mut row_scale = vec![0.0f64; p.n_rows()];
        let mut block_rows: Vec<Vec<(usize, BlockRow)>> = vec![Vec::new(); nb];
        for (i, r) in p.rows.iter().enumerate() {
            for &(b, k, v) in &r.entries {
                let (pp, qq) = vech_entry(k);
                let v = v * dscale[b][pp] * dscale[b][qq];
                row_scale[i] += v * v;
                let a = if pp == qq { v } else { v / SQRT_2 };
                match block_rows[b].last_mut() {
                    Some((ri, list)) if *ri == i => list.push((pp, qq, a)),
                    _ => block_rows[b].push((i, vec![(pp, qq, a)])),
                }
            }
        }
        for s in &mut row_scale {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        for rows in &mut block_rows {
            for (i, list) in rows.iter_mut() {
                for e in list.iter_mut() {
                    e.2 /= row_scale[*i];
                }
            }
        }
        let cmax = c_diag.iter().map(|c| c.amax()).fold(0.0, f64::max);
        let cost_scale = if cmax > 0.0 { cmax } else { 1.0 };
        let rho = p
            .quad_cost
            .clone()
            .unwrap_or_else(|| vec![0.0; nb])
            .into_iter()
            .map(|r| r / cost_scale)
            .collect();
        let b = DVector::from_iterator(p.n_rows(), p.rhs.iter().zip(&row_scale).map(|(b, s)| b / s));
        Self {
            sides: p.blocks.clone(),
            m: p.n_rows(),
            block_rows,
            c: c_diag.into_iter().map(|c| c / cost_scale).collect(),
            rho,
            b,
            row_scale,
            cost_scale,
            dscale,
            envelope_first: row_blocks_first(&p.rows, nb),
        }
    }

    fn apply_a(&self, x: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for (b, rows) in self.block_rows.iter().enumerate() {
            for (i, list) in rows {
                out[*i] += list
                    .iter()
                    .map(|&(p, q, a)| if p == q { a * x[b][(p, p)] } else { 2.0 * a * x[b][(p, q)] })
                    .sum::<f64>();
            }
        }
        out
    }

    fn apply_at(&self, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.block_rows
            .iter()
            .zip(&self.sides)
            .map(|(rows, &n)| {
                let mut z = DMatrix::zeros(n, n);
                for (i, list) in rows {
                    for &(p, q, a) in list {
                        z[(p, q)] += a * y[*i];
                        if p != q {
                            z[(q, p)] += a * y[*i];
                        }
                    }
                }
                z
            })
            .collect()
    }
}

/// NT scaling data of one block.
struct Scaling {
    lambda: DVector<f64>,
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    w: DMatrix<f64>,
    /// Eigen data of `W`, used when the block has a quadratic term.
    eig: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

fn nt_scaling(x: &DMatrix<f64>, s: &DMatrix<f64>, rho: f64) -> Option<Scaling> {
    let lx = Cholesky::new(x.clone())?.unpack();
    let ls = Cholesky::new(s.clone())?.unpack();
    let prod = ls.transpose() * &lx;
    let svd = SVD::new(prod, false, true);
    let v = svd.v_t?.transpose();
    let lambda = svd.singular_values;
    if lambda.iter().any(|l| !(*l > 0.0)) {
        return None;
    }
    let n = x.nrows();
    let inv_sqrt = DVector::from_iterator(n, lambda.iter().map(|l| 1.0 / l.sqrt()));
    let r = &lx * &v * DMatrix::from_diagonal(&inv_sqrt);
    let lx_inv = lx.solve_lower_triangular(&DMatrix::identity(n, n))?;
    let sqrt_l = DVector::from_iterator(n, lambda.iter().map(|l| l.sqrt()));
    let r_inv = DMatrix::from_diagonal(&sqrt_l) * v.transpose() * lx_inv;
    let w = sym(&r * r.transpose());
    let eig = if rho > 0.0 {
        let e = SymmetricEigen::new(w.clone());
        let om = e.eigenvalues;
        let gamma = DMatrix::from_fn(n, n, |k, l| {
            let p = om[k] * om[l];
            p / (1.0 + rho * p)
        });
        Some((e.eigenvectors, gamma))
    } else {
        None
    };
    Some(Scaling {
        lambda,
        r,
        r_inv,
        w,
        eig,
    })
}

impl Scaling {
    /// `(rho I + W^{-1} . W^{-1})^{-1}` applied to `z`.
    fn g_apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.eig {
            None => sym(&self.w * z * &self.w),
            Some((q, gamma)) => {
                let t = q.transpose() * z * q;
                sym(q * t.component_mul(gamma) * q.transpose())
            }
        }
    }

    /// Largest step keeping `Lambda + a D` PSD for a scaled direction `D`.
    fn max_step(&self, d: &DMatrix<f64>) -> f64 {
        let n = d.nrows();
        let s = DMatrix::from_fn(n, n, |i, j| d[(i, j)] / (self.lambda[i] * self.lambda[j]).sqrt());
        let e = SymmetricEigen::new(sym(s));
        let lo = e.eigenvalues.min();
        if lo < 0.0 {
            -1.0 / lo
        } else {
            f64::INFINITY
        }
    }
}

fn jordan(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    (a * b + b * a) * 0.5
}

/// Builds the Schur complement `A G A^T` in envelope storage.
fn schur(prep: &Prepared, scal: &[Scaling]) -> Envelope {
    let mut env = Envelope::new(prep.envelope_first.clone());
    for (b, rows) in prep.block_rows.iter().enumerate() {
        let sc = &scal[b];
        match &sc.eig {
            None => {
                let w = &sc.w;
                for (ii, (i, li)) in rows.iter().enumerate() {
                    for (j, lj) in &rows[..=ii] {
                        let mut acc = 0.0;
                        for &(p, q, a) in li {
                            let ca = if p == q { a } else { 2.0 * a };
                            for &(r, s, c) in lj {
                                let cc = if r == s { c } else { 2.0 * c };
                                acc += ca * cc * 0.5 * (w[(p, r)] * w[(q, s)] + w[(p, s)] * w[(q, r)]);
                            }
                        }
                        env.add(*i, *j, acc);
                    }
                }
            }
            Some((q, gamma)) => {
                let n = q.nrows();
                let transformed: Vec<DMatrix<f64>> = rows
                    .iter()
                    .map(|(_, list)| {
                        let mut t = DMatrix::zeros(n, n);
                        for &(p, r, a) in list {
                            let qp = q.row(p);
                            let qr = q.row(r);
                            let outer = qp.transpose() * qr;
                            if p == r {
                                t += outer * a;
                            } else {
                                t += (&outer + outer.transpose()) * a;
                            }
                        }
                        t.component_mul(gamma)
                    })
                    .collect();
                let raw: Vec<DMatrix<f64>> = rows
                    .iter()
                    .map(|(_, list)| {
                        let mut t = DMatrix::zeros(n, n);
                        for &(p, r, a) in list {
                            let outer = q.row(p).transpose() * q.row(r);
                            if p == r {
                                t += outer * a;
                            } else {
                                t += (&outer + outer.transpose()) * a;
                            }
                        }
                        t
                    })
                    .collect();
                for (ii, (i, _)) in rows.iter().enumerate() {
                    for (jj, (j, _)) in rows[..=ii].iter().enumerate() {
                        env.add(*i, *j, raw[ii].dot(&transformed[jj]));
                    }
                }
            }
        }
    }
    env
}

struct Direction {
    dx: Vec<DMatrix<f64>>,
    ds: Vec<DMatrix<f64>>,
    dy: DVector<f64>,
}

fn inner(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn frob(a: &[DMatrix<f64>]) -> f64 {
    a.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt()
}

/// Solves the scaled Newton system for a given complementarity target.
fn newton(
    prep: &Prepared,
    scal: &[Scaling],
    factor: &Envelope,
    rp: &DVector<f64>,
    rd: &[DMatrix<f64>],
    dc: &[DMatrix<f64>],
) -> Direction {
    // G_c = R^{-T} D_c R^{-1}; dX = G(A^T dy + G_c - R_d).
    let base: Vec<DMatrix<f64>> = scal
        .iter()
        .zip(dc)
        .zip(rd)
        .map(|((sc, d), r)| {
            let gc = sym(sc.r_inv.transpose() * d * &sc.r_inv);
            sc.g_apply(&(gc - r))
        })
        .collect();
    let mut rhs = rp - prep.apply_a(&base);
    factor.solve(rhs.as_mut_slice());
    let mut dy = rhs;
    let primal_step = |dy: &DVector<f64>| -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let aty = prep.apply_at(dy);
        let dx = scal.iter().zip(&aty).zip(&base).map(|((sc, a), b0)| sc.g_apply(a) + b0).collect();
        (aty, dx)
    };
    let (mut aty, mut dx) = primal_step(&dy);
    // Iterative refinement against the unfactored operator.
    let mut err = rp - prep.apply_a(&dx);
    for _ in 0..5 {
        let before = err.norm();
        if before <= 1e-15 * (1.0 + rp.norm()) {
            break;
        }
        let mut corr = err.clone();
        factor.solve(corr.as_mut_slice());
        let trial = &dy + corr;
        let (ta, tx) = primal_step(&trial);
        let terr = rp - prep.apply_a(&tx);
        if !(terr.norm() < before) {
            break;
        }
        (dy, aty, dx, err) = (trial, ta, tx, terr);
    }
    let ds: Vec<DMatrix<f64>> = dx
        .iter()
        .zip(&aty)
        .zip(rd)
        .zip(&prep.rho)
        .map(|(((dxb, a), r), &rho)| sym(r + dxb * rho - a))
        .collect();
    Direction { dx, ds, dy }
}

struct Iterate {
    x: Vec<DMatrix<f64>>,
    s: Vec<DMatrix<f64>>,
    y: DVector<f64>,
}

struct Metrics {
    res: Residuals,
    pobj: f64,
    dobj: f64,
    rp: DVector<f64>,
    rd: Vec<DMatrix<f64>>,
    mu: f64,
}

fn metrics(prep: &Prepared, it: &Iterate, norm_b: f64, norm_c: f64, nu: f64) -> Metrics {
    let rp = &prep.b - prep.apply_a(&it.x);
    let aty = prep.apply_at(&it.y);
    let rd: Vec<DMatrix<f64>> = (0..prep.sides.len())
        .map(|b| &prep.c[b] + &it.x[b] * prep.rho[b] - &aty[b] - &it.s[b])
        .collect();
    let quad: f64 = it.x.iter().zip(&prep.rho).map(|(x, r)| 0.5 * r * x.norm_squared()).sum();
    let pobj = inner(&prep.c, &it.x) + quad;
    let dobj = prep.b.dot(&it.y) - quad;
    let mu = inner(&it.x, &it.s) / nu;
    Metrics {
        res: Residuals {
            primal: rp.norm() / (1.0 + norm_b),
            dual: frob(&rd) / (1.0 + norm_c),
            gap: (pobj - dobj).abs() * prep.cost_scale / (1.0 + pobj.abs() * prep.cost_scale),
        },
        pobj,
        dobj,
        rp,
        rd,
        mu,
    }
}

/// Presolves, then runs the interior-point method. When the first pass
/// stops short of the tolerance on a program without a quadratic term, the
/// program is recentred on the leading direction of each block and solved
/// again. If the result is still far from the tolerance, both passes are
/// repeated with a Schur factorization that drops near-singular pivots more
/// eagerly. The pass with the smallest residuals is returned.
pub fn solve(program: &ConicProgram, settings: &SolverSettings) -> Result<ConicSolution> {
    settings.validate()?;
    let pre = presolve(program)?;
    let mut best: Option<ConicSolution> = None;
    let mut spent = 0;
    for pivot_tol in [SCHUR_PIVOT_TOL, SCHUR_PIVOT_TOL_LOOSE] {
        let mut sol = solve_reduced(&pre.program, settings, pivot_tol)?;
        if !sol.is_optimal() && pre.program.quad_cost.is_none() {
            if let Some(rc) = Recentring::from_primal(&pre.program, &sol.primal) {
                let next = solve_reduced(&rc.apply(&pre.program), settings, pivot_tol)?;
                if next.is_optimal() || next.residuals.max() < sol.residuals.max() {
                    let mut next = rc.restore(next);
                    next.iterations += sol.iterations;
                    sol = next;
                }
            }
        }
        spent += sol.iterations;
        let done = sol.is_optimal();
        let close = sol.residuals.max() <= STALL_ACCEPT * settings.tol;
        if best.as_ref().is_none_or(|b| done || sol.residuals.max() < b.residuals.max()) {
            best = Some(sol);
        }
        if done || close {
            break;
        }
    }
    let mut sol = best.expect("at least one pass");
    sol.iterations = spent;
    sol.dual = pre.reinflate_duals(&sol.dual);
    sol.dropped_rows = pre.dropped();
    Ok(sol)
}

/// Per-block congruence `X = T Xr T^T` with `T = I + u e_0^T`, where `e_0 + u`
/// is the leading eigenvector of a previous iterate scaled to a unit first
/// entry. Blocks whose leading vector has a negligible first entry keep `T = I`.
struct Recentring {
    u: Vec<DVector<f64>>,
}

impl Recentring {
    /// Blocks sharing a global variable get the averaged shift for it.
    fn from_primal(program: &ConicProgram, primal: &[SymMat]) -> Option<Self> {
        let mut any = false;
        let mut u: Vec<DVector<f64>> = primal
            .iter()
            .map(|x| {
                let (_, vecs) = crate::symcone::eig_desc(x);
                let v = vecs.column(0);
                let mut u = DVector::zeros(x.dim());
                if v[0].abs() > 1e-6 * v.amax() && v.iter().all(|e| e.is_finite()) {
                    u = v / v[0];
                    u[0] = 0.0;
                    any = true;
                }
                u
            })
            .collect();
        let consistent = program.global_index.len() == u.len()
            && program.global_index.iter().zip(&u).all(|(g, ub)| g.len() == ub.len());
        if consistent {
            let mut sum: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
            for (g, ub) in program.global_index.iter().zip(&u) {
                if ub.iter().any(|&e| e != 0.0) {
                    for (k, &gi) in g.iter().enumerate().skip(1) {
                        let e = sum.entry(gi).or_insert((0.0, 0));
                        e.0 += ub[k];
                        e.1 += 1;
                    }
                }
            }
            for (g, ub) in program.global_index.iter().zip(&mut u) {
                if ub.iter().any(|&e| e != 0.0) {
                    for (k, &gi) in g.iter().enumerate().skip(1) {
                        let (s, c) = sum[&gi];
                        ub[k] = s / c as f64;
                    }
                }
            }
        }
        any.then_some(Self { u })
    }

    /// `T^T A T` for a symmetric `A` given by upper-triangle entries.
    fn transform_entries(&self, b: usize, entries: &[(usize, usize, f64)]) -> Vec<(usize, usize, f64)> {
        let u = &self.u[b];
        let n = u.len();
        // Only row/column 0 changes: (T^T A T)_{0q} = (A (e_0 + u))_q.
        let mut au = DVector::zeros(n);
        let mut out: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
        for &(p, q, a) in entries {
            au[p] += a * if q == 0 { 1.0 } else { u[q] };
            if p != q {
                au[q] += a * if p == 0 { 1.0 } else { u[p] };
            }
            if p != 0 {
                *out.entry((p, q)).or_insert(0.0) += a;
            }
        }
        // (0,0) = (e_0 + u)^T A (e_0 + u).
        let mut w = u.clone();
        w[0] = 1.0;
        let a00 = w.dot(&au);
        for q in 1..n {
            if au[q] != 0.0 {
                *out.entry((0, q)).or_insert(0.0) += au[q];
            }
        }
        out.insert((0, 0), a00);
        out.into_iter().filter(|&(_, v)| v != 0.0).map(|((p, q), v)| (p, q, v)).collect()
    }

    fn apply(&self, program: &ConicProgram) -> ConicProgram {
        let to_entries = |list: &mut dyn Iterator<Item = (usize, f64)>| -> Vec<(usize, usize, f64)> {
            list.map(|(k, v)| {
                let (p, q) = vech_entry(k);
                (p, q, if p == q { v } else { v / SQRT_2 })
            })
            .collect()
        };
        let to_vech = |(p, q, a): (usize, usize, f64)| (crate::symcone::vech_index(p, q), if p == q { a } else { a * SQRT_2 });
        let mut out = program.clone();
        for (b, c) in out.cost.iter_mut().enumerate() {
            let entries = to_entries(&mut c.values().iter().copied().enumerate());
            let mut vals = vec![0.0; c.len()];
            for (k, v) in self.transform_entries(b, &entries).into_iter().map(to_vech) {
                vals[k] = v;
            }
            *c = crate::symcone::VecSym::try_from(vals).expect("same length");
        }
        for row in &mut out.rows {
            let mut entries = Vec::new();
            for b in row.blocks().collect::<Vec<_>>() {
                let list = to_entries(
                    &mut row.entries.iter().filter(|e| e.0 == b).map(|&(_, k, v)| (k, v)),
                );
                entries.extend(self.transform_entries(b, &list).into_iter().map(to_vech).map(|(k, v)| (b, k, v)));
            }
            entries.sort_by_key(|e| (e.0, e.1));
            row.entries = entries;
        }
        out
    }

    /// `(T, T^{-1})` for block `b`.
    fn factors(&self, b: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let u = &self.u[b];
        let n = u.len();
        let mut t = DMatrix::identity(n, n);
        let mut t_inv = DMatrix::identity(n, n);
        for i in 1..n {
            t[(i, 0)] = u[i];
            t_inv[(i, 0)] = -u[i];
        }
        (t, t_inv)
    }

    fn restore(&self, mut sol: ConicSolution) -> ConicSolution {
        for (b, (x, s)) in sol.primal.iter_mut().zip(sol.slack.iter_mut()).enumerate() {
            let (t, t_inv) = self.factors(b);
            *x = SymMat::from_matrix(sym(&t * x.as_matrix() * t.transpose()));
            *s = SymMat::from_matrix(sym(t_inv.transpose() * s.as_matrix() * &t_inv));
        }
        sol
    }
}

fn solve_reduced(program: &ConicProgram, settings: &SolverSettings, pivot_tol: f64) -> Result<ConicSolution> {
    let prep = Prepared::new(program);
    let nb = prep.sides.len();
    let nu: f64 = prep.sides.iter().sum::<usize>() as f64;
    let norm_b = prep.b.norm();
    let norm_c = frob(&prep.c);

    // Standard scaled-identity starting point.
    let mut row_norm_block = vec![0.0f64; nb];
    let mut ratio = vec![0.0f64; nb];
    for (b, rows) in prep.block_rows.iter().enumerate() {
        for (i, list) in rows {
            let nrm = list
                .iter()
                .map(|&(p, q, a)| if p == q { a * a } else { 2.0 * a * a })
                .sum::<f64>()
                .sqrt();
            row_norm_block[b] = row_norm_block[b].max(nrm);
            ratio[b] = ratio[b].max((1.0 + prep.b[*i].abs()) / (1.0 + nrm));
        }
    }
    let mut it = Iterate {
        x: (0..nb)
            .map(|b| {
                let n = prep.sides[b] as f64;
                DMatrix::identity(prep.sides[b], prep.sides[b]) * 10f64.max(n.sqrt()).max(n * ratio[b])
            })
            .collect(),
        s: (0..nb)
            .map(|b| {
                let n = prep.sides[b] as f64;
                let eta = 10f64.max(n.sqrt()).max(row_norm_block[b]).max(prep.c[b].norm());
                DMatrix::identity(prep.sides[b], prep.sides[b]) * eta
            })
            .collect(),
        y: DVector::zeros(prep.m),
    };
    let start_norm = frob(&it.x) + frob(&it.s);

    let mut log = Vec::new();
    let mut status = SolveStatus::MaxIter;
    let mut best: Option<(f64, Iterate, Metrics)> = None;
    let mut iterations = 0;
    let mut stall = 0;
    let has_quad = prep.rho.iter().any(|&r| r > 0.0);

    for k in 0..=settings.max_iterations {
        let met = metrics(&prep, &it, norm_b, norm_c, nu);
        let score = met.res.max();
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            let snapshot = Iterate {
                x: it.x.clone(),
                s: it.s.clone(),
                y: it.y.clone(),
            };
            best = Some((score, snapshot, met_clone(&met)));
        }
        if met.res.primal <= settings.tol && met.res.dual <= settings.tol && met.res.gap <= settings.tol {
            status = SolveStatus::Optimal;
            iterations = k;
            break;
        }
        if k == settings.max_iterations {
            iterations = k;
            break;
        }
        if !score.is_finite() {
            status = SolveStatus::NumericalFailure;
            iterations = k;
            break;
        }
        let size = frob(&it.x) + frob(&it.s) + it.y.norm();
        if size > 1e14 * (1.0 + start_norm) {
            status = SolveStatus::InfeasibleDetected;
            iterations = k;
            break;
        }

        let Some(scal) = it
            .x
            .iter()
            .zip(&it.s)
            .zip(&prep.rho)
            .map(|((x, s), &rho)| nt_scaling(x, s, rho))
            .collect::<Option<Vec<_>>>()
        else {
            status = SolveStatus::NumericalFailure;
            iterations = k;
            break;
        };
        let mut factor = schur(&prep, &scal);
        factor.cholesky_guarded(pivot_tol);

        // Predictor.
        let dc_aff: Vec<DMatrix<f64>> = scal.iter().map(|sc| DMatrix::from_diagonal(&(-&sc.lambda))).collect();
        let aff = newton(&prep, &scal, &factor, &met.rp, &met.rd, &dc_aff);
        let scaled_dx: Vec<DMatrix<f64>> =
            scal.iter().zip(&aff.dx).map(|(sc, d)| sym(&sc.r_inv * d * sc.r_inv.transpose())).collect();
        let scaled_ds: Vec<DMatrix<f64>> =
            scal.iter().zip(&aff.ds).map(|(sc, d)| sym(sc.r.transpose() * d * &sc.r)).collect();
        let (mut ap, mut ad) = step_lengths(&scal, &scaled_dx, &scaled_ds);
        ap = ap.min(1.0);
        ad = ad.min(1.0);
        if has_quad {
            ap = ap.min(ad);
            ad = ap;
        }
        let xs_aff: f64 = (0..nb)
            .map(|b| (&it.x[b] + &aff.dx[b] * ap).dot(&(&it.s[b] + &aff.ds[b] * ad)))
            .sum();
        let mu_aff = (xs_aff / nu).max(0.0);
        let sigma = (mu_aff / met.mu).powi(3).clamp(0.0, 1.0);

        // Corrector.
        let dc: Vec<DMatrix<f64>> = scal
            .iter()
            .enumerate()
            .map(|(b, sc)| {
                let n = sc.lambda.len();
                let l2 = DMatrix::from_diagonal(&sc.lambda.map(|l| l * l));
                let rhs = DMatrix::identity(n, n) * (sigma * met.mu) - l2 - jordan(&scaled_dx[b], &scaled_ds[b]);
                DMatrix::from_fn(n, n, |i, j| 2.0 * rhs[(i, j)] / (sc.lambda[i] + sc.lambda[j]))
            })
            .collect();
        let dir = newton(&prep, &scal, &factor, &met.rp, &met.rd, &dc);
        let sdx: Vec<DMatrix<f64>> =
            scal.iter().zip(&dir.dx).map(|(sc, d)| sym(&sc.r_inv * d * sc.r_inv.transpose())).collect();
        let sds: Vec<DMatrix<f64>> =
            scal.iter().zip(&dir.ds).map(|(sc, d)| sym(sc.r.transpose() * d * &sc.r)).collect();
        let (mp, md) = step_lengths(&scal, &sdx, &sds);
        let gamma = 0.9 + 0.09 * ap.min(ad);
        let mut sp = (gamma * mp).min(1.0);
        let mut sd = (gamma * md).min(1.0);
        if has_quad {
            sp = sp.min(sd);
            sd = sp;
        }
        for b in 0..nb {
            it.x[b] = sym(&it.x[b] + &dir.dx[b] * sp);
            it.s[b] = sym(&it.s[b] + &dir.ds[b] * sd);
        }
        it.y += &dir.dy * sd;
        log.push(IterationLog {
            iter: k + 1,
            pres: met.res.primal,
            dres: met.res.dual,
            gap: met.res.gap,
            step: sp.min(sd),
        });
        if settings.verbosity > 0 {
            eprintln!(
                "{:3} pres {:.2e} dres {:.2e} gap {:.2e} mu {:.2e} step {:.3} {:.3} pobj {:.10e} dobj {:.10e}",
                k,
                met.res.primal,
                met.res.dual,
                met.res.gap,
                met.mu,
                sp,
                sd,
                met.pobj * prep.cost_scale,
                met.dobj * prep.cost_scale
            );
        }
        if sp.min(sd) < 1e-7 {
            stall += 1;
            if stall >= 3 {
                status = SolveStatus::NumericalFailure;
                iterations = k + 1;
                break;
            }
        } else {
            stall = 0;
        }
    }

    // Fall back to the best iterate unless the last one converged.
    let (final_it, final_met) = if status == SolveStatus::Optimal {
        let met = metrics(&prep, &it, norm_b, norm_c, nu);
        (it, met)
    } else {
        let (_, bi, bm) = best.expect("at least one iterate evaluated");
        (bi, bm)
    };

    let cs = prep.cost_scale;
    let dual: Vec<f64> = final_it
        .y
        .iter()
        .zip(&prep.row_scale)
        .map(|(y, s)| cs * y / s)
        .collect();
    Ok(ConicSolution {
        status,
        primal: final_it
            .x
            .iter()
            .zip(&prep.dscale)
            .map(|(x, d)| SymMat::from_matrix(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * d[i] * d[j])))
            .collect(),
        slack: final_it
            .s
            .iter()
            .zip(&prep.dscale)
            .map(|(s, d)| SymMat::from_matrix(DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| cs * s[(i, j)] / (d[i] * d[j]))))
            .collect(),
        dual,
        objective: final_met.pobj * cs,
        dual_objective: final_met.dobj * cs,
        residuals: final_met.res,
        iterations,
        dropped_rows: vec![],
        log,
    })
}

fn met_clone(m: &Metrics) -> Metrics {
    Metrics {
        res: m.res,
        pobj: m.pobj,
        dobj: m.dobj,
        rp: m.rp.clone(),
        rd: m.rd.clone(),
        mu: m.mu,
    }
}

fn step_lengths(scal: &[Scaling], dx: &[DMatrix<f64>], ds: &[DMatrix<f64>]) -> (f64, f64) {
    let mut ap = f64::INFINITY;
    let mut ad = f64::INFINITY;
    for ((sc, x), s) in scal.iter().zip(dx).zip(ds) {
        ap = ap.min(sc.max_step(x));
        ad = ad.min(sc.max_step(s));
    }
    (ap, ad)
}

/// Builds a program from dense per-row block matrices; handy for tests and
/// examples. `rows[i]` lists `(block, matrix)` pairs.
pub fn program_from_dense(
    sides: &[usize],
    cost: &[DMatrix<f64>],
    rows: &[Vec<(usize, DMatrix<f64>)>],
    rhs: &[f64],
) -> Result<ConicProgram> {
    use crate::assembly::RowKind;
    use crate::model::ConstraintKind;
    use crate::symcone::{vech, VecSym};
    if cost.len() != sides.len() || rows.len() != rhs.len() {
        return Err(Error::DimensionMismatch { expected: sides.len(), got: cost.len() });
    }
    let cost = cost
        .iter()
        .map(|c| vech(&SymMat::from_matrix(c.clone())))
        .collect::<Vec<VecSym>>();
    let rows: Vec<SparseRow> = rows
        .iter()
        .map(|r| {
            let mut entries = Vec::new();
            for (b, m) in r {
                let v = vech(&SymMat::from_matrix(m.clone()));
                for (k, &x) in v.values().iter().enumerate() {
                    if x != 0.0 {
                        entries.push((*b, k, x));
                    }
                }
            }
            entries.sort_by_key(|e| (e.0, e.1));
            SparseRow { entries }
        })
        .collect();
    let mut labels = vec!["h".to_string()];
    let mut global_index = Vec::new();
    for &n in sides {
        let mut g = vec![0];
        for _ in 1..n {
            g.push(labels.len());
            labels.push(format!("v{}", labels.len()));
        }
        global_index.push(g);
    }
    let p = ConicProgram {
        blocks: sides.to_vec(),
        cost,
        quad_cost: None,
        row_kinds: vec![RowKind::Node(ConstraintKind::Primary); rows.len()],
        rows,
        rhs: rhs.to_vec(),
        global_index,
        labels,
    };
    p.validate()?;
    Ok(p)
}
