#![allow(dead_code)]

use chordal_sdp::assembly::ConicProgram;
use chordal_sdp::local_gn::{LocalProblem, DOF};
use chordal_sdp::solver::program_from_dense;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&m + m.transpose()) * 0.5
}

pub fn random_pd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let f = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &f * f.transpose() + DMatrix::identity(n, n) * 0.5
}

pub fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// A program with a strictly feasible primal point `X0` and a strictly
/// feasible dual point `(y0, S0)`, so an optimal pair exists.
pub fn strictly_feasible(rng: &mut ChaCha8Rng) -> ConicProgram {
    let nb = rng.random_range(2..=4);
    let sides: Vec<usize> = (0..nb).map(|_| rng.random_range(1..=5)).collect();
    let total: usize = sides.iter().map(|n| n * (n + 1) / 2).sum();
    let m = rng.random_range(1..=total.min(12));
    let x0: Vec<DMatrix<f64>> = sides.iter().map(|&n| random_pd(n, rng)).collect();
    let s0: Vec<DMatrix<f64>> = sides.iter().map(|&n| random_pd(n, rng)).collect();
    let y0: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for _ in 0..m {
        let k = rng.random_range(1..=nb.min(2));
        let mut blocks: Vec<usize> = (0..nb).collect();
        for i in 0..nb {
            let j = rng.random_range(i..nb);
            blocks.swap(i, j);
        }
        let row: Vec<(usize, DMatrix<f64>)> = blocks[..k].iter().map(|&b| (b, random_sym(sides[b], rng))).collect();
        rhs.push(row.iter().map(|(b, a)| inner(a, &x0[*b])).sum());
        rows.push(row);
    }
    let mut cost = s0.clone();
    for (row, &y) in rows.iter().zip(&y0) {
        for (b, a) in row {
            cost[*b] += a * y;
        }
    }
    program_from_dense(&sides, &cost, &rows, &rhs).unwrap()
}

/// Central differences of every residual block along each coordinate of
/// the stacked update. Returns the worst error relative to `1 + |J|`.
pub fn jacobian_error<P: LocalProblem>(problem: &P, x: &[P::State]) -> f64 {
    let h = 1e-6;
    let base = problem.residuals(x);
    let n = DOF * problem.n_nodes();
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let mut d = DVector::zeros(n);
        d[k] = h;
        let plus = problem.residuals(&problem.retract(x, &d));
        let minus = problem.residuals(&problem.retract(x, &(-&d)));
        for ((b, p), m) in base.iter().zip(&plus).zip(&minus) {
            let Some(slot) = b.nodes.iter().position(|&node| node == k / DOF) else {
                continue;
            };
            let fd = (&p.r - &m.r) / (2.0 * h);
            let an = b.jac.column(DOF * slot + k % DOF);
            worst = worst.max((&fd - an).amax() / (1.0 + an.amax()));
        }
    }
    worst
}
