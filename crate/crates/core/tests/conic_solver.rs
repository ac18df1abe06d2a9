use chordal_sdp::assembly::{assemble_full, ConicProgram};
use chordal_sdp::mw::{self, lift_mw_with, MwConfig, MwLiftOptions};
use chordal_sdp::solver::{presolve, program_from_dense, solve, Backend, InteriorPoint, SolveStatus, SolverSettings};
use chordal_sdp::symcone::{min_eig, vech, SymMat};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{inner, random_pd, random_sym, strictly_feasible};

/// A program whose optimum is a known strictly complementary pair: `X*`
/// and `S*` share an eigenbasis with disjoint supports.
fn complementary(rng: &mut ChaCha8Rng) -> (ConicProgram, Vec<DMatrix<f64>>) {
    let sides = [3usize, 4];
    let mut xs = Vec::new();
    let mut ss = Vec::new();
    for &n in &sides {
        let q = random_pd(n, rng).qr().q();
        let r = rng.random_range(1..n);
        let dx = DVector::from_fn(n, |i, _| if i < r { rng.random_range(0.5..2.0) } else { 0.0 });
        let ds = DVector::from_fn(n, |i, _| if i < r { 0.0 } else { rng.random_range(0.5..2.0) });
        xs.push(&q * DMatrix::from_diagonal(&dx) * q.transpose());
        ss.push(&q * DMatrix::from_diagonal(&ds) * q.transpose());
    }
    let total: usize = sides.iter().map(|n| n * (n + 1) / 2).sum();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut cost = ss.clone();
    for _ in 0..total - 2 {
        let row: Vec<(usize, DMatrix<f64>)> = (0..2).map(|b| (b, random_sym(sides[b], rng))).collect();
        let y = rng.random_range(-1.0..1.0);
        rhs.push(row.iter().map(|(b, a)| inner(a, &xs[*b])).sum());
        for (b, a) in &row {
            cost[*b] += a * y;
        }
        rows.push(row);
    }
    (program_from_dense(&sides, &cost, &rows, &rhs).unwrap(), xs)
}

#[test]
fn kkt_certificates_on_random_programs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let settings = SolverSettings::with_tol(1e-9);
    let tol = 1e-7;
    for case in 0..50 {
        let p = strictly_feasible(&mut rng);
        let s = solve(&p, &settings).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal, "case {case}");
        let x = s.primal_vech();
        let norm_b = DVector::from_column_slice(&p.rhs).norm();
        let norm_c = p.cost.iter().map(|c| c.values().norm_squared()).sum::<f64>().sqrt();
        let pres = DVector::from_vec(p.residual(&x)).norm();
        assert!(pres <= tol * (1.0 + norm_b), "case {case}: primal residual {pres:e}");
        let aty = p.adjoint(&s.dual);
        let dres = p
            .cost
            .iter()
            .zip(&aty)
            .zip(&s.slack)
            .map(|((c, a), sl)| (c.values() - a - vech(sl).values()).norm_squared())
            .sum::<f64>()
            .sqrt();
        assert!(dres <= tol * (1.0 + norm_c), "case {case}: dual residual {dres:e}");
        for (xb, sb) in s.primal.iter().zip(&s.slack) {
            assert!(min_eig(xb) >= -tol, "case {case}");
            assert!(min_eig(sb) >= -tol, "case {case}");
        }
        let pobj = p.objective(&x);
        let dobj: f64 = p.rhs.iter().zip(&s.dual).map(|(b, y)| b * y).sum();
        assert!((pobj - s.objective).abs() <= tol * (1.0 + pobj.abs()));
        assert!((pobj - dobj).abs() / (1.0 + pobj.abs()) <= tol, "case {case}: gap {pobj} {dobj}");
    }
}

#[test]
fn solves_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = strictly_feasible(&mut rng);
    let a = solve(&p, &SolverSettings::default()).unwrap();
    let b = InteriorPoint.solve(&p, &SolverSettings::default()).unwrap();
    assert_eq!(a.status, b.status);
    assert!((a.objective - b.objective).abs() <= 1e-12 * (1.0 + a.objective.abs()));
    assert!(InteriorPoint.capabilities().supports_quadratic_objective);
}

#[test]
fn cost_scaling_scales_the_objective_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..5 {
        let (p, xstar) = complementary(&mut rng);
        let mut q = p.clone();
        for c in &mut q.cost {
            *c = chordal_sdp::symcone::VecSym::new(c.values() * 1e3).unwrap();
        }
        let settings = SolverSettings::with_tol(1e-10);
        let a = solve(&p, &settings).unwrap();
        let b = solve(&q, &settings).unwrap();
        assert!((b.objective - 1e3 * a.objective).abs() <= 1e-7 * (1.0 + b.objective.abs()));
        for ((xa, xb), xs) in a.primal.iter().zip(&b.primal).zip(&xstar) {
            assert!((xa.as_matrix() - xs).amax() <= 1e-6);
            assert!((xa.as_matrix() - xb.as_matrix()).amax() <= 1e-7 * (1.0 + xa.as_matrix().amax()));
        }
    }
}

#[test]
fn worked_examples() {
    let e00 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let p = program_from_dense(&[2], &[DMatrix::identity(2, 2)], &[vec![(0, e00)]], &[1.0]).unwrap();
    let s = solve(&p, &SolverSettings::default()).unwrap();
    assert!(s.is_optimal());
    assert!((s.objective - 1.0).abs() < 1e-8);
    assert!((s.primal[0].as_matrix() - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).amax() < 1e-7);

    let c = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
    let p = program_from_dense(&[2], &[c], &[vec![(0, DMatrix::identity(2, 2))]], &[1.0]).unwrap();
    let s = solve(&p, &SolverSettings::default()).unwrap();
    assert!((s.objective - 1.0).abs() < 1e-8);
    assert!((s.primal[0].as_matrix() - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).amax() < 1e-7);
}

#[test]
fn presolve_drops_the_dependent_orthonormality_row() {
    let inst = mw::simulate_seeded(&MwConfig::new(1, 6, 0)).unwrap();
    let five = assemble_full(&lift_mw_with(&inst, MwLiftOptions::default()).unwrap()).unwrap();
    let six = assemble_full(
        &lift_mw_with(
            &inst,
            MwLiftOptions {
                redundant: true,
                all_row_orthonormality: true,
            },
        )
        .unwrap(),
    )
    .unwrap();
    assert_eq!(six.n_rows(), five.n_rows() + 1);
    assert_eq!(presolve(&five).unwrap().dropped().len(), 0);
    let pre = presolve(&six).unwrap();
    assert_eq!(pre.dropped().len(), 1);
    assert_eq!(pre.program.n_rows(), five.n_rows());
}

#[test]
fn dropped_rows_get_zero_multipliers_with_same_adjoint() {
    let e = |i: usize, j: usize| {
        let mut m = DMatrix::zeros(3, 3);
        m[(i, j)] = 1.0;
        m[(j, i)] = 1.0;
        m
    };
    let rows = vec![vec![(0, e(0, 0))], vec![(0, e(1, 1))], vec![(0, e(0, 0))], vec![(0, e(0, 1))]];
    let p = program_from_dense(&[3], &[DMatrix::identity(3, 3)], &rows, &[1.0, 2.0, 1.0, 0.5]).unwrap();
    let pre = presolve(&p).unwrap();
    assert_eq!(pre.dropped(), vec![2]);
    let s = solve(&p, &SolverSettings::default()).unwrap();
    assert!(s.is_optimal());
    assert_eq!(s.dual[2], 0.0);
    let reduced = solve(&pre.program, &SolverSettings::default()).unwrap();
    let full_adj = p.adjoint(&pre.reinflate_duals(&reduced.dual));
    let red_adj = pre.program.adjoint(&reduced.dual);
    assert!((&full_adj[0] - &red_adj[0]).amax() < 1e-12);
    assert_eq!(s.dropped_rows, vec![2]);
}

#[test]
fn log_and_solution_serialize() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = solve(&strictly_feasible(&mut rng), &SolverSettings::default()).unwrap();
    let mut buf = Vec::new();
    s.write_log_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("iter,pres,dres,gap,step"));
    assert_eq!(text.lines().count(), s.log.len() + 1);
    let _: SymMat = s.primal[0].clone();
}

#[test]
fn sparse_text_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = strictly_feasible(&mut rng);
    let back = ConicProgram::from_sparse_text(&p.to_sparse_text()).unwrap();
    assert_eq!(back.blocks, p.blocks);
    assert_eq!(back.rhs.len(), p.rhs.len());
    let a = solve(&p, &SolverSettings::default()).unwrap();
    let b = solve(&back, &SolverSettings::default()).unwrap();
    assert!((a.objective - b.objective).abs() < 1e-9 * (1.0 + a.objective.abs()));
}
