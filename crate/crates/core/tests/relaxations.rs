use chordal_sdp::certify::{accuracy, extract_state, raw_from_lifted, extract_lifted};
use chordal_sdp::chordal::{manual_chain_decomposition, psd_completable_check};
use chordal_sdp::ctro::{self, lift_ctro, CtroConfig};
use chordal_sdp::dsdp::{solve_dsdp, solve_full, DsdpResult, PartialMatrix};
use chordal_sdp::local_gn::{gn_ctro, GnConfig};
use chordal_sdp::model::{constraint_residuals, evaluate_cost, LiftedProblem, ProblemKind};
use chordal_sdp::mw::{self, lift_mw, lift_mw_with, MwConfig, MwLiftOptions};
use chordal_sdp::solver::SolverSettings;
use chordal_sdp::symcone::SymMat;
use nalgebra::DVector;

fn settings() -> SolverSettings {
    SolverSettings::default()
}

fn block_dims(p: &LiftedProblem) -> Vec<usize> {
    p.blocks.iter().map(|b| b.var_dim()).collect()
}

#[test]
fn noiseless_ctro_full_sdp_recovers_truth() {
    let inst = ctro::simulate_seeded(&CtroConfig::new(3, 6, 1).noiseless()).unwrap();
    let p = lift_ctro(&inst).unwrap();
    let r = solve_full(&p, &settings()).unwrap();
    // <C, X> cancels terms of size |C||X|, so zero is judged relative to them.
    let cx = r.program.cost[0].values().norm() * r.clique_matrices[0].frobenius_norm();
    assert!(r.objective.abs() < 1e-8 * cx, "{} vs {cx:e}", r.objective);
    let (raw, cert) = extract_state(&r, &p).unwrap();
    assert!(evaluate_cost(&p, &p.lift(&raw).unwrap()) < 1e-8);
    for (a, b) in raw.iter().zip(inst.gt_raw()) {
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    assert!(cert.evr > 1e10);
}

#[test]
fn noiseless_mw_objective_vanishes() {
    let inst = mw::simulate_seeded(&MwConfig::new(2, 6, 1).noiseless()).unwrap();
    let p = lift_mw(&inst).unwrap();
    let r = solve_full(&p, &settings()).unwrap();
    let cx = r.program.cost[0].values().norm() * r.clique_matrices[0].frobenius_norm();
    assert!(r.objective.abs() < 1e-8 * cx.max(1.0), "{}", r.objective);
    let (raw, _) = extract_state(&r, &p).unwrap();
    assert!(evaluate_cost(&p, &p.lift(&raw).unwrap()) < 1e-8);
}

#[test]
fn relaxation_lower_bounds_local_solution() {
    for seed in 0..3 {
        let inst = ctro::simulate_seeded(&CtroConfig::new(4, 6, seed)).unwrap();
        let p = lift_ctro(&inst).unwrap();
        let r = solve_full(&p, &settings()).unwrap();
        let gn = gn_ctro(&inst, &inst.gt_states, &GnConfig::default()).unwrap();
        let d = r.solution.dual_objective;
        assert!(gn.cost >= d - 1e-7 * (1.0 + d.abs()), "{} < {}", gn.cost, d);
        assert!(r.objective <= gn.cost + 1e-7 * (1.0 + gn.cost.abs()));
    }
}

#[test]
fn dsdp_matches_full_and_is_completable() {
    for p in [
        lift_ctro(&ctro::simulate_seeded(&CtroConfig::new(5, 6, 2)).unwrap()).unwrap(),
        lift_mw(&mw::simulate_seeded(&MwConfig::new(4, 6, 2)).unwrap()).unwrap(),
    ] {
        let dec = manual_chain_decomposition(&p).unwrap();
        let f = solve_full(&p, &settings()).unwrap();
        let d = solve_dsdp(&p, &dec, &settings()).unwrap();
        assert!((f.objective - d.objective).abs() / (1.0 + f.objective.abs()) <= 1e-6);
        let disagreement = PartialMatrix::max_overlap_disagreement(&d.program, &d.clique_matrices);
        let scale = d.clique_matrices.iter().map(|m| m.as_matrix().amax()).fold(0.0, f64::max);
        let tol = 1e-6 * scale.max(1.0);
        assert!(disagreement <= tol);
        assert!(psd_completable_check(&d.clique_matrices, &dec, &block_dims(&p), tol).unwrap());
        assert_eq!(d.stitched.get(0, 0).map(|h| (h - 1.0).abs() < 1e-6), Some(true));
    }
}

#[test]
fn dropping_redundant_rows_never_raises_the_bound() {
    for seed in 0..3 {
        let inst = mw::simulate_seeded(&MwConfig::new(3, 6, seed).with_pixel_noise(5.0)).unwrap();
        let on = lift_mw(&inst).unwrap();
        let off = lift_mw_with(&inst, MwLiftOptions { redundant: false, ..MwLiftOptions::default() }).unwrap();
        let a = solve_full(&on, &settings()).unwrap();
        let b = solve_full(&off, &settings()).unwrap();
        assert!(b.objective <= a.objective + 1e-6 * (1.0 + a.objective.abs()), "{} > {}", b.objective, a.objective);
    }
}

fn rank_one(result: &DsdpResult, x: &DVector<f64>) -> DsdpResult {
    let mut r = result.clone();
    r.clique_matrices = r
        .program
        .global_index
        .iter()
        .map(|g| {
            let v = DVector::from_iterator(g.len(), g.iter().map(|&i| x[i]));
            SymMat::outer(&v)
        })
        .collect();
    r
}

#[test]
fn rank_one_cliques_are_recovered_exactly() {
    let inst = mw::simulate_seeded(&MwConfig::new(4, 6, 3)).unwrap();
    let p = lift_mw(&inst).unwrap();
    let d = solve_dsdp(&p, &manual_chain_decomposition(&p).unwrap(), &settings()).unwrap();
    let x = p.lift(&inst.gt_raw()).unwrap().full();
    for sign in [1.0, -1.0] {
        let r = rank_one(&d, &(&x * sign * 2.0));
        let (raw, cert) = extract_state(&r, &p).unwrap();
        for (a, b) in raw.iter().zip(inst.gt_raw()) {
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        assert!(cert.evr >= 1e14);
        assert!(cert.extraction_residual < 1e-12);
    }
}

#[test]
fn tight_solutions_certify_their_cost() {
    let inst = ctro::simulate_seeded(&CtroConfig::new(4, 8, 5)).unwrap();
    let p = lift_ctro(&inst).unwrap();
    let r = solve_full(&p, &settings()).unwrap();
    let point = extract_lifted(&r, &p).unwrap();
    let raw = raw_from_lifted(&point, &p);
    let (_, cert) = extract_state(&r, &p).unwrap();
    assert!(cert.evr > 1e6);
    let lifted = p.lift(&raw).unwrap();
    let res = constraint_residuals(&p, &point);
    assert!(res.iter().all(|v| v.abs() < 1e-6), "{res:?}");
    let cost = ctro::nls_cost(&inst, &ctro::states_from_raw(&raw));
    assert!((cost - r.objective).abs() <= 1e-6 * (1.0 + r.objective.abs()));
    assert!((evaluate_cost(&p, &lifted) - cost).abs() <= 1e-9 * (1.0 + cost));
}

#[test]
fn accuracy_is_zero_at_truth() {
    let inst = ctro::simulate_seeded(&CtroConfig::new(3, 6, 0)).unwrap();
    let gt = inst.gt_raw();
    let acc = accuracy(&gt, &gt, ProblemKind::Ctro).unwrap();
    assert_eq!((acc.pos_rmse, acc.vel_rmse), (0.0, Some(0.0)));
    let mut off = gt.clone();
    for r in &mut off {
        r[0] += 3.0;
        r[1] += 4.0;
    }
    assert!((accuracy(&off, &gt, ProblemKind::Ctro).unwrap().pos_rmse - 5.0).abs() < 1e-12);
    assert!(accuracy(&off[..2], &gt, ProblemKind::Ctro).is_err());
}
