use chordal_sdp::assembly::{assemble_dsdp, assemble_full, clique_vech_from_full, homogenization_rows, RowKind};
use chordal_sdp::chordal::{
    aggregate_sparsity, chordal_decomposition_auto, manual_chain_decomposition, psd_completable_check,
    CliqueDecomposition, SparsityGraph,
};
use chordal_sdp::ctro::{self, lift_ctro, CtroConfig};
use chordal_sdp::error::Error;
use chordal_sdp::model::{LiftedProblem, ProblemKind};
use chordal_sdp::mw::{self, lift_mw, lift_mw_with, MwConfig, MwLiftOptions};
use chordal_sdp::symcone::{min_eig, SymMat};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ctro_problem(n: usize, seed: u64) -> LiftedProblem {
    lift_ctro(&ctro::simulate_seeded(&CtroConfig::new(n, 6, seed)).unwrap()).unwrap()
}

fn mw_problem(n: usize, seed: u64) -> LiftedProblem {
    lift_mw(&mw::simulate_seeded(&MwConfig::new(n, 6, seed)).unwrap()).unwrap()
}

fn path(n: usize) -> SparsityGraph {
    let mut g = SparsityGraph::new(n);
    for i in 0..n - 1 {
        g.add_edge(i, i + 1).unwrap();
    }
    g
}

fn block_dims(p: &LiftedProblem) -> Vec<usize> {
    p.blocks.iter().map(|b| b.var_dim()).collect()
}

#[test]
fn sparsity_of_chains() {
    let g = aggregate_sparsity(&ctro_problem(5, 0));
    assert_eq!(g, path(5));
    let mut no_rel = ctro_problem(3, 0);
    no_rel.cost_factors.retain(|f| matches!(f.scope, chordal_sdp::model::Scope::Absolute(_)));
    no_rel.relative_scopes.clear();
    assert!(aggregate_sparsity(&no_rel).edges.is_empty());
}

#[test]
fn manual_decomposition_shapes() {
    let d = manual_chain_decomposition(&ctro_problem(2, 0)).unwrap();
    assert_eq!(d.cliques, vec![vec![0, 1]]);
    assert!(d.tree_edges.is_empty());
    let d = manual_chain_decomposition(&ctro_problem(5, 0)).unwrap();
    assert_eq!(d.n_cliques(), 4);
    assert_eq!(d.tree_edges.len(), 3);
    d.validate(5).unwrap();
    assert_eq!(d.clique_sides(&[7; 5]), vec![15; 4]);
}

#[test]
fn automatic_decomposition_examples() {
    let d = chordal_decomposition_auto(&path(5));
    let mut c = d.cliques.clone();
    c.sort();
    assert_eq!(c, vec![vec![0, 1], vec![1, 2], vec![2, 3], vec![3, 4]]);
    d.validate(5).unwrap();

    let mut k4 = SparsityGraph::new(4);
    for a in 0..4 {
        for b in a + 1..4 {
            k4.add_edge(a, b).unwrap();
        }
    }
    assert_eq!(chordal_decomposition_auto(&k4).cliques, vec![vec![0, 1, 2, 3]]);

    let mut c4 = SparsityGraph::new(4);
    for (a, b) in [(0, 1), (1, 2), (2, 3), (0, 3)] {
        c4.add_edge(a, b).unwrap();
    }
    let d = chordal_decomposition_auto(&c4);
    assert_eq!(d.n_cliques(), 2);
    assert!(d.cliques.iter().all(|c| c.len() == 3));
    d.validate(4).unwrap();

    for n in 2..12 {
        assert!(chordal_decomposition_auto(&path(n)).cliques.iter().all(|c| c.len() <= 2));
    }
}

#[test]
fn decomposition_json_round_trip() {
    let d = manual_chain_decomposition(&ctro_problem(4, 1)).unwrap();
    assert_eq!(CliqueDecomposition::from_json(&d.to_json().unwrap()).unwrap(), d);
}

#[test]
fn objectives_agree_on_rank_one_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in [ctro_problem(5, 2), mw_problem(4, 2)] {
        let full = assemble_full(&p).unwrap();
        let dsdp = assemble_dsdp(&p, &manual_chain_decomposition(&p).unwrap()).unwrap();
        for _ in 0..5 {
            let x = DVector::from_fn(p.full_dim(), |i, _| if i == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
            let f = full.objective(&clique_vech_from_full(&full, &x));
            let d = dsdp.objective(&clique_vech_from_full(&dsdp, &x));
            assert!((f - d).abs() <= 1e-12 * (1.0 + f.abs()), "{f} vs {d}");
            // A consistent assignment satisfies every overlap row.
            let r = dsdp.residual(&clique_vech_from_full(&dsdp, &x));
            for (res, k) in r.iter().zip(&dsdp.row_kinds) {
                if *k == RowKind::Overlap {
                    assert!(res.abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn row_accounting() {
    for p in [ctro_problem(4, 0), ctro_problem(7, 1), mw_problem(5, 0)] {
        let full = assemble_full(&p).unwrap();
        let dec = manual_chain_decomposition(&p).unwrap();
        let dsdp = assemble_dsdp(&p, &dec).unwrap();
        let count = |prog: &chordal_sdp::assembly::ConicProgram, pred: &dyn Fn(&RowKind) -> bool| {
            prog.row_kinds.iter().filter(|k| pred(k)).count()
        };
        let overlap = count(&dsdp, &|k| *k == RowKind::Overlap);
        let t = dec.n_cliques();
        assert_eq!(dsdp.n_rows(), full.n_rows() + overlap + (t - 1));
        assert_eq!(
            count(&dsdp, &|k| matches!(k, RowKind::Node(_))),
            count(&full, &|k| matches!(k, RowKind::Node(_)))
        );
        assert_eq!(count(&dsdp, &|k| *k == RowKind::Homogenization), t);
        assert_eq!(count(&full, &|k| *k == RowKind::Homogenization), 1);
    }
    let p = ctro_problem(4, 0);
    let dsdp = assemble_dsdp(&p, &manual_chain_decomposition(&p).unwrap()).unwrap();
    assert_eq!(homogenization_rows(&dsdp).len(), 3);
    assert_eq!(homogenization_rows(&assemble_full(&p).unwrap()).len(), 1);
}

#[test]
fn redundant_toggle_keeps_blocks() {
    let inst = mw::simulate_seeded(&MwConfig::new(4, 6, 1)).unwrap();
    let on = lift_mw(&inst).unwrap();
    let off = lift_mw_with(&inst, MwLiftOptions { redundant: false, ..MwLiftOptions::default() }).unwrap();
    let (a, b) = (assemble_full(&on).unwrap(), assemble_full(&off).unwrap());
    assert_eq!(a.blocks, b.blocks);
    assert!(a.n_rows() > b.n_rows());
    let da = assemble_dsdp(&on, &manual_chain_decomposition(&on).unwrap()).unwrap();
    let db = assemble_dsdp(&off, &manual_chain_decomposition(&off).unwrap()).unwrap();
    assert_eq!(da.blocks, db.blocks);
}

#[test]
fn decomposition_must_cover_relative_costs() {
    let p = ctro_problem(4, 0);
    let bad = CliqueDecomposition {
        cliques: vec![vec![0, 1], vec![2, 3]],
        tree_edges: vec![],
        order: None,
    };
    assert!(assemble_dsdp(&p, &bad).is_err());
    let mut not_chain = ctro_problem(3, 0);
    not_chain.relative_scopes.push((0, 2));
    let extra = not_chain.cost_factors[not_chain.cost_factors.len() - 1].clone();
    let mut f = extra;
    f.scope = chordal_sdp::model::Scope::Relative(0, 2);
    not_chain.cost_factors.push(f);
    assert!(matches!(manual_chain_decomposition(&not_chain), Err(Error::NotAChain(0, 2))));
    assert_eq!(not_chain.kind, ProblemKind::Ctro);
}

fn clique_mats(p: &LiftedProblem, x: &DMatrix<f64>) -> Vec<SymMat> {
    let full = assemble_dsdp(p, &manual_chain_decomposition(p).unwrap()).unwrap();
    full.global_index
        .iter()
        .map(|g| SymMat::from_matrix(DMatrix::from_fn(g.len(), g.len(), |i, j| x[(g[i], g[j])])))
        .collect()
}

#[test]
fn completability_witness() {
    let p = ctro_problem(4, 0);
    let dec = manual_chain_decomposition(&p).unwrap();
    let dims = block_dims(&p);
    let x = DVector::from_fn(p.full_dim(), |i, _| (i as f64 * 0.37).sin() + if i == 0 { 1.0 } else { 0.0 });
    let xx = &x * x.transpose();
    let mats = clique_mats(&p, &xx);
    assert!(psd_completable_check(&mats, &dec, &dims, 1e-9).unwrap());

    // Perturb one clique to have min eigenvalue -1 while keeping the overlaps.
    let mut bad = mats.clone();
    // Block 0 occupies rows 1..8 of clique 0 and is shared with no other clique.
    let own = 1;
    let mut m = bad[0].clone().into_matrix();
    let shift = min_eig(&bad[0]) + 1.0 + m[(own, own)];
    m[(own, own)] -= shift;
    bad[0] = SymMat::from_matrix(m);
    assert!(!psd_completable_check(&bad, &dec, &dims, 1e-9).unwrap());

    // Disagreeing overlaps are reported.
    let mut skew = mats.clone();
    let mut m = skew[1].clone().into_matrix();
    m[(0, 1)] += 1.0;
    m[(1, 0)] += 1.0;
    skew[1] = SymMat::from_matrix(m);
    assert!(matches!(psd_completable_check(&skew, &dec, &dims, 1e-9), Err(Error::InconsistentInput(_))));
}

#[test]
fn psd_matrices_have_psd_cliques() {
    let p = ctro_problem(5, 0);
    let dec = manual_chain_decomposition(&p).unwrap();
    let dims = block_dims(&p);
    let n = p.full_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let r = rng.random_range(1..4);
        let f = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        let x = &f * f.transpose();
        let mats = clique_mats(&p, &x);
        let scale = x.norm();
        assert!(mats.iter().all(|m| min_eig(m) >= -1e-10 * scale));
        assert!(psd_completable_check(&mats, &dec, &dims, 1e-9).unwrap());
    }
}
