//! Gauss-Newton from random initializations versus the certified lower
//! bound of the relaxation. Runs that stop above the bound are local minima.
//!
//!     cargo run --release --example local_solver_restarts -- 30

use chordal_sdp::ctro::{lift_ctro, simulate_seeded, CtroConfig, LandmarkLayout};
use chordal_sdp::dsdp::solve_full;
use chordal_sdp::local_gn::{gn_ctro, random_init_ctro, GnConfig};
use chordal_sdp::solver::SolverSettings;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> chordal_sdp::error::Result<()> {
    let restarts: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let mut cfg = CtroConfig::new(10, 4, 4);
    cfg.landmark_layout = LandmarkLayout::Planar;
    let inst = simulate_seeded(&cfg)?;
    let sdp = solve_full(&lift_ctro(&inst)?, &SolverSettings::default())?;
    let bound = sdp.solution.dual_objective;
    println!("relaxation bound {bound:.6e}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gn = GnConfig::default();
    let from_gt = gn_ctro(&inst, &inst.gt_states, &gn)?;
    println!("from ground truth: cost {:.6e}, {} iterations", from_gt.cost, from_gt.iterations);
    for k in 0..restarts {
        let r = gn_ctro(&inst, &random_init_ctro(&inst, 0.5, &mut rng), &gn)?;
        let excess = (r.cost - bound) / bound;
        println!("restart {k:>3}: cost {:.6e} ({:+.2}% over bound)", r.cost, 100.0 * excess);
    }
    Ok(())
}
