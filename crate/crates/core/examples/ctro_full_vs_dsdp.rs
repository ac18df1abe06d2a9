//! Range-only localization: solve the same instance with the full SDP and
//! with the clique-decomposed SDP, then certify and compare.
//!
//!     cargo run --release --example ctro_full_vs_dsdp -- 12 3

use chordal_sdp::certify::{accuracy, extract_state};
use chordal_sdp::chordal::manual_chain_decomposition;
use chordal_sdp::ctro::{lift_ctro, simulate_seeded, CtroConfig};
use chordal_sdp::dsdp::{solve_dsdp, solve_full};
use chordal_sdp::solver::SolverSettings;

fn main() -> chordal_sdp::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let inst = simulate_seeded(&CtroConfig::new(n, 8, seed))?;
    let problem = lift_ctro(&inst)?;
    let dec = manual_chain_decomposition(&problem)?;
    let settings = SolverSettings::default();

    println!("N = {n}, {} cliques, seed {seed}", dec.n_cliques());
    for (name, r) in [("full", solve_full(&problem, &settings)?), ("dsdp", solve_dsdp(&problem, &dec, &settings)?)] {
        let (raw, cert) = extract_state(&r, &problem)?;
        let acc = accuracy(&raw, &inst.gt_raw(), problem.kind)?;
        println!(
            "{name:>5}: objective {:.9e}  EVR {:.2e}  position RMSE {:.4}  {:.3} s  ({:?}, {} iterations)",
            r.objective, cert.evr, acc.pos_rmse, r.wall_time_s, r.solution.status, r.solution.iterations
        );
    }
    Ok(())
}
