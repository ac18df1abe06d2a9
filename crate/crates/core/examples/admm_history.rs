//! Consensus ADMM over the clique chain. Prints the residual history as CSV
//! and compares the final objective with the interior-point dSDP.
//!
//!     cargo run --release --example admm_history > history.csv

use chordal_sdp::admm::{run, AdmmConfig};
use chordal_sdp::chordal::manual_chain_decomposition;
use chordal_sdp::dsdp::solve_dsdp;
use chordal_sdp::mw::{lift_mw, simulate_seeded, MwConfig};
use chordal_sdp::solver::SolverSettings;

fn main() -> chordal_sdp::error::Result<()> {
    let inst = simulate_seeded(&MwConfig::new(4, 8, 1))?;
    let p = lift_mw(&inst)?;
    let dec = manual_chain_decomposition(&p)?;
    let cfg = AdmmConfig {
        max_outer_iterations: 60,
        eps_rel: 1e-6,
        ..AdmmConfig::default()
    };
    let out = run(&p, &dec, &cfg)?;
    out.state.write_history_csv(std::io::stdout())?;

    let reference = solve_dsdp(&p, &dec, &SolverSettings::default())?;
    eprintln!(
        "admm objective {:.6e} after {} iterations (converged: {}), dSDP {:.6e}",
        out.result.objective, out.state.iteration, out.converged, reference.objective
    );
    Ok(())
}
