//! Stereo-camera localization with and without the redundant rotation
//! constraints. At high pixel noise the plain lifting loses tightness.
//!
//!     cargo run --release --example mw_redundant_constraints -- 5.0

use chordal_sdp::certify::extract_state;
use chordal_sdp::chordal::manual_chain_decomposition;
use chordal_sdp::dsdp::solve_dsdp;
use chordal_sdp::mw::{lift_mw_with, simulate_seeded, MwConfig, MwLiftOptions};
use chordal_sdp::solver::SolverSettings;

fn main() -> chordal_sdp::error::Result<()> {
    let sigma: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    println!("pixel noise {sigma}");
    println!("seed  EVR(redundant)  EVR(plain)");
    for seed in 0..5 {
        let inst = simulate_seeded(&MwConfig::new(8, 8, seed).with_pixel_noise(sigma))?;
        let mut evr = Vec::new();
        for redundant in [true, false] {
            let p = lift_mw_with(&inst, MwLiftOptions { redundant, ..MwLiftOptions::default() })?;
            let r = solve_dsdp(&p, &manual_chain_decomposition(&p)?, &SolverSettings::default())?;
            evr.push(extract_state(&r, &p)?.1.evr);
        }
        println!("{seed:>4}  {:>14.2e}  {:>10.2e}", evr[0], evr[1]);
    }
    Ok(())
}
