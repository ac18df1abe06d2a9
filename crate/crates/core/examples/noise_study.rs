//! Tightness and accuracy as the range noise grows, summarized per solver.
//!
//!     cargo run --release --example noise_study

use chordal_sdp::harness::{run_noise_study, summarize_noise, ExperimentConfig, Problem, SolverKind};

fn main() -> chordal_sdp::error::Result<()> {
    let mut cfg = ExperimentConfig::defaults(Problem::Ctro);
    cfg.sizes = vec![8];
    cfg.noises = vec![0.01, 0.1, 0.5];
    cfg.n_seeds = 3;
    cfg.solvers = vec![SolverKind::Dsdp, SolverKind::LocalGt];
    let records = run_noise_study(&cfg, None)?;
    for s in summarize_noise(&records) {
        println!(
            "{:>8} noise {:<5} EVR {:.2e}  position RMSE {:.4} +- {:.4}",
            s.solver.name(),
            s.noise,
            s.evr.mean,
            s.pos_rmse.mean,
            s.pos_rmse.std
        );
    }
    Ok(())
}
