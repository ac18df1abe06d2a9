//! A small timing sweep through the experiment harness, with log-log slopes
//! per solver.
//!
//!     cargo run --release --example timing_study

use chordal_sdp::harness::{loglog_slope, run_timing_study, timing_series, ExperimentConfig, Problem, SolverKind};

fn main() -> chordal_sdp::error::Result<()> {
    let mut cfg = ExperimentConfig::defaults(Problem::Ctro);
    cfg.sizes = vec![4, 8, 16, 32];
    cfg.solvers = vec![SolverKind::Sdp, SolverKind::Dsdp];
    let records = run_timing_study(&cfg, None)?;
    for (solver, rows) in timing_series(&records) {
        let pts: Vec<(f64, f64)> = rows.iter().map(|(n, t, _, _)| (*n as f64, t.mean)).collect();
        for (n, t) in &pts {
            println!("{solver:>5} N = {n:>3}: {t:.3} s");
        }
        if let Some(slope) = loglog_slope(&pts) {
            println!("{solver:>5} slope {slope:.2}");
        }
    }
    Ok(())
}
