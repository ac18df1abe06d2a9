//! The interior-point solver on a hand-built program: minimize tr(X)
//! subject to X[0,0] = 1 and X[0,1] = 0.5 over 2x2 PSD matrices. Also shows
//! the sparse text format and the iteration log.

use chordal_sdp::assembly::ConicProgram;
use chordal_sdp::solver::{program_from_dense, solve, SolverSettings};
use nalgebra::DMatrix;

fn main() -> chordal_sdp::error::Result<()> {
    let e00 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let e01 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let p = program_from_dense(&[2], &[DMatrix::identity(2, 2)], &[vec![(0, e00)], vec![(0, e01)]], &[1.0, 1.0])?;

    let s = solve(&p, &SolverSettings::default())?;
    println!("status {:?}, objective {:.8}", s.status, s.objective);
    println!("X = {}", s.primal[0].as_matrix());
    s.write_log_csv(std::io::stdout())?;

    let text = p.to_sparse_text();
    println!("--- sparse text ---\n{text}");
    let back = ConicProgram::from_sparse_text(&text)?;
    assert_eq!(back.blocks, p.blocks);
    Ok(())
}
