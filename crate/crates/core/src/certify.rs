//! Rank-one certificates, state extraction and accuracy metrics.

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dsdp::DsdpResult;
use crate::error::{Error, Result};
use crate::geometry::{chordal_distance, project_to_so3, vec_mat3};
use crate::model::{constraint_residuals, LiftedPoint, LiftedProblem, ProblemKind};
use crate::symcone::{eig_desc, SymMat};

/// Floor applied to the second eigenvalue, relative to the first.
pub const EVR_FLOOR: f64 = 1e-14;
/// Smallest admissible magnitude of the h entry of a unit eigenvector.
pub const H_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub evr: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    /// Largest |x^T A x - b| over the QCQP constraints at the extracted point.
    pub extraction_residual: f64,
    pub duality_gap: f64,
}

/// `(lambda0, lambda1)`, the two largest eigenvalues.
pub fn top_eigenvalues(x: &SymMat) -> (f64, f64) {
    let (vals, _) = eig_desc(x);
    (vals[0], if vals.len() > 1 { vals[1] } else { 0.0 })
}

/// `lambda0 / max(lambda1, 1e-14 lambda0)`.
pub fn evr(x: &SymMat) -> Result<f64> {
    let (l0, l1) = top_eigenvalues(x);
    if !(l0 > 0.0) {
        return Err(Error::DegenerateSolution(format!("largest eigenvalue {l0:.3e} is not positive")));
    }
    Ok(l0 / l1.max(EVR_FLOOR * l0))
}

/// Leading eigenvector scaled so its first (h) entry is 1.
pub fn h_normalized_leading(x: &SymMat) -> Result<DVector<f64>> {
    let (_, vecs) = eig_desc(x);
    let v = vecs.column(0).into_owned();
    if v[0].abs() < H_MIN {
        return Err(Error::ExtractionFailure(format!(
            "h entry of the leading eigenvector is {:.3e}",
            v[0]
        )));
    }
    Ok(&v / v[0])
}

/// Splits a full lifted vector (h first) into per-block vectors.
fn split_blocks(problem: &LiftedProblem, x: &DVector<f64>) -> Vec<DVector<f64>> {
    let offs = problem.block_offsets();
    problem
        .blocks
        .iter()
        .zip(offs)
        .map(|(b, o)| x.rows(o, b.var_dim()).into_owned())
        .collect()
}

/// Extracted lifted point (before any manifold projection).
pub fn extract_lifted(result: &DsdpResult, problem: &LiftedProblem) -> Result<LiftedPoint> {
    if result.is_full() {
        return Ok(LiftedPoint {
            h: 1.0,
            blocks: split_blocks(problem, &h_normalized_leading(&result.clique_matrices[0])?),
        });
    }
    let n = problem.n_blocks();
    let dims: Vec<usize> = problem.blocks.iter().map(|b| b.var_dim()).collect();
    let mut sums: Vec<DVector<f64>> = dims.iter().map(|&d| DVector::zeros(d)).collect();
    let mut counts = vec![0usize; n];
    let offsets = result.decomposition.local_offsets(&dims);
    for (t, m) in result.clique_matrices.iter().enumerate() {
        let v = h_normalized_leading(m)?;
        for (&b, &o) in &offsets[t] {
            sums[b] += v.rows(o, dims[b]);
            counts[b] += 1;
        }
    }
    Ok(LiftedPoint {
        h: 1.0,
        blocks: sums.into_iter().zip(counts).map(|(s, c)| s / c.max(1) as f64).collect(),
    })
}

/// Raw states from a lifted point; MW rotations are projected onto SO(3).
pub fn raw_from_lifted(point: &LiftedPoint, problem: &LiftedProblem) -> Vec<Vec<f64>> {
    let mut raw = point.raw_states(problem);
    if problem.kind == ProblemKind::Mw {
        for r in &mut raw {
            let c = project_to_so3(&Matrix3::from_column_slice(&r[..9]));
            r[..9].copy_from_slice(&vec_mat3(&c));
        }
    }
    raw
}

/// Raw states plus a certificate. For clique-decomposed results the EVR is
/// the minimum over cliques.
pub fn extract_state(result: &DsdpResult, problem: &LiftedProblem) -> Result<(Vec<Vec<f64>>, Certificate)> {
    let point = extract_lifted(result, problem)?;
    let residual = constraint_residuals(problem, &point)
        .iter()
        .fold(0.0f64, |a, r| a.max(r.abs()));
    let mut worst: Option<(f64, f64, f64)> = None;
    for m in &result.clique_matrices {
        let (l0, l1) = top_eigenvalues(m);
        let e = evr(m)?;
        if worst.is_none_or(|w| e < w.0) {
            worst = Some((e, l0, l1));
        }
    }
    let (e, l0, l1) = worst.ok_or_else(|| Error::ExtractionFailure("no clique matrices".into()))?;
    let cert = Certificate {
        evr: e,
        lambda0: l0,
        lambda1: l1,
        extraction_residual: residual,
        duality_gap: result.solution.residuals.gap,
    };
    Ok((raw_from_lifted(&point, problem), cert))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Positions (CT-RO) or translations (MW).
    pub pos_rmse: f64,
    pub vel_rmse: Option<f64>,
    pub rot_rmse: Option<f64>,
}

fn rmse(errs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = errs.fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// Euclidean errors for positions, velocities and translations; chordal
/// distance for rotations; each aggregated as RMSE over nodes.
pub fn accuracy(est: &[Vec<f64>], gt: &[Vec<f64>], kind: ProblemKind) -> Result<Accuracy> {
    if est.len() != gt.len() {
        return Err(Error::DimensionMismatch { expected: gt.len(), got: est.len() });
    }
    for (a, b) in est.iter().zip(gt) {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch { expected: b.len(), got: a.len() });
        }
    }
    let seg = |v: &[f64], r: std::ops::Range<usize>| Vector3::from_column_slice(&v[r]);
    Ok(match kind {
        ProblemKind::Ctro => Accuracy {
            pos_rmse: rmse(est.iter().zip(gt).map(|(a, b)| (seg(a, 0..3) - seg(b, 0..3)).norm())),
            vel_rmse: Some(rmse(est.iter().zip(gt).map(|(a, b)| (seg(a, 3..6) - seg(b, 3..6)).norm()))),
            rot_rmse: None,
        },
        ProblemKind::Mw => Accuracy {
            pos_rmse: rmse(est.iter().zip(gt).map(|(a, b)| (seg(a, 9..12) - seg(b, 9..12)).norm())),
            vel_rmse: None,
            rot_rmse: Some(rmse(est.iter().zip(gt).map(|(a, b)| {
                chordal_distance(&Matrix3::from_column_slice(&a[..9]), &Matrix3::from_column_slice(&b[..9]))
            }))),
        },
        ProblemKind::Generic => Accuracy {
            pos_rmse: rmse(est.iter().zip(gt).map(|(a, b)| {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
            })),
            vel_rmse: None,
            rot_rmse: None,
        },
    })
}
