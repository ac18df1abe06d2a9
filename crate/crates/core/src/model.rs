//! The lifted QCQP as a factor graph: variable blocks, cost factors over one
//! or two blocks and single-block quadratic constraint factors.
//!
//! Every block's local vector is laid out as `[h, xi_k, l_k(xi_k)]`, with the
//! homogenization variable `h` at position 0. A relative factor over `(i, j)`
//! acts on `[h, xi_i, l_i, xi_j, l_j]`, sharing a single `h`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symcone::SymMat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    /// Continuous-time range-only localization.
    Ctro,
    /// Matrix-weighted SE(3) localization.
    Mw,
    Generic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarBlock {
    pub index: usize,
    pub state_dim: usize,
    pub lift_dim: usize,
    /// Names of the lifted coordinates, excluding `h`.
    pub labels: Vec<String>,
}

impl VarBlock {
    /// `1 + state_dim + lift_dim`.
    pub fn local_dim(&self) -> usize {
        1 + self.state_dim + self.lift_dim
    }

    /// Coordinates owned by the block (everything but `h`).
    pub fn var_dim(&self) -> usize {
        self.state_dim + self.lift_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Absolute(usize),
    Relative(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostFactor {
    pub scope: Scope,
    pub matrix: SymMat,
    /// The residual `e = B x` and weight `W` behind `matrix`, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<ResidualForm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualForm {
    pub b: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl CostFactor {
    /// `B^T W B` for a residual `e = B x` with information matrix `W`.
    pub fn from_residual(scope: Scope, b: &DMatrix<f64>, w: &DMatrix<f64>) -> Self {
        let q = b.transpose() * w * b;
        Self {
            scope,
            matrix: SymMat::from_matrix(q),
            residual: Some(ResidualForm { b: b.clone(), w: w.clone() }),
        }
    }

    /// `x' Q x`, evaluated as `e' W e` when the residual form is available.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match &self.residual {
            Some(r) => {
                let e = &r.b * x;
                e.dot(&(&r.w * &e))
            }
            None => self.matrix.quad_form(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Primary,
    Substitution,
    Redundant,
    Homogenization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintFactor {
    pub block: usize,
    pub matrix: SymMat,
    pub rhs: f64,
    pub kind: ConstraintKind,
}

impl ConstraintFactor {
    /// `x^T (e0 e0^T) x = 1` over a block of local dimension `dim`.
    pub fn homogenization(block: usize, dim: usize) -> Self {
        let mut a = SymMat::zeros(dim);
        a.set(0, 0, 1.0);
        Self {
            block,
            matrix: a,
            rhs: 1.0,
            kind: ConstraintKind::Homogenization,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftedProblem {
    pub kind: ProblemKind,
    pub blocks: Vec<VarBlock>,
    pub cost_factors: Vec<CostFactor>,
    pub constraint_factors: Vec<ConstraintFactor>,
    pub relative_scopes: Vec<(usize, usize)>,
}

impl LiftedProblem {
    /// Builds and validates a problem.
    pub fn new(
        kind: ProblemKind,
        blocks: Vec<VarBlock>,
        cost_factors: Vec<CostFactor>,
        constraint_factors: Vec<ConstraintFactor>,
        relative_scopes: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let p = Self {
            kind,
            blocks,
            cost_factors,
            constraint_factors,
            relative_scopes,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, b) in self.blocks.iter().enumerate() {
            if b.index != k {
                return Err(Error::InvalidShape(format!(
                    "block at position {k} carries index {}",
                    b.index
                )));
            }
            if b.labels.len() != b.var_dim() {
                return Err(Error::InvalidShape(format!(
                    "block {k} has {} labels for {} coordinates",
                    b.labels.len(),
                    b.var_dim()
                )));
            }
        }
        let n = self.blocks.len();
        for f in &self.cost_factors {
            let expected = self.scope_dim(f.scope)?;
            if f.matrix.dim() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    got: f.matrix.dim(),
                });
            }
            if let Scope::Relative(i, j) = f.scope {
                if !self.relative_scopes.contains(&(i, j)) {
                    return Err(Error::InvalidShape(format!(
                        "relative factor ({i}, {j}) missing from relative_scopes"
                    )));
                }
            }
        }
        for &(i, j) in &self.relative_scopes {
            if i >= j || j >= n {
                return Err(Error::InvalidShape(format!("bad relative scope ({i}, {j})")));
            }
        }
        let mut homog = vec![0usize; n];
        for c in &self.constraint_factors {
            if c.block >= n {
                return Err(Error::InvalidShape(format!("constraint on missing block {}", c.block)));
            }
            let expected = self.blocks[c.block].local_dim();
            if c.matrix.dim() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    got: c.matrix.dim(),
                });
            }
            if c.kind == ConstraintKind::Homogenization {
                homog[c.block] += 1;
            }
        }
        if let Some(k) = homog.iter().position(|&c| c != 1) {
            return Err(Error::InvalidShape(format!(
                "block {k} has {} homogenization constraints, expected 1",
                homog[k]
            )));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Local dimension of a factor scope (pair scopes share one `h`).
    pub fn scope_dim(&self, scope: Scope) -> Result<usize> {
        let get = |k: usize| {
            self.blocks
                .get(k)
                .ok_or_else(|| Error::InvalidShape(format!("scope references missing block {k}")))
        };
        Ok(match scope {
            Scope::Absolute(k) => get(k)?.local_dim(),
            Scope::Relative(i, j) => 1 + get(i)?.var_dim() + get(j)?.var_dim(),
        })
    }

    /// Offset of each block's first coordinate in the combined vector
    /// `[h, xi_1, l_1, ..., xi_N, l_N]`.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.blocks.len());
        let mut cur = 1;
        for b in &self.blocks {
            off.push(cur);
            cur += b.var_dim();
        }
        off
    }

    pub fn full_dim(&self) -> usize {
        1 + self.blocks.iter().map(VarBlock::var_dim).sum::<usize>()
    }

    pub fn constraints_of(&self, block: usize) -> impl Iterator<Item = &ConstraintFactor> {
        self.constraint_factors.iter().filter(move |c| c.block == block)
    }

    /// Lifts raw per-block states with the problem's built-in lifting rule.
    pub fn lift(&self, raw_states: &[Vec<f64>]) -> Result<LiftedPoint> {
        match self.kind {
            ProblemKind::Ctro => lift_point(self, raw_states, |_, s| vec![s[0] * s[0] + s[1] * s[1] + s[2] * s[2]]),
            ProblemKind::Mw | ProblemKind::Generic => lift_point(self, raw_states, |_, _| Vec::new()),
        }
    }
}

/// A point of the lifted space: the shared `h` and, per block, the
/// concatenation `[xi_k, l_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedPoint {
    pub h: f64,
    pub blocks: Vec<DVector<f64>>,
}

impl LiftedPoint {
    /// `x_k = [h, xi_k, l_k]`.
    pub fn local(&self, k: usize) -> DVector<f64> {
        let b = &self.blocks[k];
        let mut v = DVector::zeros(1 + b.len());
        v[0] = self.h;
        v.rows_mut(1, b.len()).copy_from(b);
        v
    }

    /// `x_ij = [h, xi_i, l_i, xi_j, l_j]`.
    pub fn pair(&self, i: usize, j: usize) -> DVector<f64> {
        let (bi, bj) = (&self.blocks[i], &self.blocks[j]);
        let mut v = DVector::zeros(1 + bi.len() + bj.len());
        v[0] = self.h;
        v.rows_mut(1, bi.len()).copy_from(bi);
        v.rows_mut(1 + bi.len(), bj.len()).copy_from(bj);
        v
    }

    /// Combined vector `[h, xi_1, l_1, ..., xi_N, l_N]`.
    pub fn full(&self) -> DVector<f64> {
        let len = 1 + self.blocks.iter().map(|b| b.len()).sum::<usize>();
        let mut v = DVector::zeros(len);
        v[0] = self.h;
        let mut off = 1;
        for b in &self.blocks {
            v.rows_mut(off, b.len()).copy_from(b);
            off += b.len();
        }
        v
    }

    pub fn scope(&self, scope: Scope) -> DVector<f64> {
        match scope {
            Scope::Absolute(k) => self.local(k),
            Scope::Relative(i, j) => self.pair(i, j),
        }
    }

    /// Raw states `xi_k` (lifted coordinates dropped).
    pub fn raw_states(&self, problem: &LiftedProblem) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .zip(&problem.blocks)
            .map(|(v, b)| v.as_slice()[..b.state_dim].to_vec())
            .collect()
    }
}

/// Lifts raw per-block states with `rule`, which returns `l_k(xi_k)`.
pub fn lift_point<F>(problem: &LiftedProblem, raw_states: &[Vec<f64>], rule: F) -> Result<LiftedPoint>
where
    F: Fn(&VarBlock, &[f64]) -> Vec<f64>,
{
    if raw_states.len() != problem.blocks.len() {
        return Err(Error::DimensionMismatch {
            expected: problem.blocks.len(),
            got: raw_states.len(),
        });
    }
    let mut blocks = Vec::with_capacity(raw_states.len());
    for (b, s) in problem.blocks.iter().zip(raw_states) {
        if s.len() != b.state_dim {
            return Err(Error::DimensionMismatch {
                expected: b.state_dim,
                got: s.len(),
            });
        }
        let l = rule(b, s);
        if l.len() != b.lift_dim {
            return Err(Error::DimensionMismatch {
                expected: b.lift_dim,
                got: l.len(),
            });
        }
        let mut v = Vec::with_capacity(b.var_dim());
        v.extend_from_slice(s);
        v.extend_from_slice(&l);
        blocks.push(DVector::from_vec(v));
    }
    Ok(LiftedPoint { h: 1.0, blocks })
}

/// `sum_k x_k^T Q_k x_k + sum_ij x_ij^T R_ij x_ij`.
pub fn evaluate_cost(problem: &LiftedProblem, p: &LiftedPoint) -> f64 {
    problem
        .cost_factors
        .iter()
        .map(|f| f.value(&p.scope(f.scope)))
        .sum()
}

/// `x_k^T A x_k - b` for every constraint factor, in factor order.
pub fn constraint_residuals(problem: &LiftedProblem, p: &LiftedPoint) -> Vec<f64> {
    problem
        .constraint_factors
        .iter()
        .map(|c| c.matrix.quad_form(&p.local(c.block)) - c.rhs)
        .collect()
}

/// Builds a symmetric matrix for the bilinear form `sum coef * x[p] * x[q]`.
pub(crate) fn bilinear(dim: usize, terms: &[(usize, usize, f64)]) -> SymMat {
    let mut a = SymMat::zeros(dim);
    for &(p, q, c) in terms {
        if p == q {
            a.add_sym(p, p, c);
        } else {
            a.add_sym(p, q, 0.5 * c);
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LiftedProblem {
        let blocks = vec![VarBlock {
            index: 0,
            state_dim: 2,
            lift_dim: 0,
            labels: vec!["a".into(), "b".into()],
        }];
        let mut q = SymMat::zeros(3);
        q.set(0, 0, 1.0);
        LiftedProblem::new(
            ProblemKind::Generic,
            blocks,
            vec![CostFactor {
                scope: Scope::Absolute(0),
                matrix: q,
                residual: None,
            }],
            vec![ConstraintFactor::homogenization(0, 3)],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn h_squared_cost() {
        let p = tiny();
        let x = p.lift(&[vec![3.0, -4.0]]).unwrap();
        assert_eq!(evaluate_cost(&p, &x), 1.0);
    }

    #[test]
    fn homogenization_residual() {
        let p = tiny();
        let mut x = p.lift(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(constraint_residuals(&p, &x), vec![0.0]);
        x.h = 2.0;
        assert_eq!(constraint_residuals(&p, &x), vec![3.0]);
    }

    #[test]
    fn validation_catches_problems() {
        let mut p = tiny();
        p.constraint_factors.push(ConstraintFactor::homogenization(0, 3));
        assert!(p.validate().is_err());
        let mut p = tiny();
        p.cost_factors[0].matrix = SymMat::zeros(4);
        assert!(matches!(p.validate(), Err(Error::DimensionMismatch { .. })));
        let p = tiny();
        assert!(matches!(p.lift(&[vec![1.0]]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn bilinear_form_matches_terms() {
        let a = bilinear(3, &[(0, 2, 1.0), (1, 1, -1.0)]);
        let x = DVector::from_vec(vec![2.0, 3.0, 5.0]);
        assert_eq!(a.quad_form(&x), 2.0 * 5.0 - 9.0);
    }
}
