//! Vectorized conic programs built from a [`LiftedProblem`]: the monolithic
//! SDP over `x = [h, y_1, ..., y_N]` and the clique-decomposed program with
//! overlap equalities and split node costs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::chordal::CliqueDecomposition;
use crate::error::{Error, Result};
use crate::model::{ConstraintKind, LiftedProblem, Scope};
use crate::symcone::{vech_index, vech_len, vech_scale, SymMat, VecSym};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Homogenization,
    Node(ConstraintKind),
    Overlap,
}

/// One equality row over the concatenated vech variables: `sum v * x[b][k]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseRow {
    /// `(block, vech index, value)`, sorted by block then index.
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseRow {
    pub fn blocks(&self) -> impl Iterator<Item = usize> + '_ {
        let mut last = None;
        self.entries.iter().filter_map(move |&(b, _, _)| {
            if last == Some(b) {
                None
            } else {
                last = Some(b);
                Some(b)
            }
        })
    }

    pub fn dot(&self, x: &[DVector<f64>]) -> f64 {
        self.entries.iter().map(|&(b, k, v)| v * x[b][k]).sum()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|e| e.2 * e.2).sum::<f64>().sqrt()
    }

    fn normalize(&mut self) {
        self.entries.sort_by_key(|e| (e.0, e.1));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len());
        for &(b, k, v) in &self.entries {
            match out.last_mut() {
                Some(last) if last.0 == b && last.1 == k => last.2 += v,
                _ => out.push((b, k, v)),
            }
        }
        out.retain(|e| e.2 != 0.0);
        self.entries = out;
    }
}

/// `min <c, x> + 1/2 sum_b rho_b ||x_b||^2  s.t.  A x = b,  x_b in PSD(n_b)`.
///
/// The quadratic term is isotropic per block; in vech coordinates
/// `||x_b||^2` is the squared Frobenius norm of the block matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    pub blocks: Vec<usize>,
    pub cost: Vec<VecSym>,
    pub quad_cost: Option<Vec<f64>>,
    pub rows: Vec<SparseRow>,
    pub rhs: Vec<f64>,
    pub row_kinds: Vec<RowKind>,
    /// For each block, the index of every matrix row/column in the full
    /// lifted vector (0 is h).
    pub global_index: Vec<Vec<usize>>,
    /// Semantic name of every global index.
    pub labels: Vec<String>,
}

impl ConicProgram {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn vech_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|&n| vech_len(n)).collect()
    }

    /// Names of the two lifted variables behind matrix entry `(i, j)` of
    /// `block`.
    pub fn entry_label(&self, block: usize, i: usize, j: usize) -> (String, String) {
        let g = &self.global_index[block];
        (self.labels[g[i]].clone(), self.labels[g[j]].clone())
    }

    pub fn validate(&self) -> Result<()> {
        let nb = self.blocks.len();
        if self.blocks.iter().any(|&n| n == 0) {
            return Err(Error::InvalidShape("block sides must be at least 1".into()));
        }
        if self.cost.len() != nb || self.global_index.len() != nb {
            return Err(Error::DimensionMismatch { expected: nb, got: self.cost.len() });
        }
        for (c, &n) in self.cost.iter().zip(&self.blocks) {
            if c.len() != vech_len(n) {
                return Err(Error::DimensionMismatch { expected: vech_len(n), got: c.len() });
            }
        }
        if let Some(q) = &self.quad_cost {
            if q.len() != nb || q.iter().any(|r| !(*r >= 0.0)) {
                return Err(Error::InvalidShape("quadratic weights must be one non-negative value per block".into()));
            }
        }
        if self.rhs.len() != self.rows.len() || self.row_kinds.len() != self.rows.len() {
            return Err(Error::DimensionMismatch {
                expected: self.rows.len(),
                got: self.rhs.len(),
            });
        }
        for (r, row) in self.rows.iter().enumerate() {
            if row.entries.is_empty() {
                return Err(Error::InvalidShape(format!("constraint row {r} is empty")));
            }
            for &(b, k, v) in &row.entries {
                if b >= nb || k >= vech_len(self.blocks[b]) || !v.is_finite() {
                    return Err(Error::InvalidShape(format!("row {r} has a bad entry ({b}, {k}, {v})")));
                }
            }
            if !self.rhs[r].is_finite() {
                return Err(Error::InvalidShape(format!("rhs {r} is not finite")));
            }
        }
        Ok(())
    }

    /// `<c, x>` plus the quadratic term.
    pub fn objective(&self, x: &[DVector<f64>]) -> f64 {
        let lin: f64 = self.cost.iter().zip(x).map(|(c, xb)| c.values().dot(xb)).sum();
        let quad = self.quad_cost.as_ref().map_or(0.0, |q| {
            q.iter().zip(x).map(|(r, xb)| 0.5 * r * xb.norm_squared()).sum()
        });
        lin + quad
    }

    /// `A x - b`.
    pub fn residual(&self, x: &[DVector<f64>]) -> Vec<f64> {
        self.rows.iter().zip(&self.rhs).map(|(r, b)| r.dot(x) - b).collect()
    }

    /// `A^T y` as per-block vech vectors.
    pub fn adjoint(&self, y: &[f64]) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = self.vech_dims().into_iter().map(DVector::zeros).collect();
        for (row, &yi) in self.rows.iter().zip(y) {
            for &(b, k, v) in &row.entries {
                out[b][k] += v * yi;
            }
        }
        out
    }

    /// Sparse text form: block sides, optional quadratic weights, cost
    /// triplets, constraint triplets and the right-hand side.
    pub fn to_sparse_text(&self) -> String {
        let mut s = String::new();
        let sides: Vec<String> = self.blocks.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(s, "blocks {}", self.blocks.len());
        let _ = writeln!(s, "{}", sides.join(" "));
        if let Some(q) = &self.quad_cost {
            let qs: Vec<String> = q.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "quad {}", qs.join(" "));
        }
        let triplets: Vec<(usize, usize, f64)> = self
            .cost
            .iter()
            .enumerate()
            .flat_map(|(b, c)| {
                c.values()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(move |(k, v)| (b, k, *v))
            })
            .collect();
        let _ = writeln!(s, "cost {}", triplets.len());
        for (b, k, v) in triplets {
            let _ = writeln!(s, "{b} {k} {v}");
        }
        let nnz: usize = self.rows.iter().map(|r| r.entries.len()).sum();
        let _ = writeln!(s, "constraints {nnz}");
        for (r, row) in self.rows.iter().enumerate() {
            for &(b, k, v) in &row.entries {
                let _ = writeln!(s, "{r} {b} {k} {v}");
            }
        }
        let _ = writeln!(s, "rhs {}", self.rhs.len());
        for v in &self.rhs {
            let _ = writeln!(s, "{v}");
        }
        s
    }

    /// Parses [`ConicProgram::to_sparse_text`] output. Labels and row kinds
    /// are not stored in the text form and come back as placeholders.
    pub fn from_sparse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Parse(format!("missing {what}")));
        fn header(line: &str, key: &str) -> Result<usize> {
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(Error::Parse(format!("expected '{key}', got '{line}'")));
            }
            it.next()
                .ok_or_else(|| Error::Parse(format!("'{key}' needs a count")))?
                .parse()
                .map_err(|e| Error::Parse(format!("bad count in '{line}': {e}")))
        }
        fn nums<T: std::str::FromStr>(line: &str, n: usize) -> Result<Vec<T>>
        where
            T::Err: std::fmt::Display,
        {
            let v: Vec<T> = line
                .split_whitespace()
                .map(|t| t.parse::<T>().map_err(|e| Error::Parse(format!("'{t}': {e}"))))
                .collect::<Result<_>>()?;
            if v.len() != n {
                return Err(Error::Parse(format!("expected {n} fields in '{line}'")));
            }
            Ok(v)
        }
        fn triplet(line: &str, n_idx: usize) -> Result<(Vec<usize>, f64)> {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != n_idx + 1 {
                return Err(Error::Parse(format!("expected {} fields in '{line}'", n_idx + 1)));
            }
            let idx = f[..n_idx]
                .iter()
                .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("'{t}': {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let v = f[n_idx].parse::<f64>().map_err(|e| Error::Parse(format!("'{}': {e}", f[n_idx])))?;
            Ok((idx, v))
        }

        let nb = header(next("blocks header")?, "blocks")?;
        let blocks: Vec<usize> = nums(next("block sides")?, nb)?;
        let mut line = next("cost header")?;
        let mut quad_cost = None;
        if line.starts_with("quad") {
            let q: Vec<f64> = nums(line.trim_start_matches("quad"), nb)?;
            quad_cost = Some(q);
            line = next("cost header")?;
        }
        let mut cost: Vec<DVector<f64>> = blocks.iter().map(|&n| DVector::zeros(vech_len(n))).collect();
        for _ in 0..header(line, "cost")? {
            let (idx, v) = triplet(next("cost entry")?, 2)?;
            let slot = cost
                .get_mut(idx[0])
                .and_then(|c| c.get_mut(idx[1]))
                .ok_or_else(|| Error::Parse(format!("cost entry {idx:?} out of range")))?;
            *slot = v;
        }
        let nnz = header(next("constraints header")?, "constraints")?;
        let mut rows: Vec<SparseRow> = Vec::new();
        for _ in 0..nnz {
            let (idx, v) = triplet(next("constraint entry")?, 3)?;
            if idx[0] >= rows.len() {
                rows.resize(idx[0] + 1, SparseRow::default());
            }
            rows[idx[0]].entries.push((idx[1], idx[2], v));
        }
        let m = header(next("rhs header")?, "rhs")?;
        let mut rhs = Vec::with_capacity(m);
        for _ in 0..m {
            rhs.push(nums::<f64>(next("rhs value")?, 1)?[0]);
        }
        rows.resize(m, SparseRow::default());
        let mut labels = vec!["h".to_string()];
        let mut global_index = Vec::with_capacity(nb);
        for &n in &blocks {
            let mut g = vec![0];
            for _ in 1..n {
                g.push(labels.len());
                labels.push(format!("v{}", labels.len()));
            }
            global_index.push(g);
        }
        let prog = Self {
            cost: cost.into_iter().map(|c| VecSym::new(c).expect("length matches")).collect(),
            blocks,
            quad_cost,
            row_kinds: vec![RowKind::Node(ConstraintKind::Primary); m],
            rows,
            rhs,
            global_index,
            labels,
        };
        prog.validate()?;
        Ok(prog)
    }

    pub fn write_sparse_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_sparse_text())?;
        Ok(())
    }

    pub fn read_sparse_text(path: &Path) -> Result<Self> {
        Self::from_sparse_text(&std::fs::read_to_string(path)?)
    }
}

/// Shared vech entries of each clique-tree edge, as index pairs into the two
/// cliques' vech vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapEdge {
    pub a: usize,
    pub b: usize,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapMap {
    pub edges: Vec<OverlapEdge>,
}

impl OverlapMap {
    pub fn new(decomposition: &CliqueDecomposition, block_dims: &[usize]) -> Self {
        let edges = decomposition
            .tree_edges
            .iter()
            .map(|e| {
                let (ia, ib) = decomposition.shared_indices(e, block_dims);
                let mut pairs = Vec::with_capacity(vech_len(ia.len()));
                for q in 0..ia.len() {
                    for p in 0..=q {
                        pairs.push((vech_index(ia[p], ia[q]), vech_index(ib[p], ib[q])));
                    }
                }
                OverlapEdge { a: e.a, b: e.b, pairs }
            })
            .collect();
        Self { edges }
    }

    pub fn n_entries(&self) -> usize {
        self.edges.iter().map(|e| e.pairs.len()).sum()
    }
}

/// Adds `scale * <M, X_block>` with `M` given in local coordinates, where
/// `map[k]` places local index `k` inside the block.
fn push_local(
    out: &mut Vec<(usize, usize, f64)>,
    block: usize,
    m: &SymMat,
    map: &[usize],
    scale: f64,
) {
    let n = m.dim();
    for j in 0..n {
        for i in 0..=j {
            let v = m.get(i, j);
            if v != 0.0 {
                let (p, q) = (map[i].min(map[j]), map[i].max(map[j]));
                out.push((block, vech_index(p, q), scale * v * vech_scale(i, j)));
            }
        }
    }
}

fn local_map(offset: usize, dim: usize) -> Vec<usize> {
    std::iter::once(0).chain(offset..offset + dim).collect()
}

fn pair_map(oi: usize, di: usize, oj: usize, dj: usize) -> Vec<usize> {
    std::iter::once(0).chain(oi..oi + di).chain(oj..oj + dj).collect()
}

/// Monolithic SDP: one PSD block over the whole lifted vector.
pub fn assemble_full(problem: &LiftedProblem) -> Result<ConicProgram> {
    assemble_dsdp(problem, &CliqueDecomposition::single(problem.n_blocks()))
}

/// Clique-decomposed program: one PSD block per clique, overlap equalities
/// along the clique tree, node costs split evenly among the cliques that
/// hold the node.
pub fn assemble_dsdp(problem: &LiftedProblem, cliques: &CliqueDecomposition) -> Result<ConicProgram> {
    let n = problem.n_blocks();
    cliques.validate(n)?;
    cliques.covers(problem)?;
    let dims: Vec<usize> = problem.blocks.iter().map(|b| b.var_dim()).collect();
    let sides = cliques.clique_sides(&dims);
    let offsets = cliques.local_offsets(&dims);
    let global = problem.block_offsets();

    let mut cost_entries: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); sides.len()];
    let holders: Vec<Vec<usize>> = (0..n).map(|b| cliques.containing(b).collect()).collect();
    for f in &problem.cost_factors {
        match f.scope {
            Scope::Absolute(k) => {
                let w = 1.0 / holders[k].len() as f64;
                for &t in &holders[k] {
                    let map = local_map(offsets[t][&k], dims[k]);
                    push_local(&mut cost_entries[t], t, &f.matrix, &map, w);
                }
            }
            Scope::Relative(i, j) => {
                let t = cliques.first_containing(&[i, j]).ok_or_else(|| {
                    Error::DecompositionInvalid(format!("blocks {i} and {j} share no clique"))
                })?;
                let map = pair_map(offsets[t][&i], dims[i], offsets[t][&j], dims[j]);
                push_local(&mut cost_entries[t], t, &f.matrix, &map, 1.0);
            }
        }
    }
    let cost: Vec<VecSym> = cost_entries
        .into_iter()
        .zip(&sides)
        .map(|(entries, &s)| {
            let mut v = DVector::zeros(vech_len(s));
            for (_, k, x) in entries {
                v[k] += x;
            }
            VecSym::new(v).expect("length matches")
        })
        .collect();

    // Rows grouped by clique so the Schur complement keeps a narrow profile.
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut kinds = Vec::new();
    let mut node_rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, c) in problem.constraint_factors.iter().enumerate() {
        if c.kind != ConstraintKind::Homogenization {
            node_rows.entry(holders[c.block][0]).or_default().push(idx);
        }
    }
    let overlap = OverlapMap::new(cliques, &dims);
    for t in 0..sides.len() {
        rows.push(SparseRow { entries: vec![(t, 0, 1.0)] });
        rhs.push(1.0);
        kinds.push(RowKind::Homogenization);
        for &idx in node_rows.get(&t).into_iter().flatten() {
            let c = &problem.constraint_factors[idx];
            let mut row = SparseRow::default();
            let map = local_map(offsets[t][&c.block], dims[c.block]);
            push_local(&mut row.entries, t, &c.matrix, &map, 1.0);
            row.normalize();
            if row.entries.is_empty() {
                return Err(Error::InvalidShape(format!("constraint {idx} has an all-zero matrix")));
            }
            rows.push(row);
            rhs.push(c.rhs);
            kinds.push(RowKind::Node(c.kind));
        }
        for e in overlap.edges.iter().filter(|e| e.a.max(e.b) == t) {
            for &(ka, kb) in &e.pairs {
                rows.push(SparseRow {
                    entries: if e.a < e.b {
                        vec![(e.a, ka, 1.0), (e.b, kb, -1.0)]
                    } else {
                        vec![(e.b, kb, -1.0), (e.a, ka, 1.0)]
                    },
                });
                rhs.push(0.0);
                kinds.push(RowKind::Overlap);
            }
        }
    }

    let mut labels = vec!["h".to_string()];
    for b in &problem.blocks {
        labels.extend(b.labels.iter().cloned());
    }
    let global_index = cliques
        .cliques
        .iter()
        .map(|c| {
            let mut g = vec![0];
            for &b in c {
                g.extend(global[b]..global[b] + dims[b]);
            }
            g
        })
        .collect();

    let prog = ConicProgram {
        blocks: sides,
        cost,
        quad_cost: None,
        rows,
        rhs,
        row_kinds: kinds,
        global_index,
        labels,
    };
    prog.validate()?;
    Ok(prog)
}

/// Rows pinning `X_t[0, 0] = 1` in every block.
pub fn homogenization_rows(program: &ConicProgram) -> Vec<(SparseRow, f64)> {
    (0..program.n_blocks())
        .map(|t| (SparseRow { entries: vec![(t, 0, 1.0)] }, 1.0))
        .collect()
}

/// vech vectors of each clique's sub-matrix of `x x^T`, where `x` is the
/// full lifted vector.
pub fn clique_vech_from_full(program: &ConicProgram, x: &DVector<f64>) -> Vec<DVector<f64>> {
    program
        .global_index
        .iter()
        .map(|g| {
            let n = g.len();
            let mut v = DVector::zeros(vech_len(n));
            for j in 0..n {
                for i in 0..=j {
                    v[vech_index(i, j)] = x[g[i]] * x[g[j]] * vech_scale(i, j);
                }
            }
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chordal::manual_chain_decomposition;
    use crate::ctro::{lift_ctro, simulate_seeded, CtroConfig};
    use crate::model::evaluate_cost;

    #[test]
    fn ctro_shapes() {
        let inst = simulate_seeded(&CtroConfig::new(3, 4, 0)).unwrap();
        let p = lift_ctro(&inst).unwrap();
        let full = assemble_full(&p).unwrap();
        assert_eq!(full.blocks, vec![22]);
        assert_eq!(full.n_rows(), 3 + 1);
        let d = assemble_dsdp(&p, &manual_chain_decomposition(&p).unwrap()).unwrap();
        assert_eq!(d.blocks, vec![15, 15]);
        let overlap = d.row_kinds.iter().filter(|k| **k == RowKind::Overlap).count();
        assert_eq!(overlap, 36);
        assert_eq!(d.n_rows(), full.n_rows() + overlap + 1);
    }

    #[test]
    fn objectives_agree_on_rank_one_points() {
        let inst = simulate_seeded(&CtroConfig::new(5, 4, 2)).unwrap();
        let p = lift_ctro(&inst).unwrap();
        let full = assemble_full(&p).unwrap();
        let d = assemble_dsdp(&p, &manual_chain_decomposition(&p).unwrap()).unwrap();
        let x = p.lift(&inst.gt_raw()).unwrap();
        let expected = evaluate_cost(&p, &x);
        let xf = x.full();
        let of = full.objective(&clique_vech_from_full(&full, &xf));
        let od = d.objective(&clique_vech_from_full(&d, &xf));
        assert!((of - expected).abs() <= 1e-10 * expected.abs().max(1.0));
        let xs = clique_vech_from_full(&full, &xf);
        let magnitude: f64 = full.cost[0].values().iter().zip(xs[0].iter()).map(|(c, x)| (c * x).abs()).sum();
        assert!((od - of).abs() <= 1e-12 * magnitude, "{od} {of}");
        let worst = d.residual(&clique_vech_from_full(&d, &xf)).iter().fold(0.0f64, |a, r| a.max(r.abs()));
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn sparse_text_round_trip() {
        let inst = simulate_seeded(&CtroConfig::new(3, 3, 1)).unwrap();
        let p = lift_ctro(&inst).unwrap();
        let mut d = assemble_dsdp(&p, &manual_chain_decomposition(&p).unwrap()).unwrap();
        d.quad_cost = Some(vec![0.5, 2.0]);
        let back = ConicProgram::from_sparse_text(&d.to_sparse_text()).unwrap();
        assert_eq!(back.blocks, d.blocks);
        assert_eq!(back.cost, d.cost);
        assert_eq!(back.rows, d.rows);
        assert_eq!(back.rhs, d.rhs);
        assert_eq!(back.quad_cost, d.quad_cost);
        assert!(ConicProgram::from_sparse_text("blocks 1\n3\ncost 1\n0 9 1.0\nconstraints 0\nrhs 0\n").is_err());
    }
}
