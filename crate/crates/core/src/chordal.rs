//! Block-level sparsity graphs, clique decompositions and clique trees.
//!
//! Vertices are variable blocks; the homogenization variable `h` is kept out
//! of the graph and implicitly belongs to every clique.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LiftedProblem, Scope};
use crate::symcone::{min_eig, SymMat};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityGraph {
    pub n_vertices: usize,
    pub edges: BTreeSet<(usize, usize)>,
}

impl SparsityGraph {
    pub fn new(n_vertices: usize) -> Self {
        Self {
            n_vertices,
            edges: BTreeSet::new(),
        }
    }

    /// Adds an undirected edge; self-loops are ignored.
    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<()> {
        if a >= self.n_vertices || b >= self.n_vertices {
            return Err(Error::InvalidShape(format!(
                "edge ({a}, {b}) outside {} vertices",
                self.n_vertices
            )));
        }
        if a != b {
            self.edges.insert((a.min(b), a.max(b)));
        }
        Ok(())
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn adjacency(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.n_vertices];
        for &(a, b) in &self.edges {
            adj[a].insert(b);
            adj[b].insert(a);
        }
        adj
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeEdge {
    pub a: usize,
    pub b: usize,
    /// Blocks shared by both cliques (h is always shared as well).
    pub shared: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliqueDecomposition {
    /// Sorted block indices of each clique.
    pub cliques: Vec<Vec<usize>>,
    pub tree_edges: Vec<TreeEdge>,
    /// Elimination ordering, for automatically computed decompositions.
    pub order: Option<Vec<usize>>,
}

impl CliqueDecomposition {
    pub fn n_cliques(&self) -> usize {
        self.cliques.len()
    }

    /// Single clique holding every block (the full SDP).
    pub fn single(n_blocks: usize) -> Self {
        Self {
            cliques: vec![(0..n_blocks).collect()],
            tree_edges: vec![],
            order: None,
        }
    }

    pub fn containing(&self, block: usize) -> impl Iterator<Item = usize> + '_ {
        self.cliques
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.binary_search(&block).is_ok())
            .map(|(t, _)| t)
    }

    /// Index of the first clique holding every given block.
    pub fn first_containing(&self, blocks: &[usize]) -> Option<usize> {
        self.cliques
            .iter()
            .position(|c| blocks.iter().all(|b| c.binary_search(b).is_ok()))
    }

    /// Checks coverage, tree shape and the running-intersection property.
    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if self.cliques.is_empty() {
            return Err(Error::DecompositionInvalid("no cliques".into()));
        }
        let mut seen = vec![false; n_blocks];
        for c in &self.cliques {
            if c.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::DecompositionInvalid("clique members must be sorted and unique".into()));
            }
            for &b in c {
                if b >= n_blocks {
                    return Err(Error::DecompositionInvalid(format!("block {b} out of range")));
                }
                seen[b] = true;
            }
        }
        if let Some(b) = seen.iter().position(|s| !s) {
            return Err(Error::DecompositionInvalid(format!("block {b} is in no clique")));
        }
        let t = self.cliques.len();
        if self.tree_edges.len() != t - 1 {
            return Err(Error::DecompositionInvalid(format!(
                "{} tree edges for {t} cliques",
                self.tree_edges.len()
            )));
        }
        let mut uf = UnionFind::new(t);
        for e in &self.tree_edges {
            if e.a >= t || e.b >= t || !uf.union(e.a, e.b) {
                return Err(Error::DecompositionInvalid(format!("tree edge ({}, {}) forms a cycle", e.a, e.b)));
            }
            let expect = intersect(&self.cliques[e.a], &self.cliques[e.b]);
            if expect != e.shared {
                return Err(Error::DecompositionInvalid(format!(
                    "tree edge ({}, {}) lists wrong shared blocks",
                    e.a, e.b
                )));
            }
        }
        // Cliques holding a block must induce a subtree: k nodes, k-1 edges.
        for b in 0..n_blocks {
            let holders: Vec<usize> = self.containing(b).collect();
            let inner = self
                .tree_edges
                .iter()
                .filter(|e| e.shared.binary_search(&b).is_ok())
                .count();
            if inner + 1 != holders.len() {
                return Err(Error::DecompositionInvalid(format!(
                    "running intersection fails for block {b}"
                )));
            }
        }
        Ok(())
    }

    /// Checks that every relative scope fits inside a clique.
    pub fn covers(&self, problem: &LiftedProblem) -> Result<()> {
        for f in &problem.cost_factors {
            if let Scope::Relative(i, j) = f.scope {
                if self.first_containing(&[i, j]).is_none() {
                    return Err(Error::DecompositionInvalid(format!(
                        "blocks {i} and {j} share no clique"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Side length of each clique matrix given per-block variable sizes.
    pub fn clique_sides(&self, block_dims: &[usize]) -> Vec<usize> {
        self.cliques
            .iter()
            .map(|c| 1 + c.iter().map(|&b| block_dims[b]).sum::<usize>())
            .collect()
    }

    /// Offset of each member block inside its clique matrix (h sits at 0).
    pub fn local_offsets(&self, block_dims: &[usize]) -> Vec<BTreeMap<usize, usize>> {
        self.cliques
            .iter()
            .map(|c| {
                let mut off = 1;
                c.iter()
                    .map(|&b| {
                        let o = off;
                        off += block_dims[b];
                        (b, o)
                    })
                    .collect()
            })
            .collect()
    }

    /// Indices, within cliques `a` and `b`, of the shared sub-matrix
    /// `[h, shared blocks...]` of tree edge `e`.
    pub fn shared_indices(&self, e: &TreeEdge, block_dims: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let offs = self.local_offsets(block_dims);
        let pick = |t: usize| {
            let mut v = vec![0];
            for &s in &e.shared {
                let o = offs[t][&s];
                v.extend(o..o + block_dims[s]);
            }
            v
        };
        (pick(e.a), pick(e.b))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().filter(|x| b.binary_search(x).is_ok()).copied().collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when `a` and `b` were already connected.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

pub fn aggregate_sparsity(problem: &LiftedProblem) -> SparsityGraph {
    let mut g = SparsityGraph::new(problem.n_blocks());
    for f in &problem.cost_factors {
        if let Scope::Relative(i, j) = f.scope {
            // scopes were validated on construction
            let _ = g.add_edge(i, j);
        }
    }
    g
}

/// Cliques `{h, i, i+1}` along a chain of blocks.
pub fn manual_chain_decomposition(problem: &LiftedProblem) -> Result<CliqueDecomposition> {
    let g = aggregate_sparsity(problem);
    if let Some(&(a, b)) = g.edges.iter().find(|(a, b)| b - a != 1) {
        return Err(Error::NotAChain(a, b));
    }
    let n = g.n_vertices;
    if n <= 2 {
        return Ok(CliqueDecomposition::single(n));
    }
    let cliques: Vec<Vec<usize>> = (0..n - 1).map(|i| vec![i, i + 1]).collect();
    let tree_edges = (0..n - 2)
        .map(|i| TreeEdge {
            a: i,
            b: i + 1,
            shared: vec![i + 1],
        })
        .collect();
    Ok(CliqueDecomposition {
        cliques,
        tree_edges,
        order: None,
    })
}

/// Greedy minimum-degree elimination (lowest index breaks ties), maximal
/// cliques of the filled graph, and a maximum-weight spanning clique tree.
pub fn chordal_decomposition_auto(graph: &SparsityGraph) -> CliqueDecomposition {
    let n = graph.n_vertices;
    if n == 0 {
        return CliqueDecomposition {
            cliques: vec![vec![]],
            tree_edges: vec![],
            order: Some(vec![]),
        };
    }
    let mut adj = graph.adjacency();
    let mut alive = vec![true; n];
    let mut order = Vec::with_capacity(n);
    let mut candidates: Vec<Vec<usize>> = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&v| alive[v])
            .min_by_key(|&v| (adj[v].len(), v))
            .expect("a live vertex remains");
        let nbrs: Vec<usize> = adj[v].iter().copied().collect();
        for (k, &a) in nbrs.iter().enumerate() {
            for &b in &nbrs[k + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
            adj[a].remove(&v);
        }
        let mut clique = nbrs;
        clique.push(v);
        clique.sort_unstable();
        candidates.push(clique);
        alive[v] = false;
        order.push(v);
    }

    let mut cliques: Vec<Vec<usize>> = Vec::new();
    for (k, c) in candidates.iter().enumerate() {
        let dominated = candidates.iter().enumerate().any(|(m, d)| {
            m != k && d.len() >= c.len() && c.iter().all(|x| d.binary_search(x).is_ok()) && (d.len() > c.len() || m < k)
        });
        if !dominated {
            cliques.push(c.clone());
        }
    }
    cliques.sort();

    let t = cliques.len();
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, c) in cliques.iter().enumerate() {
        for &v in c {
            holders[v].push(k);
        }
    }
    let mut weights: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for hs in &holders {
        for (i, &a) in hs.iter().enumerate() {
            for &b in &hs[i + 1..] {
                *weights.entry((a, b)).or_default() += 1;
            }
        }
    }
    let mut pairs: Vec<((usize, usize), usize)> = weights.into_iter().collect();
    pairs.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut uf = UnionFind::new(t);
    let mut tree_edges = Vec::with_capacity(t.saturating_sub(1));
    for ((a, b), _) in pairs {
        if uf.union(a, b) {
            tree_edges.push(TreeEdge {
                a,
                b,
                shared: intersect(&cliques[a], &cliques[b]),
            });
        }
    }
    // Disconnected components are joined through h alone.
    for k in 1..t {
        if uf.union(0, k) {
            tree_edges.push(TreeEdge { a: 0, b: k, shared: vec![] });
        }
    }
    tree_edges.sort_by_key(|e| (e.a.max(e.b), e.a.min(e.b)));
    CliqueDecomposition {
        cliques,
        tree_edges,
        order: Some(order),
    }
}

/// True when every clique matrix is PSD up to `tol` (so the partial matrix
/// they define has a PSD completion). Overlaps must agree within `tol`.
pub fn psd_completable_check(
    clique_mats: &[SymMat],
    decomposition: &CliqueDecomposition,
    block_dims: &[usize],
    tol: f64,
) -> Result<bool> {
    if clique_mats.len() != decomposition.n_cliques() {
        return Err(Error::DimensionMismatch {
            expected: decomposition.n_cliques(),
            got: clique_mats.len(),
        });
    }
    for (m, side) in clique_mats.iter().zip(decomposition.clique_sides(block_dims)) {
        if m.dim() != side {
            return Err(Error::DimensionMismatch { expected: side, got: m.dim() });
        }
    }
    for e in &decomposition.tree_edges {
        let (ia, ib) = decomposition.shared_indices(e, block_dims);
        let sa = clique_mats[e.a].submatrix(&ia);
        let sb = clique_mats[e.b].submatrix(&ib);
        let diff = (sa.as_matrix() - sb.as_matrix()).amax();
        if diff > tol {
            return Err(Error::InconsistentInput(format!(
                "cliques {} and {} disagree by {diff:.3e} on their overlap",
                e.a, e.b
            )));
        }
    }
    Ok(clique_mats.iter().all(|m| min_eig(m) >= -tol))
}
