//! Sparsity graph of a lifted problem, its clique decompositions, and the
//! JSON form used to pass a decomposition around.

use chordal_sdp::chordal::{aggregate_sparsity, chordal_decomposition_auto, manual_chain_decomposition, SparsityGraph};
use chordal_sdp::ctro::{lift_ctro, simulate_seeded, CtroConfig};

fn main() -> chordal_sdp::error::Result<()> {
    let p = lift_ctro(&simulate_seeded(&CtroConfig::new(6, 8, 0))?)?;
    let g = aggregate_sparsity(&p);
    println!("sparsity edges: {:?}", g.edges);

    let chain = manual_chain_decomposition(&p)?;
    println!("chain cliques: {:?}", chain.cliques);
    println!("{}", chain.to_json()?);

    // A 4-cycle needs a fill edge; the automatic decomposition adds one.
    let mut cycle = SparsityGraph::new(4);
    for (a, b) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
        cycle.add_edge(a, b)?;
    }
    let auto = chordal_decomposition_auto(&cycle);
    println!("4-cycle cliques: {:?}, tree edges: {:?}", auto.cliques, auto.tree_edges);
    Ok(())
}
