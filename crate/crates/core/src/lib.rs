//! Certifiably optimal localization through semidefinite relaxations, with
//! chordal (clique-tree) decomposition of the relaxation and a consensus
//! ADMM variant.

pub mod error;
pub mod symcone;
pub mod model;
pub mod geometry;
pub mod ctro;
pub mod mw;
pub mod chordal;
pub mod linalg;
pub mod assembly;
pub mod solver;
pub mod dsdp;
pub mod certify;
pub mod admm;
pub mod local_gn;
pub mod harness;

pub use error::{Error, Result};
