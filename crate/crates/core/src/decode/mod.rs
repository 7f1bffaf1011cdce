//! Structure decoding from score tensors.

pub mod graph;
pub mod tree;

use thiserror::Error;

use crate::scorer::ScoreKind;

pub use graph::{decode_graph_factorized, decode_graph_unfactorized, ensure_connected, is_root_reachable, Edge, RepairScores};
pub use tree::{cle_mst, decode_tree_factorized, decode_tree_unfactorized, tree_weight, DecodedTree};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("no feasible arborescence: token {dependent} has no admissible head")]
    Infeasible { dependent: usize },

    #[error("no arborescence with a single root attachment exists")]
    NoSingleRootTree,

    #[error("expected {expected:?} scores, found {found:?}")]
    WrongKind { expected: ScoreKind, found: ScoreKind },

    #[error("score tensors cover {0} and {1} tokens")]
    LengthMismatch(usize, usize),

    #[error("label scores have no real label besides the null class")]
    NoLabels,
}

#[cfg(test)]
#[path = "../../tests/common/oracle.rs"]
pub(crate) mod oracle;
