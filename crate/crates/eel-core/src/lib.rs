//! EEL: encode a whole hypothesis lattice in one pass of a causal token
//! scorer, then pull out the best (or a diverse set of) hypotheses with
//! dynamic programming over the graph.
//!
//! Pipeline: pack or load a [`lattice::Lattice`], linearize it into a
//! [`masking::Canvas`] whose attention mask restricts each node to its
//! lattice ancestors, score the canvas with [`scoring::CausalScorer`]
//! (every hypothesis is scored in that single pass), and extract paths
//! with [`extraction`]. The [`harness`] module wires these into rerank
//! experiments with an exhaustive per-hypothesis oracle for comparison.

pub mod extraction;
pub mod harness;
pub mod lattice;
pub mod masking;
pub mod scoring;

pub use extraction::{best_path, diverse_paths, few_mask_select, ExtractionConfig};
pub use lattice::{generate_synthetic, pack_candidates, Lattice, Node, NodeId, Path};
pub use masking::{build_canvases, Canvas, MaskConfig, MaskMode};
pub use scoring::{CausalScorer, PathScorer, ScorerSpec, TokenScores};
