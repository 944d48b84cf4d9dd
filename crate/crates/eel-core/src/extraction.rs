//! Path extraction: dynamic programs that turn per-node scores back into
//! hypotheses.
//!
//! Both objectives are solved exactly. Raw (sum) scores fall to plain
//! Viterbi over the topological order. Length-normalized scores need more
//! care on reentrant graphs — the best mean-score path into a node is not
//! the best sum-score path once lengths differ — so that mode runs a
//! length-stratified table: best raw score per (node, path length), with
//! the mean maximized only at the end nodes. Tie-breaking is pinned
//! everywhere (smaller parent id, then smaller end id, then shorter path)
//! so extraction is deterministic.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::lattice::{Lattice, LatticeError, NodeId, Path};
use crate::masking::Canvas;
use crate::scoring::{aggregate, PathScorer, ScoreError, TokenScores};

/// Knobs for extraction: how many paths, how hard to push them apart,
/// and which objective to rank by.
#[derive(Debug, Clone, Copy)]
pub struct ExtractionConfig {
    /// Number of paths for [`diverse_paths`].
    pub k: usize,
    /// Repetition penalty per prior occurrence of a token; 0 disables.
    pub w: f32,
    /// Rank by mean per-node score instead of the sum.
    pub normalize: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig { k: 1, w: 0.0, normalize: true }
    }
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("node {0} has no score")]
    UnscoredNode(NodeId),
    #[error("lattice has no end nodes")]
    NoEnds,
    #[error("no end node is reachable from the root")]
    NoPath,
    #[error("canvas carries no subgraph (not single-context)")]
    MissingSubgraph,
    #[error("no canvases to select from")]
    NoCanvases,
    #[error("canvases disagree on node order")]
    CanvasMismatch,
    #[error("invalid extraction config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

fn node_score(scores: &TokenScores, id: NodeId) -> Result<f32, ExtractError> {
    scores.get(id).ok_or(ExtractError::UnscoredNode(id))
}

/// Highest-scoring root→end path under `scores`, exact for both the raw
/// and the normalized objective.
pub fn best_path(
    lattice: &Lattice,
    scores: &TokenScores,
    normalize: bool,
) -> Result<Path, ExtractError> {
    if lattice.ends().is_empty() {
        return Err(ExtractError::NoEnds);
    }
    let order = lattice.topo_order()?;
    if normalize {
        best_path_normalized(lattice, scores, &order)
    } else {
        best_path_raw(lattice, scores, &order)
    }
}

fn best_path_raw(
    lattice: &Lattice,
    scores: &TokenScores,
    order: &[NodeId],
) -> Result<Path, ExtractError> {
    // best[v] = (raw score of the best root→v path, predecessor)
    let mut best: HashMap<NodeId, (f32, Option<NodeId>)> = HashMap::new();
    best.insert(lattice.root(), (0.0, None));
    for &v in order {
        if v == lattice.root() {
            continue;
        }
        let mut choice: Option<(f32, NodeId)> = None;
        for &p in lattice.parents_of(v) {
            // parents iterate in ascending id order, so a strict > keeps
            // the smallest parent id on ties
            if let Some(&(praw, _)) = best.get(&p) {
                if choice.map_or(true, |(craw, _)| praw > craw) {
                    choice = Some((praw, p));
                }
            }
        }
        if let Some((praw, p)) = choice {
            best.insert(v, (praw + node_score(scores, v)?, Some(p)));
        }
    }

    let mut winner: Option<(f32, NodeId)> = None;
    for &e in lattice.ends() {
        if let Some(&(raw, _)) = best.get(&e) {
            if winner.map_or(true, |(wraw, _)| raw > wraw) {
                winner = Some((raw, e));
            }
        }
    }
    let (raw, end) = winner.ok_or(ExtractError::NoPath)?;

    let mut node_ids = Vec::new();
    let mut cur = end;
    loop {
        node_ids.push(cur);
        match best[&cur].1 {
            Some(p) if p != lattice.root() => cur = p,
            _ => break,
        }
    }
    node_ids.reverse();
    Ok(Path::scored(node_ids, raw))
}

fn best_path_normalized(
    lattice: &Lattice,
    scores: &TokenScores,
    order: &[NodeId],
) -> Result<Path, ExtractError> {
    let n = order.len();
    let slot: HashMap<NodeId, usize> =
        order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    // table[slot][len] = best raw score over root→node paths of exactly
    // `len` nodes (root excluded), plus the predecessor that achieved it.
    let mut table: Vec<Vec<Option<(f32, NodeId)>>> = vec![vec![None; n]; n];
    let root_slot = slot[&lattice.root()];
    table[root_slot][0] = Some((0.0, lattice.root()));
    for &v in order {
        if v == lattice.root() {
            continue;
        }
        let vscore = node_score(scores, v)?;
        let vslot = slot[&v];
        for &p in lattice.parents_of(v) {
            let pslot = slot[&p];
            for len in 0..n - 1 {
                if let Some((praw, _)) = table[pslot][len] {
                    let cand = praw + vscore;
                    let cell = &mut table[vslot][len + 1];
                    // ascending parents + strict > keeps the smallest
                    // parent id per (node, length) cell
                    if cell.map_or(true, |(raw, _)| cand > raw) {
                        *cell = Some((cand, p));
                    }
                }
            }
        }
    }

    // maximize raw/len over (end, len); ties: smaller end id, shorter path
    let mut winner: Option<(f32, f32, NodeId, usize)> = None;
    for &e in lattice.ends() {
        let Some(&eslot) = slot.get(&e) else { continue };
        for len in 1..n {
            if let Some((raw, _)) = table[eslot][len] {
                let norm = raw / len as f32;
                if winner.map_or(true, |(wnorm, ..)| norm > wnorm) {
                    winner = Some((norm, raw, e, len));
                }
            }
        }
    }
    let (_, raw, end, len) = winner.ok_or(ExtractError::NoPath)?;

    let mut node_ids = Vec::with_capacity(len);
    let mut cur = end;
    let mut cur_len = len;
    while cur_len > 0 {
        node_ids.push(cur);
        let (_, parent) = table[slot[&cur]][cur_len].expect("cells on the winning chain exist");
        cur = parent;
        cur_len -= 1;
    }
    node_ids.reverse();
    Ok(Path::scored(node_ids, raw))
}

/// Best path restricted to a single-context canvas's sampled subgraph.
/// Each node keeps exactly one parent there, so every node has one
/// candidate history and the scan over end nodes is all that remains.
pub fn best_path_in_subgraph(
    lattice: &Lattice,
    canvas: &Canvas,
    scores: &TokenScores,
    normalize: bool,
) -> Result<Path, ExtractError> {
    let edges = canvas.subgraph_edges.as_ref().ok_or(ExtractError::MissingSubgraph)?;
    if lattice.ends().is_empty() {
        return Err(ExtractError::NoEnds);
    }
    let parent_of: HashMap<NodeId, NodeId> =
        edges.iter().map(|&(p, v)| (v, p)).collect();

    // accumulate (raw, len) down the forest in canvas order
    let mut acc: HashMap<NodeId, (f32, usize)> = HashMap::new();
    acc.insert(lattice.root(), (0.0, 0));
    for &v in &canvas.node_order {
        if v == lattice.root() {
            continue;
        }
        let p = *parent_of.get(&v).ok_or(ExtractError::MissingSubgraph)?;
        let &(praw, plen) = acc.get(&p).ok_or(ExtractError::MissingSubgraph)?;
        acc.insert(v, (praw + node_score(scores, v)?, plen + 1));
    }

    let mut winner: Option<(f32, NodeId)> = None;
    for &e in lattice.ends() {
        if let Some(&(raw, len)) = acc.get(&e) {
            let key = if normalize { raw / len as f32 } else { raw };
            if winner.map_or(true, |(wkey, _)| key > wkey) {
                winner = Some((key, e));
            }
        }
    }
    let (_, end) = winner.ok_or(ExtractError::NoPath)?;

    let mut node_ids = Vec::new();
    let mut cur = end;
    while cur != lattice.root() {
        node_ids.push(cur);
        cur = parent_of[&cur];
    }
    node_ids.reverse();
    let raw = acc[&end].0;
    Ok(Path::scored(node_ids, raw))
}

/// Result of scoring several single-context canvases and keeping the
/// strongest extraction.
#[derive(Debug, Clone)]
pub struct FewMaskSelection {
    pub best: Path,
    pub best_index: usize,
    pub per_mask: Vec<Path>,
    /// Total per-node scores produced while scoring the canvases.
    pub nodes_scored: u64,
}

/// Score every canvas (in parallel; scorers are reentrant), extract the
/// best path inside each sampled subgraph, and keep the canvas whose path
/// scores highest. Ties go to the earliest canvas, so results are stable
/// under reordering of the parallel scoring.
pub fn few_mask_select<S: PathScorer + ?Sized>(
    lattice: &Lattice,
    canvases: &[Canvas],
    scorer: &S,
    normalize: bool,
) -> Result<FewMaskSelection, ExtractError> {
    if canvases.is_empty() {
        return Err(ExtractError::NoCanvases);
    }
    if canvases.iter().any(|c| c.node_order != canvases[0].node_order) {
        return Err(ExtractError::CanvasMismatch);
    }
    let scored: Vec<(u64, Path)> = canvases
        .par_iter()
        .map(|canvas| -> Result<(u64, Path), ExtractError> {
            let scores = scorer.score_canvas(lattice, canvas)?;
            let path = best_path_in_subgraph(lattice, canvas, &scores, normalize)?;
            Ok((scores.len() as u64, path))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let nodes_scored = scored.iter().map(|(n, _)| n).sum();
    let per_mask: Vec<Path> = scored.into_iter().map(|(_, p)| p).collect();
    let mut best_index = 0;
    for (i, p) in per_mask.iter().enumerate() {
        let key = |p: &Path| if normalize { p.norm_score } else { p.raw_score };
        if key(p) > key(&per_mask[best_index]) {
            best_index = i;
        }
    }
    Ok(FewMaskSelection { best: per_mask[best_index].clone(), best_index, per_mask, nodes_scored })
}

/// One round of diverse extraction: the path, scored both under the
/// penalized working scores that selected it and under the original ones.
#[derive(Debug, Clone)]
pub struct DiverseSample {
    /// Path with its original (unpenalized) raw/norm scores.
    pub path: Path,
    pub penalized_raw: f32,
    pub penalized_norm: f32,
}

/// Extract `config.k` paths, after each one subtracting `config.w` from a
/// token's score per occurrence on the paths already returned. Penalties
/// depend on tokens, not node ids, so a synonymous node elsewhere in the
/// lattice is pushed down too. With `w = 0` this degenerates to the best
/// path repeated `k` times.
pub fn diverse_paths(
    lattice: &Lattice,
    scores: &TokenScores,
    config: &ExtractionConfig,
) -> Result<Vec<DiverseSample>, ExtractError> {
    if config.k < 1 {
        return Err(ExtractError::InvalidConfig("k must be >= 1".into()));
    }
    if !(config.w >= 0.0) {
        return Err(ExtractError::InvalidConfig("w must be >= 0".into()));
    }
    let mut occurrences: HashMap<u32, u32> = HashMap::new();
    let mut samples = Vec::with_capacity(config.k);
    for _ in 0..config.k {
        let working = TokenScores::from_scores(
            scores
                .per_node
                .iter()
                .map(|(&id, &s)| {
                    let token = lattice.token(id).expect("scored nodes exist");
                    let hits = occurrences.get(&token).copied().unwrap_or(0);
                    (id, s - config.w * hits as f32)
                })
                .collect(),
        );
        let penalized = best_path(lattice, &working, config.normalize)?;
        let (raw, norm) = aggregate(&penalized.node_ids, scores)?;
        for &id in &penalized.node_ids {
            let token = lattice.token(id).expect("scored nodes exist");
            *occurrences.entry(token).or_insert(0) += 1;
        }
        samples.push(DiverseSample {
            path: Path { node_ids: penalized.node_ids, raw_score: raw, norm_score: norm },
            penalized_raw: penalized.raw_score,
            penalized_norm: penalized.norm_score,
        });
    }
    Ok(samples)
}
