//! Canvas assembly: flatten a lattice into one token sequence plus an
//! attention mask so a causal scorer can encode every hypothesis at once.
//!
//! The mask admits exactly the ancestor set of each node, and position ids
//! replay the depth each node would have inside its own hypothesis, so the
//! scorer cannot tell a canvas slot from the same token scored alone. Two
//! deliberate degradations of that guarantee (bidirectional visibility,
//! canvas-index positions) are kept for comparison runs.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::lattice::{Lattice, LatticeError, Node, NodeId};

/// How canvas visibility is derived from the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Each node sees its full ancestor set (lossless on tries).
    FullCausal,
    /// Two nodes see each other iff either is an ancestor of the other.
    /// Breaks causality; kept as a deliberately degraded variant.
    Bidirectional,
    /// Each reentrant node keeps a single sampled parent, so every node
    /// sees exactly one linear history.
    SingleContext,
}

/// Position-id scheme for canvas slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionScheme {
    /// Depth-consistent ids from the probability-ordered first traversal.
    Canonical,
    /// The slot index itself (the degraded "just count the canvas" scheme).
    CanvasIndex,
}

/// How single-context mode picks one parent per reentrant node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParentSampling {
    Uniform,
    /// Parents drawn proportionally to softmax of their logprobs.
    LogprobWeighted,
}

/// Mask construction parameters.
#[derive(Debug, Clone)]
pub struct MaskConfig {
    pub mode: MaskMode,
    /// Number of canvases; must be 1 unless `mode` is single-context.
    pub m: usize,
    pub seed: u64,
    /// Exclusive upper bound for position ids (scorer table size).
    pub max_position: u32,
    pub position_scheme: PositionScheme,
    pub parent_sampling: ParentSampling,
    /// Single-context ablation: keep the full-graph canonical positions
    /// instead of recomputing depths inside the sampled subgraph.
    pub reuse_graph_positions: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            mode: MaskMode::FullCausal,
            m: 1,
            seed: 0,
            max_position: 512,
            position_scheme: PositionScheme::Canonical,
            parent_sampling: ParentSampling::Uniform,
            reuse_graph_positions: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("canvas order is not topological: edge {src} -> {dst} reversed")]
    NotTopological { src: NodeId, dst: NodeId },
    #[error("canvas order has {got} slots, lattice has {expected} nodes")]
    OrderSize { expected: usize, got: usize },
    #[error("canvas order repeats or misses node {0}")]
    BadSlot(NodeId),
    #[error("position {position} of node {node} exceeds max_position {max_position}")]
    PositionOverflow { node: NodeId, position: u32, max_position: u32 },
    #[error("no position assigned for node {0}")]
    MissingPosition(NodeId),
    #[error("mask is {got}x{got}, canvas has {expected} slots")]
    MaskSizeMismatch { expected: usize, got: usize },
    #[error("invalid mask config: {0}")]
    InvalidConfig(String),
    #[error("lattice is not usable here: {0}")]
    InvalidLattice(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Square bit matrix; `get(i, j)` says whether canvas slot `i` may attend
/// to slot `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl Mask {
    pub fn new(n: usize) -> Mask {
        let words_per_row = n.div_ceil(64);
        Mask { n, words_per_row, bits: vec![0; n * words_per_row] }
    }

    /// Lower-triangular mask: plain left-to-right causal attention.
    pub fn lower_triangular(n: usize) -> Mask {
        let mut m = Mask::new(n);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j);
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, i: usize, j: usize) {
        debug_assert!(i < self.n && j < self.n);
        self.bits[i * self.words_per_row + j / 64] |= 1u64 << (j % 64);
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < self.n && j < self.n);
        self.bits[i * self.words_per_row + j / 64] >> (j % 64) & 1 == 1
    }

    /// OR row `src` into row `dst` (union of visibility sets).
    pub fn or_row(&mut self, dst: usize, src: usize) {
        for w in 0..self.words_per_row {
            let v = self.bits[src * self.words_per_row + w];
            self.bits[dst * self.words_per_row + w] |= v;
        }
    }

    pub fn row_count(&self, i: usize) -> usize {
        (0..self.words_per_row)
            .map(|w| self.bits[i * self.words_per_row + w].count_ones() as usize)
            .sum()
    }

    /// Rows of `0`/`1` characters, one line per slot.
    pub fn dump_rows(&self) -> String {
        let mut out = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            for j in 0..self.n {
                out.push(if self.get(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// A lattice flattened for one scorer pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    /// Topological order of every lattice node; slot 0 is the root.
    pub node_order: Vec<NodeId>,
    /// Token per slot, aligned with `node_order`.
    pub tokens: Vec<u32>,
    /// Position id per slot, aligned with `node_order`.
    pub positions: Vec<u32>,
    pub mask: Mask,
    /// For single-context canvases: the retained (parent, child) edges.
    pub subgraph_edges: Option<Vec<(NodeId, NodeId)>>,
}

impl Canvas {
    pub fn len(&self) -> usize {
        self.node_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_order.is_empty()
    }

    /// Debug rendering: header lines then the mask as 0/1 rows.
    pub fn dump(&self) -> String {
        let join = |xs: &[u32]| {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
        };
        let order: Vec<u32> = self.node_order.iter().map(|id| id.0).collect();
        format!(
            "node_order: {}\ntokens: {}\npositions: {}\nmask:\n{}",
            join(&order),
            join(&self.tokens),
            join(&self.positions),
            self.mask.dump_rows()
        )
    }
}

fn slot_map(lattice: &Lattice, order: &[NodeId]) -> Result<HashMap<NodeId, usize>, MaskError> {
    if order.len() != lattice.node_count() {
        return Err(MaskError::OrderSize { expected: lattice.node_count(), got: order.len() });
    }
    let mut slot = HashMap::with_capacity(order.len());
    for (i, &id) in order.iter().enumerate() {
        if lattice.node(id).is_none() || slot.insert(id, i).is_some() {
            return Err(MaskError::BadSlot(id));
        }
    }
    for &(src, dst) in lattice.edges() {
        if slot[&src] >= slot[&dst] {
            return Err(MaskError::NotTopological { src, dst });
        }
    }
    Ok(slot)
}

/// Canonical position ids: depth-first traversal from the root, children
/// in descending logprob order (ties: smaller id). The first traversal
/// edge reaching a node fixes its position as parent position + 1, so a
/// reentrant node keeps the depth of its most probable history.
pub fn assign_positions(lattice: &Lattice) -> BTreeMap<NodeId, u32> {
    let sorted_children = |id: NodeId| -> Vec<NodeId> {
        let mut kids: Vec<NodeId> = lattice.children_of(id).to_vec();
        kids.sort_by(|&a, &b| {
            let la = lattice.logprob(a).unwrap_or(f32::NEG_INFINITY);
            let lb = lattice.logprob(b).unwrap_or(f32::NEG_INFINITY);
            lb.total_cmp(&la).then(a.cmp(&b))
        });
        kids
    };

    let mut pos: BTreeMap<NodeId, u32> = BTreeMap::new();
    pos.insert(lattice.root(), 0);
    let mut stack: Vec<(NodeId, Vec<NodeId>, usize)> =
        vec![(lattice.root(), sorted_children(lattice.root()), 0)];
    while let Some((node, kids, cursor)) = stack.last_mut() {
        if *cursor < kids.len() {
            let next = kids[*cursor];
            *cursor += 1;
            if !pos.contains_key(&next) {
                let p = pos[node] + 1;
                pos.insert(next, p);
                stack.push((next, sorted_children(next), 0));
            }
        } else {
            stack.pop();
        }
    }
    pos
}

/// Ancestor-or-self visibility: `mask[i][j] = 1` iff the node in slot `j`
/// lies on some root→node path of the node in slot `i`. Computed as a
/// forward union of parent rows over the topological order.
pub fn causal_reachability(lattice: &Lattice, order: &[NodeId]) -> Result<Mask, MaskError> {
    let slot = slot_map(lattice, order)?;
    let mut mask = Mask::new(order.len());
    for (i, &v) in order.iter().enumerate() {
        mask.set(i, i);
        for &p in lattice.parents_of(v) {
            mask.or_row(i, slot[&p]);
        }
    }
    Ok(mask)
}

/// Symmetric variant: slots see each other iff one is an ancestor of the
/// other (`C ∨ Cᵀ`). Nodes that merely share a descendant stay mutually
/// invisible. Not causal; used only as a degraded comparison mode.
pub fn bidirectional_reachability(lattice: &Lattice, order: &[NodeId]) -> Result<Mask, MaskError> {
    let causal = causal_reachability(lattice, order)?;
    let n = causal.n();
    let mut mask = Mask::new(n);
    for i in 0..n {
        for j in 0..n {
            if causal.get(i, j) || causal.get(j, i) {
                mask.set(i, j);
            }
        }
    }
    Ok(mask)
}

/// Options for [`single_context_with`].
#[derive(Debug, Clone, Copy)]
pub struct SingleContextOpts {
    pub sampling: ParentSampling,
    pub reuse_graph_positions: bool,
}

impl Default for SingleContextOpts {
    fn default() -> Self {
        SingleContextOpts {
            sampling: ParentSampling::Uniform,
            reuse_graph_positions: false,
        }
    }
}

/// Single-context canvas with uniform parent sampling and positions
/// recomputed inside the sampled subgraph.
pub fn single_context(
    lattice: &Lattice,
    order: &[NodeId],
    seed: u64,
) -> Result<Canvas, MaskError> {
    single_context_with(lattice, order, seed, SingleContextOpts::default())
}

/// Sample one in-edge per non-root node (ascending node id, one draw per
/// node) and build the canvas over the resulting forest: every node sees
/// exactly the linear history through its sampled parent. Positions are
/// the depth within the forest unless `reuse_graph_positions` keeps the
/// full-graph canonical ids (a deliberately inconsistent variant).
pub fn single_context_with(
    lattice: &Lattice,
    order: &[NodeId],
    seed: u64,
    opts: SingleContextOpts,
) -> Result<Canvas, MaskError> {
    let slot = slot_map(lattice, order)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let mut ids: Vec<NodeId> = lattice.nodes().iter().map(|n| n.id).collect();
    ids.sort_unstable();
    let mut chosen: HashMap<NodeId, NodeId> = HashMap::new();
    let mut subgraph_edges: Vec<(NodeId, NodeId)> = Vec::new();
    for &v in &ids {
        if v == lattice.root() {
            continue;
        }
        let parents = lattice.parents_of(v);
        if parents.is_empty() {
            return Err(MaskError::InvalidLattice(format!(
                "node {v} has no parents and is not the root"
            )));
        }
        let pick = match opts.sampling {
            ParentSampling::Uniform => rng.gen_range(0..parents.len()),
            ParentSampling::LogprobWeighted => {
                let lps: Vec<f32> =
                    parents.iter().map(|&p| lattice.logprob(p).unwrap_or(0.0)).collect();
                let max = lps.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let weights: Vec<f32> = lps.iter().map(|&lp| (lp - max).exp()).collect();
                let total: f32 = weights.iter().sum();
                let draw = rng.gen::<f32>() * total;
                let mut acc = 0.0;
                let mut pick = parents.len() - 1;
                for (i, &w) in weights.iter().enumerate() {
                    acc += w;
                    if draw < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        };
        let parent = parents[pick];
        chosen.insert(v, parent);
        subgraph_edges.push((parent, v));
    }

    let n = order.len();
    let mut mask = Mask::new(n);
    let mut depth: HashMap<NodeId, u32> = HashMap::new();
    depth.insert(lattice.root(), 0);
    for (i, &v) in order.iter().enumerate() {
        mask.set(i, i);
        if let Some(&p) = chosen.get(&v) {
            mask.or_row(i, slot[&p]);
            let d = depth[&p] + 1;
            depth.insert(v, d);
        }
    }

    let positions: Vec<u32> = if opts.reuse_graph_positions {
        let canonical = assign_positions(lattice);
        order.iter().map(|id| canonical[id]).collect()
    } else {
        order.iter().map(|id| depth[id]).collect()
    };
    let tokens: Vec<u32> = order
        .iter()
        .map(|&id| lattice.token(id).expect("slot_map checked ids"))
        .collect();

    Ok(Canvas {
        node_order: order.to_vec(),
        tokens,
        positions,
        mask,
        subgraph_edges: Some(subgraph_edges),
    })
}

/// Build `config.m` single-context canvases with seeds `seed..seed+m`.
/// Canvas `k` is identical for every `m > k`, so enlarging `m` only adds
/// canvases (results are monotone in the sense that the selection pool
/// grows). All canvases share the same node order and may be scored
/// concurrently.
pub fn few_masks(lattice: &Lattice, config: &MaskConfig) -> Result<Vec<Canvas>, MaskError> {
    if config.mode != MaskMode::SingleContext {
        return Err(MaskError::InvalidConfig(
            "few_masks requires single-context mode".into(),
        ));
    }
    if config.m < 1 {
        return Err(MaskError::InvalidConfig("m must be >= 1".into()));
    }
    let order = lattice.topo_order()?;
    let opts = SingleContextOpts {
        sampling: config.parent_sampling,
        reuse_graph_positions: config.reuse_graph_positions,
    };
    let mut canvases = Vec::with_capacity(config.m);
    for k in 0..config.m {
        let canvas =
            single_context_with(lattice, &order, config.seed.wrapping_add(k as u64), opts)?;
        check_position_bound(&canvas, config.max_position)?;
        canvases.push(canvas);
    }
    Ok(canvases)
}

fn check_position_bound(canvas: &Canvas, max_position: u32) -> Result<(), MaskError> {
    for (i, &p) in canvas.positions.iter().enumerate() {
        if p >= max_position {
            return Err(MaskError::PositionOverflow {
                node: canvas.node_order[i],
                position: p,
                max_position,
            });
        }
    }
    Ok(())
}

/// Assemble a canvas from precomputed positions and a mask. The node order
/// is the deterministic topological order; errors if any position falls
/// outside the scorer's table or the mask size disagrees.
pub fn linearize(
    lattice: &Lattice,
    positions: &BTreeMap<NodeId, u32>,
    mask: Mask,
    max_position: u32,
) -> Result<Canvas, MaskError> {
    let order = lattice.topo_order()?;
    if mask.n() != order.len() {
        return Err(MaskError::MaskSizeMismatch { expected: order.len(), got: mask.n() });
    }
    let mut pos_vec = Vec::with_capacity(order.len());
    let mut tokens = Vec::with_capacity(order.len());
    for &id in &order {
        let p = *positions.get(&id).ok_or(MaskError::MissingPosition(id))?;
        pos_vec.push(p);
        tokens.push(lattice.token(id)?);
    }
    let canvas = Canvas {
        node_order: order,
        tokens,
        positions: pos_vec,
        mask,
        subgraph_edges: None,
    };
    check_position_bound(&canvas, max_position)?;
    Ok(canvas)
}

/// Produce the canvases requested by `config` (one for the whole-graph
/// modes, `m` for single-context).
pub fn build_canvases(lattice: &Lattice, config: &MaskConfig) -> Result<Vec<Canvas>, MaskError> {
    match config.mode {
        MaskMode::SingleContext => few_masks(lattice, config),
        mode => {
            if config.m != 1 {
                return Err(MaskError::InvalidConfig(
                    "m must be 1 unless mode is single-context".into(),
                ));
            }
            let order = lattice.topo_order()?;
            let positions: BTreeMap<NodeId, u32> = match config.position_scheme {
                PositionScheme::Canonical => assign_positions(lattice),
                PositionScheme::CanvasIndex => {
                    order.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect()
                }
            };
            let mask = match mode {
                MaskMode::FullCausal => causal_reachability(lattice, &order)?,
                MaskMode::Bidirectional => bidirectional_reachability(lattice, &order)?,
                MaskMode::SingleContext => unreachable!(),
            };
            Ok(vec![linearize(lattice, &positions, mask, config.max_position)?])
        }
    }
}

/// Drop every node whose canonical position would overflow the scorer's
/// position table, so an oversized lattice can still be encoded at the cost
/// of losing its deepest continuations. Overflow is a hard error unless the
/// caller opts into this explicitly.
///
/// A kept node's canonical position is inherited from the traversal parent
/// that first reached it, and positions grow by exactly one along that
/// chain, so the surviving node set is closed under "first traversal
/// parent": every kept node still has a root path and the pruned graph is a
/// valid lattice. Nodes whose children were all removed become ends.
pub fn prune_to_positions(lattice: &Lattice, max_position: u32) -> Result<Lattice, MaskError> {
    if max_position < 2 {
        return Err(MaskError::InvalidConfig(
            "pruning below position 2 would leave only the root".into(),
        ));
    }
    let pos = assign_positions(lattice);
    let kept: HashSet<NodeId> =
        pos.iter().filter(|&(_, &p)| p < max_position).map(|(&id, _)| id).collect();
    let nodes: Vec<Node> =
        lattice.nodes().iter().filter(|n| kept.contains(&n.id)).copied().collect();
    let edges: Vec<(NodeId, NodeId)> = lattice
        .edges()
        .iter()
        .filter(|(src, dst)| kept.contains(src) && kept.contains(dst))
        .copied()
        .collect();
    let mut has_child: HashSet<NodeId> = HashSet::new();
    for &(src, _) in &edges {
        has_child.insert(src);
    }
    let ends: Vec<NodeId> =
        nodes.iter().map(|n| n.id).filter(|id| !has_child.contains(id)).collect();
    if ends.is_empty() || nodes.len() < 2 {
        return Err(MaskError::InvalidConfig(
            "pruning left no complete hypothesis".into(),
        ));
    }
    let mut pruned = Lattice::from_parts(nodes, edges, lattice.root(), ends);
    pruned.set_vocab(lattice.vocab().cloned());
    Ok(pruned)
}
