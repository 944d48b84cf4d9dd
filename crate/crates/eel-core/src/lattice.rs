//! Hypothesis lattice: a DAG of token nodes encoding a candidate set.
//!
//! Every root→end path spells one generation hypothesis. Lattices are
//! immutable after construction; all traversal orders are deterministic
//! (smallest-id-first tie-breaking) so downstream runs are reproducible.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token id carried by the virtual root node (a BOS stand-in).
pub const ROOT_TOKEN: u32 = 0;

/// Identifier of a lattice node, unique within one lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One lattice node: a token with its model log-probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub token: u32,
    /// Natural-log probability of this token under the base model, ≤ 0.
    /// The virtual root carries 0.
    pub logprob: f32,
}

/// A root→end hypothesis through the lattice. `node_ids` excludes the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub node_ids: Vec<NodeId>,
    /// Sum of per-node scores along the path.
    pub raw_score: f32,
    /// `raw_score` divided by the path length in nodes.
    pub norm_score: f32,
}

impl Path {
    /// Build a path from a node sequence and its raw score.
    pub fn scored(node_ids: Vec<NodeId>, raw_score: f32) -> Path {
        let norm_score = raw_score / node_ids.len() as f32;
        Path { node_ids, raw_score, norm_score }
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("candidate {index} is empty")]
    EmptyCandidate { index: usize },
    #[error("candidate {index}: {tokens} tokens but {logprobs} logprobs")]
    LengthMismatch { index: usize, tokens: usize, logprobs: usize },
    #[error("parameter out of range: {0}")]
    ParamOutOfRange(String),
    #[error("path count exceeds limit {limit}")]
    PathLimitExceeded { limit: u64 },
    #[error("cycle detected: back edge {src} -> {dst}")]
    CycleDetected { src: NodeId, dst: NodeId },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("lattice is invalid: {0}")]
    Invalid(String),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("parse error")]
    Parse(#[from] serde_json::Error),
}

/// A single invariant violation found by [`Lattice::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    DuplicateNodeId(NodeId),
    RootMissing(NodeId),
    NoEnds,
    EndMissing(NodeId),
    DanglingEdge(NodeId, NodeId),
    SelfLoop(NodeId),
    DuplicateEdge(NodeId, NodeId),
    RootHasIncoming(NodeId),
    RootIsEnd,
    EndHasOutgoing(NodeId, NodeId),
    Cycle(Vec<NodeId>),
    Unreachable(NodeId),
    CannotReachEnd(NodeId),
    NonFiniteLogprob(NodeId),
    PositiveLogprob(NodeId),
    RootLogprobNonzero(NodeId),
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::DuplicateNodeId(id) => write!(f, "duplicate node id {id}"),
            Diagnostic::RootMissing(id) => write!(f, "root {id} is not a node"),
            Diagnostic::NoEnds => write!(f, "end set is empty"),
            Diagnostic::EndMissing(id) => write!(f, "end {id} is not a node"),
            Diagnostic::DanglingEdge(s, d) => write!(f, "dangling edge {s} -> {d}"),
            Diagnostic::SelfLoop(id) => write!(f, "self-loop on node {id}"),
            Diagnostic::DuplicateEdge(s, d) => write!(f, "duplicate edge {s} -> {d}"),
            Diagnostic::RootHasIncoming(s) => write!(f, "root has incoming edge from {s}"),
            Diagnostic::RootIsEnd => write!(f, "root has no outgoing edges"),
            Diagnostic::EndHasOutgoing(e, d) => write!(f, "end {e} has outgoing edge to {d}"),
            Diagnostic::Cycle(ids) => {
                write!(f, "cycle through nodes ")?;
                for (i, id) in ids.iter().enumerate() {
                    if i > 0 {
                        write!(f, " -> ")?;
                    }
                    write!(f, "{id}")?;
                }
                Ok(())
            }
            Diagnostic::Unreachable(id) => write!(f, "node {id} unreachable from root"),
            Diagnostic::CannotReachEnd(id) => write!(f, "node {id} reaches no end node"),
            Diagnostic::NonFiniteLogprob(id) => write!(f, "node {id} has non-finite logprob"),
            Diagnostic::PositiveLogprob(id) => write!(f, "node {id} has logprob > 0"),
            Diagnostic::RootLogprobNonzero(id) => write!(f, "root {id} has nonzero logprob"),
        }
    }
}

/// Serialized lattice file layout. `vocab` maps token ids to surface strings
/// and is carried through untouched; no algorithm reads it.
#[derive(Debug, Serialize, Deserialize)]
struct LatticeFile {
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
    root: NodeId,
    ends: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<BTreeMap<u32, String>>,
}

/// Directed acyclic graph of token nodes with a single virtual root.
#[derive(Debug, Clone)]
pub struct Lattice {
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
    root: NodeId,
    ends: Vec<NodeId>,
    vocab: Option<BTreeMap<u32, String>>,
    index: HashMap<NodeId, usize>,
    children: HashMap<NodeId, Vec<NodeId>>,
    parents: HashMap<NodeId, Vec<NodeId>>,
}

impl Lattice {
    /// Assemble a lattice from raw parts without checking invariants.
    /// Use [`Lattice::validate`] to obtain diagnostics for suspect input.
    pub fn from_parts(
        nodes: Vec<Node>,
        edges: Vec<(NodeId, NodeId)>,
        root: NodeId,
        mut ends: Vec<NodeId>,
    ) -> Lattice {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            index.entry(n.id).or_insert(i);
        }
        let mut children: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        let mut parents: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for &(src, dst) in &edges {
            if index.contains_key(&src) && index.contains_key(&dst) && src != dst {
                children.entry(src).or_default().push(dst);
                parents.entry(dst).or_default().push(src);
            }
        }
        for v in children.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        for v in parents.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        ends.sort_unstable();
        ends.dedup();
        Lattice { nodes, edges, root, ends, vocab: None, index, children, parents }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn ends(&self) -> &[NodeId] {
        &self.ends
    }

    pub fn vocab(&self) -> Option<&BTreeMap<u32, String>> {
        self.vocab.as_ref()
    }

    pub fn set_vocab(&mut self, vocab: Option<BTreeMap<u32, String>>) {
        self.vocab = vocab;
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn token(&self, id: NodeId) -> Result<u32, LatticeError> {
        self.node(id).map(|n| n.token).ok_or(LatticeError::UnknownNode(id))
    }

    pub fn logprob(&self, id: NodeId) -> Result<f32, LatticeError> {
        self.node(id).map(|n| n.logprob).ok_or(LatticeError::UnknownNode(id))
    }

    /// Children of `id`, ascending by node id.
    pub fn children_of(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Parents of `id`, ascending by node id.
    pub fn parents_of(&self, id: NodeId) -> &[NodeId] {
        self.parents.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_end(&self, id: NodeId) -> bool {
        self.ends.binary_search(&id).is_ok()
    }

    /// A node with more than one parent was produced by recombination.
    pub fn has_reentrancy(&self) -> bool {
        self.nodes.iter().any(|n| self.parents_of(n.id).len() > 1)
    }

    /// Token sequence along a path of node ids.
    pub fn path_tokens(&self, path: &[NodeId]) -> Result<Vec<u32>, LatticeError> {
        path.iter().map(|&id| self.token(id)).collect()
    }

    /// True if `path` walks existing edges and terminates at an end node.
    pub fn contains_path(&self, path: &[NodeId]) -> bool {
        let Some(&first) = path.first() else { return false };
        if !self.children_of(self.root).contains(&first) {
            return false;
        }
        for w in path.windows(2) {
            if !self.children_of(w[0]).contains(&w[1]) {
                return false;
            }
        }
        self.is_end(*path.last().unwrap())
    }

    /// Kahn's algorithm with a smallest-id-first frontier; root comes first
    /// on valid lattices. Reports a back edge if a cycle blocks completion.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, LatticeError> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;

        let mut indegree: HashMap<NodeId, usize> =
            self.nodes.iter().map(|n| (n.id, 0)).collect();
        for n in &self.nodes {
            for &c in self.children_of(n.id) {
                *indegree.get_mut(&c).unwrap() += 1;
            }
        }
        let mut heap: BinaryHeap<Reverse<NodeId>> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| Reverse(id))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = heap.pop() {
            order.push(id);
            for &c in self.children_of(id) {
                let d = indegree.get_mut(&c).unwrap();
                *d -= 1;
                if *d == 0 {
                    heap.push(Reverse(c));
                }
            }
        }
        if order.len() < self.nodes.len() {
            let remaining: HashSet<NodeId> = self
                .nodes
                .iter()
                .map(|n| n.id)
                .filter(|id| !order.contains(id))
                .collect();
            let mut back = None;
            for n in &self.nodes {
                if !remaining.contains(&n.id) {
                    continue;
                }
                for &c in self.children_of(n.id) {
                    if remaining.contains(&c) {
                        let cand = (n.id, c);
                        if back.map_or(true, |b| cand < b) {
                            back = Some(cand);
                        }
                    }
                }
            }
            let (src, dst) = back.expect("stalled Kahn frontier implies a remaining edge");
            return Err(LatticeError::CycleDetected { src, dst });
        }
        Ok(order)
    }

    /// Enumerate all distinct root→end paths (root excluded) depth-first,
    /// children in ascending id order. Errors once the count would exceed
    /// `max_paths`, signalling the caller to sample instead.
    pub fn explode(&self, max_paths: u64) -> Result<Vec<Vec<NodeId>>, LatticeError> {
        let mut paths: Vec<Vec<NodeId>> = Vec::new();
        let mut stack: Vec<(NodeId, usize)> = vec![(self.root, 0)];
        let mut current: Vec<NodeId> = Vec::new();
        while let Some(&mut (node, ref mut cursor)) = stack.last_mut() {
            let kids = self.children_of(node);
            if *cursor == 0 && kids.is_empty() && node != self.root {
                if paths.len() as u64 >= max_paths {
                    return Err(LatticeError::PathLimitExceeded { limit: max_paths });
                }
                paths.push(current.clone());
            }
            if *cursor < kids.len() {
                let next = kids[*cursor];
                *cursor += 1;
                stack.push((next, 0));
                current.push(next);
            } else {
                stack.pop();
                if node != self.root {
                    current.pop();
                }
            }
        }
        Ok(paths)
    }

    /// Check every lattice invariant and return all violations found.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();

        let mut seen = HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                diags.push(Diagnostic::DuplicateNodeId(n.id));
            }
            if !n.logprob.is_finite() {
                diags.push(Diagnostic::NonFiniteLogprob(n.id));
            } else if n.id == self.root {
                if n.logprob != 0.0 {
                    diags.push(Diagnostic::RootLogprobNonzero(n.id));
                }
            } else if n.logprob > 0.0 {
                diags.push(Diagnostic::PositiveLogprob(n.id));
            }
        }

        if !self.index.contains_key(&self.root) {
            diags.push(Diagnostic::RootMissing(self.root));
        }
        if self.ends.is_empty() {
            diags.push(Diagnostic::NoEnds);
        }
        for &e in &self.ends {
            if !self.index.contains_key(&e) {
                diags.push(Diagnostic::EndMissing(e));
            }
        }

        let mut edge_seen = HashSet::new();
        for &(src, dst) in &self.edges {
            if !self.index.contains_key(&src) || !self.index.contains_key(&dst) {
                diags.push(Diagnostic::DanglingEdge(src, dst));
                continue;
            }
            if src == dst {
                diags.push(Diagnostic::SelfLoop(src));
                continue;
            }
            if !edge_seen.insert((src, dst)) {
                diags.push(Diagnostic::DuplicateEdge(src, dst));
            }
            if dst == self.root {
                diags.push(Diagnostic::RootHasIncoming(src));
            }
            if self.is_end(src) {
                diags.push(Diagnostic::EndHasOutgoing(src, dst));
            }
        }

        if self.index.contains_key(&self.root) && self.children_of(self.root).is_empty() {
            diags.push(Diagnostic::RootIsEnd);
        }

        if let Some(cycle) = self.find_cycle() {
            diags.push(Diagnostic::Cycle(cycle));
        } else {
            // Reachability is only meaningful on an acyclic edge set.
            let mut reach: HashSet<NodeId> = HashSet::new();
            let mut frontier = vec![self.root];
            while let Some(v) = frontier.pop() {
                if reach.insert(v) {
                    frontier.extend(self.children_of(v).iter().copied());
                }
            }
            let mut coreach: HashSet<NodeId> = HashSet::new();
            let mut frontier: Vec<NodeId> =
                self.ends.iter().copied().filter(|e| self.index.contains_key(e)).collect();
            while let Some(v) = frontier.pop() {
                if coreach.insert(v) {
                    frontier.extend(self.parents_of(v).iter().copied());
                }
            }
            for n in &self.nodes {
                if !reach.contains(&n.id) {
                    diags.push(Diagnostic::Unreachable(n.id));
                }
                if !coreach.contains(&n.id) {
                    diags.push(Diagnostic::CannotReachEnd(n.id));
                }
            }
        }

        diags
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Locate one directed cycle via iterative three-color DFS.
    fn find_cycle(&self) -> Option<Vec<NodeId>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Color {
            White,
            Gray,
            Black,
        }
        let mut color: HashMap<NodeId, Color> =
            self.nodes.iter().map(|n| (n.id, Color::White)).collect();
        let mut roots: Vec<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        roots.sort_unstable();
        for start in roots {
            if color[&start] != Color::White {
                continue;
            }
            let mut stack: Vec<(NodeId, usize)> = vec![(start, 0)];
            color.insert(start, Color::Gray);
            while let Some(&mut (node, ref mut cursor)) = stack.last_mut() {
                let kids = self.children_of(node);
                if *cursor < kids.len() {
                    let next = kids[*cursor];
                    *cursor += 1;
                    match color.get(&next) {
                        Some(Color::Gray) => {
                            let pos = stack.iter().position(|&(n, _)| n == next).unwrap();
                            return Some(stack[pos..].iter().map(|&(n, _)| n).collect());
                        }
                        Some(Color::White) => {
                            color.insert(next, Color::Gray);
                            stack.push((next, 0));
                        }
                        _ => {}
                    }
                } else {
                    color.insert(node, Color::Black);
                    stack.pop();
                }
            }
        }
        None
    }

    // ── serialization ──────────────────────────────────────────────────

    pub fn to_json_string(&self) -> String {
        let file = LatticeFile {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
            root: self.root,
            ends: self.ends.clone(),
            vocab: self.vocab.clone(),
        };
        serde_json::to_string(&file).expect("lattice serialization cannot fail")
    }

    pub fn to_json_pretty(&self) -> String {
        let file = LatticeFile {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
            root: self.root,
            ends: self.ends.clone(),
            vocab: self.vocab.clone(),
        };
        serde_json::to_string_pretty(&file).expect("lattice serialization cannot fail")
    }

    pub fn from_json_str(s: &str) -> Result<Lattice, LatticeError> {
        let file: LatticeFile = serde_json::from_str(s)?;
        let mut lat = Lattice::from_parts(file.nodes, file.edges, file.root, file.ends);
        lat.vocab = file.vocab;
        Ok(lat)
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<(), LatticeError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn read_file(path: &std::path::Path) -> Result<Lattice, LatticeError> {
        let s = std::fs::read_to_string(path)?;
        Lattice::from_json_str(&s)
    }
}

/// Pack a candidate set into a prefix trie. Shared prefixes merge; suffixes
/// never do, so the result is reentrancy-free. A candidate that is a proper
/// prefix of another gets its own leaf for the final token, keeping end
/// nodes free of outgoing edges. Duplicate candidates collapse to one path.
/// On a prefix merge the first-seen logprob is kept.
pub fn pack_candidates(
    candidates: &[Vec<u32>],
    logprobs: &[Vec<f32>],
) -> Result<Lattice, LatticeError> {
    if candidates.is_empty() {
        return Err(LatticeError::EmptyCandidates);
    }
    if candidates.len() != logprobs.len() {
        return Err(LatticeError::LengthMismatch {
            index: candidates.len().min(logprobs.len()),
            tokens: candidates.len(),
            logprobs: logprobs.len(),
        });
    }
    for (i, (c, lp)) in candidates.iter().zip(logprobs).enumerate() {
        if c.is_empty() {
            return Err(LatticeError::EmptyCandidate { index: i });
        }
        if c.len() != lp.len() {
            return Err(LatticeError::LengthMismatch {
                index: i,
                tokens: c.len(),
                logprobs: lp.len(),
            });
        }
    }

    struct TrieNode {
        token: u32,
        logprob: f32,
        is_end: bool,
        children: Vec<usize>,
    }
    let mut trie = vec![TrieNode {
        token: ROOT_TOKEN,
        logprob: 0.0,
        is_end: false,
        children: Vec::new(),
    }];
    let mut edges: Vec<(NodeId, NodeId)> = Vec::new();

    for (cand, lps) in candidates.iter().zip(logprobs) {
        let mut cur = 0usize;
        let last = cand.len() - 1;
        for (i, (&tok, &lp)) in cand.iter().zip(lps).enumerate() {
            let want_end = i == last;
            let found = trie[cur]
                .children
                .iter()
                .copied()
                .find(|&c| trie[c].token == tok && trie[c].is_end == want_end);
            cur = match found {
                Some(c) => c,
                None => {
                    let id = trie.len();
                    trie.push(TrieNode {
                        token: tok,
                        logprob: lp,
                        is_end: want_end,
                        children: Vec::new(),
                    });
                    trie[cur].children.push(id);
                    edges.push((NodeId(cur as u32), NodeId(id as u32)));
                    id
                }
            };
        }
    }

    let nodes: Vec<Node> = trie
        .iter()
        .enumerate()
        .map(|(i, t)| Node { id: NodeId(i as u32), token: t.token, logprob: t.logprob })
        .collect();
    let ends: Vec<NodeId> = trie
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_end)
        .map(|(i, _)| NodeId(i as u32))
        .collect();
    Ok(Lattice::from_parts(nodes, edges, NodeId(0), ends))
}

/// Build a seeded test lattice: `n_chains` parallel chains of `chain_len`
/// token nodes. Each chain node that still has a successor may, with
/// probability `merge_prob`, grow one extra edge into the equal-depth node
/// of another chain, creating a reentrancy there. Merges only add in-edges,
/// so validity and the per-chain paths are preserved.
pub fn generate_synthetic(
    seed: u64,
    n_chains: usize,
    chain_len: usize,
    merge_prob: f64,
    vocab: u32,
) -> Result<Lattice, LatticeError> {
    use rand::Rng;
    use rand::SeedableRng;

    if n_chains < 1 {
        return Err(LatticeError::ParamOutOfRange("n_chains must be >= 1".into()));
    }
    if chain_len < 1 {
        return Err(LatticeError::ParamOutOfRange("chain_len must be >= 1".into()));
    }
    if vocab < 2 {
        return Err(LatticeError::ParamOutOfRange("vocab must be >= 2".into()));
    }
    if !(0.0..=1.0).contains(&merge_prob) {
        return Err(LatticeError::ParamOutOfRange("merge_prob must be in [0, 1]".into()));
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let root = NodeId(0);
    let mut nodes = vec![Node { id: root, token: ROOT_TOKEN, logprob: 0.0 }];
    let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
    let mut ends: Vec<NodeId> = Vec::new();

    let chain_node = |c: usize, d: usize| NodeId((1 + c * chain_len + d) as u32);

    for c in 0..n_chains {
        for d in 0..chain_len {
            let id = chain_node(c, d);
            let token = rng.gen_range(0..vocab);
            let logprob = -rng.gen_range(0.05f32..2.5);
            nodes.push(Node { id, token, logprob });
            let prev = if d == 0 { root } else { chain_node(c, d - 1) };
            edges.push((prev, id));
        }
        ends.push(chain_node(c, chain_len - 1));
    }

    if n_chains > 1 {
        for c in 0..n_chains {
            for d in 0..chain_len - 1 {
                if rng.gen_bool(merge_prob) {
                    let mut other = rng.gen_range(0..n_chains - 1);
                    if other >= c {
                        other += 1;
                    }
                    edges.push((chain_node(c, d), chain_node(other, d + 1)));
                }
            }
        }
    }

    Ok(Lattice::from_parts(nodes, edges, root, ends))
}

/// Seeded random valid lattice over `n_nodes` nodes (node 0 is the root).
/// Every non-root node gets one forced parent among earlier nodes plus
/// extra earlier parents with probability `edge_prob`, so the graph is
/// acyclic, fully reachable, and its sinks are the ends. Used for
/// randomized equivalence testing.
pub fn random_dag(seed: u64, n_nodes: usize, edge_prob: f64, vocab: u32) -> Lattice {
    use rand::Rng;
    use rand::SeedableRng;

    assert!(n_nodes >= 2, "random_dag needs at least a root and one node");
    assert!(vocab >= 2);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![Node { id: NodeId(0), token: ROOT_TOKEN, logprob: 0.0 }];
    let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
    for k in 1..n_nodes {
        let token = rng.gen_range(0..vocab);
        let logprob = -rng.gen_range(0.05f32..3.0);
        nodes.push(Node { id: NodeId(k as u32), token, logprob });
        let forced = rng.gen_range(0..k);
        edges.push((NodeId(forced as u32), NodeId(k as u32)));
        for j in 0..k {
            if j != forced && rng.gen_bool(edge_prob) {
                edges.push((NodeId(j as u32), NodeId(k as u32)));
            }
        }
    }
    let lat = Lattice::from_parts(nodes.clone(), edges.clone(), NodeId(0), Vec::new());
    let ends: Vec<NodeId> = nodes
        .iter()
        .map(|n| n.id)
        .filter(|&id| lat.children_of(id).is_empty() && id != NodeId(0))
        .collect();
    Lattice::from_parts(nodes, edges, NodeId(0), ends)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diamond() -> Lattice {
        // root(0) -> a(1), b(2) -> c(3)
        let nodes = vec![
            Node { id: NodeId(0), token: ROOT_TOKEN, logprob: 0.0 },
            Node { id: NodeId(1), token: 10, logprob: -0.1 },
            Node { id: NodeId(2), token: 11, logprob: -0.9 },
            Node { id: NodeId(3), token: 12, logprob: -0.5 },
        ];
        let edges = vec![
            (NodeId(0), NodeId(1)),
            (NodeId(0), NodeId(2)),
            (NodeId(1), NodeId(3)),
            (NodeId(2), NodeId(3)),
        ];
        Lattice::from_parts(nodes, edges, NodeId(0), vec![NodeId(3)])
    }

    #[test]
    fn pack_shares_prefixes() {
        let cands = vec![vec![1, 2, 3], vec![1, 2, 4]];
        let lps = vec![vec![-0.1, -0.2, -0.3], vec![-0.1, -0.2, -0.4]];
        let lat = pack_candidates(&cands, &lps).unwrap();
        // prefix a,b shared; c,d leaves; plus the virtual root
        assert_eq!(lat.node_count(), 5);
        assert_eq!(lat.node_count() - 1, 4); // non-root nodes
        let paths = lat.explode(100).unwrap();
        assert_eq!(paths.len(), 2);
        assert!(lat.is_valid());
    }

    #[test]
    fn pack_singleton() {
        let lat = pack_candidates(&[vec![7]], &[vec![-0.5]]).unwrap();
        assert_eq!(lat.node_count() - 1, 1);
        assert_eq!(lat.explode(10).unwrap(), vec![vec![NodeId(1)]]);
    }

    #[test]
    fn pack_distinct_first_tokens_shares_nothing() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut cands = Vec::new();
        let mut lps = Vec::new();
        for first in 0..12u32 {
            let mut c = vec![first + 100];
            for _ in 1..20 {
                c.push(rng.gen_range(0..1024));
            }
            lps.push(c.iter().map(|_| -rng.gen_range(0.01f32..2.0)).collect::<Vec<_>>());
            cands.push(c);
        }
        let lat = pack_candidates(&cands, &lps).unwrap();
        let total_tokens: usize = cands.iter().map(Vec::len).sum();
        assert_eq!(total_tokens, 240);
        assert_eq!(lat.node_count() - 1, 240);
        assert_eq!(lat.node_count(), 1 + total_tokens);
    }

    #[test]
    fn pack_collapses_duplicates_and_handles_prefix_candidates() {
        let cands = vec![vec![1, 2], vec![1, 2], vec![1, 2, 3]];
        let lps = vec![vec![-0.1, -0.2], vec![-0.1, -0.2], vec![-0.1, -0.2, -0.3]];
        let lat = pack_candidates(&cands, &lps).unwrap();
        let paths = lat.explode(100).unwrap();
        let mut toks: Vec<Vec<u32>> =
            paths.iter().map(|p| lat.path_tokens(p).unwrap()).collect();
        toks.sort();
        assert_eq!(toks, vec![vec![1, 2], vec![1, 2, 3]]);
        assert!(lat.is_valid());
    }

    #[test]
    fn pack_rejects_bad_input() {
        assert!(matches!(
            pack_candidates(&[], &[]),
            Err(LatticeError::EmptyCandidates)
        ));
        assert!(matches!(
            pack_candidates(&[vec![1]], &[vec![-0.1, -0.2]]),
            Err(LatticeError::LengthMismatch { .. })
        ));
        assert!(matches!(
            pack_candidates(&[vec![]], &[vec![]]),
            Err(LatticeError::EmptyCandidate { .. })
        ));
    }

    #[test]
    fn synthetic_no_merges_is_disjoint_chains() {
        let lat = generate_synthetic(3, 4, 6, 0.0, 50).unwrap();
        assert!(lat.is_valid());
        assert_eq!(lat.explode(100).unwrap().len(), 4);
        assert!(!lat.has_reentrancy());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(7, 4, 10, 0.3, 100).unwrap();
        let b = generate_synthetic(7, 4, 10, 0.3, 100).unwrap();
        assert_eq!(a.to_json_string(), b.to_json_string());
    }

    #[test]
    fn synthetic_merges_only_add_paths() {
        let lat = generate_synthetic(7, 4, 10, 0.3, 100).unwrap();
        assert!(lat.is_valid());
        let paths = lat.explode(1_000_000).unwrap();
        assert!(paths.len() >= 4, "merges only add in-edges: {} paths", paths.len());
    }

    #[test]
    fn explode_diamond_and_chain() {
        let lat = diamond();
        let paths = lat.explode(10).unwrap();
        assert_eq!(
            paths,
            vec![vec![NodeId(1), NodeId(3)], vec![NodeId(2), NodeId(3)]]
        );

        let chain = pack_candidates(&[vec![5, 6, 7]], &[vec![-0.1, -0.1, -0.1]]).unwrap();
        assert_eq!(chain.explode(10).unwrap().len(), 1);
    }

    #[test]
    fn explode_respects_limit() {
        let lat = diamond();
        assert!(matches!(
            lat.explode(1),
            Err(LatticeError::PathLimitExceeded { limit: 1 })
        ));
    }

    #[test]
    fn explode_matches_independent_dfs_count() {
        // Second, recursive enumeration as an independent check.
        fn count(lat: &Lattice, v: NodeId) -> u64 {
            let kids = lat.children_of(v);
            if kids.is_empty() {
                return 1;
            }
            kids.iter().map(|&c| count(lat, c)).sum()
        }
        let lat = generate_synthetic(7, 4, 10, 0.3, 100).unwrap();
        let exploded = lat.explode(1_000_000).unwrap().len() as u64;
        assert_eq!(exploded, count(&lat, lat.root()));
    }

    #[test]
    fn topo_chain_and_diamond() {
        let chain = pack_candidates(&[vec![5, 6, 7]], &[vec![-0.1; 3]]).unwrap();
        assert_eq!(
            chain.topo_order().unwrap(),
            vec![NodeId(0), NodeId(1), NodeId(2), NodeId(3)]
        );

        let lat = diamond();
        let order = lat.topo_order().unwrap();
        assert_eq!(order, vec![NodeId(0), NodeId(1), NodeId(2), NodeId(3)]);
    }

    #[test]
    fn topo_respects_all_edges_on_random_dag() {
        let lat = random_dag(5, 12, 0.3, 64);
        let order = lat.topo_order().unwrap();
        assert_eq!(order.len(), lat.node_count());
        let pos: HashMap<NodeId, usize> =
            order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        for &(s, d) in lat.edges() {
            assert!(pos[&s] < pos[&d], "edge {s}->{d} out of order");
        }
    }

    #[test]
    fn topo_detects_cycle() {
        let nodes = vec![
            Node { id: NodeId(0), token: 0, logprob: 0.0 },
            Node { id: NodeId(1), token: 1, logprob: -0.1 },
            Node { id: NodeId(2), token: 2, logprob: -0.1 },
        ];
        let edges = vec![
            (NodeId(0), NodeId(1)),
            (NodeId(1), NodeId(2)),
            (NodeId(2), NodeId(1)),
        ];
        let lat = Lattice::from_parts(nodes, edges, NodeId(0), vec![NodeId(2)]);
        assert!(matches!(lat.topo_order(), Err(LatticeError::CycleDetected { .. })));
    }

    #[test]
    fn validate_accepts_diamond() {
        assert!(diamond().validate().is_empty());
    }

    #[test]
    fn validate_reports_dangling_edge() {
        let nodes = vec![
            Node { id: NodeId(0), token: 0, logprob: 0.0 },
            Node { id: NodeId(1), token: 1, logprob: -0.1 },
        ];
        let edges = vec![(NodeId(0), NodeId(1)), (NodeId(1), NodeId(9))];
        let lat = Lattice::from_parts(nodes, edges, NodeId(0), vec![NodeId(1)]);
        let diags = lat.validate();
        assert_eq!(
            diags
                .iter()
                .filter(|d| matches!(d, Diagnostic::DanglingEdge(_, _)))
                .count(),
            1
        );
    }

    #[test]
    fn validate_names_both_nodes_of_two_cycle() {
        let nodes = vec![
            Node { id: NodeId(0), token: 0, logprob: 0.0 },
            Node { id: NodeId(1), token: 1, logprob: -0.1 },
            Node { id: NodeId(2), token: 2, logprob: -0.1 },
        ];
        let edges = vec![
            (NodeId(0), NodeId(1)),
            (NodeId(1), NodeId(2)),
            (NodeId(2), NodeId(1)),
        ];
        let lat = Lattice::from_parts(nodes, edges, NodeId(0), vec![NodeId(2)]);
        let diags = lat.validate();
        let cycle = diags.iter().find_map(|d| match d {
            Diagnostic::Cycle(ids) => Some(ids.clone()),
            _ => None,
        });
        let cycle = cycle.expect("cycle diagnostic expected");
        assert!(cycle.contains(&NodeId(1)) && cycle.contains(&NodeId(2)));
    }

    #[test]
    fn json_round_trip_preserves_structure() {
        let mut lat = generate_synthetic(7, 3, 5, 0.4, 40).unwrap();
        lat.set_vocab(Some(
            [(1u32, "hello".to_string()), (2, "world".to_string())].into(),
        ));
        let s = lat.to_json_string();
        let back = Lattice::from_json_str(&s).unwrap();
        assert_eq!(back.to_json_string(), s);
        assert!(back.is_valid());
        assert_eq!(back.vocab().unwrap().len(), 2);
    }
}
