//! Token-factored scoring: a small deterministic causal Transformer maps
//! each canvas slot to a scalar score, conditioned only on the slots its
//! attention mask admits. Summing per-node scores along a path therefore
//! reproduces what the model would emit for that hypothesis encoded alone,
//! as long as the mask admits exactly the path's prefix.
//!
//! Everything is f32 and seeded, so reruns are bit-identical. The masked
//! attention adds -1e9 before softmax; the exponent underflows to an exact
//! 0.0, which is what makes single-pass canvas scoring equal per-path
//! scoring instead of merely approximating it.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::lattice::{Lattice, LatticeError, NodeId};
use crate::masking::{Canvas, Mask};

const ATTN_MASK_BIAS: f32 = -1e9;
const LN_EPS: f32 = 1e-5;
const WEIGHT_MAGIC: &[u8; 4] = b"TFRW";
const WEIGHT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("token {token} outside vocab of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("position {position} outside table of {max_position}")]
    PositionOutOfRange { position: u32, max_position: usize },
    #[error("mask is {got}x{got} but input has {expected} slots")]
    MaskSizeMismatch { expected: usize, got: usize },
    #[error("{tokens} tokens but {positions} positions")]
    LengthMismatch { tokens: usize, positions: usize },
    #[error("score maps cover different node sets")]
    DomainMismatch,
    #[error("node {0} has no score")]
    UnscoredNode(NodeId),
    #[error("cannot aggregate an empty path")]
    EmptyPath,
    #[error("invalid scorer spec: {0}")]
    InvalidSpec(String),
    #[error("bad spec line: {0}")]
    BadSpecLine(String),
    #[error("weight file corrupt: {0}")]
    BadWeightFile(String),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Architecture and initialization parameters of the scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScorerSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_position: usize,
    pub seed: u64,
}

impl Default for ScorerSpec {
    fn default() -> Self {
        ScorerSpec {
            vocab_size: 1024,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_position: 512,
            seed: 0,
        }
    }
}

impl ScorerSpec {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_position == 0
        {
            return Err(ScoreError::InvalidSpec("all dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ScoreError::InvalidSpec(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// One `key=value` pair per line, fixed key order.
    pub fn to_kv_string(&self) -> String {
        format!(
            "vocab_size={}\nd_model={}\nn_layers={}\nn_heads={}\nd_ff={}\nmax_position={}\nseed={}\n",
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_position,
            self.seed
        )
    }

    /// Parse `key=value` lines; keys not present keep their defaults,
    /// unknown keys are rejected.
    pub fn from_kv_str(s: &str) -> Result<ScorerSpec, ScoreError> {
        let mut spec = ScorerSpec::default();
        for line in s.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ScoreError::BadSpecLine(line.to_string()))?;
            let bad = |_| ScoreError::BadSpecLine(line.to_string());
            match key.trim() {
                "vocab_size" => spec.vocab_size = value.trim().parse().map_err(bad)?,
                "d_model" => spec.d_model = value.trim().parse().map_err(bad)?,
                "n_layers" => spec.n_layers = value.trim().parse().map_err(bad)?,
                "n_heads" => spec.n_heads = value.trim().parse().map_err(bad)?,
                "d_ff" => spec.d_ff = value.trim().parse().map_err(bad)?,
                "max_position" => spec.max_position = value.trim().parse().map_err(bad)?,
                "seed" => spec.seed = value.trim().parse().map_err(bad)?,
                other => {
                    return Err(ScoreError::BadSpecLine(format!("unknown key {other}")))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-node scalar scores from one scorer pass, with the final hidden
/// states kept around when the scorer produces them (used by the
/// equivalence checks).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    pub per_node: BTreeMap<NodeId, f32>,
    pub hidden: Option<BTreeMap<NodeId, Vec<f32>>>,
}

impl TokenScores {
    pub fn from_scores(per_node: BTreeMap<NodeId, f32>) -> TokenScores {
        TokenScores { per_node, hidden: None }
    }

    pub fn get(&self, id: NodeId) -> Option<f32> {
        self.per_node.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.per_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_node.is_empty()
    }
}

/// Anything that can score a whole canvas in one pass or a single
/// hypothesis on its own. Implementations must be deterministic and
/// reentrant (`&self` only), so canvases can be scored in parallel.
pub trait PathScorer: Send + Sync {
    fn name(&self) -> &'static str;

    /// Score every canvas slot at once; the returned map covers every
    /// node in `canvas.node_order`, root included.
    fn score_canvas(&self, lattice: &Lattice, canvas: &Canvas) -> Result<TokenScores, ScoreError>;

    /// Score one hypothesis in isolation; the returned map covers exactly
    /// the path's nodes (the prepended root slot is scaffolding and gets
    /// no entry).
    fn score_path(&self, lattice: &Lattice, path: &[NodeId]) -> Result<TokenScores, ScoreError>;
}

/// Sum a path's per-node scores; returns `(raw, raw / len)`.
pub fn aggregate(path: &[NodeId], scores: &TokenScores) -> Result<(f32, f32), ScoreError> {
    if path.is_empty() {
        return Err(ScoreError::EmptyPath);
    }
    let mut raw = 0.0f32;
    for &id in path {
        raw += scores.get(id).ok_or(ScoreError::UnscoredNode(id))?;
    }
    Ok((raw, raw / path.len() as f32))
}

/// Per-node base-model log-probabilities as a score map (root scores 0).
pub fn model_score(lattice: &Lattice) -> TokenScores {
    let per_node = lattice.nodes().iter().map(|n| (n.id, n.logprob)).collect();
    TokenScores::from_scores(per_node)
}

/// Combine two score maps over the same node set: `tfr + lambda * model`.
pub fn ensemble(
    tfr: &TokenScores,
    model: &TokenScores,
    lambda: f32,
) -> Result<TokenScores, ScoreError> {
    if tfr.per_node.len() != model.per_node.len()
        || !tfr.per_node.keys().eq(model.per_node.keys())
    {
        return Err(ScoreError::DomainMismatch);
    }
    let per_node = tfr
        .per_node
        .iter()
        .map(|(&id, &s)| (id, s + lambda * model.per_node[&id]))
        .collect();
    Ok(TokenScores::from_scores(per_node))
}

/// Default weight of the base-model term in the ensemble.
pub const DEFAULT_ENSEMBLE_LAMBDA: f32 = 0.75;

// ── the Transformer scorer ─────────────────────────────────────────────

struct LayerNorm {
    gain: Array1<f32>,
    bias: Array1<f32>,
}

impl LayerNorm {
    fn ones(d: usize) -> LayerNorm {
        LayerNorm { gain: Array1::ones(d), bias: Array1::zeros(d) }
    }

    fn apply(&self, x: &mut Array2<f32>) {
        for mut row in x.rows_mut() {
            let d = row.len() as f32;
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
            let inv = (var + LN_EPS).sqrt().recip();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gain[i] + self.bias[i];
            }
        }
    }
}

struct EncoderLayer {
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
    w1: Array2<f32>,
    w2: Array2<f32>,
    ln1: LayerNorm,
    ln2: LayerNorm,
}

/// Deterministic causal Transformer with a scalar head per slot.
///
/// Weights are drawn U[-0.08, 0.08] from a seeded generator in a fixed
/// order (token table, position table, then per layer wq/wk/wv/wo/w1/w2,
/// then the head), LayerNorm gains start at 1 and every bias at 0, so a
/// spec fully determines the scorer.
pub struct CausalScorer {
    spec: ScorerSpec,
    tok_emb: Array2<f32>,
    pos_emb: Array2<f32>,
    layers: Vec<EncoderLayer>,
    head_w: Array1<f32>,
    head_b: f32,
    source: Vec<u32>,
}

impl CausalScorer {
    pub fn new(spec: ScorerSpec) -> Result<CausalScorer, ScoreError> {
        spec.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
        let mut draw = |rows: usize, cols: usize| -> Array2<f32> {
            let data: Vec<f32> =
                (0..rows * cols).map(|_| rng.gen_range(-0.08f32..0.08)).collect();
            Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
        };
        let tok_emb = draw(spec.vocab_size, spec.d_model);
        let pos_emb = draw(spec.max_position, spec.d_model);
        let layers = (0..spec.n_layers)
            .map(|_| EncoderLayer {
                wq: draw(spec.d_model, spec.d_model),
                wk: draw(spec.d_model, spec.d_model),
                wv: draw(spec.d_model, spec.d_model),
                wo: draw(spec.d_model, spec.d_model),
                w1: draw(spec.d_model, spec.d_ff),
                w2: draw(spec.d_ff, spec.d_model),
                ln1: LayerNorm::ones(spec.d_model),
                ln2: LayerNorm::ones(spec.d_model),
            })
            .collect();
        let head_w = draw(1, spec.d_model).row(0).to_owned();
        Ok(CausalScorer {
            spec,
            tok_emb,
            pos_emb,
            layers,
            head_w,
            head_b: 0.0,
            source: Vec::new(),
        })
    }

    pub fn spec(&self) -> &ScorerSpec {
        &self.spec
    }

    /// Condition every lattice slot on a shared source prefix. The prefix
    /// occupies positions `0..len` and shifts all lattice positions up by
    /// `len`; prefix slots attend causally among themselves and are
    /// visible to every lattice slot.
    pub fn with_source(mut self, source: Vec<u32>) -> Result<CausalScorer, ScoreError> {
        for &t in &source {
            if t as usize >= self.spec.vocab_size {
                return Err(ScoreError::TokenOutOfRange {
                    token: t,
                    vocab: self.spec.vocab_size,
                });
            }
        }
        self.source = source;
        Ok(self)
    }

    /// Run the stack over explicit inputs. Returns the final hidden states
    /// (one row per slot) and the scalar score per slot.
    fn forward(
        &self,
        tokens: &[u32],
        positions: &[u32],
        mask: &Mask,
    ) -> Result<(Array2<f32>, Vec<f32>), ScoreError> {
        let n = tokens.len();
        if positions.len() != n {
            return Err(ScoreError::LengthMismatch { tokens: n, positions: positions.len() });
        }
        if mask.n() != n {
            return Err(ScoreError::MaskSizeMismatch { expected: n, got: mask.n() });
        }
        let mut x = Array2::<f32>::zeros((n, self.spec.d_model));
        for (i, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            if t as usize >= self.spec.vocab_size {
                return Err(ScoreError::TokenOutOfRange { token: t, vocab: self.spec.vocab_size });
            }
            if p as usize >= self.spec.max_position {
                return Err(ScoreError::PositionOutOfRange {
                    position: p,
                    max_position: self.spec.max_position,
                });
            }
            let row = &self.tok_emb.row(t as usize) + &self.pos_emb.row(p as usize);
            x.row_mut(i).assign(&row);
        }

        let heads = self.spec.n_heads;
        let dk = self.spec.d_model / heads;
        let scale = (dk as f32).sqrt().recip();
        for layer in &self.layers {
            let q = x.dot(&layer.wq);
            let k = x.dot(&layer.wk);
            let v = x.dot(&layer.wv);
            let mut ctx = Array2::<f32>::zeros((n, self.spec.d_model));
            for h in 0..heads {
                let cols = s![.., h * dk..(h + 1) * dk];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut att = qh.dot(&kh.t());
                att.mapv_inplace(|a| a * scale);
                for i in 0..n {
                    for j in 0..n {
                        if !mask.get(i, j) {
                            att[[i, j]] += ATTN_MASK_BIAS;
                        }
                    }
                }
                for mut row in att.rows_mut() {
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0f32;
                    for a in row.iter_mut() {
                        *a = (*a - max).exp();
                        sum += *a;
                    }
                    for a in row.iter_mut() {
                        *a /= sum;
                    }
                }
                ctx.slice_mut(cols).assign(&att.dot(&vh));
            }
            let attn_out = ctx.dot(&layer.wo);
            x += &attn_out;
            layer.ln1.apply(&mut x);
            let mut ff = x.dot(&layer.w1);
            ff.mapv_inplace(|v| v.max(0.0));
            let ff = ff.dot(&layer.w2);
            x += &ff;
            layer.ln2.apply(&mut x);
        }

        let scores: Vec<f32> = x.rows().into_iter().map(|r| r.dot(&self.head_w) + self.head_b).collect();
        Ok((x, scores))
    }

    /// Tokens/positions/mask for a canvas with the source prefix (if any)
    /// prepended.
    fn assemble(&self, canvas: &Canvas) -> (Vec<u32>, Vec<u32>, Mask) {
        let src = self.source.len();
        let n = canvas.len();
        let mut tokens = Vec::with_capacity(src + n);
        let mut positions = Vec::with_capacity(src + n);
        tokens.extend_from_slice(&self.source);
        positions.extend((0..src).map(|i| i as u32));
        tokens.extend_from_slice(&canvas.tokens);
        positions.extend(canvas.positions.iter().map(|&p| p + src as u32));
        let mut mask = Mask::new(src + n);
        for i in 0..src {
            for j in 0..=i {
                mask.set(i, j);
            }
        }
        for i in 0..n {
            for j in 0..src {
                mask.set(src + i, j);
            }
            for j in 0..n {
                if canvas.mask.get(i, j) {
                    mask.set(src + i, src + j);
                }
            }
        }
        (tokens, positions, mask)
    }

    // ── weight snapshots ───────────────────────────────────────────────

    /// Binary weight dump: magic, version, the `ScorerSpec` dimensions, then
    /// every array in initialization order as little-endian f32.
    pub fn save_weights<W: Write>(&self, mut w: W) -> Result<(), ScoreError> {
        w.write_all(WEIGHT_MAGIC)?;
        w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
        for dim in [
            self.spec.vocab_size,
            self.spec.d_model,
            self.spec.n_layers,
            self.spec.n_heads,
            self.spec.d_ff,
            self.spec.max_position,
        ] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&self.spec.seed.to_le_bytes())?;
        let mut dump = |vals: &mut dyn Iterator<Item = f32>| -> std::io::Result<()> {
            for v in vals {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        dump(&mut self.tok_emb.iter().copied())?;
        dump(&mut self.pos_emb.iter().copied())?;
        for l in &self.layers {
            dump(&mut l.wq.iter().copied())?;
            dump(&mut l.wk.iter().copied())?;
            dump(&mut l.wv.iter().copied())?;
            dump(&mut l.wo.iter().copied())?;
            dump(&mut l.w1.iter().copied())?;
            dump(&mut l.w2.iter().copied())?;
            dump(&mut l.ln1.gain.iter().copied())?;
            dump(&mut l.ln1.bias.iter().copied())?;
            dump(&mut l.ln2.gain.iter().copied())?;
            dump(&mut l.ln2.bias.iter().copied())?;
        }
        dump(&mut self.head_w.iter().copied())?;
        dump(&mut std::iter::once(self.head_b))?;
        Ok(())
    }

    pub fn load_weights<R: Read>(mut r: R) -> Result<CausalScorer, ScoreError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHT_MAGIC {
            return Err(ScoreError::BadWeightFile("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != WEIGHT_VERSION {
            return Err(ScoreError::BadWeightFile("unsupported version".into()));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            r.read_exact(&mut u32buf)?;
            *d = u32::from_le_bytes(u32buf) as usize;
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let spec = ScorerSpec {
            vocab_size: dims[0],
            d_model: dims[1],
            n_layers: dims[2],
            n_heads: dims[3],
            d_ff: dims[4],
            max_position: dims[5],
            seed: u64::from_le_bytes(u64buf),
        };
        spec.validate()?;
        let mut read_arr = |rows: usize, cols: usize| -> Result<Array2<f32>, ScoreError> {
            let mut data = vec![0f32; rows * cols];
            let mut buf = [0u8; 4];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f32::from_le_bytes(buf);
            }
            Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches data"))
        };
        let tok_emb = read_arr(spec.vocab_size, spec.d_model)?;
        let pos_emb = read_arr(spec.max_position, spec.d_model)?;
        let mut layers = Vec::with_capacity(spec.n_layers);
        for _ in 0..spec.n_layers {
            let wq = read_arr(spec.d_model, spec.d_model)?;
            let wk = read_arr(spec.d_model, spec.d_model)?;
            let wv = read_arr(spec.d_model, spec.d_model)?;
            let wo = read_arr(spec.d_model, spec.d_model)?;
            let w1 = read_arr(spec.d_model, spec.d_ff)?;
            let w2 = read_arr(spec.d_ff, spec.d_model)?;
            let ln1_gain = read_arr(1, spec.d_model)?.row(0).to_owned();
            let ln1_bias = read_arr(1, spec.d_model)?.row(0).to_owned();
            let ln2_gain = read_arr(1, spec.d_model)?.row(0).to_owned();
            let ln2_bias = read_arr(1, spec.d_model)?.row(0).to_owned();
            layers.push(EncoderLayer {
                wq,
                wk,
                wv,
                wo,
                w1,
                w2,
                ln1: LayerNorm { gain: ln1_gain, bias: ln1_bias },
                ln2: LayerNorm { gain: ln2_gain, bias: ln2_bias },
            });
        }
        let head_w = read_arr(1, spec.d_model)?.row(0).to_owned();
        let head_b = read_arr(1, 1)?[[0, 0]];
        Ok(CausalScorer { spec, tok_emb, pos_emb, layers, head_w, head_b, source: Vec::new() })
    }
}

impl PathScorer for CausalScorer {
    fn name(&self) -> &'static str {
        "tfr"
    }

    fn score_canvas(&self, _lattice: &Lattice, canvas: &Canvas) -> Result<TokenScores, ScoreError> {
        let (tokens, positions, mask) = self.assemble(canvas);
        let (hidden, scores) = self.forward(&tokens, &positions, &mask)?;
        let src = self.source.len();
        let per_node: BTreeMap<NodeId, f32> = canvas
            .node_order
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, scores[src + i]))
            .collect();
        let hidden_map: BTreeMap<NodeId, Vec<f32>> = canvas
            .node_order
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, hidden.row(src + i).to_vec()))
            .collect();
        Ok(TokenScores { per_node, hidden: Some(hidden_map) })
    }

    fn score_path(&self, lattice: &Lattice, path: &[NodeId]) -> Result<TokenScores, ScoreError> {
        if path.is_empty() {
            return Err(ScoreError::EmptyPath);
        }
        let src = self.source.len();
        let mut tokens = Vec::with_capacity(src + 1 + path.len());
        tokens.extend_from_slice(&self.source);
        tokens.push(lattice.token(lattice.root())?);
        for &id in path {
            tokens.push(lattice.token(id)?);
        }
        let positions: Vec<u32> = (0..tokens.len() as u32).collect();
        let mask = Mask::lower_triangular(tokens.len());
        let (hidden, scores) = self.forward(&tokens, &positions, &mask)?;
        let per_node: BTreeMap<NodeId, f32> = path
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, scores[src + 1 + i]))
            .collect();
        let hidden_map: BTreeMap<NodeId, Vec<f32>> = path
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, hidden.row(src + 1 + i).to_vec()))
            .collect();
        Ok(TokenScores { per_node, hidden: Some(hidden_map) })
    }
}

/// Table scorer: score of a node is a fixed function of its token alone.
/// Used as a cheap stand-in where the scorer's values do not matter but
/// exact DP arithmetic does.
pub struct LookupScorer {
    table: Vec<f32>,
}

impl LookupScorer {
    pub fn new(table: Vec<f32>) -> LookupScorer {
        LookupScorer { table }
    }

    pub fn constant(vocab: usize, value: f32) -> LookupScorer {
        LookupScorer { table: vec![value; vocab] }
    }

    /// Seeded random table over `vocab` entries in [-1, 1).
    pub fn seeded(vocab: usize, seed: u64) -> LookupScorer {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        LookupScorer { table: (0..vocab).map(|_| rng.gen_range(-1.0f32..1.0)).collect() }
    }

    fn score(&self, token: u32) -> Result<f32, ScoreError> {
        self.table
            .get(token as usize)
            .copied()
            .ok_or(ScoreError::TokenOutOfRange { token, vocab: self.table.len() })
    }
}

impl PathScorer for LookupScorer {
    fn name(&self) -> &'static str {
        "lookup"
    }

    fn score_canvas(&self, lattice: &Lattice, canvas: &Canvas) -> Result<TokenScores, ScoreError> {
        let mut per_node = BTreeMap::new();
        for &id in &canvas.node_order {
            per_node.insert(id, self.score(lattice.token(id)?)?);
        }
        Ok(TokenScores::from_scores(per_node))
    }

    fn score_path(&self, lattice: &Lattice, path: &[NodeId]) -> Result<TokenScores, ScoreError> {
        if path.is_empty() {
            return Err(ScoreError::EmptyPath);
        }
        let mut per_node = BTreeMap::new();
        for &id in path {
            per_node.insert(id, self.score(lattice.token(id)?)?);
        }
        Ok(TokenScores::from_scores(per_node))
    }
}

/// Scores every node with its base-model log-probability.
pub struct ModelScorer;

impl PathScorer for ModelScorer {
    fn name(&self) -> &'static str {
        "model-score"
    }

    fn score_canvas(&self, lattice: &Lattice, canvas: &Canvas) -> Result<TokenScores, ScoreError> {
        let mut per_node = BTreeMap::new();
        for &id in &canvas.node_order {
            per_node.insert(id, lattice.logprob(id)?);
        }
        Ok(TokenScores::from_scores(per_node))
    }

    fn score_path(&self, lattice: &Lattice, path: &[NodeId]) -> Result<TokenScores, ScoreError> {
        if path.is_empty() {
            return Err(ScoreError::EmptyPath);
        }
        let mut per_node = BTreeMap::new();
        for &id in path {
            per_node.insert(id, lattice.logprob(id)?);
        }
        Ok(TokenScores::from_scores(per_node))
    }
}

/// `inner + lambda * logprob` per node: the scorer's judgement blended
/// with the base model's own probabilities.
pub struct EnsembleScorer<S> {
    pub inner: S,
    pub lambda: f32,
}

impl<S: PathScorer> EnsembleScorer<S> {
    pub fn new(inner: S, lambda: f32) -> EnsembleScorer<S> {
        EnsembleScorer { inner, lambda }
    }
}

impl<S: PathScorer> PathScorer for EnsembleScorer<S> {
    fn name(&self) -> &'static str {
        "ensemble"
    }

    fn score_canvas(&self, lattice: &Lattice, canvas: &Canvas) -> Result<TokenScores, ScoreError> {
        let base = self.inner.score_canvas(lattice, canvas)?;
        let model = ModelScorer.score_canvas(lattice, canvas)?;
        let mut combined = ensemble(&base, &model, self.lambda)?;
        combined.hidden = base.hidden;
        Ok(combined)
    }

    fn score_path(&self, lattice: &Lattice, path: &[NodeId]) -> Result<TokenScores, ScoreError> {
        let base = self.inner.score_path(lattice, path)?;
        let model = ModelScorer.score_path(lattice, path)?;
        let mut combined = ensemble(&base, &model, self.lambda)?;
        combined.hidden = base.hidden;
        Ok(combined)
    }
}
