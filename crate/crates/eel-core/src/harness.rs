//! Rerank experiments: run one selection method over a lattice and report
//! what it chose, how close it came to the exhaustive oracle, and what it
//! paid for the answer.
//!
//! Accounting rules, applied uniformly: `nodes_scored` counts the per-node
//! scores produced while *selecting* (a canvas pass yields one per lattice
//! node, a per-path pass one per path token); `encoded_candidates` is how
//! many hypotheses those passes covered (all of them for canvas methods,
//! the sampled set otherwise); `cn_ratio` is their quotient. The selected
//! path is re-scored on its own afterwards so reports carry true hypothesis
//! scores — that re-scoring is bookkeeping, not selection, and is not
//! billed. Reports serialize as NDJSON; wall-clock timings are withheld
//! unless asked for, so fixed-seed runs are byte-identical.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::extraction::{best_path, few_mask_select, ExtractError};
use crate::lattice::{Lattice, LatticeError, NodeId, Path};
use crate::masking::{build_canvases, MaskConfig, MaskError, MaskMode, PositionScheme};
use crate::scoring::{aggregate, PathScorer, ScoreError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error("resource limit: {0}")]
    ResourceLimit(String),
}

impl HarnessError {
    /// True when the run failed on a size bound (path blow-up, position
    /// table overflow) rather than bad input.
    pub fn is_resource_limit(&self) -> bool {
        match self {
            HarnessError::ResourceLimit(_) => true,
            HarnessError::Lattice(LatticeError::PathLimitExceeded { .. }) => true,
            HarnessError::Mask(MaskError::PositionOverflow { .. }) => true,
            HarnessError::Score(ScoreError::PositionOutOfRange { .. }) => true,
            HarnessError::Extract(ExtractError::Lattice(
                LatticeError::PathLimitExceeded { .. },
            )) => true,
            _ => false,
        }
    }
}

/// Number of root→end paths, saturating instead of overflowing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathCount {
    pub count: u64,
    pub capped: bool,
}

/// Count hypotheses by summing parent counts down the topological order.
pub fn count_paths(lattice: &Lattice) -> Result<PathCount, LatticeError> {
    let order = lattice.topo_order()?;
    let mut counts: HashMap<NodeId, u128> = HashMap::with_capacity(order.len());
    counts.insert(lattice.root(), 1);
    for &v in &order {
        if v == lattice.root() {
            continue;
        }
        let total = lattice
            .parents_of(v)
            .iter()
            .filter_map(|p| counts.get(p))
            .fold(0u128, |acc, &c| acc.saturating_add(c));
        counts.insert(v, total);
    }
    let total = lattice
        .ends()
        .iter()
        .filter_map(|e| counts.get(e))
        .fold(0u128, |acc, &c| acc.saturating_add(c));
    if total > u64::MAX as u128 {
        Ok(PathCount { count: u64::MAX, capped: true })
    } else {
        Ok(PathCount { count: total as u64, capped: false })
    }
}

/// How sampled baselines walk the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathSampling {
    /// Uniform child choice at each step: cheap, biased toward shallow
    /// regions with high branching.
    EdgeUniform,
    /// Child choice weighted by downstream path counts, which makes the
    /// draw uniform over complete hypotheses.
    PathUniform,
}

/// Draw `n` root→end walks (duplicates possible).
pub fn sample_paths(
    lattice: &Lattice,
    n: usize,
    seed: u64,
    sampling: PathSampling,
) -> Result<Vec<Vec<NodeId>>, HarnessError> {
    let mut down: HashMap<NodeId, u128> = HashMap::new();
    if sampling == PathSampling::PathUniform {
        let order = lattice.topo_order()?;
        for &v in order.iter().rev() {
            let kids = lattice.children_of(v);
            let c = if kids.is_empty() {
                1
            } else {
                kids.iter()
                    .map(|k| down[k])
                    .fold(0u128, |acc, c| acc.saturating_add(c))
            };
            down.insert(v, c);
        }
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(n);
    for _ in 0..n {
        let mut path = Vec::new();
        let mut cur = lattice.root();
        loop {
            let kids = lattice.children_of(cur);
            if kids.is_empty() {
                break;
            }
            cur = match sampling {
                PathSampling::EdgeUniform => kids[rng.gen_range(0..kids.len())],
                PathSampling::PathUniform => {
                    let total: u128 = kids
                        .iter()
                        .map(|k| down[k])
                        .fold(0u128, |acc, c| acc.saturating_add(c));
                    let mut draw = rng.gen_range(0..total);
                    let mut chosen = kids[kids.len() - 1];
                    for &k in kids {
                        let c = down[&k];
                        if draw < c {
                            chosen = k;
                            break;
                        }
                        draw -= c;
                    }
                    chosen
                }
            };
            path.push(cur);
        }
        if path.is_empty() || !lattice.is_end(*path.last().unwrap()) {
            return Err(HarnessError::Lattice(LatticeError::Invalid(
                "walk ended off the end set; lattice is malformed".into(),
            )));
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Seconds spent in each phase of a run.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PhaseTimings {
    pub prepare_s: f64,
    pub encode_s: f64,
    pub extract_s: f64,
}

/// Outcome of one rerank run over one lattice.
#[derive(Debug, Clone)]
pub struct RerankReport {
    /// Method label, e.g. `eel-16-mask` or `exhaustive`.
    pub method: String,
    pub scorer: String,
    pub selected_tokens: Vec<u32>,
    pub selected_nodes: Vec<NodeId>,
    /// True per-hypothesis scores of the selected path.
    pub raw_score: f32,
    pub norm_score: f32,
    /// Exhaustive top-1 normalized score, once known.
    pub oracle_score: Option<f32>,
    /// `oracle_score - norm_score`; 0 means the method found the optimum.
    pub degradation: Option<f32>,
    /// Size of the candidate set |H|.
    pub candidates: u64,
    pub candidates_capped: bool,
    /// Lattice size |V| (root included).
    pub nodes: usize,
    pub encoded_candidates: u64,
    pub nodes_scored: u64,
    /// encoded_candidates / nodes_scored.
    pub cn_ratio: f64,
    pub timings: PhaseTimings,
}

/// Serialized view; field order here fixes the NDJSON key order.
#[derive(Serialize)]
struct ReportRecord<'a> {
    method: &'a str,
    scorer: &'a str,
    selected_tokens: &'a [u32],
    selected_nodes: &'a [NodeId],
    raw_score: f32,
    norm_score: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_score: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    degradation: Option<f32>,
    candidates: u64,
    candidates_capped: bool,
    nodes: usize,
    encoded_candidates: u64,
    nodes_scored: u64,
    cn_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    timings: Option<&'a PhaseTimings>,
}

impl RerankReport {
    /// Record the oracle and the gap to it.
    pub fn set_oracle(&mut self, oracle_norm: f32) {
        self.oracle_score = Some(oracle_norm);
        self.degradation = Some(oracle_norm - self.norm_score);
    }

    /// One NDJSON line. Timings are opt-in: they change run to run and
    /// would break byte-identical output.
    pub fn to_ndjson(&self, include_timings: bool) -> String {
        let record = ReportRecord {
            method: &self.method,
            scorer: &self.scorer,
            selected_tokens: &self.selected_tokens,
            selected_nodes: &self.selected_nodes,
            raw_score: self.raw_score,
            norm_score: self.norm_score,
            oracle_score: self.oracle_score,
            degradation: self.degradation,
            candidates: self.candidates,
            candidates_capped: self.candidates_capped,
            nodes: self.nodes,
            encoded_candidates: self.encoded_candidates,
            nodes_scored: self.nodes_scored,
            cn_ratio: self.cn_ratio,
            timings: include_timings.then_some(&self.timings),
        };
        serde_json::to_string(&record).expect("report serialization cannot fail")
    }
}

/// Write reports as NDJSON, one line each.
pub fn write_ndjson<W: Write>(
    mut w: W,
    reports: &[RerankReport],
    include_timings: bool,
) -> std::io::Result<()> {
    for r in reports {
        writeln!(w, "{}", r.to_ndjson(include_timings))?;
    }
    Ok(())
}

fn finish_report(
    lattice: &Lattice,
    method: String,
    scorer_name: &str,
    selected: Path,
    pool: PathCount,
    encoded_candidates: u64,
    nodes_scored: u64,
    timings: PhaseTimings,
) -> Result<RerankReport, HarnessError> {
    let selected_tokens = lattice.path_tokens(&selected.node_ids)?;
    Ok(RerankReport {
        method,
        scorer: scorer_name.to_string(),
        selected_tokens,
        selected_nodes: selected.node_ids,
        raw_score: selected.raw_score,
        norm_score: selected.norm_score,
        oracle_score: None,
        degradation: None,
        candidates: pool.count,
        candidates_capped: pool.capped,
        nodes: lattice.node_count(),
        encoded_candidates,
        nodes_scored,
        cn_ratio: encoded_candidates as f64 / nodes_scored as f64,
        timings,
    })
}

/// Score every hypothesis on its own and keep the top-1 by normalized
/// score. This is the oracle the other methods are measured against; its
/// own report carries degradation 0.
pub fn run_exhaustive<S: PathScorer + ?Sized>(
    lattice: &Lattice,
    scorer: &S,
    max_paths: u64,
) -> Result<RerankReport, HarnessError> {
    let t0 = Instant::now();
    let paths = lattice.explode(max_paths)?;
    let pool = count_paths(lattice)?;
    let prepare_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let scored: Vec<(f32, f32)> = paths
        .par_iter()
        .map(|p| -> Result<(f32, f32), HarnessError> {
            let scores = scorer.score_path(lattice, p)?;
            Ok(aggregate(p, &scores)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let encode_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let mut best = 0usize;
    for (i, &(_, norm)) in scored.iter().enumerate() {
        if norm > scored[best].1 {
            best = i;
        }
    }
    let nodes_scored: u64 = paths.iter().map(|p| p.len() as u64).sum();
    let (raw, norm) = scored[best];
    let selected = Path { node_ids: paths[best].clone(), raw_score: raw, norm_score: norm };
    let extract_s = t2.elapsed().as_secs_f64();

    let mut report = finish_report(
        lattice,
        "exhaustive".to_string(),
        scorer.name(),
        selected,
        pool,
        paths.len() as u64,
        nodes_scored,
        PhaseTimings { prepare_s, encode_s, extract_s },
    )?;
    report.set_oracle(report.norm_score);
    Ok(report)
}

/// Sample `n` hypotheses, score each on its own, keep the best. With
/// `n = 1` this is the RAND baseline (label `rand`); otherwise the label
/// is `tfr-{n}-samp`.
pub fn run_sampled<S: PathScorer + ?Sized>(
    lattice: &Lattice,
    scorer: &S,
    n: usize,
    seed: u64,
    sampling: PathSampling,
    normalize: bool,
) -> Result<RerankReport, HarnessError> {
    if n < 1 {
        return Err(HarnessError::ResourceLimit("sample count must be >= 1".into()));
    }
    let t0 = Instant::now();
    let walks = sample_paths(lattice, n, seed, sampling)?;
    let pool = count_paths(lattice)?;
    let mut unique: Vec<Vec<NodeId>> = Vec::new();
    let mut seen: HashSet<Vec<NodeId>> = HashSet::new();
    for w in walks {
        if seen.insert(w.clone()) {
            unique.push(w);
        }
    }
    let prepare_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let scored: Vec<(f32, f32)> = unique
        .par_iter()
        .map(|p| -> Result<(f32, f32), HarnessError> {
            let scores = scorer.score_path(lattice, p)?;
            Ok(aggregate(p, &scores)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let encode_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let mut best = 0usize;
    for (i, s) in scored.iter().enumerate() {
        let key = |s: &(f32, f32)| if normalize { s.1 } else { s.0 };
        if key(s) > key(&scored[best]) {
            best = i;
        }
    }
    let nodes_scored: u64 = unique.iter().map(|p| p.len() as u64).sum();
    let (raw, norm) = scored[best];
    let selected = Path { node_ids: unique[best].clone(), raw_score: raw, norm_score: norm };
    let extract_s = t2.elapsed().as_secs_f64();

    let method = if n == 1 { "rand".to_string() } else { format!("tfr-{n}-samp") };
    finish_report(
        lattice,
        method,
        scorer.name(),
        selected,
        pool,
        unique.len() as u64,
        nodes_scored,
        PhaseTimings { prepare_s, encode_s, extract_s },
    )
}

fn eel_method_label(config: &MaskConfig) -> String {
    match config.mode {
        MaskMode::SingleContext => format!("eel-{}-mask", config.m),
        MaskMode::Bidirectional => "eel-bidirectional".to_string(),
        MaskMode::FullCausal => match config.position_scheme {
            PositionScheme::Canonical => "eel-full-context".to_string(),
            PositionScheme::CanvasIndex => "eel-default-pos".to_string(),
        },
    }
}

/// Encode the whole lattice in one pass per canvas, extract the best path
/// by dynamic programming, then re-score that path alone so the report
/// carries its true hypothesis score (the re-scoring is not billed to
/// `nodes_scored`).
pub fn run_eel<S: PathScorer + ?Sized>(
    lattice: &Lattice,
    scorer: &S,
    config: &MaskConfig,
    normalize: bool,
) -> Result<RerankReport, HarnessError> {
    let t0 = Instant::now();
    let canvases = build_canvases(lattice, config)?;
    let pool = count_paths(lattice)?;
    let prepare_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let (skeleton, nodes_scored) = match config.mode {
        MaskMode::SingleContext => {
            let sel = few_mask_select(lattice, &canvases, scorer, normalize)?;
            (sel.best, sel.nodes_scored)
        }
        _ => {
            let scores = scorer.score_canvas(lattice, &canvases[0])?;
            let path = best_path(lattice, &scores, normalize)?;
            (path, scores.len() as u64)
        }
    };
    // true score of the winner, measured like the oracle measures it
    let true_scores = scorer.score_path(lattice, &skeleton.node_ids)?;
    let (raw, norm) = aggregate(&skeleton.node_ids, &true_scores)?;
    let encode_s = t1.elapsed().as_secs_f64();

    let selected = Path { node_ids: skeleton.node_ids, raw_score: raw, norm_score: norm };
    finish_report(
        lattice,
        eel_method_label(config),
        scorer.name(),
        selected,
        pool,
        pool.count,
        nodes_scored,
        PhaseTimings { prepare_s, encode_s, extract_s: 0.0 },
    )
}

/// The comparison grid: full-causal, 1/8/16-mask, degraded positions,
/// degraded (bidirectional) mask, RAND, and the exhaustive oracle, all on
/// one lattice, all with the oracle gap filled in.
pub fn run_ablation<S: PathScorer + ?Sized>(
    lattice: &Lattice,
    scorer: &S,
    seed: u64,
    max_paths: u64,
    normalize: bool,
) -> Result<Vec<RerankReport>, HarnessError> {
    let exhaustive = run_exhaustive(lattice, scorer, max_paths)?;
    let oracle = exhaustive.norm_score;

    let base = MaskConfig { seed, ..MaskConfig::default() };
    let mut rows = Vec::with_capacity(8);
    rows.push(run_eel(lattice, scorer, &base, normalize)?);
    for m in [1usize, 8, 16] {
        let config = MaskConfig { mode: MaskMode::SingleContext, m, ..base.clone() };
        rows.push(run_eel(lattice, scorer, &config, normalize)?);
    }
    rows.push(run_eel(
        lattice,
        scorer,
        &MaskConfig { position_scheme: PositionScheme::CanvasIndex, ..base.clone() },
        normalize,
    )?);
    rows.push(run_eel(
        lattice,
        scorer,
        &MaskConfig { mode: MaskMode::Bidirectional, ..base.clone() },
        normalize,
    )?);
    rows.push(run_sampled(lattice, scorer, 1, seed, PathSampling::PathUniform, normalize)?);
    for row in &mut rows {
        row.set_oracle(oracle);
    }
    rows.push(exhaustive);
    Ok(rows)
}

/// Which method a batch run should execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSpec {
    Exhaustive,
    Rand,
    Sampled { n: usize },
    EelFullContext,
    EelDefaultPos,
    EelBidirectional,
    EelFewMask { m: usize },
}

impl MethodSpec {
    /// Parse a method label as printed in reports, e.g. `eel-8-mask`,
    /// `tfr-16-samp`, `rand`, `exhaustive`.
    pub fn parse(s: &str) -> Result<MethodSpec, String> {
        match s {
            "exhaustive" => return Ok(MethodSpec::Exhaustive),
            "rand" => return Ok(MethodSpec::Rand),
            "eel-full-context" => return Ok(MethodSpec::EelFullContext),
            "eel-default-pos" => return Ok(MethodSpec::EelDefaultPos),
            "eel-bidirectional" => return Ok(MethodSpec::EelBidirectional),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("eel-") {
            if let Some(m) = rest.strip_suffix("-mask") {
                if let Ok(m) = m.parse::<usize>() {
                    if m >= 1 {
                        return Ok(MethodSpec::EelFewMask { m });
                    }
                }
            }
        }
        if let Some(rest) = s.strip_prefix("tfr-") {
            if let Some(n) = rest.strip_suffix("-samp") {
                if let Ok(n) = n.parse::<usize>() {
                    if n >= 1 {
                        return Ok(MethodSpec::Sampled { n });
                    }
                }
            }
        }
        Err(format!("unknown method {s:?}"))
    }

    fn run<S: PathScorer + ?Sized>(
        &self,
        lattice: &Lattice,
        scorer: &S,
        seed: u64,
        max_paths: u64,
        normalize: bool,
    ) -> Result<RerankReport, HarnessError> {
        let base = MaskConfig { seed, ..MaskConfig::default() };
        match *self {
            MethodSpec::Exhaustive => run_exhaustive(lattice, scorer, max_paths),
            MethodSpec::Rand => {
                run_sampled(lattice, scorer, 1, seed, PathSampling::PathUniform, normalize)
            }
            MethodSpec::Sampled { n } => {
                run_sampled(lattice, scorer, n, seed, PathSampling::PathUniform, normalize)
            }
            MethodSpec::EelFullContext => run_eel(lattice, scorer, &base, normalize),
            MethodSpec::EelDefaultPos => run_eel(
                lattice,
                scorer,
                &MaskConfig { position_scheme: PositionScheme::CanvasIndex, ..base },
                normalize,
            ),
            MethodSpec::EelBidirectional => run_eel(
                lattice,
                scorer,
                &MaskConfig { mode: MaskMode::Bidirectional, ..base },
                normalize,
            ),
            MethodSpec::EelFewMask { m } => run_eel(
                lattice,
                scorer,
                &MaskConfig { mode: MaskMode::SingleContext, m, ..base },
                normalize,
            ),
        }
    }
}

/// Run a method list over a batch of lattices, in parallel across
/// lattices, output ordered by input index. Each lattice's exhaustive
/// oracle (bounded by `max_paths`) fills the degradation column; lattices
/// too large to enumerate keep it empty.
pub fn run_batch<S: PathScorer + ?Sized>(
    lattices: &[Lattice],
    scorer: &S,
    methods: &[MethodSpec],
    seed: u64,
    max_paths: u64,
    normalize: bool,
) -> Result<Vec<Vec<RerankReport>>, HarnessError> {
    lattices
        .par_iter()
        .map(|lattice| -> Result<Vec<RerankReport>, HarnessError> {
            let oracle = match run_exhaustive(lattice, scorer, max_paths) {
                Ok(r) => Some(r),
                Err(e) if e.is_resource_limit() => None,
                Err(e) => return Err(e),
            };
            let mut rows = Vec::with_capacity(methods.len());
            for m in methods {
                let mut row = if *m == MethodSpec::Exhaustive {
                    match &oracle {
                        Some(r) => r.clone(),
                        None => {
                            return Err(HarnessError::ResourceLimit(format!(
                                "exhaustive requested but candidate count exceeds {max_paths}"
                            )))
                        }
                    }
                } else {
                    m.run(lattice, scorer, seed, max_paths, normalize)?
                };
                if let Some(o) = &oracle {
                    row.set_oracle(o.norm_score);
                }
                rows.push(row);
            }
            Ok(rows)
        })
        .collect()
}

/// Per-method aggregate over a batch.
#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub method: String,
    pub lattices: usize,
    pub mean_norm_score: f32,
    /// Mean over lattices where the oracle was computable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_degradation: Option<f32>,
    pub mean_cn_ratio: f64,
    pub total_nodes_scored: u64,
}

/// Group batch reports by method label, in first-appearance order.
pub fn summarize(batches: &[Vec<RerankReport>]) -> Vec<BenchSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<&RerankReport>> = HashMap::new();
    for batch in batches {
        for r in batch {
            if !groups.contains_key(&r.method) {
                order.push(r.method.clone());
            }
            groups.entry(r.method.clone()).or_default().push(r);
        }
    }
    order
        .into_iter()
        .map(|method| {
            let rows = &groups[&method];
            let n = rows.len();
            let degs: Vec<f32> = rows.iter().filter_map(|r| r.degradation).collect();
            BenchSummary {
                method,
                lattices: n,
                mean_norm_score: rows.iter().map(|r| r.norm_score).sum::<f32>() / n as f32,
                mean_degradation: (!degs.is_empty())
                    .then(|| degs.iter().sum::<f32>() / degs.len() as f32),
                mean_cn_ratio: rows.iter().map(|r| r.cn_ratio).sum::<f64>() / n as f64,
                total_nodes_scored: rows.iter().map(|r| r.nodes_scored).sum(),
            }
        })
        .collect()
}
