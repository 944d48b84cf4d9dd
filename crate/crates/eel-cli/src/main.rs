//! `eel` command line: pack candidate sets into lattices, generate
//! synthetic ones, inspect and validate them, and run the rerank harness
//! with its baselines and ablations.
//!
//! Reports are NDJSON on stdout. Exit codes: 0 on success, 1 when inputs
//! fail validation, 2 when a resource limit (path cap, position-table
//! overflow) stops the run.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use eel_core::extraction::{diverse_paths, ExtractionConfig};
use eel_core::harness::{
    count_paths, run_ablation, run_batch, run_eel, run_exhaustive, run_sampled,
    summarize, write_ndjson, HarnessError, MethodSpec, PathSampling, RerankReport,
};
use eel_core::lattice::{generate_synthetic, pack_candidates, Lattice, LatticeError};
use eel_core::masking::{
    build_canvases, prune_to_positions, MaskConfig, MaskError, MaskMode,
    ParentSampling, PositionScheme,
};
use eel_core::scoring::{
    CausalScorer, EnsembleScorer, ModelScorer, PathScorer, ScoreError, ScorerSpec,
    DEFAULT_ENSEMBLE_LAMBDA,
};

#[derive(Parser)]
#[command(
    name = "eel",
    about = "Encode a whole lattice of hypotheses in one scorer pass and extract the best paths",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack a candidates file (+ parallel logprob file) into a lattice file.
    Pack(PackArgs),
    /// Generate a seeded synthetic lattice with controllable reentrancy.
    Synth(SynthArgs),
    /// Check a lattice file and list every structural problem found.
    Validate(ValidateArgs),
    /// Enumerate all hypotheses, one token sequence per line.
    Explode(ExplodeArgs),
    /// Run one selection method over a lattice and report the outcome.
    Rerank(RerankArgs),
    /// Extract k diverse paths under a token repetition penalty.
    Diverse(DiverseArgs),
    /// Run the full comparison grid (masks, positions, baselines) on one lattice.
    Ablate(AblateArgs),
    /// Run methods over a batch of lattices and append per-method summaries.
    Bench(BenchArgs),
}

#[derive(Args)]
struct PackArgs {
    /// One whitespace-separated token-id sequence per line.
    #[arg(long)]
    candidates: PathBuf,
    /// Parallel file: one logprob per token, same line structure.
    #[arg(long)]
    logprobs: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Write indented JSON instead of one line.
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long, default_value_t = 8)]
    length: usize,
    /// Probability that a node also feeds the next slot of another chain.
    #[arg(long, default_value_t = 0.3)]
    merge_prob: f64,
    #[arg(long, default_value_t = 64)]
    vocab: u32,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    lattice: PathBuf,
}

#[derive(Args)]
struct ExplodeArgs {
    #[arg(long)]
    lattice: PathBuf,
    /// Refuse to enumerate more hypotheses than this.
    #[arg(long, default_value_t = 10_000)]
    max_paths: u64,
    /// Print node ids instead of tokens.
    #[arg(long)]
    ids: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerChoice {
    /// The deterministic causal transformer reranker.
    Tfr,
    /// The base model's own token log-probabilities.
    Model,
    /// tfr + lambda * model.
    Ensemble,
}

#[derive(Args)]
struct ScorerArgs {
    #[arg(long, value_enum, default_value_t = ScorerChoice::Tfr)]
    scorer: ScorerChoice,
    /// Weight initialization seed for the transformer scorer.
    #[arg(long, default_value_t = 0)]
    scorer_seed: u64,
    #[arg(long, default_value_t = 1024)]
    vocab: usize,
    /// Size of the scorer's position table (exclusive position bound).
    #[arg(long, default_value_t = 512)]
    max_position: u32,
    /// Model-score weight for the ensemble scorer.
    #[arg(long, default_value_t = DEFAULT_ENSEMBLE_LAMBDA)]
    lambda: f32,
    /// Optional shared source prefix, whitespace-separated token ids.
    #[arg(long)]
    source_tokens: Option<String>,
}

impl ScorerArgs {
    fn transformer(&self) -> Result<CausalScorer> {
        let spec = ScorerSpec {
            vocab_size: self.vocab,
            max_position: self.max_position as usize,
            seed: self.scorer_seed,
            ..ScorerSpec::default()
        };
        let scorer = CausalScorer::new(spec)?;
        match &self.source_tokens {
            Some(s) => {
                let tokens = parse_token_line(s).context("bad --source-tokens")?;
                Ok(scorer.with_source(tokens)?)
            }
            None => Ok(scorer),
        }
    }

    fn build(&self) -> Result<Box<dyn PathScorer>> {
        Ok(match self.scorer {
            ScorerChoice::Tfr => Box::new(self.transformer()?),
            ScorerChoice::Model => Box::new(ModelScorer),
            ScorerChoice::Ensemble => {
                Box::new(EnsembleScorer::new(self.transformer()?, self.lambda))
            }
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskChoice {
    /// Full causal reachability: every node sees all its ancestors.
    Full,
    /// One sampled linear history per node (one canvas).
    Single,
    /// m sampled histories, best extraction kept.
    Few,
    /// Symmetric ancestor visibility (degraded comparison mode).
    Bidirectional,
}

#[derive(Clone, Copy, ValueEnum)]
enum PositionChoice {
    /// Depth-consistent ids from the probability-ordered traversal.
    Canonical,
    /// Raw canvas slot index (degraded comparison mode).
    Index,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParentChoice {
    Uniform,
    /// Parents drawn by softmax of their logprobs.
    Weighted,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long, value_enum, default_value_t = MaskChoice::Full)]
    mask: MaskChoice,
    /// Canvas count for --mask few.
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long, value_enum, default_value_t = PositionChoice::Canonical)]
    positions: PositionChoice,
    #[arg(long, value_enum, default_value_t = ParentChoice::Uniform)]
    parent_sampling: ParentChoice,
    /// Single-context ablation: keep whole-graph positions instead of
    /// recomputing depths inside the sampled subgraph.
    #[arg(long)]
    reuse_graph_positions: bool,
}

impl MaskArgs {
    fn config(&self, seed: u64, max_position: u32) -> MaskConfig {
        let (mode, m) = match self.mask {
            MaskChoice::Full => (MaskMode::FullCausal, 1),
            MaskChoice::Single => (MaskMode::SingleContext, 1),
            MaskChoice::Few => (MaskMode::SingleContext, self.m),
            MaskChoice::Bidirectional => (MaskMode::Bidirectional, 1),
        };
        MaskConfig {
            mode,
            m,
            seed,
            max_position,
            position_scheme: match self.positions {
                PositionChoice::Canonical => PositionScheme::Canonical,
                PositionChoice::Index => PositionScheme::CanvasIndex,
            },
            parent_sampling: match self.parent_sampling {
                ParentChoice::Uniform => ParentSampling::Uniform,
                ParentChoice::Weighted => ParentSampling::LogprobWeighted,
            },
            reuse_graph_positions: self.reuse_graph_positions,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingChoice {
    /// Uniform over complete hypotheses (weights = downstream path counts).
    Path,
    /// Uniform over outgoing edges at each step.
    Edge,
}

impl SamplingChoice {
    fn to_core(self) -> PathSampling {
        match self {
            SamplingChoice::Path => PathSampling::PathUniform,
            SamplingChoice::Edge => PathSampling::EdgeUniform,
        }
    }
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    lattice: PathBuf,
    /// rand | samp-N | eel | exhaustive
    #[arg(long)]
    method: String,
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rank by mean per-token score instead of the sum.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Cap for exhaustive enumeration (selection or oracle).
    #[arg(long, default_value_t = 100_000)]
    max_paths: u64,
    /// How sampled baselines draw their walks.
    #[arg(long, value_enum, default_value_t = SamplingChoice::Path)]
    sampling: SamplingChoice,
    /// Also run the exhaustive oracle and fill in the degradation column.
    #[arg(long)]
    oracle: bool,
    /// Include wall-clock phase timings (breaks byte-reproducibility).
    #[arg(long)]
    timings: bool,
    /// Drop nodes whose canonical position overflows the position table
    /// instead of failing.
    #[arg(long)]
    prune: bool,
}

#[derive(Args)]
struct DiverseArgs {
    #[arg(long)]
    lattice: PathBuf,
    /// Number of paths to extract.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Score penalty per prior occurrence of a token.
    #[arg(long, default_value_t = 1.0)]
    w: f32,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long)]
    prune: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    lattice: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long, default_value_t = 100_000)]
    max_paths: u64,
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    prune: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Lattice files; repeat the flag for each one.
    #[arg(long, required = true)]
    lattice: Vec<PathBuf>,
    /// Comma-separated method labels, e.g. eel-full-context,eel-8-mask,rand.
    #[arg(long)]
    methods: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long, default_value_t = 100_000)]
    max_paths: u64,
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    prune: bool,
}

fn parse_token_line(line: &str) -> Result<Vec<u32>> {
    line.split_whitespace()
        .map(|t| t.parse::<u32>().with_context(|| format!("bad token id {t:?}")))
        .collect()
}

fn read_candidate_files(
    candidates: &Path,
    logprobs: &Path,
) -> Result<(Vec<Vec<u32>>, Vec<Vec<f32>>)> {
    let cand_text = std::fs::read_to_string(candidates)
        .with_context(|| format!("cannot read {}", candidates.display()))?;
    let lp_text = std::fs::read_to_string(logprobs)
        .with_context(|| format!("cannot read {}", logprobs.display()))?;

    let cands: Vec<Vec<u32>> = cand_text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            parse_token_line(line).with_context(|| format!("candidates line {}", i + 1))
        })
        .collect::<Result<_>>()?;
    let lps: Vec<Vec<f32>> = lp_text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<f32>().with_context(|| format!("bad logprob {t:?}"))
                })
                .collect::<Result<Vec<f32>>>()
                .with_context(|| format!("logprobs line {}", i + 1))
        })
        .collect::<Result<_>>()?;

    if cands.len() != lps.len() {
        bail!(
            "{} candidate lines but {} logprob lines",
            cands.len(),
            lps.len()
        );
    }
    Ok((cands, lps))
}

fn load_lattice(path: &Path, prune: bool, max_position: u32) -> Result<Lattice> {
    let lat = Lattice::read_file(path)
        .with_context(|| format!("cannot load lattice {}", path.display()))?;
    let problems = lat.validate();
    if !problems.is_empty() {
        let mut msg = format!("lattice {} is invalid:", path.display());
        for p in &problems {
            let _ = write!(msg, "\n  - {p}");
        }
        bail!(msg);
    }
    if prune {
        Ok(prune_to_positions(&lat, max_position)?)
    } else {
        Ok(lat)
    }
}

fn write_lattice(lat: &Lattice, output: &Path, pretty: bool) -> Result<()> {
    let text = if pretty { lat.to_json_pretty() } else { lat.to_json_string() };
    std::fs::write(output, text)
        .with_context(|| format!("cannot write {}", output.display()))?;
    Ok(())
}

fn print_reports(reports: &[RerankReport], timings: bool) -> Result<()> {
    let stdout = std::io::stdout();
    write_ndjson(stdout.lock(), reports, timings)?;
    Ok(())
}

fn cmd_pack(args: &PackArgs) -> Result<ExitCode> {
    let (cands, lps) = read_candidate_files(&args.candidates, &args.logprobs)?;
    let lat = pack_candidates(&cands, &lps)?;
    write_lattice(&lat, &args.output, args.pretty)?;
    eprintln!(
        "packed {} candidates into {} nodes ({} hypotheses)",
        cands.len(),
        lat.node_count(),
        count_paths(&lat)?.count
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(args: &SynthArgs) -> Result<ExitCode> {
    let lat =
        generate_synthetic(args.seed, args.chains, args.length, args.merge_prob, args.vocab)?;
    write_lattice(&lat, &args.output, args.pretty)?;
    eprintln!(
        "generated {} nodes, {} edges, {} hypotheses (reentrant: {})",
        lat.node_count(),
        lat.edges().len(),
        count_paths(&lat)?.count,
        lat.has_reentrancy()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(args: &ValidateArgs) -> Result<ExitCode> {
    let lat = Lattice::read_file(&args.lattice)
        .with_context(|| format!("cannot load lattice {}", args.lattice.display()))?;
    let problems = lat.validate();
    if problems.is_empty() {
        println!(
            "ok: {} nodes, {} edges, {} ends, reentrant: {}",
            lat.node_count(),
            lat.edges().len(),
            lat.ends().len(),
            lat.has_reentrancy()
        );
        Ok(ExitCode::SUCCESS)
    } else {
        for p in &problems {
            println!("invalid: {p}");
        }
        Ok(ExitCode::from(1))
    }
}

fn cmd_explode(args: &ExplodeArgs) -> Result<ExitCode> {
    let lat = load_lattice(&args.lattice, false, u32::MAX)?;
    let paths = lat.explode(args.max_paths)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for p in &paths {
        let line: Vec<String> = if args.ids {
            p.iter().map(|id| id.to_string()).collect()
        } else {
            lat.path_tokens(p)?.iter().map(|t| t.to_string()).collect()
        };
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_rerank(args: &RerankArgs) -> Result<ExitCode> {
    let lat = load_lattice(&args.lattice, args.prune, args.scorer.max_position)?;
    let scorer = args.scorer.build()?;
    let scorer = scorer.as_ref();

    let mut report = if args.method == "eel" {
        let config = args.mask.config(args.seed, args.scorer.max_position);
        run_eel(&lat, scorer, &config, args.normalize)?
    } else if args.method == "exhaustive" {
        run_exhaustive(&lat, scorer, args.max_paths)?
    } else if args.method == "rand" {
        run_sampled(&lat, scorer, 1, args.seed, args.sampling.to_core(), args.normalize)?
    } else if let Some(n) = args.method.strip_prefix("samp-") {
        let n: usize = n
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .with_context(|| format!("bad sample count in --method {:?}", args.method))?;
        run_sampled(&lat, scorer, n, args.seed, args.sampling.to_core(), args.normalize)?
    } else {
        bail!(
            "unknown --method {:?} (expected rand, samp-N, eel, or exhaustive)",
            args.method
        );
    };

    if args.oracle && report.oracle_score.is_none() {
        let oracle = run_exhaustive(&lat, scorer, args.max_paths)?;
        report.set_oracle(oracle.norm_score);
    }
    print_reports(std::slice::from_ref(&report), args.timings)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_diverse(args: &DiverseArgs) -> Result<ExitCode> {
    let lat = load_lattice(&args.lattice, args.prune, args.scorer.max_position)?;
    let scorer = args.scorer.build()?;
    let config = MaskConfig {
        max_position: args.scorer.max_position,
        ..MaskConfig::default()
    };
    let canvas = build_canvases(&lat, &config)?.remove(0);
    let scores = scorer.score_canvas(&lat, &canvas)?;
    let samples = diverse_paths(
        &lat,
        &scores,
        &ExtractionConfig { k: args.k, w: args.w, normalize: args.normalize },
    )?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for s in &samples {
        let record = serde_json::json!({
            "tokens": lat.path_tokens(&s.path.node_ids)?,
            "nodes": s.path.node_ids,
            "raw_score": s.path.raw_score,
            "norm_score": s.path.norm_score,
            "penalized_raw": s.penalized_raw,
            "penalized_norm": s.penalized_norm,
        });
        writeln!(out, "{record}")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: &AblateArgs) -> Result<ExitCode> {
    let lat = load_lattice(&args.lattice, args.prune, args.scorer.max_position)?;
    let scorer = args.scorer.build()?;
    let rows = run_ablation(&lat, scorer.as_ref(), args.seed, args.max_paths, args.normalize)?;
    print_reports(&rows, args.timings)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: &BenchArgs) -> Result<ExitCode> {
    let methods: Vec<MethodSpec> = args
        .methods
        .split(',')
        .map(|m| MethodSpec::parse(m.trim()).map_err(anyhow::Error::msg))
        .collect::<Result<_>>()?;
    if methods.is_empty() {
        bail!("--methods lists no methods");
    }
    let lattices: Vec<Lattice> = args
        .lattice
        .iter()
        .map(|p| load_lattice(p, args.prune, args.scorer.max_position))
        .collect::<Result<_>>()?;
    let scorer = args.scorer.build()?;
    let batches = run_batch(
        &lattices,
        scorer.as_ref(),
        &methods,
        args.seed,
        args.max_paths,
        args.normalize,
    )?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for rows in &batches {
        write_ndjson(&mut out, rows, args.timings)?;
    }
    for summary in summarize(&batches) {
        writeln!(out, "{}", serde_json::json!({ "summary": summary }))?;
    }
    Ok(ExitCode::SUCCESS)
}

/// 2 for size/limit failures, 1 for everything else.
fn failure_exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            if h.is_resource_limit() {
                return 2;
            }
        }
        if matches!(
            cause.downcast_ref::<LatticeError>(),
            Some(LatticeError::PathLimitExceeded { .. })
        ) {
            return 2;
        }
        if matches!(
            cause.downcast_ref::<MaskError>(),
            Some(MaskError::PositionOverflow { .. })
        ) {
            return 2;
        }
        if matches!(
            cause.downcast_ref::<ScoreError>(),
            Some(ScoreError::PositionOutOfRange { .. })
        ) {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Pack(args) => cmd_pack(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Explode(args) => cmd_explode(args),
        Command::Rerank(args) => cmd_rerank(args),
        Command::Diverse(args) => cmd_diverse(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(failure_exit_code(&err))
        }
    }
}
