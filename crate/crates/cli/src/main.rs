//! Batch command surface binding the pipeline end to end: pair mining,
//! modifier synthesis, triplet statistics, the two training stages,
//! checkpoint evaluation, the loss-combination grid, and the gradient audit.
//! Every command prints one JSON value to stdout and writes artifacts under
//! its output path, so runs can be diffed byte for byte.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use mtst_core::data::{read_corpus, read_triplets, write_jsonl, index_corpus, Source, Triplet};
use mtst_core::encoders::Vocab;
use mtst_core::evaluator::{self, category_map, EvalOptions, Gallery};
use mtst_core::fdsuite::{fd_battery, FD_TOLERANCE};
use mtst_core::losses::register_tau;
use mtst_core::mining::{corpus_stats, mine_category_pairs, mine_label_pairs_capped, mine_set_pairs};
use mtst_core::ndcore::Graph;
use mtst_core::textgen::{ingest_external, oracle_triplets, Generator, INSTRUCTION};
use mtst_core::trainer::{
    ablation_matrix, load_checkpoint, queries_from_triplets, run_stage, Stage, TrainConfig,
};

#[derive(Parser)]
#[command(name = "mtst", version, about = "Composed image retrieval engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine ordered (reference, target) candidate pairs from a corpus.
    Mine(MineArgs),
    /// Generate modifier texts for mined pairs.
    Synth(SynthArgs),
    /// Summarize a triplet file.
    Stats {
        /// Triplet JSONL file.
        #[arg(long)]
        triplets: PathBuf,
    },
    /// First-stage training run (contrastive terms only by default).
    Pretrain(RunArgs),
    /// Second-stage training run (full objective by default).
    Finetune(RunArgs),
    /// Score a checkpoint on held-out triplets.
    Eval(EvalArgs),
    /// Run the 2x4 loss-combination grid.
    Ablate(AblateArgs),
    /// Finite-difference audit of every op and loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of randomized instances to check.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    /// Ordered pairs within each declared image set.
    Set,
    /// Random disjoint pseudo-sets within each category.
    Category,
    /// Label-sharing pairs, capped per label.
    Label,
}

#[derive(Args)]
struct MineArgs {
    /// Corpus JSONL file (one image record per line).
    #[arg(long)]
    corpus: PathBuf,
    /// Output pair JSONL file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    strategy: Strategy,
    /// Pseudo-set size for the category strategy.
    #[arg(long, default_value_t = 6)]
    set_size: usize,
    /// Per-label pair cap factor for the label strategy.
    #[arg(long, default_value_t = 3.0)]
    cap: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorKind {
    /// Deterministic label-diff templates.
    Oracle,
    /// A small decoder trained on the oracle texts, then greedy-decoded.
    Model,
    /// Ingest modifiers produced outside this tool.
    External,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    generator: GeneratorKind,
    /// Output triplet JSONL file.
    #[arg(long)]
    out: PathBuf,
    /// Mined pair JSONL file (oracle and model generators).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Corpus JSONL file (oracle and model generators).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Externally produced triplet JSONL file (external generator).
    #[arg(long)]
    external: Option<PathBuf>,
    /// Also generate the reverse-direction text for each pair.
    #[arg(long)]
    with_reverse: bool,
    /// Decoder training steps (model generator).
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Decoder learning rate (model generator).
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// key=value config file; omitted keys take stage defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fresh run directory for losses.jsonl, eval.jsonl, checkpoint.bin.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the query pooling (cls or avg_with_cls).
    #[arg(long)]
    pooling: Option<String>,
    /// Override the prototype-loss weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the text-to-target weight.
    #[arg(long)]
    w_t2t: Option<f64>,
    /// Trailing key=value config overrides, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// key=value config describing the model (a run's config.snapshot works).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// vocab.txt saved by the training run.
    #[arg(long)]
    vocab: PathBuf,
    /// Corpus JSONL; defaults to the config's `corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Query triplets; defaults to the config's `eval_triplets`, then `triplets`.
    #[arg(long)]
    triplets: Option<PathBuf>,
    /// Precomputed gallery embedding file instead of encoding the corpus.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Add each query's reference image to its subset ranking.
    #[arg(long)]
    include_reference: bool,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// key=value config file; must name `corpus` and `triplets`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory; each cell becomes a run directory beneath it.
    #[arg(long)]
    out: PathBuf,
    /// Trailing key=value config overrides, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MTST_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error, surfaced before any file is touched.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

/// Contract and parse failures exit 1; failures to reach bytes on disk exit 2.
fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<mtst_core::Error>() {
        Some(mtst_core::Error::Io { .. }) => 2,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Mine(args) => mine(args),
        Command::Synth(args) => synth(args),
        Command::Stats { triplets } => stats(&triplets),
        Command::Pretrain(args) => train(Stage::Pretrain, args),
        Command::Finetune(args) => train(Stage::Finetune, args),
        Command::Eval(args) => eval(args),
        Command::Ablate(args) => ablate(args),
        Command::Gradcheck { seed, instances } => gradcheck(seed, instances),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn mine(args: MineArgs) -> Result<()> {
    let corpus = read_corpus(&args.corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (name, pairs) = match args.strategy {
        Strategy::Set => ("set", mine_set_pairs(&corpus)),
        Strategy::Category => ("category", mine_category_pairs(&corpus, args.set_size, &mut rng)?),
        Strategy::Label => ("label", mine_label_pairs_capped(&corpus, args.cap, &mut rng)?),
    };
    write_jsonl(&args.out, &pairs)?;
    print_json(&json!({
        "strategy": name,
        "images": corpus.len(),
        "pairs": pairs.len(),
        "out": args.out.display().to_string(),
    }))
}

fn synth(args: SynthArgs) -> Result<()> {
    match args.generator {
        GeneratorKind::Oracle => {
            let (pairs, corpus) = synth_inputs(&args, "oracle")?;
            let by_id = index_corpus(&corpus);
            let triplets = oracle_triplets(&pairs, &by_id, args.with_reverse)?;
            write_jsonl(&args.out, &triplets)?;
            print_json(&json!({
                "generator": "oracle",
                "triplets": triplets.len(),
                "with_reverse": args.with_reverse,
                "out": args.out.display().to_string(),
            }))
        }
        GeneratorKind::Model => {
            let (pairs, corpus) = synth_inputs(&args, "model")?;
            let (triplets, final_loss) = model_triplets(&args, &pairs, &corpus)?;
            write_jsonl(&args.out, &triplets)?;
            print_json(&json!({
                "generator": "model",
                "triplets": triplets.len(),
                "with_reverse": args.with_reverse,
                "final_lm_loss": final_loss,
                "out": args.out.display().to_string(),
            }))
        }
        GeneratorKind::External => {
            let path = args
                .external
                .as_deref()
                .context("generator `external` requires --external")?;
            let report = ingest_external(path)?;
            write_jsonl(&args.out, &report.triplets)?;
            print_json(&json!({
                "generator": "external",
                "triplets": report.triplets.len(),
                "duplicates": report.duplicates,
                "errors": report.errors,
                "out": args.out.display().to_string(),
            }))
        }
    }
}

/// Shared --pairs/--corpus plumbing for the generators that synthesize text.
fn synth_inputs(
    args: &SynthArgs,
    kind: &str,
) -> Result<(Vec<(String, String)>, Vec<mtst_core::data::ImageRecord>)> {
    let pairs_path = args
        .pairs
        .as_deref()
        .with_context(|| format!("generator `{kind}` requires --pairs"))?;
    let corpus_path = args
        .corpus
        .as_deref()
        .with_context(|| format!("generator `{kind}` requires --corpus"))?;
    let pairs: Vec<mtst_core::data::PairSpec> = mtst_core::data::read_jsonl(pairs_path)?;
    let corpus = read_corpus(corpus_path)?;
    let tuples = pairs
        .into_iter()
        .map(|p| (p.ref_id, p.target_id))
        .collect();
    Ok((tuples, corpus))
}

/// Train the toy decoder on the oracle texts for these pairs, then greedy
/// decode a modifier (and optionally a reverse) for each pair.
fn model_triplets(
    args: &SynthArgs,
    pairs: &[(String, String)],
    corpus: &[mtst_core::data::ImageRecord],
) -> Result<(Vec<Triplet>, f64)> {
    const MAX_TEXT: usize = 32;
    let by_id = index_corpus(corpus);
    let oracle = oracle_triplets(pairs, &by_id, false)?;
    let vocab = Vocab::build(
        oracle
            .iter()
            .map(|t| t.modifier.as_str())
            .chain(std::iter::once(INSTRUCTION)),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let generator = Generator::new(corpus, vocab.len(), 2, 8, 6, 8, &mut rng)?;
    let instruction = vocab.tokenize(INSTRUCTION, MAX_TEXT)?;
    let examples: Vec<(String, String, Vec<usize>)> = oracle
        .iter()
        .map(|t| {
            Ok((
                t.ref_id.clone(),
                t.target_id.clone(),
                vocab.tokenize(&t.modifier, MAX_TEXT)?,
            ))
        })
        .collect::<Result<_>>()?;
    let final_loss = generator.train(&examples, &instruction, args.steps, args.lr)?;

    let decode = |ref_id: &str, tgt_id: &str| -> Result<String> {
        let input = generator.assemble_input(ref_id, tgt_id, &instruction)?;
        let ids = generator.generate_greedy(&input, MAX_TEXT)?;
        let words: Vec<&str> = ids.iter().filter_map(|&i| vocab.token(i)).collect();
        Ok(words.join(" "))
    };
    let mut out = Vec::with_capacity(pairs.len());
    for (ref_id, tgt_id) in pairs {
        out.push(Triplet {
            ref_id: ref_id.clone(),
            target_id: tgt_id.clone(),
            modifier: decode(ref_id, tgt_id)?,
            source: Source::Model,
            reverse: if args.with_reverse {
                Some(decode(tgt_id, ref_id)?)
            } else {
                None
            },
        });
    }
    Ok((out, final_loss))
}

fn stats(triplets: &Path) -> Result<()> {
    print_json(&corpus_stats(&read_triplets(triplets)?))
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("override `{s}` is not of the form key=value"))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Assemble the override list: positional key=value pairs first, then the
/// convenience flags, then the verb's stage so it always wins.
fn config_for(stage: Stage, args: &RunArgs) -> Result<TrainConfig> {
    let mut overrides = parse_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(pooling) = &args.pooling {
        overrides.push(("pooling".into(), pooling.clone()));
    }
    if let Some(alpha) = args.alpha {
        overrides.push(("alpha".into(), alpha.to_string()));
    }
    if let Some(w) = args.w_t2t {
        overrides.push(("w_t2t".into(), w.to_string()));
    }
    overrides.push(("stage".into(), stage.as_str().to_string()));
    Ok(TrainConfig::load_with_overrides(args.config.as_deref(), &overrides)?)
}

fn train(stage: Stage, args: RunArgs) -> Result<()> {
    let cfg = config_for(stage, &args)?;
    let summary = run_stage(&cfg, &args.out)?;
    print_json(&summary)
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = TrainConfig::load(&args.config)?;
    let corpus_path = args
        .corpus
        .as_ref()
        .or(cfg.corpus.as_ref())
        .context("--corpus is required when the config has no `corpus` key")?;
    let triplets_path = args
        .triplets
        .as_ref()
        .or(cfg.eval_triplets.as_ref())
        .or(cfg.triplets.as_ref())
        .context("--triplets is required when the config has no `eval_triplets` or `triplets` key")?;
    let corpus = read_corpus(corpus_path)?;
    let triplets = read_triplets(triplets_path)?;
    let queries = queries_from_triplets(&triplets, &corpus);
    let vocab = Vocab::load(&args.vocab)?;

    let graph = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stack = mtst_core::encoders::EncoderStack::new(
        &graph,
        "enc.",
        &corpus,
        vocab.len(),
        cfg.n_tokens,
        cfg.dim,
        cfg.dim_img,
        &mut rng,
    )?;
    register_tau(&graph, cfg.loss.tau_init)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if ckpt.config_hash != cfg.config_hash() {
        log::warn!(
            "checkpoint was trained under a different config (file {:#018x}, given {:#018x})",
            ckpt.config_hash,
            cfg.config_hash()
        );
    }
    ckpt.apply_to_graph(&graph)?;

    let gallery = match &args.embeddings {
        Some(path) => evaluator::ingest_embeddings(path)?,
        None => Gallery::from_stack(&stack)?,
    };
    let report = evaluator::evaluate(
        &queries,
        &gallery,
        &stack,
        &vocab,
        cfg.max_len,
        cfg.loss.pooling,
        EvalOptions {
            include_reference: args.include_reference,
        },
        &category_map(&corpus),
    )?;
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string(&report)?)
            .map_err(|e| mtst_core::Error::io(out, e))?;
    }
    print_json(&report)
}

fn ablate(args: AblateArgs) -> Result<()> {
    let overrides = parse_overrides(&args.overrides)?;
    let cfg = TrainConfig::load_with_overrides(args.config.as_deref(), &overrides)?;
    let corpus_path = cfg
        .corpus
        .as_ref()
        .context("config key `corpus` is required for the ablation grid")?;
    let triplets_path = cfg
        .triplets
        .as_ref()
        .context("config key `triplets` is required for the ablation grid")?;
    let corpus = read_corpus(corpus_path)?;
    let triplets = read_triplets(triplets_path)?;
    let eval_queries = match &cfg.eval_triplets {
        Some(p) => queries_from_triplets(&read_triplets(p)?, &corpus),
        None => Vec::new(),
    };
    let cells = ablation_matrix(&cfg, &corpus, &triplets, &eval_queries, &args.out)?;
    let path = args.out.join("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cells)?)
        .map_err(|e| mtst_core::Error::io(&path, e))?;
    print_json(&cells)
}

fn gradcheck(seed: u64, instances: usize) -> Result<()> {
    let report = fd_battery(seed, instances)?;
    print_json(&report)?;
    if !report.passed() {
        bail!(
            "gradient audit failed: max relative error {} in {} ({}) is not below {}",
            report.max_rel_err,
            report.worst_case,
            report.worst_param,
            FD_TOLERANCE
        );
    }
    Ok(())
}
