//! Two-stage training driver: contrastive pretraining over mined triplets,
//! then prototype-bridged finetuning with reverse modifiers, plus run
//! directories, checkpoints, and the loss-combination ablation grid.

mod checkpoint;

pub use checkpoint::{
    fnv1a64, load_checkpoint, save_checkpoint, Checkpoint, CKPT_MAGIC, CKPT_VERSION,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{index_corpus, read_corpus, read_triplets, ImageRecord, Triplet};
use crate::encoders::{EncoderStack, FeatureBundle, Vocab};
use crate::error::{Error, Result};
use crate::evaluator::{self, category_map, EvalOptions, EvalQuery, EvalReport, Gallery};
use crate::losses::{clamp_tau, register_tau, total_loss, Batch, LossBreakdown, LossConfig};
use crate::ndcore::{Graph, Tensor};
use crate::optim::{OptimKind, Optimizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::config(format!(
                "unknown stage `{other}` (expected pretrain or finetune)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Decay linearly from `lr` at step 1 torwards zero at the final step.
    Linear,
}

impl LrSchedule {
    pub fn as_str(&self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Linear => "linear",
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<LrSchedule> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear" => Ok(LrSchedule::Linear),
            other => Err(Error::config(format!(
                "unknown lr_schedule `{other}` (expected constant or linear)"
            ))),
        }
    }
}

/// Resolved training configuration. Pretraining defaults to the plain
/// contrastive loss (alpha and w_t2t zero) unless those keys are set
/// explicitly; finetuning defaults to the full objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub optimizer: OptimKind,
    pub momentum: f64,
    pub eval_every: u64,
    pub n_tokens: usize,
    pub dim: usize,
    pub dim_img: usize,
    pub max_len: usize,
    /// With strict on, a triplet naming an unknown image aborts the run;
    /// otherwise it is skipped with a warning.
    pub strict: bool,
    pub loss: LossConfig,
    pub corpus: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub eval_triplets: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
}

impl TrainConfig {
    pub fn defaults(stage: Stage) -> TrainConfig {
        let loss = match stage {
            Stage::Pretrain => LossConfig {
                alpha: 0.0,
                w_t2t: 0.0,
                ..LossConfig::default()
            },
            Stage::Finetune => LossConfig::default(),
        };
        TrainConfig {
            stage,
            batch_size: 16,
            steps: 100,
            lr: 0.05,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            optimizer: OptimKind::Sgd,
            momentum: 0.9,
            eval_every: 50,
            n_tokens: 32,
            dim: 64,
            dim_img: 64,
            max_len: 32,
            strict: true,
            loss,
            corpus: None,
            triplets: None,
            eval_triplets: None,
            init_from: None,
        }
    }

    /// Resolve a key=value map; the stage key decides the loss defaults and
    /// every other key overrides one field. Unknown keys are rejected.
    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<TrainConfig> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| {
                Error::config(format!("invalid value `{v}` for config key `{key}`"))
            })
        }
        let stage = match entries.get("stage") {
            Some(v) => parse::<Stage>("stage", v)?,
            None => Stage::Pretrain,
        };
        let mut cfg = TrainConfig::defaults(stage);
        for (key, v) in entries {
            match key.as_str() {
                "stage" => {}
                "batch_size" => cfg.batch_size = parse(key, v)?,
                "steps" => cfg.steps = parse(key, v)?,
                "lr" => cfg.lr = parse(key, v)?,
                "lr_schedule" => cfg.lr_schedule = parse(key, v)?,
                "seed" => cfg.seed = parse(key, v)?,
                "optimizer" => cfg.optimizer = parse(key, v)?,
                "momentum" => cfg.momentum = parse(key, v)?,
                "eval_every" => cfg.eval_every = parse(key, v)?,
                "n_tokens" => cfg.n_tokens = parse(key, v)?,
                "dim" => cfg.dim = parse(key, v)?,
                "dim_img" => cfg.dim_img = parse(key, v)?,
                "max_len" => cfg.max_len = parse(key, v)?,
                "strict" => cfg.strict = parse(key, v)?,
                "alpha" => cfg.loss.alpha = parse(key, v)?,
                "w_t2t" => cfg.loss.w_t2t = parse(key, v)?,
                "tau_init" => cfg.loss.tau_init = parse(key, v)?,
                "pooling" => cfg.loss.pooling = parse(key, v)?,
                "corpus" => cfg.corpus = Some(PathBuf::from(v)),
                "triplets" => cfg.triplets = Some(PathBuf::from(v)),
                "eval_triplets" => cfg.eval_triplets = Some(PathBuf::from(v)),
                "init_from" => cfg.init_from = Some(PathBuf::from(v)),
                other => {
                    return Err(Error::config(format!("unknown config key `{other}`")))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse key=value text: one pair per line, blank lines and lines
    /// starting with '#' are skipped, duplicate keys are rejected.
    pub fn parse_kv(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: idx + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() {
                return Err(parse_err("empty config key".to_string()));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(parse_err(format!("duplicate config key `{key}`")));
            }
        }
        Ok(entries)
    }

    pub fn parse(text: &str, origin: &str) -> Result<TrainConfig> {
        TrainConfig::from_entries(&TrainConfig::parse_kv(text, origin)?)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text, &path.display().to_string())
    }

    /// Load (or start from defaults) and apply command-line overrides on top.
    pub fn load_with_overrides(
        path: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<TrainConfig> {
        let mut entries = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                TrainConfig::parse_kv(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            entries.insert(k.clone(), v.clone());
        }
        TrainConfig::from_entries(&entries)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if self.n_tokens == 0 || self.dim == 0 || self.dim_img == 0 {
            return Err(Error::config("n_tokens, dim, and dim_img must be positive"));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        self.loss.validate()
    }

    /// Canonical key=value rendering of every effective field; two configs
    /// are interchangeable exactly when their snapshots match.
    pub fn snapshot(&self) -> String {
        let mut lines = vec![
            format!("alpha={}", self.loss.alpha),
            format!("batch_size={}", self.batch_size),
            format!("dim={}", self.dim),
            format!("dim_img={}", self.dim_img),
            format!("eval_every={}", self.eval_every),
            format!("lr={}", self.lr),
            format!("lr_schedule={}", self.lr_schedule.as_str()),
            format!("max_len={}", self.max_len),
            format!("momentum={}", self.momentum),
            format!("n_tokens={}", self.n_tokens),
            format!("optimizer={}", self.optimizer.as_str()),
            format!("pooling={}", self.loss.pooling.as_str()),
            format!("seed={}", self.seed),
            format!("stage={}", self.stage.as_str()),
            format!("steps={}", self.steps),
            format!("strict={}", self.strict),
            format!("tau_init={}", self.loss.tau_init),
            format!("w_t2t={}", self.loss.w_t2t),
        ];
        for (key, path) in [
            ("corpus", &self.corpus),
            ("eval_triplets", &self.eval_triplets),
            ("init_from", &self.init_from),
            ("triplets", &self.triplets),
        ] {
            if let Some(p) = path {
                lines.push(format!("{key}={}", p.display()));
            }
        }
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.snapshot().as_bytes())
    }
}

/// Build evaluation queries from triplets: when the reference image belongs
/// to a set that also contains the target, the other set members become the
/// query's candidate subset.
pub fn queries_from_triplets(triplets: &[Triplet], corpus: &[ImageRecord]) -> Vec<EvalQuery> {
    let mut sets: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in corpus {
        if let Some(s) = &r.set_id {
            sets.entry(s).or_default().push(&r.id);
        }
    }
    let by_id = index_corpus(corpus);
    triplets
        .iter()
        .map(|t| {
            let subset = by_id
                .get(t.ref_id.as_str())
                .and_then(|r| r.set_id.as_deref())
                .and_then(|s| sets.get(s))
                .and_then(|members| {
                    let ids: Vec<String> = members
                        .iter()
                        .filter(|&&m| m != t.ref_id)
                        .map(|m| m.to_string())
                        .collect();
                    ids.iter().any(|m| *m == t.target_id).then_some(ids)
                });
            EvalQuery {
                ref_id: t.ref_id.clone(),
                modifier: t.modifier.clone(),
                target_id: t.target_id.clone(),
                subset_ids: subset,
            }
        })
        .collect()
}

/// One in-memory training run: model, optimizer, data, and step counter.
pub struct Trainer {
    cfg: TrainConfig,
    graph: Graph,
    stack: EncoderStack,
    vocab: Vocab,
    tau: Tensor,
    opt: Optimizer,
    rng: ChaCha8Rng,
    triplets: Vec<Triplet>,
    max_batch: usize,
    steps_done: u64,
    skipped: usize,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("stage", &self.cfg.stage)
            .field("steps_done", &self.steps_done)
            .field("triplets", &self.triplets.len())
            .finish_non_exhaustive()
    }
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, corpus: &[ImageRecord], triplets: &[Triplet]) -> Result<Trainer> {
        cfg.validate()?;
        let by_id = index_corpus(corpus);
        let mut usable = Vec::with_capacity(triplets.len());
        let mut skipped = 0usize;
        for t in triplets {
            let missing = [&t.ref_id, &t.target_id]
                .into_iter()
                .find(|id| !by_id.contains_key(id.as_str()));
            match missing {
                None => usable.push(t.clone()),
                Some(id) if cfg.strict => return Err(Error::MissingEmbedding(id.clone())),
                Some(id) => {
                    log::warn!("skipping triplet `{}` -> `{}`: unknown image `{id}`", t.ref_id, t.target_id);
                    skipped += 1;
                }
            }
        }
        if usable.is_empty() {
            return Err(Error::config("no usable triplets after corpus matching"));
        }
        let vocab = Vocab::build(
            usable
                .iter()
                .flat_map(|t| std::iter::once(t.modifier.as_str()).chain(t.reverse.as_deref())),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let graph = Graph::new();
        let stack = EncoderStack::new(
            &graph,
            "enc.",
            corpus,
            vocab.len(),
            cfg.n_tokens,
            cfg.dim,
            cfg.dim_img,
            &mut rng,
        )?;
        let tau = register_tau(&graph, cfg.loss.tau_init)?;
        if let Some(path) = &cfg.init_from {
            let ckpt = load_checkpoint(path)?;
            ckpt.apply_to_graph(&graph)?;
            log::info!(
                "initialized from {} (step {}, config {:#018x})",
                path.display(),
                ckpt.step,
                ckpt.config_hash
            );
        }
        let distinct_targets: BTreeSet<&str> =
            usable.iter().map(|t| t.target_id.as_str()).collect();
        let max_batch = cfg.batch_size.min(distinct_targets.len());
        let opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            graph,
            stack,
            vocab,
            tau,
            opt,
            rng,
            triplets: usable,
            max_batch,
            steps_done: 0,
            skipped,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn stack(&self) -> &EncoderStack {
        &self.stack
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    pub fn skipped_triplets(&self) -> usize {
        self.skipped
    }

    /// Uniformly permute the triplets and keep the first occurrence of each
    /// target until the batch is full, so in-batch negatives stay distinct.
    fn sample_batch(&mut self) -> Vec<usize> {
        let n = self.triplets.len();
        let perm = rand::seq::index::sample(&mut self.rng, n, n);
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(self.max_batch);
        for k in perm {
            if seen.insert(self.triplets[k].target_id.as_str()) {
                out.push(k);
                if out.len() == self.max_batch {
                    break;
                }
            }
        }
        out
    }

    fn encode_bundle(&self, t: &Triplet) -> Result<FeatureBundle> {
        let ids = self.vocab.tokenize(&t.modifier, self.cfg.max_len)?;
        let f_r2t = self.stack.encode_multimodal(&t.ref_id, &ids)?;
        let f_q = self.stack.encode_query(&f_r2t, &ids)?;
        let f_t = self.stack.encode_target(&t.target_id)?;
        let f_m = self.stack.encode_text_only(&ids)?;
        let f_t2r = if self.cfg.loss.alpha > 0.0 {
            let rev = t.reverse.as_deref().ok_or_else(|| {
                Error::config(format!(
                    "alpha = {} needs reverse text, triplet `{}` -> `{}` has none",
                    self.cfg.loss.alpha, t.ref_id, t.target_id
                ))
            })?;
            let rids = self.vocab.tokenize(rev, self.cfg.max_len)?;
            Some(self.stack.encode_multimodal(&t.target_id, &rids)?)
        } else {
            None
        };
        Ok(FeatureBundle {
            f_r2t,
            f_t2r,
            f_q,
            f_t,
            f_m,
        })
    }

    /// One optimization step: sample a batch, run the weighted objective,
    /// backpropagate, update, and clamp the temperature.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        self.steps_done += 1;
        if self.cfg.lr_schedule == LrSchedule::Linear {
            let frac = (self.steps_done - 1) as f64 / self.cfg.steps.max(1) as f64;
            self.opt.set_lr(self.cfg.lr * (1.0 - frac));
        }
        self.graph.reset();
        let idx = self.sample_batch();
        let bundles: Vec<FeatureBundle> = idx
            .iter()
            .map(|&k| self.encode_bundle(&self.triplets[k]))
            .collect::<Result<_>>()?;
        let batch = Batch::new(bundles)?;
        let (loss, mut breakdown) = total_loss(&batch, &self.cfg.loss, &self.tau)?;
        let grads = self.graph.backward(&loss)?;
        self.opt.step(&self.graph, &grads)?;
        clamp_tau(&self.graph)?;
        breakdown.step = self.steps_done;
        Ok(breakdown)
    }

    /// Score the current parameters on held-out queries over the full
    /// corpus gallery.
    pub fn evaluate(
        &self,
        queries: &[EvalQuery],
        categories: &BTreeMap<String, String>,
    ) -> Result<EvalReport> {
        let gallery = Gallery::from_stack(&self.stack)?;
        evaluator::evaluate(
            queries,
            &gallery,
            &self.stack,
            &self.vocab,
            self.cfg.max_len,
            self.cfg.loss.pooling,
            EvalOptions::default(),
            categories,
        )
    }
}

/// One evaluation log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEval {
    pub step: u64,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// What a finished stage reports back to the caller.
#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub steps: u64,
    pub final_loss: Option<LossBreakdown>,
    pub best_step: Option<u64>,
    pub best_score: Option<f64>,
    pub final_eval: Option<EvalReport>,
    pub checkpoint: PathBuf,
    pub skipped_triplets: usize,
}

/// Execute one stage end to end into a fresh run directory: step loop with
/// loss logging, periodic evaluation, and a best-by-aggregate checkpoint
/// (the final parameters when there is nothing to evaluate).
pub fn run_stage_with_data(
    cfg: &TrainConfig,
    corpus: &[ImageRecord],
    triplets: &[Triplet],
    eval_queries: &[EvalQuery],
    out_dir: &Path,
) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let losses_path = out_dir.join("losses.jsonl");
    if losses_path.exists() {
        return Err(Error::config(format!(
            "{} already exists; run directories are append-only, pick a fresh --out",
            losses_path.display()
        )));
    }

    let mut trainer = Trainer::new(cfg, corpus, triplets)?;
    let categories = category_map(corpus);
    let ckpt_path = out_dir.join("checkpoint.bin");
    let config_hash = cfg.config_hash();

    std::fs::write(out_dir.join("config.snapshot"), cfg.snapshot())
        .map_err(|e| Error::io(out_dir.join("config.snapshot"), e))?;
    trainer.vocab.save(&out_dir.join("vocab.txt"))?;
    let mut losses_out = BufWriter::new(
        File::create(&losses_path).map_err(|e| Error::io(&losses_path, e))?,
    );
    let eval_path = out_dir.join("eval.jsonl");
    let mut eval_out =
        BufWriter::new(File::create(&eval_path).map_err(|e| Error::io(&eval_path, e))?);

    let mut final_loss = None;
    let mut final_eval = None;
    let mut best: Option<(u64, f64)> = None;
    log::info!(
        "stage {} for {} steps over {} triplets",
        cfg.stage.as_str(),
        cfg.steps,
        trainer.triplets.len()
    );
    for step in 1..=cfg.steps {
        let breakdown = trainer.step()?;
        let line = serde_json::to_string(&breakdown)
            .map_err(|e| Error::contract(format!("loss serialization failed: {e}")))?;
        writeln!(losses_out, "{line}").map_err(|e| Error::io(&losses_path, e))?;
        final_loss = Some(breakdown);

        if !eval_queries.is_empty() && (step % cfg.eval_every == 0 || step == cfg.steps) {
            let report = trainer.evaluate(eval_queries, &categories)?;
            let line = serde_json::to_string(&StepEval {
                step,
                report: report.clone(),
            })
            .map_err(|e| Error::contract(format!("eval serialization failed: {e}")))?;
            writeln!(eval_out, "{line}").map_err(|e| Error::io(&eval_path, e))?;
            let score = report.selection_score();
            log::info!("step {step}: selection score {score:.4}");
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((step, score));
                losses_out.flush().map_err(|e| Error::io(&losses_path, e))?;
                save_checkpoint(&ckpt_path, trainer.graph(), step, config_hash)?;
            }
            final_eval = Some(report);
        }
    }
    losses_out.flush().map_err(|e| Error::io(&losses_path, e))?;
    eval_out.flush().map_err(|e| Error::io(&eval_path, e))?;
    if best.is_none() {
        save_checkpoint(&ckpt_path, trainer.graph(), trainer.steps_done(), config_hash)?;
    }
    Ok(RunSummary {
        steps: trainer.steps_done(),
        final_loss,
        best_step: best.map(|(s, _)| s),
        best_score: best.map(|(_, v)| v),
        final_eval,
        checkpoint: ckpt_path,
        skipped_triplets: trainer.skipped_triplets(),
    })
}

/// Path-driven variant: read the corpus and triplet files named in the
/// config, derive eval queries from the eval triplet file when present.
pub fn run_stage(cfg: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    let corpus_path = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| Error::config("config key `corpus` is required to run a stage"))?;
    let triplets_path = cfg
        .triplets
        .as_ref()
        .ok_or_else(|| Error::config("config key `triplets` is required to run a stage"))?;
    let corpus = read_corpus(corpus_path)?;
    let triplets = read_triplets(triplets_path)?;
    let eval_queries = match &cfg.eval_triplets {
        Some(p) => queries_from_triplets(&read_triplets(p)?, &corpus),
        None => Vec::new(),
    };
    run_stage_with_data(cfg, &corpus, &triplets, &eval_queries, out_dir)
}

/// One cell of the loss-combination grid.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub name: String,
    pub with_pretrain: bool,
    pub use_q2t: bool,
    pub use_t2t: bool,
    pub use_p2p: bool,
    pub final_total: Option<f64>,
    pub best_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
}

/// Run the 2x4 grid {scratch, pretrained} x {q2t, q2t+t2t, q2t+p2p,
/// q2t+t2t+p2p}. All cells share the base seed; pretraining runs once and
/// seeds the four pretrained cells.
pub fn ablation_matrix(
    base: &TrainConfig,
    corpus: &[ImageRecord],
    triplets: &[Triplet],
    eval_queries: &[EvalQuery],
    out_root: &Path,
) -> Result<Vec<AblationCell>> {
    let on_alpha = if base.loss.alpha > 0.0 { base.loss.alpha } else { 0.5 };
    let on_w_t2t = if base.loss.w_t2t > 0.0 { base.loss.w_t2t } else { 0.4 };

    let mut pre_cfg = base.clone();
    pre_cfg.stage = Stage::Pretrain;
    pre_cfg.loss.alpha = 0.0;
    pre_cfg.loss.w_t2t = 0.0;
    pre_cfg.init_from = None;
    let pre_summary =
        run_stage_with_data(&pre_cfg, corpus, triplets, eval_queries, &out_root.join("pretrain"))?;

    let mut cells = Vec::with_capacity(8);
    for with_pretrain in [false, true] {
        for (use_t2t, use_p2p) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut name = String::from(if with_pretrain { "pretrain_q2t" } else { "scratch_q2t" });
            if use_t2t {
                name.push_str("_t2t");
            }
            if use_p2p {
                name.push_str("_p2p");
            }
            let mut cfg = base.clone();
            cfg.stage = Stage::Finetune;
            cfg.loss.w_t2t = if use_t2t { on_w_t2t } else { 0.0 };
            cfg.loss.alpha = if use_p2p { on_alpha } else { 0.0 };
            cfg.init_from = with_pretrain.then(|| pre_summary.checkpoint.clone());
            let summary = run_stage_with_data(
                &cfg,
                corpus,
                triplets,
                eval_queries,
                &out_root.join(&name),
            )?;
            cells.push(AblationCell {
                name,
                with_pretrain,
                use_q2t: true,
                use_t2t,
                use_p2p,
                final_total: summary.final_loss.map(|b| b.total),
                best_score: summary.best_score,
                report: summary.final_eval,
            });
        }
    }
    Ok(cells)
}
