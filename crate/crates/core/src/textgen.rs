//! Modification-text generation: a tiny conditional autoregressive decoder
//! over a pooled image-pair context, a deterministic label-diff template
//! oracle, and an ingestion adapter for modifiers produced elsewhere.
//!
//! The decoder conditions on the assembled pair context, embeds the previous
//! token, updates one tanh recurrence, and scores the next token with a
//! zero-initialized head, so an untrained model is exactly uniform over the
//! vocabulary.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use crate::data::{ImageRecord, Source, Triplet};
use crate::encoders::{EncoderStack, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::ndcore::{Graph, Tensor};
use crate::optim::Optimizer;

/// The fixed instruction fed to the generator alongside the image pair.
pub const INSTRUCTION: &str = "How to change from one image to another?";

/// The assembled conditioning context for one image pair.
#[derive(Debug, Clone)]
pub struct GeneratorInput {
    /// Reference image feature `[N, d]`.
    pub q_r: Tensor,
    /// Target image feature `[N, d]`.
    pub q_t: Tensor,
    /// Pair feature: the fused midpoint of reference and target with the
    /// instruction text, `[N, d]`.
    pub q_c: Tensor,
    /// Embedded instruction tokens `[L_ins, d]`.
    pub q_ins: Tensor,
    /// All rows mapped into decoder space: `[3N + L_ins, d_llm]`.
    pub projected: Tensor,
}

/// The generator owns an encoder stack (independent from the retrieval
/// model's) plus the decoder parameters, all on a private graph.
#[derive(Debug)]
pub struct Generator {
    stack: EncoderStack,
    graph: Graph,
    pub d_llm: usize,
    vocab_size: usize,
}

impl Generator {
    pub fn new(
        records: &[ImageRecord],
        vocab_size: usize,
        n_tokens: usize,
        dim: usize,
        dim_img: usize,
        d_llm: usize,
        rng: &mut impl Rng,
    ) -> Result<Generator> {
        if d_llm == 0 {
            return Err(Error::config("d_llm must be positive".to_string()));
        }
        let graph = Graph::new();
        let stack = EncoderStack::new(
            &graph, "gen.", records, vocab_size, n_tokens, dim, dim_img, rng,
        )?;
        let scale = 1.0 / (d_llm as f64).sqrt();
        let init = |rng: &mut dyn rand::RngCore, shape: Vec<usize>, s: f64| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-s..s)).collect();
            Tensor::from_vec(shape, data).expect("finite init")
        };
        graph.param("gen.fc_llm.w", init(rng, vec![dim, d_llm], 1.0 / (dim as f64).sqrt()))?;
        graph.param("gen.dec.embed", init(rng, vec![vocab_size, d_llm], 0.5))?;
        graph.param("gen.dec.w_h", init(rng, vec![d_llm, d_llm], scale))?;
        graph.param("gen.dec.w_x", init(rng, vec![d_llm, d_llm], scale))?;
        graph.param("gen.dec.w_c", init(rng, vec![d_llm, d_llm], scale))?;
        graph.param("gen.dec.b", Tensor::zeros(vec![1, d_llm]))?;
        // Zero head: the untrained next-token distribution is exactly uniform.
        graph.param("gen.dec.out.w", Tensor::zeros(vec![d_llm, vocab_size]))?;
        graph.param("gen.dec.out.b", Tensor::zeros(vec![1, vocab_size]))?;
        Ok(Generator {
            stack,
            graph,
            d_llm,
            vocab_size,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn stack(&self) -> &EncoderStack {
        &self.stack
    }

    /// Build the conditioning context for one (reference, target) pair:
    /// both image features, their instruction-fused midpoint, the embedded
    /// instruction, and everything projected into decoder space.
    pub fn assemble_input(
        &self,
        ref_id: &str,
        tgt_id: &str,
        instruction_ids: &[usize],
    ) -> Result<GeneratorInput> {
        let q_r = self.stack.encode_target(ref_id)?;
        let q_t = self.stack.encode_target(tgt_id)?;
        let mid = q_r.add(&q_t)?.scale(0.5)?;
        let q_c = self.stack.encode_query(&mid, instruction_ids)?;
        if instruction_ids.is_empty() {
            return Err(Error::contract("instruction must not be empty".to_string()));
        }
        let q_ins = self.stack.token_rows(instruction_ids)?;
        let rows = q_r
            .concat_rows(&q_t)?
            .concat_rows(&q_c)?
            .concat_rows(&q_ins)?;
        let fc = self.graph.param_tensor("gen.fc_llm.w")?;
        let projected = rows.matmul(&fc)?;
        Ok(GeneratorInput {
            q_r,
            q_t,
            q_c,
            q_ins,
            projected,
        })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocab of size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// One recurrence step: `h' = tanh(h W_h + e W_x + c W_c + b)`.
    fn step_state(&self, h: &Tensor, token: usize, ctx: &Tensor) -> Result<Tensor> {
        let w_h = self.graph.param_tensor("gen.dec.w_h")?;
        let w_x = self.graph.param_tensor("gen.dec.w_x")?;
        let b = self.graph.param_tensor("gen.dec.b")?;
        let embed = self.graph.param_tensor("gen.dec.embed")?;
        let e = embed.gather_rows(&[token])?;
        h.matmul(&w_h)?
            .add(&e.matmul(&w_x)?)?
            .add(ctx)?
            .add(&b)?
            .tanh()
    }

    /// Context rows pooled into one decoder-space vector, premultiplied by
    /// the context weight.
    fn pooled_context(&self, input: &GeneratorInput) -> Result<Tensor> {
        let w_c = self.graph.param_tensor("gen.dec.w_c")?;
        let c = input.projected.mean_rows()?.reshape(vec![1, self.d_llm])?;
        c.matmul(&w_c)
    }

    fn logits(&self, h: &Tensor) -> Result<Tensor> {
        let w = self.graph.param_tensor("gen.dec.out.w")?;
        let b = self.graph.param_tensor("gen.dec.out.b")?;
        h.matmul(&w)?.add(&b)?.row(0)
    }

    /// Teacher-forced mean negative log-likelihood of `modifier_ids[1..]`
    /// given the context and each preceding token.
    pub fn lm_loss(&self, input: &GeneratorInput, modifier_ids: &[usize]) -> Result<Tensor> {
        self.check_ids(modifier_ids)?;
        if modifier_ids.len() < 2 {
            return Err(Error::contract(
                "modifier must contain at least one token beyond the start symbol".to_string(),
            ));
        }
        let ctx = self.pooled_context(input)?;
        let mut h = Tensor::zeros(vec![1, self.d_llm]);
        let mut total: Option<Tensor> = None;
        for m in 1..modifier_ids.len() {
            h = self.step_state(&h, modifier_ids[m - 1], &ctx)?;
            let logits = self.logits(&h)?;
            let nll = logits.logsumexp()?.sub(&logits.row(modifier_ids[m])?)?;
            total = Some(match total {
                None => nll,
                Some(t) => t.add(&nll)?,
            });
        }
        total
            .expect("at least one prediction")
            .scale(1.0 / (modifier_ids.len() - 1) as f64)
    }

    /// Greedy decode from BOS until EOS or `max_len` tokens. PAD and BOS are
    /// never emitted; ties resolve to the lowest token id. The returned
    /// sequence excludes BOS and EOS.
    pub fn generate_greedy(&self, input: &GeneratorInput, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be at least 1".to_string()));
        }
        let _guard = self.graph.eval_scope();
        let ctx = self.pooled_context(input)?;
        let mut h = Tensor::zeros(vec![1, self.d_llm]);
        let mut out = Vec::new();
        let mut prev = BOS;
        for _ in 0..max_len {
            h = self.step_state(&h, prev, &ctx)?;
            let logits = self.logits(&h)?.values();
            let mut best = EOS;
            let mut best_v = f64::NEG_INFINITY;
            for (id, &v) in logits.iter().enumerate() {
                if id == PAD || id == BOS {
                    continue;
                }
                if v > best_v {
                    best_v = v;
                    best = id;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            prev = best;
        }
        Ok(out)
    }

    /// Plain SGD over the language-model loss on (pair, text) examples,
    /// cycling through them in order. Returns the final-pass mean loss.
    pub fn train(
        &self,
        examples: &[(String, String, Vec<usize>)],
        instruction_ids: &[usize],
        steps: usize,
        lr: f64,
    ) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::contract("generator training needs examples".to_string()));
        }
        let mut opt = Optimizer::sgd(lr);
        let mut last = 0.0;
        for step in 0..steps {
            self.graph.reset();
            let (ref_id, tgt_id, ids) = &examples[step % examples.len()];
            let input = self.assemble_input(ref_id, tgt_id, instruction_ids)?;
            let loss = self.lm_loss(&input, ids)?;
            last = loss.item();
            let grads = self.graph.backward(&loss)?;
            opt.step(&self.graph, &grads)?;
        }
        self.graph.reset();
        Ok(last)
    }
}

/// Deterministic label-diff text: kept attributes, then removed, then added,
/// each group sorted; groups with no members are omitted.
pub fn template_oracle(reference: &ImageRecord, target: &ImageRecord) -> String {
    let lower = |s: &BTreeSet<String>| -> BTreeSet<String> {
        s.iter().map(|l| l.to_lowercase()).collect()
    };
    let r = lower(&reference.labels);
    let t = lower(&target.labels);
    let keep: Vec<&str> = r.intersection(&t).map(|s| s.as_str()).collect();
    let remove: Vec<&str> = r.difference(&t).map(|s| s.as_str()).collect();
    let add: Vec<&str> = t.difference(&r).map(|s| s.as_str()).collect();
    let mut parts = Vec::new();
    if !keep.is_empty() {
        parts.push(format!("keep {}", keep.join(" ")));
    }
    if !remove.is_empty() {
        parts.push(format!("remove {}", remove.join(" ")));
    }
    if !add.is_empty() {
        parts.push(format!("add {}", add.join(" ")));
    }
    if parts.is_empty() {
        "no visible attribute change".to_string()
    } else {
        parts.join("; ")
    }
}

/// Result of reading an external modifier file: parsed triplets tagged
/// `external`, a duplicate count, and per-line errors for malformed rows.
#[derive(Debug)]
pub struct IngestReport {
    pub triplets: Vec<Triplet>,
    pub duplicates: usize,
    pub errors: Vec<String>,
}

/// Read externally produced modifiers. Malformed lines are reported, not
/// fatal; duplicate (reference, target, modifier) rows collapse to one.
pub fn ingest_external(path: &Path) -> Result<IngestReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = IngestReport {
        triplets: Vec::new(),
        duplicates: 0,
        errors: Vec::new(),
    };
    let mut seen = BTreeSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Triplet>(&line) {
            Ok(mut t) => {
                t.source = Source::External;
                let key = (t.ref_id.clone(), t.target_id.clone(), t.modifier.clone());
                if seen.insert(key) {
                    report.triplets.push(t);
                } else {
                    report.duplicates += 1;
                }
            }
            Err(e) => report
                .errors
                .push(format!("{}:{}: {e}", path.display(), idx + 1)),
        }
    }
    Ok(report)
}

/// Generate triplets for mined pairs with the template oracle, optionally
/// caching the reverse-direction text for the prototype loss.
pub fn oracle_triplets(
    pairs: &[(String, String)],
    by_id: &std::collections::BTreeMap<&str, &ImageRecord>,
    with_reverse: bool,
) -> Result<Vec<Triplet>> {
    let mut out = Vec::with_capacity(pairs.len());
    for (ref_id, tgt_id) in pairs {
        let r = by_id
            .get(ref_id.as_str())
            .ok_or_else(|| Error::MissingEmbedding(ref_id.clone()))?;
        let t = by_id
            .get(tgt_id.as_str())
            .ok_or_else(|| Error::MissingEmbedding(tgt_id.clone()))?;
        out.push(Triplet {
            ref_id: ref_id.clone(),
            target_id: tgt_id.clone(),
            modifier: template_oracle(r, t),
            source: Source::Oracle,
            reverse: with_reverse.then(|| template_oracle(t, r)),
        });
    }
    Ok(out)
}
