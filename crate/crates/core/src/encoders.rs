//! Toy encoder stack: id-keyed image embeddings, a shared token table, and
//! two small fused maps producing every feature the losses consume.
//!
//! Real frozen backbones are replaced by learnable per-image embeddings, so
//! pixels never enter the pipeline; a per-image feature is all the math needs.
//! The multimodal encoder fuses image tokens with a pooled text embedding, and
//! the text encoder maps prompt rows plus the same pooled text into the final
//! query space. Both are one affine map plus tanh.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::ndcore::{Graph, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token vocabulary with four reserved ids followed by corpus tokens in
/// sorted order, so identical corpora always produce identical vocabularies.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// Build from raw texts; every distinct word occurs once, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut words = BTreeSet::new();
        for text in texts {
            for w in words_of(text) {
                words.insert(w);
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Vocab { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Lowercase, split into alphanumeric runs, map unknowns to UNK, wrap
    /// with BOS/EOS, and truncate to `max_len` ids.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        if max_len < 2 {
            return Err(Error::contract(format!(
                "tokenize needs max_len >= 2, got {max_len}"
            )));
        }
        let mut ids = vec![BOS];
        for w in words_of(text) {
            ids.push(self.id(&w).unwrap_or(UNK));
        }
        ids.push(EOS);
        ids.truncate(max_len);
        Ok(ids)
    }

    /// One non-reserved token per line; line number plus the reserved count
    /// gives the token id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.tokens[RESERVED.len()..] {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    msg: "empty vocab line".to_string(),
                });
            }
            tokens.push(line);
        }
        Ok(Vocab { tokens })
    }
}

/// Lowercased maximal alphanumeric runs; punctuation and whitespace split.
pub fn words_of(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

/// The named features of one training example. `f_t2r` carries the detached
/// reverse-direction feature and is present only when a reverse text exists.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// Fused reference image + forward modifier: the implicit prototype.
    pub f_r2t: Tensor,
    /// Fused target image + reverse modifier, detached. Prototype anchor.
    pub f_t2r: Option<Tensor>,
    /// Query feature; row 0 is the CLS row.
    pub f_q: Tensor,
    /// Target image feature.
    pub f_t: Tensor,
    /// Text-only feature of the forward modifier.
    pub f_m: Tensor,
}

/// All learnable encoder parameters, registered in one graph under a name
/// prefix so two stacks (retrieval and generator) can coexist.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    graph: Graph,
    prefix: String,
    pub n_tokens: usize,
    pub dim: usize,
    pub dim_img: usize,
    images: BTreeSet<String>,
    vocab_size: usize,
}

impl EncoderStack {
    /// Register parameters for every image in `records` plus the shared
    /// projection, token table, and the two fused maps.
    pub fn new(
        graph: &Graph,
        prefix: &str,
        records: &[ImageRecord],
        vocab_size: usize,
        n_tokens: usize,
        dim: usize,
        dim_img: usize,
        rng: &mut impl Rng,
    ) -> Result<EncoderStack> {
        if n_tokens == 0 || dim == 0 || dim_img == 0 {
            return Err(Error::config(format!(
                "encoder dims must be positive (n_tokens={n_tokens}, dim={dim}, dim_img={dim_img})"
            )));
        }
        if vocab_size < RESERVED.len() {
            return Err(Error::config(format!(
                "vocab size {vocab_size} smaller than reserved token count"
            )));
        }
        let mut images = BTreeSet::new();
        for r in records {
            if !images.insert(r.id.clone()) {
                return Err(Error::contract(format!("duplicate image id `{}`", r.id)));
            }
        }
        let stack = EncoderStack {
            graph: graph.clone(),
            prefix: prefix.to_string(),
            n_tokens,
            dim,
            dim_img,
            images,
            vocab_size,
        };
        for id in &stack.images {
            graph.param(
                &stack.image_param(id),
                uniform(rng, vec![n_tokens, dim_img], 0.5),
            )?;
        }
        let w_scale = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        graph.param(
            &stack.name("proj.w"),
            uniform(rng, vec![dim_img, dim], w_scale(dim_img)),
        )?;
        graph.param(
            &stack.name("tok"),
            uniform(rng, vec![vocab_size, dim], 0.5),
        )?;
        graph.param(
            &stack.name("fuse.w"),
            uniform(rng, vec![2 * dim, dim], w_scale(2 * dim)),
        )?;
        graph.param(&stack.name("fuse.b"), Tensor::zeros(vec![1, dim]))?;
        graph.param(
            &stack.name("text.w"),
            uniform(rng, vec![2 * dim, dim], w_scale(2 * dim)),
        )?;
        graph.param(&stack.name("text.b"), Tensor::zeros(vec![1, dim]))?;
        Ok(stack)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn has_image(&self, id: &str) -> bool {
        self.images.contains(id)
    }

    /// Every encoder output is `[n_tokens, dim]`.
    pub fn output_shape(&self) -> (usize, usize) {
        (self.n_tokens, self.dim)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.iter().map(|s| s.as_str())
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}{}", self.prefix, suffix)
    }

    pub fn image_param(&self, id: &str) -> String {
        format!("{}img.{}", self.prefix, id)
    }

    pub fn token_param(&self) -> String {
        self.name("tok")
    }

    /// Projected image tokens: `table[id] @ proj -> [N, d]`.
    fn image_feature(&self, id: &str) -> Result<Tensor> {
        if !self.images.contains(id) {
            return Err(Error::MissingEmbedding(id.to_string()));
        }
        let table = self.graph.param_tensor(&self.image_param(id))?;
        let proj = self.graph.param_tensor(&self.name("proj.w"))?;
        table.matmul(&proj)
    }

    /// Embedded token rows `[len, d]`; ids must be in-vocab.
    pub fn token_rows(&self, ids: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocab of size {}",
                self.vocab_size
            )));
        }
        let table = self.graph.param_tensor(&self.token_param())?;
        table.gather_rows(ids)
    }

    /// Mean-pooled text embedding `[d]`; empty text pools to the zero vector.
    fn text_mean(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Ok(Tensor::zeros(vec![self.dim]));
        }
        self.token_rows(ids)?.mean_rows()
    }

    /// Copy a `[d]` vector into `n` identical rows.
    fn broadcast_rows(&self, v: &Tensor, n: usize) -> Result<Tensor> {
        Tensor::ones(vec![n, 1]).matmul(&v.reshape(vec![1, self.dim])?)
    }

    fn affine_tanh(&self, input: &Tensor, w: &str, b: &str) -> Result<Tensor> {
        let w = self.graph.param_tensor(&self.name(w))?;
        let b = self.graph.param_tensor(&self.name(b))?;
        let n = input.shape()[0];
        let bias_rows = Tensor::ones(vec![n, 1]).matmul(&b)?;
        input.matmul(&w)?.add(&bias_rows)?.tanh()
    }

    /// Multimodal fusion of an image with a modifier text: `[N, d]`.
    pub fn encode_multimodal(&self, image_id: &str, modifier_ids: &[usize]) -> Result<Tensor> {
        let img = self.image_feature(image_id)?;
        let text = self.broadcast_rows(&self.text_mean(modifier_ids)?, self.n_tokens)?;
        self.affine_tanh(&img.concat_cols(&text)?, "fuse.w", "fuse.b")
    }

    /// Target image feature: the multimodal encoder with an empty text slot.
    pub fn encode_target(&self, image_id: &str) -> Result<Tensor> {
        self.encode_multimodal(image_id, &[])
    }

    /// Query feature from prompt rows plus the modifier text; row 0 is CLS.
    pub fn encode_query(&self, prompt: &Tensor, modifier_ids: &[usize]) -> Result<Tensor> {
        if prompt.shape() != [self.n_tokens, self.dim] {
            return Err(Error::Shape {
                op: "encode_query",
                lhs: prompt.shape().to_vec(),
                rhs: vec![self.n_tokens, self.dim],
            });
        }
        let text = self.broadcast_rows(&self.text_mean(modifier_ids)?, self.n_tokens)?;
        self.affine_tanh(&prompt.concat_cols(&text)?, "text.w", "text.b")
    }

    /// Text-only feature with a zero prompt; independent of every image table.
    pub fn encode_text_only(&self, modifier_ids: &[usize]) -> Result<Tensor> {
        self.encode_query(&Tensor::zeros(vec![self.n_tokens, self.dim]), modifier_ids)
    }
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).expect("uniform init is finite")
}
