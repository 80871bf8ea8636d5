//! Retrieval inference and metrics: max-cosine scoring of composed queries
//! against a gallery, Recall@K over the full gallery and over per-query
//! candidate subsets, aggregate scores, and a binary embedding-file format
//! for externally computed gallery features.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::ByteReader;
use crate::data::{ImageRecord, Triplet};
use crate::encoders::{EncoderStack, Vocab};
use crate::error::{Error, Result};
use crate::losses::{sim, Pooling};
use crate::ndcore::Tensor;

pub const EMBED_MAGIC: [u8; 4] = *b"MTSE";
pub const EMBED_VERSION: u32 = 1;

/// Immutable id-keyed candidate features, every entry `[n_tokens, dim]`.
#[derive(Debug, Clone)]
pub struct Gallery {
    ids: Vec<String>,
    feats: Vec<Tensor>,
    index: BTreeMap<String, usize>,
    n_tokens: usize,
    dim: usize,
}

impl Gallery {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Gallery> {
        if entries.is_empty() {
            return Err(Error::contract("gallery must contain at least one image"));
        }
        let shape = entries[0].1.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::contract(format!(
                "gallery features must be matrices, got shape {shape:?}"
            )));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut feats = Vec::with_capacity(entries.len());
        let mut index = BTreeMap::new();
        for (id, feat) in entries {
            if feat.shape() != shape {
                return Err(Error::Shape {
                    op: "gallery",
                    lhs: feat.shape().to_vec(),
                    rhs: shape,
                });
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::contract(format!("duplicate gallery id `{id}`")));
            }
            feats.push(feat.to_value());
            ids.push(id);
        }
        Ok(Gallery {
            ids,
            feats,
            index,
            n_tokens: shape[0],
            dim: shape[1],
        })
    }

    /// Encode every image the stack knows as a target feature, without
    /// touching the tape.
    pub fn from_stack(stack: &EncoderStack) -> Result<Gallery> {
        let _guard = stack.graph().eval_scope();
        let mut entries = Vec::new();
        for id in stack.image_ids() {
            entries.push((id.to_string(), stack.encode_target(id)?.to_value()));
        }
        Gallery::new(entries)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(|s| s.as_str())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn feature(&self, id: &str) -> Option<&Tensor> {
        self.index.get(id).map(|&i| &self.feats[i])
    }
}

/// One retrieval query: compose the reference image with the modifier text
/// and find the target, optionally within a declared candidate subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub ref_id: String,
    pub modifier: String,
    pub target_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<String>>,
}

impl EvalQuery {
    pub fn from_triplet(t: &Triplet) -> EvalQuery {
        EvalQuery {
            ref_id: t.ref_id.clone(),
            modifier: t.modifier.clone(),
            target_id: t.target_id.clone(),
            subset_ids: None,
        }
    }
}

/// Recall over per-query candidate subsets, with queries that carry no
/// subset skipped rather than failing the whole evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetRecall {
    pub value: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Per-category recalls for label-attribute style evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecall {
    pub n_queries: usize,
    pub recall_at_10: f64,
    pub recall_at_50: f64,
    /// (R@10 + R@50) / 2 within the category.
    pub avg_fiq: f64,
}

/// Aggregate retrieval metrics over one query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub recall_at_50: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_subset_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_subset_at_2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_subset_at_3: Option<f64>,
    /// (R@5 + Rsub@1) / 2, present when any query carries a subset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_cirr: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_category: BTreeMap<String, CategoryRecall>,
    /// Mean of the per-category averages, present when categories exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_fiq: Option<f64>,
    #[serde(default)]
    pub subset_skipped: usize,
}

impl EvalReport {
    /// Scalar used to pick the best checkpoint: the subset aggregate when
    /// subsets were evaluated, else the category aggregate, else Recall@1.
    pub fn selection_score(&self) -> f64 {
        self.avg_cirr.or(self.avg_fiq).unwrap_or(self.recall_at_1)
    }
}

/// Map image id to category for every record that declares one.
pub fn category_map(records: &[ImageRecord]) -> BTreeMap<String, String> {
    records
        .iter()
        .filter_map(|r| r.category.clone().map(|c| (r.id.clone(), c)))
        .collect()
}

fn query_feature(
    query: &EvalQuery,
    stack: &EncoderStack,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Tensor> {
    let _guard = stack.graph().eval_scope();
    let ids = vocab.tokenize(&query.modifier, max_len)?;
    let f_r2t = stack.encode_multimodal(&query.ref_id, &ids)?;
    Ok(stack.encode_query(&f_r2t, &ids)?.to_value())
}

/// Score candidates by descending similarity, ascending id on ties.
fn ranked_ids(
    f_q: &Tensor,
    gallery: &Gallery,
    candidates: impl Iterator<Item = usize>,
    pooling: Pooling,
) -> Result<Vec<String>> {
    let mut scored: Vec<(f64, &str)> = Vec::new();
    for i in candidates {
        let s = sim(f_q, &gallery.feats[i], pooling)?.item();
        scored.push((s, &gallery.ids[i]));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().map(|(_, id)| id.to_string()).collect())
}

fn check_dims(gallery: &Gallery, stack: &EncoderStack) -> Result<()> {
    let (n, d) = stack.output_shape();
    if gallery.n_tokens != n || gallery.dim != d {
        return Err(Error::Shape {
            op: "rank_gallery",
            lhs: vec![gallery.n_tokens, gallery.dim],
            rhs: vec![n, d],
        });
    }
    Ok(())
}

/// Rank the whole gallery against one composed query. The reference image
/// never appears in its own ranking.
pub fn rank_gallery(
    query: &EvalQuery,
    gallery: &Gallery,
    stack: &EncoderStack,
    vocab: &Vocab,
    max_len: usize,
    pooling: Pooling,
) -> Result<Vec<String>> {
    if gallery.is_empty() {
        return Err(Error::contract("cannot rank an empty gallery"));
    }
    check_dims(gallery, stack)?;
    let f_q = query_feature(query, stack, vocab, max_len)?;
    let candidates = (0..gallery.len()).filter(|&i| gallery.ids[i] != query.ref_id);
    ranked_ids(&f_q, gallery, candidates, pooling)
}

/// Rank only the query's declared subset. By default the reference is
/// excluded even if listed; `include_reference` adds it as a candidate for
/// protocol-matching experiments.
pub fn rank_subset(
    query: &EvalQuery,
    gallery: &Gallery,
    stack: &EncoderStack,
    vocab: &Vocab,
    max_len: usize,
    pooling: Pooling,
    include_reference: bool,
) -> Result<Vec<String>> {
    let subset = query.subset_ids.as_ref().ok_or_else(|| {
        Error::contract(format!(
            "query `{}` carries no subset_ids",
            query.ref_id
        ))
    })?;
    check_dims(gallery, stack)?;
    let f_q = query_feature(query, stack, vocab, max_len)?;
    let mut candidates = Vec::with_capacity(subset.len() + 1);
    for id in subset {
        if id == &query.ref_id {
            continue;
        }
        let i = gallery
            .index
            .get(id)
            .ok_or_else(|| Error::contract(format!("subset id `{id}` not in gallery")))?;
        candidates.push(*i);
    }
    if include_reference {
        if let Some(&i) = gallery.index.get(&query.ref_id) {
            candidates.push(i);
        }
    }
    ranked_ids(&f_q, gallery, candidates.into_iter(), pooling)
}

/// Fraction of queries whose target lands in the top `k` of its ranking; `k`
/// beyond the ranking length counts the whole ranking.
pub fn recall_at_k(rankings: &[(Vec<String>, String)], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("recall needs k >= 1"));
    }
    if rankings.is_empty() {
        return Err(Error::contract("recall over zero rankings is undefined"));
    }
    let hits = rankings
        .iter()
        .filter(|(ids, target)| ids.iter().take(k).any(|id| id == target))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Subset recall over queries; queries without subset_ids are skipped and
/// counted in the report.
pub fn recall_subset_at_k(
    queries: &[EvalQuery],
    gallery: &Gallery,
    stack: &EncoderStack,
    vocab: &Vocab,
    max_len: usize,
    pooling: Pooling,
    include_reference: bool,
    k: usize,
) -> Result<SubsetRecall> {
    if k == 0 {
        return Err(Error::contract("recall needs k >= 1"));
    }
    let mut hits = 0usize;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for q in queries {
        if q.subset_ids.is_none() {
            log::warn!("query `{}` has no subset_ids, skipped", q.ref_id);
            skipped += 1;
            continue;
        }
        let ranking = rank_subset(q, gallery, stack, vocab, max_len, pooling, include_reference)?;
        used += 1;
        if ranking.iter().take(k).any(|id| id == &q.target_id) {
            hits += 1;
        }
    }
    let value = if used == 0 {
        0.0
    } else {
        hits as f64 / used as f64
    };
    Ok(SubsetRecall {
        value,
        used,
        skipped,
    })
}

fn validate_query(query: &EvalQuery, gallery: &Gallery) -> Result<()> {
    if !gallery.contains(&query.target_id) {
        return Err(Error::contract(format!(
            "target `{}` not in gallery",
            query.target_id
        )));
    }
    if let Some(subset) = &query.subset_ids {
        if !subset.iter().any(|id| id == &query.target_id) {
            return Err(Error::contract(format!(
                "subset for query `{}` omits its target `{}`",
                query.ref_id, query.target_id
            )));
        }
        if subset.iter().any(|id| id == &query.ref_id) {
            return Err(Error::contract(format!(
                "subset for query `{}` contains the reference image",
                query.ref_id
            )));
        }
        for id in subset {
            if !gallery.contains(id) {
                return Err(Error::contract(format!(
                    "subset id `{id}` not in gallery"
                )));
            }
        }
    }
    Ok(())
}

fn recall_from_positions(positions: &[Option<usize>], k: usize) -> f64 {
    let hits = positions.iter().filter(|p| matches!(p, Some(r) if *r < k)).count();
    hits as f64 / positions.len() as f64
}

/// Options for a full evaluation pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Add the reference image to each subset ranking (protocol variant).
    pub include_reference: bool,
}

/// Full evaluation pass: rank every query against the gallery (and its
/// subset when declared), then aggregate recalls.
pub fn evaluate(
    queries: &[EvalQuery],
    gallery: &Gallery,
    stack: &EncoderStack,
    vocab: &Vocab,
    max_len: usize,
    pooling: Pooling,
    options: EvalOptions,
    categories: &BTreeMap<String, String>,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::contract("evaluate needs at least one query"));
    }
    let mut positions = Vec::with_capacity(queries.len());
    let mut subset_positions = Vec::new();
    let mut subset_skipped = 0usize;
    for q in queries {
        validate_query(q, gallery)?;
        let ranking = rank_gallery(q, gallery, stack, vocab, max_len, pooling)?;
        positions.push(ranking.iter().position(|id| id == &q.target_id));
        if q.subset_ids.is_some() {
            let sub = rank_subset(
                q,
                gallery,
                stack,
                vocab,
                max_len,
                pooling,
                options.include_reference,
            )?;
            subset_positions.push(sub.iter().position(|id| id == &q.target_id));
        } else {
            subset_skipped += 1;
        }
    }

    let recall_at = |k: usize| recall_from_positions(&positions, k);
    let (recall_at_5, recall_at_10, recall_at_50) =
        (recall_at(5), recall_at(10), recall_at(50));
    let subset_at = |k: usize| {
        (!subset_positions.is_empty()).then(|| recall_from_positions(&subset_positions, k))
    };
    let recall_subset_at_1 = subset_at(1);

    let mut per_category: BTreeMap<String, Vec<Option<usize>>> = BTreeMap::new();
    for (q, pos) in queries.iter().zip(&positions) {
        if let Some(cat) = categories.get(&q.target_id) {
            per_category.entry(cat.clone()).or_default().push(*pos);
        }
    }
    let per_category: BTreeMap<String, CategoryRecall> = per_category
        .into_iter()
        .map(|(cat, ps)| {
            let r10 = recall_from_positions(&ps, 10);
            let r50 = recall_from_positions(&ps, 50);
            (
                cat,
                CategoryRecall {
                    n_queries: ps.len(),
                    recall_at_10: r10,
                    recall_at_50: r50,
                    avg_fiq: (r10 + r50) / 2.0,
                },
            )
        })
        .collect();
    let avg_fiq = (!per_category.is_empty()).then(|| {
        per_category.values().map(|c| c.avg_fiq).sum::<f64>() / per_category.len() as f64
    });

    Ok(EvalReport {
        n_queries: queries.len(),
        recall_at_1: recall_at(1),
        recall_at_5,
        recall_at_10,
        recall_at_50,
        recall_subset_at_1,
        recall_subset_at_2: subset_at(2),
        recall_subset_at_3: subset_at(3),
        avg_cirr: recall_subset_at_1.map(|rs1| (recall_at_5 + rs1) / 2.0),
        per_category,
        avg_fiq,
        subset_skipped,
    })
}

/// Write gallery features: magic, version, count, token count, width, then
/// one id-prefixed float32 block per image.
pub fn write_embeddings(path: &Path, gallery: &Gallery) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&EMBED_MAGIC).map_err(io)?;
    w.write_all(&EMBED_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(gallery.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(gallery.n_tokens as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(gallery.dim as u32).to_le_bytes()).map_err(io)?;
    for (id, feat) in gallery.ids.iter().zip(&gallery.feats) {
        let bytes = id.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::contract(format!(
                "image id longer than {} bytes: `{id}`",
                u16::MAX
            )));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        for v in feat.values() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read a gallery back from the binary embedding format; every violation is
/// reported with the byte offset where it was detected.
pub fn ingest_embeddings(path: &Path) -> Result<Gallery> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(BufReader::new(file), path);
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if magic != EMBED_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {magic:?}, expected {EMBED_MAGIC:?}"),
        ));
    }
    let version = r.u32("version")?;
    if version != EMBED_VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported version {version}, expected {EMBED_VERSION}"),
        ));
    }
    let count = r.u64("image count")?;
    let n = r.u32("token count")? as usize;
    let d_offset = r.offset;
    let d = r.u32("feature width")? as usize;
    if n == 0 {
        return Err(Error::format(path, 16, "token count must be positive"));
    }
    if d == 0 {
        return Err(Error::format(path, d_offset, "feature width must be positive"));
    }
    if count == 0 {
        return Err(Error::format(path, 8, "image count must be positive"));
    }

    let mut entries = Vec::with_capacity(count as usize);
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let id_start = r.offset;
        let id_len = r.u16("id length")? as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.take(&mut id_bytes, "image id")?;
        let id = String::from_utf8(id_bytes).map_err(|e| {
            Error::format(path, id_start + 2, format!("image id is not UTF-8: {e}"))
        })?;
        if !seen.insert(id.clone()) {
            return Err(Error::format(
                path,
                id_start,
                format!("duplicate image id `{id}`"),
            ));
        }
        let payload_start = r.offset;
        let mut data = Vec::with_capacity(n * d);
        let mut b = [0u8; 4];
        for _ in 0..n * d {
            r.take(&mut b, "feature payload")?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        let feat = Tensor::from_vec(vec![n, d], data).map_err(|e| {
            Error::format(path, payload_start, format!("invalid feature values: {e}"))
        })?;
        entries.push((id, feat));
    }
    r.expect_eof()?;
    Gallery::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::losses::EPS_NORM;
    use crate::ndcore::Graph;

    fn random_feat(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(vec![n, d], data).unwrap()
    }

    fn test_stack(records: &[ImageRecord], n: usize, d: usize, seed: u64) -> (EncoderStack, Vocab) {
        let graph = Graph::new();
        let vocab = Vocab::build(["add logo", "remove stripes", "keep color"]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack =
            EncoderStack::new(&graph, "enc.", records, vocab.len(), n, d, d + 1, &mut rng).unwrap();
        (stack, vocab)
    }

    /// Plain-loop replica of pooled-query max-cosine scoring.
    fn oracle_score(f_q: &Tensor, f_t: &Tensor, pooling: Pooling) -> f64 {
        let n = f_q.shape()[0];
        let d = f_q.shape()[1];
        let qv = f_q.values();
        let mut pooled = vec![0.0; d];
        match pooling {
            Pooling::Cls => pooled.copy_from_slice(&qv[..d]),
            Pooling::AvgWithCls => {
                for r in 0..n {
                    for c in 0..d {
                        pooled[c] += qv[r * d + c];
                    }
                }
                for c in 0..d {
                    pooled[c] = (pooled[c] + qv[c]) / (n + 1) as f64;
                }
            }
        }
        let norm = |v: &[f64]| -> Vec<f64> {
            let s = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS_NORM);
            v.iter().map(|x| x / s).collect()
        };
        let q = norm(&pooled);
        let tv = f_t.values();
        let mut best = f64::NEG_INFINITY;
        for r in 0..n {
            let t = norm(&tv[r * d..(r + 1) * d]);
            let cos: f64 = q.iter().zip(&t).map(|(a, b)| a * b).sum();
            best = best.max(cos);
        }
        best
    }

    #[test]
    fn gallery_rejects_duplicates_and_mixed_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = random_feat(&mut rng, 2, 3);
        let err = Gallery::new(vec![("a".into(), f.clone()), ("a".into(), f.clone())])
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        let other = random_feat(&mut rng, 2, 4);
        assert!(Gallery::new(vec![("a".into(), f), ("b".into(), other)]).is_err());
        assert!(Gallery::new(vec![]).is_err());
    }

    #[test]
    fn ranking_matches_brute_force_oracle() {
        let records: Vec<ImageRecord> = (0..10)
            .map(|i| ImageRecord::new(format!("g{i:03}")))
            .collect();
        let (stack, vocab) = test_stack(&records, 4, 3, 11);
        let gallery = Gallery::from_stack(&stack).unwrap();
        for pooling in [Pooling::Cls, Pooling::AvgWithCls] {
            let query = EvalQuery {
                ref_id: "g000".into(),
                modifier: "add logo".into(),
                target_id: "g004".into(),
                subset_ids: None,
            };
            let got = rank_gallery(&query, &gallery, &stack, &vocab, 16, pooling).unwrap();
            let ids = vocab.tokenize(&query.modifier, 16).unwrap();
            let f_q = {
                let _g = stack.graph().eval_scope();
                let f_r2t = stack.encode_multimodal(&query.ref_id, &ids).unwrap();
                stack.encode_query(&f_r2t, &ids).unwrap().to_value()
            };
            let mut scored: Vec<(f64, String)> = gallery
                .ids()
                .filter(|id| *id != query.ref_id)
                .map(|id| {
                    (
                        oracle_score(&f_q, gallery.feature(id).unwrap(), pooling),
                        id.to_string(),
                    )
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            let want: Vec<String> = scored.into_iter().map(|(_, id)| id).collect();
            assert_eq!(got, want);
            assert_eq!(got.len(), 9);
            assert!(!got.contains(&"g000".to_string()));
        }
    }

    #[test]
    fn equal_scores_break_ties_by_ascending_id() {
        // Identical gallery features give identical scores for every
        // candidate, so the ranking must be plain id order.
        let records: Vec<ImageRecord> = ["zz", "aa", "mm"]
            .iter()
            .map(|i| ImageRecord::new(*i))
            .collect();
        let (stack, vocab) = test_stack(&records, 3, 4, 5);
        let feat = {
            let _g = stack.graph().eval_scope();
            stack.encode_target("aa").unwrap().to_value()
        };
        let gallery = Gallery::new(
            ["aa", "mm", "zz", "ref"]
                .iter()
                .map(|id| (id.to_string(), feat.clone()))
                .collect(),
        )
        .unwrap();
        let query = EvalQuery {
            ref_id: "aa".into(),
            modifier: String::new(),
            target_id: "mm".into(),
            subset_ids: None,
        };
        let got = rank_gallery(&query, &gallery, &stack, &vocab, 8, Pooling::Cls).unwrap();
        assert_eq!(got, vec!["mm".to_string(), "ref".to_string(), "zz".to_string()]);
    }

    #[test]
    fn positive_scaling_of_gallery_features_preserves_rankings() {
        let records: Vec<ImageRecord> = (0..6)
            .map(|i| ImageRecord::new(format!("g{i:03}")))
            .collect();
        let (stack, vocab) = test_stack(&records, 4, 3, 23);
        let base = Gallery::from_stack(&stack).unwrap();
        let scaled = Gallery::new(
            base.ids
                .iter()
                .zip(&base.feats)
                .map(|(id, f)| (id.clone(), f.scale(7.5).unwrap()))
                .collect(),
        )
        .unwrap();
        let query = EvalQuery {
            ref_id: "g001".into(),
            modifier: "remove stripes".into(),
            target_id: "g002".into(),
            subset_ids: None,
        };
        let a = rank_gallery(&query, &base, &stack, &vocab, 16, Pooling::Cls).unwrap();
        let b = rank_gallery(&query, &scaled, &stack, &vocab, 16, Pooling::Cls).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recall_counts_hand_ranks() {
        let rankings: Vec<(Vec<String>, String)> = [1usize, 3, 7, 2]
            .iter()
            .map(|&rank| {
                let ids: Vec<String> = (0..8).map(|i| format!("r{i}")).collect();
                (ids, format!("r{}", rank - 1))
            })
            .collect();
        assert_eq!(recall_at_k(&rankings, 3).unwrap(), 0.75);
        assert_eq!(recall_at_k(&rankings, 1).unwrap(), 0.25);
        assert_eq!(recall_at_k(&rankings, 8).unwrap(), 1.0);
        // k beyond the ranking length behaves like k = length.
        assert_eq!(recall_at_k(&rankings, 500).unwrap(), 1.0);
        assert!(recall_at_k(&rankings, 0).is_err());
        assert!(recall_at_k(&[], 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn recall_is_monotone_in_k(ranks in proptest::collection::vec(0usize..20, 1..12),
                                   k1 in 1usize..25, k2 in 1usize..25) {
            let rankings: Vec<(Vec<String>, String)> = ranks
                .iter()
                .map(|&r| {
                    let ids: Vec<String> = (0..20).map(|i| format!("x{i:02}")).collect();
                    (ids, format!("x{r:02}"))
                })
                .collect();
            let (lo, hi) = (k1.min(k2), k1.max(k2));
            prop_assert!(recall_at_k(&rankings, lo).unwrap() <= recall_at_k(&rankings, hi).unwrap());
        }
    }

    #[test]
    fn subset_recall_skips_queries_without_subsets() {
        let records: Vec<ImageRecord> = (0..6)
            .map(|i| ImageRecord::new(format!("g{i:03}")))
            .collect();
        let (stack, vocab) = test_stack(&records, 3, 4, 2);
        let gallery = Gallery::from_stack(&stack).unwrap();
        let with_subset = EvalQuery {
            ref_id: "g000".into(),
            modifier: "add logo".into(),
            target_id: "g001".into(),
            subset_ids: Some(vec!["g001".into()]),
        };
        let without = EvalQuery {
            subset_ids: None,
            ..with_subset.clone()
        };
        let r = recall_subset_at_k(
            &[with_subset, without],
            &gallery,
            &stack,
            &vocab,
            8,
            Pooling::Cls,
            false,
            1,
        )
        .unwrap();
        assert_eq!(r.used, 1);
        assert_eq!(r.skipped, 1);
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn subset_recall_matches_restricted_oracle_and_saturates() {
        let records: Vec<ImageRecord> = (0..8)
            .map(|i| ImageRecord::new(format!("g{i:03}")))
            .collect();
        let (stack, vocab) = test_stack(&records, 4, 3, 31);
        let gallery = Gallery::from_stack(&stack).unwrap();
        let subset: Vec<String> = (1..6).map(|i| format!("g{i:03}")).collect();
        let query = EvalQuery {
            ref_id: "g000".into(),
            modifier: "keep color".into(),
            target_id: "g003".into(),
            subset_ids: Some(subset.clone()),
        };
        let ranking =
            rank_subset(&query, &gallery, &stack, &vocab, 16, Pooling::Cls, false).unwrap();
        let ids = vocab.tokenize(&query.modifier, 16).unwrap();
        let f_q = {
            let _g = stack.graph().eval_scope();
            let f_r2t = stack.encode_multimodal(&query.ref_id, &ids).unwrap();
            stack.encode_query(&f_r2t, &ids).unwrap().to_value()
        };
        let mut scored: Vec<(f64, String)> = subset
            .iter()
            .map(|id| {
                (
                    oracle_score(&f_q, gallery.feature(id).unwrap(), Pooling::Cls),
                    id.clone(),
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let want: Vec<String> = scored.into_iter().map(|(_, id)| id).collect();
        assert_eq!(ranking, want);
        // k at or above the subset size always finds the target.
        let r = recall_subset_at_k(
            &[query],
            &gallery,
            &stack,
            &vocab,
            16,
            Pooling::Cls,
            false,
            5,
        )
        .unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn include_reference_adds_ref_to_subset_ranking() {
        let records: Vec<ImageRecord> = (0..5)
            .map(|i| ImageRecord::new(format!("g{i:03}")))
            .collect();
        let (stack, vocab) = test_stack(&records, 3, 4, 9);
        let gallery = Gallery::from_stack(&stack).unwrap();
        let query = EvalQuery {
            ref_id: "g000".into(),
            modifier: "add logo".into(),
            target_id: "g002".into(),
            subset_ids: Some(vec!["g001".into(), "g002".into(), "g003".into()]),
        };
        let plain = rank_subset(&query, &gallery, &stack, &vocab, 8, Pooling::Cls, false).unwrap();
        assert_eq!(plain.len(), 3);
        assert!(!plain.iter().any(|id| id == "g000"));
        let with_ref =
            rank_subset(&query, &gallery, &stack, &vocab, 8, Pooling::Cls, true).unwrap();
        assert_eq!(with_ref.len(), 4);
        assert!(with_ref.iter().any(|id| id == "g000"));
        // The extra candidate only inserts the reference; relative order of
        // the original subset is untouched.
        let filtered: Vec<&String> = with_ref.iter().filter(|id| *id != "g000").collect();
        let plain_refs: Vec<&String> = plain.iter().collect();
        assert_eq!(filtered, plain_refs);
    }

    #[test]
    fn subset_recall_never_below_full_recall() {
        let records: Vec<ImageRecord> = (0..12)
            .map(|i| ImageRecord::new(format!("g{i:03}")))
            .collect();
        let (stack, vocab) = test_stack(&records, 3, 5, 17);
        let gallery = Gallery::from_stack(&stack).unwrap();
        let queries: Vec<EvalQuery> = (0..6)
            .map(|i| EvalQuery {
                ref_id: format!("g{:03}", 2 * i),
                modifier: "add logo".into(),
                target_id: format!("g{:03}", 2 * i + 1),
                subset_ids: Some(
                    (0..12)
                        .filter(|&j| j != 2 * i && j % 3 != (i + 1) % 3 || j == 2 * i + 1)
                        .filter(|&j| j != 2 * i)
                        .map(|j| format!("g{j:03}"))
                        .collect(),
                ),
            })
            .collect();
        for k in [1, 2, 3] {
            let full: Vec<(Vec<String>, String)> = queries
                .iter()
                .map(|q| {
                    (
                        rank_gallery(q, &gallery, &stack, &vocab, 8, Pooling::Cls).unwrap(),
                        q.target_id.clone(),
                    )
                })
                .collect();
            let sub =
                recall_subset_at_k(&queries, &gallery, &stack, &vocab, 8, Pooling::Cls, false, k)
                    .unwrap();
            assert!(sub.value >= recall_at_k(&full, k).unwrap());
        }
    }

    #[test]
    fn evaluate_aggregates_and_validates() {
        let records: Vec<ImageRecord> = (0..8)
            .map(|i| {
                let mut r = ImageRecord::new(format!("g{i:03}"));
                r.category = Some(if i < 4 { "dress".into() } else { "shirt".into() });
                r
            })
            .collect();
        let (stack, vocab) = test_stack(&records, 3, 4, 41);
        let gallery = Gallery::from_stack(&stack).unwrap();
        let queries: Vec<EvalQuery> = (0..4)
            .map(|i| EvalQuery {
                ref_id: format!("g{:03}", 2 * i),
                modifier: "add logo".into(),
                target_id: format!("g{:03}", 2 * i + 1),
                subset_ids: (i % 2 == 0).then(|| vec![format!("g{:03}", 2 * i + 1)]),
            })
            .collect();
        let cats = category_map(&records);
        let opts = EvalOptions::default();
        let report =
            evaluate(&queries, &gallery, &stack, &vocab, 8, Pooling::Cls, opts, &cats).unwrap();
        assert_eq!(report.n_queries, 4);
        assert!(report.recall_at_1 <= report.recall_at_5);
        assert!(report.recall_at_5 <= report.recall_at_10);
        assert!(report.recall_at_10 <= report.recall_at_50);
        assert_eq!(report.recall_at_50, 1.0);
        assert_eq!(report.subset_skipped, 2);
        assert_eq!(report.recall_subset_at_1, Some(1.0));
        let rsub1 = report.recall_subset_at_1.unwrap();
        assert_eq!(report.avg_cirr, Some((report.recall_at_5 + rsub1) / 2.0));
        assert_eq!(report.per_category.len(), 2);
        for cat in report.per_category.values() {
            assert_eq!(cat.avg_fiq, (cat.recall_at_10 + cat.recall_at_50) / 2.0);
        }
        let mean: f64 = report.per_category.values().map(|c| c.avg_fiq).sum::<f64>() / 2.0;
        assert_eq!(report.avg_fiq, Some(mean));
        assert_eq!(report.selection_score(), report.avg_cirr.unwrap());

        let bad_target = EvalQuery {
            ref_id: "g000".into(),
            modifier: String::new(),
            target_id: "nope".into(),
            subset_ids: None,
        };
        assert!(
            evaluate(&[bad_target], &gallery, &stack, &vocab, 8, Pooling::Cls, opts, &cats)
                .is_err()
        );
        let ref_in_subset = EvalQuery {
            ref_id: "g000".into(),
            modifier: String::new(),
            target_id: "g001".into(),
            subset_ids: Some(vec!["g001".into(), "g000".into()]),
        };
        assert!(
            evaluate(&[ref_in_subset], &gallery, &stack, &vocab, 8, Pooling::Cls, opts, &cats)
                .is_err()
        );
    }

    #[test]
    fn embeddings_round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Cast through f32 so the on-disk representation is exact.
        let entries: Vec<(String, Tensor)> = (0..5)
            .map(|i| {
                let data: Vec<f64> = (0..6)
                    .map(|_| rng.random_range(-1.0_f64..1.0) as f32 as f64)
                    .collect();
                (format!("img{i}"), Tensor::from_vec(vec![2, 3], data).unwrap())
            })
            .collect();
        let gallery = Gallery::new(entries.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        write_embeddings(&path, &gallery).unwrap();
        let back = ingest_embeddings(&path).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.n_tokens(), 2);
        assert_eq!(back.dim(), 3);
        for (id, feat) in &entries {
            assert_eq!(back.feature(id).unwrap().values(), feat.values());
        }
        // A second write of the ingested gallery is byte-identical.
        let path2 = dir.path().join("g2.bin");
        write_embeddings(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn hand_written_bytes_ingest_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hand.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MTSE");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for (id, vals) in [("a", [1.5f32, -2.0]), ("b", [0.25, 8.0]), ("c", [-0.5, 4.0])] {
            bytes.extend_from_slice(&(id.len() as u16).to_le_bytes());
            bytes.extend_from_slice(id.as_bytes());
            for v in vals {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(&path, &bytes).unwrap();
        let g = ingest_embeddings(&path).unwrap();
        assert_eq!(g.feature("a").unwrap().values(), vec![1.5, -2.0]);
        assert_eq!(g.feature("b").unwrap().values(), vec![0.25, 8.0]);
        assert_eq!(g.feature("c").unwrap().values(), vec![-0.5, 4.0]);
    }

    #[test]
    fn truncated_payload_reports_the_failing_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MTSE");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&32u32.to_le_bytes());
        bytes.extend_from_slice(&64u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(b"ab");
        bytes.extend_from_slice(&[0u8; 10]);
        std::fs::write(&path, &bytes).unwrap();
        let err = ingest_embeddings(&path).unwrap_err();
        match err {
            Error::Format { offset, ref msg, .. } => {
                // Header (24) + id record (4) + two whole floats (8) = 36;
                // the torn third float fails there.
                assert_eq!(offset, 36);
                assert!(msg.contains("end of file"), "{msg}");
            }
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_version_and_trailing_data_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");

        std::fs::write(&path, b"NOPE").unwrap();
        match ingest_embeddings(&path).unwrap_err() {
            Error::Format { offset: 0, .. } => {}
            other => panic!("unexpected {other}"),
        }

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MTSE");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match ingest_embeddings(&path).unwrap_err() {
            Error::Format { offset: 4, .. } => {}
            other => panic!("unexpected {other}"),
        }

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MTSE");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(b"a");
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.push(0xFF);
        std::fs::write(&path, &bytes).unwrap();
        match ingest_embeddings(&path).unwrap_err() {
            Error::Format { offset, ref msg, .. } => {
                assert_eq!(offset, 31);
                assert!(msg.contains("trailing"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn gallery_with_single_target_ranks_it_first() {
        let records = vec![ImageRecord::new("ref"), ImageRecord::new("tgt")];
        let (stack, vocab) = test_stack(&records, 3, 4, 1);
        let gallery = Gallery::new(vec![(
            "tgt".to_string(),
            {
                let _g = stack.graph().eval_scope();
                stack.encode_target("tgt").unwrap().to_value()
            },
        )])
        .unwrap();
        let query = EvalQuery {
            ref_id: "ref".into(),
            modifier: "add logo".into(),
            target_id: "tgt".into(),
            subset_ids: None,
        };
        let ranking = rank_gallery(&query, &gallery, &stack, &vocab, 8, Pooling::Cls).unwrap();
        assert_eq!(ranking, vec!["tgt".to_string()]);
        assert_eq!(recall_at_k(&[(ranking, "tgt".into())], 1).unwrap(), 1.0);
    }
}
