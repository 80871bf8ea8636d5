//! Pair mining: turning a labelled image corpus into ordered candidate
//! (reference, target) pairs by shared set, shared category, or shared label.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageRecord, PairSpec, Source, Triplet};
use crate::error::{Error, Result};

/// Table-style summary of a triplet corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_triplets: usize,
    pub n_unique_images: usize,
    /// Mean modifier length in characters.
    pub avg_length: f64,
    /// Distinct lowercased whitespace-separated words across all modifiers.
    pub n_unique_words: usize,
}

fn ordered_pairs(ids: &[String], origin: Source, out: &mut Vec<PairSpec>) {
    for (i, a) in ids.iter().enumerate() {
        for (j, b) in ids.iter().enumerate() {
            if i != j {
                out.push(PairSpec {
                    ref_id: a.clone(),
                    target_id: b.clone(),
                    origin,
                });
            }
        }
    }
}

/// All ordered pairs of distinct images that share a `set_id`. A set with a
/// single image contributes nothing; images without a set are ignored.
pub fn mine_set_pairs(corpus: &[ImageRecord]) -> Vec<PairSpec> {
    let mut sets: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for r in corpus {
        if let Some(set) = &r.set_id {
            sets.entry(set).or_default().push(r.id.clone());
        }
    }
    let mut out = Vec::new();
    for ids in sets.values() {
        ordered_pairs(ids, Source::Set, &mut out);
    }
    out
}

/// Group images of one category into synthetic sets of `set_size` after a
/// seed-deterministic shuffle (the remainder is dropped), then emit all
/// ordered within-set pairs.
pub fn mine_category_pairs(
    corpus: &[ImageRecord],
    set_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PairSpec>> {
    if set_size < 2 {
        return Err(Error::config(format!(
            "set_size must be at least 2, got {set_size}"
        )));
    }
    let mut cats: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for r in corpus {
        if let Some(cat) = &r.category {
            cats.entry(cat).or_default().push(r.id.clone());
        }
    }
    let mut out = Vec::new();
    for ids in cats.values_mut() {
        ids.shuffle(rng);
        for chunk in ids.chunks_exact(set_size) {
            ordered_pairs(chunk, Source::Category, &mut out);
        }
    }
    Ok(out)
}

/// Per label with `n` members there are `n(n-1)` ordered candidates; emit a
/// uniform sample without replacement of `min(n(n-1), floor(cap_factor * n))`
/// of them, then deduplicate the union across labels.
pub fn mine_label_pairs_capped(
    corpus: &[ImageRecord],
    cap_factor: f64,
    rng: &mut impl Rng,
) -> Result<Vec<PairSpec>> {
    if !(cap_factor > 0.0) {
        return Err(Error::config(format!(
            "cap_factor must be positive, got {cap_factor}"
        )));
    }
    let mut labels: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in corpus {
        for l in &r.labels {
            labels.entry(l).or_default().push(&r.id);
        }
    }
    let mut out = Vec::new();
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    for ids in labels.values() {
        let n = ids.len();
        if n < 2 {
            continue;
        }
        let total = n * (n - 1);
        let cap = (cap_factor * n as f64).floor();
        let take = if cap >= total as f64 { total } else { cap as usize };
        let mut push = |i: usize, j: usize| {
            let pair = (ids[i].to_string(), ids[j].to_string());
            if seen.insert(pair.clone()) {
                out.push(PairSpec {
                    ref_id: pair.0,
                    target_id: pair.1,
                    origin: Source::Label,
                });
            }
        };
        if take == total {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        push(i, j);
                    }
                }
            }
        } else {
            // Sample flat indices over the n(n-1) candidates; each index maps
            // to an (i, j) pair with the diagonal skipped.
            for k in rand::seq::index::sample(rng, total, take) {
                let i = k / (n - 1);
                let r = k % (n - 1);
                let j = if r >= i { r + 1 } else { r };
                push(i, j);
            }
        }
    }
    Ok(out)
}

/// Table-style stats over a triplet list; an empty list yields all zeros.
pub fn corpus_stats(triplets: &[Triplet]) -> CorpusStats {
    let mut images = BTreeSet::new();
    let mut words = BTreeSet::new();
    let mut chars = 0usize;
    for t in triplets {
        images.insert(t.ref_id.as_str());
        images.insert(t.target_id.as_str());
        chars += t.modifier.chars().count();
        for w in t.modifier.to_lowercase().split_whitespace() {
            words.insert(w.to_string());
        }
    }
    CorpusStats {
        n_triplets: triplets.len(),
        n_unique_images: images.len(),
        avg_length: if triplets.is_empty() {
            0.0
        } else {
            chars as f64 / triplets.len() as f64
        },
        n_unique_words: words.len(),
    }
}
