//! Synthetic corpora for tests, benchmarks, and end-to-end runs: a set
//! -structured corpus, a single-label corpus, and a planted-attribute corpus
//! whose oracle modifiers pin down the correct target within each group.

use rand::Rng;

use crate::data::{ImageRecord, Triplet};
use crate::error::Result;
use crate::mining::mine_set_pairs;
use crate::textgen::oracle_triplets;

/// `n_sets` sets of `set_size` images each, ids `set0000_img0` and so on.
pub fn set_corpus(n_sets: usize, set_size: usize) -> Vec<ImageRecord> {
    let mut out = Vec::with_capacity(n_sets * set_size);
    for s in 0..n_sets {
        for i in 0..set_size {
            let mut r = ImageRecord::new(format!("set{s:04}_img{i}"));
            r.set_id = Some(format!("set{s:04}"));
            out.push(r);
        }
    }
    out
}

/// `n` images that all carry the same single label.
pub fn single_label_corpus(n: usize, label: &str) -> Vec<ImageRecord> {
    (0..n)
        .map(|i| {
            let mut r = ImageRecord::new(format!("img{i:05}"));
            r.labels.insert(label.to_string());
            r
        })
        .collect()
}

/// Planted-attribute corpus: `n_groups` groups of `group_size` images. Every
/// image carries its group label plus one label unique to it, so the oracle
/// modifier between two group members ("keep gG; remove uA; add uB") fully
/// identifies the target.
pub fn planted_corpus(n_groups: usize, group_size: usize) -> Vec<ImageRecord> {
    let mut out = Vec::with_capacity(n_groups * group_size);
    for g in 0..n_groups {
        for i in 0..group_size {
            let idx = g * group_size + i;
            let mut r = ImageRecord::new(format!("img{idx:03}"));
            r.set_id = Some(format!("g{g:02}"));
            r.labels.insert(format!("g{g:02}"));
            r.labels.insert(format!("u{idx:03}"));
            out.push(r);
        }
    }
    out
}

/// All ordered within-group pairs of a planted corpus, each with its oracle
/// modifier and the cached reverse-direction text.
pub fn planted_triplets(corpus: &[ImageRecord]) -> Result<Vec<Triplet>> {
    let pairs: Vec<(String, String)> = mine_set_pairs(corpus)
        .into_iter()
        .map(|p| (p.ref_id, p.target_id))
        .collect();
    let by_id = crate::data::index_corpus(corpus);
    oracle_triplets(&pairs, &by_id, true)
}

/// Split off `n_eval` uniformly sampled triplets for evaluation; both splits
/// keep the original relative order.
pub fn split_holdout(
    triplets: Vec<Triplet>,
    n_eval: usize,
    rng: &mut impl Rng,
) -> (Vec<Triplet>, Vec<Triplet>) {
    assert!(
        n_eval <= triplets.len(),
        "cannot hold out {n_eval} of {} triplets",
        triplets.len()
    );
    let picked = rand::seq::index::sample(rng, triplets.len(), n_eval);
    let mut is_eval = vec![false; triplets.len()];
    for k in picked {
        is_eval[k] = true;
    }
    let mut train = Vec::with_capacity(triplets.len() - n_eval);
    let mut eval = Vec::with_capacity(n_eval);
    for (t, e) in triplets.into_iter().zip(is_eval) {
        if e {
            eval.push(t);
        } else {
            train.push(t);
        }
    }
    (train, eval)
}
