//! Heuristic teachers for the warm start.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envsynth::EvidenceItem;
use crate::numerics::cosine;
use crate::retrieval::{EvidenceIndex, RetrievalResult};

/// Supportive query = the input text, confusing query = centroid of the
/// label most text-similar to the input's nearest label, countering query
/// = centroid of a random label that is neither.
pub fn planner_teacher<R: Rng>(x_t: &[f64], index: &EvidenceIndex, rng: &mut R) -> Vec<f64> {
    let c = index.num_labels();
    let by_input: Vec<f64> = (0..c)
        .map(|l| cosine(x_t, index.label_text_centroid(l)))
        .collect();
    let nearest = crate::agents::argmax(&by_input);
    let anchor = index.label_text_centroid(nearest);
    let confusable = (0..c)
        .filter(|&l| l != nearest)
        .max_by(|&a, &b| {
            let sa = cosine(anchor, index.label_text_centroid(a));
            let sb = cosine(anchor, index.label_text_centroid(b));
            sa.total_cmp(&sb).then(b.cmp(&a))
        })
        .unwrap_or(nearest);
    let others: Vec<usize> = (0..c).filter(|&l| l != nearest && l != confusable).collect();
    let counter = if others.is_empty() {
        confusable
    } else {
        others[rng.random_range(0..others.len())]
    };
    let mut q = x_t.to_vec();
    q.extend_from_slice(index.label_text_centroid(confusable));
    q.extend_from_slice(index.label_text_centroid(counter));
    q
}

/// Label vote counts over every perceptual list.
pub fn perceptual_votes(perc: &RetrievalResult, num_labels: usize) -> Vec<usize> {
    let mut votes = vec![0usize; num_labels];
    for h in perc.perceptual.iter().flatten() {
        votes[h.label] += 1;
    }
    votes
}

/// Labels with the `top` highest vote counts, ties by ascending label.
fn top_voted(votes: &[usize], top: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..votes.len()).filter(|&l| votes[l] > 0).collect();
    order.sort_by(|&a, &b| votes[b].cmp(&votes[a]).then(a.cmp(&b)));
    order.truncate(top);
    order
}

/// Keeps the candidates whose label is among the `top` perceptual votes.
pub fn filter_teacher(
    perc: &RetrievalResult,
    candidates: &[&EvidenceItem],
    num_labels: usize,
    top: usize,
) -> Vec<bool> {
    let keep = top_voted(&perceptual_votes(perc, num_labels), top);
    candidates.iter().map(|it| keep.contains(&it.label)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorTeacher {
    /// The gold label.
    Gold,
    /// Majority label of the kept evidence, falling back to the perceptual
    /// vote when nothing is kept.
    MajorityKept,
}

pub fn generator_teacher(
    kind: GeneratorTeacher,
    gold: usize,
    kept: &[&EvidenceItem],
    perc: &RetrievalResult,
    num_labels: usize,
) -> usize {
    match kind {
        GeneratorTeacher::Gold => gold,
        GeneratorTeacher::MajorityKept => {
            let mut votes = vec![0usize; num_labels];
            for it in kept {
                votes[it.label] += 1;
            }
            if votes.iter().all(|&v| v == 0) {
                votes = perceptual_votes(perc, num_labels);
            }
            top_voted(&votes, 1).first().copied().unwrap_or(0)
        }
    }
}
