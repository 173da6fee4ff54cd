//! Corpus BLEU and the experiment harnesses.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod harness;
pub use harness::*;

/// Corpus-level BLEU with clipped n-gram counts and a brevity penalty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    /// Modified precision per order; `None` for orders with no candidate
    /// n-grams anywhere in the corpus (skipped in the geometric mean).
    pub precisions: Vec<Option<f64>>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu<T: AsRef<str>>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::invalid("BLEU of an empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::invalid("max_n must be at least 1"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matches[n - 1] += k.min(rc.get(&g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    let precisions: Vec<Option<f64>> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (t > 0).then(|| m as f64 / t as f64))
        .collect();
    let brevity_penalty = if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let used: Vec<f64> = precisions.iter().flatten().copied().collect();
    let score = if used.is_empty() || used.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        brevity_penalty * (used.iter().map(|p| p.ln()).sum::<f64>() / used.len() as f64).exp()
    };
    Ok(BleuReport {
        score,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_length: cand_len,
        reference_length: ref_len,
    })
}

#[cfg(test)]
mod tests;
