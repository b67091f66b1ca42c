//! BLEU on token sequences, scaled 0 to 100.
//!
//! Sentence BLEU uses add-one smoothing on the 2..4-gram precisions only, so
//! a perfect match still scores exactly 100 while short or poor hypotheses
//! keep a nonzero, rankable score. Corpus BLEU aggregates counts and is not
//! smoothed.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Clipped n-gram matches and candidate counts for n = 1..=4.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramStats {
    pub matches: [usize; MAX_ORDER],
    pub candidates: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl NgramStats {
    fn add(&mut self, other: &NgramStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.candidates[n] += other.candidates[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Plain BLEU from these counts: unsmoothed precisions, zero whenever an
    /// order has no match.
    pub fn unsmoothed(&self) -> BleuScore {
        let mut precisions = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if self.candidates[n] > 0 {
                precisions[n] = self.matches[n] as f64 / self.candidates[n] as f64;
            }
        }
        BleuScore::from_parts(self.brevity_penalty(), precisions)
    }

    /// Sentence-level smoothing: p1 = m1/c1, pn = (mn+1)/(cn+1) for n >= 2.
    pub fn smoothed(&self) -> BleuScore {
        let mut precisions = [0.0; MAX_ORDER];
        if self.candidates[0] > 0 {
            precisions[0] = self.matches[0] as f64 / self.candidates[0] as f64;
        }
        for n in 1..MAX_ORDER {
            precisions[n] = (self.matches[n] + 1) as f64 / (self.candidates[n] + 1) as f64;
        }
        BleuScore::from_parts(self.brevity_penalty(), precisions)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub value: f64,
    pub brevity_penalty: f64,
    pub precisions: [f64; MAX_ORDER],
}

impl BleuScore {
    fn from_parts(brevity_penalty: f64, precisions: [f64; MAX_ORDER]) -> Self {
        let value = if brevity_penalty == 0.0 || precisions.contains(&0.0) {
            0.0
        } else {
            let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            100.0 * brevity_penalty * log_mean.exp()
        };
        BleuScore {
            value: value.min(100.0),
            brevity_penalty,
            precisions,
        }
    }
}

fn count_ngrams<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

pub fn ngram_stats<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> NgramStats {
    let mut stats = NgramStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let hyp_counts = count_ngrams(hyp, n);
        let ref_counts = count_ngrams(reference, n);
        stats.matches[n - 1] = hyp_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        stats.candidates[n - 1] = (hyp.len() + 1).saturating_sub(n);
    }
    stats
}

pub fn sentence_bleu<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Result<BleuScore> {
    if reference.is_empty() {
        return Err(Error::Argument("sentence BLEU needs a non-empty reference".into()));
    }
    Ok(ngram_stats(hyp, reference).smoothed())
}

/// Corpus BLEU over `(hypothesis, reference)` pairs.
pub fn corpus_bleu<T, H, R>(pairs: &[(H, R)]) -> Result<BleuScore>
where
    T: Eq + Hash,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if pairs.is_empty() {
        return Err(Error::Argument("corpus BLEU needs at least one pair".into()));
    }
    let mut total = NgramStats::default();
    for (i, (hyp, reference)) in pairs.iter().enumerate() {
        if reference.as_ref().is_empty() {
            return Err(Error::Argument(format!("reference {i} is empty")));
        }
        total.add(&ngram_stats(hyp.as_ref(), reference.as_ref()));
    }
    Ok(total.unsmoothed())
}
