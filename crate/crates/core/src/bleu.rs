//! BLEU and the expected-BLEU risk objective.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Clipped n-gram matches and candidate n-gram counts for orders 1..=4.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NGramStats {
    pub matched: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl NGramStats {
    pub fn new<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Self {
        let mut s = NGramStats { cand_len: candidate.len(), ref_len: reference.len(), ..Default::default() };
        for n in 1..=MAX_ORDER {
            let refs = ngram_counts(reference, n);
            let mut cands = ngram_counts(candidate, n);
            s.total[n - 1] = candidate.len().saturating_sub(n - 1);
            s.matched[n - 1] = cands.drain().map(|(g, c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn add(&mut self, o: &NGramStats) {
        for n in 0..MAX_ORDER {
            self.matched[n] += o.matched[n];
            self.total[n] += o.total[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        (1.0 - self.ref_len as f64 / self.cand_len as f64).exp().min(1.0)
    }

    /// BLEU in percent. Orders from `smooth_from` upward use add-one smoothing.
    fn score(&self, smooth_from: usize) -> f64 {
        let bp = self.brevity_penalty();
        if bp == 0.0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            let (m, c) = if n + 1 >= smooth_from { (self.matched[n] + 1, self.total[n] + 1) } else { (self.matched[n], self.total[n]) };
            if m == 0 || c == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / c as f64).ln();
        }
        100.0 * bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU in percent: n-gram counts and lengths are summed over all
/// pairs before forming precisions and the brevity penalty.
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Data("BLEU of an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Data(format!("{} candidates for {} references", candidates.len(), references.len())));
    }
    let mut total = NGramStats::default();
    for (c, r) in candidates.iter().zip(references) {
        total.add(&NGramStats::new(c, r));
    }
    Ok(total.score(MAX_ORDER + 1))
}

/// Sentence BLEU in percent with add-one smoothing on orders 2..=4.
pub fn sentence_bleu_smoothed<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    NGramStats::new(candidate, reference).score(2)
}

/// N-best list of one sentence for risk training.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskSentence {
    pub hyps: Vec<Vec<u32>>,
    /// Sum of token log-probabilities of each hypothesis.
    pub scores: Vec<f64>,
    pub reference: Vec<u32>,
}

/// Expected negative sentence BLEU under the model distribution
/// renormalized over each n-best list, averaged over sentences. Returns the
/// loss and its gradient with respect to every hypothesis score.
pub fn expected_risk_loss(batch: &[RiskSentence]) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Data("risk loss over no sentences".into()));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for s in batch {
        if s.hyps.is_empty() || s.hyps.len() != s.scores.len() {
            return Err(Error::Data(format!("{} hypotheses with {} scores", s.hyps.len(), s.scores.len())));
        }
        if s.scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite hypothesis score".into()));
        }
        let mx = s.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = s.scores.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / z).collect();
        let bleu: Vec<f64> = s.hyps.iter().map(|h| sentence_bleu_smoothed(h, &s.reference)).collect();
        let expected: f64 = p.iter().zip(&bleu).map(|(p, b)| p * b).sum();
        loss -= expected / n;
        grads.push(p.iter().zip(&bleu).map(|(p, b)| -p * (b - expected) / n).collect());
    }
    Ok((loss, grads))
}
