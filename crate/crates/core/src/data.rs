//! Vocabularies, parallel corpora, word-budget batching and toy tasks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::SeqBatch;
use crate::rng::RngKey;

pub const EOS: u32 = 0;
/// Reserved; decoding starts from the choice layer's `initial_output` instead.
pub const BOS: u32 = 1;
pub const UNK: u32 = 2;
pub const PAD: u32 = 3;
pub const RESERVED: usize = 4;
const RESERVED_NAMES: [&str; RESERVED] = ["</s>", "<s>", "<unk>", "<pad>"];

/// Default source-length filter for training data.
pub const DEFAULT_MAX_LEN: usize = 60;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved ids followed by `tokens` in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(RESERVED_NAMES[UNK as usize], |s| s.as_str())
    }

    /// Whitespace tokenization; unknown tokens map to UNK.
    pub fn encode(&self, line: &str) -> Vec<u32> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line; line `k` holds id `k + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens[RESERVED..] {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string))
    }
}

/// Vocabulary over whitespace tokens of `lines`: reserved ids, then tokens by
/// descending frequency with lexicographic ties, cut at `limit` total entries.
pub fn build_vocab<'a, I: IntoIterator<Item = &'a str>>(lines: I, limit: Option<usize>) -> Result<Vocab> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in lines {
        for t in line.split_whitespace() {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut entries: Vec<(&str, usize)> = counts.into_iter().filter(|(t, _)| !RESERVED_NAMES.contains(t)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let keep = limit.map_or(entries.len(), |l| l.saturating_sub(RESERVED).min(entries.len()));
    Vocab::from_tokens(entries.into_iter().take(keep).map(|(t, _)| t.to_string()))
}

pub fn build_vocab_from_files(paths: &[&Path], limit: Option<usize>) -> Result<Vocab> {
    let texts = paths.iter().map(fs::read_to_string).collect::<std::io::Result<Vec<_>>>()?;
    build_vocab(texts.iter().flat_map(|t| t.lines()), limit)
}

/// Aligned (source, target) id sequences, targets without EOS.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Encodes line-aligned texts, dropping pairs with an empty side or a
    /// side longer than `max_len`.
    pub fn from_texts(src: &str, trg: &str, src_vocab: &Vocab, trg_vocab: &Vocab, max_len: Option<usize>) -> Result<Self> {
        let s: Vec<&str> = src.lines().collect();
        let t: Vec<&str> = trg.lines().collect();
        if s.len() != t.len() {
            return Err(Error::Data(format!("source has {} lines, target {}", s.len(), t.len())));
        }
        let limit = max_len.unwrap_or(usize::MAX);
        let pairs = s
            .iter()
            .zip(&t)
            .map(|(a, b)| (src_vocab.encode(a), trg_vocab.encode(b)))
            .filter(|(a, b)| !a.is_empty() && !b.is_empty() && a.len() <= limit && b.len() <= limit)
            .collect();
        Ok(ParallelCorpus { pairs })
    }

    pub fn from_files(src: &Path, trg: &Path, src_vocab: &Vocab, trg_vocab: &Vocab, max_len: Option<usize>) -> Result<Self> {
        Self::from_texts(&fs::read_to_string(src)?, &fs::read_to_string(trg)?, src_vocab, trg_vocab, max_len)
    }

    pub fn sources(&self) -> Vec<Vec<u32>> {
        self.pairs.iter().map(|p| p.0.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<u32>> {
        self.pairs.iter().map(|p| p.1.clone()).collect()
    }

    /// Padded batch of the given pairs, EOS appended to every target.
    pub fn batch(&self, indices: &[usize]) -> Result<SeqBatch> {
        let src: Vec<Vec<u32>> = indices.iter().map(|&i| self.pairs[i].0.clone()).collect();
        let trg: Vec<Vec<u32>> = indices
            .iter()
            .map(|&i| {
                let mut t = self.pairs[i].1.clone();
                t.push(EOS);
                t
            })
            .collect();
        SeqBatch::new(&src, &trg, PAD)
    }
}

/// Corpus indices of one batch and its padded word count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    /// Longest target length times sentence count.
    pub padded_words: usize,
}

/// Word count used for budgeting: target tokens including the appended EOS.
pub fn budget_len(pair: &(Vec<u32>, Vec<u32>)) -> usize {
    pair.1.len() + 1
}

const WINDOW_BATCHES: usize = 100;

/// Shuffles the corpus, sorts windows of about 100 batches by target length
/// and packs sentences greedily while `max_len × count ≤ word_budget`. The
/// batch order is shuffled again at the end.
pub fn batch_by_words(corpus: &ParallelCorpus, word_budget: usize, key: RngKey) -> Result<Vec<BatchPlan>> {
    if let Some(p) = corpus.pairs.iter().find(|p| budget_len(p) > word_budget) {
        return Err(Error::Data(format!(
            "sentence of {} words exceeds the batch budget of {word_budget}",
            budget_len(p)
        )));
    }
    let mut rng = key.rng();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let total: usize = corpus.pairs.iter().map(budget_len).sum();
    let mean = (total as f64 / corpus.len().max(1) as f64).max(1.0);
    let window = ((WINDOW_BATCHES as f64 * word_budget as f64 / mean).ceil() as usize).max(1);
    let mut plans = Vec::new();
    for chunk in order.chunks_mut(window) {
        chunk.sort_by_key(|&i| budget_len(&corpus.pairs[i]));
        let mut cur: Vec<usize> = Vec::new();
        let mut longest = 0;
        for &i in chunk.iter() {
            let l = budget_len(&corpus.pairs[i]);
            let m = longest.max(l);
            if !cur.is_empty() && m * (cur.len() + 1) > word_budget {
                plans.push(BatchPlan { padded_words: longest * cur.len(), indices: std::mem::take(&mut cur) });
                longest = 0;
            }
            longest = longest.max(l);
            cur.push(i);
        }
        if !cur.is_empty() {
            plans.push(BatchPlan { padded_words: longest * cur.len(), indices: cur });
        }
    }
    plans.shuffle(&mut rng);
    Ok(plans)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    Copy,
    Reverse,
    Sort,
}

impl ToyKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "copy" => Some(ToyKind::Copy),
            "reverse" => Some(ToyKind::Reverse),
            "sort" => Some(ToyKind::Sort),
            _ => None,
        }
    }
}

/// Vocabulary of a toy task: reserved ids plus symbols `w0`, `w1`, ...
pub fn toy_vocab(vocab_size: usize) -> Vocab {
    Vocab::from_tokens((0..vocab_size.saturating_sub(RESERVED)).map(|i| format!("w{i}"))).expect("distinct symbols")
}

/// Random sources over ids `4..vocab_size` with lengths in `min_len..=max_len`,
/// targets transformed by `kind`.
pub fn generate_toy_task(
    kind: ToyKind,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    n: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if vocab_size <= RESERVED {
        return Err(Error::Data(format!("toy vocabulary of {vocab_size} leaves no symbols after the reserved ids")));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Data(format!("invalid length range {min_len}..={max_len}")));
    }
    let mut rng = RngKey::new(seed, "toy-task").rng();
    let pairs = (0..n)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let src: Vec<u32> = (0..len).map(|_| rng.gen_range(RESERVED as u32..vocab_size as u32)).collect();
            let mut trg = src.clone();
            match kind {
                ToyKind::Copy => {}
                ToyKind::Reverse => trg.reverse(),
                ToyKind::Sort => trg.sort_unstable(),
            }
            (src, trg)
        })
        .collect();
    Ok(ParallelCorpus { pairs })
}
