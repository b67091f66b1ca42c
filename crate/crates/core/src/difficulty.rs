//! Per-example difficulty scores.
//!
//! The recovery criterion scores an example by the negated sentence BLEU of a
//! trained model's greedy output against the reference, so perfectly recovered
//! pairs sit at -100 and unrecoverable ones at 0. The other criteria (length,
//! word rarity, n-gram LM cross-entropy, embedding norm, loss decline) are
//! provided for comparison.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bleu::sentence_bleu;
use crate::corpus::{source_unigram_freqs, ParallelCorpus, Side};
use crate::error::{Error, Result};
use crate::translate::{translate_ids, Translator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Recovery,
    Length,
    Rarity,
    Lm,
    EmbedNorm,
    LossDecline,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::Recovery,
        Criterion::Length,
        Criterion::Rarity,
        Criterion::Lm,
        Criterion::EmbedNorm,
        Criterion::LossDecline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Recovery => "recovery",
            Criterion::Length => "length",
            Criterion::Rarity => "rarity",
            Criterion::Lm => "lm",
            Criterion::EmbedNorm => "embed-norm",
            Criterion::LossDecline => "loss-decline",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown criterion '{s}'")))
    }
}

/// One score per example, indexed by example id.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyScoreTable {
    pub criterion: Criterion,
    /// Whether `scores` went through [`empirical_cdf`].
    pub cdf: bool,
    pub scores: Vec<f64>,
    /// Pre-CDF values when `cdf` is set.
    pub raw: Option<Vec<f64>>,
}

impl DifficultyScoreTable {
    pub fn new(criterion: Criterion, scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score of example {i} is {}", scores[i])));
        }
        Ok(Self {
            criterion,
            cdf: false,
            scores,
            raw: None,
        })
    }

    /// Replaces the scores by their empirical CDF, keeping the raw values.
    pub fn into_cdf(self) -> Result<Self> {
        if self.cdf {
            return Ok(self);
        }
        let cdf = empirical_cdf(&self.scores)?;
        Ok(Self {
            criterion: self.criterion,
            cdf: true,
            raw: Some(self.scores),
            scores: cdf,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("#criterion={}\tcdf={}\n", self.criterion, self.cdf);
        for (id, s) in self.scores.iter().enumerate() {
            // avoid printing "-0.000000"
            let v = if *s == 0.0 { 0.0 } else { *s };
            out.push_str(&format!("{id}\t{v:.6}\n"));
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty score file".into()))?;
        let fields: Vec<&str> = header
            .strip_prefix('#')
            .ok_or_else(|| err(1, "missing '#criterion=...' header".into()))?
            .split('\t')
            .collect();
        let mut criterion = None;
        let mut cdf = None;
        for f in fields {
            match f.split_once('=') {
                Some(("criterion", v)) => criterion = Some(v.parse::<Criterion>().map_err(|e| err(1, e.to_string()))?),
                Some(("cdf", v)) => {
                    cdf = Some(v.parse::<bool>().map_err(|_| err(1, format!("bad cdf flag '{v}'")))?)
                }
                _ => return Err(err(1, format!("unexpected header field '{f}'"))),
            }
        }
        let (Some(criterion), Some(cdf)) = (criterion, cdf) else {
            return Err(err(1, "header needs criterion and cdf".into()));
        };

        let mut scores = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let (id, score) = line
                .split_once('\t')
                .ok_or_else(|| err(line_no, format!("expected 'id<TAB>score', got '{line}'")))?;
            let id: usize = id.parse().map_err(|_| err(line_no, format!("bad id '{id}'")))?;
            let score: f64 = score.parse().map_err(|_| err(line_no, format!("bad score '{score}'")))?;
            if id != scores.len() {
                return Err(err(line_no, format!("expected id {}, found {id}", scores.len())));
            }
            if !score.is_finite() {
                return Err(err(line_no, format!("non-finite score '{score}'")));
            }
            scores.push(score);
        }
        if scores.is_empty() {
            return Err(err(2, "score file has no rows".into()));
        }
        Ok(Self {
            criterion,
            cdf,
            scores,
            raw: None,
        })
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }
}

/// `d = -BLEU(predictor(x), y)` for every example, in [-100, 0].
pub fn recovery_difficulty<T: Translator + ?Sized>(corpus: &ParallelCorpus, predictor: &T) -> Result<DifficultyScoreTable> {
    let ids = corpus.ids();
    let sources: Vec<&[String]> = corpus.examples().iter().map(|e| &e.src[..]).collect();
    let hyps = translate_ids(predictor, &ids, &sources)?;
    let scores = corpus
        .examples()
        .iter()
        .zip(&hyps)
        .map(|(ex, hyp)| Ok(-sentence_bleu(hyp, &ex.tgt)?.value))
        .collect::<Result<Vec<f64>>>()?;
    DifficultyScoreTable::new(Criterion::Recovery, scores)
}

/// `rank_i / N` where `rank_i` counts the values `<= raw_i`.
pub fn empirical_cdf(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Argument("empirical CDF of an empty table".into()));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("value {i} is {}", raw[i])));
    }
    let n = raw.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && raw[order[end]] == raw[order[start]] {
            end += 1;
        }
        let value = end as f64 / n as f64;
        for &i in &order[start..end] {
            out[i] = value;
        }
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feature {
    SentenceLength,
    WordRarity,
}

/// Source-side handcrafted feature mapped through the empirical CDF.
/// Word rarity is `-sum_i ln freq(w_i)` with corpus-relative frequencies.
pub fn feature_difficulty(corpus: &ParallelCorpus, feature: Feature) -> Result<DifficultyScoreTable> {
    let raw: Vec<f64> = match feature {
        Feature::SentenceLength => corpus.examples().iter().map(|e| e.src.len() as f64).collect(),
        Feature::WordRarity => {
            let freqs = source_unigram_freqs(corpus);
            corpus
                .examples()
                .iter()
                .map(|e| -e.src.iter().map(|w| freqs[w].ln()).sum::<f64>())
                .collect()
        }
    };
    let criterion = match feature {
        Feature::SentenceLength => Criterion::Length,
        Feature::WordRarity => Criterion::Rarity,
    };
    DifficultyScoreTable::new(criterion, raw)?.into_cdf()
}

const LM_UNK: u32 = 0;
const LM_EOS: u32 = 1;
const LM_BOS: u32 = 2;

/// Add-one smoothed n-gram model over the training tokens plus UNK and EOS.
#[derive(Debug, Clone)]
pub struct NgramLM {
    order: usize,
    index: HashMap<String, u32>,
    /// Number of predictable events: training types + UNK + EOS.
    events: usize,
    counts: HashMap<Vec<u32>, HashMap<u32, usize>>,
    totals: HashMap<Vec<u32>, usize>,
}

impl NgramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn event_count(&self) -> usize {
        self.events
    }

    fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(LM_UNK)
    }

    fn context_of(&self, history: &[u32]) -> Vec<u32> {
        let need = self.order - 1;
        let mut ctx = vec![LM_BOS; need.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(need)..]);
        ctx
    }

    fn prob_ids(&self, ctx: &[u32], event: u32) -> f64 {
        let seen = self.counts.get(ctx).and_then(|m| m.get(&event)).copied().unwrap_or(0);
        let total = self.totals.get(ctx).copied().unwrap_or(0);
        (seen + 1) as f64 / (total + self.events) as f64
    }

    /// `P(token | context)`; `None` as the token asks for EOS. Only the last
    /// `order - 1` context tokens are used; shorter contexts are BOS-padded.
    pub fn prob(&self, context: &[String], token: Option<&str>) -> f64 {
        let hist: Vec<u32> = context.iter().map(|t| self.id(t)).collect();
        let ctx = self.context_of(&hist);
        self.prob_ids(&ctx, token.map_or(LM_EOS, |t| self.id(t)))
    }

    /// Probabilities of every word followed by the EOS probability.
    pub fn sentence_probs(&self, sentence: &[String]) -> (Vec<f64>, f64) {
        let ids: Vec<u32> = sentence.iter().map(|t| self.id(t)).collect();
        let words = (0..ids.len())
            .map(|i| self.prob_ids(&self.context_of(&ids[..i]), ids[i]))
            .collect();
        let eos = self.prob_ids(&self.context_of(&ids), LM_EOS);
        (words, eos)
    }

    /// All event ids (for normalization checks): UNK, EOS and each training type.
    pub fn event_tokens(&self) -> Vec<Option<String>> {
        let mut out: Vec<Option<String>> = vec![Some("\u{0}unk".into()), None];
        let mut known: Vec<&String> = self.index.keys().collect();
        known.sort();
        out.extend(known.into_iter().cloned().map(Some));
        out
    }
}

pub fn train_ngram_lm(sentences: &[Vec<String>], order: usize) -> Result<NgramLM> {
    if !(1..=3).contains(&order) {
        return Err(Error::Config(format!("n-gram order {order} outside 1..=3")));
    }
    if sentences.is_empty() {
        return Err(Error::Argument("cannot train a language model on no sentences".into()));
    }
    let mut types: Vec<&String> = sentences.iter().flatten().collect();
    types.sort();
    types.dedup();
    let index: HashMap<String, u32> = types
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32 + 3))
        .collect();
    let mut lm = NgramLM {
        order,
        events: index.len() + 2,
        index,
        counts: HashMap::new(),
        totals: HashMap::new(),
    };
    for s in sentences {
        let ids: Vec<u32> = s.iter().map(|t| lm.id(t)).collect();
        for i in 0..=ids.len() {
            let ctx = lm.context_of(&ids[..i]);
            let event = if i < ids.len() { ids[i] } else { LM_EOS };
            *lm.counts.entry(ctx.clone()).or_default().entry(event).or_default() += 1;
            *lm.totals.entry(ctx).or_default() += 1;
        }
    }
    Ok(lm)
}

/// `-(sum_i ln p_i + ln p_eos) / I` with `I` the number of words.
pub fn sentence_cross_entropy(word_probs: &[f64], eos_prob: f64) -> f64 {
    let log_sum: f64 = word_probs.iter().map(|p| p.ln()).sum::<f64>() + eos_prob.ln();
    -log_sum / word_probs.len().max(1) as f64
}

/// Per-word cross-entropy of each sentence on `side` under `lm`.
pub fn lm_difficulty(corpus: &ParallelCorpus, lm: &NgramLM, side: Side) -> Result<DifficultyScoreTable> {
    let scores = corpus
        .examples()
        .iter()
        .map(|e| {
            let s = match side {
                Side::Target => &e.tgt,
                _ => &e.src,
            };
            let (words, eos) = lm.sentence_probs(s);
            sentence_cross_entropy(&words, eos)
        })
        .collect();
    DifficultyScoreTable::new(Criterion::Lm, scores)
}

/// Token vectors with a fallback vector for unknown tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    unk: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(vectors: HashMap<String, Vec<f64>>, unk: Vec<f64>) -> Result<Self> {
        let dim = unk.len();
        for (tok, v) in vectors.iter() {
            if v.len() != dim {
                return Err(Error::Config(format!(
                    "embedding for '{tok}' has dimension {}, expected {dim}",
                    v.len()
                )));
            }
        }
        if vectors.values().chain([&unk]).flatten().any(|x| !x.is_finite()) {
            return Err(Error::Config("embedding table has non-finite entries".into()));
        }
        Ok(Self { dim, vectors, unk })
    }

    /// Parses `token v1 v2 ...` lines; a token named `<unk>` sets the fallback
    /// (zeros otherwise).
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut unk = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(tok) = parts.next() else { continue };
            let v = parts
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Config(format!("embedding line {}: {e}", i + 1)))?;
            if tok == "<unk>" {
                unk = Some(v);
            } else {
                vectors.insert(tok.to_string(), v);
            }
        }
        let dim = unk
            .as_ref()
            .map(Vec::len)
            .or_else(|| vectors.values().next().map(Vec::len))
            .ok_or_else(|| Error::Config("empty embedding table".into()))?;
        Self::new(vectors, unk.unwrap_or_else(|| vec![0.0; dim]))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, token: &str) -> &[f64] {
        self.vectors.get(token).unwrap_or(&self.unk)
    }
}

/// Raw `sum_i ||w_i||` over source tokens.
pub fn embedding_norm_raw(corpus: &ParallelCorpus, table: &EmbeddingTable) -> Vec<f64> {
    corpus
        .examples()
        .iter()
        .map(|e| {
            e.src
                .iter()
                .map(|t| table.vector(t).iter().map(|x| x * x).sum::<f64>().sqrt())
                .sum()
        })
        .collect()
}

pub fn embedding_norm_difficulty(corpus: &ParallelCorpus, table: &EmbeddingTable) -> Result<DifficultyScoreTable> {
    DifficultyScoreTable::new(Criterion::EmbedNorm, embedding_norm_raw(corpus, table))?.into_cdf()
}

/// Relative change `(cur - prev) / prev` of each example's sequence loss.
pub fn loss_decline_difficulty(
    prev_losses: &BTreeMap<usize, f64>,
    cur_losses: &BTreeMap<usize, f64>,
) -> Result<DifficultyScoreTable> {
    if let Some(id) = cur_losses.keys().find(|id| !prev_losses.contains_key(id)) {
        return Err(Error::Argument(format!("example {id} has no previous loss")));
    }
    let mut scores = Vec::with_capacity(prev_losses.len());
    for (expected, (&id, &prev)) in prev_losses.iter().enumerate() {
        if id != expected {
            return Err(Error::Argument(format!("example {expected} is missing from the loss tables")));
        }
        let cur = *cur_losses
            .get(&id)
            .ok_or_else(|| Error::Argument(format!("example {id} has no current loss")))?;
        if !(prev > 0.0) {
            return Err(Error::Argument(format!("example {id} has non-positive previous loss {prev}")));
        }
        scores.push((cur - prev) / prev);
    }
    DifficultyScoreTable::new(Criterion::LossDecline, scores)
}
