//! Parallel corpora: loading, tokenization, vocabularies, token-budget
//! batching and synthetic cipher tasks with known difficulty.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One aligned sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl Example {
    /// Source plus target token count, the unit of the batching budget.
    pub fn token_len(&self) -> usize {
        self.src.len() + self.tgt.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub src_label: String,
    pub tgt_label: String,
    /// File paths or a description of the generator that produced the corpus.
    pub origin: String,
    /// Ground-truth corruption flags, indexed by example id. Only synthetic
    /// noisy corpora carry them.
    pub corrupted: Option<Vec<bool>>,
}

/// An immutable list of examples with dense ids `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    examples: Vec<Example>,
    meta: CorpusMeta,
}

impl ParallelCorpus {
    pub fn new(examples: Vec<Example>, meta: CorpusMeta) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Argument("a corpus needs at least one example".into()));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.id != i {
                return Err(Error::Argument(format!(
                    "example ids must be dense 0..N-1, found id {} at position {i}",
                    ex.id
                )));
            }
            if ex.src.is_empty() || ex.tgt.is_empty() {
                return Err(Error::Argument(format!("example {i} has an empty side")));
            }
        }
        if let Some(flags) = &meta.corrupted {
            if flags.len() != examples.len() {
                return Err(Error::Argument(format!(
                    "{} corruption flags for {} examples",
                    flags.len(),
                    examples.len()
                )));
            }
        }
        Ok(Self { examples, meta })
    }

    /// Builds a corpus from raw pairs, assigning ids in order.
    pub fn from_pairs<I>(pairs: I, meta: CorpusMeta) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<String>, Vec<String>)>,
    {
        let examples = pairs
            .into_iter()
            .enumerate()
            .map(|(id, (src, tgt))| Example { id, src, tgt })
            .collect();
        Self::new(examples, meta)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn get(&self, id: usize) -> Option<&Example> {
        self.examples.get(id)
    }

    pub fn meta(&self) -> &CorpusMeta {
        &self.meta
    }

    pub fn ids(&self) -> Vec<usize> {
        (0..self.examples.len()).collect()
    }

    pub fn is_corrupted(&self, id: usize) -> Option<bool> {
        self.meta.corrupted.as_ref().map(|f| f[id])
    }

    /// Holds out `round(N * fraction)` examples (at least one when
    /// `fraction > 0` and N > 1) as a dev set. Both halves are re-indexed.
    pub fn split_dev(&self, fraction: f64, seed: u64) -> Result<(ParallelCorpus, ParallelCorpus)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("dev fraction {fraction} outside [0, 1)")));
        }
        let n = self.len();
        let mut n_dev = (n as f64 * fraction).round() as usize;
        if fraction > 0.0 && n > 1 {
            n_dev = n_dev.max(1);
        }
        if n_dev == 0 || n_dev >= n {
            return Err(Error::Config(format!(
                "dev fraction {fraction} leaves no usable split of {n} examples"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = self.ids();
        order.shuffle(&mut rng);
        let mut dev_ids: Vec<usize> = order[..n_dev].to_vec();
        let mut train_ids: Vec<usize> = order[n_dev..].to_vec();
        dev_ids.sort_unstable();
        train_ids.sort_unstable();
        Ok((self.subset(&train_ids, "train")?, self.subset(&dev_ids, "dev")?))
    }

    fn subset(&self, ids: &[usize], part: &str) -> Result<ParallelCorpus> {
        let examples = ids
            .iter()
            .enumerate()
            .map(|(new_id, &old)| Example {
                id: new_id,
                ..self.examples[old].clone()
            })
            .collect();
        let corrupted = self
            .meta
            .corrupted
            .as_ref()
            .map(|flags| ids.iter().map(|&i| flags[i]).collect());
        let meta = CorpusMeta {
            origin: format!("{} [{part}]", self.meta.origin),
            corrupted,
            ..self.meta.clone()
        };
        ParallelCorpus::new(examples, meta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizeMode {
    #[default]
    Whitespace,
    Character,
}

pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
        TokenizeMode::Character => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

/// Reads two aligned files, one sentence per line. Pairs where either side
/// tokenizes to nothing are skipped.
pub fn load_parallel(src_path: &Path, tgt_path: &Path, mode: TokenizeMode) -> Result<ParallelCorpus> {
    let src_text = fs::read_to_string(src_path).map_err(|e| Error::io(src_path, e))?;
    let tgt_text = fs::read_to_string(tgt_path).map_err(|e| Error::io(tgt_path, e))?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Alignment {
            src_lines: src_lines.len(),
            tgt_lines: tgt_lines.len(),
        });
    }

    let mut skipped = 0usize;
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (s, t) in src_lines.iter().zip(&tgt_lines) {
        let src = tokenize(s, mode);
        let tgt = tokenize(t, mode);
        if src.is_empty() || tgt.is_empty() {
            skipped += 1;
            continue;
        }
        pairs.push((src, tgt));
    }
    if skipped > 0 {
        log::info!("skipped {skipped} blank line pairs while loading {}", src_path.display());
    }
    let meta = CorpusMeta {
        src_label: label_for(src_path),
        tgt_label: label_for(tgt_path),
        origin: format!("{} | {}", src_path.display(), tgt_path.display()),
        corrupted: None,
    };
    ParallelCorpus::from_pairs(pairs, meta)
}

fn label_for(path: &Path) -> String {
    path.extension()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Source,
    Target,
    Joint,
}

/// Token/id bijection. Ids `0..4` are PAD, BOS, EOS and UNK; corpus tokens
/// start at 4 even if their spelling matches a reserved display name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for tok in tokens {
            if index.contains_key(&tok) {
                continue;
            }
            index.insert(tok.clone(), all.len() as u32);
            all.push(tok);
        }
        Self { tokens: all, index }
    }

    /// Total size including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

/// Tokens seen at least `min_freq` times, ordered by descending frequency and
/// then lexicographically.
pub fn build_vocab(corpus: &ParallelCorpus, side: Side, min_freq: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in corpus.examples() {
        let sides: &[&Vec<String>] = match side {
            Side::Source => &[&ex.src],
            Side::Target => &[&ex.tgt],
            Side::Joint => &[&ex.src, &ex.tgt],
        };
        for toks in sides {
            for t in toks.iter() {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_freq.max(1))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(entries.into_iter().map(|(t, _)| t.to_owned()))
}

pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Vec<u32> {
    tokens
        .iter()
        .map(|t| vocab.id(t.as_ref()).unwrap_or(UNK))
        .collect()
}

pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .map(|&i| vocab.token(i).unwrap_or(RESERVED_NAMES[UNK as usize]).to_owned())
        .collect()
}

/// Shuffles `ids` with `seed` and packs them greedily into batches whose
/// summed source+target length stays within `max_tokens`. An example longer
/// than the budget gets a batch of its own.
pub fn make_batches(
    ids: &[usize],
    corpus: &ParallelCorpus,
    max_tokens: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if max_tokens == 0 {
        return Err(Error::Argument("max_tokens must be positive".into()));
    }
    let mut order: Vec<usize> = ids.to_vec();
    order.sort_unstable();
    order.dedup();
    if let Some(&bad) = order.iter().find(|&&id| id >= corpus.len()) {
        return Err(Error::Argument(format!("id {bad} not in corpus of {}", corpus.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0usize;
    for id in order {
        let len = corpus.examples[id].token_len();
        if !current.is_empty() && used + len > max_tokens {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(id);
        used += len;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTask {
    /// Target equals source token for token.
    Copy,
    SubstitutionCipher,
    ReversalCipher,
    NoisyCipher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task: SyntheticTask,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Share of examples selected for corruption (noisy-cipher only).
    #[serde(default)]
    pub corrupt_fraction: f64,
    /// Per-token corruption probability inside a selected example.
    #[serde(default)]
    pub rho: f64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("synthetic vocab_size must be at least 2".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "empty length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return Err(Error::Config(format!(
                "corrupt_fraction {} outside [0, 1]",
                self.corrupt_fraction
            )));
        }
        Ok(())
    }

    pub fn source_token(i: usize) -> String {
        format!("s{i}")
    }

    pub fn target_token(&self, i: usize) -> String {
        match self.task {
            SyntheticTask::Copy => Self::source_token(i),
            _ => format!("t{i}"),
        }
    }
}

/// Generates `n` pairs. The cipher permutation and source sentences come from
/// one stream and the corruption from another, so `rho = 0` reproduces the
/// plain substitution cipher exactly.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, n: usize, seed: u64) -> Result<ParallelCorpus> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("synthetic corpus size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);

    let mut mapping: Vec<usize> = (0..spec.vocab_size).collect();
    if spec.task != SyntheticTask::Copy {
        mapping.shuffle(&mut rng);
    }

    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src_ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
        let mut tgt_ids: Vec<usize> = src_ids.iter().map(|&s| mapping[s]).collect();
        if spec.task == SyntheticTask::ReversalCipher {
            tgt_ids.reverse();
        }
        pairs.push((src_ids, tgt_ids));
    }

    let corrupted = if spec.task == SyntheticTask::NoisyCipher {
        let n_bad = (n as f64 * spec.corrupt_fraction).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut noise_rng);
        let mut flags = vec![false; n];
        for &i in &order[..n_bad] {
            flags[i] = true;
        }
        for (i, (_, tgt)) in pairs.iter_mut().enumerate() {
            if !flags[i] {
                continue;
            }
            for t in tgt.iter_mut() {
                if spec.rho > 0.0 && noise_rng.gen_bool(spec.rho) {
                    // uniform over the other target symbols
                    let r = noise_rng.gen_range(0..spec.vocab_size - 1);
                    *t = if r >= *t { r + 1 } else { r };
                }
            }
        }
        Some(flags)
    } else {
        None
    };

    let meta = CorpusMeta {
        src_label: "src".into(),
        tgt_label: "tgt".into(),
        origin: format!(
            "synthetic {:?} n={n} seed={seed} vocab={} len={}..={} fraction={} rho={}",
            spec.task, spec.vocab_size, spec.min_len, spec.max_len, spec.corrupt_fraction, spec.rho
        ),
        corrupted,
    };
    ParallelCorpus::from_pairs(
        pairs.into_iter().map(|(s, t)| {
            (
                s.into_iter().map(SyntheticTaskSpec::source_token).collect(),
                t.into_iter().map(|i| spec.target_token(i)).collect(),
            )
        }),
        meta,
    )
}

/// Relative unigram frequencies of the source side.
pub fn source_unigram_freqs(corpus: &ParallelCorpus) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for ex in corpus.examples() {
        for t in &ex.src {
            *counts.entry(t.clone()).or_default() += 1;
            total += 1;
        }
    }
    counts
        .into_iter()
        .map(|(t, c)| (t, c as f64 / total as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s, TokenizeMode::Whitespace)
    }

    fn corpus_of(pairs: &[(&str, &str)]) -> ParallelCorpus {
        ParallelCorpus::from_pairs(
            pairs.iter().map(|(s, t)| (toks(s), toks(t))),
            CorpusMeta::default(),
        )
        .unwrap()
    }

    #[test]
    fn tokenize_modes() {
        assert_eq!(toks("a  b c"), vec!["a", "b", "c"]);
        assert_eq!(tokenize("ab", TokenizeMode::Character), vec!["a", "b"]);
        assert!(toks("").is_empty());
        assert!(toks(" \t ").is_empty());
        assert_eq!(tokenize("a b\u{3000}c", TokenizeMode::Character), vec!["a", "b", "c"]);
    }

    #[test]
    fn load_single_pair() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
        fs::write(&s, "a b\n").unwrap();
        fs::write(&t, "c d\n").unwrap();
        let c = load_parallel(&s, &t, TokenizeMode::Whitespace).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.examples()[0].src, vec!["a", "b"]);
        assert_eq!(c.examples()[0].tgt, vec!["c", "d"]);
    }

    #[test]
    fn load_mismatch_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
        fs::write(&s, "a\nb\nc\n").unwrap();
        fs::write(&t, "x\ny\n").unwrap();
        match load_parallel(&s, &t, TokenizeMode::Whitespace) {
            Err(Error::Alignment { src_lines: 3, tgt_lines: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.src");
        let err = load_parallel(&missing, &missing, TokenizeMode::Whitespace).unwrap_err();
        assert!(err.to_string().contains("nope.src"));
    }

    #[test]
    fn load_skips_blank_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
        fs::write(&s, "a\n\nb\nc\n").unwrap();
        fs::write(&t, "x\ny\n \nz\n").unwrap();
        let c = load_parallel(&s, &t, TokenizeMode::Whitespace).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.examples()[1].src, vec!["c"]);
        assert_eq!(c.examples()[1].id, 1);
    }

    #[test]
    fn load_generated_2000_lines() {
        let spec = SyntheticTaskSpec {
            task: SyntheticTask::SubstitutionCipher,
            vocab_size: 20,
            min_len: 1,
            max_len: 6,
            corrupt_fraction: 0.0,
            rho: 0.0,
        };
        let gen = generate_synthetic(&spec, 2000, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("x.src"), dir.path().join("x.tgt"));
        let join = |f: fn(&Example) -> &Vec<String>| {
            gen.examples()
                .iter()
                .map(|e| f(e).join(" ") + "\n")
                .collect::<String>()
        };
        fs::write(&s, join(|e| &e.src)).unwrap();
        fs::write(&t, join(|e| &e.tgt)).unwrap();
        let c = load_parallel(&s, &t, TokenizeMode::Whitespace).unwrap();
        assert_eq!(c.len(), 2000);
        assert!(c.examples().iter().enumerate().all(|(i, e)| e.id == i));
        assert_eq!(c.examples(), gen.examples());
    }

    #[test]
    fn vocab_min_freq_and_order() {
        let c = corpus_of(&[("a a b", "x")]);
        let v = build_vocab(&c, Side::Source, 2);
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        let all = build_vocab(&c, Side::Source, 1);
        assert_eq!(all.tokens(), &["a".to_string(), "b".to_string()]);
        assert_eq!(all.id("a"), Some(4));
        assert_eq!(build_vocab(&c, Side::Source, 1), all);

        let c = corpus_of(&[("c b a", "x"), ("b c", "y")]);
        let v = build_vocab(&c, Side::Joint, 1);
        assert_eq!(v.tokens(), &["b", "c", "a", "x", "y"]);
    }

    #[test]
    fn reserved_spelling_does_not_collide() {
        let c = corpus_of(&[("<pad> a", "x")]);
        let v = build_vocab(&c, Side::Source, 1);
        let id = v.id("<pad>").unwrap();
        assert!(id as usize >= NUM_RESERVED);
        assert_eq!(encode(&["<pad>"], &v), vec![id]);
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::from_tokens(["a".to_string()]);
        assert_eq!(encode(&["a"], &v), vec![4]);
        assert_eq!(encode(&["zzz"], &v), vec![UNK]);
        let c = corpus_of(&[("p q r p", "x")]);
        let v = build_vocab(&c, Side::Source, 1);
        let s = toks("r p q");
        assert_eq!(decode(&encode(&s, &v), &v), s);
    }

    #[test]
    fn batches_by_budget() {
        let c = corpus_of(&[
            ("a b c d e", "a b c d e"),
            ("a b c d e", "a b c d e"),
            ("a b c d e", "a b c d e"),
            ("a b c d e", "a b c d e"),
        ]);
        let b = make_batches(&c.ids(), &c, 20, 7).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 2));
        assert_eq!(b, make_batches(&c.ids(), &c, 20, 7).unwrap());
        assert!(make_batches(&[], &c, 20, 7).unwrap().is_empty());
        assert!(make_batches(&[9], &c, 20, 7).is_err());
    }

    #[test]
    fn oversize_example_is_singleton() {
        let long = vec!["w"; 25].join(" ");
        let c = corpus_of(&[(long.as_str(), long.as_str())]);
        assert_eq!(make_batches(&[0], &c, 20, 1).unwrap(), vec![vec![0]]);
    }

    #[test]
    fn cipher_defining_property() {
        let spec = SyntheticTaskSpec {
            task: SyntheticTask::SubstitutionCipher,
            vocab_size: 8,
            min_len: 2,
            max_len: 6,
            corrupt_fraction: 0.0,
            rho: 0.0,
        };
        let c = generate_synthetic(&spec, 300, 11).unwrap();
        // a source symbol always maps to the same target symbol
        let mut map = HashMap::new();
        for ex in c.examples() {
            assert_eq!(ex.src.len(), ex.tgt.len());
            for (s, t) in ex.src.iter().zip(&ex.tgt) {
                assert_eq!(map.entry(s.clone()).or_insert_with(|| t.clone()), t);
            }
        }
        let images: std::collections::HashSet<_> = map.values().collect();
        assert_eq!(images.len(), map.len());

        let rev = SyntheticTaskSpec { task: SyntheticTask::ReversalCipher, ..spec.clone() };
        let r = generate_synthetic(&rev, 300, 11).unwrap();
        for (a, b) in c.examples().iter().zip(r.examples()) {
            let mut t = a.tgt.clone();
            t.reverse();
            assert_eq!(t, b.tgt);
        }
    }

    #[test]
    fn noisy_with_zero_rho_matches_cipher() {
        let base = SyntheticTaskSpec {
            task: SyntheticTask::SubstitutionCipher,
            vocab_size: 30,
            min_len: 3,
            max_len: 9,
            corrupt_fraction: 0.0,
            rho: 0.0,
        };
        let noisy = SyntheticTaskSpec {
            task: SyntheticTask::NoisyCipher,
            corrupt_fraction: 0.2,
            ..base.clone()
        };
        let a = generate_synthetic(&base, 500, 5).unwrap();
        let b = generate_synthetic(&noisy, 500, 5).unwrap();
        assert_eq!(a.examples(), b.examples());
    }

    #[test]
    fn noisy_marks_fraction() {
        let spec = SyntheticTaskSpec {
            task: SyntheticTask::NoisyCipher,
            vocab_size: 50,
            min_len: 3,
            max_len: 12,
            corrupt_fraction: 0.2,
            rho: 0.5,
        };
        let c = generate_synthetic(&spec, 1000, 9).unwrap();
        let flags = c.meta().corrupted.as_ref().unwrap();
        assert_eq!(flags.iter().filter(|&&f| f).count(), 200);

        let clean = generate_synthetic(&SyntheticTaskSpec { rho: 0.0, ..spec.clone() }, 1000, 9).unwrap();
        for (i, (a, b)) in c.examples().iter().zip(clean.examples()).enumerate() {
            if !flags[i] {
                assert_eq!(a, b);
            }
        }
        let changed = (0..1000).filter(|&i| c.examples()[i] != clean.examples()[i]).count();
        assert!(changed > 150, "only {changed} corrupted examples differ");
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SyntheticTaskSpec {
            task: SyntheticTask::NoisyCipher,
            vocab_size: 10,
            min_len: 3,
            max_len: 2,
            corrupt_fraction: 0.2,
            rho: 0.5,
        };
        assert!(matches!(generate_synthetic(&spec, 10, 0), Err(Error::Config(_))));
        spec.max_len = 5;
        spec.rho = 1.5;
        assert!(matches!(generate_synthetic(&spec, 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn dev_split_reindexes() {
        let spec = SyntheticTaskSpec {
            task: SyntheticTask::NoisyCipher,
            vocab_size: 10,
            min_len: 1,
            max_len: 4,
            corrupt_fraction: 0.5,
            rho: 1.0,
        };
        let c = generate_synthetic(&spec, 200, 2).unwrap();
        let (train, dev) = c.split_dev(0.05, 4).unwrap();
        assert_eq!(dev.len(), 10);
        assert_eq!(train.len(), 190);
        assert_eq!(train.meta().corrupted.as_ref().unwrap().len(), 190);
        assert_eq!(c.split_dev(0.05, 4).unwrap(), (train, dev));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn batches_partition_ids(
            lens in proptest::collection::vec(1usize..15, 1..40),
            pick in proptest::collection::vec(any::<bool>(), 40),
            max_tokens in 1usize..60,
            seed in any::<u64>(),
        ) {
            let pairs: Vec<_> = lens
                .iter()
                .map(|&l| (vec!["a".to_string(); l], vec!["b".to_string(); l]))
                .collect();
            let c = ParallelCorpus::from_pairs(pairs, CorpusMeta::default()).unwrap();
            let ids: Vec<usize> = (0..lens.len()).filter(|&i| pick[i]).collect();
            let batches = make_batches(&ids, &c, max_tokens, seed).unwrap();
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(&seen, &ids);
            for b in &batches {
                let total: usize = b.iter().map(|&i| c.examples()[i].token_len()).sum();
                prop_assert!(total <= max_tokens || b.len() == 1);
            }
            prop_assert_eq!(batches, make_batches(&ids, &c, max_tokens, seed).unwrap());
        }
    }
}
