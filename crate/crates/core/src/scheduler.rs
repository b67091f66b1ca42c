//! Difficulty-ordered splitting and the phase state machine.
//!
//! A [`CurriculumPartition`] holds K equally sized subsets from easiest to
//! hardest. [`run_schedule`] trains through them in one of three modes:
//!
//! * `fixed`: every phase runs a fixed number of steps.
//! * `dynamic`: after a warm-up, the CL model's corpus BLEU on a sample of the
//!   current subset (`o_c`) is compared against the vanilla model's on the
//!   same sample (`o_v`) every `check_interval` steps; enough consecutive wins
//!   end the phase early, otherwise it ends after `T` steps.
//! * `competence`: the training set at step `t` is every example whose
//!   CDF-normalized difficulty is at most `c(t)`.
//!
//! Every step of the run is recorded in a [`PhaseTrace`].

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bleu::corpus_bleu;
use crate::corpus::ParallelCorpus;
use crate::difficulty::DifficultyScoreTable;
use crate::error::{Error, Result};
use crate::translate::{translate_ids, Translator};

/// K mutually exclusive subsets `D_1..D_K` in ascending difficulty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurriculumPartition {
    criterion: String,
    subsets: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    criterion: String,
    #[serde(rename = "K")]
    k: usize,
    subsets: Vec<Vec<usize>>,
}

impl CurriculumPartition {
    /// Checks that the subsets are non-empty and pairwise disjoint.
    pub fn new(criterion: impl Into<String>, subsets: Vec<Vec<usize>>) -> Result<Self> {
        if subsets.is_empty() {
            return Err(Error::Argument("a partition needs at least one subset".into()));
        }
        let mut seen = HashSet::new();
        let mut dup = Vec::new();
        for (k, s) in subsets.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Argument(format!("subset {} is empty", k + 1)));
            }
            dup.extend(s.iter().copied().filter(|&id| !seen.insert(id)));
        }
        if !dup.is_empty() {
            dup.sort_unstable();
            dup.dedup();
            return Err(Error::IdMismatch(dup));
        }
        Ok(Self {
            criterion: criterion.into(),
            subsets,
        })
    }

    pub fn k(&self) -> usize {
        self.subsets.len()
    }

    pub fn criterion(&self) -> &str {
        &self.criterion
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn len(&self) -> usize {
        self.subsets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids of `D_1 ∪ … ∪ D_k` (`k` is 1-based), sorted.
    pub fn union_through(&self, k: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = self.subsets[..k].iter().flatten().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Errors with the offending ids unless the partition covers exactly `0..n`.
    pub fn check_covers(&self, n: usize) -> Result<()> {
        let mut bad: Vec<usize> = self.subsets.iter().flatten().copied().filter(|&id| id >= n).collect();
        if self.len() - bad.len() != n || !bad.is_empty() {
            let present: HashSet<usize> = self.subsets.iter().flatten().copied().collect();
            bad.extend((0..n).filter(|id| !present.contains(id)));
            bad.sort_unstable();
            return Err(Error::IdMismatch(bad));
        }
        Ok(())
    }

    /// Same partition with ids ascending inside each subset.
    pub fn canonical(&self) -> Self {
        let mut subsets = self.subsets.clone();
        subsets.iter_mut().for_each(|s| s.sort_unstable());
        Self {
            criterion: self.criterion.clone(),
            subsets,
        }
    }

    pub fn to_manifest_json(&self) -> String {
        let c = self.canonical();
        let m = Manifest {
            criterion: c.criterion,
            k: c.subsets.len(),
            subsets: c.subsets,
        };
        serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n"
    }

    pub fn from_manifest_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad manifest: {e}")))?;
        if m.k != m.subsets.len() {
            return Err(Error::Config(format!("manifest K={} but {} subsets", m.k, m.subsets.len())));
        }
        Self::new(m.criterion, m.subsets)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_manifest_json(&text).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Stable sort by `(score, id)` and cut into K contiguous blocks; the first
/// `N mod K` blocks get one extra id.
pub fn split_corpus(scores: &DifficultyScoreTable, k: usize) -> Result<CurriculumPartition> {
    let n = scores.len();
    if k < 1 || k > n {
        return Err(Error::Argument(format!("cannot split {n} examples into {k} subsets")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores.scores[a].total_cmp(&scores.scores[b]).then(a.cmp(&b)));
    let (base, extra) = (n / k, n % k);
    let mut subsets = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        subsets.push(order[start..start + size].to_vec());
        start += size;
    }
    CurriculumPartition::new(scores.criterion.name(), subsets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    #[default]
    Fixed,
    Dynamic,
    Competence,
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleMode::Fixed => "fixed",
            ScheduleMode::Dynamic => "dynamic",
            ScheduleMode::Competence => "competence",
        })
    }
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(ScheduleMode::Fixed),
            "dynamic" => Ok(ScheduleMode::Dynamic),
            "competence" => Ok(ScheduleMode::Competence),
            _ => Err(Error::Argument(format!("unknown schedule mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regimen {
    /// Phase k trains on `D_1 ∪ … ∪ D_k`.
    #[default]
    BabySteps,
    /// Phase k trains on `D_k` alone.
    OnePass,
}

/// How many consecutive winning checks end a dynamic phase. `"never"` in
/// config files disables early advancement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RequiredRepr", into = "RequiredRepr")]
pub enum SuccessesRequired {
    Count(u32),
    Never,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RequiredRepr {
    Count(u32),
    Word(String),
}

impl TryFrom<RequiredRepr> for SuccessesRequired {
    type Error = String;

    fn try_from(r: RequiredRepr) -> std::result::Result<Self, String> {
        match r {
            RequiredRepr::Count(n) => Ok(SuccessesRequired::Count(n)),
            RequiredRepr::Word(w) if w == "never" => Ok(SuccessesRequired::Never),
            RequiredRepr::Word(w) => Err(format!("expected a count or \"never\", got \"{w}\"")),
        }
    }
}

impl From<SuccessesRequired> for RequiredRepr {
    fn from(s: SuccessesRequired) -> Self {
        match s {
            SuccessesRequired::Count(n) => RequiredRepr::Count(n),
            SuccessesRequired::Never => RequiredRepr::Word("never".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    pub k: usize,
    /// `T`: steps per phase (fixed, competence) or the per-phase cap (dynamic).
    pub max_steps_per_phase: u64,
    /// Per-phase step budgets for fixed mode, overriding `T`.
    pub fixed_phase_steps: Option<Vec<u64>>,
    pub regimen: Regimen,
    /// Steps into a phase before the first recovery check. Also the first
    /// point at which a training summary is logged, in every mode.
    pub warmup_steps_before_check: u64,
    pub check_interval: u64,
    pub consecutive_successes_required: SuccessesRequired,
    pub subsample_size: usize,
    pub c0: f64,
    pub p: f64,
    /// Step at which competence reaches 1; defaults to `(K - 1) * T`.
    pub competence_steps: Option<u64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Fixed,
            k: 4,
            max_steps_per_phase: 500,
            fixed_phase_steps: None,
            regimen: Regimen::BabySteps,
            warmup_steps_before_check: 200,
            check_interval: 100,
            consecutive_successes_required: SuccessesRequired::Count(2),
            subsample_size: 500,
            c0: 0.1,
            p: 2.0,
            competence_steps: None,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("K must be positive".into());
        }
        if self.max_steps_per_phase == 0 {
            return bad("max_steps_per_phase must be positive".into());
        }
        if self.check_interval == 0 {
            return bad("check_interval must be positive".into());
        }
        if self.subsample_size == 0 {
            return bad("subsample_size must be positive".into());
        }
        if self.consecutive_successes_required == SuccessesRequired::Count(0) {
            return bad("consecutive_successes_required must be positive or \"never\"".into());
        }
        if let Some(steps) = &self.fixed_phase_steps {
            if steps.len() != self.k {
                return bad(format!("fixed_phase_steps has {} entries for K={}", steps.len(), self.k));
            }
            if steps.contains(&0) {
                return bad("fixed_phase_steps entries must be positive".into());
            }
        }
        if !(0.0..1.0).contains(&self.c0) {
            return bad(format!("c0={} outside [0, 1)", self.c0));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return bad(format!("p={} must be a finite value >= 1", self.p));
        }
        if self.competence_steps == Some(0) {
            return bad("competence_steps must be positive".into());
        }
        Ok(())
    }

    /// Budget of phase `k` (1-based) in fixed mode.
    pub fn fixed_steps(&self, k: usize) -> u64 {
        self.fixed_phase_steps
            .as_ref()
            .map_or(self.max_steps_per_phase, |s| s[k - 1])
    }

    pub fn competence_total(&self) -> u64 {
        self.competence_steps
            .unwrap_or((self.k.max(2) as u64 - 1) * self.max_steps_per_phase)
    }

    /// Phase budgets of 10%, 10%, 10% and 70% of `total` (K=4), the last phase
    /// absorbing rounding.
    pub fn front_loaded_budget(total: u64) -> Vec<u64> {
        let small = total / 10;
        vec![small, small, small, total - 3 * small]
    }
}

/// `c(t) = min(1, (t (1 - c0^p) / T + c0^p)^(1/p))`.
pub fn competence(t: u64, c0: f64, p: f64, total: u64) -> f64 {
    if t >= total {
        return 1.0;
    }
    let c0p = c0.powf(p);
    let inner = t as f64 * (1.0 - c0p) / total as f64 + c0p;
    inner.powf(1.0 / p).min(1.0)
}

/// Ids whose normalized difficulty is at most `c`, never empty.
pub fn competence_training_set(scores: &DifficultyScoreTable, c: f64) -> Result<Vec<usize>> {
    if let Some(i) = scores.scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Argument(format!(
            "competence needs scores in [0, 1], example {i} has {}",
            scores.scores[i]
        )));
    }
    let ids: Vec<usize> = (0..scores.len()).filter(|&i| scores.scores[i] <= c).collect();
    if !ids.is_empty() {
        return Ok(ids);
    }
    let easiest = (0..scores.len())
        .min_by(|&a, &b| scores.scores[a].total_cmp(&scores.scores[b]))
        .ok_or_else(|| Error::Argument("empty score table".into()))?;
    Ok(vec![easiest])
}

/// `min(size, |subset|)` ids drawn without replacement.
pub fn subsample(subset: &[usize], size: usize, seed: u64) -> Result<Vec<usize>> {
    if subset.is_empty() {
        return Err(Error::Argument("cannot subsample an empty subset".into()));
    }
    if size == 0 {
        return Err(Error::Argument("subsample size must be positive".into()));
    }
    let mut ids = subset.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.truncate(size);
    Ok(ids)
}

/// Corpus BLEU of `decoder` on the examples `sample`.
pub fn model_recovery<T: Translator + ?Sized>(decoder: &T, corpus: &ParallelCorpus, sample: &[usize]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::Argument("model recovery needs a non-empty sample".into()));
    }
    let mut sources = Vec::with_capacity(sample.len());
    for &id in sample {
        let ex = corpus
            .get(id)
            .ok_or_else(|| Error::IdMismatch(vec![id]))?;
        sources.push(&ex.src[..]);
    }
    let hyps = translate_ids(decoder, sample, &sources)?;
    let pairs: Vec<(&[String], &[String])> = hyps
        .iter()
        .zip(sample)
        .map(|(h, &id)| (&h[..], &corpus.examples()[id].tgt[..]))
        .collect();
    Ok(corpus_bleu(&pairs)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    /// Learning rate of the last step.
    pub lr: f64,
}

/// What the schedule needs from the model being trained.
pub trait ScheduleTrainer {
    /// Runs `n` optimizer steps on batches drawn from `ids`.
    fn train_steps(&mut self, ids: &[usize], n: u64) -> Result<TrainSummary>;
    /// Restarts the learning-rate warm-up from the current step.
    fn restart_warmup(&mut self);
    /// `o_c`: recovery of the model being trained on `sample`.
    fn cl_recovery(&mut self, sample: &[usize]) -> Result<f64>;
    /// `o_v`: recovery of the vanilla model on `sample`.
    fn vanilla_recovery(&mut self, sample: &[usize]) -> Result<f64>;
    /// Held-out BLEU for the learning curve, if the trainer tracks one.
    fn dev_bleu(&mut self) -> Result<Option<f64>> {
        Ok(None)
    }
    /// Called after phase `k` (1-based) ends.
    fn phase_end(&mut self, _k: usize) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    PhaseStart,
    RecoveryCheck,
    PhaseAdvance,
    TrainStepSummary,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::PhaseStart => "phase-start",
            EventKind::RecoveryCheck => "recovery-check",
            EventKind::PhaseAdvance => "phase-advance",
            EventKind::TrainStepSummary => "train-step-summary",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            EventKind::PhaseStart,
            EventKind::RecoveryCheck,
            EventKind::PhaseAdvance,
            EventKind::TrainStepSummary,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    pub step: u64,
    /// 1-based phase index.
    pub phase: usize,
    pub kind: EventKind,
    pub train_set_size: Option<usize>,
    pub o_c: Option<f64>,
    pub o_v: Option<f64>,
    pub dev_bleu: Option<f64>,
    pub lr: Option<f64>,
}

impl TraceEvent {
    fn new(step: u64, phase: usize, kind: EventKind) -> Self {
        Self {
            step,
            phase,
            kind,
            train_set_size: None,
            o_c: None,
            o_v: None,
            dev_bleu: None,
            lr: None,
        }
    }
}

pub const TRACE_HEADER: &str = "step,phase,event,train_set_size,o_c,o_v,dev_bleu,lr";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseTrace {
    pub events: Vec<TraceEvent>,
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl PhaseTrace {
    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn phase_count(&self) -> usize {
        self.of_kind(EventKind::PhaseStart).count()
    }

    pub fn final_step(&self) -> u64 {
        self.events.last().map_or(0, |e| e.step)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for e in &self.events {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.step,
                e.phase,
                e.kind.name(),
                opt(e.train_set_size),
                opt(e.o_c),
                opt(e.o_v),
                opt(e.dev_bleu),
                opt(e.lr)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_HEADER) {
            return Err(err(1, format!("expected header '{TRACE_HEADER}'")));
        }
        let mut events = Vec::new();
        for (i, line) in lines.enumerate() {
            let no = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(err(no, format!("expected 8 fields, found {}", f.len())));
            }
            fn num<T: std::str::FromStr>(s: &str) -> std::result::Result<Option<T>, String> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| format!("bad number '{s}'"))
                }
            }
            let parse = || -> std::result::Result<TraceEvent, String> {
                Ok(TraceEvent {
                    step: num(f[0])?.ok_or("missing step")?,
                    phase: num(f[1])?.ok_or("missing phase")?,
                    kind: EventKind::parse(f[2]).ok_or_else(|| format!("unknown event '{}'", f[2]))?,
                    train_set_size: num(f[3])?,
                    o_c: num(f[4])?,
                    o_v: num(f[5])?,
                    dev_bleu: num(f[6])?,
                    lr: num(f[7])?,
                })
            };
            events.push(parse().map_err(|m| err(no, m))?);
        }
        Ok(Self { events })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }
}

/// Step offsets within a phase of length `len` at which training pauses to
/// log, and in dynamic mode to check: `warmup, warmup + interval, …` and `len`.
fn phase_boundaries(len: u64, warmup: u64, interval: u64) -> Vec<u64> {
    let mut points = Vec::new();
    let mut b = warmup;
    while b < len {
        if b > 0 {
            points.push(b);
        }
        b += interval;
    }
    points.push(len);
    points
}

/// Drives `trainer` through the curriculum, appending events to `trace`.
///
/// `scores` is required in competence mode only, where it is CDF-normalized
/// first if needed. On error the events recorded so far stay in `trace`.
pub fn run_schedule<T: ScheduleTrainer + ?Sized>(
    partition: &CurriculumPartition,
    scores: Option<&DifficultyScoreTable>,
    cfg: &ScheduleConfig,
    seed: u64,
    trainer: &mut T,
    trace: &mut PhaseTrace,
) -> Result<()> {
    cfg.validate()?;
    if partition.k() != cfg.k {
        return Err(Error::Config(format!(
            "partition has {} subsets but the schedule expects K={}",
            partition.k(),
            cfg.k
        )));
    }
    let normalized;
    let competence_scores = if cfg.mode == ScheduleMode::Competence {
        let scores = scores.ok_or_else(|| Error::Argument("competence mode needs a score table".into()))?;
        normalized = if scores.cdf { scores.clone() } else { scores.clone().into_cdf()? };
        if normalized.len() != partition.len() {
            return Err(Error::Argument(format!(
                "{} scores for a partition of {} examples",
                normalized.len(),
                partition.len()
            )));
        }
        Some(&normalized)
    } else {
        None
    };

    let mut step = 0u64;
    for k in 1..=cfg.k {
        let base_set = match cfg.regimen {
            Regimen::BabySteps => partition.union_through(k),
            Regimen::OnePass => {
                let mut d = partition.subsets()[k - 1].clone();
                d.sort_unstable();
                d
            }
        };
        let set_at = |t: u64| -> Result<Vec<usize>> {
            match competence_scores {
                Some(s) => competence_training_set(s, competence(t, cfg.c0, cfg.p, cfg.competence_total())),
                None => Ok(base_set.clone()),
            }
        };

        trainer.restart_warmup();
        let mut start = TraceEvent::new(step, k, EventKind::PhaseStart);
        start.train_set_size = Some(set_at(step)?.len());
        trace.events.push(start);

        let len = match cfg.mode {
            ScheduleMode::Fixed => cfg.fixed_steps(k),
            _ => cfg.max_steps_per_phase,
        };
        let checking = cfg.mode == ScheduleMode::Dynamic && cfg.consecutive_successes_required != SuccessesRequired::Never;
        let mut sample: Option<(Vec<usize>, f64)> = None;
        let mut streak = 0u32;
        let mut done = 0u64;

        for b in phase_boundaries(len, cfg.warmup_steps_before_check, cfg.check_interval) {
            let ids = set_at(step)?;
            let summary = trainer.train_steps(&ids, b - done)?;
            step += b - done;
            done = b;
            let mut ev = TraceEvent::new(step, k, EventKind::TrainStepSummary);
            ev.train_set_size = Some(ids.len());
            ev.lr = Some(summary.lr);
            ev.dev_bleu = trainer.dev_bleu()?;
            trace.events.push(ev);

            if !checking || b == len {
                continue;
            }
            if sample.is_none() {
                let s = subsample(&partition.subsets()[k - 1], cfg.subsample_size, seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
                let o_v = trainer.vanilla_recovery(&s)?;
                sample = Some((s, o_v));
            }
            let (s, o_v) = sample.as_ref().expect("sample drawn above");
            let o_c = trainer.cl_recovery(s)?;
            let mut check = TraceEvent::new(step, k, EventKind::RecoveryCheck);
            check.o_c = Some(o_c);
            check.o_v = Some(*o_v);
            trace.events.push(check);
            streak = if o_c > *o_v { streak + 1 } else { 0 };
            if let SuccessesRequired::Count(req) = cfg.consecutive_successes_required {
                if streak >= req {
                    break;
                }
            }
        }
        trace.events.push(TraceEvent::new(step, k, EventKind::PhaseAdvance));
        trainer.phase_end(k)?;
    }
    Ok(())
}
