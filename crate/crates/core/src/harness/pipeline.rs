//! The end-to-end commands: train the vanilla model, score, split, train
//! under a curriculum and report.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::artifacts::{meta_path, sha256_hex, ArtifactMeta, Layout};
use super::config::ExperimentConfig;
use super::report::{self, PartitionStats};
use crate::corpus::{build_vocab, generate_synthetic, load_parallel, ParallelCorpus, Side, Vocabulary, UNK};
use crate::difficulty::{
    embedding_norm_difficulty, feature_difficulty, lm_difficulty, loss_decline_difficulty, recovery_difficulty,
    train_ngram_lm, Criterion, DifficultyScoreTable, EmbeddingTable, Feature,
};
use crate::error::{Error, Result};
use crate::scheduler::{
    model_recovery, run_schedule, split_corpus, CurriculumPartition, EventKind, PhaseTrace, ScheduleTrainer,
    TrainSummary,
};
use crate::seq2seq::model::SRC_EMB;
use crate::seq2seq::{
    average_checkpoints, batch_loss, init_model, load_checkpoint, save_checkpoint, EncodedCorpus, LrSchedule,
    ModelConfig, ModelParameters, ModelTranslator, TrainState,
};

/// Train/dev split, vocabularies and the derived model configuration.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: EncodedCorpus,
    pub dev: EncodedCorpus,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub model: ModelConfig,
    /// Identifies the exact examples and vocabularies.
    pub data_hash: String,
}

impl PreparedData {
    pub fn train_corpus(&self) -> &ParallelCorpus {
        &self.train.corpus
    }

    pub fn translator<'a>(&'a self, params: &'a ModelParameters, cfg: &ExperimentConfig) -> ModelTranslator<'a> {
        ModelTranslator {
            params,
            src_vocab: &self.src_vocab,
            tgt_vocab: &self.tgt_vocab,
            max_len: self.model.max_decode_len,
            batch_size: cfg.training.decode_batch,
        }
    }

    /// Corpus BLEU of greedy decodes on the dev set.
    pub fn dev_bleu(&self, params: &ModelParameters, cfg: &ExperimentConfig) -> Result<f64> {
        let dev = &self.dev.corpus;
        model_recovery(&self.translator(params, cfg), dev, &dev.ids())
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let c = &cfg.corpus;
    let corpus = match (&c.synthetic, &c.src_path, &c.tgt_path) {
        (Some(spec), _, _) => generate_synthetic(spec, c.size, cfg.seeds.data)?,
        (None, Some(src), Some(tgt)) => load_parallel(src, tgt, c.tokenize)?,
        _ => unreachable!("rejected by validate"),
    };
    let (train, dev) = corpus.split_dev(c.dev_fraction, cfg.seeds.data)?;
    let src_vocab = build_vocab(&train, Side::Source, cfg.training.min_freq);
    let tgt_vocab = build_vocab(&train, Side::Target, cfg.training.min_freq);
    let longest = train.examples().iter().map(|e| e.tgt.len()).max().unwrap_or(0);
    let model = ModelConfig {
        src_vocab: src_vocab.len(),
        tgt_vocab: tgt_vocab.len(),
        emb_dim: cfg.model.emb_dim,
        hidden_dim: cfg.model.hidden_dim,
        dropout: cfg.model.dropout,
        label_smoothing: cfg.model.label_smoothing,
        max_decode_len: cfg.model.max_decode_len.unwrap_or(longest + 10),
    };
    model.validate()?;

    let fingerprint = serde_json::to_vec(&(
        train.examples(),
        dev.examples(),
        src_vocab.tokens(),
        tgt_vocab.tokens(),
        &train.meta().corrupted,
    ))
    .expect("data serializes");
    let data_hash = sha256_hex(&fingerprint)[..16].to_string();

    Ok(PreparedData {
        train: EncodedCorpus::new(train, &src_vocab, &tgt_vocab),
        dev: EncodedCorpus::new(dev, &src_vocab, &tgt_vocab),
        src_vocab,
        tgt_vocab,
        model,
        data_hash,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the split as plain text (`train.src`, `train.tgt`, `dev.*`) plus
/// `train.corrupted` flags when known.
pub fn write_data(data: &PreparedData, layout: &Layout) -> Result<()> {
    let dir = layout.data_dir()?;
    for (name, corpus) in [("train", &data.train.corpus), ("dev", &data.dev.corpus)] {
        let join = |side: fn(&crate::corpus::Example) -> &Vec<String>| {
            corpus.examples().iter().map(|e| side(e).join(" ") + "\n").collect::<String>()
        };
        write(&dir.join(format!("{name}.src")), &join(|e| &e.src))?;
        write(&dir.join(format!("{name}.tgt")), &join(|e| &e.tgt))?;
    }
    if let Some(flags) = &data.train.corpus.meta().corrupted {
        let text: String = flags.iter().map(|&f| if f { "1\n" } else { "0\n" }).collect();
        write(&dir.join("train.corrupted"), &text)?;
    }
    Ok(())
}

/// One point of a dev-BLEU learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub dev_bleu: f64,
    /// Mean training loss since the previous point.
    pub train_loss: Option<f64>,
    pub lr: Option<f64>,
}

pub const CURVE_HEADER: &str = "step,dev_bleu,train_loss,lr";

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut out = format!("{CURVE_HEADER}\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.step, p.dev_bleu, opt(p.train_loss), opt(p.lr)));
    }
    out
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(err(1, format!("expected header '{CURVE_HEADER}'")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| -> std::result::Result<Option<f64>, String> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| format!("bad number '{s}'"))
                }
            };
            let parse = || -> std::result::Result<CurvePoint, String> {
                if f.len() != 4 {
                    return Err(format!("expected 4 fields, found {}", f.len()));
                }
                Ok(CurvePoint {
                    step: f[0].parse().map_err(|_| format!("bad step '{}'", f[0]))?,
                    dev_bleu: num(f[1])?.ok_or("missing dev_bleu")?,
                    train_loss: num(f[2])?,
                    lr: num(f[3])?,
                })
            };
            parse().map_err(|m| err(i + 2, m))
        })
        .collect()
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Trains `state` on `ids` up to `target` steps, appending a curve point every
/// `eval_interval` steps.
fn train_with_curve(
    state: &mut TrainState,
    data: &PreparedData,
    cfg: &ExperimentConfig,
    ids: &[usize],
    target: u64,
    curve: &mut Vec<CurvePoint>,
) -> Result<()> {
    while state.step < target {
        let n = cfg.training.eval_interval.min(target - state.step);
        let mut losses = Vec::new();
        let mut lr = None;
        state.train_steps(ids, &data.train, n as usize, &mut |s| {
            losses.push(s.loss);
            lr = Some(s.lr);
        })?;
        curve.push(CurvePoint {
            step: state.step,
            dev_bleu: data.dev_bleu(&state.params, cfg)?,
            train_loss: mean(&losses),
            lr,
        });
        info!(
            "step {} dev BLEU {:.2} loss {:.4}",
            state.step,
            curve.last().unwrap().dev_bleu,
            mean(&losses).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn lr_schedule(cfg: &ExperimentConfig) -> LrSchedule {
    LrSchedule {
        peak: cfg.training.peak_lr,
        warmup_steps: cfg.training.warmup_steps,
    }
}

pub fn write_config(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    write(&layout.config(), &cfg.to_toml())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanillaOutcome {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub final_dev_bleu: f64,
}

/// Trains the vanilla model on the full training set.
pub fn cmd_train_vanilla(cfg: &ExperimentConfig, layout: &Layout) -> Result<VanillaOutcome> {
    let data = prepare_data(cfg)?;
    write_data(&data, layout)?;
    let params = init_model(&data.model, cfg.seeds.vanilla)?;
    let mut state = TrainState::new(params, lr_schedule(cfg), cfg.training.max_tokens, cfg.seeds.vanilla);
    let mut curve = vec![CurvePoint {
        step: 0,
        dev_bleu: data.dev_bleu(&state.params, cfg)?,
        train_loss: None,
        lr: None,
    }];
    let ids = data.train_corpus().ids();
    let curve_path = layout.vanilla_curve()?;
    let trained = train_with_curve(&mut state, &data, cfg, &ids, cfg.training.vanilla_steps, &mut curve);
    write(&curve_path, &curve_csv(&curve))?;
    trained.map_err(|e| e.context("training the vanilla model"))?;

    let ckpt = layout.vanilla_checkpoint()?;
    save_checkpoint(&state, &ckpt)?;
    let final_dev_bleu = curve.last().map_or(0.0, |p| p.dev_bleu);
    let config_hash = cfg.hash();
    ArtifactMeta::new("vanilla-checkpoint", &config_hash, &data.data_hash)
        .detail("model_hash", data.model.hash())
        .detail("steps", state.step)
        .detail("seed", cfg.seeds.vanilla)
        .detail("final_dev_bleu", final_dev_bleu)
        .write_for(&ckpt)?;
    ArtifactMeta::new("learning-curve", &config_hash, &data.data_hash)
        .input(&ckpt)?
        .write_for(&curve_path)?;
    Ok(VanillaOutcome {
        checkpoint: ckpt,
        curve: curve_path,
        final_dev_bleu,
    })
}

fn load_vanilla(data: &PreparedData, checkpoint: &Path) -> Result<TrainState> {
    ArtifactMeta::verify(checkpoint, Some(&data.data_hash))?;
    load_checkpoint(checkpoint, Some(&data.model))
}

/// Per-example sequence NLL of every training pair.
fn example_losses(params: &ModelParameters, data: &PreparedData, chunk: usize) -> Result<BTreeMap<usize, f64>> {
    let ids = data.train_corpus().ids();
    let mut out = BTreeMap::new();
    for part in ids.chunks(chunk.max(1)) {
        let loss = batch_loss(params, &data.train.batch(part))?;
        out.extend(part.iter().copied().zip(loss.per_example));
    }
    Ok(out)
}

fn model_embeddings(params: &ModelParameters, vocab: &Vocabulary) -> Result<EmbeddingTable> {
    let emb = &params.tensors[SRC_EMB];
    let vectors: HashMap<String, Vec<f64>> = vocab
        .tokens()
        .iter()
        .map(|t| {
            let id = vocab.id(t).expect("vocabulary token") as usize;
            (t.clone(), emb.row(id).to_vec())
        })
        .collect();
    EmbeddingTable::new(vectors, emb.row(UNK as usize).to_vec())
}

/// Scores every training pair under `criterion`. The vanilla checkpoint is
/// needed for recovery, loss decline and (without an embeddings file)
/// embedding norm.
pub fn compute_scores(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    criterion: Criterion,
    checkpoint: Option<&Path>,
) -> Result<DifficultyScoreTable> {
    let vanilla = || -> Result<TrainState> {
        let path = checkpoint
            .ok_or_else(|| Error::Argument(format!("criterion {criterion} needs a vanilla checkpoint")))?;
        load_vanilla(data, path)
    };
    let corpus = data.train_corpus();
    match criterion {
        Criterion::Recovery => {
            let state = vanilla()?;
            recovery_difficulty(corpus, &data.translator(&state.params, cfg))
        }
        Criterion::Length => feature_difficulty(corpus, Feature::SentenceLength),
        Criterion::Rarity => feature_difficulty(corpus, Feature::WordRarity),
        Criterion::Lm => {
            let side = cfg.criteria.lm_side;
            let sentences: Vec<Vec<String>> = corpus
                .examples()
                .iter()
                .map(|e| match side {
                    Side::Target => e.tgt.clone(),
                    _ => e.src.clone(),
                })
                .collect();
            let lm = train_ngram_lm(&sentences, cfg.criteria.lm_order)?;
            lm_difficulty(corpus, &lm, side)
        }
        Criterion::EmbedNorm => {
            let table = match &cfg.criteria.embeddings_path {
                Some(p) => EmbeddingTable::parse_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
                None => model_embeddings(&vanilla()?.params, &data.src_vocab)?,
            };
            embedding_norm_difficulty(corpus, &table)
        }
        Criterion::LossDecline => {
            let state = vanilla()?;
            let initial = init_model(&data.model, cfg.seeds.vanilla)?;
            let prev = example_losses(&initial, data, cfg.training.decode_batch)?;
            let cur = example_losses(&state.params, data, cfg.training.decode_batch)?;
            loss_decline_difficulty(&prev, &cur)
        }
    }
}

/// Writes the score TSV for `criterion` and returns its path.
pub fn cmd_score(
    cfg: &ExperimentConfig,
    layout: &Layout,
    criterion: Criterion,
    checkpoint: Option<&Path>,
) -> Result<PathBuf> {
    let data = prepare_data(cfg)?;
    let table = compute_scores(cfg, &data, criterion, checkpoint)
        .map_err(|e| e.context(format!("scoring with criterion {criterion}")))?;
    let path = layout.scores(criterion)?;
    table.write_tsv(&path)?;
    let mut meta = ArtifactMeta::new("scores", &cfg.hash(), &data.data_hash)
        .detail("criterion", criterion)
        .detail("cdf", table.cdf)
        .detail("examples", table.len())
        .detail("token_level", format!("{:?} tokens, no subword segmentation", cfg.corpus.tokenize).to_lowercase());
    if let Some(raw) = &table.raw {
        meta = meta.detail("raw_scores", raw);
    }
    if let Some(ckpt) = checkpoint.filter(|_| criterion.needs_checkpoint(cfg)) {
        meta = meta.input(ckpt)?;
    }
    meta.write_for(&path)?;
    Ok(path)
}

impl Criterion {
    fn needs_checkpoint(self, cfg: &ExperimentConfig) -> bool {
        match self {
            Criterion::Recovery | Criterion::LossDecline => true,
            Criterion::EmbedNorm => cfg.criteria.embeddings_path.is_none(),
            _ => false,
        }
    }
}

/// Splits a score file into `k` subsets and writes the manifest to `out`.
///
/// When the score file has a sidecar it is verified, and against `data_hash`
/// if one is given; a bare TSV is accepted only without `data_hash`.
pub fn cmd_split(scores: &Path, k: usize, out: &Path, data_hash: Option<&str>) -> Result<CurriculumPartition> {
    let upstream = if meta_path(scores).exists() {
        Some(ArtifactMeta::verify(scores, data_hash)?)
    } else if data_hash.is_some() {
        return Err(Error::Incompatible(format!("{} has no provenance sidecar", scores.display())));
    } else {
        None
    };
    let table = DifficultyScoreTable::read_tsv(scores)?;
    let partition = split_corpus(&table, k)?;
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    partition.write_manifest(out)?;
    let (config_hash, data_hash) = upstream
        .as_ref()
        .map_or((String::new(), String::new()), |m| (m.config_hash.clone(), m.data_hash.clone()));
    ArtifactMeta::new("manifest", &config_hash, &data_hash)
        .input(scores)?
        .detail("criterion", table.criterion)
        .detail("K", k)
        .write_for(out)?;
    Ok(partition)
}

struct CurriculumRun<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a PreparedData,
    vanilla: &'a ModelParameters,
    state: TrainState,
    losses: Vec<f64>,
    curve: Vec<CurvePoint>,
    last_lr: Option<f64>,
    phase_dir: PathBuf,
    phase_checkpoints: Vec<(PathBuf, f64)>,
}

impl ScheduleTrainer for CurriculumRun<'_> {
    fn train_steps(&mut self, ids: &[usize], n: u64) -> Result<TrainSummary> {
        let mut lr = None;
        let losses = &mut self.losses;
        self.state.train_steps(ids, &self.data.train, n as usize, &mut |s| {
            losses.push(s.loss);
            lr = Some(s.lr);
        })?;
        self.last_lr = lr.or(self.last_lr);
        Ok(TrainSummary {
            lr: lr.unwrap_or_else(|| self.state.next_lr()),
        })
    }

    fn restart_warmup(&mut self) {
        self.state.restart_warmup();
    }

    fn cl_recovery(&mut self, sample: &[usize]) -> Result<f64> {
        model_recovery(&self.data.translator(&self.state.params, self.cfg), self.data.train_corpus(), sample)
    }

    fn vanilla_recovery(&mut self, sample: &[usize]) -> Result<f64> {
        model_recovery(&self.data.translator(self.vanilla, self.cfg), self.data.train_corpus(), sample)
    }

    fn dev_bleu(&mut self) -> Result<Option<f64>> {
        let bleu = self.data.dev_bleu(&self.state.params, self.cfg)?;
        self.curve.push(CurvePoint {
            step: self.state.step,
            dev_bleu: bleu,
            train_loss: mean(&self.losses),
            lr: self.last_lr,
        });
        self.losses.clear();
        info!("CL step {} dev BLEU {bleu:.2}", self.state.step);
        Ok(Some(bleu))
    }

    fn phase_end(&mut self, k: usize) -> Result<()> {
        let path = self.phase_dir.join(format!("phase-{k}.ckpt"));
        save_checkpoint(&self.state, &path)?;
        let bleu = self.curve.last().map_or(0.0, |p| p.dev_bleu);
        self.phase_checkpoints.push((path, bleu));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumOutcome {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub curve: PathBuf,
    pub final_dev_bleu: f64,
    pub steps: u64,
    /// Dev BLEU of the mean of the `report.average_checkpoints` phase
    /// checkpoints with the best dev BLEU, when more than one is averaged.
    pub averaged_dev_bleu: Option<f64>,
    pub baseline: Option<BaselineOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub final_dev_bleu: f64,
    pub steps: u64,
}

/// Trains a fresh model through the curriculum in `manifest`, then (unless
/// disabled) continues the vanilla run to the same number of steps as the
/// comparison baseline.
pub fn cmd_train_cl(
    cfg: &ExperimentConfig,
    layout: &Layout,
    manifest: &Path,
    vanilla_checkpoint: &Path,
    scores: Option<&Path>,
) -> Result<CurriculumOutcome> {
    let data = prepare_data(cfg)?;
    ArtifactMeta::verify(manifest, Some(&data.data_hash))?;
    let partition = CurriculumPartition::read_manifest(manifest)?;
    partition.check_covers(data.train.len())?;
    let table = match scores {
        Some(p) => {
            ArtifactMeta::verify(p, Some(&data.data_hash))?;
            Some(DifficultyScoreTable::read_tsv(p)?)
        }
        None => None,
    };
    let vanilla = load_vanilla(&data, vanilla_checkpoint)?;

    let dir = layout.cl_dir(cfg.schedule.mode)?;
    let params = init_model(&data.model, cfg.seeds.cl)?;
    let mut run = CurriculumRun {
        cfg,
        data: &data,
        vanilla: &vanilla.params,
        state: TrainState::new(params, lr_schedule(cfg), cfg.training.max_tokens, cfg.seeds.cl),
        losses: Vec::new(),
        curve: Vec::new(),
        last_lr: None,
        phase_dir: dir.clone(),
        phase_checkpoints: Vec::new(),
    };
    run.curve.push(CurvePoint {
        step: 0,
        dev_bleu: data.dev_bleu(&run.state.params, cfg)?,
        train_loss: None,
        lr: None,
    });

    let mut trace = PhaseTrace::default();
    let result = run_schedule(&partition, table.as_ref(), &cfg.schedule, cfg.seeds.cl, &mut run, &mut trace);
    let trace_path = dir.join("trace.csv");
    let curve_path = dir.join("learning_curve.csv");
    trace.write_csv(&trace_path)?;
    write(&curve_path, &curve_csv(&run.curve))?;
    result.map_err(|e| e.context(format!("{} curriculum run", cfg.schedule.mode)))?;

    let checkpoint = dir.join("model.ckpt");
    save_checkpoint(&run.state, &checkpoint)?;
    let final_dev_bleu = run.curve.last().map_or(0.0, |p| p.dev_bleu);
    let steps = run.state.step;
    let config_hash = cfg.hash();
    let meta = |kind: &str| -> Result<ArtifactMeta> {
        ArtifactMeta::new(kind, &config_hash, &data.data_hash)
            .input(manifest)?
            .input(vanilla_checkpoint)
            .map(|m| m.detail("mode", cfg.schedule.mode).detail("seed", cfg.seeds.cl))
    };
    meta("cl-checkpoint")?
        .detail("steps", steps)
        .detail("final_dev_bleu", final_dev_bleu)
        .write_for(&checkpoint)?;
    meta("trace")?.write_for(&trace_path)?;
    meta("learning-curve")?.write_for(&curve_path)?;

    let k_avg = cfg.report.average_checkpoints;
    let averaged_dev_bleu = if k_avg > 1 {
        let ckpts = top_checkpoints(&run.phase_checkpoints, k_avg);
        let avg = average_checkpoints(&ckpts)?;
        Some(data.dev_bleu(&avg, cfg)?)
    } else {
        None
    };
    info!("{} curriculum finished at step {steps}, dev BLEU {final_dev_bleu:.2}", cfg.schedule.mode);

    let baseline = if cfg.training.baseline {
        Some(continue_vanilla(cfg, layout, &data, vanilla, vanilla_checkpoint, steps)?)
    } else {
        None
    };
    Ok(CurriculumOutcome {
        checkpoint,
        trace: trace_path,
        curve: curve_path,
        final_dev_bleu,
        steps,
        averaged_dev_bleu,
        baseline,
    })
}

/// Paths of the `k` checkpoints with the highest dev BLEU, earlier phases
/// first on ties.
fn top_checkpoints(scored: &[(PathBuf, f64)], k: usize) -> Vec<PathBuf> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order.into_iter().map(|i| scored[i].0.clone()).collect()
}

/// The vanilla run, continued on the full training set until it has taken at
/// least `steps` steps.
fn continue_vanilla(
    cfg: &ExperimentConfig,
    layout: &Layout,
    data: &PreparedData,
    mut state: TrainState,
    vanilla_checkpoint: &Path,
    steps: u64,
) -> Result<BaselineOutcome> {
    let vanilla_curve = vanilla_checkpoint.with_file_name("dev_bleu.csv");
    let mut curve = if vanilla_curve.exists() {
        read_curve(&vanilla_curve)?
    } else {
        vec![CurvePoint {
            step: state.step,
            dev_bleu: data.dev_bleu(&state.params, cfg)?,
            train_loss: None,
            lr: None,
        }]
    };
    let target = steps.max(state.step);
    train_with_curve(&mut state, data, cfg, &data.train_corpus().ids(), target, &mut curve)?;

    let dir = layout.baseline_dir()?;
    let checkpoint = dir.join("model.ckpt");
    let curve_path = dir.join("learning_curve.csv");
    save_checkpoint(&state, &checkpoint)?;
    write(&curve_path, &curve_csv(&curve))?;
    let final_dev_bleu = curve.last().map_or(0.0, |p| p.dev_bleu);
    let config_hash = cfg.hash();
    ArtifactMeta::new("baseline-checkpoint", &config_hash, &data.data_hash)
        .input(vanilla_checkpoint)?
        .detail("steps", state.step)
        .detail("final_dev_bleu", final_dev_bleu)
        .write_for(&checkpoint)?;
    ArtifactMeta::new("learning-curve", &config_hash, &data.data_hash)
        .input(vanilla_checkpoint)?
        .write_for(&curve_path)?;
    Ok(BaselineOutcome {
        checkpoint,
        curve: curve_path,
        final_dev_bleu,
        steps: state.step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOutcome {
    pub histogram: PathBuf,
    pub partition_stats: PathBuf,
    pub learning_curves: PathBuf,
    pub stats: Vec<PartitionStats>,
    pub fraction_below_10: f64,
}

/// Reads `train.corrupted` flags written by [`write_data`].
pub fn read_corruption_flags(layout: &Layout) -> Result<Option<Vec<bool>>> {
    let path = layout.root.join("data").join("train.corrupted");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| match l {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: format!("expected 0 or 1, found '{l}'"),
            }),
        })
        .collect::<Result<Vec<bool>>>()
        .map(Some)
}

/// Writes the recovery histogram, the per-subset statistics and the merged
/// learning curves into `layout`'s report directory.
pub fn cmd_report(
    layout: &Layout,
    scores: &Path,
    manifest: &Path,
    curves: &[(String, PathBuf)],
    corrupted: Option<&[bool]>,
    bin_width: f64,
) -> Result<ReportOutcome> {
    let table = DifficultyScoreTable::read_tsv(scores)?;
    if table.criterion != Criterion::Recovery {
        return Err(Error::Argument(format!(
            "reports need recovery scores, {} holds {} scores",
            scores.display(),
            table.criterion
        )));
    }
    let partition = CurriculumPartition::read_manifest(manifest)?;
    partition.check_covers(table.len())?;
    if let Some(flags) = corrupted {
        if flags.len() != table.len() {
            return Err(Error::IdMismatch((flags.len().min(table.len())..flags.len().max(table.len())).collect()));
        }
    }
    let bleu: Vec<f64> = table.scores.iter().map(|d| -d + 0.0).collect();
    let dir = layout.report_dir()?;

    let bins = report::histogram(&bleu, bin_width)?;
    let histogram = dir.join("recovery_histogram.csv");
    write(&histogram, &report::histogram_csv(&bins, bleu.len()))?;
    let fraction_below_10 = report::fraction_below(&bleu, 10.0);
    write(
        &dir.join("recovery_summary.csv"),
        &format!(
            "examples,below_10,fraction_below_10\n{},{},{}\n",
            bleu.len(),
            bleu.iter().filter(|&&b| b < 10.0).count(),
            fraction_below_10
        ),
    )?;

    let stats = report::partition_stats(&partition, &bleu, corrupted)?;
    let partition_stats = dir.join("partition_stats.csv");
    write(&partition_stats, &report::partition_stats_csv(&stats))?;
    write(&dir.join("partition_stats.txt"), &report::render_partition_stats(&stats))?;

    let mut loaded = Vec::with_capacity(curves.len());
    for (name, path) in curves {
        loaded.push((name.clone(), read_curve(path)?));
    }
    let learning_curves = dir.join("learning_curves.csv");
    write(&learning_curves, &report::merge_curves(&loaded)?)?;

    Ok(ReportOutcome {
        histogram,
        partition_stats,
        learning_curves,
        stats,
        fraction_below_10,
    })
}

/// Everything `run-all` produced, also written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub data_hash: String,
    pub criterion: Criterion,
    pub mode: crate::scheduler::ScheduleMode,
    pub k: usize,
    pub phases: usize,
    pub phase_steps: Vec<u64>,
    pub vanilla_dev_bleu: f64,
    pub cl_dev_bleu: f64,
    pub cl_steps: u64,
    pub cl_averaged_dev_bleu: Option<f64>,
    pub baseline_dev_bleu: Option<f64>,
    pub baseline_steps: Option<u64>,
    pub fraction_below_10: f64,
    pub partition_stats: Vec<PartitionStats>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

/// Vanilla training, scoring, splitting, curriculum training and reports.
pub fn run_all(cfg: &ExperimentConfig, layout: &Layout) -> Result<RunSummary> {
    cfg.validate()?;
    write_config(cfg, layout)?;
    let vanilla = cmd_train_vanilla(cfg, layout)?;
    let data = prepare_data(cfg)?;

    let scores = cmd_score(cfg, layout, cfg.criterion, Some(&vanilla.checkpoint))?;
    let recovery_scores = if cfg.criterion == Criterion::Recovery {
        scores.clone()
    } else {
        cmd_score(cfg, layout, Criterion::Recovery, Some(&vanilla.checkpoint))?
    };
    let manifest = layout.manifest()?;
    cmd_split(&scores, cfg.schedule.k, &manifest, Some(&data.data_hash))?;
    let cl = cmd_train_cl(cfg, layout, &manifest, &vanilla.checkpoint, Some(&scores))?;

    let mut curves = vec![(format!("cl-{}", cfg.schedule.mode), cl.curve.clone())];
    if let Some(b) = &cl.baseline {
        curves.push(("baseline".to_string(), b.curve.clone()));
    }
    let flags = data.train_corpus().meta().corrupted.clone();
    let report = cmd_report(
        layout,
        &recovery_scores,
        &manifest,
        &curves,
        flags.as_deref(),
        cfg.report.histogram_bin_width,
    )?;

    let trace = PhaseTrace::read_csv(&cl.trace)?;
    let starts: Vec<u64> = trace.of_kind(EventKind::PhaseStart).map(|e| e.step).collect();
    let ends: Vec<u64> = trace.of_kind(EventKind::PhaseAdvance).map(|e| e.step).collect();
    let mut artifacts = BTreeMap::new();
    artifacts.insert("vanilla_checkpoint".into(), vanilla.checkpoint.clone());
    artifacts.insert("scores".into(), scores);
    artifacts.insert("recovery_scores".into(), recovery_scores);
    artifacts.insert("manifest".into(), manifest);
    artifacts.insert("trace".into(), cl.trace.clone());
    artifacts.insert("cl_checkpoint".into(), cl.checkpoint.clone());
    artifacts.insert("learning_curves".into(), report.learning_curves.clone());
    artifacts.insert("partition_stats".into(), report.partition_stats.clone());
    artifacts.insert("histogram".into(), report.histogram.clone());

    let summary = RunSummary {
        config_hash: cfg.hash(),
        data_hash: data.data_hash.clone(),
        criterion: cfg.criterion,
        mode: cfg.schedule.mode,
        k: cfg.schedule.k,
        phases: trace.phase_count(),
        phase_steps: starts.iter().zip(&ends).map(|(s, e)| e - s).collect(),
        vanilla_dev_bleu: vanilla.final_dev_bleu,
        cl_dev_bleu: cl.final_dev_bleu,
        cl_steps: cl.steps,
        cl_averaged_dev_bleu: cl.averaged_dev_bleu,
        baseline_dev_bleu: cl.baseline.as_ref().map(|b| b.final_dev_bleu),
        baseline_steps: cl.baseline.as_ref().map(|b| b.steps),
        fraction_below_10: report.fraction_below_10,
        partition_stats: report.stats,
        artifacts,
    };
    let path = layout.root.join("summary.json");
    write(&path, &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"))?;
    Ok(summary)
}

/// Dev BLEU of a saved model, for ad-hoc evaluation.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<f64> {
    let data = prepare_data(cfg)?;
    let state = load_checkpoint(checkpoint, Some(&data.model))?;
    data.dev_bleu(&state.params, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_checkpoints_by_dev_bleu() {
        let scored: Vec<(PathBuf, f64)> = [("a", 10.0), ("b", 30.0), ("c", 20.0), ("d", 30.0)]
            .iter()
            .map(|&(p, b)| (PathBuf::from(p), b))
            .collect();
        let names = |k| top_checkpoints(&scored, k).iter().map(|p| p.display().to_string()).collect::<Vec<_>>();
        assert_eq!(names(1), ["b"]);
        assert_eq!(names(2), ["b", "d"]);
        assert_eq!(names(3), ["b", "c", "d"]);
        assert_eq!(names(9).len(), 4);
    }
}
