use std::fs;
use std::path::Path;

use curriculum_core::corpus::{ParallelCorpus, CorpusMeta};
use curriculum_core::difficulty::recovery_difficulty;
use curriculum_core::harness::{
    cmd_report, cmd_score, cmd_split, cmd_train_cl, cmd_train_vanilla, prepare_data, ArtifactMeta, ExperimentConfig,
    Layout,
};
use curriculum_core::scheduler::{
    run_schedule, split_corpus, EventKind, ScheduleConfig, ScheduleMode, ScheduleTrainer, SuccessesRequired,
    TrainSummary,
};
use curriculum_core::seq2seq::{init_model, load_checkpoint};
use curriculum_core::{Criterion, CurriculumPartition, DifficultyScoreTable, Error, PhaseTrace, Result};

const TINY: &str = r#"
[corpus]
size = 160
dev_fraction = 0.1
synthetic = { task = "noisy-cipher", vocab_size = 12, min_len = 2, max_len = 5, corrupt_fraction = 0.25, rho = 0.5 }

[model]
emb_dim = 8
hidden_dim = 12

[training]
vanilla_steps = 30
eval_interval = 10
warmup_steps = 10
max_tokens = 120
baseline = false

[schedule]
k = 3
max_steps_per_phase = 10
"#;

fn tiny(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!("{TINY}\n{extra}"), Path::new(".")).unwrap()
}

fn with<F: FnOnce(&mut ExperimentConfig)>(f: F) -> ExperimentConfig {
    let mut cfg = tiny("");
    f(&mut cfg);
    cfg
}

fn assert_incompatible<T: std::fmt::Debug>(r: Result<T>) {
    let err = r.unwrap_err();
    assert!(matches!(err.root(), Error::Incompatible(_)), "{err}");
}

#[test]
fn zero_step_vanilla_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = with(|c| c.training.vanilla_steps = 0);
    let out = cmd_train_vanilla(&cfg, &layout).unwrap();
    let data = prepare_data(&cfg).unwrap();
    let st = load_checkpoint(&out.checkpoint, Some(&data.model)).unwrap();
    assert_eq!(st.step, 0);
    assert_eq!(st.params, init_model(&data.model, cfg.seeds.vanilla).unwrap());
    let curve = fs::read_to_string(&out.curve).unwrap();
    assert_eq!(curve.lines().count(), 2, "{curve}");
}

#[test]
fn vanilla_rerun_is_byte_identical() {
    let cfg = tiny("");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = cmd_train_vanilla(&cfg, &Layout::new(a.path())).unwrap();
    let ob = cmd_train_vanilla(&cfg, &Layout::new(b.path())).unwrap();
    assert_eq!(fs::read(&oa.checkpoint).unwrap(), fs::read(&ob.checkpoint).unwrap());
    assert_eq!(fs::read(&oa.curve).unwrap(), fs::read(&ob.curve).unwrap());
}

fn corpus(pairs: &[(&str, &str)]) -> ParallelCorpus {
    let split = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    ParallelCorpus::from_pairs(pairs.iter().map(|(s, t)| (split(s), split(t))), CorpusMeta::default()).unwrap()
}

#[test]
fn perfect_and_empty_predictors_bound_recovery() {
    let c = corpus(&[("a b c", "a b c"), ("d e", "d e"), ("f g h i", "f g h i")]);
    let copy = |s: &[String]| Ok(s.to_vec());
    let t = recovery_difficulty(&c, &copy).unwrap();
    assert_eq!(t.scores, vec![-100.0; 3]);
    let silent = |_: &[String]| Ok(Vec::new());
    let t = recovery_difficulty(&c, &silent).unwrap();
    assert_eq!(t.scores, vec![0.0; 3]);
}

#[test]
fn untrained_model_scores_lie_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = with(|c| c.training.vanilla_steps = 0);
    let v = cmd_train_vanilla(&cfg, &layout).unwrap();
    let path = cmd_score(&cfg, &layout, Criterion::Recovery, Some(&v.checkpoint)).unwrap();
    let table = DifficultyScoreTable::read_tsv(&path).unwrap();
    assert_eq!(table.len(), prepare_data(&cfg).unwrap().train.len());
    assert!(table.scores.iter().all(|&d| (-100.0..=0.0).contains(&d)));
    assert_eq!(DifficultyScoreTable::parse_tsv(&table.to_tsv(), &path).unwrap(), table);
    ArtifactMeta::verify(&path, None).unwrap();
}

fn fixture_table() -> DifficultyScoreTable {
    let scores = vec![0.5, -1.0, 3.0, 0.5, 2.0, -4.0, 1.0, 0.0];
    DifficultyScoreTable::new(Criterion::Length, scores).unwrap()
}

#[test]
fn split_fixture_and_resplit() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("scores.tsv");
    fixture_table().write_tsv(&tsv).unwrap();

    let m = dir.path().join("m.json");
    let p = cmd_split(&tsv, 3, &m, None).unwrap();
    // sorted: 5(-4) 1(-1) 7(0) 0(0.5) 3(0.5) 6(1) 4(2) 2(3)
    assert_eq!(p.subsets(), &[vec![5, 1, 7], vec![0, 3, 6], vec![4, 2]]);
    let first = fs::read(&m).unwrap();
    cmd_split(&tsv, 3, &m, None).unwrap();
    assert_eq!(fs::read(&m).unwrap(), first);
    assert_eq!(CurriculumPartition::read_manifest(&m).unwrap().canonical(), p.canonical());

    let one = cmd_split(&tsv, 1, &dir.path().join("one.json"), None).unwrap();
    assert_eq!(one.k(), 1);
    assert_eq!(one.union_through(1), (0..8).collect::<Vec<_>>());

    assert_incompatible(cmd_split(&tsv, 3, &m, Some("abc")));
}

/// Counts steps; the vanilla model never recovers anything.
#[derive(Default)]
struct Stub {
    steps: u64,
    restarts: usize,
}

impl ScheduleTrainer for Stub {
    fn train_steps(&mut self, _ids: &[usize], n: u64) -> Result<TrainSummary> {
        self.steps += n;
        Ok(TrainSummary { lr: 1e-3 })
    }
    fn restart_warmup(&mut self) {
        self.restarts += 1;
    }
    fn cl_recovery(&mut self, _sample: &[usize]) -> Result<f64> {
        Ok(5.0)
    }
    fn vanilla_recovery(&mut self, _sample: &[usize]) -> Result<f64> {
        Ok(0.0)
    }
}

fn partition16() -> CurriculumPartition {
    split_corpus(
        &DifficultyScoreTable::new(Criterion::Length, (0..16).map(|i| i as f64 / 16.0).collect()).unwrap(),
        4,
    )
    .unwrap()
}

#[test]
fn fixed_schedule_phase_starts() {
    let cfg = ScheduleConfig {
        mode: ScheduleMode::Fixed,
        ..ScheduleConfig::default()
    };
    let mut stub = Stub::default();
    let mut trace = PhaseTrace::default();
    run_schedule(&partition16(), None, &cfg, 1, &mut stub, &mut trace).unwrap();
    let starts: Vec<u64> = trace.of_kind(EventKind::PhaseStart).map(|e| e.step).collect();
    assert_eq!(starts, [0, 500, 1000, 1500]);
    let sizes: Vec<usize> = trace.of_kind(EventKind::PhaseStart).filter_map(|e| e.train_set_size).collect();
    assert_eq!(sizes, [4, 8, 12, 16]);
    assert_eq!(stub.steps, 2000);
    assert_eq!(stub.restarts, 4);
    assert_eq!(trace.of_kind(EventKind::RecoveryCheck).count(), 0);
}

#[test]
fn dynamic_schedule_advances_at_first_check_against_silent_vanilla() {
    let cfg = ScheduleConfig {
        mode: ScheduleMode::Dynamic,
        consecutive_successes_required: SuccessesRequired::Count(1),
        ..ScheduleConfig::default()
    };
    let mut stub = Stub::default();
    let mut trace = PhaseTrace::default();
    run_schedule(&partition16(), None, &cfg, 1, &mut stub, &mut trace).unwrap();
    let advances: Vec<u64> = trace.of_kind(EventKind::PhaseAdvance).map(|e| e.step).collect();
    let w = cfg.warmup_steps_before_check;
    assert_eq!(advances, [w, 2 * w, 3 * w, 4 * w]);
    assert_eq!(trace.final_step(), 4 * w);
}

#[test]
fn stale_artifacts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = tiny("");
    let v = cmd_train_vanilla(&cfg, &layout).unwrap();
    let scores = cmd_score(&cfg, &layout, Criterion::Recovery, Some(&v.checkpoint)).unwrap();
    let manifest = layout.manifest().unwrap();
    let data_hash = prepare_data(&cfg).unwrap().data_hash;
    cmd_split(&scores, 3, &manifest, Some(&data_hash)).unwrap();

    let other_data = with(|c| c.seeds.data += 1);
    assert_incompatible(cmd_train_cl(&other_data, &layout, &manifest, &v.checkpoint, None));
    let other_model = with(|c| c.model.hidden_dim += 1);
    assert_incompatible(cmd_train_cl(&other_model, &layout, &manifest, &v.checkpoint, None));

    let mut bytes = fs::read(&scores).unwrap();
    bytes.extend_from_slice(b"\n");
    fs::write(&scores, &bytes).unwrap();
    assert_incompatible(cmd_split(&scores, 3, &manifest, Some(&data_hash)));

    let ok = cmd_train_cl(&cfg, &layout, &manifest, &v.checkpoint, None).unwrap();
    assert_eq!(ok.steps, 30);
    assert!(ok.baseline.is_none());
}

#[test]
fn report_rejects_mismatched_ids() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let scores = dir.path().join("r.tsv");
    DifficultyScoreTable::new(Criterion::Recovery, vec![-100.0, -50.0, -20.0, 0.0])
        .unwrap()
        .write_tsv(&scores)
        .unwrap();
    let manifest = dir.path().join("m.json");
    CurriculumPartition::new("recovery", vec![vec![0, 1], vec![2, 4]]).unwrap().write_manifest(&manifest).unwrap();
    let err = cmd_report(&layout, &scores, &manifest, &[], None, 10.0).unwrap_err();
    assert!(matches!(err.root(), Error::IdMismatch(_)), "{err}");

    CurriculumPartition::new("recovery", vec![vec![0, 1], vec![2, 3]]).unwrap().write_manifest(&manifest).unwrap();
    let err = cmd_report(&layout, &scores, &manifest, &[], Some(&[true, false]), 10.0).unwrap_err();
    assert!(matches!(err.root(), Error::IdMismatch(_)), "{err}");
    let out = cmd_report(&layout, &scores, &manifest, &[], Some(&[false, false, true, true]), 10.0).unwrap();
    assert_eq!(out.stats.len(), 2);
    assert_eq!(out.fraction_below_10, 0.25);
}
