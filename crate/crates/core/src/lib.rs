//! Self-guided curriculum learning for sequence-to-sequence translation.
//!
//! The pipeline trains a "vanilla" translator on the full corpus, scores every
//! training pair by how well that model recovers its reference (negated
//! sentence BLEU), splits the corpus into difficulty-ordered subsets and then
//! retrains a fresh model phase by phase under a fixed, dynamic or
//! competence-based schedule.
//!
//! Modules map onto the stages:
//!
//! * [`corpus`]: parallel corpora, tokenization, vocabularies, batching and
//!   synthetic cipher tasks.
//! * [`bleu`]: sentence- and corpus-level BLEU.
//! * [`difficulty`]: recovery difficulty plus the feature, language-model,
//!   embedding-norm and loss-decline criteria.
//! * [`scheduler`]: corpus splitting, competence, recovery checks and the
//!   phase state machine.
//! * [`seq2seq`]: a small GRU encoder-decoder with attention, reverse-mode
//!   gradients, Adam and checkpoints.
//! * [`harness`]: experiment configuration, the end-to-end commands and
//!   reports.

pub mod bleu;
pub mod corpus;
pub mod difficulty;
pub mod error;
pub mod harness;
pub mod scheduler;
pub mod seq2seq;
pub mod translate;

pub use bleu::{corpus_bleu, sentence_bleu, BleuScore, NgramStats};
pub use corpus::{Example, ParallelCorpus, TokenizeMode, Vocabulary};
pub use difficulty::{Criterion, DifficultyScoreTable};

pub use error::{Error, Result};
pub use scheduler::{CurriculumPartition, PhaseTrace, ScheduleConfig, ScheduleMode};

pub use seq2seq::{ModelConfig, ModelParameters, TrainState};
pub use translate::Translator;
