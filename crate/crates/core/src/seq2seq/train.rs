//! Training state and the step loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{grad, Batch, ModelParameters};
use super::optim::{AdamState, LrSchedule};
use crate::corpus::{encode, make_batches, ParallelCorpus, Vocabulary};
use crate::error::{Error, Result};

/// A corpus together with its id-encoded sides.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub corpus: ParallelCorpus,
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
}

impl EncodedCorpus {
    pub fn new(corpus: ParallelCorpus, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Self {
        let src = corpus.examples().iter().map(|e| encode(&e.src, src_vocab)).collect();
        let tgt = corpus.examples().iter().map(|e| encode(&e.tgt, tgt_vocab)).collect();
        Self { corpus, src, tgt }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn batch(&self, ids: &[usize]) -> Batch {
        let pairs: Vec<(&[u32], &[u32])> = ids.iter().map(|&i| (&self.src[i][..], &self.tgt[i][..])).collect();
        Batch::new(&pairs)
    }
}

#[derive(Debug, Clone)]
struct BatchCursor {
    ids: Vec<usize>,
    batches: Vec<Vec<usize>>,
    next: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub examples: usize,
    pub tokens: usize,
}

/// Everything that evolves during training: parameters, Adam moments, the
/// global step, the learning-rate origin and the RNG.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParameters,
    pub adam: AdamState,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Step at which the current warm-up started.
    pub lr_origin: u64,
    pub schedule: LrSchedule,
    pub max_tokens: usize,
    pub(crate) rng: ChaCha8Rng,
    cursor: Option<BatchCursor>,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.adam == other.adam
            && self.step == other.step
            && self.lr_origin == other.lr_origin
            && self.schedule == other.schedule
            && self.max_tokens == other.max_tokens
            && self.rng == other.rng
    }
}

impl TrainState {
    pub fn new(params: ModelParameters, schedule: LrSchedule, max_tokens: usize, seed: u64) -> Self {
        let adam = AdamState::new(&params.tensors);
        Self {
            params,
            adam,
            step: 0,
            lr_origin: 0,
            schedule,
            max_tokens,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: None,
        }
    }

    pub(crate) fn from_parts(
        params: ModelParameters,
        adam: AdamState,
        step: u64,
        lr_origin: u64,
        schedule: LrSchedule,
        max_tokens: usize,
        rng: ChaCha8Rng,
    ) -> Self {
        Self {
            params,
            adam,
            step,
            lr_origin,
            schedule,
            max_tokens,
            rng,
            cursor: None,
        }
    }

    /// Restarts the learning-rate warm-up from the current step.
    pub fn restart_warmup(&mut self) {
        self.lr_origin = self.step;
    }

    /// Learning rate the next step will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.at(self.step + 1 - self.lr_origin)
    }

    fn next_batch(&mut self, ids: &[usize], data: &EncodedCorpus) -> Result<Vec<usize>> {
        let mut key = ids.to_vec();
        key.sort_unstable();
        key.dedup();
        let stale = match &self.cursor {
            Some(c) => c.ids != key || c.next >= c.batches.len(),
            None => true,
        };
        if stale {
            let seed: u64 = self.rng.gen();
            let batches = make_batches(&key, &data.corpus, self.max_tokens, seed)?;
            self.cursor = Some(BatchCursor {
                ids: key,
                batches,
                next: 0,
            });
        }
        let cursor = self.cursor.as_mut().expect("cursor initialized");
        let batch = cursor.batches[cursor.next].clone();
        cursor.next += 1;
        Ok(batch)
    }

    /// Runs `n` optimizer steps on batches drawn from `ids`, reshuffling at
    /// every epoch boundary or whenever the id set changes.
    pub fn train_steps(
        &mut self,
        ids: &[usize],
        data: &EncodedCorpus,
        n: usize,
        on_step: &mut dyn FnMut(&StepInfo),
    ) -> Result<()> {
        if n == 0 {
            return Ok(());
        }
        if ids.is_empty() {
            return Err(Error::Argument("cannot train on an empty id set".into()));
        }
        for _ in 0..n {
            let batch_ids = self.next_batch(ids, data)?;
            let batch = data.batch(&batch_ids);
            let (out, grads) = grad(&self.params, &batch, Some(&mut self.rng))?;
            let lr = self.next_lr();
            self.adam
                .step(&mut self.params.tensors, &grads, lr)
                .map_err(|e| e.context(format!("optimizer step {}", self.step + 1)))?;
            self.step += 1;
            if !self.params.is_finite() {
                return Err(Error::NonFinite(format!("parameters after step {}", self.step)));
            }
            on_step(&StepInfo {
                step: self.step,
                loss: out.mean,
                lr,
                examples: batch_ids.len(),
                tokens: out.tokens,
            });
        }
        Ok(())
    }
}
