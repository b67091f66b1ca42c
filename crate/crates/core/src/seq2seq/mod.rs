//! The translator used both as the vanilla scorer and as the curriculum
//! learner.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::{average_checkpoints, load_checkpoint, save_checkpoint};
pub use model::{
    batch_loss, forward, grad, greedy_decode, greedy_decode_batch, init_model, Batch, Gradients, LossOutput,
    ModelConfig, ModelParameters,
};
pub use optim::{lr_schedule, AdamState, LrSchedule};
pub use tensor::Matrix;
pub use train::{EncodedCorpus, StepInfo, TrainState};

use crate::corpus::{decode, encode, Vocabulary};
use crate::error::Result;
use crate::translate::Translator;

/// Greedy decoding with frozen parameters, over token strings.
#[derive(Debug, Clone, Copy)]
pub struct ModelTranslator<'a> {
    pub params: &'a ModelParameters,
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
    pub max_len: usize,
    /// Sentences decoded per padded batch.
    pub batch_size: usize,
}

impl Translator for ModelTranslator<'_> {
    fn translate_batch(&self, sources: &[&[String]]) -> Result<Vec<Vec<String>>> {
        let mut out = Vec::with_capacity(sources.len());
        for (chunk_no, chunk) in sources.chunks(self.batch_size.max(1)).enumerate() {
            let ids: Vec<Vec<u32>> = chunk.iter().map(|s| encode(s, self.src_vocab)).collect();
            let decoded = greedy_decode_batch(self.params, &ids, self.max_len).map_err(|e| match e {
                crate::Error::Decode { id, message } => crate::Error::Decode {
                    id: id + chunk_no * self.batch_size.max(1),
                    message,
                },
                other => other,
            })?;
            out.extend(decoded.iter().map(|h| decode(h, self.tgt_vocab)));
        }
        Ok(out)
    }
}
