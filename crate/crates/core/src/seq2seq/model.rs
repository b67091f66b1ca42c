//! One-layer GRU encoder-decoder with single-head dot-product attention.
//!
//! Encoder: `h_s = GRU(emb_src(x_s), h_{s-1})` over the source followed by EOS.
//! Decoder: `s_t = GRU(emb_tgt(y_{t-1}), s_{t-1})` from the final encoder
//! state, `c_t = attend(s_t, h)`, `o_t = tanh([s_t; c_t] W_c + b_c)` and
//! `logits_t = o_t W_o + b_o`.
//!
//! Parameter tensors, in checkpoint order:
//!
//! | # | name       | shape      |
//! |---|------------|------------|
//! | 0 | src_emb    | Vs x E     |
//! | 1 | tgt_emb    | Vt x E     |
//! | 2 | enc_w_ih   | E x 3H     |
//! | 3 | enc_w_hh   | H x 3H     |
//! | 4 | enc_b_ih   | 1 x 3H     |
//! | 5 | enc_b_hh   | 1 x 3H     |
//! | 6 | dec_w_ih   | E x 3H     |
//! | 7 | dec_w_hh   | H x 3H     |
//! | 8 | dec_b_ih   | 1 x 3H     |
//! | 9 | dec_b_hh   | 1 x 3H     |
//! | 10| comb_w     | 2H x H     |
//! | 11| comb_b     | 1 x H      |
//! | 12| out_w      | H x Vt     |
//! | 13| out_b      | 1 x Vt     |
//!
//! GRU gate blocks are ordered reset, update, candidate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{GruWeights, NodeId, Tape};
use super::tensor::Matrix;
use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};

pub const SRC_EMB: usize = 0;
pub const TGT_EMB: usize = 1;
pub const ENC_W_IH: usize = 2;
pub const ENC_W_HH: usize = 3;
pub const ENC_B_IH: usize = 4;
pub const ENC_B_HH: usize = 5;
pub const DEC_W_IH: usize = 6;
pub const DEC_W_HH: usize = 7;
pub const DEC_B_IH: usize = 8;
pub const DEC_B_HH: usize = 9;
pub const COMB_W: usize = 10;
pub const COMB_B: usize = 11;
pub const OUT_W: usize = 12;
pub const OUT_B: usize = 13;
pub const NUM_TENSORS: usize = 14;

pub const TENSOR_NAMES: [&str; NUM_TENSORS] = [
    "src_emb", "tgt_emb", "enc_w_ih", "enc_w_hh", "enc_b_ih", "enc_b_hh", "dec_w_ih", "dec_w_hh",
    "dec_b_ih", "dec_b_hh", "comb_w", "comb_b", "out_w", "out_b",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_decode_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.src_vocab == 0 || self.tgt_vocab < 2 || self.emb_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn tensor_shapes(&self) -> [(usize, usize); NUM_TENSORS] {
        let (e, h) = (self.emb_dim, self.hidden_dim);
        [
            (self.src_vocab, e),
            (self.tgt_vocab, e),
            (e, 3 * h),
            (h, 3 * h),
            (1, 3 * h),
            (1, 3 * h),
            (e, 3 * h),
            (h, 3 * h),
            (1, 3 * h),
            (1, 3 * h),
            (2 * h, h),
            (1, h),
            (h, self.tgt_vocab),
            (1, self.tgt_vocab),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub tensors: Vec<Matrix>,
}

pub type Gradients = Vec<Matrix>;

impl ModelParameters {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            tensors: config
                .tensor_shapes()
                .iter()
                .map(|&(r, c)| Matrix::zeros(r, c))
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let shapes = self.config.tensor_shapes();
        if self.tensors.len() != NUM_TENSORS {
            return Err(Error::Incompatible(format!(
                "expected {NUM_TENSORS} tensors, found {}",
                self.tensors.len()
            )));
        }
        for (i, (t, s)) in self.tensors.iter().zip(shapes).enumerate() {
            if t.shape() != s {
                return Err(Error::Incompatible(format!(
                    "tensor {} has shape {:?}, expected {s:?}",
                    TENSOR_NAMES[i],
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Uniform weights in `±1/sqrt(fan_in)`, embeddings in `±0.5`, zero biases and
/// a zero PAD embedding row.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParameters::zeros(config);
    for (i, t) in params.tensors.iter_mut().enumerate() {
        let bound = match i {
            SRC_EMB | TGT_EMB => 0.5,
            ENC_B_IH | ENC_B_HH | DEC_B_IH | DEC_B_HH | COMB_B | OUT_B => continue,
            _ => 1.0 / (t.rows as f64).sqrt(),
        };
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
    for emb in [SRC_EMB, TGT_EMB] {
        params.tensors[emb].row_mut(PAD as usize).fill(0.0);
    }
    Ok(params)
}

/// A padded batch in time-major layout.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    /// Source ids per position (source plus EOS, PAD beyond).
    pub src: Vec<Vec<u32>>,
    /// B x S, 1.0 on real source positions.
    pub src_mask: Matrix,
    /// Decoder inputs per step: BOS then the target.
    pub dec_in: Vec<Vec<u32>>,
    /// Decoder outputs per step: the target then EOS, PAD beyond.
    pub dec_out: Vec<Vec<u32>>,
}

impl Batch {
    pub fn new<S: AsRef<[u32]>, T: AsRef<[u32]>>(pairs: &[(S, T)]) -> Self {
        let b = pairs.len();
        let s_len = pairs.iter().map(|(s, _)| s.as_ref().len() + 1).max().unwrap_or(0);
        let t_len = pairs.iter().map(|(_, t)| t.as_ref().len() + 1).max().unwrap_or(0);
        let mut src = vec![vec![PAD; b]; s_len];
        let mut src_mask = Matrix::zeros(b, s_len);
        let mut dec_in = vec![vec![PAD; b]; t_len];
        let mut dec_out = vec![vec![PAD; b]; t_len];
        for (row, (s, t)) in pairs.iter().enumerate() {
            let (s, t) = (s.as_ref(), t.as_ref());
            for (pos, &id) in s.iter().chain(std::iter::once(&EOS)).enumerate() {
                src[pos][row] = id;
                *src_mask.at_mut(row, pos) = 1.0;
            }
            dec_in[0][row] = BOS;
            for (pos, &id) in t.iter().enumerate() {
                dec_in[pos + 1][row] = id;
                dec_out[pos][row] = id;
            }
            dec_out[t.len()][row] = EOS;
        }
        Batch {
            size: b,
            src,
            src_mask,
            dec_in,
            dec_out,
        }
    }

    fn check_ids(&self, config: &ModelConfig) -> Result<()> {
        let bad = |rows: &[Vec<u32>], v: usize| rows.iter().flatten().find(|&&i| i as usize >= v).copied();
        if let Some(id) = bad(&self.src, config.src_vocab) {
            return Err(Error::Argument(format!("source id {id} outside vocabulary of {}", config.src_vocab)));
        }
        if let Some(id) = bad(&self.dec_in, config.tgt_vocab).or(bad(&self.dec_out, config.tgt_vocab)) {
            return Err(Error::Argument(format!("target id {id} outside vocabulary of {}", config.tgt_vocab)));
        }
        Ok(())
    }
}

struct Handles {
    src_emb: NodeId,
    tgt_emb: NodeId,
    enc: GruWeights,
    dec: GruWeights,
    comb_w: NodeId,
    comb_b: NodeId,
    out_w: NodeId,
    out_b: NodeId,
}

impl Handles {
    fn register(tape: &mut Tape<'_>) -> Self {
        let ids: Vec<NodeId> = (0..NUM_TENSORS).map(|i| tape.param(i)).collect();
        Handles {
            src_emb: ids[SRC_EMB],
            tgt_emb: ids[TGT_EMB],
            enc: GruWeights {
                w_ih: ids[ENC_W_IH],
                w_hh: ids[ENC_W_HH],
                b_ih: ids[ENC_B_IH],
                b_hh: ids[ENC_B_HH],
            },
            dec: GruWeights {
                w_ih: ids[DEC_W_IH],
                w_hh: ids[DEC_W_HH],
                b_ih: ids[DEC_B_IH],
                b_hh: ids[DEC_B_HH],
            },
            comb_w: ids[COMB_W],
            comb_b: ids[COMB_B],
            out_w: ids[OUT_W],
            out_b: ids[OUT_B],
        }
    }
}

struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if self.rate == 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(x).data.len();
        let mask = (0..n)
            .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        tape.dropout(x, mask)
    }
}

struct Encoded {
    memory: Vec<NodeId>,
    final_state: NodeId,
}

fn encode(tape: &mut Tape<'_>, h: &Handles, batch: &Batch, hidden: usize, drop: &mut Dropout<'_>) -> Encoded {
    let mut state = tape.constant(Matrix::zeros(batch.size, hidden));
    let mut memory = Vec::with_capacity(batch.src.len());
    for (pos, ids) in batch.src.iter().enumerate() {
        let x = tape.embed(h.src_emb, ids);
        let x = drop.apply(tape, x);
        let mask: Vec<f64> = (0..batch.size).map(|r| batch.src_mask.at(r, pos)).collect();
        state = tape.gru(x, state, h.enc, Some(mask));
        memory.push(state);
    }
    Encoded {
        memory,
        final_state: state,
    }
}

/// One decoder step; returns the new state and the attentional output.
fn decoder_step(
    tape: &mut Tape<'_>,
    h: &Handles,
    prev: &[u32],
    state: NodeId,
    enc: &Encoded,
    src_mask: &Matrix,
    drop: &mut Dropout<'_>,
) -> (NodeId, NodeId) {
    let x = tape.embed(h.tgt_emb, prev);
    let x = drop.apply(tape, x);
    let s = tape.gru(x, state, h.dec, None);
    let ctx = tape.attend(s, &enc.memory, src_mask);
    let joined = tape.concat(s, ctx);
    let pre = tape.affine(joined, h.comb_w, h.comb_b);
    let o = tape.tanh(pre);
    let o = drop.apply(tape, o);
    (s, o)
}

/// Output of a teacher-forced loss computation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Label-smoothed cross-entropy averaged over non-PAD target tokens.
    pub mean: f64,
    /// Unsmoothed `-log P(y|x)` summed over each example's tokens (EOS included).
    pub per_example: Vec<f64>,
    pub tokens: usize,
}

fn build_loss<'p>(
    params: &'p ModelParameters,
    batch: &Batch,
    rng: Option<&mut ChaCha8Rng>,
) -> (Tape<'p>, NodeId) {
    let cfg = &params.config;
    let mut tape = Tape::new(&params.tensors);
    let h = Handles::register(&mut tape);
    let mut drop = Dropout {
        rate: cfg.dropout,
        rng,
    };
    let enc = encode(&mut tape, &h, batch, cfg.hidden_dim, &mut drop);
    let mut state = enc.final_state;
    let mut outputs = Vec::with_capacity(batch.dec_in.len());
    for prev in &batch.dec_in {
        let (s, o) = decoder_step(&mut tape, &h, prev, state, &enc, &batch.src_mask, &mut drop);
        state = s;
        outputs.push(o);
    }
    let stacked = tape.stack_rows(&outputs);
    let logits = tape.affine(stacked, h.out_w, h.out_b);
    let targets: Vec<u32> = batch.dec_out.iter().flatten().copied().collect();
    let loss = tape.cross_entropy(logits, &targets, cfg.label_smoothing);
    (tape, loss)
}

fn loss_output(tape: &Tape<'_>, loss: NodeId, batch: &Batch) -> LossOutput {
    let nll = tape.row_nll(loss);
    let mut per_example = vec![0.0; batch.size];
    let mut tokens = 0;
    for (t, outs) in batch.dec_out.iter().enumerate() {
        for (b, &id) in outs.iter().enumerate() {
            if id != PAD {
                per_example[b] += nll[t * batch.size + b];
                tokens += 1;
            }
        }
    }
    LossOutput {
        mean: tape.value(loss).data[0],
        per_example,
        tokens,
    }
}

/// Teacher-forced loss with dropout off.
pub fn batch_loss(params: &ModelParameters, batch: &Batch) -> Result<LossOutput> {
    batch.check_ids(&params.config)?;
    let (tape, loss) = build_loss(params, batch, None);
    Ok(loss_output(&tape, loss, batch))
}

/// Loss and exact gradients of the mean loss. Dropout is applied only when an
/// RNG is supplied.
pub fn grad(params: &ModelParameters, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<(LossOutput, Gradients)> {
    if batch.size == 0 {
        return Err(Error::Argument("cannot differentiate an empty batch".into()));
    }
    batch.check_ids(&params.config)?;
    let (tape, loss) = build_loss(params, batch, rng);
    let out = loss_output(&tape, loss, batch);
    let mut grads = tape.backward(loss);
    for emb in [SRC_EMB, TGT_EMB] {
        grads[emb].row_mut(PAD as usize).fill(0.0);
    }
    Ok((out, grads))
}

/// Teacher-forced logits for one source and a target prefix starting with BOS:
/// one row per prefix position.
pub fn forward(params: &ModelParameters, src: &[u32], prefix: &[u32]) -> Result<Matrix> {
    let cfg = &params.config;
    if prefix.first() != Some(&BOS) {
        return Err(Error::Argument("decoder prefix must start with BOS".into()));
    }
    if let Some(&id) = src.iter().find(|&&i| i as usize >= cfg.src_vocab) {
        return Err(Error::Argument(format!("source id {id} outside vocabulary of {}", cfg.src_vocab)));
    }
    if let Some(&id) = prefix.iter().find(|&&i| i as usize >= cfg.tgt_vocab) {
        return Err(Error::Argument(format!("target id {id} outside vocabulary of {}", cfg.tgt_vocab)));
    }
    let batch = Batch::new(&[(src, &[][..])]);
    let mut tape = Tape::new(&params.tensors);
    let h = Handles::register(&mut tape);
    let mut drop = Dropout { rate: 0.0, rng: None };
    let enc = encode(&mut tape, &h, &batch, cfg.hidden_dim, &mut drop);
    let mut state = enc.final_state;
    let mut rows = Vec::with_capacity(prefix.len());
    for &prev in prefix {
        let (s, o) = decoder_step(&mut tape, &h, &[prev], state, &enc, &batch.src_mask, &mut drop);
        state = s;
        rows.push(o);
    }
    let stacked = tape.stack_rows(&rows);
    let logits = tape.affine(stacked, h.out_w, h.out_b);
    Ok(tape.value(logits).clone())
}

/// Greedy (beam 1) decoding of a batch of sources. Each output stops before
/// EOS or at `max_len` tokens; ties go to the lowest id.
pub fn greedy_decode_batch<S: AsRef<[u32]>>(params: &ModelParameters, sources: &[S], max_len: usize) -> Result<Vec<Vec<u32>>> {
    let cfg = &params.config;
    let mut outputs = vec![Vec::new(); sources.len()];
    if sources.is_empty() || max_len == 0 {
        return Ok(outputs);
    }
    for (i, s) in sources.iter().enumerate() {
        if let Some(&id) = s.as_ref().iter().find(|&&x| x as usize >= cfg.src_vocab) {
            return Err(Error::Decode {
                id: i,
                message: format!("source id {id} outside vocabulary of {}", cfg.src_vocab),
            });
        }
    }
    let pairs: Vec<(&[u32], &[u32])> = sources.iter().map(|s| (s.as_ref(), &[][..])).collect();
    let batch = Batch::new(&pairs);
    let mut tape = Tape::new(&params.tensors);
    let h = Handles::register(&mut tape);
    let mut drop = Dropout { rate: 0.0, rng: None };
    let enc = encode(&mut tape, &h, &batch, cfg.hidden_dim, &mut drop);
    let mut state = enc.final_state;
    let mut prev = vec![BOS; batch.size];
    let mut done = vec![false; batch.size];
    for _ in 0..max_len {
        let (s, o) = decoder_step(&mut tape, &h, &prev, state, &enc, &batch.src_mask, &mut drop);
        state = s;
        let logits = tape.affine(o, h.out_w, h.out_b);
        let lv = tape.value(logits);
        for b in 0..batch.size {
            if done[b] {
                prev[b] = PAD;
                continue;
            }
            let next = argmax(lv.row(b));
            if next == EOS {
                done[b] = true;
                prev[b] = PAD;
            } else {
                outputs[b].push(next);
                prev[b] = next;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(outputs)
}

pub fn greedy_decode(params: &ModelParameters, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
    Ok(greedy_decode_batch(params, &[src], max_len)?.remove(0))
}

/// Index of the largest value, lowest index on ties.
fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}
