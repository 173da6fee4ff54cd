//! Small transformer encoder pre-trained with masked language modeling,
//! exposing the output of every layer.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{key_padding_mask, EmbeddingTable, FeedForward, JointAttentionBlock, LayerNorm, Linear, SinusoidalPositions};
use crate::data::{batch_iterator, Batch, EncodedPair, MASK, SPECIALS};
use crate::error::{Error, Result};
use crate::kernel::{ParamGroup, ParamStore, RngStream, Tape, Tensor, Var, WeightSet};
use crate::trainer::{AdamState, Checkpoint, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroBertConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab: usize,
}

impl MicroBertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::invalid("the pre-trained encoder needs at least one layer"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "encoder width {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab <= SPECIALS.len() {
            return Err(Error::invalid("vocabulary has no ordinary tokens"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-layer outputs `B_1 .. B_L`, each `[b x n x d]`, for one source batch.
/// Reads through [`BertStates::layer`] are logged.
pub struct BertStates<'t> {
    layers: Vec<Var<'t>>,
    pub src_mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
    reads: RefCell<Vec<bool>>,
}

impl<'t> BertStates<'t> {
    pub fn new(layers: Vec<Var<'t>>, src_mask: Vec<bool>, batch: usize, len: usize) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::invalid("no encoder layers"));
        };
        let shape = first.shape();
        if shape.len() != 3 || shape[0] != batch || shape[1] != len || layers.iter().any(|l| l.shape() != shape) {
            return Err(Error::invalid("encoder states disagree in shape"));
        }
        if src_mask.len() != batch * len {
            return Err(Error::invalid("source mask does not match the encoder states"));
        }
        let n = layers.len();
        Ok(BertStates {
            layers,
            src_mask,
            batch,
            len,
            reads: RefCell::new(vec![false; n]),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers[0].shape()[2]
    }

    pub fn layer(&self, i: usize) -> Var<'t> {
        self.reads.borrow_mut()[i] = true;
        self.layers[i]
    }

    /// Which layers have been read since construction.
    pub fn reads(&self) -> Vec<bool> {
        self.reads.borrow().clone()
    }

    /// Layer values without marking them as read.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers.iter().map(|l| (*l.value()).clone()).collect()
    }

    /// Re-introduces the states on `tape` as constants.
    pub fn detach_to<'u>(&self, tape: &'u Tape<'u>) -> BertStates<'u> {
        BertStates {
            layers: self.layers.iter().map(|l| tape.constant((*l.value()).clone())).collect(),
            src_mask: self.src_mask.clone(),
            batch: self.batch,
            len: self.len,
            reads: RefCell::new(vec![false; self.layers.len()]),
        }
    }

    /// Keeps the batch rows listed in `rows`, in that order.
    pub fn select_rows<'u>(&self, tape: &'u Tape<'u>, rows: &[usize]) -> BertStates<'u> {
        let (n, d) = (self.len, self.width());
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let v = l.value();
                let mut data = Vec::with_capacity(rows.len() * n * d);
                for &r in rows {
                    data.extend_from_slice(&v.data()[r * n * d..(r + 1) * n * d]);
                }
                tape.constant(Tensor::new(vec![rows.len(), n, d], data).expect("row selection"))
            })
            .collect();
        let mut src_mask = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            src_mask.extend_from_slice(&self.src_mask[r * n..(r + 1) * n]);
        }
        BertStates {
            layers,
            src_mask,
            batch: rows.len(),
            len: n,
            reads: RefCell::new(vec![false; self.layers.len()]),
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attention: JointAttentionBlock,
    attention_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
    dropout: f64,
}

/// The encoder stack without the pre-training head. Its parameters live in
/// whichever store it was built in, under `prefix`.
#[derive(Clone, Debug)]
pub struct BertEncoder {
    pub config: MicroBertConfig,
    embed: EmbeddingTable,
    positions: SinusoidalPositions,
    layers: Vec<EncoderLayer>,
}

impl BertEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &MicroBertConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Bert;
        let d = config.d_model;
        let embed = EmbeddingTable::new(store, &format!("{prefix}.embed"), g, config.vocab, d, rng)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let name = format!("{prefix}.layer{i}");
            layers.push(EncoderLayer {
                attention: JointAttentionBlock::new(store, &format!("{name}.attn"), g, d, config.n_heads, None, config.dropout, rng)?,
                attention_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), g, d)?,
                ffn: FeedForward::new(store, &format!("{name}.ffn"), g, d, config.d_ff, rng)?,
                ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), g, d)?,
                dropout: config.dropout,
            });
        }
        Ok(BertEncoder {
            config: config.clone(),
            embed,
            positions: SinusoidalPositions::new(d, config.max_len),
            layers,
        })
    }

    /// Runs `src [b x n]` (with `src_mask`, true = real token) through every
    /// layer and returns all layer outputs.
    pub fn encode_all_layers<'t>(
        &self,
        tape: &'t Tape<'t>,
        src: &[usize],
        src_mask: &[bool],
        batch: usize,
        len: usize,
    ) -> Result<BertStates<'t>> {
        if src.len() != batch * len || src_mask.len() != src.len() {
            return Err(Error::invalid("source ids do not match the batch shape"));
        }
        if len > self.config.max_len {
            return Err(Error::invalid(format!(
                "source length {len} exceeds the encoder maximum of {}",
                self.config.max_len
            )));
        }
        let mask = key_padding_mask(src_mask, batch, len)?;
        let x = self.embed.forward(tape, src, &[batch, len])?;
        let mut x = self.positions.encode(tape, x, 0)?.dropout(self.config.dropout);
        let mut outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = layer.attention.forward(tape, x, None, &mask, None)?.dropout(layer.dropout);
            let h = layer.attention_norm.forward(tape, a.add(&x)?)?;
            let f = layer.ffn.forward(tape, h)?.dropout(layer.dropout);
            x = layer.ffn_norm.forward(tape, f.add(&h)?)?;
            outputs.push(x);
        }
        BertStates::new(outputs, src_mask.to_vec(), batch, len)
    }

    /// Whether the encoder's parameters are currently trainable in `store`.
    pub fn is_trainable(&self, store: &ParamStore) -> bool {
        store.get(self.embed.weights).trainable()
    }

    /// Parameter names of this encoder inside its store.
    pub fn param_names(&self, store: &ParamStore) -> Vec<String> {
        let prefix = store.get(self.embed.weights).name().trim_end_matches(".embed.weight").to_string();
        store
            .iter()
            .map(|(_, p)| p.name().to_string())
            .filter(|n| n.starts_with(&format!("{prefix}.")))
            .collect()
    }
}

/// Pre-training hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmOptions {
    pub mask_rate: f64,
    pub batch_tokens: usize,
    pub schedule: LrSchedule,
}

impl Default for MlmOptions {
    fn default() -> Self {
        MlmOptions {
            mask_rate: 0.15,
            batch_tokens: 512,
            schedule: LrSchedule {
                warmup: 100,
                peak: 2e-3,
                floor: 1e-7,
            },
        }
    }
}

/// A pre-trained encoder together with its masked-token prediction head and
/// its own parameter store.
#[derive(Clone, Debug)]
pub struct MicroBert {
    pub store: ParamStore,
    pub encoder: BertEncoder,
    head: Linear,
}

pub const ENCODER_PREFIX: &str = "bert";

impl MicroBert {
    pub fn new(config: &MicroBertConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = BertEncoder::new(&mut store, ENCODER_PREFIX, config, rng)?;
        let head = Linear::new(&mut store, "mlm_head", ParamGroup::Bert, config.d_model, config.vocab, rng)?;
        Ok(MicroBert { store, encoder, head })
    }

    pub fn config(&self) -> &MicroBertConfig {
        &self.encoder.config
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Checkpoint {
            config: serde_json::to_value(self.config())?,
            meta: serde_json::json!({ "kind": "micro_bert" }),
            records: self.store.weights(),
        }
        .save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config: MicroBertConfig = serde_json::from_value(ck.config)?;
        config.validate()?;
        let mut bert = Self::new(&config, &mut RngStream::new(0, 0).rng())?;
        bert.store.load_weights(&ck.records)?;
        Ok(bert)
    }

    /// Encoder weights only (the prediction head is dropped).
    pub fn encoder_weights(&self) -> WeightSet {
        let all = self.store.weights();
        let mut ws = WeightSet::default();
        for (n, t) in all.names.into_iter().zip(all.tensors) {
            if n.starts_with(&format!("{ENCODER_PREFIX}.")) {
                ws.names.push(n);
                ws.tensors.push(t);
            }
        }
        ws
    }

    /// Mean cross-entropy over the labelled positions of a corrupted batch,
    /// and the number of correct argmax predictions.
    fn mlm_loss<'t>(&self, tape: &'t Tape<'t>, batch: &Batch, corrupted: &[usize], labels: &[Option<usize>]) -> Result<(Var<'t>, usize)> {
        let states = self
            .encoder
            .encode_all_layers(tape, corrupted, &batch.src_mask, batch.size, batch.src_len)?;
        let top = states.layer(states.n_layers() - 1);
        let flat = top.reshape(&[batch.size * batch.src_len, self.config().d_model])?;
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        let targets: Vec<Option<usize>> = rows.iter().map(|&i| labels[i]).collect();
        let picked = tape.gather(flat, &rows, &[rows.len()])?;
        let logits = self.head.forward(tape, picked)?;
        let v = logits.value();
        let vocab = self.config().vocab;
        let correct = targets
            .iter()
            .enumerate()
            .filter(|(r, t)| {
                let row = &v.data()[r * vocab..(r + 1) * vocab];
                argmax(row) == t.expect("labelled")
            })
            .count();
        Ok((logits.cross_entropy(&targets, 0.0)?, correct))
    }

    /// Held-out loss and masked-token accuracy with masks drawn from `stream`.
    pub fn evaluate(&self, corpus: &[Vec<usize>], mask_rate: f64, batch_tokens: usize, stream: RngStream) -> Result<MlmReport> {
        let pairs = to_pairs(corpus, self.config().vocab)?;
        let batches = batch_iterator(&pairs, batch_tokens, None)?;
        let mut rng = stream.rng();
        let (mut loss_sum, mut correct, mut total) = (0.0, 0usize, 0usize);
        for batch in &batches {
            let (corrupted, labels) = corrupt_batch(batch, mask_rate, self.config().vocab, &mut rng)?;
            let tape = Tape::new(&self.store);
            let (loss, ok) = self.mlm_loss(&tape, batch, &corrupted, &labels)?;
            let k = labels.iter().flatten().count();
            loss_sum += loss.value().item() * k as f64;
            correct += ok;
            total += k;
        }
        Ok(MlmReport {
            loss: loss_sum / total as f64,
            accuracy: correct as f64 / total as f64,
            masked: total,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    pub loss: f64,
    pub accuracy: f64,
    pub masked: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Selects each position with probability `mask_rate`; a selected position
/// becomes MASK (80%), a random ordinary token (10%) or stays (10%).
/// Labels hold the original token at selected positions only.
pub fn mask_tokens(seq: &[usize], mask_rate: f64, vocab: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    if seq.is_empty() {
        return Err(Error::invalid("cannot mask an empty sequence"));
    }
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::invalid(format!("mask rate {mask_rate} outside (0, 1)")));
    }
    if vocab <= SPECIALS.len() {
        return Err(Error::invalid("vocabulary has no ordinary tokens"));
    }
    let mut out = seq.to_vec();
    let mut labels = vec![None; seq.len()];
    for (i, &tok) in seq.iter().enumerate() {
        if rng.random::<f64>() >= mask_rate {
            continue;
        }
        labels[i] = Some(tok);
        let r: f64 = rng.random();
        if r < 0.8 {
            out[i] = MASK;
        } else if r < 0.9 {
            out[i] = rng.random_range(SPECIALS.len()..vocab);
        }
    }
    Ok((out, labels))
}

/// Masks every row of `batch`; guarantees at least one labelled position.
fn corrupt_batch(batch: &Batch, mask_rate: f64, vocab: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let n = batch.src_len;
    let mut corrupted = batch.src.clone();
    let mut labels = vec![None; batch.src.len()];
    for r in 0..batch.size {
        let len = batch.src_mask[r * n..(r + 1) * n].iter().filter(|&&m| m).count();
        let (c, l) = mask_tokens(&batch.src[r * n..r * n + len], mask_rate, vocab, rng)?;
        corrupted[r * n..r * n + len].copy_from_slice(&c);
        labels[r * n..r * n + len].clone_from_slice(&l);
    }
    if labels.iter().all(Option::is_none) {
        let i = rng.random_range(0..batch.src_mask.iter().filter(|&&m| m).count());
        let pos = (0..labels.len()).filter(|&p| batch.src_mask[p]).nth(i).expect("real token");
        labels[pos] = Some(batch.src[pos]);
        corrupted[pos] = MASK;
    }
    Ok((corrupted, labels))
}

fn to_pairs(corpus: &[Vec<usize>], vocab: usize) -> Result<Vec<EncodedPair>> {
    if corpus.is_empty() {
        return Err(Error::Data("empty pre-training corpus".into()));
    }
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.is_empty() {
                return Err(Error::Data(format!("pre-training sentence {i} is empty")));
            }
            if let Some(t) = s.iter().find(|&&t| t >= vocab) {
                return Err(Error::Data(format!("pre-training sentence {i} has token {t} outside the vocabulary")));
            }
            Ok(EncodedPair {
                src: s.clone(),
                tgt: Vec::new(),
            })
        })
        .collect()
}

/// Trains a fresh encoder for `steps` updates on `corpus`. Initialization
/// draws from `stream`, epoch `e` shuffles and masks from `stream.child(e + 1)`.
pub fn pretrain_mlm(
    corpus: &[Vec<usize>],
    config: &MicroBertConfig,
    steps: u64,
    options: &MlmOptions,
    stream: RngStream,
) -> Result<MicroBert> {
    pretrain_mlm_logged(corpus, config, steps, options, stream, |_, _| {})
}

/// [`pretrain_mlm`] that reports `(step, loss)` after every update.
pub fn pretrain_mlm_logged(
    corpus: &[Vec<usize>],
    config: &MicroBertConfig,
    steps: u64,
    options: &MlmOptions,
    stream: RngStream,
    mut log: impl FnMut(u64, f64),
) -> Result<MicroBert> {
    config.validate()?;
    let pairs = to_pairs(corpus, config.vocab)?;
    let mut model = MicroBert::new(config, &mut stream.child(0).rng())?;
    let mut adam = AdamState::new();
    let mut step = 0;
    let mut epoch = 0;
    while step < steps {
        epoch += 1;
        let mut rng = stream.child(epoch).rng();
        let batches = batch_iterator(&pairs, options.batch_tokens, Some(&mut rng))?;
        for batch in &batches {
            if step >= steps {
                break;
            }
            step += 1;
            let (corrupted, labels) = corrupt_batch(batch, options.mask_rate, config.vocab, &mut rng)?;
            let dropout_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let grads = {
                let tape = Tape::training(&model.store, dropout_rng);
                let (loss, _) = model.mlm_loss(&tape, batch, &corrupted, &labels)?;
                let l = loss.value().item();
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("pre-training loss at step {step} is {l}")));
                }
                log(step, l);
                tape.backward(loss)?
            };
            model.store.zero_grad();
            model.store.accumulate(grads.params());
            adam.step(&mut model.store, options.schedule.lr_at(step)?)?;
        }
    }
    Ok(model)
}
