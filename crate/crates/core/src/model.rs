//! The translation model: an encoder and a decoder whose attention blocks
//! attend jointly over their own sequence and a per-layer combination of
//! the pre-trained encoder's layer outputs.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    causal_mask, join_masks, key_padding_mask, AttnScale, CombinerKind, EmbeddingTable, FeedForward, GluCombiner,
    JointAttentionBlock, KeyValues, LayerNorm, Linear, SinusoidalPositions,
};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::kernel::{Mask, ParamGroup, ParamStore, Tape, Tensor, Var, WeightSet};
use crate::microbert::{BertEncoder, BertStates, MicroBert, MicroBertConfig, ENCODER_PREFIX};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub attn_scale: AttnScale,
    pub combiner: CombinerKind,
    /// Without the pre-trained encoder every joint attention degenerates to
    /// self-attention (the plain Transformer baseline).
    pub use_bert: bool,
    /// Whether the encoder-decoder term also attends to decoder positions.
    pub encdec_self_keys: bool,
    pub label_smoothing: f64,
    pub bert: MicroBertConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::invalid("model needs at least one layer"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label smoothing must lie in [0, 1)"));
        }
        if self.use_bert {
            self.bert.validate()?;
            if self.bert.vocab != self.src_vocab {
                return Err(Error::invalid("the pre-trained encoder must share the source vocabulary"));
            }
        }
        Ok(())
    }
}

/// Training stage and whether the warmup doubling has been folded into the
/// combiner weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase: u8,
    pub folded: bool,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    glu: Option<GluCombiner>,
    attention: JointAttentionBlock,
    attention_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    glu: Option<GluCombiner>,
    bert_attention: JointAttentionBlock,
    encoder_attention: JointAttentionBlock,
    attention_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct BertJamModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    bert: Option<BertEncoder>,
    src_embed: EmbeddingTable,
    tgt_embed: EmbeddingTable,
    positions: SinusoidalPositions,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    output: Linear,
    state: PhaseState,
}

/// Keys and values as plain tensors, for reuse across decoding steps.
#[derive(Clone, Debug)]
struct CachedKv {
    keys: Tensor,
    values: Tensor,
}

impl CachedKv {
    fn of(kv: &KeyValues<'_>) -> Self {
        CachedKv {
            keys: (*kv.keys.value()).clone(),
            values: (*kv.values.value()).clone(),
        }
    }

    fn on<'t>(&self, tape: &'t Tape<'t>) -> KeyValues<'t> {
        KeyValues {
            keys: tape.constant(self.keys.clone()),
            values: tape.constant(self.values.clone()),
        }
    }

    fn select(&self, rows: &[usize]) -> Self {
        CachedKv {
            keys: select_rows(&self.keys, rows),
            values: select_rows(&self.values, rows),
        }
    }
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let stride = t.numel() / t.shape()[0].max(1);
    let mut data = Vec::with_capacity(rows.len() * stride);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("row selection")
}

#[derive(Clone, Debug)]
struct LayerCache {
    bert_self: Option<CachedKv>,
    encoder_self: Option<CachedKv>,
    bert_memory: Option<CachedKv>,
    encoder_memory: CachedKv,
}

/// Incremental decoding state for a batch of source sentences: projected
/// memories per decoder layer and the self-attention keys of every target
/// position decoded so far.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    batch: usize,
    src_len: usize,
    src_mask: Vec<bool>,
    steps: usize,
    layers: Vec<LayerCache>,
}

impl DecoderCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Keeps (and possibly repeats) the rows listed in `rows`.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let n = self.src_len;
        let mut src_mask = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            src_mask.extend_from_slice(&self.src_mask[r * n..(r + 1) * n]);
        }
        DecoderCache {
            batch: rows.len(),
            src_len: n,
            src_mask,
            steps: self.steps,
            layers: self
                .layers
                .iter()
                .map(|l| LayerCache {
                    bert_self: l.bert_self.as_ref().map(|c| c.select(rows)),
                    encoder_self: l.encoder_self.as_ref().map(|c| c.select(rows)),
                    bert_memory: l.bert_memory.as_ref().map(|c| c.select(rows)),
                    encoder_memory: l.encoder_memory.select(rows),
                })
                .collect(),
        }
    }
}

impl BertJamModel {
    /// Builds a model with freshly initialized weights (including the
    /// pre-trained encoder's) and applies phase 1.
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let g = ParamGroup::EncDec;
        let d = config.d_model;
        let bert = if config.use_bert {
            Some(BertEncoder::new(&mut store, ENCODER_PREFIX, &config.bert, rng)?)
        } else {
            None
        };
        let bert_width = config.use_bert.then_some(config.bert.d_model);
        let glu = |store: &mut ParamStore, name: String| -> Result<Option<GluCombiner>> {
            if config.use_bert {
                Ok(Some(GluCombiner::new(store, &name, config.combiner, config.bert.n_layers)?))
            } else {
                Ok(None)
            }
        };
        let src_embed = EmbeddingTable::new(&mut store, "src_embed", g, config.src_vocab, d, rng)?;
        let tgt_embed = EmbeddingTable::new(&mut store, "tgt_embed", g, config.tgt_vocab, d, rng)?;
        let mut encoder = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let name = format!("encoder.{i}");
            let mut attention =
                JointAttentionBlock::new(&mut store, &format!("{name}.attn"), g, d, config.n_heads, bert_width, config.dropout, rng)?;
            attention.scale = config.attn_scale;
            encoder.push(EncoderLayer {
                glu: glu(&mut store, format!("{name}.glu"))?,
                attention,
                attention_norm: LayerNorm::new(&mut store, &format!("{name}.attn_norm"), g, d)?,
                ffn: FeedForward::new(&mut store, &format!("{name}.ffn"), g, d, config.d_ff, rng)?,
                ffn_norm: LayerNorm::new(&mut store, &format!("{name}.ffn_norm"), g, d)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let name = format!("decoder.{i}");
            let mut bert_attention =
                JointAttentionBlock::new(&mut store, &format!("{name}.bert_attn"), g, d, config.n_heads, bert_width, config.dropout, rng)?;
            let mut encoder_attention =
                JointAttentionBlock::new(&mut store, &format!("{name}.enc_attn"), g, d, config.n_heads, Some(d), config.dropout, rng)?;
            bert_attention.scale = config.attn_scale;
            encoder_attention.scale = config.attn_scale;
            decoder.push(DecoderLayer {
                glu: glu(&mut store, format!("{name}.glu"))?,
                bert_attention,
                encoder_attention,
                attention_norm: LayerNorm::new(&mut store, &format!("{name}.attn_norm"), g, d)?,
                ffn: FeedForward::new(&mut store, &format!("{name}.ffn"), g, d, config.d_ff, rng)?,
                ffn_norm: LayerNorm::new(&mut store, &format!("{name}.ffn_norm"), g, d)?,
            });
        }
        let output = Linear::new(&mut store, "output", g, d, config.tgt_vocab, rng)?;
        let mut model = BertJamModel {
            config: config.clone(),
            store,
            bert,
            src_embed,
            tgt_embed,
            positions: SinusoidalPositions::new(d, config.max_len),
            encoder,
            decoder,
            output,
            state: PhaseState { phase: 1, folded: false },
        };
        model.set_phase(1)?;
        Ok(model)
    }

    /// Builds a model around a pre-trained encoder.
    pub fn with_bert(config: &ModelConfig, bert: &MicroBert, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !config.use_bert {
            return Err(Error::invalid("model is configured without the pre-trained encoder"));
        }
        if *bert.config() != config.bert {
            return Err(Error::invalid("pre-trained encoder configuration differs from the model's"));
        }
        let mut model = Self::new(config, rng)?;
        model.load_bert(bert)?;
        Ok(model)
    }

    /// Copies the pre-trained encoder's weights into this model.
    pub fn load_bert(&mut self, bert: &MicroBert) -> Result<()> {
        let weights = bert.encoder_weights();
        for (name, t) in weights.names.iter().zip(&weights.tensors) {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter mismatch at `{name}`")))?;
            if self.store.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("parameter mismatch at `{name}`")));
            }
            *self.store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn phase_state(&self) -> PhaseState {
        self.state
    }

    fn combiners_mut(&mut self) -> impl Iterator<Item = &mut GluCombiner> {
        self.encoder
            .iter_mut()
            .filter_map(|l| l.glu.as_mut())
            .chain(self.decoder.iter_mut().filter_map(|l| l.glu.as_mut()))
    }

    /// Phase 1 trains only the translation layers with the combiners at
    /// their initialization (doubled output); phase 2 also trains the
    /// combiners, after folding the doubling into their weights; phase 3
    /// trains everything.
    pub fn set_phase(&mut self, phase: u8) -> Result<()> {
        match phase {
            1 if self.state.folded => {
                return Err(Error::invalid("cannot return to phase 1 after the combiners were folded"));
            }
            1 => {}
            2 | 3 => {
                let mut store = std::mem::take(&mut self.store);
                self.combiners_mut().for_each(|c| c.fold_compensation(&mut store));
                self.store = store;
                self.state.folded = true;
            }
            other => return Err(Error::invalid(format!("invalid phase {other}"))),
        }
        self.apply_flags(phase);
        self.state.phase = phase;
        Ok(())
    }

    fn apply_flags(&mut self, phase: u8) {
        self.store.set_group_trainable(ParamGroup::EncDec, true);
        self.store.set_group_trainable(ParamGroup::Glu, phase >= 2);
        self.store.set_group_trainable(ParamGroup::Bert, phase >= 3);
    }

    /// Restores a saved phase without touching weights (which already carry
    /// any folding).
    pub fn restore_phase_state(&mut self, state: PhaseState) -> Result<()> {
        if !(1..=3).contains(&state.phase) || (state.phase > 1 && !state.folded) {
            return Err(Error::Checkpoint(format!("inconsistent phase state {state:?}")));
        }
        let folded = state.folded;
        self.combiners_mut()
            .for_each(|c| c.compensation_active = c.kind == CombinerKind::Gated && !folded);
        self.apply_flags(state.phase);
        self.state = state;
        Ok(())
    }

    /// Pre-trained encoder states for `src [b x n]`. While the encoder is
    /// frozen it runs in evaluation mode on a side tape and its outputs
    /// enter `tape` as constants.
    pub fn bert_states<'t>(
        &self,
        tape: &'t Tape<'t>,
        src: &[usize],
        src_mask: &[bool],
        batch: usize,
        len: usize,
    ) -> Result<Option<BertStates<'t>>> {
        let Some(bert) = &self.bert else {
            return Ok(None);
        };
        let store = tape.store().ok_or_else(|| Error::invalid("model evaluated on a detached tape"))?;
        if bert.is_trainable(store) {
            return bert.encode_all_layers(tape, src, src_mask, batch, len).map(Some);
        }
        let side = Tape::new(store);
        let states = bert.encode_all_layers(&side, src, src_mask, batch, len)?;
        Ok(Some(states.detach_to(tape)))
    }

    fn combine<'t>(&self, tape: &'t Tape<'t>, glu: &Option<GluCombiner>, states: Option<&BertStates<'t>>) -> Result<Option<Var<'t>>> {
        match (glu, states) {
            (Some(g), Some(s)) => g.combine(tape, s.n_layers(), |i| s.layer(i)).map(Some),
            (None, _) => Ok(None),
            (Some(_), None) => Err(Error::invalid("model expects pre-trained encoder states")),
        }
    }

    fn check_states(&self, states: Option<&BertStates<'_>>, batch: usize, len: usize) -> Result<()> {
        if let Some(s) = states {
            if s.batch != batch || s.len != len {
                return Err(Error::invalid(format!(
                    "encoder states are {}x{} but the source batch is {batch}x{len}",
                    s.batch, s.len
                )));
            }
        }
        Ok(())
    }

    /// Top encoder layer output `[b x n x d_model]`.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape<'t>,
        src: &[usize],
        src_mask: &[bool],
        batch: usize,
        len: usize,
        states: Option<&BertStates<'t>>,
    ) -> Result<Var<'t>> {
        self.check_states(states, batch, len)?;
        let mask = key_padding_mask(src_mask, batch, len)?;
        let p = self.config.dropout;
        let x = self.src_embed.forward(tape, src, &[batch, len])?;
        let mut x = self.positions.encode(tape, x, 0)?.dropout(p);
        for layer in &self.encoder {
            let secondary = self.combine(tape, &layer.glu, states)?;
            let a = layer.attention.forward(tape, x, secondary, &mask, Some(&mask))?.dropout(p);
            let h = layer.attention_norm.forward(tape, x.add(&a)?)?;
            let f = layer.ffn.forward(tape, h)?.dropout(p);
            x = layer.ffn_norm.forward(tape, h.add(&f)?)?;
        }
        Ok(x)
    }

    fn encdec_self_mask(&self, batch: usize, n_query: usize, n_key: usize, causal: bool) -> Mask {
        if !self.config.encdec_self_keys {
            return Mask::full(&[batch, n_query, n_key], false);
        }
        if causal {
            causal_mask(batch, n_query)
        } else {
            Mask::full(&[batch, n_query, n_key], true)
        }
    }

    /// Teacher-forced decoder: logits `[b x m x V]` for target inputs
    /// `tgt_in [b x m]` (BOS first).
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_forward<'t>(
        &self,
        tape: &'t Tape<'t>,
        tgt_in: &[usize],
        tgt_len: usize,
        enc_out: Var<'t>,
        src_mask: &[bool],
        states: Option<&BertStates<'t>>,
    ) -> Result<Var<'t>> {
        if tgt_len == 0 {
            return Err(Error::invalid("decoder input needs at least the start token"));
        }
        let es = enc_out.shape();
        let (batch, src_len) = (es[0], es[1]);
        if tgt_in.len() != batch * tgt_len {
            return Err(Error::invalid("target ids do not match the batch shape"));
        }
        self.check_states(states, batch, src_len)?;
        let p = self.config.dropout;
        let self_mask = causal_mask(batch, tgt_len);
        let encdec_mask = self.encdec_self_mask(batch, tgt_len, tgt_len, true);
        let memory_mask = key_padding_mask(src_mask, batch, tgt_len)?;
        let y = self.tgt_embed.forward(tape, tgt_in, &[batch, tgt_len])?;
        let mut x = self.positions.encode(tape, y, 0)?.dropout(p);
        for layer in &self.decoder {
            let secondary = self.combine(tape, &layer.glu, states)?;
            let t1 = layer
                .bert_attention
                .forward(tape, x, secondary, &self_mask, Some(&memory_mask))?;
            let t2 = layer
                .encoder_attention
                .forward(tape, x, Some(enc_out), &encdec_mask, Some(&memory_mask))?;
            let a = t1.add(&t2)?.scale(0.5).dropout(p);
            let h = layer.attention_norm.forward(tape, x.add(&a)?)?;
            let f = layer.ffn.forward(tape, h)?.dropout(p);
            x = layer.ffn_norm.forward(tape, h.add(&f)?)?;
        }
        self.output.forward(tape, x)
    }

    /// Logits for a padded batch.
    pub fn forward<'t>(&self, tape: &'t Tape<'t>, batch: &Batch) -> Result<Var<'t>> {
        let states = self.bert_states(tape, &batch.src, &batch.src_mask, batch.size, batch.src_len)?;
        let enc = self.encode(tape, &batch.src, &batch.src_mask, batch.size, batch.src_len, states.as_ref())?;
        self.decoder_forward(tape, &batch.tgt_in, batch.tgt_len, enc, &batch.src_mask, states.as_ref())
    }

    /// Mean token cross-entropy over the non-pad target positions.
    pub fn loss<'t>(&self, tape: &'t Tape<'t>, batch: &Batch) -> Result<Var<'t>> {
        let logits = self.forward(tape, batch)?;
        logits.cross_entropy(&batch.loss_targets(), self.config.label_smoothing)
    }

    /// Sum of token losses and the token count, evaluated without dropout.
    pub fn eval_loss(&self, batch: &Batch) -> Result<(f64, usize)> {
        let tape = Tape::new(&self.store);
        let logits = self.forward(&tape, batch)?;
        let targets = batch.loss_targets();
        let count = targets.iter().flatten().count();
        Ok((logits.cross_entropy(&targets, 0.0)?.value().item() * count as f64, count))
    }

    /// Runs the source side once and prepares per-layer memories.
    pub fn start_decoding(&self, src: &[usize], src_mask: &[bool], batch: usize, len: usize) -> Result<DecoderCache> {
        let tape = Tape::new(&self.store);
        let states = self.bert_states(&tape, src, src_mask, batch, len)?;
        let enc = self.encode(&tape, src, src_mask, batch, len, states.as_ref())?;
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let bert_memory = match self.combine(&tape, &layer.glu, states.as_ref())? {
                Some(s) => Some(CachedKv::of(&layer.bert_attention.secondary_kv(&tape, s)?)),
                None => None,
            };
            layers.push(LayerCache {
                bert_self: None,
                encoder_self: None,
                bert_memory,
                encoder_memory: CachedKv::of(&layer.encoder_attention.secondary_kv(&tape, enc)?),
            });
        }
        Ok(DecoderCache {
            batch,
            src_len: len,
            src_mask: src_mask.to_vec(),
            steps: 0,
            layers,
        })
    }

    /// Feeds one token per row and returns next-token logits `[b x V]`.
    pub fn decode_step(&self, cache: &mut DecoderCache, tokens: &[usize]) -> Result<Tensor> {
        let b = cache.batch;
        if tokens.len() != b {
            return Err(Error::invalid(format!("expected {b} tokens, got {}", tokens.len())));
        }
        let tape = Tape::new(&self.store);
        let pos = cache.steps;
        let y = self.tgt_embed.forward(&tape, tokens, &[b, 1])?;
        let mut x = self.positions.encode(&tape, y, pos)?;
        let self_mask = Mask::full(&[b, 1, pos + 1], true);
        let encdec_mask = self.encdec_self_mask(b, 1, pos + 1, false);
        let memory_mask = key_padding_mask(&cache.src_mask, b, 1)?;
        for (layer, lc) in self.decoder.iter().zip(cache.layers.iter_mut()) {
            let extend = |blk: &JointAttentionBlock, slot: &mut Option<CachedKv>| -> Result<CachedKv> {
                let fresh = blk.primary_kv(&tape, x)?;
                let kv = match slot {
                    Some(old) => {
                        let old = old.on(&tape);
                        KeyValues {
                            keys: tape.concat(&[old.keys, fresh.keys], 2)?,
                            values: tape.concat(&[old.values, fresh.values], 2)?,
                        }
                    }
                    None => fresh,
                };
                Ok(CachedKv::of(&kv))
            };
            let bert_self = extend(&layer.bert_attention, &mut lc.bert_self)?;
            let encoder_self = extend(&layer.encoder_attention, &mut lc.encoder_self)?;
            let t1 = match &lc.bert_memory {
                Some(mem) => {
                    let mask = join_masks(&self_mask, &memory_mask)?;
                    layer
                        .bert_attention
                        .attend(&tape, x, &bert_self.on(&tape), Some(&mem.on(&tape)), &mask)?
                        .0
                }
                None => layer.bert_attention.attend(&tape, x, &bert_self.on(&tape), None, &self_mask)?.0,
            };
            let mask = join_masks(&encdec_mask, &memory_mask)?;
            let t2 = layer
                .encoder_attention
                .attend(&tape, x, &encoder_self.on(&tape), Some(&lc.encoder_memory.on(&tape)), &mask)?
                .0;
            let a = t1.add(&t2)?.scale(0.5);
            let h = layer.attention_norm.forward(&tape, x.add(&a)?)?;
            let f = layer.ffn.forward(&tape, h)?;
            x = layer.ffn_norm.forward(&tape, h.add(&f)?)?;
            lc.bert_self = Some(bert_self);
            lc.encoder_self = Some(encoder_self);
        }
        cache.steps += 1;
        let logits = self.output.forward(&tape, x)?;
        (*logits.value()).clone().reshape(vec![b, self.config.tgt_vocab])
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    /// Every combiner, encoder layers first.
    pub fn combiners(&self) -> Vec<&GluCombiner> {
        self.encoder
            .iter()
            .filter_map(|l| l.glu.as_ref())
            .chain(self.decoder.iter().filter_map(|l| l.glu.as_ref()))
            .collect()
    }

    /// Applies the combiner folding to a saved copy of this model's weights,
    /// so checkpoints taken before folding stay comparable after it.
    pub fn fold_weight_set(&self, weights: &mut WeightSet) {
        for c in self.combiners() {
            if c.kind != CombinerKind::Gated {
                continue;
            }
            if let Some(t) = c.alpha.and_then(|a| weights.get_mut(self.store.get(a).name())) {
                t.data_mut().iter_mut().for_each(|a| *a *= 2.0);
            }
        }
    }

    pub fn output_projection(&self) -> &Linear {
        &self.output
    }

    pub fn encoder_attention(&self, layer: usize) -> &JointAttentionBlock {
        &self.encoder[layer].attention
    }

    pub fn src_embedding(&self) -> &EmbeddingTable {
        &self.src_embed
    }

    pub fn positions(&self) -> &SinusoidalPositions {
        &self.positions
    }
}
