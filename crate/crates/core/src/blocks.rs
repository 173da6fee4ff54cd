//! Building blocks shared by the pre-trained encoder and the translation
//! model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Mask, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Affine map `x . W + b` on the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = store.register(&format!("{name}.weight"), group, uniform(rng, &[d_in, d_out], bound))?;
        let bias = store.register(&format!("{name}.bias"), group, Tensor::zeros(&[d_out]))?;
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(&tape.param(self.weight))?.add_row(&tape.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.register(&format!("{name}.gain"), group, Tensor::full(&[d], 1.0))?,
            bias: store.register(&format!("{name}.bias"), group, Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&tape.param(self.gain), &tape.param(self.bias), LAYER_NORM_EPS)
    }
}

/// Token embedding table, scaled by `sqrt(d)` on lookup.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub weights: ParamId,
    pub vocab: usize,
    pub d_model: usize,
}

impl EmbeddingTable {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        vocab: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let std = (d_model as f64).powf(-0.5);
        let bound = std * 3f64.sqrt();
        let weights = store.register(&format!("{name}.weight"), group, uniform(rng, &[vocab, d_model], bound))?;
        Ok(EmbeddingTable {
            weights,
            vocab,
            d_model,
        })
    }

    /// `ids` laid out as `shape`; returns `shape ++ [d_model]`.
    pub fn forward<'t>(&self, tape: &'t Tape<'t>, ids: &[usize], shape: &[usize]) -> Result<Var<'t>> {
        if let Some(bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        Ok(tape
            .gather(tape.param(self.weights), ids, shape)?
            .scale((self.d_model as f64).sqrt()))
    }
}

/// Fixed sinusoidal position signal: channel `2i` carries
/// `sin(pos / 10000^(2i/d))` and channel `2i+1` the matching cosine.
#[derive(Clone, Debug)]
pub struct SinusoidalPositions {
    d_model: usize,
    max_len: usize,
    table: Vec<f64>,
}

impl SinusoidalPositions {
    pub fn new(d_model: usize, max_len: usize) -> Self {
        let mut table = vec![0.0; d_model * max_len];
        for pos in 0..max_len {
            for i in (0..d_model).step_by(2) {
                let angle = pos as f64 / 10000f64.powf(i as f64 / d_model as f64);
                table[pos * d_model + i] = angle.sin();
                if i + 1 < d_model {
                    table[pos * d_model + i + 1] = angle.cos();
                }
            }
        }
        SinusoidalPositions {
            d_model,
            max_len,
            table,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn signal(&self, pos: usize) -> &[f64] {
        &self.table[pos * self.d_model..(pos + 1) * self.d_model]
    }

    /// Adds positions `offset..offset + n` to `[.. x n x d]` (or `[n x d]`).
    pub fn encode<'t>(&self, tape: &'t Tape<'t>, x: Var<'t>, offset: usize) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() < 2 || shape[shape.len() - 1] != self.d_model {
            return Err(Error::Shape {
                op: "positional_encode",
                lhs: shape,
                rhs: vec![self.d_model],
            });
        }
        let n = shape[shape.len() - 2];
        if offset + n > self.max_len {
            return Err(Error::invalid(format!(
                "sequence of length {} exceeds the maximum of {}",
                offset + n,
                self.max_len
            )));
        }
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let window = &self.table[offset * self.d_model..(offset + n) * self.d_model];
        let mut data = Vec::with_capacity(batch * window.len());
        for _ in 0..batch {
            data.extend_from_slice(window);
        }
        x.add(&tape.constant(Tensor::new(shape, data)?))
    }
}

/// `linear(d -> d_ff) -> ReLU -> linear(d_ff -> d)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, &format!("{name}.fc1"), group, d_model, d_ff, rng)?,
            outer: Linear::new(store, &format!("{name}.fc2"), group, d_ff, d_model, rng)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.inner.forward(tape, x)?.relu();
        self.outer.forward(tape, h)
    }
}

/// Logit scaling used inside multi-head attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// `1/sqrt(d_model / n_heads)`
    #[default]
    PerHead,
    /// `1/sqrt(d_model)` regardless of head count.
    Model,
}

/// Projected keys and values split into heads: `[b x h x len x d_head]`.
#[derive(Clone, Debug)]
pub struct KeyValues<'t> {
    pub keys: Var<'t>,
    pub values: Var<'t>,
}

impl KeyValues<'_> {
    pub fn len(&self) -> usize {
        self.keys.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Attention whose queries come from a primary sequence and whose keys and
/// values are the concatenation of primary-side and secondary-side
/// projections. Without a secondary sequence it is ordinary multi-head
/// self-attention.
#[derive(Clone, Debug)]
pub struct JointAttentionBlock {
    pub n_heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub primary_key: Linear,
    pub primary_value: Linear,
    pub secondary_key: Option<Linear>,
    pub secondary_value: Option<Linear>,
    pub output: Linear,
    pub dropout: f64,
    pub scale: AttnScale,
}

impl JointAttentionBlock {
    /// `d_secondary` is the width of the secondary sequence, or `None` for a
    /// plain self-attention block.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        n_heads: usize,
        d_secondary: Option<usize>,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let mut lin = |suffix: &str, d_in: usize, rng: &mut ChaCha8Rng| {
            Linear::new(store, &format!("{name}.{suffix}"), group, d_in, d_model, rng)
        };
        let query = lin("q", d_model, rng)?;
        let primary_key = lin("k_primary", d_model, rng)?;
        let primary_value = lin("v_primary", d_model, rng)?;
        let (secondary_key, secondary_value) = match d_secondary {
            Some(ds) => (Some(lin("k_secondary", ds, rng)?), Some(lin("v_secondary", ds, rng)?)),
            None => (None, None),
        };
        let output = lin("out", d_model, rng)?;
        Ok(JointAttentionBlock {
            n_heads,
            d_model,
            query,
            primary_key,
            primary_value,
            secondary_key,
            secondary_value,
            output,
            dropout,
            scale: AttnScale::PerHead,
        })
    }

    fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn split_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        x.reshape(&[s[0], s[1], self.n_heads, self.d_head()])?.swap_axes12()
    }

    fn merge_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        x.swap_axes12()?.reshape(&[s[0], s[2], self.d_model])
    }

    /// Projects a `[b x len x d_model]` primary sequence to keys/values.
    pub fn primary_kv<'t>(&self, tape: &'t Tape<'t>, x: Var<'t>) -> Result<KeyValues<'t>> {
        Ok(KeyValues {
            keys: self.split_heads(self.primary_key.forward(tape, x)?)?,
            values: self.split_heads(self.primary_value.forward(tape, x)?)?,
        })
    }

    /// Projects a `[b x m x d_secondary]` secondary sequence to keys/values.
    pub fn secondary_kv<'t>(&self, tape: &'t Tape<'t>, s: Var<'t>) -> Result<KeyValues<'t>> {
        let (Some(k), Some(v)) = (&self.secondary_key, &self.secondary_value) else {
            return Err(Error::invalid("block has no secondary projections"));
        };
        Ok(KeyValues {
            keys: self.split_heads(k.forward(tape, s)?)?,
            values: self.split_heads(v.forward(tape, s)?)?,
        })
    }

    /// Core attention over already-projected keys. `mask` is
    /// `[b x n x (len_primary + len_secondary)]`. Returns the output and the
    /// attention weights `[b x h x n x len]` (before dropout).
    pub fn attend<'t>(
        &self,
        tape: &'t Tape<'t>,
        queries_from: Var<'t>,
        primary: &KeyValues<'t>,
        secondary: Option<&KeyValues<'t>>,
        mask: &Mask,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let q = self.split_heads(self.query.forward(tape, queries_from)?)?;
        let (keys, values) = match secondary {
            Some(s) if !s.is_empty() => (
                tape.concat(&[primary.keys, s.keys], 2)?,
                tape.concat(&[primary.values, s.values], 2)?,
            ),
            _ => (primary.keys, primary.values),
        };
        let scale = match self.scale {
            AttnScale::PerHead => 1.0 / (self.d_head() as f64).sqrt(),
            AttnScale::Model => 1.0 / (self.d_model as f64).sqrt(),
        };
        let logits = q.bmm(&keys, true)?.scale(scale);
        let weights = logits.masked_softmax_heads(mask, self.n_heads)?;
        let mixed = weights.dropout(self.dropout).bmm(&values, false)?;
        let out = self.output.forward(tape, self.merge_heads(mixed)?)?;
        Ok((out, weights))
    }

    /// Joint attention of `primary [b x n x d_model]` over itself and an
    /// optional `secondary [b x m x d_s]`. `primary_mask` is `[b x n x n]`,
    /// `secondary_mask` is `[b x n x m]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<'t>,
        primary: Var<'t>,
        secondary: Option<Var<'t>>,
        primary_mask: &Mask,
        secondary_mask: Option<&Mask>,
    ) -> Result<Var<'t>> {
        Ok(self
            .forward_with_weights(tape, primary, secondary, primary_mask, secondary_mask)?
            .0)
    }

    pub fn forward_with_weights<'t>(
        &self,
        tape: &'t Tape<'t>,
        primary: Var<'t>,
        secondary: Option<Var<'t>>,
        primary_mask: &Mask,
        secondary_mask: Option<&Mask>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let pkv = self.primary_kv(tape, primary)?;
        match (secondary, secondary_mask) {
            (Some(s), Some(sm)) if s.shape()[1] > 0 => {
                let skv = self.secondary_kv(tape, s)?;
                let mask = join_masks(primary_mask, sm)?;
                self.attend(tape, primary, &pkv, Some(&skv), &mask)
            }
            (Some(s), None) if s.shape()[1] > 0 => Err(Error::invalid("secondary sequence given without a mask")),
            _ => self.attend(tape, primary, &pkv, None, primary_mask),
        }
    }
}

/// Concatenates `[b x n x p]` and `[b x n x m]` masks along the last axis.
pub fn join_masks(primary: &Mask, secondary: &Mask) -> Result<Mask> {
    let (ps, ss) = (primary.shape(), secondary.shape());
    if ps.len() != 3 || ss.len() != 3 || ps[..2] != ss[..2] {
        return Err(Error::Shape {
            op: "join_masks",
            lhs: ps.to_vec(),
            rhs: ss.to_vec(),
        });
    }
    let (rows, p, m) = (ps[0] * ps[1], ps[2], ss[2]);
    let mut data = Vec::with_capacity(rows * (p + m));
    for r in 0..rows {
        data.extend_from_slice(&primary.data()[r * p..(r + 1) * p]);
        data.extend_from_slice(&secondary.data()[r * m..(r + 1) * m]);
    }
    Mask::new(vec![ps[0], ps[1], p + m], data)
}

/// `[b x n_query x n_key]` mask letting every query see the keys flagged in
/// `key_mask` (`[b x n_key]`, true = real token).
pub fn key_padding_mask(key_mask: &[bool], batch: usize, n_query: usize) -> Result<Mask> {
    if batch == 0 || key_mask.len() % batch != 0 {
        return Err(Error::invalid("key mask does not divide into the batch"));
    }
    let n_key = key_mask.len() / batch;
    let mut data = Vec::with_capacity(batch * n_query * n_key);
    for b in 0..batch {
        let row = &key_mask[b * n_key..(b + 1) * n_key];
        for _ in 0..n_query {
            data.extend_from_slice(row);
        }
    }
    Mask::new(vec![batch, n_query, n_key], data)
}

/// Causal `[b x n x n]` mask.
pub fn causal_mask(batch: usize, n: usize) -> Mask {
    let one = Mask::causal(n);
    let mut data = Vec::with_capacity(batch * n * n);
    for _ in 0..batch {
        data.extend_from_slice(one.data());
    }
    Mask::new(vec![batch, n, n], data).expect("causal mask shape")
}

/// How the per-layer combiner mixes the encoder's layer outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerKind {
    /// Gated: `sigmoid(sum beta_i B_i) * sum alpha_i B_i`.
    #[default]
    Gated,
    /// Gateless weighted sum `sum alpha_i B_i`.
    WeightedSum,
    /// Last layer only; no parameters.
    LastLayer,
}

/// Per-layer combiner of the pre-trained encoder's layer outputs.
#[derive(Clone, Debug)]
pub struct GluCombiner {
    pub kind: CombinerKind,
    pub n_layers: usize,
    pub alpha: Option<ParamId>,
    pub beta: Option<ParamId>,
    /// Doubles the gated output; active only during warmup training.
    pub compensation_active: bool,
}

impl GluCombiner {
    /// Initializes `alpha = (0, .., 0, 1)` and `beta = 0`.
    pub fn new(store: &mut ParamStore, name: &str, kind: CombinerKind, n_layers: usize) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::invalid("combiner needs at least one encoder layer"));
        }
        let mut alpha_init = vec![0.0; n_layers];
        alpha_init[n_layers - 1] = 1.0;
        let alpha_t = Tensor::new(vec![n_layers], alpha_init)?;
        let (alpha, beta) = match kind {
            CombinerKind::Gated => (
                Some(store.register(&format!("{name}.alpha"), ParamGroup::Glu, alpha_t)?),
                Some(store.register(&format!("{name}.beta"), ParamGroup::Glu, Tensor::zeros(&[n_layers]))?),
            ),
            CombinerKind::WeightedSum => (
                Some(store.register(&format!("{name}.alpha"), ParamGroup::Glu, alpha_t)?),
                None,
            ),
            CombinerKind::LastLayer => (None, None),
        };
        Ok(GluCombiner {
            kind,
            n_layers,
            alpha,
            beta,
            compensation_active: kind == CombinerKind::Gated,
        })
    }

    /// `states` yields layer `i` on demand, so unused layers are never read.
    pub fn combine<'t>(
        &self,
        tape: &'t Tape<'t>,
        n_states: usize,
        state: impl Fn(usize) -> Var<'t>,
    ) -> Result<Var<'t>> {
        if n_states != self.n_layers {
            return Err(Error::invalid(format!(
                "combiner expects {} encoder layers, got {n_states}",
                self.n_layers
            )));
        }
        match self.kind {
            CombinerKind::LastLayer => Ok(state(self.n_layers - 1)),
            CombinerKind::WeightedSum => {
                let xs: Vec<Var<'t>> = (0..n_states).map(&state).collect();
                tape.weighted_sum(&xs, tape.param(self.alpha.expect("alpha")))
            }
            CombinerKind::Gated => {
                let xs: Vec<Var<'t>> = (0..n_states).map(&state).collect();
                let mix = tape.weighted_sum(&xs, tape.param(self.alpha.expect("alpha")))?;
                let gate = tape.weighted_sum(&xs, tape.param(self.beta.expect("beta")))?.sigmoid();
                let out = gate.mul(&mix)?;
                Ok(if self.compensation_active { out.scale(2.0) } else { out })
            }
        }
    }

    /// Moves the warmup doubling into `alpha`, leaving the function unchanged.
    pub fn fold_compensation(&mut self, store: &mut ParamStore) {
        if !self.compensation_active {
            return;
        }
        if let Some(alpha) = self.alpha {
            store.value_mut(alpha).data_mut().iter_mut().for_each(|a| *a *= 2.0);
        }
        self.compensation_active = false;
    }
}

/// Combines a list of same-shape states with `combiner`.
pub fn glu_combine<'t>(tape: &'t Tape<'t>, states: &[Var<'t>], combiner: &GluCombiner) -> Result<Var<'t>> {
    if let Some(first) = states.first() {
        let s = first.shape();
        if states.iter().any(|v| v.shape() != s) {
            return Err(Error::invalid("combiner inputs differ in shape"));
        }
    }
    combiner.combine(tape, states.len(), |i| states[i])
}

#[cfg(test)]
mod tests;
