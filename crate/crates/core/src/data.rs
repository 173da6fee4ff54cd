//! Synthetic parallel corpora, vocabularies and token-budget batching.
//!
//! The marker-cipher task translates `marker w1 .. wn` into a per-token
//! substitution of `w1 .. wn`, except that a subset of "polysemous" source
//! tokens has two possible translations chosen by the sentence-initial
//! marker. Under each marker the content distribution also leans towards
//! one half of the vocabulary, so the marker is recoverable from context.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::RngStream;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MarkerCipher,
    Copy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub kind: TaskKind,
    pub content_vocab: usize,
    pub polysemous: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub reorder: bool,
    /// Sampling weight of a marker's preferred half of the vocabulary
    /// relative to the other half (1.0 means uniform).
    pub topic_bias: f64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            kind: TaskKind::MarkerCipher,
            content_vocab: 64,
            polysemous: 8,
            min_len: 5,
            max_len: 16,
            reorder: false,
            topic_bias: 3.0,
            train: 20_000,
            valid: 1_000,
            test: 1_000,
            seed: 1,
        }
    }
}

impl SynthTaskSpec {
    pub fn copy_task() -> Self {
        SynthTaskSpec {
            kind: TaskKind::Copy,
            polysemous: 0,
            topic_bias: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.content_vocab == 0 {
            return Err(Error::invalid("content vocabulary must be nonempty"));
        }
        if self.polysemous > self.content_vocab {
            return Err(Error::invalid(format!(
                "polysemous subset ({}) larger than the content vocabulary ({})",
                self.polysemous, self.content_vocab
            )));
        }
        if self.kind == TaskKind::Copy && self.polysemous > 0 {
            return Err(Error::invalid("the copy task has no polysemous tokens"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid(format!(
                "invalid sentence length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.topic_bias <= 0.0 || !self.topic_bias.is_finite() {
            return Err(Error::invalid("topic_bias must be positive"));
        }
        if self.kind == TaskKind::MarkerCipher && self.train < 2 * self.polysemous {
            return Err(Error::invalid(
                "training split too small to show every polysemous token under both markers",
            ));
        }
        if self.train == 0 {
            return Err(Error::invalid("training split must be nonempty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitext {
    pub train: Vec<SentencePair>,
    pub valid: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

/// Translation tables of one generated task.
#[derive(Clone, Debug)]
pub struct SynthTask {
    spec: SynthTaskSpec,
    cipher: Vec<usize>,
    /// content id -> index into the alternate translations, for polysemous ids
    polysemous: HashMap<usize, usize>,
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

impl SynthTask {
    pub fn new(spec: &SynthTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngStream::new(spec.seed, 0).rng();
        let mut cipher: Vec<usize> = (0..spec.content_vocab).collect();
        if spec.kind == TaskKind::MarkerCipher {
            cipher.shuffle(&mut rng);
        }
        let mut ids: Vec<usize> = (0..spec.content_vocab).collect();
        ids.shuffle(&mut rng);
        let polysemous = ids[..spec.polysemous]
            .iter()
            .enumerate()
            .map(|(k, &id)| (id, k))
            .collect();
        Ok(SynthTask {
            spec: spec.clone(),
            cipher,
            polysemous,
        })
    }

    pub fn spec(&self) -> &SynthTaskSpec {
        &self.spec
    }

    fn src_token(&self, id: usize) -> String {
        format!("s{:0w$}", id, w = width(self.spec.content_vocab))
    }

    fn tgt_token(&self, id: usize) -> String {
        if self.spec.kind == TaskKind::Copy {
            return self.src_token(id);
        }
        format!("t{:0w$}", id, w = width(self.spec.content_vocab + self.spec.polysemous))
    }

    pub fn marker_token(marker: usize) -> String {
        format!("m{marker}")
    }

    pub fn polysemous_ids(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.polysemous.keys().copied().collect();
        v.sort_unstable();
        v
    }

    fn translate_ids(&self, marker: usize, content: &[usize]) -> Vec<String> {
        let mut out: Vec<String> = content
            .iter()
            .map(|&c| match self.polysemous.get(&c) {
                Some(&k) if marker == 1 => self.tgt_token(self.spec.content_vocab + k),
                _ => self.tgt_token(self.cipher[c]),
            })
            .collect();
        if self.spec.reorder {
            for pair in out.chunks_mut(2) {
                pair.reverse();
            }
        }
        out
    }

    /// Reference translation of a source sentence, using the task's tables.
    pub fn translate(&self, src: &[String]) -> Result<Vec<String>> {
        let parse = |tok: &String| -> Result<usize> {
            tok.strip_prefix('s')
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|&d| d < self.spec.content_vocab)
                .ok_or_else(|| Error::Data(format!("`{tok}` is not a content token")))
        };
        match self.spec.kind {
            TaskKind::Copy => {
                let ids = src.iter().map(parse).collect::<Result<Vec<_>>>()?;
                Ok(self.translate_ids(0, &ids))
            }
            TaskKind::MarkerCipher => {
                let (marker, rest) = src
                    .split_first()
                    .ok_or_else(|| Error::Data("empty source sentence".into()))?;
                let marker = match marker.as_str() {
                    "m0" => 0,
                    "m1" => 1,
                    other => return Err(Error::Data(format!("`{other}` is not a marker"))),
                };
                let ids = rest.iter().map(parse).collect::<Result<Vec<_>>>()?;
                Ok(self.translate_ids(marker, &ids))
            }
        }
    }

    fn sample_content(&self, rng: &mut ChaCha8Rng, marker: usize) -> usize {
        let v = self.spec.content_vocab;
        let half = v / 2;
        let bias = self.spec.topic_bias;
        if bias == 1.0 || half == 0 {
            return rng.random_range(0..v);
        }
        // preferred half: [0, half) for marker 0, [half, v) for marker 1
        let (pref_lo, pref_hi) = if marker == 0 { (0, half) } else { (half, v) };
        let pref = (pref_hi - pref_lo) as f64 * bias;
        let other = (v - (pref_hi - pref_lo)) as f64;
        if rng.random::<f64>() < pref / (pref + other) {
            rng.random_range(pref_lo..pref_hi)
        } else {
            let k = rng.random_range(0..v - (pref_hi - pref_lo));
            if k < pref_lo {
                k
            } else {
                k + (pref_hi - pref_lo)
            }
        }
    }

    fn sample_pair(&self, rng: &mut ChaCha8Rng, forced: Option<(usize, usize)>) -> SentencePair {
        let len = rng.random_range(self.spec.min_len..=self.spec.max_len);
        let marker = match forced {
            Some((m, _)) => m,
            None => rng.random_range(0..2),
        };
        let mut content: Vec<usize> = (0..len).map(|_| self.sample_content(rng, marker)).collect();
        if let Some((_, tok)) = forced {
            let at = rng.random_range(0..len);
            content[at] = tok;
        }
        let tgt = self.translate_ids(marker, &content);
        let mut src: Vec<String> = Vec::with_capacity(len + 1);
        if self.spec.kind == TaskKind::MarkerCipher {
            src.push(Self::marker_token(marker));
        }
        src.extend(content.iter().map(|&c| self.src_token(c)));
        SentencePair { src, tgt }
    }

    /// Generates disjoint train/valid/test splits.
    pub fn generate(&self) -> Result<Bitext> {
        let mut rng = RngStream::new(self.spec.seed, 1).rng();
        let total = self.spec.train + self.spec.valid + self.spec.test;
        let mut seen: HashSet<Vec<String>> = HashSet::with_capacity(total);
        let mut pairs = Vec::with_capacity(total);
        let poly = self.polysemous_ids();
        let mut forced: Vec<(usize, usize)> = poly.iter().flat_map(|&p| [(0, p), (1, p)]).collect();
        forced.reverse();
        let mut attempts = 0usize;
        while pairs.len() < total {
            attempts += 1;
            if attempts > 50 * total + 1000 {
                return Err(Error::Data(
                    "could not draw enough distinct sentences for the requested splits".into(),
                ));
            }
            let force = forced.last().copied();
            let pair = self.sample_pair(&mut rng, force);
            if seen.insert(pair.src.clone()) {
                if force.is_some() {
                    forced.pop();
                }
                pairs.push(pair);
            }
        }
        let test = pairs.split_off(self.spec.train + self.spec.valid);
        let valid = pairs.split_off(self.spec.train);
        Ok(Bitext {
            train: pairs,
            valid,
            test,
        })
    }
}

/// Generates the three splits of `spec`.
pub fn generate_bitext(spec: &SynthTaskSpec) -> Result<Bitext> {
    SynthTask::new(spec)?.generate()
}

/// Token <-> id map with reserved ids `PAD, BOS, EOS, UNK, MASK` first and
/// the remaining tokens in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<&str> = tokens
            .into_iter()
            .filter(|t| !SPECIALS.contains(t))
            .collect();
        set.sort_unstable();
        set.dedup();
        let tokens: Vec<String> = SPECIALS.iter().copied().chain(set).map(String::from).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    /// Token strings for `ids`, stopping at EOS and skipping BOS/PAD.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = body.lines().map(String::from).collect();
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Data(format!(
                "{} does not start with the reserved tokens",
                path.display()
            )));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Data(format!("{} has duplicate tokens", path.display())));
        }
        Ok(Vocab { tokens, index })
    }
}

/// Source and target vocabularies covering every token in `corpora`.
pub fn build_vocab<'a>(corpora: impl IntoIterator<Item = &'a [SentencePair]>) -> (Vocab, Vocab) {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for corpus in corpora {
        for p in corpus {
            src.extend(p.src.iter().map(String::as_str));
            tgt.extend(p.tgt.iter().map(String::as_str));
        }
    }
    (Vocab::from_tokens(src), Vocab::from_tokens(tgt))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

pub fn encode_corpus(pairs: &[SentencePair], src: &Vocab, tgt: &Vocab) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|p| EncodedPair {
            src: src.encode(&p.src),
            tgt: tgt.encode(&p.tgt),
        })
        .collect()
}

/// Padded mini-batch. Source rows are `src_len` wide; target rows are
/// `tgt_len` wide with `tgt_in = BOS + y` and `tgt_out = y + EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_mask: Vec<bool>,
    /// Corpus positions of the rows.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(corpus: &[EncodedPair], indices: &[usize]) -> Self {
        let size = indices.len();
        let src_len = indices.iter().map(|&i| corpus[i].src.len()).max().unwrap_or(0);
        let tgt_len = indices.iter().map(|&i| corpus[i].tgt.len() + 1).max().unwrap_or(0);
        let mut b = Batch {
            size,
            src_len,
            tgt_len,
            src: vec![PAD; size * src_len],
            src_mask: vec![false; size * src_len],
            tgt_in: vec![PAD; size * tgt_len],
            tgt_out: vec![PAD; size * tgt_len],
            tgt_mask: vec![false; size * tgt_len],
            indices: indices.to_vec(),
        };
        for (r, &i) in indices.iter().enumerate() {
            let p = &corpus[i];
            for (j, &t) in p.src.iter().enumerate() {
                b.src[r * src_len + j] = t;
                b.src_mask[r * src_len + j] = true;
            }
            b.tgt_in[r * tgt_len] = BOS;
            for (j, &t) in p.tgt.iter().enumerate() {
                b.tgt_in[r * tgt_len + j + 1] = t;
                b.tgt_out[r * tgt_len + j] = t;
            }
            b.tgt_out[r * tgt_len + p.tgt.len()] = EOS;
            for j in 0..=p.tgt.len() {
                b.tgt_mask[r * tgt_len + j] = true;
            }
        }
        b
    }

    /// Padded token count used against the batch budget.
    pub fn padded_tokens(&self) -> usize {
        self.size * self.src_len.max(self.tgt_len)
    }

    /// Targets for the loss, `None` at padding.
    pub fn loss_targets(&self) -> Vec<Option<usize>> {
        self.tgt_out
            .iter()
            .zip(&self.tgt_mask)
            .map(|(&t, &m)| m.then_some(t))
            .collect()
    }
}

fn cost(p: &EncodedPair) -> usize {
    p.src.len().max(p.tgt.len() + 1)
}

/// Length-bucketed batches whose padded size stays within `max_tokens`.
/// With `shuffle`, bucket membership and batch order are drawn from `rng`;
/// without it the order is fixed.
pub fn batch_iterator(
    corpus: &[EncodedPair],
    max_tokens: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Batch>> {
    if let Some((i, p)) = corpus.iter().enumerate().find(|(_, p)| cost(p) > max_tokens) {
        return Err(Error::Data(format!(
            "sentence {i} needs {} tokens, above the batch budget of {max_tokens}",
            cost(p)
        )));
    }
    if let Some(i) = corpus.iter().position(|p| p.src.is_empty()) {
        return Err(Error::Data(format!("sentence {i} has an empty source side")));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = rng;
    if let Some(r) = rng.as_deref_mut() {
        order.shuffle(r);
    }
    order.sort_by_key(|&i| (corpus[i].src.len(), corpus[i].tgt.len()));

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut widest = 0;
    for i in order {
        let w = widest.max(cost(&corpus[i]));
        if !current.is_empty() && w * (current.len() + 1) > max_tokens {
            batches.push(Batch::from_pairs(corpus, &current));
            current.clear();
            widest = cost(&corpus[i]);
        } else {
            widest = w;
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(Batch::from_pairs(corpus, &current));
    }
    if let Some(r) = rng {
        batches.shuffle(r);
    }
    Ok(batches)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes `<split>.src` / `<split>.tgt`, one space-joined sentence per line.
pub fn write_corpus(dir: &Path, split: &str, pairs: &[SentencePair]) -> Result<()> {
    write_lines(&dir.join(format!("{split}.src")), pairs.iter().map(|p| p.src.join(" ")))?;
    write_lines(&dir.join(format!("{split}.tgt")), pairs.iter().map(|p| p.tgt.join(" ")))
}

pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(body
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

pub fn read_corpus(dir: &Path, split: &str) -> Result<Vec<SentencePair>> {
    let src = read_sentences(&dir.join(format!("{split}.src")))?;
    let tgt = read_sentences(&dir.join(format!("{split}.tgt")))?;
    if src.len() != tgt.len() {
        return Err(Error::Data(format!(
            "{split}: {} source lines but {} target lines",
            src.len(),
            tgt.len()
        )));
    }
    Ok(src
        .into_iter()
        .zip(tgt)
        .map(|(src, tgt)| SentencePair { src, tgt })
        .collect())
}

pub fn write_bitext(dir: &Path, bitext: &Bitext) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_corpus(dir, "train", &bitext.train)?;
    write_corpus(dir, "valid", &bitext.valid)?;
    write_corpus(dir, "test", &bitext.test)
}

pub fn read_bitext(dir: &Path) -> Result<Bitext> {
    Ok(Bitext {
        train: read_corpus(dir, "train")?,
        valid: read_corpus(dir, "valid")?,
        test: read_corpus(dir, "test")?,
    })
}

#[cfg(test)]
mod tests;
