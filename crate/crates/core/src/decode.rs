//! Greedy and beam-search decoding over any incremental step scorer.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Vocab, BOS, EOS};
use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::model::{BertJamModel, DecoderCache};

/// Something that scores the next token given a per-row cache.
pub trait StepScorer {
    type Cache: Clone;

    /// Prepares a single-row cache for one source sentence.
    fn start(&self, src: &[usize]) -> Result<Self::Cache>;

    /// Feeds one token per cache row; returns logits `[rows x V]`.
    fn step(&self, cache: &mut Self::Cache, tokens: &[usize]) -> Result<Tensor>;

    /// Cache whose row `i` continues row `rows[i]` of `cache`.
    fn reorder(&self, cache: &Self::Cache, rows: &[usize]) -> Self::Cache;
}

impl StepScorer for BertJamModel {
    type Cache = DecoderCache;

    fn start(&self, src: &[usize]) -> Result<DecoderCache> {
        self.start_decoding(src, &vec![true; src.len()], 1, src.len())
    }

    fn step(&self, cache: &mut DecoderCache, tokens: &[usize]) -> Result<Tensor> {
        self.decode_step(cache, tokens)
    }

    fn reorder(&self, cache: &DecoderCache, rows: &[usize]) -> DecoderCache {
        cache.select_rows(rows)
    }
}

/// A decoded prefix: `tokens` starts with BOS and, once finished, ends
/// with EOS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn start() -> Self {
        Hypothesis {
            tokens: vec![BOS],
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Generated tokens, including EOS if present.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Output tokens without BOS/EOS.
    pub fn output(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthPenalty {
    /// `log_prob / len^p`
    #[default]
    Exponent,
    /// `log_prob / ((5 + len) / 6)^p`
    Offset,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub length_penalty: f64,
    pub penalty_kind: LengthPenalty,
    /// Fixed output cap; `None` means `2 * source length + 8`.
    pub max_len: Option<usize>,
    /// Also score the greedy hypothesis and return it if it wins.
    pub greedy_floor: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 5,
            length_penalty: 1.0,
            penalty_kind: LengthPenalty::Exponent,
            max_len: None,
            greedy_floor: true,
        }
    }
}

impl BeamConfig {
    pub fn max_len_for(&self, src_len: usize) -> usize {
        self.max_len.unwrap_or(2 * src_len + 8)
    }

    fn divisor(&self, len: usize) -> f64 {
        let len = len.max(1) as f64;
        match self.penalty_kind {
            LengthPenalty::Exponent => len.powf(self.length_penalty),
            LengthPenalty::Offset => ((5.0 + len) / 6.0).powf(self.length_penalty),
        }
    }

    pub fn normalized(&self, h: &Hypothesis) -> f64 {
        h.log_prob / self.divisor(h.len())
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("beam width must be at least 1"));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(Error::invalid("length penalty must be non-negative"));
        }
        Ok(())
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let v = logits.last_dim();
    logits
        .data()
        .chunks(v)
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row.iter().map(|x| x - lse).collect()
        })
        .collect()
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding until EOS or `max_len` generated tokens.
pub fn greedy<S: StepScorer>(scorer: &S, src: &[usize], max_len: usize) -> Result<Hypothesis> {
    let mut cache = scorer.start(src)?;
    let mut hyp = Hypothesis::start();
    while hyp.len() < max_len {
        let logits = scorer.step(&mut cache, &[*hyp.tokens.last().expect("nonempty")])?;
        let lp = &log_softmax_rows(&logits)[0];
        let tok = argmax(lp);
        hyp.tokens.push(tok);
        hyp.log_prob += lp[tok];
        if tok == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Beam search. Each step keeps the `width` best extensions of the live
/// hypotheses by cumulative log-probability (ties: lower token id, then
/// lower parent); extensions ending in EOS move to the finished pool,
/// where hypotheses compete by length-normalized score.
pub fn beam_search<S: StepScorer>(scorer: &S, src: &[usize], config: &BeamConfig) -> Result<Hypothesis> {
    config.validate()?;
    let max_len = config.max_len_for(src.len());
    let mut cache = scorer.start(src)?;
    let mut live = vec![Hypothesis::start()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut best_finished = f64::NEG_INFINITY;
    let bound_divisor = config.divisor(max_len);

    while !live.is_empty() && live[0].len() < max_len {
        let last: Vec<usize> = live.iter().map(|h| *h.tokens.last().expect("nonempty")).collect();
        let logits = scorer.step(&mut cache, &last)?;
        let lps = log_softmax_rows(&logits);
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * lps[0].len());
        for (i, row) in lps.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                cands.push((live[i].log_prob + lp, tok, i));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(config.width);

        let mut next = Vec::new();
        let mut rows = Vec::new();
        for (score, tok, parent) in cands {
            let mut h = live[parent].clone();
            h.tokens.push(tok);
            h.log_prob = score;
            if tok == EOS {
                h.finished = true;
                best_finished = best_finished.max(config.normalized(&h));
                finished.push(h);
            } else {
                next.push(h);
                rows.push(parent);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        cache = scorer.reorder(&cache, &rows);
        // a live hypothesis can at best keep its log-prob while growing to max_len
        let best_possible = live
            .iter()
            .map(|h| if config.length_penalty > 0.0 { h.log_prob / bound_divisor } else { h.log_prob })
            .fold(f64::NEG_INFINITY, f64::max);
        if best_possible <= best_finished {
            break;
        }
    }

    let mut best = pick_best(config, &finished).or_else(|| pick_best(config, &live));
    if config.greedy_floor && config.width > 1 {
        let g = greedy(scorer, src, max_len)?;
        let beats = match &best {
            None => true,
            Some(b) => (g.finished && !b.finished) || (g.finished == b.finished && config.normalized(&g) > config.normalized(b)),
        };
        if beats {
            best = Some(g);
        }
    }
    best.ok_or_else(|| Error::invalid("beam search produced no hypothesis"))
}

fn pick_best(config: &BeamConfig, pool: &[Hypothesis]) -> Option<Hypothesis> {
    let mut best: Option<&Hypothesis> = None;
    for h in pool {
        if best.is_none_or(|b| config.normalized(h) > config.normalized(b)) {
            best = Some(h);
        }
    }
    best.cloned()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SearchMode {
    Greedy,
    Beam(BeamConfig),
}

/// Decodes every sentence independently, in parallel.
pub fn decode_corpus(model: &BertJamModel, sources: &[Vec<usize>], mode: SearchMode) -> Result<Vec<Hypothesis>> {
    sources
        .par_iter()
        .map(|src| match mode {
            SearchMode::Greedy => greedy(model, src, BeamConfig::default().max_len_for(src.len())),
            SearchMode::Beam(cfg) => beam_search(model, src, &cfg),
        })
        .collect()
}

/// Greedy decoding of many sentences at once, padded into batches of at
/// most `batch_size` rows. Results follow input order.
pub fn greedy_batched(model: &BertJamModel, sources: &[Vec<usize>], batch_size: usize) -> Result<Vec<Hypothesis>> {
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by_key(|&i| sources[i].len());
    let mut out: Vec<Option<Hypothesis>> = vec![None; sources.len()];
    for chunk in order.chunks(batch_size.max(1)) {
        let n = chunk.iter().map(|&i| sources[i].len()).max().unwrap_or(0);
        let b = chunk.len();
        let mut src = vec![0; b * n];
        let mut mask = vec![false; b * n];
        for (r, &i) in chunk.iter().enumerate() {
            src[r * n..r * n + sources[i].len()].copy_from_slice(&sources[i]);
            mask[r * n..r * n + sources[i].len()].fill(true);
        }
        let limits: Vec<usize> = chunk.iter().map(|&i| 2 * sources[i].len() + 8).collect();
        let mut cache = model.start_decoding(&src, &mask, b, n)?;
        let mut hyps = vec![Hypothesis::start(); b];
        let horizon = *limits.iter().max().expect("nonempty chunk");
        for _ in 0..horizon {
            if hyps.iter().zip(&limits).all(|(h, &l)| h.finished || h.len() >= l) {
                break;
            }
            let last: Vec<usize> = hyps.iter().map(|h| *h.tokens.last().expect("nonempty")).collect();
            let lps = log_softmax_rows(&model.decode_step(&mut cache, &last)?);
            for ((h, lp), &limit) in hyps.iter_mut().zip(&lps).zip(&limits) {
                if h.finished || h.len() >= limit {
                    continue;
                }
                let tok = argmax(lp);
                h.tokens.push(tok);
                h.log_prob += lp[tok];
                h.finished = tok == EOS;
            }
        }
        for (r, &i) in chunk.iter().enumerate() {
            out[i] = Some(hyps[r].clone());
        }
    }
    Ok(out.into_iter().map(|h| h.expect("every sentence decoded")).collect())
}

/// Writes one space-joined sentence per line.
pub fn write_hypotheses(path: &Path, vocab: &Vocab, hyps: &[Hypothesis]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for h in hyps {
        writeln!(f, "{}", vocab.decode(h.output()).join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
