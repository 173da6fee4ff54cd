//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bertjam::blocks::{AttnScale, CombinerKind};
use bertjam::data::{SynthTaskSpec, TaskKind};
use bertjam::decode::{BeamConfig, LengthPenalty, SearchMode};
use bertjam::eval::Experiment;
use bertjam::microbert::{MicroBertConfig, MlmOptions};
use bertjam::model::ModelConfig;
use bertjam::trainer::{LrSchedule, PhasePlan, TrainConfig, Variant};

use crate::UsageError;

/// Every knob, with a one-line description (printed by `bertjam keys`).
pub const KEYS: &[(&str, &str)] = &[
    ("task", "synthetic task: cipher | copy"),
    ("content_vocab", "number of content tokens"),
    ("polysemous", "cipher tokens whose translation depends on the marker"),
    ("min_len", "shortest sentence (content tokens)"),
    ("max_len", "longest sentence (content tokens)"),
    ("reorder", "reverse the target order"),
    ("topic_bias", "sampling weight of a marker's preferred vocabulary half"),
    ("train_size", "training sentences"),
    ("valid_size", "validation sentences"),
    ("test_size", "test sentences"),
    ("data_seed", "seed of the task generator"),
    ("d_model", "model width"),
    ("d_ff", "feed-forward width"),
    ("heads", "attention heads"),
    ("layers", "encoder and decoder layers"),
    ("dropout", "dropout rate of the translation model"),
    ("max_positions", "longest sequence with a positional encoding"),
    ("attn_scale", "attention score scaling: per_head | model"),
    ("encdec_self_keys", "encoder-decoder attention also attends to decoder positions"),
    ("label_smoothing", "label smoothing of the training loss"),
    ("bert_layers", "pre-trained encoder layers"),
    ("bert_width", "pre-trained encoder width"),
    ("bert_heads", "pre-trained encoder heads"),
    ("bert_ff", "pre-trained encoder feed-forward width"),
    ("bert_dropout", "pre-trained encoder dropout"),
    ("mlm_steps", "masked-LM pre-training steps"),
    ("mlm_mask_rate", "fraction of tokens selected for masking"),
    ("mlm_batch_tokens", "token budget of a pre-training batch"),
    ("mlm_warmup", "pre-training warmup steps"),
    ("mlm_peak_lr", "pre-training peak learning rate"),
    ("variant", "M0 | M1 | M2 | M3 | baseline"),
    ("phase_epochs", "epoch budgets of phases 1,2,3"),
    ("convergence_delta", "phases 1-2 stop when validation loss improves by no more than this"),
    ("convergence_window", "... for this many consecutive epochs"),
    ("accumulation", "batches per optimizer update"),
    ("average_window", "epoch checkpoints averaged for evaluation"),
    ("patience", "phase-3 epochs without improvement before stopping"),
    ("reset_optimizer", "fresh Adam moments at every phase boundary"),
    ("warmup", "learning-rate warmup steps"),
    ("peak_lr", "learning rate at the end of warmup"),
    ("floor_lr", "learning rate at step 0 of warmup"),
    ("batch_tokens", "token budget of a training batch"),
    ("seed", "training seed"),
    ("valid_bleu", "greedy validation BLEU after every epoch"),
    ("beam", "beam width (1 = greedy)"),
    ("length_penalty", "length-normalization exponent"),
    ("penalty_kind", "exponent | offset"),
    ("greedy_floor", "keep the greedy output when it outscores the beam"),
    ("eval_search", "search for intermediate phase-end BLEU: greedy | beam"),
    ("seeds", "seeds of the multi-run harnesses"),
    ("jobs", "parallel runs in the harnesses"),
    ("sweep_layers", "encoder layer counts of the size sweep"),
    ("sweep_widths", "encoder widths of the size sweep"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: SynthTaskSpec,
    pub model: ModelConfig,
    pub mlm_steps: u64,
    pub mlm: MlmOptions,
    pub variant: Variant,
    pub plan: PhasePlan,
    pub schedule: LrSchedule,
    pub batch_tokens: usize,
    pub seed: u64,
    pub valid_bleu: bool,
    pub beam: BeamConfig,
    pub eval_beam: bool,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub sweep_layers: Vec<usize>,
    pub sweep_widths: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bert = MicroBertConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            dropout: 0.3,
            max_len: 64,
            vocab: 0,
        };
        RunConfig {
            task: SynthTaskSpec::default(),
            model: ModelConfig {
                src_vocab: 0,
                tgt_vocab: 0,
                d_model: 32,
                d_ff: 128,
                n_heads: 4,
                n_layers: 2,
                dropout: 0.3,
                max_len: 64,
                attn_scale: AttnScale::PerHead,
                combiner: CombinerKind::Gated,
                use_bert: true,
                encdec_self_keys: true,
                label_smoothing: 0.0,
                bert,
            },
            mlm_steps: 2000,
            mlm: MlmOptions::default(),
            variant: Variant::M0,
            plan: PhasePlan {
                epochs: [40, 10, 10],
                average_window: 10,
                ..PhasePlan::default()
            },
            schedule: LrSchedule::default(),
            batch_tokens: 4096,
            seed: 1,
            valid_bleu: true,
            beam: BeamConfig::default(),
            eval_beam: false,
            seeds: vec![1, 2, 3],
            jobs: 1,
            sweep_layers: vec![1, 2, 4],
            sweep_widths: vec![16, 32, 64],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| UsageError(format!("invalid value `{value}` for `{key}`")).into())
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(UsageError(format!("invalid value `{value}` for `{key}` (expected true/false)")).into()),
    }
}

pub fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// The desk-scale preset used by the acceptance suite.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.task.train = 6000;
        c.model.dropout = 0.1;
        c.model.bert.dropout = 0.1;
        c.mlm_steps = 1000;
        c.plan.epochs = [8, 2, 4];
        c.plan.average_window = 5;
        c.schedule = LrSchedule {
            warmup: 400,
            peak: 3e-3,
            floor: 1e-7,
        };
        c.batch_tokens = 1024;
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => {
                let keep_seed = self.task.seed;
                let (train, valid, test) = (self.task.train, self.task.valid, self.task.test);
                self.task = match v {
                    "cipher" => SynthTaskSpec::default(),
                    "copy" => SynthTaskSpec::copy_task(),
                    _ => bail!(UsageError(format!("unknown task `{v}` (expected cipher or copy)"))),
                };
                self.task.seed = keep_seed;
                (self.task.train, self.task.valid, self.task.test) = (train, valid, test);
            }
            "content_vocab" => self.task.content_vocab = parse(key, v)?,
            "polysemous" => self.task.polysemous = parse(key, v)?,
            "min_len" => self.task.min_len = parse(key, v)?,
            "max_len" => self.task.max_len = parse(key, v)?,
            "reorder" => self.task.reorder = parse_bool(key, v)?,
            "topic_bias" => self.task.topic_bias = parse(key, v)?,
            "train_size" => self.task.train = parse(key, v)?,
            "valid_size" => self.task.valid = parse(key, v)?,
            "test_size" => self.task.test = parse(key, v)?,
            "data_seed" => self.task.seed = parse(key, v)?,
            "d_model" => self.model.d_model = parse(key, v)?,
            "d_ff" => self.model.d_ff = parse(key, v)?,
            "heads" => self.model.n_heads = parse(key, v)?,
            "layers" => self.model.n_layers = parse(key, v)?,
            "dropout" => self.model.dropout = parse(key, v)?,
            "max_positions" => {
                self.model.max_len = parse(key, v)?;
                self.model.bert.max_len = self.model.max_len;
            }
            "attn_scale" => {
                self.model.attn_scale = match v {
                    "per_head" => AttnScale::PerHead,
                    "model" => AttnScale::Model,
                    _ => bail!(UsageError(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "encdec_self_keys" => self.model.encdec_self_keys = parse_bool(key, v)?,
            "label_smoothing" => self.model.label_smoothing = parse(key, v)?,
            "bert_layers" => self.model.bert.n_layers = parse(key, v)?,
            "bert_width" => self.model.bert.d_model = parse(key, v)?,
            "bert_heads" => self.model.bert.n_heads = parse(key, v)?,
            "bert_ff" => self.model.bert.d_ff = parse(key, v)?,
            "bert_dropout" => self.model.bert.dropout = parse(key, v)?,
            "mlm_steps" => self.mlm_steps = parse(key, v)?,
            "mlm_mask_rate" => self.mlm.mask_rate = parse(key, v)?,
            "mlm_batch_tokens" => self.mlm.batch_tokens = parse(key, v)?,
            "mlm_warmup" => self.mlm.schedule.warmup = parse(key, v)?,
            "mlm_peak_lr" => self.mlm.schedule.peak = parse(key, v)?,
            "variant" => self.variant = Variant::parse(v).map_err(|e| UsageError(e.to_string()))?,
            "phase_epochs" => {
                let e: Vec<usize> = parse_list(key, v)?;
                let [a, b, c] = e[..] else {
                    bail!(UsageError(format!("`{key}` needs three comma-separated values, got `{v}`")));
                };
                self.plan.epochs = [a, b, c];
            }
            "convergence_delta" => self.plan.convergence_delta = parse(key, v)?,
            "convergence_window" => self.plan.convergence_window = parse(key, v)?,
            "accumulation" => self.plan.accumulation = parse(key, v)?,
            "average_window" => self.plan.average_window = parse(key, v)?,
            "patience" => self.plan.patience = parse(key, v)?,
            "reset_optimizer" => self.plan.reset_optimizer = parse_bool(key, v)?,
            "warmup" => self.schedule.warmup = parse(key, v)?,
            "peak_lr" => self.schedule.peak = parse(key, v)?,
            "floor_lr" => self.schedule.floor = parse(key, v)?,
            "batch_tokens" => self.batch_tokens = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "valid_bleu" => self.valid_bleu = parse_bool(key, v)?,
            "beam" => self.beam.width = parse(key, v)?,
            "length_penalty" => self.beam.length_penalty = parse(key, v)?,
            "penalty_kind" => {
                self.beam.penalty_kind = match v {
                    "exponent" => LengthPenalty::Exponent,
                    "offset" => LengthPenalty::Offset,
                    _ => bail!(UsageError(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "greedy_floor" => self.beam.greedy_floor = parse_bool(key, v)?,
            "eval_search" => {
                self.eval_beam = match v {
                    "greedy" => false,
                    "beam" => true,
                    _ => bail!(UsageError(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "seeds" => self.seeds = parse_list(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "sweep_layers" => self.sweep_layers = parse_list(key, v)?,
            "sweep_widths" => self.sweep_widths = parse_list(key, v)?,
            _ => bail!(UsageError(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let t = &self.task;
        let m = &self.model;
        match key {
            "task" => match t.kind {
                TaskKind::MarkerCipher => "cipher".into(),
                TaskKind::Copy => "copy".into(),
            },
            "content_vocab" => t.content_vocab.to_string(),
            "polysemous" => t.polysemous.to_string(),
            "min_len" => t.min_len.to_string(),
            "max_len" => t.max_len.to_string(),
            "reorder" => t.reorder.to_string(),
            "topic_bias" => t.topic_bias.to_string(),
            "train_size" => t.train.to_string(),
            "valid_size" => t.valid.to_string(),
            "test_size" => t.test.to_string(),
            "data_seed" => t.seed.to_string(),
            "d_model" => m.d_model.to_string(),
            "d_ff" => m.d_ff.to_string(),
            "heads" => m.n_heads.to_string(),
            "layers" => m.n_layers.to_string(),
            "dropout" => m.dropout.to_string(),
            "max_positions" => m.max_len.to_string(),
            "attn_scale" => match m.attn_scale {
                AttnScale::PerHead => "per_head".into(),
                AttnScale::Model => "model".into(),
            },
            "encdec_self_keys" => m.encdec_self_keys.to_string(),
            "label_smoothing" => m.label_smoothing.to_string(),
            "bert_layers" => m.bert.n_layers.to_string(),
            "bert_width" => m.bert.d_model.to_string(),
            "bert_heads" => m.bert.n_heads.to_string(),
            "bert_ff" => m.bert.d_ff.to_string(),
            "bert_dropout" => m.bert.dropout.to_string(),
            "mlm_steps" => self.mlm_steps.to_string(),
            "mlm_mask_rate" => self.mlm.mask_rate.to_string(),
            "mlm_batch_tokens" => self.mlm.batch_tokens.to_string(),
            "mlm_warmup" => self.mlm.schedule.warmup.to_string(),
            "mlm_peak_lr" => self.mlm.schedule.peak.to_string(),
            "variant" => self.variant.to_string(),
            "phase_epochs" => join(&self.plan.epochs),
            "convergence_delta" => self.plan.convergence_delta.to_string(),
            "convergence_window" => self.plan.convergence_window.to_string(),
            "accumulation" => self.plan.accumulation.to_string(),
            "average_window" => self.plan.average_window.to_string(),
            "patience" => self.plan.patience.to_string(),
            "reset_optimizer" => self.plan.reset_optimizer.to_string(),
            "warmup" => self.schedule.warmup.to_string(),
            "peak_lr" => self.schedule.peak.to_string(),
            "floor_lr" => self.schedule.floor.to_string(),
            "batch_tokens" => self.batch_tokens.to_string(),
            "seed" => self.seed.to_string(),
            "valid_bleu" => self.valid_bleu.to_string(),
            "beam" => self.beam.width.to_string(),
            "length_penalty" => self.beam.length_penalty.to_string(),
            "penalty_kind" => match self.beam.penalty_kind {
                LengthPenalty::Exponent => "exponent".into(),
                LengthPenalty::Offset => "offset".into(),
            },
            "greedy_floor" => self.beam.greedy_floor.to_string(),
            "eval_search" => if self.eval_beam { "beam" } else { "greedy" }.into(),
            "seeds" => join(&self.seeds),
            "jobs" => self.jobs.to_string(),
            "sweep_layers" => join(&self.sweep_layers),
            "sweep_widths" => join(&self.sweep_widths),
            other => unreachable!("undocumented key {other}"),
        }
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let body = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        for (i, line) in body.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(UsageError(format!("{}:{}: expected `key = value`", path.display(), i + 1)));
            };
            self.set(k.trim(), v)
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_pairs(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let Some((k, v)) = p.split_once('=') else {
                bail!(UsageError(format!("expected KEY=VALUE, got `{p}`")));
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every key with its resolved value, in documentation order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    fn search(&self, beam: bool) -> SearchMode {
        if beam && self.beam.width > 1 {
            SearchMode::Beam(self.beam)
        } else if beam {
            SearchMode::Beam(BeamConfig { width: 1, ..self.beam })
        } else {
            SearchMode::Greedy
        }
    }

    pub fn final_search(&self) -> SearchMode {
        self.search(true)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            variant: self.variant,
            plan: self.plan.clone(),
            schedule: self.schedule,
            batch_tokens: self.batch_tokens,
            seed: self.seed,
            valid_bleu: self.valid_bleu,
            eval_search: self.search(self.eval_beam),
            final_search: self.final_search(),
        }
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            task: self.task.clone(),
            train: self.train_config(),
            mlm_steps: self.mlm_steps,
            mlm: self.mlm.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            bail!(UsageError("`jobs` must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            bail!(UsageError("`seeds` must list at least one seed".into()));
        }
        let mut tc = self.train_config();
        // vocabulary sizes are only known once the data is loaded
        tc.model.src_vocab = SPECIAL_PLACEHOLDER;
        tc.model.tgt_vocab = SPECIAL_PLACEHOLDER;
        tc.model.bert.vocab = SPECIAL_PLACEHOLDER;
        tc.validate().map_err(|e| UsageError(e.to_string()))?;
        self.task.validate().map_err(|e| UsageError(e.to_string()))?;
        self.beam.width.checked_sub(1).ok_or_else(|| UsageError("`beam` must be at least 1".into()))?;
        Ok(())
    }
}

const SPECIAL_PLACEHOLDER: usize = 8;
