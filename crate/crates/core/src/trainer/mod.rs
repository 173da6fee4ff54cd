//! Staged training with checkpoint averaging and resumable run directories.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{average_checkpoints, Checkpoint, CheckpointRing, FORMAT_VERSION};
pub use optim::{AdamState, LrSchedule};

use crate::blocks::CombinerKind;
use crate::data::{batch_iterator, Batch, EncodedPair};
use crate::decode::{decode_corpus, greedy_batched, BeamConfig, SearchMode};
use crate::error::{Error, Result};
use crate::eval::bleu;
use crate::kernel::{RngStream, Tape, WeightSet};
use crate::microbert::MicroBert;
use crate::model::{BertJamModel, ModelConfig, PhaseState};

const INIT_STREAM: u64 = 11;
const TRAIN_STREAM: u64 = 12;

/// Training recipes compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Gated combiner, three phases.
    M0,
    /// Plain weighted sum of the encoder layers.
    M1,
    /// Last encoder layer only; no combiner phase.
    M2,
    /// Combiner trained from the start (phases 1 and 2 merged).
    M3,
    /// No pre-trained encoder at all.
    Baseline,
}

impl Variant {
    pub const ABLATION: [Variant; 4] = [Variant::M0, Variant::M1, Variant::M2, Variant::M3];

    pub fn name(self) -> &'static str {
        match self {
            Variant::M0 => "M0",
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
            Variant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m0" => Ok(Variant::M0),
            "m1" => Ok(Variant::M1),
            "m2" => Ok(Variant::M2),
            "m3" => Ok(Variant::M3),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::invalid(format!("unknown variant `{other}`"))),
        }
    }

    /// The model configuration this variant trains, derived from `base`.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::M0 | Variant::M3 => {
                cfg.use_bert = true;
                cfg.combiner = CombinerKind::Gated;
            }
            Variant::M1 => {
                cfg.use_bert = true;
                cfg.combiner = CombinerKind::WeightedSum;
            }
            Variant::M2 => {
                cfg.use_bert = true;
                cfg.combiner = CombinerKind::LastLayer;
            }
            Variant::Baseline => cfg.use_bert = false,
        }
        cfg
    }

    pub fn stages(self, plan: &PhasePlan) -> Vec<Stage> {
        let [e1, e2, e3] = plan.epochs;
        let stage = |phase, label: &str, max_epochs| Stage {
            phase,
            label: label.to_string(),
            max_epochs,
        };
        match self {
            Variant::M0 | Variant::M1 | Variant::Baseline => {
                vec![stage(1, "1", e1), stage(2, "2", e2), stage(3, "3", e3)]
            }
            Variant::M2 => vec![stage(1, "1+2", e1 + e2), stage(3, "3", e3)],
            Variant::M3 => vec![stage(2, "1+2", e1 + e2), stage(3, "3", e3)],
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

/// One contiguous block of epochs trained under one phase.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub phase: u8,
    pub label: String,
    pub max_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    /// Epoch budgets of phases 1, 2 and 3.
    pub epochs: [usize; 3],
    /// Phases 1 and 2 end early once validation loss has not improved by
    /// more than `convergence_delta` for `convergence_window` epochs.
    pub convergence_delta: f64,
    pub convergence_window: usize,
    /// Batches whose gradients are averaged into one update.
    pub accumulation: usize,
    /// Number of recent epoch checkpoints averaged for evaluation.
    pub average_window: usize,
    /// Phase 3 stops after this many epochs without improvement of the
    /// averaged model's validation loss.
    pub patience: usize,
    pub reset_optimizer: bool,
}

impl Default for PhasePlan {
    fn default() -> Self {
        PhasePlan {
            epochs: [10, 5, 10],
            convergence_delta: 1e-3,
            convergence_window: 3,
            accumulation: 1,
            average_window: 5,
            patience: 2,
            reset_optimizer: true,
        }
    }
}

impl PhasePlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs.iter().any(|&e| e == 0) {
            return Err(Error::invalid("every phase needs at least one epoch"));
        }
        if self.accumulation == 0 || self.average_window == 0 || self.patience == 0 || self.convergence_window == 0 {
            return Err(Error::invalid("accumulation, window, patience and convergence window must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Base model; the variant overrides the combiner and encoder usage.
    pub model: ModelConfig,
    pub variant: Variant,
    pub plan: PhasePlan,
    pub schedule: LrSchedule,
    pub batch_tokens: usize,
    pub seed: u64,
    /// Greedy validation BLEU after every epoch.
    pub valid_bleu: bool,
    /// Search used for phase-end validation and test BLEU.
    pub eval_search: SearchMode,
    /// Search used for the final test BLEU.
    pub final_search: SearchMode,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, variant: Variant) -> Self {
        TrainConfig {
            model,
            variant,
            plan: PhasePlan::default(),
            schedule: LrSchedule::default(),
            batch_tokens: 4096,
            seed: 1,
            valid_bleu: true,
            eval_search: SearchMode::Greedy,
            final_search: SearchMode::Beam(BeamConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.variant.model_config(&self.model).validate()?;
        if self.batch_tokens == 0 {
            return Err(Error::invalid("batch token budget must be positive"));
        }
        self.schedule.lr_at(1).map(|_| ())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<EncodedPair>,
    pub valid: Vec<EncodedPair>,
    pub test: Vec<EncodedPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// Stage label (`1`, `2`, `3` or `1+2`).
    pub phase: String,
    /// Epoch within the stage, from 1.
    pub epoch: usize,
    pub global_epoch: u64,
    /// Optimizer updates so far, across all stages.
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    /// Loss that drives the stage's stopping rule: the current weights in
    /// phases 1 and 2, the averaged checkpoint in phase 3.
    pub valid_loss: f64,
    pub valid_bleu: Option<f64>,
}

pub const METRICS_HEADER: &str = "phase,epoch,step,lr,train_loss,valid_loss,valid_bleu";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let bleu = r.valid_bleu.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.phase, r.epoch, r.step, r.lr, r.train_loss, r.valid_loss, bleu
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Converged,
    EarlyStop,
}

/// Evaluation of the averaged model at the end of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub phase: String,
    pub epochs: usize,
    pub stop: StopReason,
    pub valid_loss: f64,
    pub valid_bleu: f64,
    pub test_bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    /// Averaged-model validation loss when fine-tuning started.
    pub start_loss: f64,
    /// Lowest averaged-model validation loss seen during fine-tuning epochs.
    pub lowest_epoch_loss: f64,
    /// 0 when no fine-tuning epoch beat the starting point.
    pub best_epoch: usize,
    pub early_stopped: bool,
}

impl FinetuneSummary {
    pub fn dipped(&self) -> bool {
        self.lowest_epoch_loss < self.start_loss
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seed: u64,
    pub stages: Vec<StageSummary>,
    pub metrics: Vec<EpochMetrics>,
    pub finetune: Option<FinetuneSummary>,
    pub steps: u64,
    pub valid_bleu: f64,
    pub test_bleu: f64,
    pub runtime_s: f64,
}

pub struct RunOutcome {
    /// The returned model: the best averaged checkpoint of phase 3.
    pub model: BertJamModel,
    pub report: RunReport,
}

pub enum RunStatus {
    Finished(Box<RunOutcome>),
    /// Stopped on request after the given number of epochs this session.
    Interrupted { epochs: usize },
}

impl RunStatus {
    pub fn finished(self) -> Result<RunOutcome> {
        match self {
            RunStatus::Finished(o) => Ok(*o),
            RunStatus::Interrupted { .. } => Err(Error::invalid("run was interrupted before finishing")),
        }
    }
}

/// Token-averaged validation loss, evaluated without dropout.
pub fn corpus_loss(model: &BertJamModel, corpus: &[EncodedPair], batch_tokens: usize) -> Result<f64> {
    let batches = batch_iterator(corpus, batch_tokens, None)?;
    let mut sum = 0.0;
    let mut count = 0;
    for b in &batches {
        let (s, c) = model.eval_loss(b)?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::invalid("empty evaluation corpus"));
    }
    Ok(sum / count as f64)
}

/// Corpus BLEU (as a fraction) of decoded sources against their targets.
pub fn corpus_bleu(model: &BertJamModel, corpus: &[EncodedPair], mode: SearchMode) -> Result<f64> {
    let sources: Vec<Vec<usize>> = corpus.iter().map(|p| p.src.clone()).collect();
    let hyps = match mode {
        SearchMode::Greedy => greedy_batched(model, &sources, 64)?,
        SearchMode::Beam(_) => decode_corpus(model, &sources, mode)?,
    };
    let words = |ids: &[usize]| ids.iter().map(|t| t.to_string()).collect::<Vec<_>>();
    let cands: Vec<Vec<String>> = hyps.iter().map(|h| words(h.output())).collect();
    let refs: Vec<Vec<String>> = corpus.iter().map(|p| words(&p.tgt)).collect();
    Ok(bleu(&cands, &refs, 4)?.score)
}

/// Accumulates the mean of the per-batch loss gradients into the store
/// (after zeroing it) and returns the mean loss.
pub fn accumulate_gradients(model: &mut BertJamModel, batches: &[Batch], dropout_seed: u64) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::invalid("no batches to accumulate"));
    }
    model.store.zero_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut total = 0.0;
    for b in batches {
        let grads = {
            let tape = Tape::training(&model.store, ChaCha8Rng::seed_from_u64(rng.random()));
            let loss = model.loss(&tape, b)?;
            total += loss.value().item();
            tape.backward(loss)?
        };
        model.store.accumulate(grads.params());
    }
    let k = batches.len() as f64;
    model.store.scale_grads(1.0 / k);
    Ok(total / k)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct RunState {
    stage: usize,
    stage_entered: bool,
    epoch_in_stage: usize,
    global_epoch: u64,
    step: u64,
    phase_state: Option<PhaseState>,
    best_loss: Option<f64>,
    since_best: usize,
    stop: Option<StopReason>,
    finetune: Option<FinetuneSummary>,
    ring_epochs: Vec<u64>,
    metrics: Vec<EpochMetrics>,
    summaries: Vec<StageSummary>,
    elapsed_s: f64,
    // token-weighted running sums of the current epoch are not persisted:
    // state is only saved at epoch boundaries
}

/// Drives one training run through its stages.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a TrainData,
    dir: Option<PathBuf>,
    model: BertJamModel,
    adam: AdamState,
    ring: CheckpointRing,
    best: Option<WeightSet>,
    state: RunState,
    stages: Vec<Stage>,
}

impl<'a> Trainer<'a> {
    /// A fresh run. With a pre-trained encoder its weights are loaded;
    /// otherwise the encoder keeps its random initialization. `dir`, if
    /// given, receives checkpoints, metrics and the report.
    pub fn new(config: TrainConfig, bert: Option<&MicroBert>, data: &'a TrainData, dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let model_cfg = config.variant.model_config(&config.model);
        let mut rng = RngStream::new(config.seed, INIT_STREAM).rng();
        let mut model = BertJamModel::new(&model_cfg, &mut rng)?;
        if let (true, Some(b)) = (model_cfg.use_bert, bert) {
            model.load_bert(b)?;
        }
        let dir = dir.map(Path::to_path_buf);
        if let Some(d) = &dir {
            fs::create_dir_all(d.join("ring")).map_err(|e| Error::io(d, e))?;
            fs::write(d.join("config.json"), serde_json::to_string_pretty(&config)?)
                .map_err(|e| Error::io(d.join("config.json"), e))?;
        }
        let ring = CheckpointRing::new(config.plan.average_window, dir.as_ref().map(|d| d.join("ring")))?;
        let stages = config.variant.stages(&config.plan);
        Ok(Trainer {
            config,
            data,
            dir,
            model,
            adam: AdamState::new(),
            ring,
            best: None,
            state: RunState::default(),
            stages,
        })
    }

    /// Continues a run from the state saved in `dir` after its last
    /// completed epoch.
    pub fn resume(dir: &Path, data: &'a TrainData) -> Result<Self> {
        let saved = Checkpoint::load(&dir.join("state.ckpt"))?;
        let config: TrainConfig = serde_json::from_value(saved.config.clone())?;
        let state: RunState = serde_json::from_value(saved.meta.clone())?;
        let model_cfg = config.variant.model_config(&config.model);
        let mut model = BertJamModel::new(&model_cfg, &mut RngStream::new(config.seed, INIT_STREAM).rng())?;
        if let Some(ps) = state.phase_state {
            model.restore_phase_state(ps)?;
        }
        model.store.load_weights(&saved.records_without("adam."))?;
        let adam = AdamState::from_records(&model.store, saved.meta["adam_step"].as_u64().unwrap_or(0), &saved.records_with("adam."))?;
        let mut ring = CheckpointRing::new(config.plan.average_window, Some(dir.join("ring")))?;
        let folded = model.phase_state().folded;
        for &e in &state.ring_epochs {
            let ck = Checkpoint::load(&CheckpointRing::file_for(&dir.join("ring"), e))?;
            let mut w = ck.records;
            let was_folded = ck.meta["folded"].as_bool().unwrap_or(false);
            if folded && !was_folded {
                model.fold_weight_set(&mut w);
            }
            ring.restore(e, w);
        }
        let best_path = dir.join("best.ckpt");
        let best = if state.finetune.is_some() && best_path.exists() {
            Some(Checkpoint::load(&best_path)?.records)
        } else {
            None
        };
        let stages = config.variant.stages(&config.plan);
        Ok(Trainer {
            config,
            data,
            dir: Some(dir.to_path_buf()),
            model,
            adam,
            ring,
            best,
            state,
            stages,
        })
    }

    pub fn model(&self) -> &BertJamModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    fn phase(&self) -> u8 {
        self.stages[self.state.stage].phase
    }

    fn averaged_model(&self) -> Result<BertJamModel> {
        let mut m = self.model.clone();
        if !self.ring.is_empty() {
            m.store.load_weights(&self.ring.average()?)?;
        }
        Ok(m)
    }

    fn with_weights(&self, w: &WeightSet) -> Result<BertJamModel> {
        let mut m = self.model.clone();
        m.store.load_weights(w)?;
        Ok(m)
    }

    fn enter_stage(&mut self) -> Result<()> {
        let phase = self.phase();
        let was_folded = self.model.phase_state().folded;
        self.model.set_phase(phase)?;
        if !was_folded && self.model.phase_state().folded {
            let model = &self.model;
            self.ring.for_each_mut(|w| model.fold_weight_set(w));
        }
        if self.config.plan.reset_optimizer && self.state.stage > 0 {
            self.adam = AdamState::new();
        }
        self.state.best_loss = None;
        self.state.since_best = 0;
        self.state.stop = None;
        self.state.epoch_in_stage = 0;
        if phase == 3 {
            let start = self.averaged_model()?;
            let loss = corpus_loss(&start, &self.data.valid, self.config.batch_tokens)?;
            self.best = Some(start.store.weights());
            self.state.best_loss = Some(loss);
            self.state.finetune = Some(FinetuneSummary {
                start_loss: loss,
                lowest_epoch_loss: f64::MAX,
                best_epoch: 0,
                early_stopped: false,
            });
            self.save_best()?;
        }
        self.state.stage_entered = true;
        self.state.phase_state = Some(self.model.phase_state());
        Ok(())
    }

    fn train_epoch(&mut self) -> Result<(f64, f64)> {
        let phase = self.phase();
        let diverged = |e: Error| match e {
            Error::NonFinite(detail) => Error::Diverged { phase, detail },
            other => other,
        };
        let stream = RngStream::new(self.config.seed, TRAIN_STREAM).child(self.state.global_epoch);
        let mut rng = stream.rng();
        let batches = batch_iterator(&self.data.train, self.config.batch_tokens, Some(&mut rng))?;
        let mut loss_sum = 0.0;
        let mut groups = 0usize;
        let mut lr = 0.0;
        for group in batches.chunks(self.config.plan.accumulation) {
            let loss = accumulate_gradients(&mut self.model, group, rng.random()).map_err(diverged)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    phase,
                    detail: format!("loss {loss} at step {}", self.state.step + 1),
                });
            }
            self.state.step += 1;
            lr = self.config.schedule.lr_at(self.state.step)?;
            self.adam.step(&mut self.model.store, lr).map_err(diverged)?;
            loss_sum += loss;
            groups += 1;
        }
        Ok((loss_sum / groups.max(1) as f64, lr))
    }

    fn after_epoch(&mut self, train_loss: f64, lr: f64) -> Result<()> {
        let phase = self.phase();
        let weights = self.model.store.weights();
        let ring_ck = self.dir.as_ref().map(|_| Checkpoint {
            config: serde_json::to_value(&self.model.config).expect("config serializes"),
            meta: serde_json::json!({
                "global_epoch": self.state.global_epoch,
                "phase": phase,
                "folded": self.model.phase_state().folded,
            }),
            records: weights.clone(),
        });
        self.ring.push(self.state.global_epoch, weights, ring_ck.as_ref())?;
        self.state.ring_epochs = self.ring.epochs();

        let plan = &self.config.plan;
        let eval_model = if phase == 3 { self.averaged_model()? } else { self.model.clone() };
        let valid_loss = corpus_loss(&eval_model, &self.data.valid, self.config.batch_tokens)?;
        if !valid_loss.is_finite() {
            return Err(Error::Diverged {
                phase,
                detail: format!("validation loss {valid_loss}"),
            });
        }
        let valid_bleu = if self.config.valid_bleu {
            Some(corpus_bleu(&eval_model, &self.data.valid, SearchMode::Greedy)?)
        } else {
            None
        };
        let epoch = self.state.epoch_in_stage;
        if phase == 3 {
            let ft = self.state.finetune.as_mut().expect("fine-tuning tracker");
            ft.lowest_epoch_loss = ft.lowest_epoch_loss.min(valid_loss);
            if valid_loss < self.state.best_loss.expect("phase 3 baseline") {
                self.state.best_loss = Some(valid_loss);
                self.state.since_best = 0;
                ft.best_epoch = epoch;
                self.best = Some(eval_model.store.weights());
                self.save_best()?;
            } else {
                self.state.since_best += 1;
                if self.state.since_best >= plan.patience {
                    ft.early_stopped = true;
                    self.state.stop = Some(StopReason::EarlyStop);
                }
            }
        } else {
            match self.state.best_loss {
                Some(b) if valid_loss >= b - plan.convergence_delta => {
                    self.state.since_best += 1;
                    if self.state.since_best >= plan.convergence_window {
                        self.state.stop = Some(StopReason::Converged);
                    }
                }
                _ => {
                    self.state.best_loss = Some(valid_loss);
                    self.state.since_best = 0;
                }
            }
        }
        self.state.metrics.push(EpochMetrics {
            phase: self.stages[self.state.stage].label.clone(),
            epoch,
            global_epoch: self.state.global_epoch,
            step: self.state.step,
            lr,
            train_loss,
            valid_loss,
            valid_bleu,
        });
        Ok(())
    }

    fn finish_stage(&mut self) -> Result<()> {
        let stage = &self.stages[self.state.stage];
        let last = self.state.stage + 1 == self.stages.len();
        let model = match (&self.best, stage.phase) {
            (Some(w), 3) => self.with_weights(w)?,
            _ => self.averaged_model()?,
        };
        let search = if last { self.config.final_search } else { self.config.eval_search };
        let summary = StageSummary {
            phase: stage.label.clone(),
            epochs: self.state.epoch_in_stage,
            stop: self.state.stop.unwrap_or(StopReason::Budget),
            valid_loss: corpus_loss(&model, &self.data.valid, self.config.batch_tokens)?,
            valid_bleu: corpus_bleu(&model, &self.data.valid, search)?,
            test_bleu: corpus_bleu(&model, &self.data.test, search)?,
        };
        self.state.summaries.push(summary);
        self.state.stage += 1;
        self.state.stage_entered = false;
        Ok(())
    }

    fn save_best(&self) -> Result<()> {
        if let (Some(d), Some(w)) = (&self.dir, &self.best) {
            Checkpoint {
                config: serde_json::to_value(&self.model.config)?,
                meta: serde_json::json!({ "kind": "best_average" }),
                records: w.clone(),
            }
            .save(&d.join("best.ckpt"))?;
        }
        Ok(())
    }

    fn save_state(&self) -> Result<()> {
        let Some(d) = &self.dir else { return Ok(()) };
        let mut meta = serde_json::to_value(&self.state)?;
        meta["adam_step"] = self.adam.step.into();
        let mut records = self.model.store.weights();
        let adam = self.adam.to_records(&self.model.store);
        records.names.extend(adam.names);
        records.tensors.extend(adam.tensors);
        Checkpoint {
            config: serde_json::to_value(&self.config)?,
            meta,
            records,
        }
        .save(&d.join("state.ckpt"))?;
        fs::write(d.join("metrics.csv"), metrics_csv(&self.state.metrics)).map_err(|e| Error::io(d.join("metrics.csv"), e))
    }

    /// Runs until the last stage ends, or until `max_epochs` epochs have
    /// been trained in this call. `on_epoch` sees every metrics row.
    pub fn run(&mut self, max_epochs: Option<usize>, on_epoch: &mut dyn FnMut(&EpochMetrics)) -> Result<RunStatus> {
        let started = Instant::now();
        let base_elapsed = self.state.elapsed_s;
        let mut trained = 0;
        while self.state.stage < self.stages.len() {
            if max_epochs.is_some_and(|m| trained >= m) {
                return Ok(RunStatus::Interrupted { epochs: trained });
            }
            if !self.state.stage_entered {
                self.enter_stage()?;
            }
            let stage = &self.stages[self.state.stage];
            if self.state.stop.is_some() || self.state.epoch_in_stage >= stage.max_epochs {
                self.finish_stage()?;
                self.state.elapsed_s = base_elapsed + started.elapsed().as_secs_f64();
                self.save_state()?;
                continue;
            }
            let (train_loss, lr) = self.train_epoch()?;
            self.state.epoch_in_stage += 1;
            self.after_epoch(train_loss, lr)?;
            self.state.global_epoch += 1;
            self.state.phase_state = Some(self.model.phase_state());
            self.state.elapsed_s = base_elapsed + started.elapsed().as_secs_f64();
            self.save_state()?;
            on_epoch(self.state.metrics.last().expect("row pushed"));
            trained += 1;
        }
        let model = match &self.best {
            Some(w) => self.with_weights(w)?,
            None => self.averaged_model()?,
        };
        let last = self.state.summaries.last().expect("at least one stage");
        let report = RunReport {
            variant: self.config.variant,
            seed: self.config.seed,
            stages: self.state.summaries.clone(),
            metrics: self.state.metrics.clone(),
            finetune: self.state.finetune.clone(),
            steps: self.state.step,
            valid_bleu: last.valid_bleu,
            test_bleu: last.test_bleu,
            runtime_s: base_elapsed + started.elapsed().as_secs_f64(),
        };
        if let Some(d) = &self.dir {
            Checkpoint {
                config: serde_json::to_value(&model.config)?,
                meta: serde_json::to_value(model.phase_state())?,
                records: model.store.weights(),
            }
            .save(&d.join("final.ckpt"))?;
            fs::write(d.join("report.json"), serde_json::to_string_pretty(&report)?)
                .map_err(|e| Error::io(d.join("report.json"), e))?;
        }
        Ok(RunStatus::Finished(Box::new(RunOutcome { model, report })))
    }
}

/// Trains one variant start to finish.
pub fn run_three_phase(
    config: &TrainConfig,
    bert: Option<&MicroBert>,
    data: &TrainData,
    dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<RunOutcome> {
    Trainer::new(config.clone(), bert, data, dir)?.run(None, on_epoch)?.finished()
}

/// Loads a model saved as `final.ckpt` (or any checkpoint of model weights).
pub fn load_model(path: &Path) -> Result<BertJamModel> {
    let ck = Checkpoint::load(path)?;
    let cfg: ModelConfig = serde_json::from_value(ck.config)?;
    let mut model = BertJamModel::new(&cfg, &mut RngStream::new(0, INIT_STREAM).rng())?;
    if let Ok(ps) = serde_json::from_value::<PhaseState>(ck.meta) {
        model.restore_phase_state(ps)?;
    }
    model.store.load_weights(&ck.records.clone())?;
    Ok(model)
}

#[cfg(test)]
mod tests;
