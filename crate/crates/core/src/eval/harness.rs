//! Multi-run experiments: the variant ablation, the encoder-size sweep and
//! the comparison against the plain Transformer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_vocab, encode_corpus, generate_bitext, Bitext, SynthTaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::kernel::RngStream;
use crate::microbert::{pretrain_mlm, MicroBert, MicroBertConfig, MlmOptions};
use crate::trainer::{metrics_csv, run_three_phase, RunReport, TrainConfig, TrainData, Variant};

const BERT_STREAM: u64 = 21;

/// One synthetic task plus the recipe every run of an experiment shares.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub task: SynthTaskSpec,
    /// Base training configuration; variant, seed and encoder size are
    /// overridden per run. Vocabulary sizes are filled in from the task.
    pub train: TrainConfig,
    pub mlm_steps: u64,
    pub mlm: MlmOptions,
}

pub struct TaskData {
    pub bitext: Bitext,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub data: TrainData,
}

/// Generates the task and encodes it with vocabularies built from its
/// training split.
pub fn prepare_task(spec: &SynthTaskSpec) -> Result<TaskData> {
    Ok(TaskData::from_bitext(generate_bitext(spec)?))
}

impl TaskData {
    pub fn from_bitext(bitext: Bitext) -> Self {
        let (src_vocab, tgt_vocab) = build_vocab([&bitext.train[..]]);
        let data = TrainData {
            train: encode_corpus(&bitext.train, &src_vocab, &tgt_vocab),
            valid: encode_corpus(&bitext.valid, &src_vocab, &tgt_vocab),
            test: encode_corpus(&bitext.test, &src_vocab, &tgt_vocab),
        };
        TaskData {
            bitext,
            src_vocab,
            tgt_vocab,
            data,
        }
    }
}

impl Experiment {
    /// Training configuration for one run.
    pub fn run_config(&self, task: &TaskData, variant: Variant, seed: u64, bert: Option<&MicroBertConfig>) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.variant = variant;
        cfg.seed = seed;
        cfg.model.src_vocab = task.src_vocab.len();
        cfg.model.tgt_vocab = task.tgt_vocab.len();
        if let Some(b) = bert {
            cfg.model.bert = b.clone();
        }
        cfg.model.bert.vocab = task.src_vocab.len();
        cfg
    }

    /// Pre-trains an encoder of the given shape on the task's training
    /// sources. Every seed gets its own pre-training stream.
    pub fn pretrain(&self, task: &TaskData, bert: &MicroBertConfig, seed: u64) -> Result<MicroBert> {
        let mut cfg = bert.clone();
        cfg.vocab = task.src_vocab.len();
        let sources: Vec<Vec<usize>> = task.data.train.iter().map(|p| p.src.clone()).collect();
        pretrain_mlm(&sources, &cfg, self.mlm_steps, &self.mlm, RngStream::new(seed, BERT_STREAM))
    }

    pub fn encoder_config(&self, n_layers: usize, d_model: usize) -> MicroBertConfig {
        MicroBertConfig {
            n_layers,
            d_model,
            d_ff: 4 * d_model,
            ..self.train.model.bert.clone()
        }
    }
}

/// Outcome of one training run; failures are kept, not raised.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn test_bleu(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.test_bleu)
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {jobs} workers: {e}")))
}

/// Trains every `(variant, seed)` pair, at most `jobs` at a time. The
/// encoder for each seed is pre-trained once and shared by the variants.
pub fn run_variants(exp: &Experiment, task: &TaskData, runs: &[(Variant, u64)], jobs: usize) -> Result<Vec<RunRecord>> {
    let mut seeds: Vec<u64> = runs
        .iter()
        .filter(|(v, _)| *v != Variant::Baseline)
        .map(|r| r.1)
        .collect();
    seeds.sort_unstable();
    seeds.dedup();
    let pool = pool(jobs)?;
    pool.install(|| {
        let berts: Vec<(u64, Result<MicroBert>)> = seeds
            .par_iter()
            .map(|&s| (s, exp.pretrain(task, &exp.train.model.bert, s)))
            .collect();
        Ok(runs
            .par_iter()
            .map(|&(variant, seed)| {
                let bert = berts.iter().find(|b| b.0 == seed).map(|b| &b.1);
                let cfg = exp.run_config(task, variant, seed, None);
                let result = match bert {
                    Some(Err(e)) => Err(Error::invalid(format!("pre-training failed: {e}"))),
                    Some(Ok(b)) => run_three_phase(&cfg, Some(b), &task.data, None, &mut |_| {}),
                    None => run_three_phase(&cfg, None, &task.data, None, &mut |_| {}),
                };
                record(variant, seed, result.map(|o| o.report))
            })
            .collect())
    })
}

fn record(variant: Variant, seed: u64, result: Result<RunReport>) -> RunRecord {
    match result {
        Ok(report) => RunRecord {
            variant,
            seed,
            report: Some(report),
            error: None,
        },
        Err(e) => RunRecord {
            variant,
            seed,
            report: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_curves(dir: &Path, name: &str, report: &RunReport) -> Result<()> {
    let curves = dir.join("curves");
    fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
    write(&curves.join(format!("{name}.csv")), &metrics_csv(&report.metrics))
}

fn write_failures(dir: &Path, rows: &[(String, String)]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let mut s = String::from("run,error\n");
    for (run, err) in rows {
        let _ = writeln!(s, "{run},\"{}\"", err.replace('"', "'"));
    }
    write(&dir.join("failures.csv"), &s)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Stage label; `1+2` marks a merged stage.
    pub phase: String,
    /// Median epochs trained in the stage.
    pub epochs: f64,
    pub valid_bleu: f64,
    pub test_bleu: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunRecord>,
    /// Medians over seeds, per variant and stage.
    pub table: Vec<AblationRow>,
}

impl AblationReport {
    pub fn from_runs(runs: Vec<RunRecord>) -> Self {
        let mut table = Vec::new();
        for v in Variant::ABLATION {
            let reports: Vec<&RunReport> = runs
                .iter()
                .filter(|r| r.variant == v)
                .filter_map(|r| r.report.as_ref())
                .collect();
            let Some(first) = reports.first() else { continue };
            for (i, stage) in first.stages.iter().enumerate() {
                let col = |f: &dyn Fn(&crate::trainer::StageSummary) -> f64| {
                    median(&reports.iter().map(|r| f(&r.stages[i])).collect::<Vec<_>>()).expect("nonempty")
                };
                table.push(AblationRow {
                    variant: v,
                    phase: stage.phase.clone(),
                    epochs: col(&|s| s.epochs as f64),
                    valid_bleu: col(&|s| s.valid_bleu),
                    test_bleu: col(&|s| s.test_bleu),
                });
            }
        }
        AblationReport { runs, table }
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("variant,phase,epochs,valid_bleu,test_bleu\n");
        for r in &self.table {
            let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.phase, r.epochs, r.valid_bleu, r.test_bleu);
        }
        s
    }

    /// One row per run and stage.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("variant,seed,phase,epochs,valid_bleu,test_bleu\n");
        for run in &self.runs {
            for st in run.report.iter().flat_map(|r| &r.stages) {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    run.variant, run.seed, st.phase, st.epochs, st.valid_bleu, st.test_bleu
                );
            }
        }
        s
    }

    /// Test BLEU per variant (rows) and phase (columns); merged stages
    /// span the phase 1 and 2 columns.
    pub fn table_text(&self) -> String {
        let mut s = String::from("variant | phase 1          | phase 2          | phase 3\n");
        for v in Variant::ABLATION {
            let rows: Vec<&AblationRow> = self.table.iter().filter(|r| r.variant == v).collect();
            if rows.is_empty() {
                let _ = writeln!(s, "{v:<7} | failed");
                continue;
            }
            let cell = |r: &AblationRow| format!("{:.4} ({} ep)", r.test_bleu, r.epochs);
            let mut line = format!("{v:<7}");
            for r in &rows {
                if r.phase == "1+2" {
                    let _ = write!(line, " | {:^35}", format!("{} [1+2 merged]", cell(r)));
                } else {
                    let _ = write!(line, " | {:<16}", cell(r));
                }
            }
            s.push_str(line.trim_end());
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("ablation.csv"), &self.csv())?;
        write(&dir.join("ablation_runs.csv"), &self.runs_csv())?;
        write(&dir.join("ablation_table.txt"), &self.table_text())?;
        let mut failures = Vec::new();
        for r in &self.runs {
            let name = format!("{}_seed{}", r.variant, r.seed);
            match (&r.report, &r.error) {
                (Some(rep), _) => write_curves(dir, &name, rep)?,
                (None, Some(e)) => failures.push((name, e.clone())),
                (None, None) => {}
            }
        }
        write_failures(dir, &failures)
    }
}

/// Trains the four ablation variants for every seed.
pub fn run_ablation(exp: &Experiment, task: &TaskData, seeds: &[u64], jobs: usize) -> Result<AblationReport> {
    let runs: Vec<(Variant, u64)> = seeds
        .iter()
        .flat_map(|&s| Variant::ABLATION.into_iter().map(move |v| (v, s)))
        .collect();
    Ok(AblationReport::from_runs(run_variants(exp, task, &runs, jobs)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepCell {
    pub l_b: usize,
    pub h_b: usize,
    pub seed: u64,
    pub test_bleu: Option<f64>,
    /// Pre-training plus training time.
    pub runtime_s: f64,
    pub error: Option<String>,
    #[serde(skip)]
    pub report: Option<RunReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub layers: Vec<usize>,
    pub widths: Vec<usize>,
    pub cells: Vec<SweepCell>,
    /// Median test BLEU per `(layers, width)`, row-major by layers.
    pub medians: Vec<Vec<Option<f64>>>,
    /// Pairs along a row (fixed layer count, growing width) where the
    /// larger encoder scores lower.
    pub row_inversions: usize,
    /// Same along a column (fixed width, growing layer count).
    pub column_inversions: usize,
    pub row_pairs: usize,
    pub column_pairs: usize,
    pub total_runtime_s: f64,
}

/// Pairs `i < j` of available values with `values[j] < values[i]`, and
/// the number of pairs compared.
pub fn inversions(values: &[Option<f64>]) -> (usize, usize) {
    let mut inv = 0;
    let mut pairs = 0;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            if let (Some(a), Some(b)) = (values[i], values[j]) {
                pairs += 1;
                if b < a {
                    inv += 1;
                }
            }
        }
    }
    (inv, pairs)
}

impl SweepReport {
    pub fn from_cells(layers: Vec<usize>, widths: Vec<usize>, cells: Vec<SweepCell>) -> Self {
        let medians: Vec<Vec<Option<f64>>> = layers
            .iter()
            .map(|&l| {
                widths
                    .iter()
                    .map(|&h| {
                        let v: Vec<f64> = cells
                            .iter()
                            .filter(|c| c.l_b == l && c.h_b == h)
                            .filter_map(|c| c.test_bleu)
                            .collect();
                        median(&v)
                    })
                    .collect()
            })
            .collect();
        let (mut ri, mut rp, mut ci, mut cp) = (0, 0, 0, 0);
        for row in &medians {
            let (i, p) = inversions(row);
            ri += i;
            rp += p;
        }
        for j in 0..widths.len() {
            let col: Vec<Option<f64>> = medians.iter().map(|r| r[j]).collect();
            let (i, p) = inversions(&col);
            ci += i;
            cp += p;
        }
        let total_runtime_s = cells.iter().map(|c| c.runtime_s).sum();
        SweepReport {
            layers,
            widths,
            cells,
            medians,
            row_inversions: ri,
            column_inversions: ci,
            row_pairs: rp,
            column_pairs: cp,
            total_runtime_s,
        }
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("L_B,H_B,seed,test_bleu,runtime_s\n");
        for c in &self.cells {
            let bleu = c.test_bleu.map(|b| b.to_string()).unwrap_or_else(|| "NaN".into());
            let _ = writeln!(s, "{},{},{},{},{:.3}", c.l_b, c.h_b, c.seed, bleu, c.runtime_s);
        }
        s
    }

    /// Median test BLEU with layer counts as rows and widths as columns.
    pub fn table_text(&self) -> String {
        let mut s = String::from("L_B \\ H_B");
        for h in &self.widths {
            let _ = write!(s, " | {h:>7}");
        }
        s.push('\n');
        for (l, row) in self.layers.iter().zip(&self.medians) {
            let _ = write!(s, "{l:<9}");
            for v in row {
                let _ = write!(s, " | {:>7}", fmt_opt(*v));
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "inversions: rows {}/{}, columns {}/{}",
            self.row_inversions, self.row_pairs, self.column_inversions, self.column_pairs
        );
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("sweep.csv"), &self.csv())?;
        write(&dir.join("sweep_table.txt"), &self.table_text())?;
        write(&dir.join("sweep_summary.json"), &serde_json::to_string_pretty(self)?)?;
        let mut failures = Vec::new();
        for c in &self.cells {
            let name = format!("L{}_H{}_seed{}", c.l_b, c.h_b, c.seed);
            match (&c.report, &c.error) {
                (Some(rep), _) => write_curves(dir, &name, rep)?,
                (None, Some(e)) => failures.push((name, e.clone())),
                (None, None) => {}
            }
        }
        write_failures(dir, &failures)
    }
}

/// One full run of the gated variant per encoder size and seed, each with
/// its own encoder pre-trained under the same budget.
pub fn run_sweep(
    exp: &Experiment,
    task: &TaskData,
    layers: &[usize],
    widths: &[usize],
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepReport> {
    let mut jobs_list = Vec::new();
    for &l in layers {
        for &h in widths {
            for &s in seeds {
                jobs_list.push((l, h, s));
            }
        }
    }
    let pool = pool(jobs)?;
    let cells = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(l_b, h_b, seed)| {
                let started = Instant::now();
                let mut bert_cfg = exp.encoder_config(l_b, h_b);
                bert_cfg.vocab = task.src_vocab.len();
                let result = bert_cfg
                    .validate()
                    .and_then(|_| exp.pretrain(task, &bert_cfg, seed))
                    .and_then(|bert| {
                        let cfg = exp.run_config(task, Variant::M0, seed, Some(bert.config()));
                        run_three_phase(&cfg, Some(&bert), &task.data, None, &mut |_| {})
                    });
                let runtime_s = started.elapsed().as_secs_f64();
                match result {
                    Ok(o) => SweepCell {
                        l_b,
                        h_b,
                        seed,
                        test_bleu: Some(o.report.test_bleu),
                        runtime_s,
                        error: None,
                        report: Some(o.report),
                    },
                    Err(e) => SweepCell {
                        l_b,
                        h_b,
                        seed,
                        test_bleu: None,
                        runtime_s,
                        error: Some(e.to_string()),
                        report: None,
                    },
                }
            })
            .collect()
    });
    Ok(SweepReport::from_cells(layers.to_vec(), widths.to_vec(), cells))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairedResult {
    pub seed: u64,
    pub baseline_bleu: Option<f64>,
    pub model_bleu: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineReport {
    pub pairs: Vec<PairedResult>,
    /// Median over seeds of (model - baseline) test BLEU, over seeds where
    /// both runs finished.
    pub median_difference: Option<f64>,
    pub baseline_runs: Vec<RunRecord>,
    pub model_runs: Vec<RunRecord>,
}

impl BaselineReport {
    pub fn from_runs(baseline_runs: Vec<RunRecord>, model_runs: Vec<RunRecord>) -> Self {
        let mut seeds: Vec<u64> = baseline_runs.iter().chain(&model_runs).map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let find = |runs: &[RunRecord], s: u64| runs.iter().find(|r| r.seed == s).and_then(RunRecord::test_bleu);
        let pairs: Vec<PairedResult> = seeds
            .iter()
            .map(|&s| PairedResult {
                seed: s,
                baseline_bleu: find(&baseline_runs, s),
                model_bleu: find(&model_runs, s),
            })
            .collect();
        let diffs: Vec<f64> = pairs
            .iter()
            .filter_map(|p| Some(p.model_bleu? - p.baseline_bleu?))
            .collect();
        BaselineReport {
            median_difference: median(&diffs),
            pairs,
            baseline_runs,
            model_runs,
        }
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("seed,baseline_bleu,model_bleu,difference\n");
        for p in &self.pairs {
            let diff = p.model_bleu.zip(p.baseline_bleu).map(|(m, b)| m - b);
            let _ = writeln!(
                s,
                "{},{},{},{}",
                p.seed,
                fmt_opt(p.baseline_bleu),
                fmt_opt(p.model_bleu),
                fmt_opt(diff)
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("baseline.csv"), &self.csv())?;
        write(&dir.join("baseline.json"), &serde_json::to_string_pretty(self)?)?;
        for r in self.baseline_runs.iter().chain(&self.model_runs) {
            if let Some(rep) = &r.report {
                write_curves(dir, &format!("{}_seed{}", r.variant, r.seed), rep)?;
            }
        }
        Ok(())
    }
}

/// The gated model against the same network without the pre-trained
/// encoder, on every seed.
pub fn compare_baseline(exp: &Experiment, task: &TaskData, seeds: &[u64], jobs: usize) -> Result<BaselineReport> {
    let runs: Vec<(Variant, u64)> = seeds
        .iter()
        .flat_map(|&s| [(Variant::Baseline, s), (Variant::M0, s)])
        .collect();
    let records = run_variants(exp, task, &runs, jobs)?;
    let (baseline, model): (Vec<RunRecord>, Vec<RunRecord>) =
        records.into_iter().partition(|r| r.variant == Variant::Baseline);
    Ok(BaselineReport::from_runs(baseline, model))
}
