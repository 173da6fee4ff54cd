use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use bertjam::data::{read_bitext, read_sentences, write_bitext, Vocab};
use bertjam::decode::{decode_corpus, write_hypotheses, BeamConfig, SearchMode};
use bertjam::eval::{bleu, compare_baseline, prepare_task, run_ablation, run_sweep, TaskData};
use bertjam::microbert::MicroBert;
use bertjam::model::BertJamModel;
use bertjam::trainer::{load_model, Checkpoint, RunStatus, Trainer, Variant};
use clap::{Args, Parser, Subcommand};

use bertjam_cli::{parse_list, RunConfig, UsageError, KEYS};

#[derive(Parser)]
#[command(name = "bertjam", version, about = "Joint-attention translation with a pre-trained encoder, on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable); applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Start from the desk-scale preset instead of the defaults
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bitext
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// cipher | copy
        #[arg(long)]
        task: Option<String>,
    },
    /// Pre-train the encoder with masked language modeling
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory with train.src (generated in memory when absent)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staged training of one variant
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory
        #[arg(long)]
        out: PathBuf,
        /// Pre-trained encoder checkpoint
        #[arg(long)]
        bert: Option<PathBuf>,
        /// Pre-train the encoder before training
        #[arg(long)]
        pretrain_bert: bool,
        #[arg(long)]
        variant: Option<String>,
        /// Epoch budgets, e.g. 8,2,2
        #[arg(long)]
        phase_epochs: Option<String>,
        /// Continue the run saved in --out
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs (the run can be resumed)
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Translate a source file
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "greedy")]
        beam: Option<usize>,
        #[arg(long)]
        greedy: bool,
        /// Directory holding src.vocab and tgt.vocab (default: the model's)
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file
    Bleu {
        hyp: PathBuf,
        reference: PathBuf,
        /// Directory for bleu.json
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train the four ablation variants
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        phase_epochs: Option<String>,
    },
    /// Sweep the pre-trained encoder's depth and width
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        layers: Option<String>,
        #[arg(long)]
        widths: Option<String>,
        #[arg(long)]
        phase_epochs: Option<String>,
    },
    /// Compare the full model against the plain Transformer
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// List the configuration keys
    Keys {
        /// Print resolved values instead of descriptions
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        values: bool,
    },
}

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = if common.desk { RunConfig::desk() } else { RunConfig::default() };
    if let Some(path) = &common.config {
        if !path.exists() {
            return Err(bertjam::Error::Io {
                path: path.clone(),
                source: std::io::Error::from(std::io::ErrorKind::NotFound),
            }
            .into());
        }
        cfg.apply_file(path)?;
    }
    cfg.apply_pairs(&common.set)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    for (key, value) in extra {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| bertjam::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| bertjam::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn load_task(cfg: &RunConfig, data: Option<&Path>) -> Result<TaskData> {
    match data {
        Some(dir) => Ok(TaskData::from_bitext(read_bitext(dir)?)),
        None => Ok(prepare_task(&cfg.task)?),
    }
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("config.txt"), &cfg.render())
}

fn cmd_gen(common: &Common, out: &Path, task: Option<String>) -> Result<()> {
    let mut cfg = resolve(common, &[("task", task)])?;
    if let Some(s) = common.seed {
        cfg.task.seed = s;
    }
    // generate fully in memory first so invalid task settings leave no files
    let bitext = bertjam::data::generate_bitext(&cfg.task)?;
    let task = TaskData::from_bitext(bitext);
    write_bitext(out, &task.bitext)?;
    task.src_vocab.save(&out.join("src.vocab"))?;
    task.tgt_vocab.save(&out.join("tgt.vocab"))?;
    eprintln!(
        "wrote {} / {} / {} sentence pairs to {}",
        task.bitext.train.len(),
        task.bitext.valid.len(),
        task.bitext.test.len(),
        out.display()
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig, task: &TaskData) -> Result<MicroBert> {
    let exp = cfg.experiment();
    eprintln!("pre-training the encoder for {} steps", cfg.mlm_steps);
    Ok(exp.pretrain(task, &cfg.model.bert, cfg.seed)?)
}

fn cmd_pretrain(common: &Common, data: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = resolve(common, &[])?;
    let task = load_task(&cfg, data)?;
    let bert = pretrain(&cfg, &task)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    bert.save(out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: &Common,
    data: Option<&Path>,
    out: &Path,
    bert_path: Option<&Path>,
    pretrain_bert: bool,
    variant: Option<String>,
    phase_epochs: Option<String>,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<()> {
    let cfg = resolve(common, &[("variant", variant), ("phase_epochs", phase_epochs)])?;
    let task = load_task(&cfg, data)?;
    let mut log = |m: &bertjam::trainer::EpochMetrics| {
        eprintln!(
            "phase {} epoch {} step {} lr {:.3e} train {:.4} valid {:.4}{}",
            m.phase,
            m.epoch,
            m.step,
            m.lr,
            m.train_loss,
            m.valid_loss,
            m.valid_bleu.map(|b| format!(" bleu {b:.4}")).unwrap_or_default()
        )
    };
    let mut trainer = if resume {
        Trainer::resume(out, &task.data)?
    } else {
        echo_config(out, &cfg)?;
        task.src_vocab.save(&out.join("src.vocab"))?;
        task.tgt_vocab.save(&out.join("tgt.vocab"))?;
        let exp = cfg.experiment();
        let tc = exp.run_config(&task, cfg.variant, cfg.seed, None);
        let bert = if cfg.variant == Variant::Baseline {
            None
        } else if let Some(p) = bert_path {
            Some(MicroBert::load(p)?)
        } else if pretrain_bert {
            let b = pretrain(&cfg, &task)?;
            b.save(&out.join("bert.ckpt"))?;
            Some(b)
        } else {
            bail!(UsageError(
                "this variant needs a pre-trained encoder: pass --bert FILE or --pretrain-bert".into()
            ));
        };
        if let Some(b) = &bert {
            if *b.config() != tc.model.bert {
                bail!(UsageError(format!(
                    "encoder checkpoint shape {:?} differs from the configured encoder {:?}",
                    b.config(),
                    tc.model.bert
                )));
            }
        }
        Trainer::new(tc, bert.as_ref(), &task.data, Some(out))?
    };
    match trainer.run(stop_after, &mut log)? {
        RunStatus::Interrupted { epochs } => {
            eprintln!("stopped after {epochs} epochs; continue with --resume");
        }
        RunStatus::Finished(o) => {
            for s in &o.report.stages {
                eprintln!(
                    "phase {:<3} epochs {:>2} valid loss {:.4} valid BLEU {:.4} test BLEU {:.4}",
                    s.phase, s.epochs, s.valid_loss, s.valid_bleu, s.test_bleu
                );
            }
            println!("test BLEU {:.4}", o.report.test_bleu);
        }
    }
    Ok(())
}

fn cmd_decode(
    common: &Common,
    model_path: &Path,
    input: &Path,
    out: &Path,
    beam: Option<usize>,
    greedy: bool,
    vocab: Option<&Path>,
) -> Result<()> {
    let explicit = common.config.is_some() || !common.set.is_empty() || common.desk;
    let cfg = resolve(common, &[("beam", beam.map(|b| b.to_string()))])?;
    let vocab_dir = vocab
        .map(Path::to_path_buf)
        .unwrap_or_else(|| model_path.parent().map(Path::to_path_buf).unwrap_or_default());
    let src_vocab = Vocab::load(&vocab_dir.join("src.vocab"))?;
    let tgt_vocab = Vocab::load(&vocab_dir.join("tgt.vocab"))?;
    let model = if explicit {
        // structure from the configuration, weights from the checkpoint
        let ck = Checkpoint::load(model_path)?;
        let saved: bertjam::model::ModelConfig = serde_json::from_value(ck.config.clone())?;
        let mut mc = cfg.model.clone();
        mc.src_vocab = src_vocab.len();
        mc.tgt_vocab = tgt_vocab.len();
        mc.bert.vocab = src_vocab.len();
        mc.combiner = saved.combiner;
        mc.use_bert = saved.use_bert;
        let mut model = BertJamModel::new(&mc, &mut bertjam::kernel::RngStream::new(0, 0).rng())?;
        if let Ok(ps) = serde_json::from_value(ck.meta.clone()) {
            model.restore_phase_state(ps)?;
        }
        model.store.load_weights(&ck.records)?;
        model
    } else {
        load_model(model_path)?
    };
    let sentences = read_sentences(input)?;
    let sources: Vec<Vec<usize>> = sentences.iter().map(|s| src_vocab.encode(s)).collect();
    let mode = if greedy {
        SearchMode::Greedy
    } else {
        SearchMode::Beam(BeamConfig {
            width: cfg.beam.width,
            ..cfg.beam
        })
    };
    let hyps = decode_corpus(&model, &sources, mode)?;
    write_hypotheses(out, &tgt_vocab, &hyps)?;
    eprintln!("decoded {} sentences into {}", hyps.len(), out.display());
    Ok(())
}

fn cmd_bleu(hyp: &Path, reference: &Path, out: &Path) -> Result<()> {
    let h = read_sentences(hyp)?;
    let r = read_sentences(reference)?;
    if h.len() != r.len() {
        return Err(bertjam::Error::Data(format!(
            "{} has {} lines but {} has {}",
            hyp.display(),
            h.len(),
            reference.display(),
            r.len()
        ))
        .into());
    }
    let report = bleu(&h, &r, 4)?;
    let precisions: Vec<String> = report
        .precisions
        .iter()
        .map(|p| p.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into()))
        .collect();
    println!(
        "BLEU = {:.4} (precisions {}; BP {:.4}; hyp {} / ref {} tokens)",
        report.score,
        precisions.join(" / "),
        report.brevity_penalty,
        report.candidate_length,
        report.reference_length
    );
    create_dir(out)?;
    write_file(&out.join("bleu.json"), &serde_json::to_string_pretty(&report)?)
}

fn harness_config(common: &Common, seeds: Option<String>, jobs: Option<usize>, phase_epochs: Option<String>) -> Result<RunConfig> {
    resolve(
        common,
        &[
            ("seeds", seeds),
            ("jobs", jobs.map(|j| j.to_string())),
            ("phase_epochs", phase_epochs),
        ],
    )
}

fn run() -> Result<()> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            e.print()?;
            return Ok(());
        }
        Err(e) => {
            let _ = e.print();
            return Err(UsageError("invalid command line".into()).into());
        }
    };
    match cli.command {
        Command::Gen { common, out, task } => cmd_gen(&common, &out, task),
        Command::Pretrain { common, data, out } => cmd_pretrain(&common, data.as_deref(), &out),
        Command::Train {
            common,
            data,
            out,
            bert,
            pretrain_bert,
            variant,
            phase_epochs,
            resume,
            stop_after,
        } => cmd_train(
            &common,
            data.as_deref(),
            &out,
            bert.as_deref(),
            pretrain_bert,
            variant,
            phase_epochs,
            resume,
            stop_after,
        ),
        Command::Decode {
            common,
            model,
            input,
            out,
            beam,
            greedy,
            vocab,
        } => cmd_decode(&common, &model, &input, &out, beam, greedy, vocab.as_deref()),
        Command::Bleu { hyp, reference, out } => cmd_bleu(&hyp, &reference, &out),
        Command::Ablate {
            common,
            data,
            out,
            seeds,
            jobs,
            phase_epochs,
        } => {
            let cfg = harness_config(&common, seeds, jobs, phase_epochs)?;
            let task = load_task(&cfg, data.as_deref())?;
            echo_config(&out, &cfg)?;
            let report = run_ablation(&cfg.experiment(), &task, &cfg.seeds, cfg.jobs)?;
            report.write(&out)?;
            print!("{}", report.table_text());
            for r in report.runs.iter().filter(|r| r.error.is_some()) {
                eprintln!("run {} seed {} failed: {}", r.variant, r.seed, r.error.as_deref().unwrap_or(""));
            }
            Ok(())
        }
        Command::Sweep {
            common,
            data,
            out,
            seeds,
            jobs,
            layers,
            widths,
            phase_epochs,
        } => {
            let mut cfg = harness_config(&common, seeds, jobs, phase_epochs)?;
            if let Some(l) = layers {
                cfg.sweep_layers = parse_list("layers", &l)?;
            }
            if let Some(w) = widths {
                cfg.sweep_widths = parse_list("widths", &w)?;
            }
            let task = load_task(&cfg, data.as_deref())?;
            echo_config(&out, &cfg)?;
            let report = run_sweep(&cfg.experiment(), &task, &cfg.sweep_layers, &cfg.sweep_widths, &cfg.seeds, cfg.jobs)?;
            report.write(&out)?;
            print!("{}", report.table_text());
            println!("total runtime {:.1}s", report.total_runtime_s);
            Ok(())
        }
        Command::Compare {
            common,
            data,
            out,
            seeds,
            jobs,
        } => {
            let cfg = harness_config(&common, seeds, jobs, None)?;
            let task = load_task(&cfg, data.as_deref())?;
            echo_config(&out, &cfg)?;
            let report = compare_baseline(&cfg.experiment(), &task, &cfg.seeds, cfg.jobs)?;
            report.write(&out)?;
            print!("{}", report.csv());
            if let Some(d) = report.median_difference {
                println!("median difference {d:+.4}");
            }
            Ok(())
        }
        Command::Keys { common, values } => {
            if values {
                print!("{}", resolve(&common, &[])?.render());
            } else {
                for (k, doc) in KEYS {
                    println!("{k:<20} {doc}");
                }
            }
            Ok(())
        }
    }
}

/// 1 for usage errors, 2 for data errors, 3 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if let Some(e) = err.downcast_ref::<bertjam::Error>() {
        if e.is_numerical() {
            return 3;
        }
        if e.is_data() {
            return 2;
        }
        return 1;
    }
    if err.downcast_ref::<std::io::Error>().is_some() || err.downcast_ref::<serde_json::Error>().is_some() {
        return 2;
    }
    1
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
