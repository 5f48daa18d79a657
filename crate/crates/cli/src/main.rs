//! `amst`: data preparation, staged training, transfer, evaluation,
//! ablation and sweep over one output directory.
//!
//! Layout of the output directory:
//!
//! | path                     | written by     |
//! |--------------------------|----------------|
//! | `data/`                  | `prepare-data` |
//! | `pretrain.ckpt`          | `pretrain`     |
//! | `mask.ckpt`              | `train-mask`   |
//! | `mlm_stage{1,2,3}.ckpt`  | `train-mlm`    |
//! | `*.trace.jsonl`          | training stages|
//! | `transfer.jsonl`         | `transfer`     |
//! | `eval_report.json`       | `evaluate`     |
//! | `ablation.csv`, `ablation.json` | `ablate` |
//! | `sweep.csv`              | `sweep`        |

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amst_core::corpus::{load_dataset, tokenize, DatasetFormat, Label, LabeledSentence, Sentence};
use amst_core::evalsuite::{
    ablation_csv, ablation_suite, evaluate_models, sensitivity_sweep, sweep_csv, train_judge, EvalReport,
    WeightParam,
};
use amst_core::mask_model::{threshold_split, MaskClassifier, SplitMode};
use amst_core::senti_mlm::Decode;
use amst_core::trainer::{
    checkpoint_path, load_mask_checkpoint, load_mlm_checkpoint, mask_checkpoint, mlm_checkpoint, mlm_examples,
    mlm_stage1, mlm_stage2, mlm_stage3, new_discriminator, new_mlm, prepare_data, pretrain, trace_path, train_mask,
    PreparedData, StageLog, TrainConfig,
};
use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "amst", version, about = "Adaptive-masking sentiment transfer")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for every artifact.
    #[arg(long, global = true, env = "AMST_OUT_DIR", default_value = "amst-out")]
    out: PathBuf,

    /// Configuration override `key=value`; repeatable, wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load or generate the corpus and build the vocabulary.
    PrepareData,
    /// Pretrain the attention classifier and the frozen sentiment classifier.
    Pretrain,
    /// Train the masker adversarially.
    TrainMask,
    /// Train the language model through its three stages.
    TrainMlm,
    /// Rewrite sentences toward a target sentiment; one JSON record per line.
    Transfer {
        /// Sentence to transfer; repeatable.
        #[arg(long)]
        text: Vec<String>,
        /// File with one sentence per line.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Target sentiment.
        #[arg(long, value_parser = parse_label)]
        target: Label,
        /// Output file; `-` for standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score test-set transfers and write the evaluation report.
    Evaluate {
        /// Evaluate on this file instead of the prepared test split.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Retrain with each ablated loss term and compare against the full model.
    Ablate {
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Retrain over the weight grid for one or more loss weights.
    Sweep {
        /// `lambda1`..`lambda4`, `theta1`..`theta4` or `all`; repeatable.
        #[arg(long, required = true)]
        param: Vec<String>,
    },
}

fn parse_label(s: &str) -> Result<Label, String> {
    Label::parse(s).ok_or_else(|| format!("expected `positive` or `negative`, got `{s}`"))
}

fn load_config(cli: &Cli) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn write_trace(out: &Path, log: &StageLog) -> anyhow::Result<()> {
    log.write_jsonl(&trace_path(out, &log.name))?;
    Ok(())
}

fn report_metrics(log: &StageLog) {
    for (k, v) in &log.metrics {
        println!("{}: {k} = {v:.4}", log.name);
    }
    if let Some(last) = log.epoch_means().last() {
        let parts: Vec<String> = last.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        println!("{}: last epoch {}", log.name, parts.join(" "));
    }
}

#[derive(Serialize)]
struct TransferRecord<'a> {
    input: String,
    output: String,
    target: Label,
    masked: &'a [usize],
    tokens: Vec<String>,
}

fn read_sentences(text: &[String], input: Option<&Path>) -> anyhow::Result<Vec<String>> {
    let mut lines: Vec<String> = text.to_vec();
    if let Some(p) = input {
        let f = fs::File::open(p).with_context(|| format!("cannot open `{}`", p.display()))?;
        for line in io::BufReader::new(f).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                lines.push(line);
            }
        }
    }
    if lines.is_empty() {
        bail!(amst_core::Error::EmptyInput("no sentences to transfer; pass --text or --input".into()));
    }
    Ok(lines)
}

fn transfer(
    out: &Path,
    text: &[String],
    input: Option<&Path>,
    target: Label,
    output: Option<&Path>,
) -> anyhow::Result<()> {
    let data = PreparedData::load(&data_dir(out))?;
    let (masker, _) = load_mask_checkpoint(&checkpoint_path(out, "mask"), &data, "train-mask")?;
    let (mlm, _) = load_mlm_checkpoint(&checkpoint_path(out, "mlm_stage3"), &data, "train-mlm")?;
    let v = &data.vocab;
    let mut lines = String::new();
    for raw in read_sentences(text, input)? {
        let tokens = tokenize(&raw);
        if tokens.is_empty() {
            continue;
        }
        let x = v.encode(&Sentence {
            tokens,
            label: target.opposite(),
        })?;
        let pair = split_one(&masker, &x)?;
        let r = mlm.transfer(&x, &pair, target, Decode::Greedy, v)?;
        // Content positions keep the original spelling, including unknown words.
        let filled = r.output_tokens(v);
        let tokens: Vec<String> = (0..x.len())
            .map(|i| if pair.is_masked(i) { &filled[i] } else { &x.tokens()[i] }.clone())
            .collect();
        let record = TransferRecord {
            input: x.text(),
            output: tokens.join(" "),
            target,
            masked: &r.masked,
            tokens,
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    match output {
        Some(p) if p == Path::new("-") => io::stdout().write_all(lines.as_bytes())?,
        Some(p) => fs::write(p, lines)?,
        None => {
            let p = out.join("transfer.jsonl");
            fs::write(&p, lines)?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn split_one(masker: &MaskClassifier, x: &LabeledSentence) -> anyhow::Result<amst_core::mask_model::DisentangledPair> {
    let (probs, _) = masker.infer(&[x])?.remove(0);
    Ok(threshold_split(&probs, masker.tau(), SplitMode::Hard)?)
}

fn evaluate(cfg: &TrainConfig, out: &Path, test: Option<&Path>) -> anyhow::Result<()> {
    let mut data = PreparedData::load(&data_dir(out))?;
    if let Some(p) = test {
        let loaded = load_dataset(p, DatasetFormat::from_path(p))?;
        if loaded.sentences.is_empty() {
            bail!(amst_core::Error::EmptyInput(format!(
                "test file `{}` has no sentences",
                p.display()
            )));
        }
        data.test = data.vocab.encode_all(&loaded.sentences)?;
    }
    let (masker, _) = load_mask_checkpoint(&checkpoint_path(out, "mask"), &data, "train-mask")?;
    let (mlm, _) = load_mlm_checkpoint(&checkpoint_path(out, "mlm_stage3"), &data, "train-mlm")?;
    let judge = match data.grammar {
        Some(_) => None,
        None => Some(train_judge(cfg, &data)?),
    };
    let e = evaluate_models(&data, &masker, &mlm, judge.as_ref())?;
    let report = EvalReport::new(cfg, &e);
    let path = out.join("eval_report.json");
    report.save(&path)?;
    println!("judge: {}", report.judge);
    println!("accuracy: {:.2}", report.transfer_accuracy);
    println!("bleu: {:.2}", report.bleu);
    if let Some(m) = report.masking {
        println!("masking precision: {:.4}", m.precision);
        println!("masking recall: {:.4}", m.recall);
    }
    println!("reconstruction: {:.4}", report.reconstruction);
    println!("wrote {}", path.display());
    Ok(())
}

fn judge_for(cfg: &TrainConfig, data: &PreparedData) -> anyhow::Result<Option<amst_core::cnn::CnnSentimentDiscriminator>> {
    Ok(match data.grammar {
        Some(_) => None,
        None => Some(train_judge(cfg, data)?),
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    eprintln!("amst: seed {}", cfg.seed);
    fs::create_dir_all(out).with_context(|| format!("cannot create `{}`", out.display()))?;
    match cli.command {
        Command::PrepareData => {
            let data = prepare_data(&cfg)?;
            data.save(&data_dir(out))?;
            println!(
                "prepared {} train, {} held-out, {} test sentences; vocabulary {}; {} rejected",
                data.train.len(),
                data.heldout.len(),
                data.test.len(),
                data.vocab.len(),
                data.rejected
            );
        }
        Command::Pretrain => {
            let data = PreparedData::load(&data_dir(out))?;
            let (m, a, log) = pretrain(&cfg, &data)?;
            mask_checkpoint(&cfg, &data, "pretrain", &m, &a).save(&checkpoint_path(out, "pretrain"))?;
            write_trace(out, &log)?;
            report_metrics(&log);
        }
        Command::TrainMask => {
            let data = PreparedData::load(&data_dir(out))?;
            let (mut m, mut a) = load_mask_checkpoint(&checkpoint_path(out, "pretrain"), &data, "pretrain")?;
            let log = train_mask(&cfg, &data, &mut m, &mut a)?;
            mask_checkpoint(&cfg, &data, "mask", &m, &a).save(&checkpoint_path(out, "mask"))?;
            write_trace(out, &log)?;
            report_metrics(&log);
        }
        Command::TrainMlm => {
            let data = PreparedData::load(&data_dir(out))?;
            let (masker, _) = load_mask_checkpoint(&checkpoint_path(out, "mask"), &data, "train-mask")?;
            let examples = mlm_examples(&data, &masker)?;
            let mut mlm = new_mlm(&cfg, &data)?;
            let mut disc = new_discriminator(&cfg, &data);
            for stage in ["mlm_stage1", "mlm_stage2", "mlm_stage3"] {
                let log = match stage {
                    "mlm_stage1" => mlm_stage1(&cfg, &data, &examples, &mut mlm)?,
                    "mlm_stage2" => mlm_stage2(&cfg, &data, &examples, &mut mlm)?,
                    _ => mlm_stage3(&cfg, &data, &examples, &mut mlm, &mut disc)?,
                };
                let d = (stage == "mlm_stage3").then_some(&disc);
                mlm_checkpoint(&cfg, &data, stage, &mlm, d).save(&checkpoint_path(out, stage))?;
                write_trace(out, &log)?;
                report_metrics(&log);
            }
        }
        Command::Transfer {
            text,
            input,
            target,
            output,
        } => transfer(out, &text, input.as_deref(), target, output.as_deref())?,
        Command::Evaluate { test } => evaluate(&cfg, out, test.as_deref())?,
        Command::Ablate { seeds } => {
            let data = PreparedData::load(&data_dir(out))?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let judge = judge_for(&cfg, &data)?;
            let rows = ablation_suite(&cfg, &data, &seeds, judge.as_ref())?;
            for r in &rows {
                println!(
                    "{:<10} acc {:6.2} ± {:5.2}  bleu {:6.2} ± {:5.2}",
                    r.name, r.acc_mean, r.acc_std, r.bleu_mean, r.bleu_std
                );
            }
            let path = out.join("ablation.csv");
            fs::write(&path, ablation_csv(&rows))?;
            fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
            println!("wrote {}", path.display());
        }
        Command::Sweep { param } => {
            let params: Vec<WeightParam> = if param.iter().any(|p| p == "all") {
                WeightParam::ALL.to_vec()
            } else {
                param.iter().map(|p| WeightParam::parse(p)).collect::<Result<_, _>>()?
            };
            let data = PreparedData::load(&data_dir(out))?;
            let judge = judge_for(&cfg, &data)?;
            let mut rows = Vec::new();
            for p in params {
                let part = sensitivity_sweep(&cfg, &data, p, judge.as_ref())?;
                for r in &part {
                    println!("{} = {}: acc {:.2} bleu {:.2}", r.param, r.value, r.acc, r.bleu);
                }
                rows.extend(part);
            }
            let path = out.join("sweep.csv");
            fs::write(&path, sweep_csv(&rows))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// `{"error": kind, "message": text}` on one line.
fn error_line(kind: &str, message: &str) -> String {
    let one_line = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    serde_json::json!({ "error": kind, "message": one_line }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", error_line("usage", &e.to_string().replace("error: ", "")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<amst_core::Error>()
                .map(|c| c.kind())
                .unwrap_or("other");
            eprintln!("{}", error_line(kind, &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
