//! `b2t2`: generate synthetic data, pretrain, finetune, evaluate, ensemble,
//! and run the grid and ablations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use b2t2::data::{self, Example};
use b2t2::harness::{self, EvalReport, EvalTask, TrainConfig};
use b2t2::model::{self, Model};
use b2t2::synthetic::{self, SyntheticSpec};
use b2t2::vocab::Vocab;
use b2t2::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "b2t2", version, about = "Early-fusion multimodal transformers at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic grounded-QA dataset.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption pretraining (impostor detection plus masked LM).
    Pretrain {
        /// captions.jsonl
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune on multiple-choice records.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "q2ar")]
        task: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Evaluate the summed logits of several checkpoints.
    Ensemble {
        #[arg(long, value_delimiter = ',')]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the learning-rate × epochs × seeds grid.
    Grid {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare model variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variants: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let text = report.to_json()?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    println!("{}", report.to_json()?);
    Ok(())
}

fn load_with_vocab(path: &Path) -> Result<(Vec<Example>, Vocab)> {
    let examples = data::load_examples(path)?;
    let vocab = data::vocab_for(path, &examples)?;
    Ok((examples, vocab))
}

/// `val.jsonl` beside the training file, else the training file itself.
fn validation_for(path: &Path, train: &[Example]) -> Result<Vec<Example>> {
    let sibling = path.with_file_name("val.jsonl");
    if sibling.exists() && sibling != path {
        data::load_examples(&sibling)
    } else {
        Ok(train.to_vec())
    }
}

fn print_losses(losses: &[f64]) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        eprintln!("{} steps, loss {first:.4} -> {last:.4}", losses.len());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, out } => {
            let spec = SyntheticSpec::from_file(&spec)?;
            let generated = synthetic::generate(&spec)?;
            synthetic::write(&generated, &out)?;
            eprintln!(
                "wrote {} train / {} val records to {}",
                generated.train.len(),
                generated.val.len(),
                out.display()
            );
        }
        Command::Pretrain { data: path, config, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let captions = data::load_captions(&path)?;
            let vocab = match path.with_file_name("vocab.txt") {
                v if v.exists() => Vocab::read(&v)?,
                _ => Vocab::build(captions.iter().map(|(_, c)| c.as_str())),
            };
            let mut model = harness::build_model(&cfg, &vocab)?;
            let outcome = harness::pretrain(&cfg, &mut model, &captions, &vocab)?;
            print_losses(&outcome.losses);
            model.save(&out, &vocab)?;
        }
        Command::Train { data: path, config, init, out } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if init.is_some() {
                cfg.init_checkpoint = init;
            }
            let (examples, vocab) = load_with_vocab(&path)?;
            let mut model = harness::build_model(&cfg, &vocab)?;
            let outcome = harness::train(&cfg, &mut model, &examples, &vocab)?;
            print_losses(&outcome.losses);
            model.save(&out, &vocab)?;
        }
        Command::Eval { data: path, ckpt, task, report } => {
            let task: EvalTask = task.parse()?;
            let (model, vocab) = Model::load(&ckpt)?;
            let examples = data::load_examples(&path)?;
            let r = harness::evaluate(&model, &examples, &vocab, task)?;
            write_report(&report, &r)?;
        }
        Command::Ensemble { ckpts, data: path, report } => {
            let mut members = Vec::with_capacity(ckpts.len());
            let mut vocab: Option<Vocab> = None;
            for c in &ckpts {
                let (m, v) = Model::load(c)?;
                match &vocab {
                    Some(prev) if *prev != v => {
                        return Err(Error::Checkpoint(format!(
                            "{} uses a different vocabulary",
                            c.display()
                        )))
                    }
                    _ => vocab = Some(v),
                }
                members.push(m);
            }
            let vocab = vocab.ok_or_else(|| Error::Checkpoint("no checkpoints given".into()))?;
            let examples = data::load_examples(&path)?;
            let r = harness::ensemble(&members, &examples, &vocab, EvalTask::Q2ar)?;
            write_report(&report, &r)?;
        }
        Command::Grid { data: path, config, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let (train, vocab) = load_with_vocab(&path)?;
            let val = validation_for(&path, &train)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let runs = harness::run_grid(&cfg, &train, &val, &vocab, Some(&out))?;
            for r in &runs {
                println!("{}\tqa={:?}\tqar={:?}\tq2ar={:?}", r.name(), r.report.qa, r.report.qar, r.report.q2ar);
            }
        }
        Command::Ablate { data: path, variants, config, out } => {
            let cfg = match config {
                Some(c) => TrainConfig::from_file(&c)?,
                None => TrainConfig::default(),
            };
            let variants = model::parse_variants(&variants)?;
            let (train, vocab) = load_with_vocab(&path)?;
            let val = validation_for(&path, &train)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let rows = harness::run_ablation(&cfg, &variants, &train, &val, &vocab, Some(&out))?;
            print!("{}", harness::format_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
