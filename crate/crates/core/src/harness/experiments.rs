use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::{evaluate, EvalReport, EvalTask};
use super::train::{build_model, pretrain, train};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::vision::Image;
use crate::vocab::Vocab;

/// One cell of the hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init_checkpoint: bool,
    pub final_loss: f64,
    pub report: EvalReport,
}

impl GridRun {
    pub fn name(&self) -> String {
        format!(
            "lr{}_ep{}_seed{}{}",
            self.learning_rate,
            self.epochs,
            self.seed,
            if self.init_checkpoint { "_init" } else { "" }
        )
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains a fresh model for `cfg` and evaluates it on `val`.
pub fn train_and_evaluate(
    cfg: &TrainConfig,
    train_set: &[Example],
    val: &[Example],
    vocab: &Vocab,
    task: EvalTask,
) -> Result<(Model, f64, EvalReport)> {
    let mut model = build_model(cfg, vocab)?;
    let outcome = train(cfg, &mut model, train_set, vocab)?;
    let report = evaluate(&model, val, vocab, task)?;
    Ok((model, outcome.losses.last().copied().unwrap_or(f64::NAN), report))
}

/// Runs the cross product learning rates × epochs × seeds in a fixed order.
/// With `out`, each run's report goes to `<out>/<run>/report.json` and the
/// table to `<out>/grid.json`.
pub fn run_grid(
    base: &TrainConfig,
    train_set: &[Example],
    val: &[Example],
    vocab: &Vocab,
    out: Option<&Path>,
) -> Result<Vec<GridRun>> {
    let populations: Vec<bool> = match (&base.init_checkpoint, base.grid.both_populations) {
        (Some(_), true) => vec![true, false],
        (Some(_), false) => vec![true],
        (None, _) => vec![false],
    };
    let task = if base.tasks.contains(&crate::data::Task::Qar) {
        EvalTask::Q2ar
    } else {
        EvalTask::Qa
    };
    let mut runs = Vec::new();
    for &init in &populations {
        for &lr in &base.grid.learning_rates {
            for &epochs in &base.grid.epochs {
                for &seed in &base.grid.seeds {
                    let mut cfg = base.clone();
                    cfg.learning_rate = lr;
                    cfg.epochs = epochs;
                    cfg.seed = seed;
                    if !init {
                        cfg.init_checkpoint = None;
                    }
                    let (_, final_loss, report) =
                        train_and_evaluate(&cfg, train_set, val, vocab, task)?;
                    let run = GridRun {
                        learning_rate: lr,
                        epochs,
                        seed,
                        init_checkpoint: init,
                        final_loss,
                        report,
                    };
                    if let Some(dir) = out {
                        let run_dir = dir.join(run.name());
                        fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
                        write_json(&run_dir.join("report.json"), &run.report)?;
                    }
                    runs.push(run);
                }
            }
        }
    }
    if let Some(dir) = out {
        write_json(&dir.join("grid.json"), &runs)?;
    }
    Ok(runs)
}

/// The grid run with the best validation Q→A; earlier runs win ties.
pub fn best_run(runs: &[GridRun]) -> Option<&GridRun> {
    runs.iter().fold(None, |best: Option<&GridRun>, r| match best {
        Some(b) if b.report.qa.unwrap_or(0.0) >= r.report.qa.unwrap_or(0.0) => Some(b),
        _ => Some(r),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub qa: Option<f64>,
    pub qar: Option<f64>,
    pub q2ar: Option<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
}

/// Runs the grid for each variant on identical data and seeds, keeping the
/// best cell by validation Q→A.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    train_set: &[Example],
    val: &[Example],
    vocab: &Vocab,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.variant = variant;
        let dir = out.map(|d| d.join(variant.to_string()));
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let runs = run_grid(&cfg, train_set, val, vocab, dir.as_deref())?;
        let best = best_run(&runs).ok_or_else(|| Error::Config("empty grid".into()))?;
        rows.push(AblationRow {
            variant,
            qa: best.report.qa,
            qar: best.report.qar,
            q2ar: best.report.q2ar,
            learning_rate: best.learning_rate,
            epochs: best.epochs,
        });
    }
    if let Some(dir) = out {
        write_json(&dir.join("ablation.json"), &rows)?;
        let table = format_table(&rows);
        let path = dir.join("ablation.md");
        fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

/// Markdown comparison table with one row per variant.
pub fn format_table(rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
    let mut s = String::from("| variant | Q->A | QA->R | Q->AR |\n|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            r.variant,
            pct(r.qa),
            pct(r.qar),
            pct(r.q2ar)
        ));
    }
    s
}

/// Final validation Q→A per seed, with and without caption pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainStudy {
    pub seeds: Vec<u64>,
    pub without: Vec<f64>,
    pub with: Vec<f64>,
    pub std_without: f64,
    pub std_with: f64,
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// For each seed, finetunes from scratch and from a caption-pretrained
/// model initialized with the same seed.
pub fn pretraining_study(
    base: &TrainConfig,
    seeds: &[u64],
    train_set: &[Example],
    val: &[Example],
    captions: &[(Arc<Image>, String)],
    vocab: &Vocab,
) -> Result<PretrainStudy> {
    let mut without = Vec::with_capacity(seeds.len());
    let mut with = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.init_checkpoint = None;

        let mut scratch = build_model(&cfg, vocab)?;
        train(&cfg, &mut scratch, train_set, vocab)?;
        without.push(evaluate(&scratch, val, vocab, EvalTask::Qa)?.qa.unwrap_or(0.0));

        let mut warm = build_model(&cfg, vocab)?;
        pretrain(&cfg, &mut warm, captions, vocab)?;
        train(&cfg, &mut warm, train_set, vocab)?;
        with.push(evaluate(&warm, val, vocab, EvalTask::Qa)?.qa.unwrap_or(0.0));
    }
    Ok(PretrainStudy {
        seeds: seeds.to_vec(),
        std_without: std_dev(&without),
        std_with: std_dev(&with),
        without,
        with,
    })
}
