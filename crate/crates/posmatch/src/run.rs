//! A single training run and its on-disk artifacts.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use posmatch_core::data::{Dataset, Split};
use posmatch_core::faireval::{build_report, EvalInput, FairnessReport};
use posmatch_core::model::{ModelConfig, ModelParams};
use posmatch_core::training::{predict, train_with, EpochRecord, History, TaskLayout, TrainConfig};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub history: History,
    pub report: FairnessReport,
}

/// Predictions of `params` on `split`, scored against every protected
/// attribute of `ds`.
pub fn evaluate(params: &ModelParams, layout: &TaskLayout, ds: &Dataset, split: Split) -> Result<FairnessReport> {
    let idx = ds.indices(split);
    let preds = predict(params, layout, ds, &idx)?;
    let mut input = EvalInput::new(preds, ds.labels(&idx))?;
    for (a, attr) in ds.attributes().iter().enumerate() {
        input = input.with_groups(&attr.name, ds.groups(a, &idx))?;
    }
    Ok(build_report(&input, ds.class_names(), ds.attributes())?)
}

/// Evaluates a saved checkpoint on `split` of `ds`.
pub fn evaluate_checkpoint(ck: &Checkpoint, ds: &Dataset, split: Split) -> Result<FairnessReport> {
    let params = ck.params()?;
    let layout = TaskLayout::new(ds, &ck.train)?;
    layout.check_model(&params.config)?;
    evaluate(&params, &layout, ds, split)
}

/// Trains on `ds` and evaluates the best-validation parameters on
/// `eval_split`. `base` supplies the architecture; its input and head widths
/// are derived from the data and method.
pub fn run(ds: &Dataset, base: &ModelConfig, tcfg: &TrainConfig, eval_split: Split) -> Result<RunOutput> {
    let layout = TaskLayout::new(ds, tcfg)?;
    let mcfg = layout.model_config(ds.feature_dim(), base);
    let outcome = train_with(ds, &mcfg, tcfg, &mut |r: &EpochRecord| {
        log::debug!(
            "{} epoch {} lr {:e} loss {:.6} val_acc {:.4}",
            tcfg.method,
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_acc
        );
    })?;
    let report = evaluate(&outcome.params, &outcome.layout, ds, eval_split)?;
    Ok(RunOutput {
        checkpoint: Checkpoint::new(&outcome.params, tcfg, outcome.history.best_epoch),
        history: outcome.history,
        report,
    })
}

/// Writes one JSON object per epoch.
pub fn write_history(history: &History, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in &history.epochs {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

pub fn write_report(report: &FairnessReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<FairnessReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes checkpoint, history, and report into `dir`.
pub fn write_run(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    write_history(&out.history, &dir.join(HISTORY_FILE))?;
    write_report(&out.report, &dir.join(REPORT_FILE))
}

/// Writes a plain-text error marker for a failed run.
pub fn write_failure(err: &Error, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(crate::experiment::FAILURE_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{err}").map_err(|e| Error::io(&path, e))
}
