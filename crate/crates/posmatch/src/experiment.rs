//! Methods × seeds experiment matrices.
//!
//! Every cell draws its randomness from
//! `derive_seed(spec.seed, [method id, seed index])`, so adding or removing a
//! method leaves the other cells' streams untouched. Cells share nothing but
//! the filesystem; each writes to `runs/<method>/seed_<k>/`.

use std::fs;
use std::path::{Path, PathBuf};

use posmatch_core::data::{generate_synthetic, Dataset};
use posmatch_core::faireval::FairnessReport;
use posmatch_core::losses::MethodKind;
use posmatch_core::numkit::derive_seed;
use rayon::prelude::*;

use crate::config::ExperimentSpec;
use crate::csvio::load_dataset;
use crate::error::{Error, Result};
use crate::report::{write_summary, CellResult};
use crate::run::{run, write_failure, write_run};

pub const RUNS_DIR: &str = "runs";
pub const FAILURE_FILE: &str = "error.txt";
pub const SPEC_FILE: &str = "experiment.json";

/// Seed for the (method, seed index) cell.
pub fn cell_seed(spec_seed: u64, method: MethodKind, seed_index: u64) -> u64 {
    derive_seed(spec_seed, &[method.id(), seed_index])
}

/// Directory of one cell relative to the experiment root.
pub fn cell_dir(root: &Path, method: MethodKind, seed_index: u64) -> PathBuf {
    root.join(RUNS_DIR).join(method.as_str()).join(format!("seed_{seed_index}"))
}

/// Builds the experiment's dataset: loads the CSV or runs the generator.
pub fn load_data(spec: &ExperimentSpec) -> Result<Dataset> {
    match (&spec.data.csv, &spec.data.synthetic) {
        (Some(path), None) => load_dataset(path),
        (None, Some(gen)) => Ok(generate_synthetic(gen)?),
        (None, None) => Ok(generate_synthetic(&Default::default())?),
        (Some(_), Some(_)) => Err(Error::Config("[data] sets both `csv` and `synthetic`".into())),
    }
}

/// Runs one cell in memory.
pub fn run_cell(
    spec: &ExperimentSpec,
    ds: &Dataset,
    method: MethodKind,
    seed_index: u64,
) -> Result<crate::run::RunOutput> {
    let seed = cell_seed(spec.seed, method, seed_index);
    let mut tcfg = spec.train_config(method)?;
    tcfg.seed = seed;
    let mut model = spec.model.clone();
    model.init_seed = seed;
    run(ds, &model, &tcfg, spec.eval_split)
}

/// Outcome of a whole experiment.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub cells: Vec<CellResult>,
}

impl ExperimentOutcome {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.report.is_none()).count()
    }

    /// `Ok` when every cell succeeded, [`Error::PartialFailure`] otherwise.
    pub fn status(&self) -> Result<()> {
        match self.failed() {
            0 => Ok(()),
            failed => Err(Error::PartialFailure { failed, total: self.cells.len() }),
        }
    }
}

/// Runs every cell of `spec` on `ds` with up to `jobs` cells in flight,
/// writes per-cell artifacts under `out`, then the aggregate tables.
pub fn run_experiment(spec: &ExperimentSpec, ds: &Dataset, out: &Path, jobs: usize) -> Result<ExperimentOutcome> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let spec_path = out.join(SPEC_FILE);
    let spec_text = serde_json::to_string_pretty(spec).map_err(|e| Error::json(&spec_path, e))?;
    fs::write(&spec_path, spec_text + "\n").map_err(|e| Error::io(&spec_path, e))?;

    let cells: Vec<(MethodKind, u64)> =
        spec.methods.iter().flat_map(|&m| spec.seeds.iter().map(move |&s| (m, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<CellResult>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(method, seed_index)| {
                let dir = cell_dir(out, method, seed_index);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
                let report: Option<FairnessReport> = match run_cell(spec, ds, method, seed_index) {
                    Ok(output) => {
                        write_run(&output, &dir)?;
                        log::info!("{method} seed {seed_index}: accuracy {:.4}", output.report.accuracy);
                        Some(output.report)
                    }
                    Err(err) => {
                        log::error!("{method} seed {seed_index} failed: {err}");
                        write_failure(&err, &dir)?;
                        None
                    }
                };
                Ok(CellResult { method, seed_index, report })
            })
            .collect()
    });
    let cells = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_summary(&cells, out)?;
    Ok(ExperimentOutcome { cells })
}
