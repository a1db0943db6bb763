use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use posmatch::checkpoint::Checkpoint;
use posmatch::config::{read_toml, ExperimentSpec};
use posmatch::core::data::{generate_synthetic, Dataset, GenConfig, Split};
use posmatch::core::losses::MethodKind;
use posmatch::core::model::ModelConfig;
use posmatch::core::training::TrainConfig;
use posmatch::csvio::{load_dataset, write_dataset_dir};
use posmatch::error::{Error, Result};
use posmatch::experiment::run_experiment;
use posmatch::report::{collect_cells, write_summary};
use posmatch::run::{evaluate_checkpoint, run, write_report, write_run, REPORT_FILE};

/// Positive matching contrastive training and fairness evaluation.
#[derive(Parser)]
#[command(name = "posmatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic biased dataset (dataset.csv + schema.json).
    Generate(GenerateArgs),
    /// Train one model and write checkpoint, history and test report.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Run a methods × seeds experiment and write aggregate tables.
    Experiment(ExperimentArgs),
    /// Rebuild aggregate tables from an experiment's per-run reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Strength of the group signal in the features.
    #[arg(long)]
    bias_strength: Option<f64>,
    /// Probability that a sample belongs to its class's majority group.
    #[arg(long)]
    group_skew: Option<f64>,
    #[arg(long)]
    feature_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or CSV file.
    #[arg(long)]
    data: PathBuf,
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<MethodKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Run directory; defaults to runs/<method>/seed_<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Write the report here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Comma-separated methods overriding the config.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<MethodKind>>,
    /// Number of seeds (indices 0..n) overriding the config.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment directory.
    dir: PathBuf,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?}; expected train, val or test"))
}

#[derive(serde::Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
}

fn print_bias_summary(ds: &Dataset) {
    for (a, attr) in ds.attributes().iter().enumerate() {
        let all: Vec<usize> = (0..ds.len()).collect();
        let counts = ds.group_class_counts(a, &all);
        println!("P({} | class):", attr.name);
        print!("{:>12}", "class");
        for g in &attr.groups {
            print!(" {g:>8}");
        }
        println!();
        for (name, row) in ds.class_names().iter().zip(&counts) {
            let total: usize = row.iter().sum();
            print!("{name:>12}");
            for &n in row {
                print!(" {:>8.3}", n as f64 / total.max(1) as f64);
            }
            println!();
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut cfg: GenConfig = match &args.config {
        Some(path) => read_toml(path)?,
        None => GenConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { cfg.$field = v; })* };
    }
    set!(n_samples, n_classes, feature_dim, bias_strength, group_skew, feature_noise, seed);
    let ds = generate_synthetic(&cfg)?;
    write_dataset_dir(&ds, &args.out)?;
    println!("wrote {} samples to {}", ds.len(), args.out.display());
    print_bias_summary(&ds);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file: TrainFile = match &args.config {
        Some(path) => read_toml(path)?,
        None => TrainFile::default(),
    };
    let (mut model, mut train) = (file.model, file.train);
    if let Some(m) = args.method {
        train.method = m;
    }
    if let Some(s) = args.seed {
        train.seed = s;
        model.init_seed = s;
    }
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(lr) = args.lr {
        train.lr = lr;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    let ds = load_dataset(&args.data)?;
    let out =
        args.out.unwrap_or_else(|| Path::new("runs").join(train.method.as_str()).join(format!("seed_{}", train.seed)));
    let output = run(&ds, &model, &train, Split::Test)?;
    write_run(&output, &out)?;
    println!(
        "{}: test accuracy {:.4}, best epoch {:?}; artifacts in {}",
        train.method,
        output.report.accuracy,
        output.history.best_epoch,
        out.display()
    );
    for a in &output.report.attributes {
        match a.fairness {
            Some(f) => println!("  fairness {}: {f:.4}", a.name),
            None => println!("  fairness {}: undefined", a.name),
        }
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?;
    let report = evaluate_checkpoint(&ck, &ds, args.split)?;
    match &args.out {
        Some(path) => {
            let path = if path.is_dir() { path.join(REPORT_FILE) } else { path.clone() };
            write_report(&report, &path)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::json("<stdout>", e))?),
    }
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let mut spec = ExperimentSpec::load(&args.config)?;
    if let Some(methods) = args.methods {
        spec.methods = methods;
    }
    if let Some(n) = args.seeds {
        spec.seeds = (0..n).collect();
    }
    if let Some(e) = args.epochs {
        spec.train.epochs = e;
    }
    if let Some(out) = args.out {
        spec.out_dir = Some(out);
    }
    let out =
        spec.out_dir.clone().ok_or_else(|| Error::Config("no output directory: set out_dir or pass --out".into()))?;
    spec.validate()?;
    let ds = posmatch::experiment::load_data(&spec)?;
    let outcome = run_experiment(&spec, &ds, &out, args.jobs)?;
    println!("{} cells, {} failed; tables in {}", outcome.cells.len(), outcome.failed(), out.display());
    outcome.status()
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let cells = collect_cells(&args.dir)?;
    write_summary(&cells, &args.dir)?;
    let failed = cells.iter().filter(|c| c.report.is_none()).count();
    println!("aggregated {} cells from {}", cells.len(), args.dir.display());
    match failed {
        0 => Ok(()),
        failed => Err(Error::PartialFailure { failed, total: cells.len() }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
