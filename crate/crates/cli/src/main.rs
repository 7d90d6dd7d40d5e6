use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cogcalib::harness::{self, ExperimentConfig};
use cogcalib::{metrics, trainer, Dataset, Exec};

#[derive(Parser)]
#[command(name = "cogcalib", version, about = "Knowledge-gated calibration experiments")]
struct Cli {
    /// Run jobs on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `experiment.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and tag the datasets of one seed.
    Datagen {
        #[command(flatten)]
        common: Common,
        /// Task seed; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the base classifier of one seed.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the configured method matrix.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a saved model on a dataset csv.
    Evaluate {
        /// Model json written by `pretrain`.
        #[arg(long)]
        model: PathBuf,
        /// Dataset csv written by `datagen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Where to write the metrics json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Knowledge-bias or deletion sweep with vanilla fine-tuning.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: SweepKind,
        /// Number of mixing parts for the bias sweep.
        #[arg(long, default_value_t = 5)]
        r: usize,
        /// Known-sample deletion fractions; must include 0.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75])]
        fractions: Vec<f64>,
    },
    /// Summarize an existing run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Bias,
    Deletion,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.experiment.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pick_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.experiment.seeds[0])
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn datagen(cfg: &ExperimentConfig, seed: u64, exec: Exec) -> Result<Vec<PathBuf>> {
    let task = harness::prepare_task(cfg, seed, exec)?;
    let dir = cfg.experiment.out_dir.join("data").join(format!("seed{seed}"));
    create_dir(&dir)?;
    let pool = cogcalib::datagen::make_pretrain_pool(&task.spec)?;
    let sets: [(&str, &Dataset); 8] = [
        ("pretrain", &pool),
        ("known", &task.pools.known),
        ("unknown", &task.pools.unknown),
        ("train", &task.train),
        ("cal", &task.cal),
        ("test", &task.test),
        ("val", &task.val),
        ("ood", &task.ood),
    ];
    let mut files = Vec::new();
    for (name, ds) in sets {
        let path = dir.join(format!("{name}.csv"));
        ds.write_csv(&path)?;
        files.push(path);
    }
    Ok(files)
}

fn pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<PathBuf>> {
    let spec = cfg.task.with_seed(seed);
    let pool = cogcalib::datagen::make_pretrain_pool(&spec)?;
    let params = harness::pretrain_model(&spec, &pool, &cfg.pretrain)?;
    let dir = cfg.experiment.out_dir.join("models").join(format!("seed{seed}"));
    create_dir(&dir)?;
    let path = dir.join("pretrained.json");
    write_json(&params, &path)?;
    Ok(vec![path])
}

#[derive(serde::Serialize)]
struct EvalOutput {
    n: usize,
    accuracy: f64,
    ece: f64,
    auroc: Option<f64>,
    mean_conf: f64,
}

fn evaluate(model: &Path, data: &Path, bins: usize, out: &Path, exec: Exec) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(model).with_context(|| format!("reading {}", model.display()))?;
    let params: cogcalib::model::ModelParams =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", model.display()))?;
    params.validate()?;
    let ds = Dataset::read_csv(data, params.classes)?;
    if ds.dim != params.dim {
        bail!(
            "{} has {} features, model expects {}",
            data.display(),
            ds.dim,
            params.dim
        );
    }
    let records = trainer::predict_records(&params, &ds, exec)?;
    let report = metrics::report(&records, bins)?;
    let summary = trainer::summarize(&records)?;
    let result = EvalOutput {
        n: report.n_records,
        accuracy: report.accuracy,
        ece: report.ece,
        auroc: report.auroc,
        mean_conf: summary.mean_conf,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&result, out)?;
    Ok(vec![out.to_path_buf()])
}

fn report(dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = harness::load_report(dir)?;
    let summary = harness::summarize_rows(&rows);
    let fmt = |m: Option<harness::MeanStd>| m.map_or("-".to_string(), |m| format!("{:.4}±{:.4}", m.mean, m.std));
    println!(
        "{:<12} {:<6} {:>16} {:>16} {:>16}",
        "method", "split", "accuracy", "ece", "auroc"
    );
    for e in &summary.entries {
        println!(
            "{:<12} {:<6} {:>16} {:>16} {:>16}",
            e.method.as_str(),
            e.split,
            fmt(e.accuracy),
            fmt(e.ece),
            fmt(e.auroc)
        );
    }
    if summary.partial {
        println!("(partial: some runs failed)");
    }
    let path = dir.join("summary.json");
    write_json(&summary, &path)?;
    Ok(vec![path])
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::Datagen { common, seed } => {
            let cfg = load_config(&common)?;
            datagen(&cfg, pick_seed(&cfg, seed), exec)
        }
        Command::Pretrain { common, seed } => {
            let cfg = load_config(&common)?;
            pretrain(&cfg, pick_seed(&cfg, seed))
        }
        Command::Train { common } => Ok(harness::run_experiment(&load_config(&common)?, exec)?.files),
        Command::Evaluate { model, data, bins, out } => evaluate(&model, &data, bins, &out, exec),
        Command::Sweep {
            common,
            kind,
            r,
            fractions,
        } => {
            let cfg = load_config(&common)?;
            Ok(match kind {
                SweepKind::Bias => harness::run_bias_sweep(&cfg, r, exec)?.files,
                SweepKind::Deletion => harness::run_deletion_sweep(&cfg, &fractions, exec)?.files,
            })
        }
        Command::Report { dir } => report(&dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(files) => {
            print_paths(&files);
            ExitCode::SUCCESS
        }
        Err(e) => {
            // Library errors already embed their sources in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
