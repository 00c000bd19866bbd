use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sparsecl::data::{load_mnist, resolve_data_dir, Dataset};
use sparsecl::harness::{
    gradcheck, report_csv, report_from_csv, run_continual_with_params, run_permuted, sweep,
    PermutedResult,
    RunConfig, RunMode, RunResult, SweepGrid,
};

/// Sparse-activation continual learning on Split-MNIST.
#[derive(Parser)]
#[command(name = "sparsecl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the MNIST directory (else config, $SPARSECL_DATA_DIR, data/mnist).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one continual run and write timeline.csv + summary.json.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Write the final parameters as an SCL1 checkpoint.
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
    },
    /// Run a hyperparameter grid over seeds and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Grid file (JSON): axis -> values, plus optional "seeds".
        #[arg(long)]
        grid: PathBuf,
    },
    /// Permuted-MNIST plasticity/stability run; writes two CSV curves.
    Permuted {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Full-network finite-difference gradient check for the configured
    /// activation.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Aggregate sweep CSVs into a best-point-per-pair summary table.
    Report {
        /// One or more sweep.csv files.
        #[arg(required = true)]
        sweep_csv: Vec<PathBuf>,
        /// Write the summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let text = fs::read_to_string(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    let mut cfg = RunConfig::from_json(&text)
        .with_context(|| format!("parsing config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    if let Some(dir) = &common.data_dir {
        cfg.data_dir = Some(dir.clone());
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let dir = resolve_data_dir(cfg.data_dir.as_deref())?;
    let (train, test) = load_mnist(&dir)
        .with_context(|| format!("loading MNIST from {}", dir.display()))?;
    Ok((train, test))
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_run_outputs(cfg: &RunConfig, result: &RunResult) -> Result<()> {
    let dir = out_dir(cfg);
    let timeline = write_out(&dir, "timeline.csv", &result.timeline_csv())?;
    #[derive(serde::Serialize)]
    struct Summary<'a> {
        config: &'a RunConfig,
        final_per_task_accuracy: &'a [f32],
        final_mean_accuracy: f32,
        final_overall_accuracy: f32,
        steps: u64,
        wall_seconds: f64,
    }
    let summary = serde_json::to_string_pretty(&Summary {
        config: cfg,
        final_per_task_accuracy: &result.final_per_task_accuracy,
        final_mean_accuracy: result.final_mean_accuracy,
        final_overall_accuracy: result.final_overall_accuracy,
        steps: result.steps,
        wall_seconds: result.wall_seconds,
    })?;
    write_out(&dir, "summary.json", &summary)?;
    eprintln!("wrote {} and summary.json", timeline.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            common,
            checkpoint_out,
        } => {
            let cfg = load_config(&common)?;
            if cfg.mode == RunMode::Permuted {
                anyhow::bail!("mode=permuted runs through the `permuted` subcommand");
            }
            let (train, test) = load_data(&cfg)?;
            let (result, params) = run_continual_with_params(&cfg, &train, &test)?;
            if let Some(path) = checkpoint_out {
                params
                    .save(&path)
                    .with_context(|| format!("writing checkpoint {}", path.display()))?;
                eprintln!("wrote checkpoint {}", path.display());
            }
            write_run_outputs(&cfg, &result)?;
            print_result(&result);
        }
        Command::Sweep { common, grid } => {
            let cfg = load_config(&common)?;
            let grid_text = fs::read_to_string(&grid)
                .with_context(|| format!("reading grid {}", grid.display()))?;
            let grid = SweepGrid::from_json(&grid_text)?;
            let (train, test) = load_data(&cfg)?;
            let result = sweep(&cfg, &grid, &train, &test)?;
            let dir = out_dir(&cfg);
            write_out(&dir, "sweep.csv", &result.csv())?;
            let w = result.winning_point();
            println!(
                "winner: {} -> {:.2}% (±{:.2})  [{} points x {} seeds]",
                w.assignment,
                w.mean_accuracy * 100.0,
                w.ci_half_width * 100.0,
                result.points.len(),
                w.per_seed.len(),
            );
        }
        Command::Permuted { common } => {
            let cfg = load_config(&common)?;
            if cfg.mode != RunMode::Permuted {
                anyhow::bail!("the permuted subcommand requires mode=permuted");
            }
            let (train, test) = load_data(&cfg)?;
            let result = run_permuted(&cfg, &train, &test)?;
            let dir = out_dir(&cfg);
            write_out(
                &dir,
                "permuted_latest.csv",
                &PermutedResult::curve_csv(&result.latest_task_accuracy),
            )?;
            write_out(
                &dir,
                "permuted_task0.csv",
                &PermutedResult::curve_csv(&result.task0_accuracy),
            )?;
            let last = result.latest_task_accuracy.len() - 1;
            println!(
                "{} tasks: latest-task accuracy {:.4}, task-0 retention {:.4} (from {:.4})",
                last + 1,
                result.latest_task_accuracy[last],
                result.task0_accuracy[last],
                result.task0_accuracy[0],
            );
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common)?;
            let report = gradcheck(&cfg.activation, cfg.seed);
            println!("{report}");
            if !report.pass {
                std::process::exit(1);
            }
        }
        Command::Report { sweep_csv, out } => {
            let mut csvs = Vec::new();
            for path in &sweep_csv {
                csvs.push(
                    fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?,
                );
            }
            let rows = report_from_csv(&csvs)?;
            let rendered = report_csv(&rows);
            match out {
                Some(path) => {
                    fs::write(&path, &rendered)
                        .with_context(|| format!("writing {}", path.display()))?;
                }
                None => print!("{rendered}"),
            }
        }
    }
    Ok(())
}

fn print_result(result: &RunResult) {
    let per_task: Vec<String> = result
        .final_per_task_accuracy
        .iter()
        .map(|a| format!("{:.4}", a))
        .collect();
    println!(
        "final per-task [{}]  mean {:.4}  overall {:.4}  ({} steps, {:.1}s)",
        per_task.join(", "),
        result.final_mean_accuracy,
        result.final_overall_accuracy,
        result.steps,
        result.wall_seconds,
    );
}
