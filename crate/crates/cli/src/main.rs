use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use seed_core::dataset::write_idx;
use seed_core::harness::run::{STUDENT_CKPT, TEACHER_CKPT};
use seed_core::harness::{self, emit_chart, parse_suites, ExperimentConfig, Phase, RunSummary};
use seed_core::Error;

/// Self-supervised distillation experiments.
#[derive(Parser)]
#[command(name = "seed", version)]
struct Cli {
    /// INI experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Config override as `section.key=value` (top-level keys have no section).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the configured synthetic dataset as IDX files.
    GenData,
    /// Pre-trains the teacher.
    Pretrain,
    /// Distills the student from a teacher checkpoint.
    Distill,
    /// Evaluates the student with KNN and, if enabled, a linear probe.
    Eval,
    /// Runs every phase listed in the config.
    Run,
    /// One run per value of a parameter, collected in sweep.csv.
    Sweep {
        /// tau_t, tau_s, K, lr, or weight_decay.
        param: String,
        /// Comma-separated values.
        values: String,
    },
    /// Randomized checks of the losses and gradients.
    Verify {
        /// A suite name or `all`.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Line chart of two CSV columns, one line per phase.
    Chart {
        /// CSV input; defaults to metrics.csv in the output directory.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value = "epoch")]
        x: String,
        #[arg(long, default_value = "loss")]
        y: String,
        /// SVG output; defaults to chart.svg in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Exit codes.
const EXIT_FAILED_CHECK: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => EXIT_CONFIG,
        Some(Error::Io(_) | Error::Format { .. }) => EXIT_IO,
        Some(Error::NonFinite { .. } | Error::Shape { .. }) => EXIT_NUMERIC,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_IO,
        None => EXIT_CONFIG,
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default().to_text(),
    };
    for o in &cli.overrides {
        let Some((key, value)) = o.split_once('=') else {
            bail!(Error::Config(format!("override {o:?} is not key=value")));
        };
        let (section, key) = key.trim().rsplit_once('.').unwrap_or(("", key.trim()));
        text.push_str(&format!("\n[{section}]\n{key} = {}\n", value.trim()));
    }
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn report(summary: &RunSummary) {
    let line = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            println!("{name:<12} knn_top1 = {v:.4}");
        }
    };
    line("teacher", summary.teacher_knn);
    line("baseline", summary.baseline_knn);
    line("student", summary.student_knn);
    if let Some(loss) = summary.final_loss {
        println!("final distillation loss = {loss:.6}");
    }
    if let Some(e) = &summary.eval {
        if let (Some(t1), Some(t5)) = (e.probe_top1, e.probe_top5) {
            println!("linear probe top1 = {t1:.4} top5 = {t5:.4} (label fraction {})", e.label_fraction);
        }
    }
}

fn run_phase(cfg: &ExperimentConfig, phase: Option<Phase>, out: &Path) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    if let Some(p) = phase {
        cfg.phases = vec![p];
    }
    // Single-phase commands pick up checkpoints left in `out` by earlier ones.
    let found = |name: &str| Some(out.join(name)).filter(|p| p.exists());
    match phase {
        Some(Phase::Distill) if cfg.teacher.checkpoint.is_none() => cfg.teacher.checkpoint = found(TEACHER_CKPT),
        Some(Phase::Eval) if cfg.student.checkpoint.is_none() => cfg.student.checkpoint = found(STUDENT_CKPT),
        _ => {}
    }
    let summary = harness::run(&cfg, out)?;
    report(&summary);
    Ok(())
}

fn parse_values(values: &str) -> anyhow::Result<Vec<f64>> {
    values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad sweep value {v:?}")).into())
        })
        .collect()
}

fn execute(cli: &Cli) -> anyhow::Result<bool> {
    let out = &cli.out;
    match &cli.command {
        Command::Verify { suite, trials } => {
            let suites = parse_suites(suite)?;
            let seed = cli.seed.unwrap_or(0);
            let r = harness::verify(&suites, *trials, seed)?;
            print!("{r}");
            return Ok(r.passed());
        }
        Command::Chart { csv, x, y, output } => {
            let csv = csv.clone().unwrap_or_else(|| out.join("metrics.csv"));
            let output = output.clone().unwrap_or_else(|| out.join("chart.svg"));
            emit_chart(&csv, x, y, &output)?;
            println!("wrote {}", output.display());
            return Ok(true);
        }
        _ => {}
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let splits = harness::load_data(&cfg)?;
            std::fs::create_dir_all(out)?;
            write_idx(&splits.train, &out.join("train-images.idx"), &out.join("train-labels.idx"))?;
            write_idx(&splits.test, &out.join("test-images.idx"), &out.join("test-labels.idx"))?;
            println!("wrote {} training and {} test images to {}", splits.train.len(), splits.test.len(), out.display());
        }
        Command::Pretrain => run_phase(&cfg, Some(Phase::Pretrain), out)?,
        Command::Distill => run_phase(&cfg, Some(Phase::Distill), out)?,
        Command::Eval => run_phase(&cfg, Some(Phase::Eval), out)?,
        Command::Run => run_phase(&cfg, None, out)?,
        Command::Sweep { param, values } => {
            let rows = harness::sweep(&cfg, param, &parse_values(values)?, out)?;
            println!("{}", harness::sweep::SWEEP_HEADER);
            for r in rows {
                println!("{},{},{:.4},{:.6}", r.param, r.value, r.knn_top1, r.final_loss);
            }
        }
        Command::Verify { .. } | Command::Chart { .. } => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILED_CHECK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
