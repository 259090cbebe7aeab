use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hiergcd_core::config::ExperimentConfig;
use hiergcd_core::experiment::{self, seed_range, AblationRow, MeanAcc, SweepCell};
use hiergcd_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "hiergcd", version, about = "Hierarchical category discovery on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat TOML). Omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MultiSeed {
    #[command(flatten)]
    common: Common,
    /// Run seeds `seed .. seed + N` and report means.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset CSVs and split manifest.
    GenData(Common),
    /// Train and write metrics, checkpoint, evaluation and affinities.
    Train(MultiSeed),
    /// Evaluate a checkpoint, or a prediction CSV, against a dataset CSV.
    Eval {
        #[arg(long, required_unless_present = "preds", conflicts_with = "preds")]
        checkpoint: Option<PathBuf>,
        /// `instance_id,pred` CSV produced by any method.
        #[arg(long)]
        preds: Option<PathBuf>,
        /// Full-view dataset CSV as written by `gen-data`.
        #[arg(long)]
        dataset: PathBuf,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare target-only, +coarse and full models on shared data.
    Ablate(MultiSeed),
    /// One run per cell of the `sweep_*` grid in the config.
    Sweep(MultiSeed),
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn print_mean(label: &str, m: &MeanAcc) {
    println!(
        "{label}: acc_all {:.4}  acc_seen {}  acc_novel {}  acc_coarse_mapped {}",
        m.acc_all,
        fmt(m.acc_seen),
        fmt(m.acc_novel),
        fmt(m.acc_coarse_mapped)
    );
}

fn print_ablation(rows: &[AblationRow]) {
    println!(
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>9}",
        "variant", "all", "seen", "novel", "coarse", "d_novel"
    );
    for r in rows {
        println!(
            "{:<12} {:>8.4} {:>8} {:>8} {:>8} {:>+9.4}",
            r.variant,
            r.mean.acc_all,
            fmt(r.mean.acc_seen),
            fmt(r.mean.acc_novel),
            fmt(r.mean.acc_coarse_mapped),
            r.delta_novel.unwrap_or(f64::NAN)
        );
    }
}

fn print_sweep(cells: &[SweepCell]) {
    for c in cells {
        let p = &c.params;
        let head = format!(
            "lambda_c={} lambda_t2c={} K_c={} coarse={}..{} distill={}..{}",
            p.lambda_c, p.lambda_t2c, p.num_coarse, p.coarse_start, p.coarse_end, p.distill_start, p.distill_end
        );
        match (&c.mean, &c.error) {
            (Some(m), _) => print_mean(&head, m),
            (None, Some(e)) => println!("{head}: failed: {e}"),
            (None, None) => println!("{head}: no result"),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let m = experiment::gen_data(&cfg, &cfg.out_dir)?;
            println!(
                "{} instances, {} classes under {} super-classes",
                m.num_instances, m.num_classes, m.num_super
            );
            println!("seen classes  {:?}", m.seen_classes);
            println!("novel classes {:?}", m.novel_classes);
            println!("{} labeled, {} unlabeled", m.num_labeled, m.num_unlabeled);
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Train(m) => {
            let cfg = load_config(&m.common)?;
            let seeds = seed_range(cfg.seed, m.seeds as usize);
            let summary = experiment::train_seeds(&cfg, &seeds, &cfg.out_dir)?;
            print_mean(&format!("mean over {} seed(s)", seeds.len()), &summary.mean);
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Eval {
            checkpoint,
            preds,
            dataset,
            out,
        } => {
            let report = match (checkpoint, preds) {
                (Some(ck), _) => experiment::eval_checkpoint(&ck, &dataset)?,
                (None, Some(p)) => experiment::eval_predictions(&p, &dataset)?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let json = experiment::report_json(&report)?;
            if let Some(path) = out {
                write_file(&path, &json)?;
            }
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{json}");
        }
        Command::Ablate(m) => {
            let cfg = load_config(&m.common)?;
            let seeds = seed_range(cfg.seed, m.seeds as usize);
            let rows = experiment::ablate(&cfg, &seeds, Some(&cfg.out_dir))?;
            print_ablation(&rows);
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Sweep(m) => {
            let cfg = load_config(&m.common)?;
            let seeds = seed_range(cfg.seed, m.seeds as usize);
            let cells = experiment::sweep(&cfg, &seeds, Some(&cfg.out_dir))?;
            print_sweep(&cells);
            println!("wrote {}", cfg.out_dir.display());
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
