//! `rbaseg` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::LevelFilter;

use rbaseg::cli::{self, ExperimentConfig};
use rbaseg::scoring::ScoreFn;
use rbaseg::{Error, Result};

#[derive(Parser)]
#[command(name = "rbaseg", version, about = "Toy mask-classification segmentation with outlier scoring")]
struct Args {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker cap; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, clean test and pasted test scenes.
    Gen,
    /// Closed-set training.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Outlier fine-tuning of the class head and mask MLP.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write per-scene score maps.
    Score {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scoring function; repeat for several. Defaults to the config list.
        #[arg(long = "fn", value_parser = parse_fn)]
        fns: Vec<ScoreFn>,
        /// Also write 16-bit PGM previews.
        #[arg(long)]
        pgm: bool,
    },
    /// Metrics report for a directory of score maps.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Adds closed-set IoU of this checkpoint on the same scenes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Query specialization, masking ablation and logit modes.
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        inliers: Option<PathBuf>,
        #[arg(long)]
        outliers: Option<PathBuf>,
    },
    /// Finite-difference gradient verification on the tiny model.
    Gradcheck,
}

fn parse_fn(s: &str) -> std::result::Result<ScoreFn, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn run(args: Args) -> Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = args.out {
        cfg.output = out;
    }
    let threads = args.threads.max(1);
    match args.command {
        Command::Gen => {
            let m = cli::cmd_gen(&cfg)?;
            for s in m.splits {
                println!("{}: {} scenes, dataset {}", s.name, s.scenes, s.dataset_id);
            }
        }
        Command::Train { data } => {
            println!("{}", cli::cmd_train(&cfg, data.as_deref(), threads)?.display());
        }
        Command::Finetune { checkpoint, data } => {
            println!("{}", cli::cmd_finetune(&cfg, checkpoint.as_deref(), data.as_deref(), threads)?.display());
        }
        Command::Score { checkpoint, data, fns, pgm } => {
            for d in cli::cmd_score(&cfg, checkpoint.as_deref(), data.as_deref(), &fns, pgm, threads)? {
                println!("{}", d.display());
            }
        }
        Command::Eval { scores, data, checkpoint } => {
            let (dir, r) = cli::cmd_eval(&cfg, &scores, data.as_deref(), checkpoint.as_deref(), threads)?;
            println!("{}: AP {} AuROC {} FPR95 {}", r.provenance.scoring_fn, r.pixel.ap, r.pixel.auroc, r.pixel.fpr95);
            println!("components: sIoU {} PPV {} mean F1 {}", r.component.siou_gt, r.component.ppv, r.component.mean_f1);
            if let Some(c) = &r.closed_set {
                println!("mIoU {}", c.miou);
            }
            println!("{}", dir.display());
        }
        Command::Analyze { checkpoint, inliers, outliers } => {
            let dir = cli::cmd_analyze(&cfg, checkpoint.as_deref(), inliers.as_deref(), outliers.as_deref(), threads)?;
            println!("{}", dir.display());
        }
        Command::Gradcheck => {
            let r = cli::cmd_gradcheck(&cfg)?;
            let verdict = if r.passed { "PASS" } else { "FAIL" };
            println!(
                "{verdict} max_rel_error={:.3e} tolerance={:.0e} checked={} skipped={} worst={}[{}]",
                r.max_rel_error, r.tolerance, r.checked, r.skipped, r.worst_parameter, r.worst_index
            );
            if !r.passed {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = match args.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error category={}: {e}", e.category());
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
