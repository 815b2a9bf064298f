use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pulsefuse::data::{generate_dataset, save_session};
use pulsefuse::model::Modality;
use pulsefuse::Result;
use pulsefuse_cli::ablate::{ablate, parse_variants};
use pulsefuse_cli::evaluate::{evaluate, write_report};
use pulsefuse_cli::report::build_report;
use pulsefuse_cli::train::{load_data, train_to_dir, Checkpoint};
use pulsefuse_cli::{exit_code, RunConfig};

#[derive(Parser)]
#[command(name = "pulsefuse", version, about = "RGB + radar heart-rate estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fold {
    Train,
    Val,
    Test,
    /// Every session under `data.root`, ignoring the split.
    All,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Mode {
    Both,
    RgbOnly,
    RfOnly,
}

impl From<Mode> for Modality {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Both => Modality::Both,
            Mode::RgbOnly => Modality::RgbOnly,
            Mode::RfOnly => Modality::RfOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from `[data.synth]`.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root (defaults to `data.root`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the train fold and keep the best-validation checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a checkpoint on one fold with the given input modalities.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<out_dir>/checkpoint.json`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "test")]
        fold: Fold,
    },
    /// Train and score one variant per component switched off.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `all`, or a comma list drawn from full, vim, cfft, shared_ssm, rfam, tdmm.
        #[arg(long, default_value = "all")]
        toggles: String,
    },
    /// Tables and figures from a run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config: c, out } => {
            let cfg = config(&c)?;
            let root = out.unwrap_or(cfg.data.root.clone());
            let sessions = generate_dataset(&cfg.data.synth)?;
            for s in &sessions {
                save_session(&root, s)?;
            }
            println!("wrote {} sessions to {}", sessions.len(), root.display());
        }
        Command::Train { config: c } => {
            let cfg = config(&c)?;
            let data = load_data(&cfg)?;
            log::info!(
                "split: {} train, {} val, {} test sessions; subjects per tone {:?}",
                data.folds.train.len(),
                data.folds.val.len(),
                data.folds.test.len(),
                data.folds.tone_counts
            );
            let ckpt = train_to_dir(&cfg, &data, &cfg.out_dir)?;
            println!("best epoch {} written to {}", ckpt.epoch, cfg.out_dir.join("checkpoint.json").display());
        }
        Command::Eval {
            config: c,
            ckpt,
            mode,
            fold,
        } => {
            let cfg = config(&c)?;
            let path = ckpt.unwrap_or_else(|| cfg.out_dir.join("checkpoint.json"));
            let ckpt = Checkpoint::load(&path)?;
            ckpt.ensure_matches(&cfg)?;
            let data = load_data(&cfg)?;
            let sessions = match fold {
                Fold::All => data.sessions.iter().collect(),
                k => data.fold(k as usize),
            };
            let report = evaluate(&ckpt, &cfg, &sessions, mode.into())?;
            write_report(&report, &cfg.out_dir)?;
            print!("{}", report.to_text());
        }
        Command::Ablate { config: c, toggles } => {
            let cfg = config(&c)?;
            let variants = parse_variants(&toggles)?;
            let data = load_data(&cfg)?;
            let rows = ablate(&cfg, &data, &variants, &cfg.out_dir)?;
            for r in rows {
                println!("{:<12} {}", r.variant, r.metrics.mae);
            }
        }
        Command::Report { input, out } => {
            let (report, written) = build_report(Path::new(&input), Path::new(&out))?;
            if !report.main.is_empty() {
                print!("{}", report.main_text());
            }
            println!("{} files written to {}", written.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
