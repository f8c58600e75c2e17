use std::path::PathBuf;
use std::process::ExitCode;

use amsrc_core::train::{run_pipeline_with, Command, CommandReport, TrainConfig};
use amsrc_core::{Error, ErrorClass};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "amsrc", version, about = "Appearance/motion consistency video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding `train.seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Output root, overriding `run.out`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic benchmark and its frame labels
    Synth(Common),
    /// Detect objects, compute flow and build spatio-temporal cubes
    Extract(Common),
    /// Train the model and fit score normalization statistics
    Train(Common),
    /// Score every test frame
    Score(Common),
    /// Compute frame-level AUROC and export per-video curves
    Eval(Common),
    /// Train and evaluate every ablation row
    Ablate(Common),
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>().map(Error::class) {
        Some(ErrorClass::Numerical) => EXIT_NUMERICAL,
        Some(ErrorClass::Usage) => EXIT_USAGE,
        Some(ErrorClass::Data) => EXIT_DATA,
        None => EXIT_USAGE,
    }
}

fn load_config(common: &Common) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn print_report(report: &CommandReport) {
    for (k, v) in &report.manifest.metrics {
        if !k.starts_with("epoch.") {
            println!("{k} = {v}");
        }
    }
    if let Some(a) = report.auroc {
        println!("AUROC: {a:.6}");
    }
    for r in &report.ablation {
        let (f, c, g) = r.row.toggles();
        match &r.auroc {
            Ok(v) => println!("row {} flow={f} consistency={c} fgfm={g}: AUROC {v:.6}", r.row.name()),
            Err(e) => println!("row {} flow={f} consistency={c} fgfm={g}: failed: {e}", r.row.name()),
        }
    }
    println!("manifest: {}", report.manifest_path.display());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let (command, common) = match &cli.command {
        Cmd::Synth(c) => (Command::Synth, c),
        Cmd::Extract(c) => (Command::Extract, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Score(c) => (Command::Score, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Ablate(c) => (Command::Ablate, c),
    };
    let cfg = match load_config(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run_pipeline_with(command, &cfg, &mut |line| eprintln!("{line}")) {
        Ok(report) => {
            print_report(&report);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let e = anyhow::Error::new(e).context(format!("{} failed", command.name()));
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
