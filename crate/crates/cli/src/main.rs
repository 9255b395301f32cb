use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use ppea::autodiff::Fault;
use ppea::data::Variant;
use ppea::metrics::{format_table, Aggregation};
use ppea::networks::Network;
use ppea_cli::{
    cmd_eval, cmd_gradcheck, cmd_report, cmd_synth, cmd_train, gradcheck_table, history_table, CliResult, Failure,
};

#[derive(Parser)]
#[command(name = "ppea", version, about = "Two-stage adapter training for self-supervised depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Static,
    Dynamic,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetworkArg {
    Teacher,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Pixel,
    Frame,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    ConvSign,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic triplet dataset.
    Synth {
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (JSON); defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one training stage of a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against ground-truth depth.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "teacher")]
        network: NetworkArg,
        #[arg(long, value_enum, default_value = "pixel")]
        aggregation: AggregationArg,
        /// Report path; defaults to `<ckpt>.<network>.eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
        /// Corrupt one backward rule to confirm the check catches it.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Collate evaluation histories of several runs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// CSV of every evaluated epoch.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth { variant, count, seed, out, config } => {
            let variant = match variant {
                VariantArg::Static => Variant::Static,
                VariantArg::Dynamic => Variant::Dynamic,
            };
            println!("{}", cmd_synth(variant, count, seed, &out, config.as_deref())?.display());
        }
        Command::Train { config, stage, init_from } => {
            let a = cmd_train(&config, stage, init_from)?;
            print!("{}", history_table(&a.history));
            println!("checkpoint {}", a.checkpoint.display());
            println!("log {}", a.log.display());
            println!("eval {}", a.eval.display());
        }
        Command::Eval { ckpt, dataset, network, aggregation, out } => {
            let network = match network {
                NetworkArg::Teacher => Network::Teacher,
                NetworkArg::Student => Network::Student,
            };
            let how = match aggregation {
                AggregationArg::Pixel => Aggregation::PixelWeighted,
                AggregationArg::Frame => Aggregation::FrameMean,
            };
            let report = cmd_eval(&ckpt, &dataset, network, how)?;
            print!("{}", format_table(&[(network.prefix().to_string(), report.report.clone())]));
            let out = out.unwrap_or_else(|| ckpt.with_extension(format!("{}.eval.json", network.prefix())));
            fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!("report {}", out.display());
        }
        Command::Gradcheck { seed, dtype: DtypeArg::F64, inject_fault } => {
            let fault = inject_fault.map(|FaultArg::ConvSign| Fault::ConvInputGradSign);
            let results = cmd_gradcheck(seed, fault)?;
            print!("{}", gradcheck_table(&results));
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(Failure::verify(format!("{failed} of {} checks failed", results.len())));
            }
        }
        Command::Report { runs, out } => {
            print!("{}", cmd_report(&runs, &out)?);
            println!("curves {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(ppea_cli::EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
