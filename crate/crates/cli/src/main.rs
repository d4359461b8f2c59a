use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use perfed_cli::{cmd_dump_embeddings, cmd_generate, cmd_report, cmd_run, CliError, RunOptions};
use perfed_core::data::Variable;

#[derive(Parser)]
#[command(
    name = "perfed",
    version,
    about = "Personalized federated learning over student subgroups"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic cohort into events.csv and students.csv.
    Generate {
        /// Cohort spec (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the cross-validated experiment described by a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; defaults to the number of hardware threads.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export pooled student representations from a saved model.
    DumpEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        students: PathBuf,
        /// Demographic variable used to tag rows (G, C or Y).
        #[arg(long, default_value = "G")]
        variable: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretty-print a report.csv.
    Report { report: PathBuf },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, seed, out } => cmd_generate(&config, seed, &out),
        Command::Run {
            config,
            seed,
            jobs,
            out,
        } => cmd_run(&config, &RunOptions { seed, jobs, out }).map(|a| {
            print!("{}", a.result.report.pretty());
        }),
        Command::DumpEmbeddings {
            model,
            events,
            students,
            variable,
            out,
        } => {
            let variable: Variable = variable
                .parse()
                .map_err(|e| CliError::Config(anyhow::Error::new(e)))?;
            cmd_dump_embeddings(&model, &events, &students, variable, &out)
        }
        Command::Report { report } => cmd_report(&report).map(|table| print!("{table}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
