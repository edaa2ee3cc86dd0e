use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sttt_core::bench::{self, Options};
use sttt_core::tasks::{generate_many, write_jsonl, TaskKind};
use sttt_core::{Error, Scalar};

#[derive(Parser)]
#[command(name = "sttt", version, about = "Train, evaluate and probe hybrid fast-weight models")]
struct Cli {
    /// Seed override (training data order, generated samples, scaling init).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Output directory (or file, for `gen` and `stream-demo`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage training from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Held-out evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated task kinds.
        #[arg(long, default_value = "recall,count,order")]
        tasks: String,
        /// Samples per task.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Evaluate these samples instead of generating held-out ones.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Score oracle answers instead of model predictions.
        #[arg(long)]
        oracle: bool,
    },
    /// Prefill FLOPs and state size against input length.
    Scaling {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated increasing token counts.
        #[arg(long, default_value = "512,1024,2048,4096")]
        lengths: String,
    },
    /// Streams samples through the dual cache and prints one record per segment.
    StreamDemo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stream: PathBuf,
    },
    /// Writes generated task samples as line-delimited records.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 4,
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn parse_tasks(s: &str) -> sttt_core::Result<Vec<TaskKind>> {
    s.split(',').map(|t| TaskKind::parse(t.trim()).ok_or_else(|| Error::Config(format!("unknown task `{t}`")))).collect()
}

fn parse_lengths(s: &str) -> sttt_core::Result<Vec<usize>> {
    s.split(',').map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad length `{t}`")))).collect()
}

fn run<F: Scalar>(cli: &Cli) -> sttt_core::Result<()> {
    let opts = Options { seed: cli.seed, threads: cli.threads.max(1), out: cli.out.clone().unwrap_or_else(|| PathBuf::from("out")) };
    match &cli.command {
        Command::Train { config } => {
            let report = bench::cmd_train::<F>(config, &opts)?;
            print!("{}", report.render());
        }
        Command::Eval { checkpoint, tasks, samples, input, oracle } => {
            let report = bench::cmd_eval::<F>(checkpoint, &parse_tasks(tasks)?, *samples, input.as_deref(), *oracle, &opts)?;
            print!("{}", report.render());
        }
        Command::Scaling { checkpoint, lengths } => {
            let table = bench::cmd_scaling::<F>(checkpoint.as_deref(), &parse_lengths(lengths)?, &opts)?;
            print!("{}", table.render());
        }
        Command::StreamDemo { checkpoint, stream } => match &cli.out {
            Some(p) => {
                let file = std::io::BufWriter::new(std::fs::File::create(p)?);
                bench::cmd_stream_demo::<F>(checkpoint, stream, file)?;
            }
            None => {
                bench::cmd_stream_demo::<F>(checkpoint, stream, std::io::stdout().lock())?;
            }
        },
        Command::Gen { config, task, count } => {
            let rc = match config {
                Some(p) => bench::load_run_config(p)?,
                None => sttt_core::train::RunConfig::desk(),
            };
            let kind = TaskKind::parse(task).ok_or_else(|| Error::Config(format!("unknown task `{task}`")))?;
            let base = cli.seed.unwrap_or(0);
            let samples = generate_many(kind, &rc.tasks, base..base + *count as u64)?;
            match &cli.out {
                Some(p) => write_jsonl(std::io::BufWriter::new(std::fs::File::create(p)?), &samples)?,
                None => {
                    let mut out = std::io::stdout().lock();
                    write_jsonl(&mut out, &samples)?;
                    out.flush()?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STTT_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.precision {
        Precision::F32 => run::<f32>(&cli),
        Precision::F64 => run::<f64>(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
