use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mnbr_cli::commands::{cmd_eval, cmd_knn, cmd_sweep, cmd_trace, cmd_train, resolve_out, EvalOptions, EvalSplit};
use mnbr_cli::output::Record;
use mnbr_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "mnbr", version, about = "Meta-learned neighbor dictionaries: train, evaluate, sweep, trace")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print per-epoch progress to stderr.
    #[arg(long)]
    progress: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model; writes artifacts and metrics.jsonl.
    Train(Common),
    /// Evaluate a saved artifact on the config's data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// 1-based fold for cross-validated data.
        #[arg(long, default_value_t = 1)]
        fold: usize,
        /// Write similarity.csv (cosine head only).
        #[arg(long)]
        similarity: bool,
        /// Write neighbors.csv with this many nearest training points per entry.
        #[arg(long)]
        neighbors: Option<usize>,
    },
    /// Train over the [sweep] grid of dictionary sizes, temperatures and seeds.
    Sweep(Common),
    /// Dump dictionary trajectories of a 2-D run to trace.csv.
    Trace(Common),
    /// Exact kNN on the same splits.
    KnnBaseline(Common),
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = resolve_out(common.out.clone(), &cfg);
    cfg.out = Some(out.clone());
    Ok((cfg, out))
}

fn print_results(records: &[Record]) {
    for r in records {
        if matches!(r, Record::Test { .. } | Record::Summary { .. }) {
            println!("{}", serde_json::to_string(r).expect("serializable"));
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => {
            let (cfg, out) = load(&c)?;
            print_results(&cmd_train(&cfg, &out, c.progress)?);
        }
        Command::Eval {
            common,
            artifact,
            split,
            fold,
            similarity,
            neighbors,
        } => {
            let (cfg, out) = load(&common)?;
            let opts = EvalOptions {
                split: match split {
                    SplitArg::Train => EvalSplit::Train,
                    SplitArg::Test => EvalSplit::Test,
                },
                fold,
                similarity,
                neighbors,
            };
            print_results(&cmd_eval(&cfg, &artifact, &out, &opts)?.1);
        }
        Command::Sweep(c) => {
            let (cfg, out) = load(&c)?;
            let (cells, records) = cmd_sweep(&cfg, &out, c.progress)?;
            print_results(&records);
            for cell in cells.iter().filter(|c| c.metric.is_err()) {
                eprintln!("cell entries={} gamma={} seed={} failed: {}", cell.entries, cell.gamma, cell.seed, cell.metric.as_ref().unwrap_err());
            }
        }
        Command::Trace(c) => {
            let (cfg, out) = load(&c)?;
            print_results(&cmd_trace(&cfg, &out)?);
        }
        Command::KnnBaseline(c) => {
            let (cfg, out) = load(&c)?;
            print_results(&cmd_knn(&cfg, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mnbr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
