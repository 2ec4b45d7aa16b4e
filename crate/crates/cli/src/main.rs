use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semrec::indexer::IndexMode;
use semrec::synthetic::MINI_SEED;
use semrec_cli::{write_mini, CliError, CliResult, Overrides, Pipeline, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "semrec",
    version,
    about = "Semantic user indexing and two-stage ranking pipeline"
)]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides paths.workdir.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides index.mode (P-ID, N-ID or O-ID).
    #[arg(long, global = true)]
    mode: Option<IndexMode>,
    /// -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, 5-core filter and split the raw dumps.
    Prepare,
    /// Embed review texts and user ids.
    Embed,
    /// Assign user ids for the configured index mode.
    TrainIndex,
    /// Build and mix the alignment-task prompt corpus.
    GenPrompts,
    /// Retrieve candidates and rank them for every test user.
    Rank,
    /// Compute ranking metrics.
    Eval,
    /// Run every stage in order.
    All,
    /// Compare finished runs of the three index modes.
    AblateIndex,
    /// Write the synthetic mini corpus.
    GenMini {
        #[arg(long, default_value = "data/mini")]
        out: PathBuf,
    },
}

fn pipeline(cli: &Cli) -> CliResult<Pipeline> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required for this command".into()))?;
    let mut config = PipelineConfig::load(path)?;
    config.apply(&Overrides {
        workdir: cli.workdir.clone(),
        seed: cli.seed,
        mode: cli.mode,
    });
    config.validate()?;
    Ok(Pipeline::new(config))
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenMini { out } => {
            write_mini(out, cli.seed.unwrap_or(MINI_SEED))?;
            println!("wrote {}", out.display());
        }
        Command::Prepare => {
            let s = pipeline(cli)?.prepare()?;
            println!(
                "users {}  items {}  interactions {}  avg length {:.2}  density {:.4}%",
                s.users,
                s.items,
                s.interactions,
                s.avg_length,
                100.0 * s.density
            );
        }
        Command::Embed => {
            let n = pipeline(cli)?.embed()?;
            println!("embedded {n} users");
        }
        Command::TrainIndex => {
            let p = pipeline(cli)?;
            let a = p.train_index()?;
            println!("{} {} ids written", a.len(), p.mode());
        }
        Command::GenPrompts => {
            let (corpus, report) = pipeline(cli)?.gen_prompts()?;
            println!("{} prompt instances", corpus.len());
            for (task, n) in &report.taken {
                println!("  {task:<17} {n:>6} of {}", report.available[task]);
            }
        }
        Command::Rank => {
            let results = pipeline(cli)?.rank()?;
            let hits = results.iter().filter(|r| r.gt_in_candidates).count();
            println!(
                "ranked {} users, ground truth retrieved for {hits}",
                results.len()
            );
        }
        Command::Eval | Command::All => {
            let p = pipeline(cli)?;
            let report = if matches!(cli.command, Command::All) {
                p.all()?
            } else {
                p.eval()?
            };
            print!("{}", report.table());
        }
        Command::AblateIndex => {
            print!("{}", pipeline(cli)?.ablate_index()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
