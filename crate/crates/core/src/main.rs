use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use promptrec::cli::{
    cmd_eval, cmd_prepare, cmd_rank, cmd_run, cmd_sweep, cmd_synth, cmd_tokenizer, cmd_train, RunConfig, Slice,
    SweepParam,
};
use promptrec::{Error, Result};

#[derive(Parser)]
#[command(name = "promptrec", version, about = "Prompt-based news recommendation")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "promptrec.toml")]
    config: PathBuf,

    /// Override a config value, e.g. `--set train.lambda=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus at the configured input paths.
    Synth,
    /// Label, split and negative-sample the corpus.
    Prepare,
    /// Train the subword vocabulary.
    Tokenizer,
    /// Train a model and write a checkpoint.
    Train,
    /// Evaluate the checkpoint on the test split.
    Eval {
        #[arg(long, default_value = "all")]
        slice: Slice,
    },
    /// Print the ranked candidates of one impression.
    Rank {
        #[arg(long)]
        impression: String,
    },
    /// Prepare, tokenizer, train and eval in one go.
    Run {
        #[arg(long, value_delimiter = ',', default_value = "all")]
        slices: Vec<Slice>,
    },
    /// Run the pipeline over a grid of lambda, t or s values.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Prepare => "prepare",
            Command::Tokenizer => "tokenizer",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Rank { .. } => "rank",
            Command::Run { .. } => "run",
            Command::Sweep { .. } => "sweep",
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(&cli.config, &cli.overrides)?;
    match &cli.command {
        Command::Synth => print_json(&cmd_synth(&cfg)?),
        Command::Prepare => print_json(&cmd_prepare(&cfg)?.corpus),
        Command::Tokenizer => {
            let vocab = cmd_tokenizer(&cfg)?;
            println!("{} tokens, fingerprint {}", vocab.len(), vocab.fingerprint());
            Ok(())
        }
        Command::Train => print_json(&cmd_train(&cfg)?),
        Command::Eval { slice } => {
            print!("{}", cmd_eval(&cfg, *slice)?.to_csv());
            Ok(())
        }
        Command::Rank { impression } => {
            let list = cmd_rank(&cfg, impression)?;
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "rank\tnews_id\tr_hat\tclicked\ttopic");
            for (i, id) in list.ids.iter().enumerate() {
                let clicked = u8::from(list.clicks[i]);
                let _ = writeln!(out, "{}\t{id}\t{:.6}\t{clicked}\t{}", i + 1, list.scores[i], list.topics[i]);
            }
            Ok(())
        }
        Command::Run { slices } => {
            for r in cmd_run(&cfg, slices)? {
                println!("# slice {} (run {})", r.slice, r.run_id);
                print!("{}", r.to_csv());
            }
            Ok(())
        }
        Command::Sweep { param, values } => {
            let (path, csv) = cmd_sweep(&cfg, *param, values)?;
            print!("{csv}");
            eprintln!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(cli.command.stage(), &e),
    }
}

fn report(stage: &str, e: &Error) -> ExitCode {
    eprintln!("promptrec {stage}: {e}");
    ExitCode::from(e.exit_code() as u8)
}
