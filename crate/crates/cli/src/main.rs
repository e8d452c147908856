mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use parallel_cells::Error;

/// Train and analyse recurrent language models built from parallel cells.
#[derive(Debug, Parser)]
#[command(name = "pcrnn", version)]
struct Cli {
    /// Worker threads for per-cell parallelism. Results are bit-identical
    /// for any value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a key=value config file.
    ///
    /// Writes resolved-config.txt, vocab.txt, metrics.csv, best.pcrn and
    /// final.pcrn into `out_dir`.
    Train {
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key (repeatable), e.g. `--set wide=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the perplexity of a checkpoint on a corpus file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Vocabulary file; defaults to vocab.txt next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Mask one cell, e.g. `layer=0,cell=1` (repeatable).
        #[arg(long, value_name = "layer=L,cell=C")]
        mask: Vec<String>,
    },
    /// Evaluate with each cell masked in turn and write mask_report.csv.
    Mask {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Token groups file: one `name: tok tok ...` per line.
        #[arg(long)]
        groups: Option<PathBuf>,
        /// Layer to mask in (repeatable); defaults to every layer.
        #[arg(long)]
        layer: Vec<usize>,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the perplexity of the averaged predictions of several checkpoints.
    Ensemble {
        /// One checkpoint path per line; relative paths are taken from the
        /// spec file's directory.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Vocabulary file; defaults to vocab.txt next to the first member.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Print exact and closed-form parameter counts of one recurrent layer.
    Params {
        /// Total hidden units `m` (also the layer input size).
        #[arg(long)]
        hidden: usize,
        /// Comma-separated list of cell counts.
        #[arg(long, value_delimiter = ',', required = true)]
        wide: Vec<usize>,
        #[arg(long, default_value = "lstm")]
        cell: String,
        #[arg(long, default_value = "split")]
        routing: String,
        /// Allow cells whose sizes differ by one when `wide` does not divide
        /// `hidden`.
        #[arg(long)]
        balanced: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 2,
        Error::Shape { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error: cannot start thread pool: {e}");
        return ExitCode::from(3);
    }
    let result = match cli.command {
        Command::Train { config, overrides } => commands::train(config.as_deref(), &overrides),
        Command::Eval {
            checkpoint,
            corpus,
            vocab,
            mask,
        } => commands::eval(&checkpoint, &corpus, vocab.as_deref(), &mask),
        Command::Mask {
            checkpoint,
            corpus,
            vocab,
            groups,
            layer,
            out,
        } => commands::mask(
            &checkpoint,
            &corpus,
            vocab.as_deref(),
            groups.as_deref(),
            &layer,
            out.as_deref(),
        ),
        Command::Ensemble {
            spec,
            corpus,
            vocab,
        } => commands::ensemble(&spec, &corpus, vocab.as_deref()),
        Command::Params {
            hidden,
            wide,
            cell,
            routing,
            balanced,
        } => commands::params(hidden, &wide, &cell, &routing, balanced),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
