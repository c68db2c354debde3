use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use avfusion::pipeline::config::{load_config_for, Stage};
use avfusion::pipeline::corpus::generate_synthetic_corpus;
use avfusion::pipeline::stages::{run_asr_training, run_eval, run_pretraining, run_tokenize, Logger};

#[derive(Parser)]
#[command(name = "avfusion", version, about = "Audio-visual pretraining and fusion ASR at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-token pretraining of the audio-visual encoder
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train codebooks and write token ids for the corpus
    Tokenize {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the transducer (fusion or baseline)
    TrainAsr {
        #[arg(long)]
        config: PathBuf,
    },
    /// Greedy-decode the eval corpus and report pooled WER
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a synthetic tone corpus
    GenCorpus {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> avfusion::Result<()> {
    let mut log = Logger::stdout();
    match cmd {
        Command::Pretrain { config } => {
            let r = run_pretraining(&load_config_for(&config, Stage::Pretrain)?, &mut log)?;
            println!("checkpoint {} step {}", r.checkpoint.display(), r.steps);
        }
        Command::Tokenize { config } => {
            let r = run_tokenize(&load_config_for(&config, Stage::Tokenize)?, &mut log)?;
            println!("codebooks {} {}", r.audio_codebook.display(), r.video_codebook.display());
        }
        Command::TrainAsr { config } => {
            let r = run_asr_training(&load_config_for(&config, Stage::TrainAsr)?, &mut log)?;
            println!("checkpoint {} step {}", r.checkpoint.display(), r.steps);
        }
        Command::Eval { config, checkpoint } => {
            let r = run_eval(&load_config_for(&config, Stage::Eval)?, &checkpoint, &mut log)?;
            println!("hypotheses {}", r.hypotheses_file.display());
        }
        Command::GenCorpus { n, seed, out } => {
            generate_synthetic_corpus(n, seed)?.write(&out)?;
            println!("wrote {n} utterances to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("avfusion: {e}");
            ExitCode::FAILURE
        }
    }
}
