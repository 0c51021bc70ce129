use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Parser;
use docins_core::data::{read_documents, read_vocab, DocumentPair, Vocab};
use docins_core::model::Network;
use docins_core::numerics::{Dtype, Scalar};
use docins_core::train::Trainer;

use crate::checkpoint;
use crate::config::RunConfig;

/// Train a model on a generated corpus and write a checkpoint.
#[derive(Parser, Debug)]
pub struct Args {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Directory holding vocab.txt and train.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Total optimizer steps the run should end with.
    #[arg(long)]
    steps: u64,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from an earlier checkpoint of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

pub fn load_corpus(data: &Path, file_name: &str) -> Result<(Vocab, Vec<DocumentPair>)> {
    let vocab_path = data.join("vocab.txt");
    let vocab = read_vocab(BufReader::new(
        File::open(&vocab_path).with_context(|| format!("opening {}", vocab_path.display()))?,
    ))?;
    let docs_path = data.join(file_name);
    let docs = read_documents(
        BufReader::new(
            File::open(&docs_path)
                .with_context(|| format!("opening {}", docs_path.display()))?,
        ),
        &vocab,
    )?;
    Ok((vocab, docs))
}

pub fn check_vocab(config: &RunConfig, vocab: &Vocab) -> Result<()> {
    if vocab.num_content() != config.content_vocab {
        bail!(
            "config expects {} content tokens but the vocabulary holds {}; \
             was the data generated with a different config?",
            config.content_vocab,
            vocab.num_content()
        );
    }
    Ok(())
}

pub fn run(args: &Args) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let config = RunConfig::parse(&text)?;
    match config.dtype {
        Dtype::F64 => run_typed::<f64>(args, &config),
        Dtype::F32 => run_typed::<f32>(args, &config),
    }
}

fn run_typed<S: Scalar>(args: &Args, config: &RunConfig) -> Result<()> {
    let (vocab, docs) = load_corpus(&args.data, "train.jsonl")?;
    check_vocab(config, &vocab)?;
    let opts = config.train_options();
    let mut trainer: Trainer<S> = match &args.resume {
        None => {
            let net = Network::new(config.model_config(vocab.len()))?;
            Trainer::new(net, &docs, opts)?
        }
        Some(path) => {
            let loaded = checkpoint::load::<S>(path)?;
            if loaded.config_text != config.to_text() {
                bail!(
                    "{} was trained under a different config; refusing to resume",
                    path.display()
                );
            }
            if loaded.step > args.steps {
                bail!(
                    "{} is already at step {}, past the requested {}",
                    path.display(),
                    loaded.step,
                    args.steps
                );
            }
            println!("resuming from {} at step {}", path.display(), loaded.step);
            let net = Network::new(config.model_config(vocab.len()))?;
            Trainer::resume(
                net,
                loaded.params,
                loaded.slots,
                loaded.momenta,
                loaded.step,
                &docs,
                opts,
            )?
        }
    };

    while trainer.step() < args.steps {
        let stats = trainer.step_once()?;
        let done = stats.step + 1;
        if done % args.log_every.max(1) == 0 || done == args.steps {
            println!(
                "step {done}/{} | lr {:.6} | loss {:.6} | epochs {}",
                args.steps,
                stats.lr,
                stats.loss,
                trainer.epochs_completed()
            );
        }
    }

    checkpoint::save(
        &args.out,
        &config.to_text(),
        trainer.step(),
        trainer.params(),
        trainer.optimizer(),
    )?;
    println!("saved checkpoint to {}", args.out.display());
    Ok(())
}
