use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Parser;
use docins_core::data::{write_documents, DocumentPair};
use docins_core::decode::{decode, DecodeOptions, StopReason};
use docins_core::eval::flatten_source;
use docins_core::model::Network;
use docins_core::numerics::{Dtype, Scalar};

use crate::checkpoint;
use crate::commands::train::{check_vocab, load_corpus};
use crate::config::RunConfig;

/// Decode a split with a trained checkpoint and write the hypotheses as a
/// JSONL document file (same schema as the references).
#[derive(Parser, Debug)]
pub struct Args {
    /// Run configuration file; defaults to the config embedded in the
    /// checkpoint, and must agree with it when given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding vocab.txt and the split files.
    #[arg(long)]
    data: PathBuf,
    /// Which split file to decode.
    #[arg(long, default_value = "test")]
    split: String,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Canvas length cap, anchors included.
    #[arg(long)]
    max_len: Option<usize>,
    /// Cap on insertion rounds per document.
    #[arg(long)]
    max_steps: Option<usize>,
}

pub fn run(args: &Args) -> Result<()> {
    let dtype = checkpoint::peek_dtype(&args.checkpoint)?;
    match dtype {
        Dtype::F64 => run_typed::<f64>(args),
        Dtype::F32 => run_typed::<f32>(args),
    }
}

fn run_typed<S: Scalar>(args: &Args) -> Result<()> {
    if !matches!(args.split.as_str(), "train" | "valid" | "test") {
        bail!("unknown split {:?}; expected train, valid or test", args.split);
    }
    let loaded = checkpoint::load::<S>(&args.checkpoint)?;
    let config = RunConfig::parse(&loaded.config_text)?;
    if let Some(path) = &args.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if RunConfig::parse(&text)?.to_text() != config.to_text() {
            bail!(
                "{} was trained under a different config than {}",
                args.checkpoint.display(),
                path.display()
            );
        }
    }
    let (vocab, docs) = load_corpus(&args.data, &format!("{}.jsonl", args.split))?;
    check_vocab(&config, &vocab)?;
    let net = Network::new(config.model_config(vocab.len()))?;
    net.validate_params(&loaded.params)?;

    let opts = DecodeOptions {
        max_len: args.max_len,
        max_steps: args.max_steps,
    };
    let mut hypotheses = Vec::with_capacity(docs.len());
    let mut total_rounds = 0usize;
    let mut completed = 0usize;
    for doc in &docs {
        let (src_tokens, src_sids) = flatten_source(doc);
        let outcome = decode(
            &net,
            &loaded.params,
            &src_tokens,
            &src_sids,
            doc.source.len(),
            opts,
        )?;
        total_rounds += outcome.num_rounds();
        if outcome.reason == StopReason::Completed {
            completed += 1;
        }
        hypotheses.push(DocumentPair {
            id: doc.id,
            source: doc.source.clone(),
            target: outcome.canvas.to_sentences(),
        });
    }

    let mut out = BufWriter::new(
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?,
    );
    write_documents(&mut out, &vocab, &hypotheses)?;
    out.flush()?;
    println!(
        "decoded {} documents to {} | mean rounds {:.2} | completed {}/{}",
        hypotheses.len(),
        args.out.display(),
        total_rounds as f64 / hypotheses.len() as f64,
        completed,
        hypotheses.len()
    );
    Ok(())
}
