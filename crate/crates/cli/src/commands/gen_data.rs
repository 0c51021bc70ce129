use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Parser;
use docins_core::data::{write_documents, write_vocab, Split, SyntheticTask, Vocab};

use crate::config::RunConfig;

/// Generate a deterministic synthetic parallel corpus: a vocabulary file and
/// one JSONL document file per split, fully determined by the run config.
#[derive(Parser, Debug)]
pub struct Args {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for vocab.txt and the split files.
    #[arg(long)]
    out: PathBuf,
    /// Training documents to generate.
    #[arg(long, default_value_t = 512)]
    train: usize,
    /// Validation documents to generate.
    #[arg(long, default_value_t = 64)]
    valid: usize,
    /// Test documents to generate.
    #[arg(long, default_value_t = 64)]
    test: usize,
    /// Overwrite existing files.
    #[arg(long)]
    force: bool,
}

fn create(path: &Path, force: bool) -> Result<BufWriter<File>> {
    if path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", path.display());
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

pub fn run(args: &Args) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let config = RunConfig::parse(&text)?;
    let task = SyntheticTask::new(config.task_config())?;
    let vocab = Vocab::synthetic(config.content_vocab);
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let vocab_path = args.out.join("vocab.txt");
    let mut out = create(&vocab_path, args.force)?;
    write_vocab(&mut out, &vocab)?;
    out.flush()?;

    let splits = [
        (Split::Train, "train.jsonl", args.train, 0u64),
        (Split::Valid, "valid.jsonl", args.valid, args.train as u64),
        (
            Split::Test,
            "test.jsonl",
            args.test,
            (args.train + args.valid) as u64,
        ),
    ];
    for (split, file_name, count, first_id) in splits {
        if count == 0 {
            bail!("every split needs at least one document");
        }
        let docs = task.generate_split(split, count, first_id);
        let path = args.out.join(file_name);
        let mut out = create(&path, args.force)?;
        write_documents(&mut out, &vocab, &docs)?;
        out.flush()?;
        println!(
            "wrote {count} documents to {} ({} token types)",
            path.display(),
            vocab.len()
        );
    }
    Ok(())
}
