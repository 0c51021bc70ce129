use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Parser;
use docins_core::eval::{alignment_report, corpus_bleu};
use serde::Deserialize;

/// Score a decoded JSONL file against a reference JSONL file. Tokens are
/// compared as strings, so no vocabulary is needed; documents are matched by
/// id.
#[derive(Parser, Debug)]
pub struct Args {
    /// Hypothesis documents (output of decode).
    #[arg(long)]
    hyp: PathBuf,
    /// Reference documents (output of gen-data).
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Debug, Deserialize)]
struct RawDoc {
    id: u64,
    #[allow(dead_code)]
    src: Vec<Vec<String>>,
    tgt: Vec<Vec<String>>,
}

fn read_raw(path: &Path) -> Result<Vec<RawDoc>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut docs = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDoc = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), index + 1))?;
        docs.push(doc);
    }
    if docs.is_empty() {
        bail!("{} holds no documents", path.display());
    }
    Ok(docs)
}

pub fn run(args: &Args) -> Result<()> {
    let hyps = read_raw(&args.hyp)?;
    let refs = read_raw(&args.reference)?;
    let mut by_id: HashMap<u64, &RawDoc> = HashMap::new();
    for doc in &refs {
        if by_id.insert(doc.id, doc).is_some() {
            bail!("reference id {} appears twice", doc.id);
        }
    }

    let mut hyp_docs = Vec::with_capacity(hyps.len());
    let mut ref_docs = Vec::with_capacity(hyps.len());
    let mut exact = 0usize;
    for hyp in &hyps {
        let Some(reference) = by_id.get(&hyp.id) else {
            bail!("hypothesis id {} has no reference", hyp.id);
        };
        if hyp.tgt == reference.tgt {
            exact += 1;
        }
        hyp_docs.push(hyp.tgt.clone());
        ref_docs.push(reference.tgt.clone());
    }

    let hyp_flat: Vec<Vec<String>> = hyp_docs.iter().map(|d| d.concat()).collect();
    let ref_flat: Vec<Vec<String>> = ref_docs.iter().map(|d| d.concat()).collect();
    let bleu = corpus_bleu(&hyp_flat, &ref_flat)?;
    let alignment = alignment_report(&hyp_docs, &ref_docs)?;
    println!(
        "bleu {:.4} | token accuracy {:.4} | sentence counts {:.4} | exact docs {}/{}",
        bleu,
        alignment.token_accuracy(),
        alignment.sentence_match_rate(),
        exact,
        hyps.len()
    );
    Ok(())
}
