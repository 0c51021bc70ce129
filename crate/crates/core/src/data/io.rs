//! Corpus and vocabulary files.
//!
//! Documents are stored as JSON Lines: one object per line with an `id`, a
//! `src` array of sentences and a `tgt` array of sentences, each sentence an
//! array of token strings.  Vocabularies are plain text, one token per line,
//! line number equals token id.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::canvas::Token;
use crate::error::{Error, Result};

use super::vocab::Vocab;
use super::DocumentPair;

#[derive(Serialize, Deserialize)]
struct DocRecord {
    id: u64,
    src: Vec<Vec<String>>,
    tgt: Vec<Vec<String>>,
}

fn render(vocab: &Vocab, sentences: &[Vec<Token>]) -> Result<Vec<Vec<String>>> {
    sentences
        .iter()
        .map(|sentence| {
            sentence
                .iter()
                .map(|&tok| {
                    vocab
                        .text(tok)
                        .map(String::from)
                        .ok_or_else(|| Error::Contract(format!("token id {tok} has no text")))
                })
                .collect()
        })
        .collect()
}

fn intern(vocab: &Vocab, line: usize, sentences: Vec<Vec<String>>) -> Result<Vec<Vec<Token>>> {
    sentences
        .into_iter()
        .map(|sentence| {
            sentence
                .into_iter()
                .map(|text| {
                    vocab.id(&text).ok_or(Error::Parse {
                        line,
                        message: format!("unknown token {text:?}"),
                    })
                })
                .collect()
        })
        .collect()
}

pub fn write_documents<W: Write>(out: &mut W, vocab: &Vocab, docs: &[DocumentPair]) -> Result<()> {
    for doc in docs {
        let record = DocRecord {
            id: doc.id,
            src: render(vocab, &doc.source)?,
            tgt: render(vocab, &doc.target)?,
        };
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_documents<R: BufRead>(input: R, vocab: &Vocab) -> Result<Vec<DocumentPair>> {
    let mut docs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DocRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.src.len() != record.tgt.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "document {} has {} source sentences but {} target sentences",
                    record.id,
                    record.src.len(),
                    record.tgt.len()
                ),
            });
        }
        docs.push(DocumentPair {
            id: record.id,
            source: intern(vocab, line_no, record.src)?,
            target: intern(vocab, line_no, record.tgt)?,
        });
    }
    Ok(docs)
}

pub fn write_vocab<W: Write>(out: &mut W, vocab: &Vocab) -> Result<()> {
    for text in vocab.texts() {
        writeln!(out, "{text}")?;
    }
    Ok(())
}

pub fn read_vocab<R: BufRead>(input: R) -> Result<Vocab> {
    let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
    Vocab::from_texts(lines.into_iter().filter(|l| !l.is_empty()))
}
