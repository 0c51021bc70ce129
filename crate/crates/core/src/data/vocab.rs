//! Token vocabulary with fixed reserved ids.

use std::collections::HashMap;

use crate::canvas::{Token, ANCHOR, END_OF_SLOT, FIRST_CONTENT, PAD};
use crate::error::{Error, Result};

pub const PAD_TEXT: &str = "⟨pad⟩";
pub const ANCHOR_TEXT: &str = "⟨s⟩";
pub const END_OF_SLOT_TEXT: &str = "⟨eos⟩";

/// Maps between token ids and their text.  Ids 0..3 are always the reserved
/// padding, anchor and end-of-slot entries, in that order; content ids
/// follow densely.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, Token>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for text in [PAD_TEXT, ANCHOR_TEXT, END_OF_SLOT_TEXT] {
            vocab.push(text).unwrap();
        }
        debug_assert_eq!(vocab.id(PAD_TEXT), Some(PAD));
        debug_assert_eq!(vocab.id(ANCHOR_TEXT), Some(ANCHOR));
        debug_assert_eq!(vocab.id(END_OF_SLOT_TEXT), Some(END_OF_SLOT));
        vocab
    }

    /// A vocabulary with `content` generated content tokens (`w000`...).
    pub fn synthetic(content: usize) -> Self {
        let mut vocab = Self::new();
        let width = content.saturating_sub(1).max(1).to_string().len();
        for i in 0..content {
            vocab.push(format!("w{i:0width$}")).unwrap();
        }
        vocab
    }

    pub fn push(&mut self, text: impl Into<String>) -> Result<Token> {
        let text = text.into();
        if text.is_empty() || text.contains(char::is_whitespace) {
            return Err(Error::Contract(format!(
                "token text {text:?} must be non-empty and free of whitespace"
            )));
        }
        if self.index.contains_key(&text) {
            return Err(Error::Contract(format!("duplicate token text {text:?}")));
        }
        let id = self.tokens.len() as Token;
        self.index.insert(text.clone(), id);
        self.tokens.push(text);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_content(&self) -> usize {
        self.tokens.len() - FIRST_CONTENT as usize
    }

    pub fn id(&self, text: &str) -> Option<Token> {
        self.index.get(text).copied()
    }

    pub fn text(&self, id: Token) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    /// Rebuilds a vocabulary from id-ordered token texts, checking the
    /// reserved prefix.
    pub fn from_texts<I: IntoIterator<Item = String>>(texts: I) -> Result<Self> {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, text) in texts.into_iter().enumerate() {
            let reserved = match i as Token {
                PAD => Some(PAD_TEXT),
                ANCHOR => Some(ANCHOR_TEXT),
                END_OF_SLOT => Some(END_OF_SLOT_TEXT),
                _ => None,
            };
            if let Some(want) = reserved {
                if text != want {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("reserved token must be {want:?}, found {text:?}"),
                    });
                }
            }
            vocab.push(text).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        if vocab.len() < FIRST_CONTENT as usize {
            return Err(Error::Parse {
                line: vocab.len(),
                message: "vocabulary is missing reserved tokens".into(),
            });
        }
        Ok(vocab)
    }
}
