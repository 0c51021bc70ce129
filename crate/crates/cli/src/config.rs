//! Flat `key = value` run configuration. One file pins the synthetic task,
//! the architecture and the optimizer, and its serialized text is embedded
//! verbatim in checkpoints so a resumed run provably trains the same model.
//! Unknown or duplicate keys are hard errors: a typo must never silently
//! fall back to a default.

use std::collections::HashSet;

use docins_core::data::{TaskConfig, TransformKind};
use docins_core::model::{ModelConfig, SpanWeighting};
use docins_core::numerics::Dtype;
use docins_core::train::TrainOptions;
use docins_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub content_vocab: usize,
    pub sentences_min: usize,
    pub sentences_max: usize,
    pub sentence_len_min: usize,
    pub sentence_len_max: usize,
    pub ambiguity: f64,
    pub transform: TransformKind,
    pub data_seed: u64,

    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub num_layers: usize,
    pub max_sentences: usize,
    pub sentence_positions: bool,

    pub batch_size: usize,
    pub max_subdoc_len: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub momentum: f64,
    pub span_weighting: WeightingKind,
    pub tau: f64,
    pub train_seed: u64,
    pub dtype: Dtype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingKind {
    BinaryTree,
    Uniform,
}

impl WeightingKind {
    fn name(self) -> &'static str {
        match self {
            WeightingKind::BinaryTree => "binary_tree",
            WeightingKind::Uniform => "uniform",
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            content_vocab: 64,
            sentences_min: 3,
            sentences_max: 6,
            sentence_len_min: 4,
            sentence_len_max: 8,
            ambiguity: 0.0,
            transform: TransformKind::Substitution,
            data_seed: 0,
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            num_layers: 2,
            max_sentences: 64,
            sentence_positions: true,
            batch_size: 32,
            max_subdoc_len: 256,
            base_lr: 0.1,
            warmup_steps: 10_000,
            momentum: 0.9,
            span_weighting: WeightingKind::BinaryTree,
            tau: 1.0,
            train_seed: 0,
            dtype: Dtype::F64,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid value {value:?} for key {key}"),
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse {
            line,
            message: format!("key {key} wants true or false, got {value:?}"),
        }),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(Error::Parse {
                    line,
                    message: format!("expected key = value, got {trimmed:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate key {key}"),
                });
            }
            match key {
                "content_vocab" => config.content_vocab = parse_value(line, key, value)?,
                "sentences_min" => config.sentences_min = parse_value(line, key, value)?,
                "sentences_max" => config.sentences_max = parse_value(line, key, value)?,
                "sentence_len_min" => config.sentence_len_min = parse_value(line, key, value)?,
                "sentence_len_max" => config.sentence_len_max = parse_value(line, key, value)?,
                "ambiguity" => config.ambiguity = parse_value(line, key, value)?,
                "transform" => {
                    config.transform = TransformKind::parse(value).map_err(|_| Error::Parse {
                        line,
                        message: format!("unknown transform {value:?}"),
                    })?
                }
                "data_seed" => config.data_seed = parse_value(line, key, value)?,
                "d_model" => config.d_model = parse_value(line, key, value)?,
                "num_heads" => config.num_heads = parse_value(line, key, value)?,
                "d_ff" => config.d_ff = parse_value(line, key, value)?,
                "num_layers" => config.num_layers = parse_value(line, key, value)?,
                "max_sentences" => config.max_sentences = parse_value(line, key, value)?,
                "sentence_positions" => {
                    config.sentence_positions = parse_bool(line, key, value)?
                }
                "batch_size" => config.batch_size = parse_value(line, key, value)?,
                "max_subdoc_len" => config.max_subdoc_len = parse_value(line, key, value)?,
                "base_lr" => config.base_lr = parse_value(line, key, value)?,
                "warmup_steps" => config.warmup_steps = parse_value(line, key, value)?,
                "momentum" => config.momentum = parse_value(line, key, value)?,
                "span_weighting" => {
                    config.span_weighting = match value {
                        "binary_tree" => WeightingKind::BinaryTree,
                        "uniform" => WeightingKind::Uniform,
                        _ => {
                            return Err(Error::Parse {
                                line,
                                message: format!("unknown span_weighting {value:?}"),
                            })
                        }
                    }
                }
                "tau" => config.tau = parse_value(line, key, value)?,
                "train_seed" => config.train_seed = parse_value(line, key, value)?,
                "dtype" => {
                    config.dtype = match value {
                        "f32" => Dtype::F32,
                        "f64" => Dtype::F64,
                        _ => {
                            return Err(Error::Parse {
                                line,
                                message: format!("unknown dtype {value:?}"),
                            })
                        }
                    }
                }
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown key {key}"),
                    })
                }
            }
        }
        Ok(config)
    }

    /// Serializes every key in a fixed order; `parse` of the result gives
    /// back an equal config.
    pub fn to_text(&self) -> String {
        format!(
            "content_vocab = {}\n\
             sentences_min = {}\n\
             sentences_max = {}\n\
             sentence_len_min = {}\n\
             sentence_len_max = {}\n\
             ambiguity = {}\n\
             transform = {}\n\
             data_seed = {}\n\
             d_model = {}\n\
             num_heads = {}\n\
             d_ff = {}\n\
             num_layers = {}\n\
             max_sentences = {}\n\
             sentence_positions = {}\n\
             batch_size = {}\n\
             max_subdoc_len = {}\n\
             base_lr = {}\n\
             warmup_steps = {}\n\
             momentum = {}\n\
             span_weighting = {}\n\
             tau = {}\n\
             train_seed = {}\n\
             dtype = {}\n",
            self.content_vocab,
            self.sentences_min,
            self.sentences_max,
            self.sentence_len_min,
            self.sentence_len_max,
            self.ambiguity,
            self.transform.name(),
            self.data_seed,
            self.d_model,
            self.num_heads,
            self.d_ff,
            self.num_layers,
            self.max_sentences,
            self.sentence_positions,
            self.batch_size,
            self.max_subdoc_len,
            self.base_lr,
            self.warmup_steps,
            self.momentum,
            self.span_weighting.name(),
            self.tau,
            self.train_seed,
            self.dtype.name(),
        )
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            content_vocab: self.content_vocab,
            sentences_per_doc: (self.sentences_min, self.sentences_max),
            sentence_len: (self.sentence_len_min, self.sentence_len_max),
            ambiguity: self.ambiguity,
            transform: self.transform,
            seed: self.data_seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            num_heads: self.num_heads,
            d_ff: self.d_ff,
            num_layers: self.num_layers,
            max_sentences: self.max_sentences,
            use_sentence_positions: self.sentence_positions,
            eps: 1e-6,
        }
    }

    pub fn weighting(&self) -> SpanWeighting {
        match self.span_weighting {
            WeightingKind::BinaryTree => SpanWeighting::BinaryTree { tau: self.tau },
            WeightingKind::Uniform => SpanWeighting::Uniform,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            max_subdoc_len: self.max_subdoc_len,
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            momentum: self.momentum,
            weighting: self.weighting(),
            seed: self.train_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let config = RunConfig::default();
        let parsed = RunConfig::parse(&config.to_text()).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn overrides_comments_and_blanks_are_honored() {
        let text = "# tiny run\n\nd_model = 16\nambiguity = 0.5\ndtype = f32\nsentence_positions = false\nspan_weighting = uniform\ntransform = substitution_reversed\n";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.d_model, 16);
        assert_eq!(config.ambiguity, 0.5);
        assert_eq!(config.dtype, Dtype::F32);
        assert!(!config.sentence_positions);
        assert_eq!(config.span_weighting, WeightingKind::Uniform);
        assert_eq!(config.transform, TransformKind::SubstitutionReversed);
        assert_eq!(config.batch_size, 32);
        let round = RunConfig::parse(&config.to_text()).unwrap();
        assert_eq!(round, config);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = RunConfig::parse("d_modle = 16\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("unknown key"), "{text}");
        assert!(text.contains("line 1"), "{text}");
    }

    #[test]
    fn duplicates_bad_values_and_bad_syntax_are_rejected() {
        assert!(RunConfig::parse("d_model = 16\nd_model = 32\n").is_err());
        assert!(RunConfig::parse("d_model = sixteen\n").is_err());
        assert!(RunConfig::parse("just some words\n").is_err());
        assert!(RunConfig::parse("dtype = f16\n").is_err());
        assert!(RunConfig::parse("span_weighting = centered\n").is_err());
        assert!(RunConfig::parse("sentence_positions = yes\n").is_err());
    }
}
