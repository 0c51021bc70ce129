use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::canvas::{Canvas, Token};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{cast, ParamId, Parameters, Scalar, Tape, Tensor, Var};

/// Stream id of the parameter-init generator, disjoint from the data and
/// batching streams so reseeding one never perturbs the others.
pub const STREAM_INIT: u64 = 5;

#[derive(Debug, Clone, Copy)]
enum ParamKind {
    /// Rank-2 weight, Glorot-uniform in `±sqrt(6 / (rows + cols))`.
    Weight,
    /// Rank-2 weight whose output feeds a residual sum: Glorot shrunk by
    /// `sqrt(2 * num_layers)` so the residual stream starts near identity,
    /// which keeps early updates stable at larger learning rates.
    Residual,
    /// Rank-1 bias, zeros.
    Bias,
    /// Layer-norm gain, ones.
    Gain,
    /// Slot boundary vector, uniform in `±1/sqrt(d)`.
    Boundary,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

#[derive(Debug, Clone, Copy)]
struct AttnHandles {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bq: ParamId,
    bk: ParamId,
    bv: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LnHandles {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FfnHandles {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: AttnHandles,
    ln1: LnHandles,
    ffn: FfnHandles,
    ln2: LnHandles,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: AttnHandles,
    ln1: LnHandles,
    cross_attn: AttnHandles,
    ln2: LnHandles,
    ffn: FfnHandles,
    ln3: LnHandles,
}

#[derive(Debug, Clone)]
struct Handles {
    src_embed: ParamId,
    tgt_embed: ParamId,
    src_sent_embed: ParamId,
    tgt_sent_embed: ParamId,
    enc: Vec<EncoderLayer>,
    enc_final: LnHandles,
    dec: Vec<DecoderLayer>,
    dec_final: LnHandles,
    slot_left: ParamId,
    slot_right: ParamId,
    slot_proj_w: ParamId,
    slot_proj_b: ParamId,
    slot_out_w: ParamId,
    slot_out_b: ParamId,
}

struct Registrar {
    specs: Vec<ParamSpec>,
}

impl Registrar {
    fn new() -> Self {
        Registrar { specs: Vec::new() }
    }

    fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> ParamId {
        let id = ParamId(self.specs.len());
        self.specs.push(ParamSpec { name, shape, kind });
        id
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.add(name, vec![rows, cols], ParamKind::Weight)
    }

    fn residual_weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.add(name, vec![rows, cols], ParamKind::Residual)
    }

    fn bias(&mut self, name: String, len: usize) -> ParamId {
        self.add(name, vec![len], ParamKind::Bias)
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnHandles {
        AttnHandles {
            wq: self.weight(format!("{prefix}.wq"), d, d),
            wk: self.weight(format!("{prefix}.wk"), d, d),
            wv: self.weight(format!("{prefix}.wv"), d, d),
            wo: self.residual_weight(format!("{prefix}.wo"), d, d),
            bq: self.bias(format!("{prefix}.bq"), d),
            bk: self.bias(format!("{prefix}.bk"), d),
            bv: self.bias(format!("{prefix}.bv"), d),
            bo: self.bias(format!("{prefix}.bo"), d),
        }
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> LnHandles {
        LnHandles {
            gain: self.add(format!("{prefix}.gain"), vec![d], ParamKind::Gain),
            bias: self.bias(format!("{prefix}.bias"), d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnHandles {
        FfnHandles {
            w1: self.weight(format!("{prefix}.w1"), d, d_ff),
            b1: self.bias(format!("{prefix}.b1"), d_ff),
            w2: self.residual_weight(format!("{prefix}.w2"), d_ff, d),
            b2: self.bias(format!("{prefix}.b2"), d),
        }
    }
}

/// Per-forward state: the tape plus memoized parameter leases so each tensor
/// enters the tape at most once per example.
pub struct Forward<'a, S: Scalar> {
    pub tape: Tape<S>,
    params: &'a Parameters<S>,
    leases: Vec<Option<Var>>,
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn new(params: &'a Parameters<S>) -> Self {
        Forward {
            tape: Tape::new(),
            params,
            leases: vec![None; params.len()],
        }
    }

    fn lease(&mut self, id: ParamId) -> Var {
        if let Some(var) = self.leases[id.0] {
            return var;
        }
        let var = self.tape.param(self.params.get(id), id.0);
        self.leases[id.0] = Some(var);
        var
    }
}

/// The architecture: configuration plus the canonical parameter layout.
/// Weights live in a separate [`Parameters`] value so training, checkpointing
/// and finite-difference checks can own or mutate them independently.
pub struct Network {
    config: ModelConfig,
    layout: Vec<ParamSpec>,
    handles: Handles,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Network> {
        config.validate()?;
        let d = config.d_model;
        let mut reg = Registrar::new();
        let src_embed = reg.weight("src_embed".into(), config.vocab_size, d);
        let tgt_embed = reg.weight("tgt_embed".into(), config.vocab_size, d);
        let src_sent_embed = reg.weight("src_sent_embed".into(), config.max_sentences, d);
        let tgt_sent_embed = reg.weight("tgt_sent_embed".into(), config.max_sentences, d);
        let enc = (0..config.num_layers)
            .map(|i| EncoderLayer {
                attn: reg.attn(&format!("enc{i}.attn"), d),
                ln1: reg.layer_norm(&format!("enc{i}.ln1"), d),
                ffn: reg.ffn(&format!("enc{i}.ffn"), d, config.d_ff),
                ln2: reg.layer_norm(&format!("enc{i}.ln2"), d),
            })
            .collect();
        let enc_final = reg.layer_norm("enc_final", d);
        let dec = (0..config.num_layers)
            .map(|i| DecoderLayer {
                self_attn: reg.attn(&format!("dec{i}.self_attn"), d),
                ln1: reg.layer_norm(&format!("dec{i}.ln1"), d),
                cross_attn: reg.attn(&format!("dec{i}.cross_attn"), d),
                ln2: reg.layer_norm(&format!("dec{i}.ln2"), d),
                ffn: reg.ffn(&format!("dec{i}.ffn"), d, config.d_ff),
                ln3: reg.layer_norm(&format!("dec{i}.ln3"), d),
            })
            .collect();
        let dec_final = reg.layer_norm("dec_final", d);
        let slot_left = reg.add("slot_left".into(), vec![d], ParamKind::Boundary);
        let slot_right = reg.add("slot_right".into(), vec![d], ParamKind::Boundary);
        let slot_proj_w = reg.weight("slot_proj_w".into(), 2 * d, d);
        let slot_proj_b = reg.bias("slot_proj_b".into(), d);
        let slot_out_w = reg.weight("slot_out_w".into(), d, config.num_classes());
        let slot_out_b = reg.bias("slot_out_b".into(), config.num_classes());
        let handles = Handles {
            src_embed,
            tgt_embed,
            src_sent_embed,
            tgt_sent_embed,
            enc,
            enc_final,
            dec,
            dec_final,
            slot_left,
            slot_right,
            slot_proj_w,
            slot_proj_b,
            slot_out_w,
            slot_out_b,
        };
        Ok(Network {
            config,
            layout: reg.specs,
            handles,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.layout.len()
    }

    pub fn num_coordinates(&self) -> usize {
        self.layout
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// Builds freshly initialized weights. All draws happen in f64 and are
    /// cast afterwards, so f32 and f64 models start from the same values, and
    /// every tensor in the layout is drawn in order regardless of the
    /// sentence-position flag, so ablation variants share their init stream.
    pub fn init_params<S: Scalar>(&self, seed: u64) -> Parameters<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_INIT);
        let mut params = Parameters::new();
        for spec in &self.layout {
            let len: usize = spec.shape.iter().product();
            let data: Vec<S> = match spec.kind {
                ParamKind::Weight => {
                    let limit = (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                    (0..len).map(|_| cast(rng.gen_range(-limit..limit))).collect()
                }
                ParamKind::Residual => {
                    let glorot = (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                    let limit = glorot / (2.0 * self.config.num_layers as f64).sqrt();
                    (0..len).map(|_| cast(rng.gen_range(-limit..limit))).collect()
                }
                ParamKind::Bias => vec![S::zero(); len],
                ParamKind::Gain => vec![S::one(); len],
                ParamKind::Boundary => {
                    let limit = 1.0 / (spec.shape[0] as f64).sqrt();
                    (0..len).map(|_| cast(rng.gen_range(-limit..limit))).collect()
                }
            };
            let tensor = Tensor::new(spec.shape.clone(), data).expect("layout shape mismatch");
            params.push(&spec.name, tensor);
        }
        params
    }

    /// Checks externally supplied weights (a loaded checkpoint) against the
    /// canonical layout.
    pub fn validate_params<S: Scalar>(&self, params: &Parameters<S>) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.layout.len(),
                params.len()
            )));
        }
        for (i, spec) in self.layout.iter().enumerate() {
            let id = ParamId(i);
            if params.name(id) != spec.name {
                return Err(Error::Checkpoint(format!(
                    "parameter {i} should be {:?}, found {:?}",
                    spec.name,
                    params.name(id)
                )));
            }
            if params.get(id).shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} should have shape {:?}, found {:?}",
                    spec.name,
                    spec.shape,
                    params.get(id).shape()
                )));
            }
        }
        Ok(())
    }

    /// Encodes a source token sequence with its sentence ids. `pad` marks
    /// positions every attention layer must ignore as keys; real rows of the
    /// output are bit-identical whether trailing padding is present or not.
    pub fn encode<S: Scalar>(
        &self,
        fwd: &mut Forward<S>,
        tokens: &[Token],
        sentence_ids: &[u32],
        pad: Option<&[bool]>,
    ) -> Result<Var> {
        let mut x = self.embed(
            fwd,
            tokens,
            sentence_ids,
            self.handles.src_embed,
            self.handles.src_sent_embed,
        )?;
        for layer in &self.handles.enc {
            x = self.attn_block(fwd, x, None, &layer.attn, &layer.ln1, pad)?;
            x = self.ffn_block(fwd, x, &layer.ffn, &layer.ln2)?;
        }
        self.layer_norm(fwd, x, &self.handles.enc_final)
    }

    /// Runs the decoder over a canvas against encoded source states. Canvas
    /// self-attention is unmasked in both directions; cross-attention applies
    /// the source padding mask if one was used for [`Network::encode`].
    pub fn decoder_states<S: Scalar>(
        &self,
        fwd: &mut Forward<S>,
        canvas: &Canvas,
        encoded: Var,
        src_pad: Option<&[bool]>,
    ) -> Result<Var> {
        let mut x = self.embed(
            fwd,
            canvas.tokens(),
            canvas.sentence_ids(),
            self.handles.tgt_embed,
            self.handles.tgt_sent_embed,
        )?;
        for layer in &self.handles.dec {
            x = self.attn_block(fwd, x, None, &layer.self_attn, &layer.ln1, None)?;
            x = self.attn_block(fwd, x, Some(encoded), &layer.cross_attn, &layer.ln2, src_pad)?;
            x = self.ffn_block(fwd, x, &layer.ffn, &layer.ln3)?;
        }
        self.layer_norm(fwd, x, &self.handles.dec_final)
    }

    /// Scores every slot of the canvas the decoder states came from: an
    /// `n`-token canvas yields `n + 1` rows of `vocab_size + 1` logits.
    pub fn slot_logits<S: Scalar>(&self, fwd: &mut Forward<S>, states: Var) -> Result<Var> {
        let left = fwd.lease(self.handles.slot_left);
        let right = fwd.lease(self.handles.slot_right);
        let pairs = fwd.tape.slot_pairs(states, left, right)?;
        let proj_w = fwd.lease(self.handles.slot_proj_w);
        let proj_b = fwd.lease(self.handles.slot_proj_b);
        let hidden = fwd.tape.matmul(pairs, proj_w)?;
        let hidden = fwd.tape.add_bias(hidden, proj_b)?;
        let hidden = fwd.tape.relu(hidden);
        let out_w = fwd.lease(self.handles.slot_out_w);
        let out_b = fwd.lease(self.handles.slot_out_b);
        let logits = fwd.tape.matmul(hidden, out_w)?;
        fwd.tape.add_bias(logits, out_b)
    }

    /// Full per-example pass from raw source tokens and a canvas to slot
    /// logits.
    pub fn forward_slots<S: Scalar>(
        &self,
        fwd: &mut Forward<S>,
        src_tokens: &[Token],
        src_sentence_ids: &[u32],
        canvas: &Canvas,
    ) -> Result<Var> {
        let encoded = self.encode(fwd, src_tokens, src_sentence_ids, None)?;
        let states = self.decoder_states(fwd, canvas, encoded, None)?;
        self.slot_logits(fwd, states)
    }

    fn embed<S: Scalar>(
        &self,
        fwd: &mut Forward<S>,
        tokens: &[Token],
        sentence_ids: &[u32],
        token_table: ParamId,
        sentence_table: ParamId,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot embed an empty sequence".into()));
        }
        if tokens.len() != sentence_ids.len() {
            return Err(Error::Contract(format!(
                "{} tokens but {} sentence ids",
                tokens.len(),
                sentence_ids.len()
            )));
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Contract(format!(
                    "token id {t} outside vocabulary of size {}",
                    self.config.vocab_size
                )));
            }
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = fwd.lease(token_table);
        let embedded = fwd.tape.gather(table, &ids)?;
        let scaled = fwd
            .tape
            .scale(embedded, cast::<S>((self.config.d_model as f64).sqrt()));
        let positions = fwd
            .tape
            .constant(sinusoidal_positions(tokens.len(), self.config.d_model));
        let mut x = fwd.tape.add(scaled, positions)?;
        if self.config.use_sentence_positions {
            let mut sids = Vec::with_capacity(sentence_ids.len());
            for &sid in sentence_ids {
                if sid as usize >= self.config.max_sentences {
                    return Err(Error::SentenceCapacity {
                        index: sid,
                        capacity: self.config.max_sentences,
                    });
                }
                sids.push(sid as usize);
            }
            let sent_table = fwd.lease(sentence_table);
            let sent = fwd.tape.gather(sent_table, &sids)?;
            x = fwd.tape.add(x, sent)?;
        }
        Ok(x)
    }

    fn layer_norm<S: Scalar>(&self, fwd: &mut Forward<S>, x: Var, ln: &LnHandles) -> Result<Var> {
        let gain = fwd.lease(ln.gain);
        let bias = fwd.lease(ln.bias);
        fwd.tape.layer_norm(x, gain, bias, self.config.eps)
    }

    /// Pre-norm residual attention: the block input is normalized, attended,
    /// and added back onto the unnormalized stream. `cross_keys` switches the
    /// key/value source from the normalized stream (self-attention) to an
    /// external sequence (cross-attention).
    fn attn_block<S: Scalar>(
        &self,
        fwd: &mut Forward<S>,
        x: Var,
        cross_keys: Option<Var>,
        attn: &AttnHandles,
        ln: &LnHandles,
        key_pad: Option<&[bool]>,
    ) -> Result<Var> {
        let normed = self.layer_norm(fwd, x, ln)?;
        let keys_in = cross_keys.unwrap_or(normed);
        let wq = fwd.lease(attn.wq);
        let bq = fwd.lease(attn.bq);
        let q = fwd.tape.matmul(normed, wq)?;
        let q = fwd.tape.add_bias(q, bq)?;
        let wk = fwd.lease(attn.wk);
        let bk = fwd.lease(attn.bk);
        let k = fwd.tape.matmul(keys_in, wk)?;
        let k = fwd.tape.add_bias(k, bk)?;
        let wv = fwd.lease(attn.wv);
        let bv = fwd.lease(attn.bv);
        let v = fwd.tape.matmul(keys_in, wv)?;
        let v = fwd.tape.add_bias(v, bv)?;
        let mixed = fwd
            .tape
            .attention(q, k, v, self.config.num_heads, key_pad)?;
        let wo = fwd.lease(attn.wo);
        let bo = fwd.lease(attn.bo);
        let out = fwd.tape.matmul(mixed, wo)?;
        let out = fwd.tape.add_bias(out, bo)?;
        fwd.tape.add(x, out)
    }

    fn ffn_block<S: Scalar>(
        &self,
        fwd: &mut Forward<S>,
        x: Var,
        ffn: &FfnHandles,
        ln: &LnHandles,
    ) -> Result<Var> {
        let w1 = fwd.lease(ffn.w1);
        let b1 = fwd.lease(ffn.b1);
        let normed = self.layer_norm(fwd, x, ln)?;
        let hidden = fwd.tape.matmul(normed, w1)?;
        let hidden = fwd.tape.add_bias(hidden, b1)?;
        let hidden = fwd.tape.relu(hidden);
        let w2 = fwd.lease(ffn.w2);
        let b2 = fwd.lease(ffn.b2);
        let out = fwd.tape.matmul(hidden, w2)?;
        let out = fwd.tape.add_bias(out, b2)?;
        fwd.tape.add(x, out)
    }
}

/// The classic fixed position encoding: even columns are sines, odd columns
/// cosines, with wavelengths geometric in the column pair index.
fn sinusoidal_positions<S: Scalar>(len: usize, d_model: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d_model);
    for pos in 0..len {
        for col in 0..d_model {
            let pair = (col / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            let value = if col % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(cast::<S>(value));
        }
    }
    Tensor::new(vec![len, d_model], data).expect("length matches shape")
}
