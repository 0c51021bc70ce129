//! The training loop: an epoch-resampling batch stream feeding per-example
//! tapes whose gradients are reduced in a fixed order, so a training run is
//! bit-reproducible from its seed no matter how many worker threads computed
//! the example gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::canvas::sample_intermediate_canvas;
use crate::data::{BatchStream, DocumentPair};
use crate::error::Result;
use crate::model::{example_loss, prepare_example, Network, PreparedExample, SpanWeighting};
use crate::numerics::{cast, GradBuffer, Parameters, Scalar};
use crate::optim::{Schedule, SecondMoment, Sm3, Sm3Options};

/// Stream id of the canvas-corruption generator, disjoint from the data,
/// batching and init streams.
pub const STREAM_CANVAS: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Context window: sub-documents are capped at this many target tokens,
    /// anchors included.
    pub max_subdoc_len: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub momentum: f64,
    pub weighting: SpanWeighting,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 32,
            max_subdoc_len: 256,
            base_lr: 0.1,
            warmup_steps: 10_000,
            momentum: 0.9,
            weighting: SpanWeighting::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Zero-based index of the step that just ran.
    pub step: u64,
    pub lr: f64,
    /// Mean example loss over the batch.
    pub loss: f64,
}

/// Computes the batch-mean loss and accumulates the batch-mean gradients into
/// `out`, always sequentially.
pub fn batch_grads_sequential<S: Scalar>(
    net: &Network,
    params: &Parameters<S>,
    prepared: &[PreparedExample<S>],
    out: &mut GradBuffer<S>,
) -> Result<f64> {
    let scale = cast::<S>(1.0 / prepared.len() as f64);
    let mut total = 0.0;
    for example in prepared {
        let (mut fwd, loss) = example_loss(net, params, example)?;
        total += fwd.tape.value(loss).item().to_f64_lossy();
        fwd.tape.backward(loss, scale)?;
        out.accumulate_from(&fwd.tape);
    }
    Ok(total / prepared.len() as f64)
}

/// Same contract as [`batch_grads_sequential`] with example tapes fanned out
/// over the rayon pool. Per-example gradients are materialized independently
/// and merged in example order, which reproduces the sequential accumulation
/// order exactly, so both paths return bit-identical gradients and loss.
#[cfg(feature = "parallel")]
pub fn batch_grads_parallel<S: Scalar>(
    net: &Network,
    params: &Parameters<S>,
    prepared: &[PreparedExample<S>],
    out: &mut GradBuffer<S>,
) -> Result<f64> {
    use rayon::prelude::*;

    let scale = cast::<S>(1.0 / prepared.len() as f64);
    let results: Vec<(f64, GradBuffer<S>)> = prepared
        .par_iter()
        .map(|example| -> Result<(f64, GradBuffer<S>)> {
            let (mut fwd, loss) = example_loss(net, params, example)?;
            let value = fwd.tape.value(loss).item().to_f64_lossy();
            fwd.tape.backward(loss, scale)?;
            let mut buf = GradBuffer::zeros_like(params);
            buf.accumulate_from(&fwd.tape);
            Ok((value, buf))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for (value, buf) in &results {
        total += value;
        out.merge(buf);
    }
    Ok(total / prepared.len() as f64)
}

/// Batch gradients through whichever path the build and pool support.
pub fn batch_loss_and_grads<S: Scalar>(
    net: &Network,
    params: &Parameters<S>,
    prepared: &[PreparedExample<S>],
    out: &mut GradBuffer<S>,
) -> Result<f64> {
    #[cfg(feature = "parallel")]
    {
        if prepared.len() > 1 && rayon::current_num_threads() > 1 {
            return batch_grads_parallel(net, params, prepared, out);
        }
    }
    batch_grads_sequential(net, params, prepared, out)
}

/// Owns everything one training run needs. Holds the network, its weights,
/// the optimizer and the data stream; each [`Trainer::step_once`] draws a
/// batch, samples canvas corruptions, and applies one optimizer update under
/// the warmup schedule.
pub struct Trainer<'d, S: Scalar> {
    net: Network,
    params: Parameters<S>,
    optimizer: Sm3<S>,
    schedule: Schedule,
    stream: BatchStream<'d>,
    canvas_rng: ChaCha8Rng,
    weighting: SpanWeighting,
    step: u64,
}

impl<'d, S: Scalar> Trainer<'d, S> {
    pub fn new(net: Network, docs: &'d [DocumentPair], opts: TrainOptions) -> Result<Self> {
        let params = net.init_params(opts.seed);
        Self::with_params(net, params, docs, opts)
    }

    /// Starts from externally supplied weights with a fresh optimizer.
    pub fn with_params(
        net: Network,
        params: Parameters<S>,
        docs: &'d [DocumentPair],
        opts: TrainOptions,
    ) -> Result<Self> {
        net.validate_params(&params)?;
        let optimizer = Sm3::new(
            &params,
            Sm3Options {
                momentum: opts.momentum,
                ..Sm3Options::default()
            },
        );
        Self::assemble(net, params, optimizer, docs, opts, 0)
    }

    /// Rebuilds a trainer from checkpointed state. The data pipeline is not
    /// checkpointed; it is deterministic in the seed, so this replays the
    /// first `step` batch draws and corruption samples to put the stream and
    /// generator exactly where the interrupted run left them.
    pub fn resume(
        net: Network,
        params: Parameters<S>,
        slots: Vec<SecondMoment<S>>,
        momenta: Vec<Vec<S>>,
        step: u64,
        docs: &'d [DocumentPair],
        opts: TrainOptions,
    ) -> Result<Self> {
        net.validate_params(&params)?;
        let optimizer = Sm3::from_state(
            &params,
            slots,
            momenta,
            Sm3Options {
                momentum: opts.momentum,
                ..Sm3Options::default()
            },
        )?;
        let mut trainer = Self::assemble(net, params, optimizer, docs, opts, 0)?;
        for _ in 0..step {
            let batch = trainer.stream.next_batch()?;
            for example in &batch {
                sample_intermediate_canvas(&example.target, &mut trainer.canvas_rng);
            }
        }
        trainer.step = step;
        Ok(trainer)
    }

    fn assemble(
        net: Network,
        params: Parameters<S>,
        optimizer: Sm3<S>,
        docs: &'d [DocumentPair],
        opts: TrainOptions,
        step: u64,
    ) -> Result<Self> {
        let stream = BatchStream::new(docs, opts.batch_size, opts.max_subdoc_len, opts.seed)?;
        let mut canvas_rng = ChaCha8Rng::seed_from_u64(opts.seed);
        canvas_rng.set_stream(STREAM_CANVAS);
        Ok(Trainer {
            net,
            params,
            optimizer,
            schedule: Schedule {
                base_lr: opts.base_lr,
                warmup_steps: opts.warmup_steps,
            },
            stream,
            canvas_rng,
            weighting: opts.weighting,
            step,
        })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &Parameters<S> {
        &self.params
    }

    pub fn optimizer(&self) -> &Sm3<S> {
        &self.optimizer
    }

    /// Number of optimizer updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epochs_completed(&self) -> u64 {
        self.stream.epochs_completed()
    }

    pub fn step_once(&mut self) -> Result<StepStats> {
        let batch = self.stream.next_batch()?;
        let vocab = self.net.config().vocab_size;
        let mut prepared = Vec::with_capacity(batch.len());
        for example in &batch {
            prepared.push(prepare_example(
                example,
                vocab,
                self.weighting,
                &mut self.canvas_rng,
            )?);
        }
        let mut grads = GradBuffer::zeros_like(&self.params);
        let loss = batch_loss_and_grads(&self.net, &self.params, &prepared, &mut grads)?;
        self.params.zero_grads();
        grads.store_into(&mut self.params);
        let lr = self.schedule.lr_at(self.step);
        self.optimizer.step(&mut self.params, lr)?;
        let stats = StepStats {
            step: self.step,
            lr,
            loss,
        };
        self.step += 1;
        Ok(stats)
    }
}
