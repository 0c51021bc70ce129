use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Parser;
use docins_core::data::{sentence_examples, Split, SyntheticTask};
use docins_core::model::{example_loss, prepare_example, Network, PreparedExample};
use docins_core::numerics::{grad_check, GradCheckOptions, Parameters};
use docins_core::train::STREAM_CANVAS;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

/// Compare the analytic gradients of the training loss against central
/// finite differences on a freshly initialized model (always in f64).
/// `--inject-bug` plants a scaling fault in one backward rule and expects
/// the check to catch it, exiting nonzero if the fault goes unnoticed.
#[derive(Parser, Debug)]
pub struct Args {
    /// Run configuration file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random subset of parameter coordinates to probe.
    #[arg(long, default_value_t = 500)]
    coords: usize,
    /// Init seed for the probed model.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative error tolerance.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Scale one backward rule by 1.5 and require the check to fail.
    #[arg(long)]
    inject_bug: bool,
}

pub fn run(args: &Args) -> Result<()> {
    let config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    let task = SyntheticTask::new(config.task_config())?;
    let docs = task.generate_split(Split::Train, 1, 0);
    let examples = sentence_examples(&docs)?;
    let example = examples
        .first()
        .ok_or_else(|| anyhow::anyhow!("the generated document has no sentences"))?;

    let vocab_size = config.content_vocab + 3;
    let net = Network::new(config.model_config(vocab_size))?;
    let mut params: Parameters<f64> = net.init_params(args.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    rng.set_stream(STREAM_CANVAS);
    let prepared: PreparedExample<f64> =
        prepare_example(example, vocab_size, config.weighting(), &mut rng)?;

    let inject = args.inject_bug;
    let opts = GradCheckOptions {
        max_coordinates: args.coords,
        tol: args.tol,
        seed: args.seed,
        ..GradCheckOptions::default()
    };
    let report = grad_check(
        &mut params,
        |p| {
            let (fwd, loss) = example_loss(&net, p, &prepared)?;
            Ok(fwd.tape.value(loss).item())
        },
        |p| {
            let (mut fwd, loss) = example_loss(&net, p, &prepared)?;
            if inject {
                fwd.tape.inject_backward_fault(1.5);
            }
            let value = fwd.tape.value(loss).item();
            fwd.tape.backward(loss, 1.0)?;
            p.accumulate_from(&fwd.tape);
            Ok(value)
        },
        &opts,
    )?;
    println!("{report}");

    if inject {
        if report.passed() {
            bail!("a planted backward fault went unnoticed; the check is too loose");
        }
        println!("planted fault detected as expected");
    } else if !report.passed() {
        bail!("analytic and numeric gradients disagree");
    } else {
        println!("gradient check passed");
    }
    Ok(())
}
