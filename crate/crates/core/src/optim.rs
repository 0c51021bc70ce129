//! SM3 optimization with momentum and quadratic learning-rate warmup.
//!
//! SM3 keeps a *cover* of the Adagrad second-moment statistics instead of the
//! statistics themselves: a matrix parameter gets one accumulator per row and
//! one per column, and the per-coordinate moment is reconstructed as the
//! minimum of the two covers.  The reconstruction always dominates the true
//! running sum of squared gradients, so step sizes shrink at least as fast as
//! Adagrad's while the accumulator storage for an `r x c` matrix drops from
//! `r * c` to `r + c`.  Vectors and scalars keep dense accumulators.
//!
//! Momentum is plain heavy-ball accumulation over the moment-scaled
//! gradients.  Momentum memory is full-size; the savings claim is about the
//! second-moment state only.

use crate::error::{Error, Result};
use crate::numerics::{cast, Parameters, Scalar};

/// Learning rate as a function of the 0-based update index: the base rate
/// scaled by `min(1, (step / warmup)^2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.base_lr;
        }
        let ratio = (step as f64 / self.warmup_steps as f64).min(1.0);
        self.base_lr * ratio * ratio
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Sm3Options {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for Sm3Options {
    fn default() -> Self {
        Sm3Options {
            momentum: 0.9,
            eps: 1e-30,
        }
    }
}

/// Second-moment cover for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum SecondMoment<S: Scalar> {
    /// One accumulator per coordinate (vectors, scalars).
    Dense(Vec<S>),
    /// Row and column covers (rank-2 tensors).
    Factored { rows: Vec<S>, cols: Vec<S> },
}

impl<S: Scalar> SecondMoment<S> {
    fn for_shape(shape: &[usize]) -> Self {
        match shape {
            &[r, c] => SecondMoment::Factored {
                rows: vec![S::zero(); r],
                cols: vec![S::zero(); c],
            },
            _ => SecondMoment::Dense(vec![S::zero(); shape.iter().product()]),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SecondMoment::Dense(v) => v.len(),
            SecondMoment::Factored { rows, cols } => rows.len() + cols.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Sm3<S: Scalar> {
    slots: Vec<SecondMoment<S>>,
    momenta: Vec<Vec<S>>,
    opts: Sm3Options,
}

impl<S: Scalar> Sm3<S> {
    pub fn new(params: &Parameters<S>, opts: Sm3Options) -> Self {
        Sm3 {
            slots: params.iter().map(|(_, t)| SecondMoment::for_shape(t.shape())).collect(),
            momenta: params.iter().map(|(_, t)| vec![S::zero(); t.len()]).collect(),
            opts,
        }
    }

    /// Rebuilds optimizer state saved by a checkpoint.
    pub fn from_state(
        params: &Parameters<S>,
        slots: Vec<SecondMoment<S>>,
        momenta: Vec<Vec<S>>,
        opts: Sm3Options,
    ) -> Result<Self> {
        if slots.len() != params.len() || momenta.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state covers {} tensors, model has {}",
                slots.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            let want = SecondMoment::<S>::for_shape(t.shape()).len();
            if slots[i].len() != want || momenta[i].len() != t.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for {name} does not match its shape"
                )));
            }
        }
        Ok(Sm3 {
            slots,
            momenta,
            opts,
        })
    }

    pub fn options(&self) -> Sm3Options {
        self.opts
    }

    pub fn slots(&self) -> &[SecondMoment<S>] {
        &self.slots
    }

    pub fn momenta(&self) -> &[Vec<S>] {
        &self.momenta
    }

    /// Total second-moment accumulator coordinates.
    pub fn accumulator_len(&self) -> usize {
        self.slots.iter().map(|s| s.len()).sum()
    }

    /// Total momentum coordinates.
    pub fn momentum_len(&self) -> usize {
        self.momenta.iter().map(|m| m.len()).sum()
    }

    /// Applies one update from the gradients stored in `params`.
    ///
    /// Parameters whose gradient buffer was never touched are left alone.
    pub fn step(&mut self, params: &mut Parameters<S>, lr: f64) -> Result<()> {
        params.ensure_grads_finite()?;
        let lr = cast::<S>(lr);
        let beta = cast::<S>(self.opts.momentum);
        let eps = cast::<S>(self.opts.eps);

        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            let rc = match &self.slots[i] {
                SecondMoment::Factored { .. } => Some(tensor.dims2()?),
                SecondMoment::Dense(_) => None,
            };
            let (w, grad) = tensor.data_and_grad_mut();
            let Some(grad) = grad else {
                continue;
            };
            let momentum = &mut self.momenta[i];
            match &mut self.slots[i] {
                SecondMoment::Dense(nu) => {
                    for j in 0..grad.len() {
                        let g = grad[j];
                        nu[j] = nu[j] + g * g;
                        let scaled = g / (nu[j] + eps).sqrt();
                        momentum[j] = beta * momentum[j] + scaled;
                        w[j] = w[j] - lr * momentum[j];
                    }
                }
                SecondMoment::Factored { rows, cols } => {
                    let (r, c) = rc.unwrap();
                    let mut new_cols = vec![S::zero(); c];
                    for row in 0..r {
                        let row_cover = rows[row];
                        let mut new_row = S::zero();
                        for col in 0..c {
                            let idx = row * c + col;
                            let g = grad[idx];
                            let nu = row_cover.min(cols[col]) + g * g;
                            let scaled = g / (nu + eps).sqrt();
                            momentum[idx] = beta * momentum[idx] + scaled;
                            w[idx] = w[idx] - lr * momentum[idx];
                            new_row = new_row.max(nu);
                            new_cols[col] = new_cols[col].max(nu);
                        }
                        rows[row] = rows[row].max(new_row);
                    }
                    for col in 0..c {
                        cols[col] = cols[col].max(new_cols[col]);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn warmup_schedule_values() {
        let s = Schedule {
            base_lr: 0.1,
            warmup_steps: 10_000,
        };
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(5_000) - 0.025).abs() < 1e-15);
        assert!((s.lr_at(10_000) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(250_000) - 0.1).abs() < 1e-15);
        for step in 1..100 {
            assert!(s.lr_at(step) > s.lr_at(step - 1), "warmup rises monotonically");
        }
        let flat = Schedule {
            base_lr: 0.5,
            warmup_steps: 0,
        };
        assert_eq!(flat.lr_at(0), 0.5);
    }

    fn vector_params(values: Vec<f64>) -> Parameters<f64> {
        let mut p = Parameters::new();
        p.push("w", Tensor::vector(values));
        p
    }

    fn set_grad(params: &mut Parameters<f64>, name: &str, g: &[f64]) {
        let id = params.index_of(name).unwrap();
        params.get_mut(id).grad_mut().copy_from_slice(g);
    }

    #[test]
    fn single_step_by_hand() {
        // g = 2: nu = 4, scaled = 2 / sqrt(4) = 1, m = 1, w -= lr * 1.
        let mut params = vector_params(vec![1.0]);
        let mut opt = Sm3::new(&params, Sm3Options::default());
        set_grad(&mut params, "w", &[2.0]);
        opt.step(&mut params, 0.1).unwrap();
        let id = params.index_of("w").unwrap();
        assert!((params.get(id).data()[0] - 0.9).abs() < 1e-12);
        assert!((opt.momenta()[0][0] - 1.0).abs() < 1e-12);

        // Second identical gradient: nu = 8, scaled = 2 / sqrt(8),
        // m = 0.9 + 0.707..., w -= lr * m.
        set_grad(&mut params, "w", &[2.0]);
        opt.step(&mut params, 0.1).unwrap();
        let m = 0.9 + 2.0 / 8.0f64.sqrt();
        assert!((opt.momenta()[0][0] - m).abs() < 1e-12);
        assert!((params.get(id).data()[0] - (0.9 - 0.1 * m)).abs() < 1e-12);
    }

    #[test]
    fn dense_slots_match_adagrad() {
        // Without momentum, the dense path is exactly Adagrad.
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut params = vector_params(init.clone());
        let mut opt = Sm3::new(
            &params,
            Sm3Options {
                momentum: 0.0,
                eps: 1e-30,
            },
        );

        let mut reference = init;
        let mut acc = vec![0.0f64; n];
        let lr = 0.05;
        for _ in 0..100 {
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            set_grad(&mut params, "w", &g);
            opt.step(&mut params, lr).unwrap();
            for j in 0..n {
                acc[j] += g[j] * g[j];
                reference[j] -= lr * g[j] / (acc[j] + 1e-30).sqrt();
            }
        }
        let id = params.index_of("w").unwrap();
        for (got, want) in params.get(id).data().iter().zip(&reference) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn factored_cover_dominates_true_second_moment() {
        let (r, c) = (5, 7);
        let mut params = Parameters::new();
        params.push("m", Tensor::zeros(vec![r, c]));
        let mut opt = Sm3::new(&params, Sm3Options::default());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut true_acc = vec![0.0f64; r * c];
        let mut prev_rows = vec![0.0f64; r];
        let mut prev_cols = vec![0.0f64; c];
        for _ in 0..50 {
            let g: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            set_grad(&mut params, "m", &g);
            opt.step(&mut params, 0.01).unwrap();
            for j in 0..r * c {
                true_acc[j] += g[j] * g[j];
            }
            let SecondMoment::Factored { rows, cols } = &opt.slots()[0] else {
                panic!("matrix parameters use factored slots");
            };
            for i in 0..r {
                assert!(rows[i] >= prev_rows[i], "row covers never shrink");
                for j in 0..c {
                    assert!(
                        rows[i].min(cols[j]) >= true_acc[i * c + j] - 1e-9,
                        "cover dominates the exact accumulator"
                    );
                }
            }
            for j in 0..c {
                assert!(cols[j] >= prev_cols[j], "column covers never shrink");
            }
            prev_rows.copy_from_slice(rows);
            prev_cols.copy_from_slice(cols);
        }
    }

    #[test]
    fn factored_slots_shrink_memory() {
        let mut params = Parameters::<f64>::new();
        params.push("m", Tensor::zeros(vec![32, 48]));
        let opt = Sm3::new(&params, Sm3Options::default());
        assert_eq!(opt.accumulator_len(), 80);
        assert_eq!(opt.momentum_len(), 32 * 48);
    }

    #[test]
    fn untouched_parameters_stay_put() {
        let mut params = Parameters::new();
        params.push("used", Tensor::vector(vec![1.0, 1.0]));
        params.push("unused", Tensor::vector(vec![5.0, 5.0]));
        let mut opt = Sm3::new(&params, Sm3Options::default());
        set_grad(&mut params, "used", &[1.0, -1.0]);
        opt.step(&mut params, 0.1).unwrap();
        let unused = params.index_of("unused").unwrap();
        assert_eq!(params.get(unused).data(), &[5.0, 5.0]);
        let used = params.index_of("used").unwrap();
        assert!(params.get(used).data()[0] < 1.0);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut params = vector_params(vec![1.0]);
        let mut opt = Sm3::new(&params, Sm3Options::default());
        set_grad(&mut params, "w", &[f64::NAN]);
        let err = opt.step(&mut params, 0.1).unwrap_err();
        assert!(err.to_string().contains('w'), "error names the parameter: {err}");
    }

    #[test]
    fn state_roundtrip_validation() {
        let mut params = Parameters::new();
        params.push("m", Tensor::zeros(vec![3, 4]));
        let opt = Sm3::new(&params, Sm3Options::default());
        let rebuilt = Sm3::from_state(
            &params,
            opt.slots().to_vec(),
            opt.momenta().to_vec(),
            opt.options(),
        );
        assert!(rebuilt.is_ok());
        let wrong = Sm3::<f64>::from_state(&params, vec![], vec![], Sm3Options::default());
        assert!(wrong.is_err());
    }
}
