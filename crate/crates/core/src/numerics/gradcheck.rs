//! Finite-difference verification of analytic gradients.
//!
//! The checker perturbs each parameter coordinate by `±step`, recomputes the
//! loss, and compares the central difference against the gradient the tape
//! produced.  It always runs in `f64`: the verification exists to validate
//! backward rules, and the comparison tolerance only means something at full
//! precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::params::Parameters;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Half-width of the central difference.
    pub step: f64,
    /// Maximum accepted relative error per coordinate.
    pub tol: f64,
    /// Relative error denominators are clamped below by this, so tiny
    /// gradients are compared absolutely.
    pub denom_floor: f64,
    /// Coordinates beyond this count are subsampled.
    pub max_coordinates: usize,
    /// Seed for the subsampling draw.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tol: 1e-5,
            denom_floor: 1e-3,
            max_coordinates: 10_000,
            seed: 0,
        }
    }
}

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coordinates_checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordinateCheck>,
    pub failures: Vec<CoordinateCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "checked {} coordinates, max relative error {:.3e} (tolerance {:.1e})",
            self.coordinates_checked, self.max_rel_err, self.tol
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                ", worst at {}[{}]: analytic {:.6e} vs numeric {:.6e}",
                w.param, w.index, w.analytic, w.numeric
            )?;
        }
        if !self.failures.is_empty() {
            write!(f, ", {} coordinates over tolerance", self.failures.len())?;
        }
        Ok(())
    }
}

/// Compares analytic gradients of `loss_with_grads` against central
/// differences of `loss` for every (or a sampled subset of) parameter
/// coordinate.
///
/// `loss` must be a pure function of the parameters; any internal sampling
/// has to be frozen across calls, or the finite differences measure noise
/// instead of slope.
pub fn grad_check<F, G>(
    params: &mut Parameters<f64>,
    mut loss: F,
    mut loss_with_grads: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&Parameters<f64>) -> Result<f64>,
    G: FnMut(&mut Parameters<f64>) -> Result<f64>,
{
    params.zero_grads();
    loss_with_grads(params)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, t)| t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (p, (_, t)) in params.iter().enumerate() {
        for i in 0..t.len() {
            coords.push((p, i));
        }
    }
    if coords.len() > opts.max_coordinates {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let picked = sample(&mut rng, coords.len(), opts.max_coordinates);
        let mut subset: Vec<(usize, usize)> = picked.iter().map(|i| coords[i]).collect();
        subset.sort_unstable();
        coords = subset;
    }

    let mut report = GradCheckReport {
        coordinates_checked: coords.len(),
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
        tol: opts.tol,
    };

    for (p, i) in coords {
        let id = super::params::ParamId(p);
        let original = params.get(id).data()[i];

        params.get_mut(id).data_mut()[i] = original + opts.step;
        let plus = loss(params)?;
        params.get_mut(id).data_mut()[i] = original - opts.step;
        let minus = loss(params)?;
        params.get_mut(id).data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[p][i];
        let denom = a.abs().max(numeric.abs()).max(opts.denom_floor);
        let rel_err = (a - numeric).abs() / denom;

        let check = CoordinateCheck {
            param: params.name(id).to_string(),
            index: i,
            analytic: a,
            numeric,
            rel_err,
        };
        if rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst = Some(check.clone());
        }
        if rel_err > opts.tol {
            report.failures.push(check);
        }
    }

    Ok(report)
}
