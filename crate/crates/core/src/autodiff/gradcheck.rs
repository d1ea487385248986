//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Coordinates checked per parameter tensor; smaller tensors are
    /// checked exhaustively.
    pub max_coords_per_param: usize,
    pub seed: u64,
    /// Lower bound on the error denominator. Gradients below it are in
    /// effect compared by absolute error, since central differences
    /// cannot resolve them relative to rounding in the loss.
    pub denominator_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            max_coords_per_param: 64,
            seed: 0,
            denominator_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

fn eval<F>(builder: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = builder(&mut tape, params)?;
    let value = tape.value(loss);
    if value.shape() != [1, 1, 1, 1] {
        return Err(Error::InvalidShape {
            op: "grad_check",
            reason: format!("builder returned non-scalar {:?}", value.shape()),
        });
    }
    Ok(value.data()[0])
}

pub fn grad_check<F>(builder: F, params: &ParamStore<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_with(builder, params, eps, &GradCheckOptions::default()).map(|r| r.max_rel_error)
}

/// Compares the tape gradient of `builder`'s scalar output against
/// `(f(θ+eps) - f(θ-eps)) / 2eps` per sampled coordinate and reports the
/// largest `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check_with<F>(
    builder: F,
    params: &ParamStore<f64>,
    eps: f64,
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut analytic = params.clone();
    analytic.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = builder(&mut tape, &analytic)?;
        tape.backward(loss, &mut analytic)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name)?.len();
        let coords: Vec<usize> = if len <= options.max_coords_per_param {
            (0..len).collect()
        } else {
            let mut picked = sample(&mut rng, len, options.max_coords_per_param).into_vec();
            picked.sort_unstable();
            picked
        };
        for i in coords {
            let original = probe.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = original + eps;
            let plus = eval(&builder, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = original - eps;
            let minus = eval(&builder, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.grad(&name)?.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.denominator_floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
