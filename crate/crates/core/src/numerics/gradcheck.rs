//! Central finite-difference verification of taped gradients.

use rand::seq::index::sample;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::stage_rng;

/// Coordinates probed per parameter when it has more scalars than this.
pub const DEFAULT_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Taped and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

fn eval<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    Ok(tape.value(out).item())
}

/// Max relative error between taped gradients of `f` and central
/// differences, using denominator `max(|g|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, params: &mut ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    Ok(finite_diff_check_with(f, params, eps, DEFAULT_SAMPLES, 0)?.max_rel_error)
}

pub fn finite_diff_check_with<F>(
    f: F,
    params: &mut ParamStore,
    eps: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Argument(format!("eps {eps} outside [1e-7, 1e-4]")));
    }
    if samples_per_param == 0 {
        return Err(Error::Argument("need at least one sample per parameter".into()));
    }
    let base = eval(&f, params)?;
    if eval(&f, params)?.to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "forward closure is not deterministic (disable dropout)".into(),
        ));
    }

    params.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    tape.backward(out, params)?;

    let mut rng = stage_rng(seed, "finite-diff");
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    for name in names {
        let n = params.value(&name)?.len();
        let coords: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let taped = params.grad(&name)?.data()[i];
            let orig = params.value(&name)?.data()[i];
            params.value_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = eval(&f, params)?;
            params.value_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = eval(&f, params)?;
            params.value_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (numeric - taped).abs() / taped.abs().max(1e-8);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.worst_values = (taped, numeric);
            }
        }
    }
    Ok(report)
}
