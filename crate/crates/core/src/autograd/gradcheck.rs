use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per input tensor
    /// (`None` checks every coordinate).
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_relative_error: f64,
    pub coords_checked: usize,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of the scalar `f` at `point` against
/// central finite differences, checking every coordinate.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    grad_check_with(f, point, &opts).map(|r| r.max_relative_error)
}

pub fn grad_check_with<F>(f: F, point: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::invalid("gradient check step must be positive"));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    let eval = |pt: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = pt.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = point.to_vec();
    let mut report = GradCheckReport::default();

    for (which, an) in analytic.iter().enumerate() {
        let n = point[which].len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[which].data()[c];
            work[which].data_mut()[c] = orig + opts.step;
            let plus = eval(&work)?;
            work[which].data_mut()[c] = orig - opts.step;
            let minus = eval(&work)?;
            work[which].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = an.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((which, c, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Gradient check over every tensor of `store` plus the explicit `inputs`.
///
/// Store tensors are bound under their names before `f` runs, so model code
/// reading parameters through [`Tape::param`] is perturbed transparently.
/// `f` receives only the vars of `inputs`.
pub fn grad_check_store<F>(
    f: F,
    store: &ParamStore,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().to_vec();
    let mut point: Vec<Tensor> = inputs.to_vec();
    point.extend(store.iter().map(|(_, t)| t.clone()));
    let k = inputs.len();
    grad_check_with(
        |tape, vars| {
            for (name, &v) in names.iter().zip(&vars[k..]) {
                tape.bind_param(name, v);
            }
            f(tape, &vars[..k])
        },
        &point,
        opts,
    )
}
