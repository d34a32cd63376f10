//! Finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a − n| / max(|a|, |n|, 1e−8)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h evaluations crossed a ReLU or max-pool branch.
    pub skipped: usize,
}

/// Which coordinates of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// Up to this many per input tensor, drawn without replacement.
    Sample { per_input: usize, seed: u64 },
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item(), tape.branch_signature()))
}

/// Compares the backward pass of the scalar function `f` against central
/// differences (steps `h` and `h/2`, extrapolated) at every selected
/// coordinate of every input.
pub fn grad_check_with<F>(f: F, inputs: &[Tensor], h: f64, coords: Coordinates) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Shape("grad_check needs a scalar function".into()));
    }
    let base_sig = tape.branch_signature();
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut rng = match coords {
        Coordinates::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coordinates::All => None,
    };
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match (&coords, rng.as_mut()) {
            (Coordinates::Sample { per_input, .. }, Some(r)) if *per_input < n => {
                let mut v = sample(r, n, *per_input).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in picks {
            let x0 = input.data()[i];
            let mut f_at = |x: f64| -> Result<(f64, u64)> {
                probe[k].data_mut()[i] = x;
                let r = evaluate(&f, &probe);
                probe[k].data_mut()[i] = x0;
                r
            };
            let (fp, sp) = f_at(x0 + h)?;
            let (fm, sm) = f_at(x0 - h)?;
            let (fp2, sp2) = f_at(x0 + h / 2.0)?;
            let (fm2, sm2) = f_at(x0 - h / 2.0)?;
            if [sp, sm, sp2, sm2].iter().any(|&s| s != base_sig) {
                report.skipped += 1;
                continue;
            }
            // Richardson extrapolation of two central differences: fourth
            // order, so `h` can stay large enough to keep rounding small.
            let wide = (fp - fm) / (2.0 * h);
            let narrow = (fp2 - fm2) / h;
            let num = (4.0 * narrow - wide) / 3.0;
            let a = analytic[k].data()[i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks every coordinate of every input.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, h, Coordinates::All)
}

/// Single-input form; returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let r = grad_check_inputs(|t, v| f(t, v[0]), std::slice::from_ref(x), h)?;
    Ok(r.max_rel_error)
}
