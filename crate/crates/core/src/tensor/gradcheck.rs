use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// When the function has ReLU-like kinks, inputs with `|x| <= kink_margin` are skipped.
    pub kink_margin: f64,
    /// Check a seeded random subset of this many input elements instead of all.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-4, tol: 1e-3, kink_margin: 1e-5, max_elements: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    /// Flat input index with the largest error.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Elements skipped because a perturbation touched a non-differentiable point.
    pub excluded: usize,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, input: &Tensor<f64>) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Autodiff(format!("grad_check needs a scalar function, got shape {:?}", tape.shape(y))));
    }
    Ok((tape.value(y)[0], tape.kink_signature()))
}

/// Compares reverse-mode gradients of the scalar function `f` at `input` against
/// central differences `(f(x+h) - f(x-h)) / 2h`.
///
/// Perturbations that move any ReLU/abs input across zero are excluded, as are
/// inputs lying within `kink_margin` of zero when `f` has kinks.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, opts: &GradCheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(&input.clone().with_requires_grad(true));
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Autodiff(format!("grad_check needs a scalar function, got shape {:?}", tape.shape(y))));
    }
    let analytic: Vec<f64> = if tape.op_name(y).is_some() {
        tape.backward(y)?;
        tape.grad(x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()])
    } else {
        vec![0.0; input.numel()]
    };
    let base_sig = tape.kink_signature();
    let kinked = tape.has_kinks();
    drop(tape);

    let mut indices: Vec<usize> = (0..input.numel()).collect();
    if let Some(limit) = opts.max_elements {
        if limit < indices.len() {
            indices.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
            indices.truncate(limit);
            indices.sort_unstable();
        }
    }

    let mut report = CheckReport { max_rel_error: 0.0, worst_index: None, checked: 0, excluded: 0, passed: true };
    let mut probe = input.clone();
    for &i in &indices {
        let x0 = input.data()[i];
        if kinked && x0.abs() <= opts.kink_margin {
            report.excluded += 1;
            continue;
        }
        probe.data_mut()[i] = x0 + opts.h;
        let (fp, sp) = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = x0 - opts.h;
        let (fm, sm) = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = x0;
        if kinked && (sp != base_sig || sm != base_sig) {
            report.excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * opts.h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}
