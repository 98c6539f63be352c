//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many components per input (sampled without
    /// replacement, seeded); `None` checks all of them.
    pub max_components: Option<usize>,
    pub seed: u64,
    /// Negative-control hook, see [`Graph::inject_backward_fault`].
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_components: None,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    pub checked: usize,
    /// Components skipped because a +-step probe crossed a kink of a
    /// piecewise op (ReLU sign, pooling argmax).
    pub skipped_at_kinks: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Evaluates `f` and reduces a non-scalar output to a scalar through a
/// fixed pseudo-random projection, so every output component matters.
fn scalar_objective<Func>(f: &Func, inputs: &[Tensor<f64>], fault: bool) -> Result<(Graph<f64>, Var)>
where
    Func: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    if fault {
        g.inject_backward_fault();
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let n = g.value(out).len();
    if n == 1 {
        let shape = g.shape(out).to_vec();
        if shape.is_empty() {
            return Ok((g, out));
        }
        let s = g.sum(out);
        return Ok((g, s));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wt = g.constant(Tensor::from_vec(g.shape(out), w)?);
    let p = g.mul(out, wt)?;
    let s = g.sum(p);
    Ok((g, s))
}

/// Compares the analytic gradient of `f` with respect to every input
/// against central finite differences.
pub fn grad_check_multi<Func>(
    f: Func,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    Func: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, loss) = scalar_objective(&f, inputs, opts.inject_fault)?;
    let base_kinks = g.kink_fingerprint();
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = (0..inputs.len())
        .map(|i| grads.get(Var(i)).cloned().expect("inputs are grad leaves"))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let idx: Vec<usize> = match opts.max_components {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for k in idx {
            let orig = input.data()[k];
            probe[i].data_mut()[k] = orig + opts.step;
            let (gp, lp) = scalar_objective(&f, &probe, false)?;
            probe[i].data_mut()[k] = orig - opts.step;
            let (gm, lm) = scalar_objective(&f, &probe, false)?;
            probe[i].data_mut()[k] = orig;
            if gp.kink_fingerprint() != base_kinks || gm.kink_fingerprint() != base_kinks {
                report.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * opts.step);
            let err = rel_error(analytic[i].data()[k], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Single-input form: max relative error of `f` at `x`.
pub fn grad_check<Func>(f: Func, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    Func: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    let r = grad_check_multi(|g, v| f(g, v[0]), std::slice::from_ref(x), &opts)?;
    Ok(r.max_rel_error)
}
