//! The finite-difference gradient suite run by `gesturenet gradcheck`.
//!
//! Every row checks one op, one recurrent cell unrolled over
//! [`BPTT_STEPS`] steps, or a whole small network, in `f64` with central
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archspec::{builtin, InputSig};
use crate::autodiff::gradcheck::{grad_check_multi, GradCheckOptions, GradCheckReport, DEFAULT_STEP};
use crate::autodiff::{Graph, Padding, PoolMode, Var};
use crate::error::Result;
use crate::layers::LEAKY_ALPHA;
use crate::model::{build_model, BuildOptions};
use crate::params::ModelParams;
use crate::recurrent::{bidirectional_run, classify_frames, Cell, ClassifierHead, LstmPeepholeCell, RnnStandardCell};
use crate::tensor::Tensor;

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const BPTT_STEPS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub report: GradCheckReport,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error <= GRAD_TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub step: f64,
    /// Corrupt every backward pass (negative control).
    pub inject_fault: bool,
    /// Components sampled per tensor of the whole-network row.
    pub network_components: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            step: DEFAULT_STEP,
            inject_fault: false,
            network_components: 24,
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Loss of per-frame probabilities `p` (`[.., K]`) against `y`.
fn frame_loss(g: &mut Graph<f64>, p: Var, y: &[usize]) -> Result<Var> {
    let k = *g.shape(p).last().expect("rank >= 1");
    let flat = g.reshape(p, &[y.len(), k])?;
    g.cross_entropy(flat, y)
}

fn bptt_row(lstm: bool, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n_v, n_h, k, batch) = (3, 4, 3, 2);
    let mut p = ModelParams::<f64>::new();
    let cell = |p: &mut ModelParams<f64>, name: &str, rng: &mut ChaCha8Rng| {
        if lstm {
            Cell::Lstm(LstmPeepholeCell::new(p, name, n_v, n_h, rng))
        } else {
            Cell::Standard(RnnStandardCell::new(p, name, n_v, n_h, rng))
        }
    };
    let fwd = cell(&mut p, "fwd", rng);
    let bwd = cell(&mut p, "bwd", rng);
    let head = ClassifierHead::new(&mut p, "head", n_h, k, false, rng);
    // Random rather than initial values so biases and peepholes are non-zero.
    let mut inputs: Vec<Tensor<f64>> = p.iter().map(|q| random(q.tensor.shape(), rng).map(|v| 0.5 * v)).collect();
    inputs.push(random(&[batch, BPTT_STEPS, n_v], rng));
    let y = labels(batch * BPTT_STEPS, k, rng);
    let np = p.len();
    grad_check_multi(
        |g, vs| {
            let s = bidirectional_run(g, &vs[..np], vs[np], &fwd, &bwd)?;
            let out = classify_frames(g, &vs[..np], &s, &head, None)?;
            frame_loss(g, out, &y)
        },
        &inputs,
        opts,
    )
}

fn network_row(opts: &GradCheckOptions, seed: u64, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let b = builtin("tconv_lstm_desk").expect("builtin exists");
    let input = InputSig {
        channels: 1,
        frames: 4,
        height: 8,
        width: 8,
    };
    let build = BuildOptions {
        seed,
        input: Some(input),
        ..Default::default()
    };
    let model = build_model::<f64>(&b.spec, 4, b.variant, &build)?;
    let mut inputs: Vec<Tensor<f64>> = model.params.iter().map(|q| q.tensor.clone()).collect();
    inputs.push(random(&[2, 4, 1, 8, 8], rng).map(|v| 0.5 * (v + 1.0)));
    let y = labels(2 * 4, 4, rng);
    let np = model.params.len();
    grad_check_multi(
        |g, vs| {
            let out = model.forward(g, &vs[..np], vs[np], None)?;
            frame_loss(g, out, &y)
        },
        &inputs,
        opts,
    )
}

/// Runs every row. Errors only on internal failures; a failing row is
/// reported through [`GradRow::passed`].
pub fn run_suite(o: &SuiteOptions) -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let opts = GradCheckOptions {
        step: o.step,
        max_components: None,
        seed: o.seed,
        inject_fault: o.inject_fault,
    };
    let mut rows = Vec::new();
    let mut push = |name: &str, r: Result<GradCheckReport>| -> Result<()> {
        rows.push(GradRow {
            name: name.to_string(),
            report: r?,
        });
        Ok(())
    };
    let r = &mut rng;

    let (x, k) = (random(&[2, 2, 5, 5], r), random(&[3, 2, 3, 3], r));
    push("conv2d", grad_check_multi(|g, v| g.conv2d(v[0], v[1], Padding::Same), &[x, k], &opts))?;
    let (x, k) = (random(&[2, 6, 3, 2, 2], r), random(&[4, 3, 3], r));
    push("conv1d_temporal", grad_check_multi(|g, v| g.temporal_conv(v[0], v[1], Padding::Same), &[x, k], &opts))?;
    let x = random(&[2, 3, 5, 5], r);
    push("max_pool2d", grad_check_multi(|g, v| g.max_pool2d(v[0]), &[x], &opts))?;
    let x = random(&[1, 5, 2, 5, 5], r);
    push("max_pool3d", grad_check_multi(|g, v| g.max_pool3d(v[0]), &[x], &opts))?;
    let (x, w, b) = (random(&[4, 5], r), random(&[3, 5], r), random(&[3], r));
    push("affine", grad_check_multi(|g, v| g.linear(v[0], v[1], Some(v[2])), &[x, w, b], &opts))?;
    let x = random(&[30], r);
    push("leaky_relu", grad_check_multi(|g, v| Ok(g.leaky_relu(v[0], LEAKY_ALPHA)), &[x], &opts))?;
    let x = random(&[12], r);
    push("sigmoid", grad_check_multi(|g, v| Ok(g.sigmoid(v[0])), std::slice::from_ref(&x), &opts))?;
    push("tanh", grad_check_multi(|g, v| Ok(g.tanh(v[0])), &[x], &opts))?;
    let x = random(&[6, 5], r).map(|v| 3.0 * v);
    let y = labels(6, 5, r);
    push(
        "softmax_cross_entropy",
        grad_check_multi(
            |g, v| {
                let p = g.softmax(v[0])?;
                g.cross_entropy(p, &y)
            },
            &[x],
            &opts,
        ),
    )?;
    let x = random(&[2, 5, 4], r);
    push("temporal_pool_mean", grad_check_multi(|g, v| g.temporal_pool(v[0], PoolMode::Mean), std::slice::from_ref(&x), &opts))?;
    push("temporal_pool_max", grad_check_multi(|g, v| g.temporal_pool(v[0], PoolMode::Max), &[x], &opts))?;
    push("rnn_std_bptt_8_steps", bptt_row(false, &opts, r))?;
    push("lstm_bptt_8_steps", bptt_row(true, &opts, r))?;
    let net = GradCheckOptions {
        max_components: Some(o.network_components),
        ..opts.clone()
    };
    push("tconv_lstm_desk_4x8x8", network_row(&net, o.seed, r))?;
    Ok(rows)
}

/// Fixed-width table, one row per check.
pub fn render_table(rows: &[GradRow]) -> String {
    let mut s = format!("{:<26} {:>12} {:>8} {:>8}  {}\n", "component", "max_rel_err", "checked", "kinks", "status");
    for r in rows {
        s.push_str(&format!(
            "{:<26} {:>12.3e} {:>8} {:>8}  {}\n",
            r.name,
            r.report.max_rel_error,
            r.report.checked,
            r.report.skipped_at_kinks,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
