//! Standard and peephole-LSTM cells, the bidirectional driver and the
//! per-frame classifier on summed hidden states.

use rand::{Rng, RngCore};

use crate::autodiff::Var;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::layers::{bound, dense, DenseLayer};
use crate::params::{Init, ModelParams, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `h_t = tanh(W_in v_t + W_rec h_{t-1} + b)`
#[derive(Clone, Debug, PartialEq)]
pub struct RnnStandardCell {
    /// `[n_h, n_v]`
    pub w_in: ParamId,
    /// `[n_h, n_h]`
    pub w_rec: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl RnnStandardCell {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        params: &mut ModelParams<F>,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let orth = Init::Orthogonal { gain: 1.0 };
        RnnStandardCell {
            w_in: params.add(format!("{name}.w_in"), &[hidden, inputs], orth, rng),
            w_rec: params.add(format!("{name}.w_rec"), &[hidden, hidden], orth, rng),
            b: params.add(format!("{name}.b"), &[hidden], Init::Zeros, rng),
            inputs,
            hidden,
        }
    }
}

/// LSTM with peephole connections. Gate blocks are stacked in the order
/// input, forget, candidate, output along the first axis of `w_in`, `w_rec`
/// and `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmPeepholeCell {
    /// `[4 n_h, n_v]`
    pub w_in: ParamId,
    /// `[4 n_h, n_h]`
    pub w_rec: ParamId,
    /// `[4 n_h]`
    pub b: ParamId,
    pub p_i: ParamId,
    pub p_f: ParamId,
    pub p_o: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl LstmPeepholeCell {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        params: &mut ModelParams<F>,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        // Each gate block gets its own orthogonal matrix.
        let n = hidden;
        let mut w_in = Vec::with_capacity(4 * n * inputs);
        let mut w_rec = Vec::with_capacity(4 * n * n);
        for _ in 0..4 {
            if params.is_skeleton() {
                w_in.resize(w_in.len() + n * inputs, F::zero());
                w_rec.resize(w_rec.len() + n * n, F::zero());
                continue;
            }
            w_in.extend(crate::params::orthogonal(n, inputs, 1.0, rng).into_iter().map(F::lit));
            w_rec.extend(crate::params::orthogonal(n, n, 1.0, rng).into_iter().map(F::lit));
        }
        let orth = Init::Orthogonal { gain: 1.0 };
        let w_in = params.push(format!("{name}.w_in"), Tensor::from_vec(&[4 * n, inputs], w_in).expect("shape"), orth);
        let w_rec = params.push(format!("{name}.w_rec"), Tensor::from_vec(&[4 * n, n], w_rec).expect("shape"), orth);
        LstmPeepholeCell {
            w_in,
            w_rec,
            b: params.add(format!("{name}.b"), &[4 * n], Init::Zeros, rng),
            p_i: params.add(format!("{name}.p_i"), &[n], Init::Zeros, rng),
            p_f: params.add(format!("{name}.p_f"), &[n], Init::Zeros, rng),
            p_o: params.add(format!("{name}.p_o"), &[n], Init::Zeros, rng),
            inputs,
            hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Standard(RnnStandardCell),
    Lstm(LstmPeepholeCell),
}

impl Cell {
    pub fn hidden(&self) -> usize {
        match self {
            Cell::Standard(c) => c.hidden,
            Cell::Lstm(c) => c.hidden,
        }
    }

    fn input_projection(&self) -> (ParamId, ParamId) {
        match self {
            Cell::Standard(c) => (c.w_in, c.b),
            Cell::Lstm(c) => (c.w_in, c.b),
        }
    }
}

/// Hidden (and for LSTMs, cell) states of both directions, one `[B, n_h]`
/// var per frame, in frame order.
#[derive(Clone, Debug, Default)]
pub struct BidirState {
    pub h_f: Vec<Var>,
    pub h_b: Vec<Var>,
    pub c_f: Vec<Var>,
    pub c_b: Vec<Var>,
}

/// Shared per-frame softmax layer on `h_f + h_b`.
pub type ClassifierHead = DenseLayer;

fn shape_check<F: Scalar>(g: &Graph<F>, v: Var, want: &[usize], op: &'static str) -> Result<()> {
    if g.shape(v) != want {
        return Err(Error::shape(op, g.shape(v), want));
    }
    Ok(())
}

/// One standard-cell step on `[B, n_v]` input and `[B, n_h]` state.
pub fn standard_step<F: Scalar>(
    g: &mut Graph<F>,
    vars: &[Var],
    cell: &RnnStandardCell,
    v_t: Var,
    h_prev: Var,
) -> Result<Var> {
    let b = g.shape(v_t).first().copied().unwrap_or(0);
    shape_check(g, v_t, &[b, cell.inputs], "standard_step")?;
    shape_check(g, h_prev, &[b, cell.hidden], "standard_step")?;
    let u = g.linear(v_t, bound(vars, cell.w_in), Some(bound(vars, cell.b)))?;
    standard_from_projection(g, vars, cell, u, h_prev)
}

fn standard_from_projection<F: Scalar>(
    g: &mut Graph<F>,
    vars: &[Var],
    cell: &RnnStandardCell,
    u: Var,
    h_prev: Var,
) -> Result<Var> {
    let r = g.linear(h_prev, bound(vars, cell.w_rec), None)?;
    let a = g.add(u, r)?;
    Ok(g.tanh(a))
}

/// One peephole-LSTM step; returns `(h_t, c_t)`.
pub fn lstm_step<F: Scalar>(
    g: &mut Graph<F>,
    vars: &[Var],
    cell: &LstmPeepholeCell,
    v_t: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let b = g.shape(v_t).first().copied().unwrap_or(0);
    shape_check(g, v_t, &[b, cell.inputs], "lstm_step")?;
    shape_check(g, h_prev, &[b, cell.hidden], "lstm_step")?;
    shape_check(g, c_prev, &[b, cell.hidden], "lstm_step")?;
    let u = g.linear(v_t, bound(vars, cell.w_in), Some(bound(vars, cell.b)))?;
    lstm_from_projection(g, vars, cell, u, h_prev, c_prev)
}

fn lstm_from_projection<F: Scalar>(
    g: &mut Graph<F>,
    vars: &[Var],
    cell: &LstmPeepholeCell,
    u: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let n = cell.hidden;
    let r = g.linear(h_prev, bound(vars, cell.w_rec), None)?;
    let pre = g.add(u, r)?;

    let gate = |g: &mut Graph<F>, k: usize, peep: Option<(Var, ParamId)>| -> Result<Var> {
        let mut a = g.slice_last(pre, k * n, n)?;
        if let Some((c, p)) = peep {
            let pc = g.channel_mul(c, bound(vars, p), 1)?;
            a = g.add(a, pc)?;
        }
        Ok(a)
    };
    let i = gate(g, 0, Some((c_prev, cell.p_i)))?;
    let i = g.sigmoid(i);
    let f = gate(g, 1, Some((c_prev, cell.p_f)))?;
    let f = g.sigmoid(f);
    let cand = gate(g, 2, None)?;
    let cand = g.tanh(cand);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let o = gate(g, 3, Some((c, cell.p_o)))?;
    let o = g.sigmoid(o);
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

fn run_direction<F: Scalar>(
    g: &mut Graph<F>,
    vars: &[Var],
    cell: &Cell,
    proj: &[Var],
    batch: usize,
    reverse: bool,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let n = cell.hidden();
    let frames = proj.len();
    let zero = g.constant(Tensor::zeros(&[batch, n]));
    let (mut h, mut c) = (zero, zero);
    let mut hs = vec![zero; frames];
    let mut cs = Vec::new();
    let order: Vec<usize> = if reverse { (0..frames).rev().collect() } else { (0..frames).collect() };
    if matches!(cell, Cell::Lstm(_)) {
        cs = vec![zero; frames];
    }
    for t in order {
        match cell {
            Cell::Standard(sc) => h = standard_from_projection(g, vars, sc, proj[t], h)?,
            Cell::Lstm(lc) => {
                (h, c) = lstm_from_projection(g, vars, lc, proj[t], h, c)?;
                cs[t] = c;
            }
        }
        hs[t] = h;
    }
    Ok((hs, cs))
}

/// Runs `fwd` over `v` (`[B, T, n_v]`) from the first frame to the last and
/// `bwd` from the last to the first, both from zero states.
pub fn bidirectional_run<F: Scalar>(g: &mut Graph<F>, vars: &[Var], v: Var, fwd: &Cell, bwd: &Cell) -> Result<BidirState> {
    let s = g.shape(v).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("bidirectional_run", &s, &[]));
    }
    if s[1] == 0 {
        return Err(Error::usage("bidirectional_run over an empty sequence"));
    }
    if fwd.hidden() != bwd.hidden() {
        return Err(Error::usage("forward and backward cells differ in width"));
    }
    let (batch, frames) = (s[0], s[1]);
    let mut dirs = Vec::with_capacity(2);
    for (cell, reverse) in [(fwd, false), (bwd, true)] {
        // Input projections for all frames in one product.
        let (w, b) = cell.input_projection();
        let u = g.linear(v, bound(vars, w), Some(bound(vars, b)))?;
        let proj = (0..frames).map(|t| g.select_time(u, t)).collect::<Result<Vec<_>>>()?;
        dirs.push(run_direction(g, vars, cell, &proj, batch, reverse)?);
    }
    let (h_b, c_b) = dirs.pop().expect("two directions");
    let (h_f, c_f) = dirs.pop().expect("two directions");
    Ok(BidirState { h_f, h_b, c_f, c_b })
}

/// Per-frame class distributions `[B, T, K]` from `softmax(W_y (h_f + h_b) + b_y)`.
pub fn classify_frames<F: Scalar>(
    g: &mut Graph<F>,
    vars: &[Var],
    state: &BidirState,
    head: &ClassifierHead,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    if state.h_f.len() != state.h_b.len() || state.h_f.is_empty() {
        return Err(Error::usage("incomplete bidirectional state"));
    }
    let sums = state
        .h_f
        .iter()
        .zip(&state.h_b)
        .map(|(&a, &b)| g.add(a, b))
        .collect::<Result<Vec<_>>>()?;
    let h = g.stack_time(&sums)?;
    let logits = dense(g, vars, h, head, rng)?;
    g.softmax(logits)
}
