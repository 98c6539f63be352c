//! Layer objects: spatial and temporal convolutions, dense layers, pooling
//! and dropout.
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`ModelParams`] and
//! are bound to a graph once per step. Every forward function takes the
//! bound vars (`vars[id]`) next to the layer.

use rand::{Rng, RngCore};

use crate::autodiff::{Graph, Padding, PoolMode, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ModelParams, ParamId};
use crate::scalar::Scalar;

/// Negative slope of the leaky ReLU used after every convolution and dense layer.
pub const LEAKY_ALPHA: f64 = 0.3;
/// Dropout probability on the inputs of fully connected layers.
pub const DENSE_DROPOUT: f64 = 0.5;
/// Spatial kernel size of every convolution.
pub const SPATIAL_KERNEL: usize = 3;
/// Temporal kernel length when an architecture string does not give one.
pub const DEFAULT_TEMPORAL_KERNEL: usize = 3;

/// Shortens the trait-object lifetime so an optional rng can be lent out
/// repeatedly.
pub(crate) fn reborrow<'s>(rng: &'s mut Option<&mut dyn RngCore>) -> Option<&'s mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

pub(crate) fn bound(vars: &[Var], id: ParamId) -> Var {
    vars[id.0]
}

/// 3x3 spatial convolution applied frame by frame. Inside a factorized
/// block it is a pure linear map (`bias == None`, `activation == None`).
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialConvLayer {
    pub kernels: ParamId,
    pub bias: Option<ParamId>,
    pub activation: Option<f64>,
    pub c_in: usize,
    pub c_out: usize,
}

impl SpatialConvLayer {
    /// Conv + bias + leaky ReLU when `linear` is false, bare kernels otherwise.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        params: &mut ModelParams<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        linear: bool,
        rng: &mut R,
    ) -> Self {
        let k = SPATIAL_KERNEL;
        let kernels = params.add(format!("{name}.w"), &[c_out, c_in, k, k], Init::Orthogonal { gain: 1.0 }, rng);
        let bias = (!linear).then(|| params.add(format!("{name}.b"), &[c_out], Init::Zeros, rng));
        SpatialConvLayer {
            kernels,
            bias,
            activation: (!linear).then_some(LEAKY_ALPHA),
            c_in,
            c_out,
        }
    }
}

/// Same-padded 1-D convolution along time with bias and leaky ReLU,
/// applied independently at every spatial position.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalConvLayer {
    /// `[K_out, M, L]`
    pub kernels: ParamId,
    pub bias: ParamId,
    pub activation: Option<f64>,
    pub m_in: usize,
    pub k_out: usize,
    pub length: usize,
}

impl TemporalConvLayer {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        params: &mut ModelParams<F>,
        name: &str,
        m_in: usize,
        k_out: usize,
        length: usize,
        rng: &mut R,
    ) -> Self {
        let kernels = params.add(format!("{name}.w"), &[k_out, m_in, length], Init::Orthogonal { gain: 1.0 }, rng);
        let bias = params.add(format!("{name}.b"), &[k_out], Init::Zeros, rng);
        TemporalConvLayer {
            kernels,
            bias,
            activation: Some(LEAKY_ALPHA),
            m_in,
            k_out,
            length,
        }
    }
}

/// Fully connected layer with dropout on its input.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[n_out, n_in]`
    pub weight: ParamId,
    pub bias: ParamId,
    pub dropout: f64,
    pub activation: Option<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

impl DenseLayer {
    /// Hidden layer (`activate`) or pre-softmax classifier layer.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        params: &mut ModelParams<F>,
        name: &str,
        n_in: usize,
        n_out: usize,
        activate: bool,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.w"), &[n_out, n_in], Init::Orthogonal { gain: 1.0 }, rng);
        let bias = params.add(format!("{name}.b"), &[n_out], Init::Zeros, rng);
        DenseLayer {
            weight,
            bias,
            dropout: DENSE_DROPOUT,
            activation: activate.then_some(LEAKY_ALPHA),
            n_in,
            n_out,
        }
    }
}

fn channel_check(g: &Graph<impl Scalar>, x: Var, axis: usize, want: usize, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() <= axis || s[axis] != want {
        return Err(Error::shape(op, s, &[want]));
    }
    Ok(())
}

/// Applies a spatial layer to `[..., C, H, W]` (typically `[B, T, C, H, W]`).
pub fn spatial_block<F: Scalar>(g: &mut Graph<F>, vars: &[Var], x: Var, layer: &SpatialConvLayer) -> Result<Var> {
    let r = g.shape(x).len();
    if r < 3 {
        return Err(Error::shape("spatial_block", g.shape(x), &[layer.c_in]));
    }
    channel_check(g, x, r - 3, layer.c_in, "spatial_block")?;
    let mut y = g.conv2d(x, bound(vars, layer.kernels), Padding::Same)?;
    if let Some(b) = layer.bias {
        y = g.bias_add(y, bound(vars, b), r - 3)?;
    }
    if let Some(a) = layer.activation {
        y = g.leaky_relu(y, F::lit(a));
    }
    Ok(y)
}

/// Applies a temporal layer to `[B, T, M, H, W]` or `[B, T, M]`; time is
/// preserved.
pub fn temporal_block<F: Scalar>(g: &mut Graph<F>, vars: &[Var], x: Var, layer: &TemporalConvLayer) -> Result<Var> {
    channel_check(g, x, 2, layer.m_in, "temporal_block")?;
    let y = g.temporal_conv(x, bound(vars, layer.kernels), Padding::Same)?;
    let y = g.bias_add(y, bound(vars, layer.bias), 2)?;
    Ok(match layer.activation {
        Some(a) => g.leaky_relu(y, F::lit(a)),
        None => y,
    })
}

/// Reduces `[B, T, F]` (or `[T, F]`) over time.
pub fn temporal_pool<F: Scalar>(g: &mut Graph<F>, x: Var, mode: PoolMode) -> Result<Var> {
    g.temporal_pool(x, mode)
}

/// Inverted dropout. Without an rng (inference) or with `p == 0` the input
/// is returned as is.
pub fn dropout<F: Scalar>(g: &mut Graph<F>, x: Var, p: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::usage(format!("dropout probability {p} outside [0, 1)")));
    }
    let rng = match rng {
        Some(r) if p > 0.0 => r,
        _ => return Ok(x),
    };
    let keep = F::lit(1.0 / (1.0 - p));
    let mask = (0..g.value(x).len())
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect();
    g.dropout_mask(x, mask)
}

/// Dense layer over the last axis: dropout, affine map, optional leaky ReLU.
pub fn dense<F: Scalar>(
    g: &mut Graph<F>,
    vars: &[Var],
    x: Var,
    layer: &DenseLayer,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let x = dropout(g, x, layer.dropout, rng)?;
    let y = g.linear(x, bound(vars, layer.weight), Some(bound(vars, layer.bias)))?;
    Ok(match layer.activation {
        Some(a) => g.leaky_relu(y, F::lit(a)),
        None => y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn spatial(c_in: usize, c_out: usize, seed: u64) -> (ModelParams<f64>, SpatialConvLayer) {
        let mut p = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = SpatialConvLayer::new(&mut p, "s", c_in, c_out, true, &mut rng);
        (p, l)
    }

    fn temporal(m: usize, k: usize, len: usize) -> (ModelParams<f64>, TemporalConvLayer) {
        let mut p = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = TemporalConvLayer::new(&mut p, "t", m, k, len, &mut rng);
        (p, l)
    }

    fn run_spatial(p: &ModelParams<f64>, l: &SpatialConvLayer, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let vars = p.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = spatial_block(&mut g, &vars, xv, l)?;
        Ok(g.value(y).clone())
    }

    fn run_temporal(p: &ModelParams<f64>, l: &TemporalConvLayer, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let vars = p.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = temporal_block(&mut g, &vars, xv, l).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn centre_tap_kernel_is_identity_over_frames() {
        let (mut p, l) = spatial(1, 1, 0);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        *p.tensor_mut(l.kernels) = k;
        let x = random(&[1, 3, 1, 4, 5], 1);
        assert_eq!(run_spatial(&p, &l, &x).unwrap(), x);
    }

    #[test]
    fn zero_spatial_kernels_give_zero() {
        let (mut p, l) = spatial(2, 3, 0);
        *p.tensor_mut(l.kernels) = Tensor::zeros(&[3, 2, 3, 3]);
        let y = run_spatial(&p, &l, &random(&[1, 2, 2, 4, 4], 2)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_block_matches_per_frame_conv2d() {
        let (p, l) = spatial(2, 3, 5);
        let x = random(&[1, 2, 2, 5, 5], 3);
        let y = run_spatial(&p, &l, &x).unwrap();
        let frame = 2 * 25;
        let out = 3 * 25;
        for t in 0..2 {
            let mut g = Graph::new();
            let xf = g.constant(Tensor::from_vec(&[2, 5, 5], x.data()[t * frame..(t + 1) * frame].to_vec()).unwrap());
            let k = g.constant(p.get(l.kernels).tensor.clone());
            let yf = g.conv2d(xf, k, Padding::Same).unwrap();
            assert_eq!(g.value(yf).data(), &y.data()[t * out..(t + 1) * out]);
        }
    }

    #[test]
    fn spatial_block_channel_mismatch() {
        let (p, l) = spatial(2, 3, 0);
        let err = run_spatial(&p, &l, &random(&[1, 2, 3, 4, 4], 1)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn spatial_block_has_no_temporal_leakage() {
        let (p, l) = spatial(1, 2, 7);
        let x = random(&[1, 4, 1, 5, 5], 4);
        let base = run_spatial(&p, &l, &x).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[2 * 25 + 12] += 1.0;
        let y = run_spatial(&p, &l, &x2).unwrap();
        let per = 2 * 25;
        for t in 0..4 {
            let same = base.data()[t * per..(t + 1) * per] == y.data()[t * per..(t + 1) * per];
            assert_eq!(same, t != 2, "frame {t}");
        }
    }

    #[test]
    fn unit_temporal_kernel_is_leaky_relu() {
        let (mut p, l) = temporal(1, 1, 1);
        *p.tensor_mut(l.kernels) = Tensor::full(&[1, 1, 1], 1.0);
        let x = random(&[1, 5, 1, 2, 2], 9);
        let y = run_temporal(&p, &l, &x);
        let want = x.map(|v| if v > 0.0 { v } else { 0.3 * v });
        assert_eq!(y, want);
    }

    #[test]
    fn zero_temporal_kernels_give_bias() {
        let (mut p, l) = temporal(2, 3, 3);
        *p.tensor_mut(l.kernels) = Tensor::zeros(&[3, 2, 3]);
        *p.tensor_mut(l.bias) = Tensor::full(&[3], 0.7);
        let y = run_temporal(&p, &l, &random(&[1, 6, 2, 2, 2], 1));
        assert_eq!(y.shape(), &[1, 6, 3, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn constant_series_closed_form() {
        let (mut p, l) = temporal(1, 1, 3);
        *p.tensor_mut(l.kernels) = Tensor::from_vec(&[1, 1, 3], vec![0.5, -1.25, 0.25]).unwrap();
        *p.tensor_mut(l.bias) = Tensor::full(&[1], 0.1);
        let c = 1.5;
        let y = run_temporal(&p, &l, &Tensor::full(&[1, 7, 1, 2, 2], c));
        // s = -0.5, pre = c s + b = -0.65, leaky -> -0.195
        let want = 0.3 * (c * -0.5 + 0.1);
        for t in 1..6 {
            for v in &y.data()[t * 4..(t + 1) * 4] {
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_receptive_field() {
        for len in [1usize, 3, 5] {
            let (p, l) = temporal(2, 2, len);
            let x = random(&[1, 9, 2, 2, 2], 11);
            let base = run_temporal(&p, &l, &x);
            let mut x2 = x.clone();
            let s = 4;
            for v in &mut x2.data_mut()[s * 8..(s + 1) * 8] {
                *v += 2.0;
            }
            let y = run_temporal(&p, &l, &x2);
            for t in 0..9 {
                let changed = base.data()[t * 8..(t + 1) * 8] != y.data()[t * 8..(t + 1) * 8];
                if t.abs_diff(s) > len / 2 {
                    assert!(!changed, "len {len}: frame {t} changed");
                }
            }
        }
    }

    #[test]
    fn temporal_block_channel_mismatch() {
        let (p, l) = temporal(2, 2, 3);
        let mut g = Graph::new();
        let vars = p.bind_frozen(&mut g);
        let x = g.constant(random(&[1, 4, 3, 2, 2], 0));
        assert!(temporal_block(&mut g, &vars, x, &l).is_err());
    }

    fn pool(x: &Tensor<f64>, mode: PoolMode) -> Tensor<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = temporal_pool(&mut g, v, mode).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn single_frame_pool_is_identity() {
        let x = random(&[1, 4], 1);
        for mode in [PoolMode::Mean, PoolMode::Max] {
            assert_eq!(pool(&x, mode).data(), x.data());
        }
    }

    #[test]
    fn mean_pool_example() {
        let x = Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(pool(&x, PoolMode::Mean).data(), &[2.0]);
    }

    #[test]
    fn empty_pool_is_usage_error() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(temporal_pool(&mut g, v, PoolMode::Mean), Err(Error::Usage(_))));
    }

    #[test]
    fn pooling_forgets_frame_order() {
        let x = random(&[6, 5], 21);
        let mut perm: Vec<usize> = (0..6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let data = perm.iter().flat_map(|&t| x.data()[t * 5..(t + 1) * 5].to_vec()).collect();
            let xp = Tensor::from_vec(&[6, 5], data).unwrap();
            assert_eq!(pool(&x, PoolMode::Max), pool(&xp, PoolMode::Max));
            let (a, b) = (pool(&x, PoolMode::Mean), pool(&xp, PoolMode::Mean));
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-15);
        }
    }

    #[test]
    fn mean_pool_permutation_exact_on_dyadic_values() {
        // Values with few mantissa bits make every summation order exact.
        let vals = [0.5, 1.25, -2.0, 3.75, 0.125, 8.0];
        let x = Tensor::from_vec(&[6, 1], vals.to_vec()).unwrap();
        let mut r = vals;
        r.reverse();
        let xr = Tensor::from_vec(&[6, 1], r.to_vec()).unwrap();
        assert_eq!(pool(&x, PoolMode::Mean), pool(&xr, PoolMode::Mean));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&[10], 1));
        assert_eq!(dropout(&mut g, x, DENSE_DROPOUT, None).unwrap(), x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(dropout(&mut g, x, 0.0, Some(&mut rng)).unwrap(), x);
        assert!(dropout(&mut g, x, 1.0, Some(&mut rng)).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let n = 100_000;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[n], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let y = dropout(&mut g, x, 0.5, Some(&mut rng)).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let mean = v.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn dense_dropout_constant() {
        assert_eq!(DENSE_DROPOUT, 0.5);
        let mut p = ModelParams::<f32>::new();
        let l = DenseLayer::new(&mut p, "d", 4, 3, true, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(l.dropout, 0.5);
        assert_eq!(l.activation, Some(0.3));
    }

    #[test]
    fn inference_is_bit_identical() {
        let mut p = ModelParams::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = SpatialConvLayer::new(&mut p, "c", 1, 2, false, &mut rng);
        let d = DenseLayer::new(&mut p, "d", 2 * 16, 3, true, &mut rng);
        let x = random(&[2, 1, 4, 4], 8).cast::<f32>();
        let run = || {
            let mut g = Graph::new();
            let vars = p.bind_frozen(&mut g);
            let xv = g.constant(x.clone());
            let y = spatial_block(&mut g, &vars, xv, &c).unwrap();
            let y = g.reshape(y, &[2, 32]).unwrap();
            let y = dense(&mut g, &vars, y, &d, None).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
