//! Executable models assembled from an [`ArchSpec`].

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archspec::{ArchSpec, ArchTerm, InputSig, Variant};
use crate::autodiff::{Graph, PoolMode, Var};
use crate::error::{Error, Result};
use crate::layers::{dense, reborrow, spatial_block, temporal_block, DenseLayer, SpatialConvLayer, TemporalConvLayer};
use crate::params::ModelParams;
use crate::recurrent::{bidirectional_run, classify_frames, Cell, LstmPeepholeCell, RnnStandardCell};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Spatial(SpatialConvLayer),
    Temporal(TemporalConvLayer),
    Pool2d,
    Pool3d,
    TPool(PoolMode),
    Dense(DenseLayer),
    Recurrent { fwd: Cell, bwd: Cell },
    Head(DenseLayer),
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub seed: u64,
    /// Overrides the input signature of the spec.
    pub input: Option<InputSig>,
    /// Also put bias and leaky ReLU on the spatial half of factorized blocks.
    pub activate_spatial: bool,
    /// Allocate zero parameters without running the initializers.
    pub skeleton: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            seed: 0,
            input: None,
            activate_spatial: false,
            skeleton: false,
        }
    }
}

/// A built network: layer plan plus its parameters.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub spec: ArchSpec,
    pub variant: Variant,
    pub n_classes: usize,
    pub input: InputSig,
    /// Spatial halves of factorized blocks carry bias and activation.
    pub activate_spatial: bool,
    pub params: ModelParams<F>,
    stages: Vec<Stage>,
    /// Index of the first stage that sees flattened `[B, T, F]` features.
    split: usize,
}

/// Builds `spec` as `variant` with `n_classes` outputs. Parameters are
/// initialized from `opts.seed`.
pub fn build_model<F: Scalar>(spec: &ArchSpec, n_classes: usize, variant: Variant, opts: &BuildOptions) -> Result<Model<F>> {
    variant.check(spec)?;
    if n_classes < 2 {
        return Err(Error::Build(format!("need at least 2 classes, got {n_classes}")));
    }
    let input = opts
        .input
        .or(spec.input)
        .ok_or_else(|| Error::Build("architecture has no input signature".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = if opts.skeleton { ModelParams::skeleton() } else { ModelParams::new() };
    let mut stages = Vec::with_capacity(spec.terms.len());
    let (mut t, mut c, mut h, mut w) = (input.frames, input.channels, input.height, input.width);
    let mut features: Option<usize> = None;
    let mut split = None;
    for (i, term) in spec.terms.iter().enumerate() {
        let name = format!("{}{}", term.tag().to_ascii_lowercase(), i);
        let spatial = matches!(term, ArchTerm::Conv(_) | ArchTerm::TConv { .. } | ArchTerm::Pool | ArchTerm::Pool3d);
        if spatial && features.is_some() {
            return Err(Error::Build(format!("{} at term {} follows a flattening layer", term.tag(), i + 1)));
        }
        if !spatial && features.is_none() {
            split = Some(i);
            // Window models that keep time fold it into the features.
            features = Some(if variant == Variant::TConv { t * c * h * w } else { c * h * w });
        }
        let stage = match *term {
            ArchTerm::Conv(n) => {
                let linear = matches!(spec.terms.get(i + 1), Some(ArchTerm::TConv { .. })) && !opts.activate_spatial;
                let l = SpatialConvLayer::new(&mut params, &name, c, n, linear, &mut rng);
                c = n;
                Stage::Spatial(l)
            }
            ArchTerm::TConv { maps, len } => {
                let l = TemporalConvLayer::new(&mut params, &name, c, maps, len, &mut rng);
                c = maps;
                Stage::Temporal(l)
            }
            ArchTerm::Pool => {
                (h, w) = (h.div_ceil(2), w.div_ceil(2));
                Stage::Pool2d
            }
            ArchTerm::Pool3d => {
                (t, h, w) = (t.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
                Stage::Pool3d
            }
            ArchTerm::TPool(mode) => Stage::TPool(mode),
            ArchTerm::Dense(n) => {
                let f = features.expect("set above");
                features = Some(n);
                Stage::Dense(DenseLayer::new(&mut params, &name, f, n, true, &mut rng))
            }
            ArchTerm::Rnn(n) | ArchTerm::Lstm(n) => {
                let f = features.expect("set above");
                features = Some(n);
                let lstm = matches!(term, ArchTerm::Lstm(_));
                let mut cell = |dir: &str| {
                    let nm = format!("{name}.{dir}");
                    if lstm {
                        Cell::Lstm(LstmPeepholeCell::new(&mut params, &nm, f, n, &mut rng))
                    } else {
                        Cell::Standard(RnnStandardCell::new(&mut params, &nm, f, n, &mut rng))
                    }
                };
                let fwd = cell("fwd");
                let bwd = cell("bwd");
                Stage::Recurrent { fwd, bwd }
            }
            ArchTerm::Softmax => {
                let f = features.expect("set above");
                Stage::Head(DenseLayer::new(&mut params, &name, f, n_classes, false, &mut rng))
            }
        };
        stages.push(stage);
    }
    Ok(Model {
        spec: spec.clone(),
        variant,
        n_classes,
        input,
        activate_spatial: opts.activate_spatial,
        params,
        stages,
        split: split.expect("S is always present"),
    })
}

impl<F: Scalar> Model<F> {
    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Frames consumed by one forward pass during training: 1 for the
    /// single-frame model, the window for pooling/convolutional models and
    /// the fragment length for recurrent ones.
    pub fn frames(&self) -> usize {
        match self.variant {
            Variant::Single => 1,
            _ => self.input.frames,
        }
    }

    fn check_input(&self, g: &Graph<F>, x: Var) -> Result<()> {
        let s = g.shape(x);
        let sig = self.input;
        let ok = s.len() == 5
            && s[2] == sig.channels
            && s[3] == sig.height
            && s[4] == sig.width
            && s[1] > 0
            && (self.variant != Variant::TConv || s[1] == sig.frames);
        if !ok {
            let want = [0, sig.frames, sig.channels, sig.height, sig.width];
            return Err(Error::shape("model input", s, &want));
        }
        Ok(())
    }

    /// Convolutional front end on `[B, T, C, H, W]`; returns `[B, T', F]`
    /// (or `[B, F]` for the temporal-convolution window model).
    pub fn features(&self, g: &mut Graph<F>, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let mut y = x;
        for stage in &self.stages[..self.split] {
            y = match stage {
                Stage::Spatial(l) => spatial_block(g, vars, y, l)?,
                Stage::Temporal(l) => temporal_block(g, vars, y, l)?,
                Stage::Pool2d => g.max_pool2d(y)?,
                Stage::Pool3d => g.max_pool3d(y)?,
                _ => unreachable!("front end holds only convolution and pooling"),
            };
        }
        let s = g.shape(y).to_vec();
        let shape = if self.variant == Variant::TConv {
            vec![s[0], s[1..].iter().product()]
        } else {
            vec![s[0], s[1], s[2..].iter().product()]
        };
        g.reshape(y, &shape)
    }

    /// Everything after [`features`](Self::features). Produces class
    /// probabilities: `[B, T, K]` for per-frame variants, `[B, K]` for
    /// window variants.
    pub fn head(&self, g: &mut Graph<F>, vars: &[Var], feats: Var, mut rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let mut y = feats;
        let tail = &self.stages[self.split..];
        for (i, stage) in tail.iter().enumerate() {
            y = match stage {
                Stage::TPool(mode) => g.temporal_pool(y, *mode)?,
                Stage::Dense(l) => dense(g, vars, y, l, reborrow(&mut rng))?,
                Stage::Recurrent { fwd, bwd } => {
                    let state = bidirectional_run(g, vars, y, fwd, bwd)?;
                    if let Some(Stage::Head(l)) = tail.get(i + 1) {
                        return classify_frames(g, vars, &state, l, reborrow(&mut rng));
                    }
                    let sums = state
                        .h_f
                        .iter()
                        .zip(&state.h_b)
                        .map(|(&a, &b)| g.add(a, b))
                        .collect::<Result<Vec<_>>>()?;
                    g.stack_time(&sums)?
                }
                Stage::Head(l) => {
                    let logits = dense(g, vars, y, l, reborrow(&mut rng))?;
                    g.softmax(logits)?
                }
                _ => unreachable!("convolution after flattening is rejected at build time"),
            };
        }
        Ok(y)
    }

    /// Full forward pass on `[B, T, C, H, W]`. Dropout is active iff `rng`
    /// is given.
    pub fn forward(&self, g: &mut Graph<F>, vars: &[Var], x: Var, mut rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let f = self.features(g, vars, x)?;
        self.head(g, vars, f, reborrow(&mut rng))
    }

    /// Inference on a batch tensor.
    pub fn predict(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &vars, xv, None)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{builtin, builtin_specs, parse_arch};
    use rand::Rng;

    fn skeleton() -> BuildOptions {
        BuildOptions {
            skeleton: true,
            ..Default::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn desk(name: &str) -> Model<f32> {
        let b = builtin(name).unwrap();
        build_model(&b.spec, 6, b.variant, &BuildOptions::default()).unwrap()
    }

    #[test]
    fn paper_single_frame_has_21_outputs_per_frame() {
        let b = builtin("single_paper").unwrap();
        let m = build_model::<f32>(&b.spec, 21, b.variant, &skeleton()).unwrap();
        let y = m.predict(&random(&[1, 2, 4, 64, 64], 1)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 21]);
        for row in y.data().chunks(21) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mean_pool_window_gives_one_output() {
        let m = desk("tpool_mean_desk");
        assert_eq!(m.frames(), 32);
        let y = m.predict(&random(&[3, 32, 1, 16, 16], 2)).unwrap();
        assert_eq!(y.shape(), &[3, 6]);
    }

    #[test]
    fn output_shapes_per_variant() {
        let x = random(&[2, 64, 1, 16, 16], 3);
        for (name, want) in [
            ("rnn_std_desk", vec![2, 64, 6]),
            ("rnn_lstm_desk", vec![2, 64, 6]),
            ("tconv_lstm_desk", vec![2, 64, 6]),
            ("single_desk", vec![2, 64, 6]),
        ] {
            assert_eq!(desk(name).predict(&x).unwrap().shape(), want.as_slice(), "{name}");
        }
        let y = desk("tconv_desk").predict(&random(&[2, 32, 1, 16, 16], 4)).unwrap();
        assert_eq!(y.shape(), &[2, 6]);
        assert!(desk("tconv_desk").predict(&random(&[2, 16, 1, 16, 16], 4)).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let (a, b) = (desk("tconv_lstm_desk"), desk("tconv_lstm_desk"));
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.tensor, y.tensor);
        }
        let other = build_model::<f32>(
            &a.spec,
            6,
            a.variant,
            &BuildOptions {
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(other.params.iter().next().unwrap().tensor, a.params.iter().next().unwrap().tensor);
    }

    #[test]
    fn pooling_and_single_frame_share_cnn_shapes() {
        for scale in ["paper", "desk"] {
            let shapes = |m: &Model<f32>| m.params.iter().map(|p| p.tensor.shape().to_vec()).collect::<Vec<_>>();
            let s = build_model::<f32>(&builtin(&format!("single_{scale}")).unwrap().spec, 21, Variant::Single, &skeleton()).unwrap();
            for mode in ["mean", "max"] {
                let b = builtin(&format!("tpool_{mode}_{scale}")).unwrap();
                let p = build_model::<f32>(&b.spec, 21, b.variant, &skeleton()).unwrap();
                assert_eq!(shapes(&s), shapes(&p));
            }
        }
    }

    #[test]
    fn param_count_monotone_in_width() {
        for (name, b) in builtin_specs() {
            if !name.ends_with("_desk") {
                continue;
            }
            let counts: Vec<usize> = (1..4)
                .map(|k| build_model::<f32>(&b.spec.scaled(k, 1), 6, b.variant, &BuildOptions::default()).unwrap().param_count())
                .collect();
            assert!(counts.windows(2).all(|w| w[0] < w[1]), "{name}: {counts:?}");
        }
    }

    #[test]
    fn variant_mismatch_is_build_error() {
        let b = builtin("single_desk").unwrap();
        let e = build_model::<f32>(&b.spec, 6, Variant::Lstm, &BuildOptions::default()).unwrap_err();
        assert!(matches!(e, Error::Build(ref m) if m.contains('L')), "{e}");
    }

    #[test]
    fn bare_softmax_on_raw_input() {
        let s = parse_arch("1@1x2x2:S").unwrap();
        let m = build_model::<f64>(&s, 3, Variant::Single, &BuildOptions::default()).unwrap();
        assert_eq!(m.param_count(), 3 * 4 + 3);
        let y = m.predict(&Tensor::zeros(&[1, 1, 1, 2, 2])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3]);
    }

    #[test]
    fn factorized_spatial_layers_are_linear() {
        let m = desk("tconv_lstm_desk");
        let spatial: Vec<_> = m
            .stages()
            .iter()
            .filter_map(|s| match s {
                Stage::Spatial(l) => Some(l),
                _ => None,
            })
            .collect();
        assert_eq!(spatial.len(), 8);
        assert!(spatial.iter().all(|l| l.bias.is_none() && l.activation.is_none()));
        let b = builtin("tconv_lstm_desk").unwrap();
        let act = build_model::<f32>(
            &b.spec,
            6,
            b.variant,
            &BuildOptions {
                activate_spatial: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(act.stages().iter().all(|s| !matches!(s, Stage::Spatial(l) if l.bias.is_none())));
    }

    /// Every parameter receives a nonzero gradient on at least one of five
    /// random batches.
    #[test]
    fn every_builtin_has_live_gradients() {
        for (name, b) in builtin_specs() {
            if !name.ends_with("_desk") {
                continue;
            }
            let m = build_model::<f32>(&b.spec, 6, b.variant, &BuildOptions::default()).unwrap();
            let frames = if b.variant == Variant::Single { 2 } else { m.input.frames.min(16) };
            let frames = if b.variant == Variant::TConv { m.input.frames } else { frames };
            let mut live = vec![false; m.params.len()];
            for seed in 0..5 {
                let mut g = Graph::new();
                let vars = m.params.bind(&mut g);
                let x = g.constant(random(&[2, frames, 1, 16, 16], seed));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = m.forward(&mut g, &vars, x, Some(&mut rng)).unwrap();
                let rows = g.value(p).len() / 6;
                let labels: Vec<usize> = (0..rows).map(|r| (r + seed as usize) % 6).collect();
                let loss = g.cross_entropy(p, &labels).unwrap();
                let grads = g.backward(loss).unwrap();
                for (i, v) in vars.iter().enumerate() {
                    live[i] |= grads.get(*v).unwrap().data().iter().any(|&d| d != 0.0);
                }
            }
            for (i, p) in m.params.iter().enumerate() {
                assert!(live[i], "{name}: {} never receives gradient", p.name);
            }
        }
    }
}
