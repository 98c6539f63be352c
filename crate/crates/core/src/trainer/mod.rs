//! Training: Adam with exponential decay, early stopping on validation
//! loss, best-weight restoration and checkpoints.

mod adam;
mod checkpoint;
mod sample;

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, decay_lr, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use sample::{draw_sample, fixed_samples, stack, Sample, SampleKind};

use crate::archspec::Variant;
use crate::autodiff::Graph;
use crate::dataio::{Dataset, FRAGMENT_LEN};
use crate::error::{Error, Result};
use crate::kv::{parse_kv, parse_value};
use crate::model::Model;
use crate::params::orthogonal;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp inside the logarithm of the loss.
pub const LOG_CLAMP: f64 = 1e-12;

/// Orthogonal matrix of shape `shape`, with every axis after the first
/// flattened into the fan-in.
pub fn orthogonal_init<R: rand::Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Result<Tensor<f64>> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::usage(format!("orthogonal init of shape {shape:?}")));
    }
    let rows = shape[0];
    let cols = shape[1..].iter().product();
    Tensor::from_vec(shape, orthogonal(rows, cols, gain, rng))
}

/// Mean over rows of `-ln max(p[t, target_t], 1e-12)` for `[T, K]` rows.
pub fn cross_entropy<F: Scalar>(pred: &Tensor<F>, targets: &[u16]) -> Result<f64> {
    let k = *pred.shape().last().ok_or_else(|| Error::usage("cross entropy of a scalar"))?;
    if k == 0 || pred.len() / k != targets.len() || targets.is_empty() {
        return Err(Error::shape("cross_entropy", pred.shape(), &[targets.len()]));
    }
    let mut sum = 0.0;
    for (row, &t) in pred.data().chunks(k).zip(targets) {
        let p = row
            .get(t as usize)
            .ok_or_else(|| Error::usage(format!("label {t} out of range for {k} classes")))?;
        let p = p.to_f64().unwrap_or(f64::NAN);
        if !p.is_finite() {
            return Err(Error::Numeric(format!("probability {p} in cross entropy")));
        }
        sum -= p.max(LOG_CLAMP).ln();
    }
    Ok(sum / targets.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::usage(format!("precision must be f32 or f64, got '{s}'"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch learning-rate decay.
    pub gamma: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Steps per epoch; by default enough examples for every training
    /// frame to be a target once.
    pub steps_per_epoch: Option<usize>,
    /// Hard cap on optimizer steps over the whole run.
    pub max_steps: Option<usize>,
    pub fragment_len: usize,
    pub seed: u64,
    pub precision: Precision,
    pub augment: bool,
    /// Size of the fixed validation (and training-loss probe) sample.
    pub val_samples: usize,
    /// Frame-by-frame pretraining epochs before temporal pooling is
    /// trained; temporal pooling variants only. 0 disables the phase.
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            gamma: 0.97,
            patience: 10,
            max_epochs: 50,
            steps_per_epoch: None,
            max_steps: None,
            fragment_len: FRAGMENT_LEN,
            seed: 0,
            precision: Precision::F32,
            augment: true,
            val_samples: 128,
            pretrain_epochs: 0,
        }
    }
}

fn opt_string(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" || value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

impl TrainConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("gamma", self.gamma.to_string()),
            ("patience", self.patience.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("steps_per_epoch", opt_string(self.steps_per_epoch)),
            ("max_steps", opt_string(self.max_steps)),
            ("fragment_len", self.fragment_len.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("augment", self.augment.to_string()),
            ("val_samples", self.val_samples.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key=value` setting; unknown keys are a usage error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_opt(key, value)?,
            "max_steps" => self.max_steps = parse_opt(key, value)?,
            "fragment_len" => self.fragment_len = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "precision" => self.precision = value.parse()?,
            "augment" => self.augment = parse_value(key, value)?,
            "val_samples" => self.val_samples = parse_value(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_value(key, value)?,
            _ => return Err(Error::usage(format!("unknown training setting '{key}'"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in parse_kv(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.fragment_len == 0 || self.val_samples == 0 {
            return bad("fragment_len and val_samples must be positive".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive".into());
        }
        Ok(())
    }
}

/// Stops once more than `patience` epochs passed without a new best
/// validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub best: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub patience: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            patience,
        }
    }

    /// Records the validation loss of `epoch`; returns true when training
    /// should stop.
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        self.since_improvement > self.patience
    }

    pub fn improved(&self, epoch: usize) -> bool {
        self.best_epoch == epoch && self.since_improvement == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Train,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Train => "train",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    /// 0 is the untrained model.
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Mean minibatch loss of the epoch (dropout and augmentation on); for
    /// epoch 0 the loss on the fixed training probe.
    pub train_loss: f64,
    pub val_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    /// Epoch at which the stopper fired; `None` if the budget ran out.
    pub stopped_at: Option<usize>,
    pub steps: usize,
}

impl History {
    /// `phase,epoch,lr,train_loss,val_loss`, one row per epoch.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "phase,epoch,lr,train_loss,val_loss")?;
        for r in &self.records {
            writeln!(out, "{},{},{:e},{:.9e},{:.9e}", r.phase.name(), r.epoch, r.lr, r.train_loss, r.val_loss)?;
        }
        Ok(())
    }

    pub fn train_records(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Train)
    }
}

/// Everything needed to resume or reproduce a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<F: Scalar> {
    pub history: History,
    pub optimizer: OptimizerState<F>,
    pub rng: ChaCha8Rng,
}

/// Mean cross-entropy of `model` over `samples` without dropout.
pub fn evaluate_loss<F: Scalar>(model: &Model<F>, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x, y) = stack::<F>(chunk)?;
        let p = model.predict(&x)?;
        let k = model.n_classes;
        let p = p.reshape(&[y.len(), k])?;
        let t: Vec<u16> = y.iter().map(|&v| v as u16).collect();
        sum += cross_entropy(&p, &t)? * y.len() as f64;
        n += y.len();
    }
    if n == 0 {
        return Err(Error::usage("no samples to evaluate"));
    }
    Ok(sum / n as f64)
}

/// One optimizer step on `batch`; returns the minibatch loss.
fn step<F: Scalar>(
    model: &mut Model<F>,
    batch: &[Sample],
    opt: &mut OptimizerState<F>,
    lr: f64,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let (x, y) = stack::<F>(batch)?;
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let xv = g.constant(x);
    let p = model.forward(&mut g, &vars, xv, Some(rng))?;
    if g.value(p).data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite network output after {} steps", opt.t)));
    }
    let p = g.reshape(p, &[y.len(), model.n_classes])?;
    let loss = g.cross_entropy(p, &y)?;
    let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss became {value} after {} steps", opt.t)));
    }
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor<F>> = vars
        .iter()
        .zip(model.params.iter())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
        .collect();
    adam_step(&mut model.params, &grads, opt, lr)?;
    Ok(value)
}

/// Trains `model` on `train`, early-stopping on `val`, and restores the
/// best-validation weights.
pub fn train<F: Scalar>(model: &mut Model<F>, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<F>> {
    train_with_progress(model, train, val, cfg, &mut |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress<F: Scalar>(
    model: &mut Model<F>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if train.sequences.is_empty() || train.frames() == 0 {
        return Err(Error::Data("empty training split".into()));
    }
    if val.sequences.is_empty() || val.frames() == 0 {
        return Err(Error::Data("empty validation split".into()));
    }
    for (name, ds) in [("training", train), ("validation", val)] {
        let k = ds.n_classes();
        if k > model.n_classes {
            return Err(Error::Data(format!("{name} labels need {k} classes, model has {}", model.n_classes)));
        }
    }
    if cfg.pretrain_epochs > 0 && model.variant != Variant::TPool {
        return Err(Error::usage("frame-by-frame pretraining applies to temporal pooling models only"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();
    let mut opt = OptimizerState::new(&model.params, cfg.learning_rate, cfg.gamma);

    if cfg.pretrain_epochs > 0 {
        let kind = SampleKind::Frame;
        let phase_cfg = TrainConfig {
            max_epochs: cfg.pretrain_epochs,
            patience: usize::MAX,
            ..cfg.clone()
        };
        run_phase(model, train, val, &phase_cfg, kind, Phase::Pretrain, &mut opt, &mut rng, &mut history, progress)?;
        opt = OptimizerState::new(&model.params, cfg.learning_rate, cfg.gamma);
    }
    let kind = SampleKind::for_variant(model.variant, model.frames(), cfg.fragment_len);
    run_phase(model, train, val, cfg, kind, Phase::Train, &mut opt, &mut rng, &mut history, progress)?;
    Ok(TrainOutcome { history, optimizer: opt, rng })
}

#[allow(clippy::too_many_arguments)]
fn run_phase<F: Scalar>(
    model: &mut Model<F>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    kind: SampleKind,
    phase: Phase,
    opt: &mut OptimizerState<F>,
    rng: &mut ChaCha8Rng,
    history: &mut History,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<()> {
    let val_set = fixed_samples(val, kind, cfg.val_samples, cfg.seed ^ 0x7661_6c)?;
    let probe = fixed_samples(train, kind, cfg.val_samples, cfg.seed ^ 0x7472_6e)?;
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| train.frames().div_ceil(cfg.batch_size * kind.targets()).max(1));

    let mut stopper = EarlyStopper::new(cfg.patience);
    let record = EpochRecord {
        phase,
        epoch: 0,
        lr: cfg.learning_rate,
        train_loss: evaluate_loss(model, &probe, cfg.batch_size)?,
        val_loss: evaluate_loss(model, &val_set, cfg.batch_size)?,
        steps: 0,
    };
    stopper.update(0, record.val_loss);
    history.records.push(record);
    progress(&record);
    let mut best = model.params.clone();
    let mut stopped = None;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let lr = opt.lr_at(epoch - 1);
        let mut sum = 0.0;
        let mut taken = 0;
        for _ in 0..steps_per_epoch {
            if cfg.max_steps.is_some_and(|m| history.steps >= m) {
                break;
            }
            let batch = (0..cfg.batch_size)
                .map(|_| draw_sample(train, kind, cfg.augment, rng))
                .collect::<Result<Vec<_>>>()?;
            sum += step(model, &batch, opt, lr, rng)?;
            taken += 1;
            history.steps += 1;
        }
        if taken == 0 {
            break 'epochs;
        }
        let val_loss = evaluate_loss(model, &val_set, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss became {val_loss} in epoch {epoch}")));
        }
        let record = EpochRecord {
            phase,
            epoch,
            lr,
            train_loss: sum / taken as f64,
            val_loss,
            steps: taken,
        };
        history.records.push(record);
        progress(&record);
        let stop = stopper.update(epoch, val_loss);
        if stopper.improved(epoch) {
            best = model.params.clone();
        }
        if stop {
            stopped = Some(epoch);
            break;
        }
    }
    model.params.load_from(&best)?;
    if phase == Phase::Train {
        history.best_epoch = stopper.best_epoch;
        history.stopped_at = stopped;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
