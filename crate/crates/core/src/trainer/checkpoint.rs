//! Checkpoint container "FWGC".
//!
//! Layout (little endian): magic, u16 version, architecture string,
//! variant name, u32 classes, four u32 input extents (C, T, H, W), u16
//! spatial-activation flag, dtype string, settings string, u32 epoch,
//! parameters (name, rank, extents, values), Adam state (t, beta1, beta2,
//! eps, lr, gamma, then m and v per parameter), and the sampler state
//! (32-byte seed, stream, word position as two u64).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{OptimizerState, TrainOutcome};
use crate::archspec::{InputSig, Variant};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::kv::{parse_kv, render_kv};
use crate::model::{build_model, BuildOptions, Model};
use crate::params::{Init, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FWGC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<F: Scalar> {
    pub arch: String,
    pub variant: Variant,
    pub n_classes: usize,
    pub input: InputSig,
    pub activate_spatial: bool,
    /// Free-form `key=value` settings of the run.
    pub settings: Vec<(String, String)>,
    pub epoch: usize,
    pub params: Vec<(String, Tensor<F>)>,
    pub optimizer: OptimizerState<F>,
    pub rng: ChaCha8Rng,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(model: &Model<F>, outcome: &TrainOutcome<F>, settings: Vec<(String, String)>) -> Self {
        Checkpoint {
            arch: model.spec.to_string(),
            variant: model.variant,
            n_classes: model.n_classes,
            input: model.input,
            activate_spatial: model.activate_spatial,
            settings,
            epoch: outcome.history.records.last().map_or(0, |r| r.epoch),
            params: model.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
            optimizer: outcome.optimizer.clone(),
            rng: outcome.rng.clone(),
        }
    }

    /// Rebuilds the model and loads the stored weights.
    pub fn model(&self) -> Result<Model<F>> {
        let spec = self.arch.parse()?;
        let opts = BuildOptions {
            input: Some(self.input),
            activate_spatial: self.activate_spatial,
            skeleton: true,
            ..Default::default()
        };
        let mut model = build_model(&spec, self.n_classes, self.variant, &opts)?;
        let mut stored = ModelParams::new();
        for (name, t) in &self.params {
            stored.push(name.clone(), t.clone(), Init::Zeros);
        }
        model
            .params
            .load_from(&stored)
            .map_err(|e| Error::Format(format!("checkpoint does not match its architecture: {e}")))?;
        Ok(model)
    }
}

fn dim(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

fn put_values<F: Scalar, W: Write>(w: &mut Writer<W>, v: &[F]) -> Result<()> {
    if F::NAME == "f32" {
        let xs: Vec<f32> = v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect();
        w.f32s(&xs)
    } else {
        v.iter().try_for_each(|x| w.f64(x.to_f64().unwrap_or(f64::NAN)))
    }
}

fn get_values<F: Scalar, R: Read>(r: &mut Reader<R>, n: usize, wide: bool) -> Result<Vec<F>> {
    if wide {
        (0..n).map(|_| Ok(F::lit(r.f64()?))).collect()
    } else {
        Ok(r.f32s(n)?.into_iter().map(|x| F::lit(x as f64)).collect())
    }
}

pub fn write_checkpoint<F: Scalar, W: Write>(out: W, c: &Checkpoint<F>) -> Result<()> {
    let mut w = Writer::new(out);
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u16(CHECKPOINT_VERSION)?;
    w.string(&c.arch)?;
    w.string(c.variant.name())?;
    w.u32(dim(c.n_classes, "class count")?)?;
    for d in [c.input.channels, c.input.frames, c.input.height, c.input.width] {
        w.u32(dim(d, "input extent")?)?;
    }
    w.u16(c.activate_spatial as u16)?;
    w.string(F::NAME)?;
    w.string(&render_kv(&c.settings))?;
    w.u32(dim(c.epoch, "epoch")?)?;
    w.len(c.params.len())?;
    for (name, t) in &c.params {
        w.string(name)?;
        w.len(t.rank())?;
        for &d in t.shape() {
            w.u32(dim(d, "extent")?)?;
        }
        put_values(&mut w, t.data())?;
    }
    let o = &c.optimizer;
    if o.m.len() != c.params.len() || o.v.len() != c.params.len() {
        return Err(Error::usage("optimizer state does not match the parameters"));
    }
    w.u64(o.t)?;
    for x in [o.beta1, o.beta2, o.eps, o.lr, o.gamma] {
        w.f64(x)?;
    }
    for t in o.m.iter().chain(&o.v) {
        put_values(&mut w, t.data())?;
    }
    w.bytes(&c.rng.get_seed())?;
    w.u64(c.rng.get_stream())?;
    let pos = c.rng.get_word_pos();
    w.u64((pos >> 64) as u64)?;
    w.u64(pos as u64)?;
    w.flush()
}

pub fn read_checkpoint<F: Scalar, R: Read>(input: R) -> Result<Checkpoint<F>> {
    let mut r = Reader::new(input, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let arch = r.string()?;
    let variant = Variant::parse(&r.string()?).map_err(|e| Error::Format(e.to_string()))?;
    let n_classes = r.len()?;
    let mut ext = [0usize; 4];
    for e in &mut ext {
        *e = r.len()?;
    }
    let input = InputSig {
        channels: ext[0],
        frames: ext[1],
        height: ext[2],
        width: ext[3],
    };
    let activate_spatial = match r.u16()? {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad flag value {f}"))),
    };
    let wide = match r.string()?.as_str() {
        "f32" => false,
        "f64" => true,
        other => return Err(Error::Format(format!("unknown value type '{other}'"))),
    };
    let settings = parse_kv(&r.string()?).map_err(|e| Error::Format(e.to_string()))?;
    let epoch = r.len()?;
    let n = r.len()?;
    let mut params = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.len()?;
        if rank > 8 {
            return Err(Error::Format(format!("parameter '{name}' has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("parameter '{name}' is too large")))?;
        let data = get_values::<F, _>(&mut r, count, wide)?;
        params.push((name, Tensor::from_vec(&shape, data)?));
    }
    let t = r.u64()?;
    let mut consts = [0f64; 5];
    for c in &mut consts {
        *c = r.f64()?;
    }
    let mut moments = Vec::with_capacity(2 * params.len());
    for _ in 0..2 {
        for (_, p) in &params {
            let data = get_values::<F, _>(&mut r, p.len(), wide)?;
            moments.push(Tensor::from_vec(p.shape(), data)?);
        }
    }
    let v = moments.split_off(params.len());
    let optimizer = OptimizerState {
        m: moments,
        v,
        t,
        beta1: consts[0],
        beta2: consts[1],
        eps: consts[2],
        lr: consts[3],
        gamma: consts[4],
    };
    let seed: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let hi = r.u64()?;
    let lo = r.u64()?;
    r.finish()?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(((hi as u128) << 64) | lo as u128);
    Ok(Checkpoint {
        arch,
        variant,
        n_classes,
        input,
        activate_spatial,
        settings,
        epoch,
        params,
        optimizer,
        rng,
    })
}

pub fn save_checkpoint<F: Scalar>(path: impl AsRef<Path>, c: &Checkpoint<F>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path.as_ref()).map_err(|e| Error::at_path(path.as_ref(), e))?), c)
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<F>> {
    read_checkpoint(BufReader::new(File::open(path.as_ref()).map_err(|e| Error::at_path(path.as_ref(), e))?))
}
