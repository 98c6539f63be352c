//! Training and validation examples drawn from a dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archspec::Variant;
use crate::dataio::{augment, sample_fragment_len, window_indices, AugmentParams, Dataset, Interp};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What one example looks like for a given model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    /// One frame and its label.
    Frame,
    /// `w` frames, labelled by the frame at position `w / 2`.
    Window(usize),
    /// `len` frames with a label per frame.
    Fragment(usize),
}

impl SampleKind {
    pub fn for_variant(variant: Variant, window: usize, fragment_len: usize) -> Self {
        match variant {
            Variant::Single => SampleKind::Frame,
            Variant::TPool | Variant::TConv => SampleKind::Window(window),
            Variant::Rnn | Variant::Lstm | Variant::TConvLstm => SampleKind::Fragment(fragment_len),
        }
    }

    /// Input frames per example.
    pub fn frames(self) -> usize {
        match self {
            SampleKind::Frame => 1,
            SampleKind::Window(w) => w,
            SampleKind::Fragment(l) => l,
        }
    }

    /// Labelled frames per example.
    pub fn targets(self) -> usize {
        match self {
            SampleKind::Fragment(l) => l,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[L, C, H, W]`
    pub frames: Tensor<f32>,
    pub targets: Vec<u16>,
}

fn check(ds: &Dataset, kind: SampleKind) -> Result<()> {
    if ds.sequences.is_empty() || ds.frames() == 0 {
        return Err(Error::Data("empty dataset split".into()));
    }
    if kind.frames() == 0 {
        return Err(Error::usage("examples need at least one frame"));
    }
    Ok(())
}

/// A frame chosen uniformly over all frames of the dataset.
fn pick_frame<R: Rng + ?Sized>(ds: &Dataset, rng: &mut R) -> (usize, usize) {
    let mut k = rng.random_range(0..ds.frames());
    for (i, s) in ds.sequences.iter().enumerate() {
        if k < s.len() {
            return (i, k);
        }
        k -= s.len();
    }
    unreachable!("index below total frame count")
}

/// Draws one example. With `augment_on`, a fresh set of augmentation
/// parameters warps the whole example.
pub fn draw_sample<R: Rng + ?Sized>(ds: &Dataset, kind: SampleKind, augment_on: bool, rng: &mut R) -> Result<Sample> {
    check(ds, kind)?;
    let (si, c) = pick_frame(ds, rng);
    let seq = &ds.sequences[si];
    let t = seq.len();
    let (_, h, w) = seq.frame_shape();
    let params = augment_on.then(|| AugmentParams::sample(rng).for_frame_size(h.max(w)));
    let warp = |frames: Tensor<f32>, labels: Vec<u16>, p: &AugmentParams, out: usize| augment(&frames, &labels, p, out, Interp::Bilinear);
    let labels_of = |idx: &[usize]| idx.iter().map(|&i| seq.labels[i]).collect::<Vec<u16>>();
    Ok(match (kind, params) {
        (SampleKind::Frame, None) => Sample {
            frames: seq.gather(&[c]),
            targets: vec![seq.labels[c]],
        },
        (SampleKind::Frame, Some(mut p)) => {
            p.time_scale = 1.0;
            let (frames, targets) = warp(seq.gather(&[c]), vec![seq.labels[c]], &p, 1);
            Sample { frames, targets }
        }
        (SampleKind::Window(len), None) => {
            let idx = window_indices(t, len, c);
            Sample {
                frames: seq.gather(&idx),
                targets: vec![seq.labels[c]],
            }
        }
        (SampleKind::Window(len), Some(p)) => {
            // Place the source span so that output position len/2 reads frame c.
            let lead = ((len / 2) as f64 * p.time_scale).round() as isize;
            let start = c as isize - lead;
            let idx: Vec<usize> = (0..p.source_frames(len))
                .map(|k| (start + k as isize).clamp(0, t as isize - 1) as usize)
                .collect();
            let (frames, labels) = warp(seq.gather(&idx), labels_of(&idx), &p, len);
            Sample {
                frames,
                targets: vec![labels[len / 2]],
            }
        }
        (SampleKind::Fragment(len), p) => {
            let src = p.map_or(len, |p| p.source_frames(len));
            let frag = sample_fragment_len(seq, src, rng);
            match p {
                None => Sample {
                    frames: frag.frames,
                    targets: frag.labels,
                },
                Some(p) => {
                    let (frames, targets) = warp(frag.frames, frag.labels, &p, len);
                    Sample { frames, targets }
                }
            }
        }
    })
}

/// `n` unaugmented examples from a private stream seeded by `seed`, so the
/// same set is scored after every epoch.
pub fn fixed_samples(ds: &Dataset, kind: SampleKind, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| draw_sample(ds, kind, false, &mut rng)).collect()
}

/// Stacks examples into a `[B, L, C, H, W]` batch and flat targets.
pub fn stack<F: Scalar>(samples: &[Sample]) -> Result<(Tensor<F>, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::usage("empty batch"))?;
    let s = first.frames.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.frames.len());
    let mut targets = Vec::with_capacity(samples.len() * first.targets.len());
    for x in samples {
        if x.frames.shape() != s.as_slice() {
            return Err(Error::shape("batch", &s, x.frames.shape()));
        }
        data.extend(x.frames.data().iter().map(|&v| F::lit(v as f64)));
        targets.extend(x.targets.iter().map(|&l| l as usize));
    }
    let shape = [samples.len(), s[0], s[1], s[2], s[3]];
    Ok((Tensor::from_vec(&shape, data)?, targets))
}
