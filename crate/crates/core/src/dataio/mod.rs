//! Gesture video data: sequences, the synthetic generator, augmentation,
//! fragment and window sampling, and the on-disk container.

mod augment;
mod container;
mod fragment;
mod synth;

pub use augment::{augment, AugmentParams, Interp, DX_RANGE, DY_RANGE, ROTATION_RANGE, SCALE_RANGE, SHEAR_RANGE, TIME_SCALE_RANGE};
pub use container::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use fragment::{sample_fragment, sample_fragment_len, sliding_windows, window_indices, Fragment, EVAL_KEEP, FRAGMENT_LEN};
pub use synth::{gen_synthetic, render_frame, trajectory, SynthConfig, MAX_CLASSES};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class id of frames outside every gesture.
pub const SILENCE: u16 = 0;

/// Gesture interval with an inclusive end frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GestureAnnotation {
    pub class: u16,
    pub start: u32,
    pub end: u32,
}

impl GestureAnnotation {
    /// Number of frames covered.
    pub fn duration(&self) -> usize {
        (self.end - self.start) as usize + 1
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.start as usize..=self.end as usize
    }
}

/// A labelled video. `frames` is `[T, C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub frames: Tensor<f32>,
    pub labels: Vec<u16>,
    pub annotations: Vec<GestureAnnotation>,
}

impl VideoSequence {
    /// Checks the labelling contract and builds the sequence.
    pub fn new(frames: Tensor<f32>, labels: Vec<u16>, annotations: Vec<GestureAnnotation>) -> Result<Self> {
        let s = VideoSequence {
            frames,
            labels,
            annotations,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.rank() != 4 {
            return Err(Error::Data(format!("frames must be [T, C, H, W], got {:?}", self.frames.shape())));
        }
        let t = self.len();
        if self.labels.len() != t {
            return Err(Error::Data(format!("{} labels for {t} frames", self.labels.len())));
        }
        let mut expect = vec![SILENCE; t];
        let mut last_end: Option<u32> = None;
        let mut anns = self.annotations.clone();
        anns.sort_by_key(|a| a.start);
        for a in &anns {
            if a.class == SILENCE || a.start > a.end || a.end as usize >= t {
                return Err(Error::Data(format!("bad annotation {a:?} for {t} frames")));
            }
            if last_end.is_some_and(|e| a.start <= e) {
                return Err(Error::Data(format!("overlapping annotation {a:?}")));
            }
            last_end = Some(a.end);
            expect[a.frames()].fill(a.class);
        }
        if expect != self.labels {
            return Err(Error::Data("labels disagree with annotations".into()));
        }
        Ok(())
    }

    /// Number of frames.
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)`
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frames.len() / self.len().max(1);
        &self.frames.data()[t * n..(t + 1) * n]
    }

    /// Copies the frames at `indices` into a `[len, C, H, W]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let (c, h, w) = self.frame_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        Tensor::from_vec(&[indices.len(), c, h, w], data).expect("gathered frames")
    }
}

/// Sequences plus the key=value provenance of their generator.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub provenance: Vec<(String, String)>,
    pub sequences: Vec<VideoSequence>,
}

impl Dataset {
    pub fn frames(&self) -> usize {
        self.sequences.iter().map(VideoSequence::len).sum()
    }

    /// Largest class id present, plus one.
    pub fn n_classes(&self) -> usize {
        self.sequences
            .iter()
            .flat_map(|s| s.labels.iter())
            .max()
            .map_or(0, |&m| m as usize + 1)
    }

    /// Frames per class id.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes()];
        for s in &self.sequences {
            for &l in &s.labels {
                h[l as usize] += 1;
            }
        }
        h
    }

    pub fn provenance(&self, key: &str) -> Option<&str> {
        self.provenance.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}
