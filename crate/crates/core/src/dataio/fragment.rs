//! Training fragments and sliding evaluation windows.

use rand::Rng;

use super::VideoSequence;
use crate::tensor::Tensor;

/// Frames per recurrent training fragment.
pub const FRAGMENT_LEN: usize = 64;
/// Frames of a fragment kept for evaluation.
pub const EVAL_KEEP: std::ops::Range<usize> = 16..48;

#[derive(Clone, Debug, PartialEq)]
pub struct Fragment {
    /// `[len, C, H, W]`
    pub frames: Tensor<f32>,
    pub labels: Vec<u16>,
    pub start: usize,
    /// Set when the sequence was shorter than the fragment and edge frames
    /// were repeated.
    pub padded: bool,
}

impl Fragment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The middle half of the fragment (frames 16..48 of 64).
    pub fn eval_mask(&self) -> Vec<bool> {
        let n = self.len();
        (0..n).map(|i| i >= n / 4 && i < n - n / 4).collect()
    }
}

/// A [`FRAGMENT_LEN`]-frame fragment at a uniform random start.
pub fn sample_fragment<R: Rng + ?Sized>(seq: &VideoSequence, rng: &mut R) -> Fragment {
    sample_fragment_len(seq, FRAGMENT_LEN, rng)
}

/// A `len`-frame fragment with start uniform over `0..=T-len`. Shorter
/// sequences are padded by repeating the last frame.
pub fn sample_fragment_len<R: Rng + ?Sized>(seq: &VideoSequence, len: usize, rng: &mut R) -> Fragment {
    let t = seq.len();
    let (start, padded) = if t >= len { (rng.random_range(0..=t - len), false) } else { (0, true) };
    let idx: Vec<usize> = (start..start + len).map(|i| i.min(t - 1)).collect();
    Fragment {
        frames: seq.gather(&idx),
        labels: idx.iter().map(|&i| seq.labels[i]).collect(),
        start,
        padded,
    }
}

/// Frame indices of the `w`-frame window centred on frame `center` of a
/// `t`-frame sequence: position `w / 2` of the window is `center`, and
/// indices beyond either end repeat the edge frame.
pub fn window_indices(t: usize, w: usize, center: usize) -> Vec<usize> {
    (0..w)
        .map(|k| (center + k).saturating_sub(w / 2).min(t - 1))
        .collect()
}

/// One window per frame, in frame order, each paired with the label of
/// its centre frame.
pub fn sliding_windows(seq: &VideoSequence, w: usize) -> impl Iterator<Item = (Tensor<f32>, u16)> + '_ {
    let t = seq.len();
    (0..t).map(move |c| (seq.gather(&window_indices(t, w, c)), seq.labels[c]))
}
