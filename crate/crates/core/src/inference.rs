//! Whole-sequence prediction.
//!
//! Recurrent models run on overlapping windows of the training fragment
//! length, stepping by half a window; each frame is taken from the window
//! in whose middle half it lies, so both directions have seen context on
//! either side. The first window also supplies the frames before its
//! middle and the last one the frames after it. Window models slide a
//! window centred on every frame.

use crate::archspec::Variant;
use crate::autodiff::Graph;
use crate::dataio::{window_indices, Dataset, VideoSequence};
use crate::error::{Error, Result};
use crate::metrics::{AbsentPairs, JaccardReport, PredictionTrack};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Window starts for a `t`-frame sequence and window `len`: multiples of
/// `len / 2`, the last one moved back to end exactly at `t`.
pub fn stitch_starts(t: usize, len: usize) -> Vec<usize> {
    if t <= len {
        return vec![0];
    }
    let stride = (len / 2).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        let s_clamped = s.min(t - len);
        starts.push(s_clamped);
        if s_clamped == t - len {
            return starts;
        }
        s += stride;
    }
}

/// For each window start, the range of sequence frames it supplies.
pub fn stitch_ranges(t: usize, len: usize) -> Vec<(usize, std::ops::Range<usize>)> {
    let starts = stitch_starts(t, len);
    let quarter = len / 4;
    let n = starts.len();
    (0..n)
        .map(|k| {
            let lo = if k == 0 { 0 } else { starts[k] + quarter };
            let hi = if k + 1 == n { t } else { starts[k + 1] + quarter };
            (starts[k], lo..hi)
        })
        .collect()
}

fn to_track<F: Scalar>(frames: usize, classes: usize, data: &[F]) -> Result<PredictionTrack> {
    let probs = data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
    PredictionTrack::new(frames, classes, probs)
}

fn frames_as<F: Scalar>(x: &Tensor<f32>, batch_shape: &[usize]) -> Result<Tensor<F>> {
    Tensor::from_vec(batch_shape, x.data().iter().map(|&v| F::lit(v as f64)).collect())
}

fn check_sequence<F: Scalar>(model: &Model<F>, seq: &VideoSequence) -> Result<()> {
    let (c, h, w) = seq.frame_shape();
    let i = model.input;
    if (c, h, w) != (i.channels, i.height, i.width) {
        return Err(Error::Data(format!(
            "frames are {c}x{h}x{w}, model expects {}x{}x{}",
            i.channels, i.height, i.width
        )));
    }
    if seq.is_empty() {
        return Err(Error::Data("empty sequence".into()));
    }
    Ok(())
}

/// Per-frame class probabilities for a whole sequence.
pub fn predict_sequence<F: Scalar>(model: &Model<F>, seq: &VideoSequence, batch_size: usize) -> Result<PredictionTrack> {
    check_sequence(model, seq)?;
    let batch_size = batch_size.max(1);
    match model.variant {
        Variant::Rnn | Variant::Lstm | Variant::TConvLstm => predict_stitched(model, seq, model.input.frames, batch_size),
        Variant::Single | Variant::TPool => predict_pooled(model, seq, batch_size),
        Variant::TConv => predict_windows(model, seq, batch_size),
    }
}

/// Recurrent models: overlapping windows, middle halves kept.
pub fn predict_stitched<F: Scalar>(model: &Model<F>, seq: &VideoSequence, len: usize, batch_size: usize) -> Result<PredictionTrack> {
    let t = seq.len();
    let k = model.n_classes;
    let (c, h, w) = seq.frame_shape();
    let len = len.min(t);
    let ranges = stitch_ranges(t, len);
    let mut out = vec![F::zero(); t * k];
    for chunk in ranges.chunks(batch_size) {
        let idx: Vec<usize> = chunk.iter().flat_map(|(s, _)| *s..*s + len).collect();
        let x = frames_as::<F>(&seq.gather(&idx), &[chunk.len(), len, c, h, w])?;
        let p = model.predict(&x)?;
        for (b, (s, keep)) in chunk.iter().enumerate() {
            for f in keep.clone() {
                let src = (b * len + f - s) * k;
                out[f * k..(f + 1) * k].copy_from_slice(&p.data()[src..src + k]);
            }
        }
    }
    to_track(t, k, &out)
}

/// Single-frame and temporal pooling models: per-frame features are
/// computed once, then pooled over each centred window.
fn predict_pooled<F: Scalar>(model: &Model<F>, seq: &VideoSequence, batch_size: usize) -> Result<PredictionTrack> {
    let t = seq.len();
    let k = model.n_classes;
    let (c, h, w) = seq.frame_shape();
    let win = model.frames();
    let mut feats: Vec<F> = Vec::new();
    let mut width = 0;
    // Frames go through the front end in batches of single frames.
    let per = (batch_size * win.max(1)).max(1);
    for lo in (0..t).step_by(per) {
        let hi = (lo + per).min(t);
        let idx: Vec<usize> = (lo..hi).collect();
        let x = frames_as::<F>(&seq.gather(&idx), &[hi - lo, 1, c, h, w])?;
        let mut g = Graph::new();
        let vars = model.params.bind_frozen(&mut g);
        let xv = g.constant(x);
        let f = model.features(&mut g, &vars, xv)?;
        let v = g.value(f);
        width = v.shape()[2];
        feats.extend_from_slice(v.data());
    }
    let mut out = Vec::with_capacity(t * k);
    let centres: Vec<usize> = (0..t).collect();
    for chunk in centres.chunks(batch_size) {
        let mut data = Vec::with_capacity(chunk.len() * win * width);
        for &centre in chunk {
            for i in window_indices(t, win, centre) {
                data.extend_from_slice(&feats[i * width..(i + 1) * width]);
            }
        }
        let mut g = Graph::new();
        let vars = model.params.bind_frozen(&mut g);
        let xv = g.constant(Tensor::from_vec(&[chunk.len(), win, width], data)?);
        let p = model.head(&mut g, &vars, xv, None)?;
        out.extend_from_slice(g.value(p).data());
    }
    to_track(t, k, &out)
}

/// Temporal convolution models: one full window per frame.
fn predict_windows<F: Scalar>(model: &Model<F>, seq: &VideoSequence, batch_size: usize) -> Result<PredictionTrack> {
    let t = seq.len();
    let k = model.n_classes;
    let (c, h, w) = seq.frame_shape();
    let win = model.frames();
    let mut out = Vec::with_capacity(t * k);
    let centres: Vec<usize> = (0..t).collect();
    for chunk in centres.chunks(batch_size) {
        let idx: Vec<usize> = chunk.iter().flat_map(|&c0| window_indices(t, win, c0)).collect();
        let x = frames_as::<F>(&seq.gather(&idx), &[chunk.len(), win, c, h, w])?;
        out.extend_from_slice(model.predict(&x)?.data());
    }
    to_track(t, k, &out)
}

/// Predictions for every sequence of `ds`, in order.
pub fn predict_dataset<F: Scalar>(model: &Model<F>, ds: &Dataset, batch_size: usize) -> Result<Vec<PredictionTrack>> {
    ds.sequences.iter().map(|s| predict_sequence(model, s, batch_size)).collect()
}

/// Predicts `ds` and scores the hard labels against its annotations.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    ds: &Dataset,
    absent: AbsentPairs,
    batch_size: usize,
) -> Result<(JaccardReport, Vec<PredictionTrack>)> {
    if ds.n_classes() > model.n_classes {
        return Err(Error::Data(format!(
            "labels need {} classes, model has {}",
            ds.n_classes(),
            model.n_classes
        )));
    }
    let tracks = predict_dataset(model, ds, batch_size)?;
    let hard: Vec<Vec<u16>> = tracks.iter().map(|t| t.hard_labels()).collect();
    let truth: Vec<(&[u16], &[crate::dataio::GestureAnnotation])> =
        ds.sequences.iter().map(|s| (s.labels.as_slice(), s.annotations.as_slice())).collect();
    let pred: Vec<&[u16]> = hard.iter().map(|h| h.as_slice()).collect();
    let report = JaccardReport::score(&truth, &pred, model.n_classes, absent)?;
    Ok((report, tracks))
}
