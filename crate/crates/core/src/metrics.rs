//! Frame-wise scoring: Jaccard index per (sequence, class), its mean over
//! gesture classes, macro precision/recall and the isolated-gesture error
//! rate with majority voting.
//!
//! Conventions shared by every function:
//! * hard labels come from argmax with the lowest index winning ties;
//! * class 0 (silence) never enters a mean;
//! * a (sequence, class) pair absent from both truth and prediction is
//!   left out of the Jaccard mean (see [`AbsentPairs`]).

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::binio::{Reader, Writer};
use crate::dataio::{GestureAnnotation, SILENCE};
use crate::error::{Error, Result};

/// Per-frame class probabilities, `frames x classes` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTrack {
    pub frames: usize,
    pub classes: usize,
    pub probs: Vec<f32>,
}

impl PredictionTrack {
    pub fn new(frames: usize, classes: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != frames * classes || classes == 0 {
            return Err(Error::Data(format!(
                "{} probabilities for {frames} frames x {classes} classes",
                probs.len()
            )));
        }
        Ok(PredictionTrack { frames, classes, probs })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.probs[t * self.classes..(t + 1) * self.classes]
    }

    /// Argmax per frame, lowest index on ties.
    pub fn hard_labels(&self) -> Vec<u16> {
        self.probs.chunks(self.classes).map(|r| argmax(r) as u16).collect()
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        self.probs
            .chunks(self.classes)
            .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `|a and b| / |a or b|`; 1 when both are empty.
pub fn jaccard(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("track lengths differ: {} vs {}", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Binary occupancy track of every class, silence included:
/// `tracks[n][t] == (labels[t] == n)`.
pub fn class_tracks(labels: &[u16], n_classes: usize) -> Vec<Vec<bool>> {
    (0..n_classes)
        .map(|n| labels.iter().map(|&l| l as usize == n).collect())
        .collect()
}

/// Hardens a probability track and splits it into per-class tracks.
pub fn probabilities_to_tracks(pred: &PredictionTrack) -> Vec<Vec<bool>> {
    class_tracks(&pred.hard_labels(), pred.classes)
}

/// Treatment of (sequence, class) pairs where the class occurs in neither
/// truth nor prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AbsentPairs {
    #[default]
    Skip,
    /// Count them with J = 1.
    Include,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub sequence: usize,
    pub class: u16,
    pub jaccard: f64,
}

/// Per-pair Jaccard indices of gesture classes `1..n_classes` and their mean.
/// `sequences` holds `(truth, prediction)` hard labels.
pub fn mean_jaccard(sequences: &[(&[u16], &[u16])], n_classes: usize, absent: AbsentPairs) -> Result<(f64, Vec<PairScore>)> {
    let mut pairs = Vec::new();
    for (s, (truth, pred)) in sequences.iter().enumerate() {
        if truth.len() != pred.len() {
            return Err(Error::Data(format!("sequence {s}: {} truth vs {} predicted frames", truth.len(), pred.len())));
        }
        let (ta, pa) = (class_tracks(truth, n_classes), class_tracks(pred, n_classes));
        for n in 1..n_classes {
            let present = ta[n].iter().chain(&pa[n]).any(|&b| b);
            if !present && absent == AbsentPairs::Skip {
                continue;
            }
            pairs.push(PairScore {
                sequence: s,
                class: n as u16,
                jaccard: jaccard(&ta[n], &pa[n])?,
            });
        }
    }
    let mean = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|p| p.jaccard).sum::<f64>() / pairs.len() as f64
    };
    Ok((mean, pairs))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassScore {
    pub class: u16,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `None` when nothing was predicted as this class.
    pub precision: Option<f64>,
    /// `None` when the class never occurs in the truth.
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecisionRecall {
    pub classes: Vec<ClassScore>,
    /// Mean over gesture classes with a defined precision.
    pub precision_macro: f64,
    pub recall_macro: f64,
}

/// Frame-level precision and recall of every gesture class over all
/// frames of all sequences.
pub fn precision_recall(pred: &[u16], truth: &[u16], n_classes: usize) -> Result<PrecisionRecall> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!("{} predicted vs {} true frames", pred.len(), truth.len())));
    }
    let mut classes: Vec<ClassScore> = (1..n_classes)
        .map(|c| ClassScore {
            class: c as u16,
            ..Default::default()
        })
        .collect();
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t && p != SILENCE {
            if let Some(c) = classes.get_mut(p as usize - 1) {
                c.tp += 1;
            }
            continue;
        }
        if p != SILENCE {
            if let Some(c) = classes.get_mut(p as usize - 1) {
                c.fp += 1;
            }
        }
        if t != SILENCE {
            if let Some(c) = classes.get_mut(t as usize - 1) {
                c.fn_ += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    for c in &mut classes {
        c.precision = ratio(c.tp, c.tp + c.fp);
        c.recall = ratio(c.tp, c.tp + c.fn_);
    }
    let mean = |f: fn(&ClassScore) -> Option<f64>| {
        let v: Vec<f64> = classes.iter().filter_map(f).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let precision_macro = mean(|c| c.precision);
    let recall_macro = mean(|c| c.recall);
    Ok(PrecisionRecall {
        classes,
        precision_macro,
        recall_macro,
    })
}

/// Most frequent label, lowest id on ties.
pub fn majority(labels: &[u16]) -> u16 {
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut counts = vec![0usize; max + 1];
    labels.iter().for_each(|&l| counts[l as usize] += 1);
    argmax(&counts) as u16
}

/// Fraction of annotated gestures whose majority-voted prediction differs
/// from the annotated class. `sequences` holds `(predicted labels,
/// annotations)`.
pub fn isolated_error_rate(sequences: &[(&[u16], &[GestureAnnotation])]) -> Result<f64> {
    let (mut wrong, mut total) = (0usize, 0usize);
    for (s, (pred, anns)) in sequences.iter().enumerate() {
        for a in anns.iter() {
            if a.end as usize >= pred.len() {
                return Err(Error::Data(format!("sequence {s}: annotation {a:?} beyond {} frames", pred.len())));
            }
            total += 1;
            wrong += usize::from(majority(&pred[a.frames()]) != a.class);
        }
    }
    if total == 0 {
        return Err(Error::Data("isolated error rate is undefined without annotated gestures".into()));
    }
    Ok(wrong as f64 / total as f64)
}

/// Scores of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct JaccardReport {
    pub n_classes: usize,
    pub sequences: usize,
    pub frames: usize,
    pub pairs: Vec<PairScore>,
    pub jaccard_avg: f64,
    pub pr: PrecisionRecall,
    pub error_rate_isolated: f64,
    pub absent: AbsentPairs,
}

impl JaccardReport {
    /// Scores hard predictions against truth labels and annotations.
    pub fn score(
        truth: &[(&[u16], &[GestureAnnotation])],
        pred: &[&[u16]],
        n_classes: usize,
        absent: AbsentPairs,
    ) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Data(format!("{} sequences vs {} predictions", truth.len(), pred.len())));
        }
        let pairs_in: Vec<(&[u16], &[u16])> = truth.iter().zip(pred).map(|((t, _), p)| (*t, *p)).collect();
        let (jaccard_avg, pairs) = mean_jaccard(&pairs_in, n_classes, absent)?;
        let all_pred: Vec<u16> = pred.iter().flat_map(|p| p.iter().copied()).collect();
        let all_truth: Vec<u16> = truth.iter().flat_map(|(t, _)| t.iter().copied()).collect();
        let pr = precision_recall(&all_pred, &all_truth, n_classes)?;
        let iso: Vec<(&[u16], &[GestureAnnotation])> = pred.iter().zip(truth).map(|(p, (_, a))| (*p, *a)).collect();
        let error_rate_isolated = isolated_error_rate(&iso)?;
        Ok(JaccardReport {
            n_classes,
            sequences: truth.len(),
            frames: all_truth.len(),
            pairs,
            jaccard_avg,
            pr,
            error_rate_isolated,
            absent,
        })
    }

    /// One `key=value` per line; headline metrics first.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        let _ = writeln!(s, "jaccard_avg={}", self.jaccard_avg);
        let _ = writeln!(s, "precision_macro={}", self.pr.precision_macro);
        let _ = writeln!(s, "recall_macro={}", self.pr.recall_macro);
        let _ = writeln!(s, "error_rate_isolated={}", self.error_rate_isolated);
        let _ = writeln!(s, "classes={}", self.n_classes);
        let _ = writeln!(s, "sequences={}", self.sequences);
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "absent_pairs={}", match self.absent {
            AbsentPairs::Skip => "skip",
            AbsentPairs::Include => "include",
        });
        let _ = writeln!(s, "pairs_scored={}", self.pairs.len());
        for c in &self.pr.classes {
            let _ = writeln!(s, "precision_class{}={}", c.class, opt(c.precision));
            let _ = writeln!(s, "recall_class{}={}", c.class, opt(c.recall));
        }
        for p in &self.pairs {
            let _ = writeln!(s, "jaccard_seq{}_class{}={}", p.sequence, p.class, p.jaccard);
        }
        s
    }
}

/// Writes `seq,frame,p0..p{K-1},truth` rows (truth column empty when unknown).
pub fn write_probability_csv<W: Write>(mut out: W, rows: &[(usize, &PredictionTrack, Option<&[u16]>)]) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.1.classes);
    let mut header = String::from("seq,frame");
    for c in 0..k {
        let _ = write!(header, ",p{c}");
    }
    header.push_str(",truth\n");
    out.write_all(header.as_bytes())?;
    for &(seq, track, truth) in rows {
        let mut line = String::new();
        for t in 0..track.frames {
            line.clear();
            let _ = write!(line, "{seq},{t}");
            for p in track.row(t) {
                let _ = write!(line, ",{p}");
            }
            match truth {
                Some(l) => {
                    let _ = writeln!(line, ",{}", l[t]);
                }
                None => line.push_str(",\n"),
            }
            out.write_all(line.as_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Binary prediction track: `T:u32 K:u32` then `T*K` little-endian f32.
pub fn write_track<W: Write>(out: W, track: &PredictionTrack) -> Result<()> {
    let mut w = Writer::new(out);
    w.len(track.frames)?;
    w.len(track.classes)?;
    w.f32s(&track.probs)?;
    w.flush()
}

pub fn read_track<R: Read>(input: R) -> Result<PredictionTrack> {
    let mut r = Reader::new(input, "prediction track");
    let (t, k) = (r.len()?, r.len()?);
    let n = t.checked_mul(k).ok_or_else(|| Error::Format("track size overflows".into()))?;
    let probs = r.f32s(n)?;
    r.finish()?;
    PredictionTrack::new(t, k, probs)
}
