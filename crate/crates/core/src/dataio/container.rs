//! Dataset container.
//!
//! ```text
//! "FWGD"  version:u16  provenance_len:u32  provenance (key=value lines)
//! n_sequences:u32
//! per sequence:
//!   T:u32 H:u32 W:u32 C:u32 n_annotations:u32
//!   T*C*H*W f32 frames in [T][C][H][W] order
//!   T u16 labels
//!   n_annotations * (class:u16 start:u32 end:u32)
//! ```
//! All numbers little-endian.
//!
//! Recorded gesture corpora (for instance Kinect RGB-D captures with
//! per-frame gesture annotations) are not read directly. A converter
//! builds one [`VideoSequence`] per recording from its frames, per-frame
//! labels (0 for silence) and annotation intervals, then writes the
//! collection with [`save_dataset`]; everything downstream only sees this
//! container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, GestureAnnotation, VideoSequence};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::kv::{parse_kv, render_kv};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"FWGD";
pub const DATASET_VERSION: u16 = 1;

pub fn write_dataset<W: Write>(out: W, d: &Dataset) -> Result<()> {
    let mut w = Writer::new(out);
    w.bytes(DATASET_MAGIC)?;
    w.u16(DATASET_VERSION)?;
    w.string(&render_kv(&d.provenance))?;
    w.len(d.sequences.len())?;
    for s in &d.sequences {
        let (c, h, wd) = s.frame_shape();
        for v in [s.len(), h, wd, c, s.annotations.len()] {
            w.len(v)?;
        }
        w.f32s(s.frames.data())?;
        w.u16s(&s.labels)?;
        for a in &s.annotations {
            w.u16(a.class)?;
            w.u32(a.start)?;
            w.u32(a.end)?;
        }
    }
    w.flush()
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut r = Reader::new(input, "dataset");
    r.magic(DATASET_MAGIC)?;
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset version {version}, expected {DATASET_VERSION}")));
    }
    let provenance = parse_kv(&r.string()?)?;
    let n = r.len()?;
    let mut sequences = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let (t, h, w, c, na) = (r.len()?, r.len()?, r.len()?, r.len()?, r.len()?);
        let count = [t, h, w, c]
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::Format(format!("sequence {i}: frame count overflows")))?;
        let frames = Tensor::from_vec(&[t, c, h, w], r.f32s(count)?)?;
        let labels = r.u16s(t)?;
        let mut annotations = Vec::with_capacity(na.min(1 << 16));
        for _ in 0..na {
            annotations.push(GestureAnnotation {
                class: r.u16()?,
                start: r.u32()?,
                end: r.u32()?,
            });
        }
        let seq = VideoSequence::new(frames, labels, annotations)
            .map_err(|e| Error::Format(format!("sequence {i}: {e}")))?;
        sequences.push(seq);
    }
    r.finish()?;
    Ok(Dataset { provenance, sequences })
}

pub fn save_dataset(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path.as_ref()).map_err(|e| Error::at_path(path.as_ref(), e))?), d)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path.as_ref()).map_err(|e| Error::at_path(path.as_ref(), e))?))
}
