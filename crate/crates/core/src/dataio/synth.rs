//! Synthetic motion-defined gestures.
//!
//! Every sequence shows the same soft round sprite. Gesture classes differ
//! only in the path the sprite follows (sweeps, diagonals, circles, ...),
//! so a single frame carries no class information: two classes passing
//! through the same point render the same image. Between gestures the
//! sprite rests.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, GestureAnnotation, VideoSequence, SILENCE};
use crate::error::{Error, Result};
use crate::kv::{parse_kv, parse_value};
use crate::tensor::Tensor;

/// Number of distinct trajectories.
pub const MAX_CLASSES: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_sequences: usize,
    /// Gesture classes (silence excluded).
    pub n_classes: usize,
    pub frames: usize,
    /// Frame height and width.
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of additive Gaussian pixel noise; 0 disables it.
    pub noise: f64,
    pub sprite_sigma: f64,
    /// Distance in pixels between the sprite centre and the frame border.
    pub margin: usize,
    pub min_gesture: usize,
    pub max_gesture: usize,
    pub min_gap: usize,
    pub max_gap: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sequences: 60,
            n_classes: 5,
            frames: 256,
            size: 16,
            channels: 1,
            seed: 0,
            noise: 0.05,
            sprite_sigma: 1.0,
            margin: 2,
            min_gesture: 20,
            max_gesture: 40,
            min_gap: 8,
            max_gap: 24,
        }
    }
}

impl SynthConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("sequences", self.n_sequences.to_string()),
            ("classes", self.n_classes.to_string()),
            ("frames", self.frames.to_string()),
            ("size", self.size.to_string()),
            ("channels", self.channels.to_string()),
            ("seed", self.seed.to_string()),
            ("noise", self.noise.to_string()),
            ("sprite_sigma", self.sprite_sigma.to_string()),
            ("margin", self.margin.to_string()),
            ("min_gesture", self.min_gesture.to_string()),
            ("max_gesture", self.max_gesture.to_string()),
            ("min_gap", self.min_gap.to_string()),
            ("max_gap", self.max_gap.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sequences" => self.n_sequences = parse_value(key, value)?,
            "classes" => self.n_classes = parse_value(key, value)?,
            "frames" => self.frames = parse_value(key, value)?,
            "size" => self.size = parse_value(key, value)?,
            "channels" => self.channels = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "sprite_sigma" => self.sprite_sigma = parse_value(key, value)?,
            "margin" => self.margin = parse_value(key, value)?,
            "min_gesture" => self.min_gesture = parse_value(key, value)?,
            "max_gesture" => self.max_gesture = parse_value(key, value)?,
            "min_gap" => self.min_gap = parse_value(key, value)?,
            "max_gap" => self.max_gap = parse_value(key, value)?,
            _ => return Err(Error::usage(format!("unknown generator setting '{key}'"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = SynthConfig::default();
        for (k, v) in parse_kv(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.n_classes) {
            return Err(Error::usage(format!("classes must be in 2..={MAX_CLASSES}, got {}", self.n_classes)));
        }
        if self.size < 2 * self.margin + 2 || self.sprite_sigma <= 0.0 || self.sprite_sigma * 2.0 > self.size as f64 {
            return Err(Error::usage(format!(
                "sprite (sigma {}, margin {}) does not fit a {}x{} frame",
                self.sprite_sigma, self.margin, self.size, self.size
            )));
        }
        if self.channels == 0 || self.n_sequences == 0 {
            return Err(Error::usage("need at least one channel and one sequence"));
        }
        if self.min_gesture < 2 || self.min_gesture > self.max_gesture || self.min_gap > self.max_gap {
            return Err(Error::usage("gesture/gap length ranges are empty"));
        }
        if self.frames < self.max_gap + self.max_gesture {
            return Err(Error::usage(format!(
                "{} frames cannot hold one gap plus one gesture ({} + {})",
                self.frames, self.max_gap, self.max_gesture
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::usage("noise must be non-negative"));
        }
        Ok(())
    }
}

/// Sprite position in the unit square at progress `s` in `[0, 1]` of
/// gesture `class` (1-based). `u`, `v` in `[0, 1]` place the path (offset,
/// radius, phase). Classes come in pairs `(2k-1, 2k)` that trace the same
/// path in opposite directions.
pub fn trajectory(class: u16, s: f64, u: f64, v: f64) -> (f64, f64) {
    let s = s.clamp(0.0, 1.0);
    let (forward, pair) = (class % 2 == 1, (class as usize).div_ceil(2));
    let r = if forward { s } else { 1.0 - s };
    let (x, y) = match pair {
        1 => (r, u),
        2 => (u, r),
        3 => (r, 0.5 * r + 0.5 * u),
        4 => {
            let radius = 0.3 + 0.2 * u;
            let a = 2.0 * PI * (v + r);
            (0.5 + radius * a.cos(), 0.5 + radius * a.sin())
        }
        5 => (r, 1.0 - 0.5 * r - 0.5 * u),
        6 => (1.0 - (2.0 * r - 1.0).abs(), u),
        7 => (0.2 + 0.6 * u, 1.0 - (2.0 * r - 1.0).abs()),
        8 => (r, 0.2 + 0.6 * u + 0.2 * (4.0 * PI * r).sin()),
        9 => {
            if r < 0.5 {
                (0.3 * u, 2.0 * r)
            } else {
                (0.3 * u + 0.7 * (2.0 * r - 1.0), 1.0)
            }
        }
        _ => (r, 0.3 * u + 0.7 * (2.0 * r - 1.0).abs()),
    };
    (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))
}

/// Noise-free image of the sprite at unit-square position `pos`, as
/// `[C, H, W]` values.
pub fn render_frame(cfg: &SynthConfig, pos: (f64, f64)) -> Vec<f32> {
    let n = cfg.size;
    let span = (n - 1 - 2 * cfg.margin) as f64;
    let cx = cfg.margin as f64 + pos.0 * span;
    let cy = cfg.margin as f64 + pos.1 * span;
    let k = 1.0 / (2.0 * cfg.sprite_sigma * cfg.sprite_sigma);
    let mut plane = vec![0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            plane[i * n + j] = (-d2 * k).exp() as f32;
        }
    }
    plane.repeat(cfg.channels)
}

struct ClassBag {
    n: usize,
    items: Vec<u16>,
}

impl ClassBag {
    /// Draws classes from shuffled permutations of `1..=n`, so counts stay
    /// within one of each other.
    fn next(&mut self, rng: &mut ChaCha8Rng) -> u16 {
        if self.items.is_empty() {
            self.items = (1..=self.n as u16).collect();
            self.items.shuffle(rng);
        }
        self.items.pop().expect("refilled")
    }
}

/// Generates `cfg.n_sequences` labelled sequences. The generator settings
/// are recorded as provenance.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    generate(cfg).map(|(d, _)| d)
}

/// Also returns the sprite position of every frame.
fn generate(cfg: &SynthConfig) -> Result<(Dataset, Vec<Vec<(f64, f64)>>)> {
    cfg.validate()?;
    let mut tracks = Vec::with_capacity(cfg.n_sequences);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("positive sigma"));
    let mut bag = ClassBag {
        n: cfg.n_classes,
        items: Vec::new(),
    };
    let frame_len = cfg.channels * cfg.size * cfg.size;
    let mut sequences = Vec::with_capacity(cfg.n_sequences);
    for _ in 0..cfg.n_sequences {
        let mut positions = Vec::with_capacity(cfg.frames);
        let mut labels = Vec::with_capacity(cfg.frames);
        let mut annotations = Vec::new();
        let mut rest: Option<(f64, f64)> = None;
        loop {
            let t = positions.len();
            let gap = rng.random_range(cfg.min_gap..=cfg.max_gap);
            let dur = rng.random_range(cfg.min_gesture..=cfg.max_gesture);
            if t + gap + dur > cfg.frames {
                break;
            }
            let class = bag.next(&mut rng);
            let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
            let first = trajectory(class, 0.0, u, v);
            let moved = rng.random_range(0..=gap);
            for k in 0..gap {
                positions.push(if k < moved { rest.unwrap_or(first) } else { first });
                labels.push(SILENCE);
            }
            for k in 0..dur {
                positions.push(trajectory(class, k as f64 / (dur - 1) as f64, u, v));
                labels.push(class);
            }
            let start = (t + gap) as u32;
            annotations.push(GestureAnnotation {
                class,
                start,
                end: start + dur as u32 - 1,
            });
            rest = Some(trajectory(class, 1.0, u, v));
        }
        let tail = rest.unwrap_or_else(|| (rng.random(), rng.random()));
        while positions.len() < cfg.frames {
            positions.push(tail);
            labels.push(SILENCE);
        }
        let mut data = Vec::with_capacity(cfg.frames * frame_len);
        for &p in &positions {
            let mut f = render_frame(cfg, p);
            if let Some(nd) = &noise {
                for v in &mut f {
                    *v = (*v as f64 + nd.sample(&mut rng)).clamp(0.0, 1.0) as f32;
                }
            }
            data.extend(f);
        }
        let frames = Tensor::from_vec(&[cfg.frames, cfg.channels, cfg.size, cfg.size], data)?;
        sequences.push(VideoSequence::new(frames, labels, annotations)?);
        tracks.push(positions);
    }
    let mut provenance = vec![("generator".to_string(), "synthetic-motion".to_string())];
    provenance.extend(cfg.to_pairs());
    Ok((Dataset { provenance, sequences }, tracks))
}
