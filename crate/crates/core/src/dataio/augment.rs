//! Online augmentation: one random affine warp and one temporal rescaling
//! per fragment.

use rand::Rng;

use crate::tensor::Tensor;

/// Vertical translation in pixels of a 64-pixel frame.
pub const DY_RANGE: (f64, f64) = (-5.0, 5.0);
/// Horizontal translation in pixels of a 64-pixel frame.
pub const DX_RANGE: (f64, f64) = (-10.0, 10.0);
/// Degrees.
pub const ROTATION_RANGE: (f64, f64) = (-2.0, 2.0);
/// Degrees.
pub const SHEAR_RANGE: (f64, f64) = (-2.0, 2.0);
pub const SCALE_RANGE: (f64, f64) = (1.0 / 1.1, 1.1);
pub const TIME_SCALE_RANGE: (f64, f64) = (1.0 / 1.2, 1.2);

/// Frame size the translation ranges refer to.
pub const REFERENCE_SIZE: f64 = 64.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub dy: f64,
    pub dx: f64,
    pub rotation: f64,
    pub shear: f64,
    pub scale: f64,
    /// Source frames advanced per output frame; 1.2 plays the video 20% faster.
    pub time_scale: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams::identity()
    }
}

fn within(v: f64, r: (f64, f64)) -> bool {
    v >= r.0 && v <= r.1
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            dy: 0.0,
            dx: 0.0,
            rotation: 0.0,
            shear: 0.0,
            scale: 1.0,
            time_scale: 1.0,
        }
    }

    /// Uniform draws for translations and angles; log-uniform for both
    /// scale factors so shrinking and enlarging are equally likely.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let log_uniform = |rng: &mut R, r: (f64, f64)| {
            let v = rng.random_range(r.0.ln()..=r.1.ln()).exp();
            v.clamp(r.0, r.1)
        };
        AugmentParams {
            dy: rng.random_range(DY_RANGE.0..=DY_RANGE.1),
            dx: rng.random_range(DX_RANGE.0..=DX_RANGE.1),
            rotation: rng.random_range(ROTATION_RANGE.0..=ROTATION_RANGE.1),
            shear: rng.random_range(SHEAR_RANGE.0..=SHEAR_RANGE.1),
            scale: log_uniform(rng, SCALE_RANGE),
            time_scale: log_uniform(rng, TIME_SCALE_RANGE),
        }
    }

    pub fn in_range(&self) -> bool {
        within(self.dy, DY_RANGE)
            && within(self.dx, DX_RANGE)
            && within(self.rotation, ROTATION_RANGE)
            && within(self.shear, SHEAR_RANGE)
            && within(self.scale, SCALE_RANGE)
            && within(self.time_scale, TIME_SCALE_RANGE)
    }

    /// Rescales the translations from 64-pixel frames to `size`-pixel frames.
    pub fn for_frame_size(mut self, size: usize) -> Self {
        let f = size as f64 / REFERENCE_SIZE;
        self.dx *= f;
        self.dy *= f;
        self
    }

    /// Source frames needed to produce `out` output frames.
    pub fn source_frames(&self, out: usize) -> usize {
        if out == 0 {
            return 0;
        }
        ((out - 1) as f64 * self.time_scale).ceil() as usize + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Per output pixel: source row/col of the top-left tap and weights, or
/// `None` outside the source frame.
fn sampling_map(h: usize, w: usize, p: &AugmentParams, interp: Interp) -> Vec<Option<(usize, usize, f32, f32)>> {
    let (th, sh) = (p.rotation.to_radians(), p.shear.to_radians().tan());
    let (c, s) = (th.cos(), th.sin());
    // M = R * Shear * Scale acting on (x, y) column vectors.
    let m = [
        [c * p.scale, (c * sh - s) * p.scale],
        [s * p.scale, (s * sh + c) * p.scale],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (u, v) = (j as f64 - cx - p.dx, i as f64 - cy - p.dy);
            let x = inv[0][0] * u + inv[0][1] * v + cx;
            let y = inv[1][0] * u + inv[1][1] * v + cy;
            out.push(match interp {
                Interp::Nearest => {
                    let (xr, yr) = (x.round(), y.round());
                    (xr >= 0.0 && yr >= 0.0 && xr < w as f64 && yr < h as f64)
                        .then(|| (yr as usize, xr as usize, 0.0, 0.0))
                }
                Interp::Bilinear => {
                    // Taps outside the frame read zero; keep points within one pixel.
                    (x > -1.0 && y > -1.0 && x < w as f64 && y < h as f64).then(|| {
                        let (x0, y0) = (x.floor(), y.floor());
                        // Encode a -1 column/row as usize::MAX, handled by `tap`.
                        let idx = |v: f64| if v < 0.0 { usize::MAX } else { v as usize };
                        (idx(y0), idx(x0), (y - y0) as f32, (x - x0) as f32)
                    })
                }
            });
        }
    }
    out
}

/// Warps every frame with the affine map of `params` (translate, rotate,
/// shear, scale about the frame centre; zero fill) and resamples time:
/// output frame `t` reads source position `t * time_scale`, linearly
/// interpolated for pixels and nearest for labels, clamped at the last
/// frame. `frames` is `[T, C, H, W]`.
pub fn augment(
    frames: &Tensor<f32>,
    labels: &[u16],
    params: &AugmentParams,
    out_frames: usize,
    interp: Interp,
) -> (Tensor<f32>, Vec<u16>) {
    let s = frames.shape();
    let (t_in, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(labels.len(), t_in, "one label per frame");
    assert!(t_in > 0, "augment needs at least one frame");
    let plane = h * w;
    let frame = c * plane;
    let src = frames.data();

    // Temporal resampling first: cheap and independent of the warp.
    let mut timed = Vec::with_capacity(out_frames * frame);
    let mut out_labels = Vec::with_capacity(out_frames);
    for t in 0..out_frames {
        let pos = (t as f64 * params.time_scale).min((t_in - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t_in - 1);
        let a = (pos - lo as f64) as f32;
        out_labels.push(labels[(pos.round() as usize).min(t_in - 1)]);
        let (fl, fh) = (&src[lo * frame..(lo + 1) * frame], &src[hi * frame..(hi + 1) * frame]);
        if a == 0.0 {
            timed.extend_from_slice(fl);
        } else {
            timed.extend(fl.iter().zip(fh).map(|(x, y)| x * (1.0 - a) + y * a));
        }
    }

    let identity = params.dx == 0.0 && params.dy == 0.0 && params.rotation == 0.0 && params.shear == 0.0 && params.scale == 1.0;
    if identity {
        let t = Tensor::from_vec(&[out_frames, c, h, w], timed).expect("shape");
        return (t, out_labels);
    }
    let map = sampling_map(h, w, params, interp);
    let mut out = vec![0f32; out_frames * frame];
    for (src_plane, dst_plane) in timed.chunks(plane).zip(out.chunks_mut(plane)) {
        let tap = |r: usize, q: usize| -> f32 {
            if r < h && q < w {
                src_plane[r * w + q]
            } else {
                0.0
            }
        };
        for (o, m) in dst_plane.iter_mut().zip(&map) {
            let Some((r, q, fy, fx)) = *m else { continue };
            *o = match interp {
                Interp::Nearest => src_plane[r * w + q],
                Interp::Bilinear => {
                    let (r1, q1) = (r.wrapping_add(1), q.wrapping_add(1));
                    let top = tap(r, q) * (1.0 - fx) + tap(r, q1) * fx;
                    let bottom = tap(r1, q) * (1.0 - fx) + tap(r1, q1) * fx;
                    top * (1.0 - fy) + bottom * fy
                }
            };
        }
    }
    (Tensor::from_vec(&[out_frames, c, h, w], out).expect("shape"), out_labels)
}
