//! Raw slice kernels behind the differentiable convolution ops.

use crate::scalar::{gemm, MatRef, Scalar};

/// Geometry of a batched 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Samples processed per gemm call; keeps the column matrix reasonably wide.
    fn chunk(&self) -> usize {
        (4096 / self.positions().max(1)).clamp(1, self.batch.max(1))
    }
}

/// Output columns `lo..hi` whose tap at offset `kj` reads inside a row of
/// width `w`.
fn valid_cols(g: &Conv2dGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(g.wo);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo).max(lo);
    (lo, hi)
}

fn im2col<F: Scalar>(g: &Conv2dGeom, x: &[F], cols: &mut [F], col_stride: usize, col_off: usize) {
    let k = g.k;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * col_stride + col_off..row * col_stride + col_off + g.positions()];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.ho {
                    let ii = (oi + ki).wrapping_sub(g.pad);
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii >= g.h {
                        line.fill(F::zero());
                        continue;
                    }
                    line[..lo].fill(F::zero());
                    line[hi..].fill(F::zero());
                    let s0 = ii * g.w + lo + kj - g.pad;
                    line[lo..hi].copy_from_slice(&plane[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im<F: Scalar>(g: &Conv2dGeom, cols: &[F], col_stride: usize, col_off: usize, dx: &mut [F]) {
    let k = g.k;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * col_stride + col_off..row * col_stride + col_off + g.positions()];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.ho {
                    let ii = (oi + ki).wrapping_sub(g.pad);
                    if ii >= g.h {
                        continue;
                    }
                    let s0 = ii * g.w + lo + kj - g.pad;
                    let dst = &mut plane[s0..s0 + (hi - lo)];
                    for (d, v) in dst.iter_mut().zip(&src[oi * g.wo + lo..oi * g.wo + hi]) {
                        *d = *d + *v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Scalar>(g: &Conv2dGeom, x: &[F], kern: &[F]) -> Vec<F> {
    let (p, pk) = (g.positions(), g.patch());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut out = vec![F::zero(); g.batch * out_sz];
    let chunk = g.chunk();
    let mut cols = vec![F::zero(); pk * chunk * p];
    let mut tmp = vec![F::zero(); g.c_out * chunk * p];
    let mut start = 0;
    while start < g.batch {
        let cnt = chunk.min(g.batch - start);
        let width = cnt * p;
        for s in 0..cnt {
            let n = start + s;
            im2col(g, &x[n * in_sz..(n + 1) * in_sz], &mut cols, width, s * p);
        }
        gemm(
            F::one(),
            kern,
            MatRef::row_major(0, g.c_out, pk),
            &cols,
            MatRef::row_major(0, pk, width),
            F::zero(),
            &mut tmp,
            MatRef::row_major(0, g.c_out, width),
        );
        for s in 0..cnt {
            let n = start + s;
            for co in 0..g.c_out {
                out[n * out_sz + co * p..n * out_sz + (co + 1) * p]
                    .copy_from_slice(&tmp[co * width + s * p..co * width + (s + 1) * p]);
            }
        }
        start += cnt;
    }
    out
}

/// Accumulates kernel and input gradients.
pub(crate) fn conv2d_backward<F: Scalar>(
    g: &Conv2dGeom,
    x: &[F],
    kern: &[F],
    dout: &[F],
    mut dkern: Option<&mut [F]>,
    mut dx: Option<&mut [F]>,
) {
    let (p, pk) = (g.positions(), g.patch());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let chunk = g.chunk();
    let mut cols = vec![F::zero(); pk * chunk * p];
    let mut dtmp = vec![F::zero(); g.c_out * chunk * p];
    let mut start = 0;
    while start < g.batch {
        let cnt = chunk.min(g.batch - start);
        let width = cnt * p;
        for s in 0..cnt {
            let n = start + s;
            for co in 0..g.c_out {
                dtmp[co * width + s * p..co * width + (s + 1) * p]
                    .copy_from_slice(&dout[n * out_sz + co * p..n * out_sz + (co + 1) * p]);
            }
        }
        if let Some(dk) = dkern.as_deref_mut() {
            for s in 0..cnt {
                let n = start + s;
                im2col(g, &x[n * in_sz..(n + 1) * in_sz], &mut cols, width, s * p);
            }
            gemm(
                F::one(),
                &dtmp,
                MatRef::row_major(0, g.c_out, width),
                &cols,
                MatRef::row_major(0, pk, width).t(),
                F::one(),
                dk,
                MatRef::row_major(0, g.c_out, pk),
            );
        }
        if let Some(dxs) = dx.as_deref_mut() {
            gemm(
                F::one(),
                kern,
                MatRef::row_major(0, g.c_out, pk).t(),
                &dtmp,
                MatRef::row_major(0, g.c_out, width),
                F::zero(),
                &mut cols,
                MatRef::row_major(0, pk, width),
            );
            for s in 0..cnt {
                let n = start + s;
                col2im(g, &cols, width, s * p, &mut dxs[n * in_sz..(n + 1) * in_sz]);
            }
        }
        start += cnt;
    }
}

/// Geometry of a temporal cross-correlation over `[batch, frames, channels, positions]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TConvGeom {
    pub batch: usize,
    pub t_in: usize,
    pub m: usize,
    pub pos: usize,
    pub k_out: usize,
    pub len: usize,
    pub pad_left: usize,
    pub t_out: usize,
}

impl TConvGeom {
    /// Input frame feeding output frame `t` through tap `l`, if inside the sequence.
    fn src(&self, t: usize, l: usize) -> Option<usize> {
        let s = t as isize + l as isize - self.pad_left as isize;
        (s >= 0 && (s as usize) < self.t_in).then_some(s as usize)
    }

    /// Range of output frames whose tap `l` lands inside the input.
    fn valid_out(&self, l: usize) -> (usize, usize) {
        let lo = (self.pad_left as isize - l as isize).max(0) as usize;
        let hi = ((self.t_in + self.pad_left) as isize - l as isize).clamp(0, self.t_out as isize) as usize;
        (lo.min(hi), hi)
    }

    fn tap(&self, l: usize) -> MatRef {
        // kernel layout [k_out, m, len]
        MatRef {
            offset: l,
            rows: self.k_out,
            cols: self.m,
            rs: (self.m * self.len) as isize,
            cs: self.len as isize,
        }
    }
}

pub(crate) fn tconv_forward<F: Scalar>(g: &TConvGeom, x: &[F], kern: &[F]) -> Vec<F> {
    let in_frame = g.m * g.pos;
    let out_frame = g.k_out * g.pos;
    let mut out = vec![F::zero(); g.batch * g.t_out * out_frame];
    for b in 0..g.batch {
        let xb = b * g.t_in * in_frame;
        let ob = b * g.t_out * out_frame;
        for l in 0..g.len {
            if g.pos == 1 {
                // out[b] (t_out x k_out) += X_shift (rows x m) * tap^T
                let (lo, hi) = g.valid_out(l);
                if lo >= hi {
                    continue;
                }
                let s0 = lo + l - g.pad_left;
                gemm(
                    F::one(),
                    x,
                    MatRef::row_major(xb + s0 * g.m, hi - lo, g.m),
                    kern,
                    g.tap(l).t(),
                    F::one(),
                    &mut out,
                    MatRef::row_major(ob + lo * g.k_out, hi - lo, g.k_out),
                );
            } else {
                for t in 0..g.t_out {
                    let Some(s) = g.src(t, l) else { continue };
                    gemm(
                        F::one(),
                        kern,
                        g.tap(l),
                        x,
                        MatRef::row_major(xb + s * in_frame, g.m, g.pos),
                        F::one(),
                        &mut out,
                        MatRef::row_major(ob + t * out_frame, g.k_out, g.pos),
                    );
                }
            }
        }
    }
    out
}

pub(crate) fn tconv_backward<F: Scalar>(
    g: &TConvGeom,
    x: &[F],
    kern: &[F],
    dout: &[F],
    mut dkern: Option<&mut [F]>,
    mut dx: Option<&mut [F]>,
) {
    let in_frame = g.m * g.pos;
    let out_frame = g.k_out * g.pos;
    for b in 0..g.batch {
        let xb = b * g.t_in * in_frame;
        let ob = b * g.t_out * out_frame;
        for l in 0..g.len {
            if g.pos == 1 {
                let (lo, hi) = g.valid_out(l);
                if lo >= hi {
                    continue;
                }
                let s0 = lo + l - g.pad_left;
                let rows = hi - lo;
                if let Some(dk) = dkern.as_deref_mut() {
                    // tap (k_out x m) += dOut^T (k_out x rows) * X_shift (rows x m)
                    gemm(
                        F::one(),
                        dout,
                        MatRef::row_major(ob + lo * g.k_out, rows, g.k_out).t(),
                        x,
                        MatRef::row_major(xb + s0 * g.m, rows, g.m),
                        F::one(),
                        dk,
                        g.tap(l),
                    );
                }
                if let Some(dxs) = dx.as_deref_mut() {
                    // dX_shift (rows x m) += dOut (rows x k_out) * tap (k_out x m)
                    gemm(
                        F::one(),
                        dout,
                        MatRef::row_major(ob + lo * g.k_out, rows, g.k_out),
                        kern,
                        g.tap(l),
                        F::one(),
                        dxs,
                        MatRef::row_major(xb + s0 * g.m, rows, g.m),
                    );
                }
            } else {
                for t in 0..g.t_out {
                    let Some(s) = g.src(t, l) else { continue };
                    let dmat = MatRef::row_major(ob + t * out_frame, g.k_out, g.pos);
                    let xmat = MatRef::row_major(xb + s * in_frame, g.m, g.pos);
                    if let Some(dk) = dkern.as_deref_mut() {
                        gemm(F::one(), dout, dmat, x, xmat.t(), F::one(), dk, g.tap(l));
                    }
                    if let Some(dxs) = dx.as_deref_mut() {
                        gemm(F::one(), kern, g.tap(l).t(), dout, dmat, F::one(), dxs, xmat);
                    }
                }
            }
        }
    }
}
