//! Floating point element types supported by the engine.
//!
//! Training runs in `f32`; gradient checks run the very same code in `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    /// Short type label used in manifests and reports.
    const NAME: &'static str;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in scalar type")
    }

    /// `C <- alpha * A B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers must address matrices of the given extents and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided view of a matrix inside a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatRef {
    pub fn row_major(offset: usize, rows: usize, cols: usize) -> Self {
        MatRef {
            offset,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset
            + (self.rows - 1) * self.rs.unsigned_abs()
            + (self.cols - 1) * self.cs.unsigned_abs()
    }
}

/// Safe wrapper: `c[cm] = alpha * a[am] b[bm] + beta * c[cm]`.
pub(crate) fn gemm<F: Scalar>(
    alpha: F,
    a: &[F],
    am: MatRef,
    b: &[F],
    bm: MatRef,
    beta: F,
    c: &mut [F],
    cm: MatRef,
) {
    assert_eq!(am.cols, bm.rows, "gemm inner extent");
    assert_eq!(am.rows, cm.rows, "gemm row extent");
    assert_eq!(bm.cols, cm.cols, "gemm column extent");
    assert!(am.rs >= 0 && am.cs >= 0 && bm.rs >= 0 && bm.cs >= 0 && cm.rs >= 0 && cm.cs >= 0);
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    if am.cols == 0 {
        // Nothing to accumulate; honour beta only.
        for i in 0..cm.rows {
            for j in 0..cm.cols {
                let idx = cm.offset + i * cm.rs as usize + j * cm.cs as usize;
                c[idx] = if beta == F::zero() { F::zero() } else { c[idx] * beta };
            }
        }
        return;
    }
    assert!(am.max_index() < a.len() && bm.max_index() < b.len() && cm.max_index() < c.len());
    // SAFETY: every addressed element was bounds-checked via max_index above.
    unsafe {
        F::gemm_raw(
            cm.rows,
            am.cols,
            cm.cols,
            alpha,
            a.as_ptr().add(am.offset),
            am.rs,
            am.cs,
            b.as_ptr().add(bm.offset),
            bm.rs,
            bm.cs,
            beta,
            c.as_mut_ptr().add(cm.offset),
            cm.rs,
            cm.cs,
        );
    }
}
