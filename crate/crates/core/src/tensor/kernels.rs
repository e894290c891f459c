//! Bounds-checked wrapper around the strided GEMM kernel.

use super::Real;

/// A strided `rows × cols` window into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Row-major contiguous matrix.
    pub fn rm(offset: usize, rows: usize, cols: usize) -> Self {
        View {
            offset,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Row-major with a custom row stride.
    pub fn strided(offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        View {
            offset,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm<F: Real>(
    alpha: F,
    a: &[F],
    av: View,
    b: &[F],
    bv: View,
    beta: F,
    c: &mut [F],
    cv: View,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    assert!(av.last() < a.len() && bv.last() < b.len() && cv.last() < c.len());
    // SAFETY: the extreme strided index of every operand was checked above
    // and all strides are non-negative.
    unsafe {
        F::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views_match_naive_product() {
        // a: 2x3, b stored as 2x3 and used transposed -> 2x2.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, -1.0, 2.0, 1.0, 0.0];
        let mut c = [0.0f64; 4];
        gemm(
            1.0,
            &a,
            View::rm(0, 2, 3),
            &b,
            View::rm(0, 2, 3).t(),
            0.0,
            &mut c,
            View::rm(0, 2, 2),
        );
        assert_eq!(c, [-2.0, 4.0, -2.0, 13.0]);
    }
}
