//! Safe strided matrix views over `Real::gemm_raw`.

use super::Real;

/// A read-only strided 2-D view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T> View<'a, T> {
    /// Row-major `rows x cols` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "view exceeds buffer");
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    /// Transpose when `flag` is set.
    pub fn t_if(self, flag: bool) -> Self {
        if flag {
            self.t()
        } else {
            self
        }
    }
}

/// Destination view; `transposed` writes the product into a buffer laid out
/// as its transpose.
pub(crate) struct ViewMut<'a, T> {
    data: &'a mut [T],
    rs: isize,
    cs: isize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize, transposed: bool) -> Self {
        assert!(data.len() >= rows * cols, "view exceeds buffer");
        if transposed {
            Self {
                data,
                rs: 1,
                cs: rows as isize,
            }
        } else {
            Self {
                data,
                rs: cols as isize,
                cs: 1,
            }
        }
    }
}

/// `c = a * b + beta * c`.
pub(crate) fn gemm<T: Real>(a: View<'_, T>, b: View<'_, T>, c: ViewMut<'_, T>, beta: T) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // nothing to accumulate
        if beta == T::zero() {
            for i in 0..m {
                for j in 0..n {
                    c.data[(i as isize * c.rs + j as isize * c.cs) as usize] = T::zero();
                }
            }
        }
        return;
    }
    // SAFETY: View/ViewMut constructors checked that every addressed element
    // lies inside the borrowed slices.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            c.rs,
            c.cs,
        );
    }
}
