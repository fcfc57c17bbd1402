//! Thin strided wrapper over `matrixmultiply::dgemm`.

/// Read-only strided view of a row-major matrix.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = a * b + beta * c`, with `c` dense row-major `a.rows x b.cols`.
pub fn matmul(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "inner dimensions disagree");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: bounds are checked above; strides describe in-bounds views of
    // the borrowed slices and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_with_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1., 2., 3., 4., 5., 6.];
        let b = [1., 0., 0., 1., 1., 1.];
        let mut c = [0.0; 4];
        matmul(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 2), &mut c, 0.0);
        assert_eq!(c, [4., 5., 10., 11.]);

        // a^T a is 3x3
        let mut g = [0.0; 9];
        matmul(MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), &mut g, 0.0);
        assert_eq!(g, [17., 22., 27., 22., 29., 36., 27., 36., 45.]);

        // accumulate
        matmul(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 2), &mut c, 1.0);
        assert_eq!(c, [8., 10., 20., 22.]);
    }
}
