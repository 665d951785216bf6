use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type of the numeric core.
///
/// Models train in `f32`; gradient verification runs the same code in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` for strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping `m x k`, `k x n`
    /// and `m x n` matrices.
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Read-only view of a row-major (possibly column-sliced) matrix.
#[derive(Clone, Copy)]
pub struct MatRef<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    /// Distance between consecutive rows in `data`.
    pub row_stride: usize,
    pub transposed: bool,
}

impl<'a, F: Real> MatRef<'a, F> {
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            transposed: false,
        }
    }

    /// Columns `start..start + width` of a row-major `rows x stride` matrix.
    pub fn cols_of(data: &'a [F], rows: usize, stride: usize, start: usize, width: usize) -> Self {
        MatRef {
            data: &data[start..],
            rows,
            cols: width,
            row_stride: stride,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        let rs = self.row_stride as isize;
        if self.transposed {
            (1, rs)
        } else {
            (rs, 1)
        }
    }
}

/// `out = a * b` (or `out += a * b` when `accumulate`), `out` row-major with
/// row stride `out_stride`.
pub fn gemm<F: Real>(a: MatRef<F>, b: MatRef<F>, out: &mut [F], out_stride: usize, accumulate: bool) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "gemm inner dimension");
    if m == 0 || n == 0 {
        return;
    }
    assert!(out.len() >= (m - 1) * out_stride + n, "gemm output too small");
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                out[r * out_stride..r * out_stride + n].fill(F::zero());
            }
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: shapes and strides were derived from slices checked above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            out_stride as isize,
            1,
        );
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn mat(&self) -> MatRef<'_, F> {
        MatRef::new(&self.data, self.rows(), self.cols())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale_assign(&mut self, s: F) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn convert<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }

    /// Rows `start..end` of the matrix view.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor<F> {
        let c = self.cols();
        let mut shape = vec![end - start];
        shape.push(c);
        Tensor {
            shape,
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Mean over rows of the matrix view.
    pub fn mean_rows(&self) -> Vec<F> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o = *o + x;
            }
        }
        let n = F::of(r.max(1) as f64);
        out.iter_mut().for_each(|o| *o = *o / n);
        out
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        self.convert()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut out = vec![0.0; 8];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), &mut out, 4, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(out[i * 4 + j], want);
            }
        }
        // (b^T a^T)^T == a b
        let mut out_t = vec![0.0; 8];
        gemm(MatRef::new(&b, 3, 4).t(), MatRef::new(&a, 2, 3).t(), &mut out_t, 2, false);
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(out_t[j * 2 + i], out[i * 4 + j]);
            }
        }
    }

    #[test]
    fn column_slices_multiply() {
        // 2x4 matrix, use columns 2..4
        let a = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let id = vec![1.0f32, 0.0, 0.0, 1.0];
        let mut out = vec![0.0f32; 4];
        gemm(MatRef::cols_of(&a, 2, 4, 2, 2), MatRef::new(&id, 2, 2), &mut out, 2, false);
        assert_eq!(out, vec![3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn shape_checked() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert_eq!((t.rows(), t.cols()), (2, 3));
        assert!(t.reshape(&[4]).is_err());
    }
}
