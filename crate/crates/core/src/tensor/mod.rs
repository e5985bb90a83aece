//! Dense tensors with a reverse-mode differentiation tape.
//!
//! A [`Tensor`] is an immutable, shape-carrying buffer. Computations are
//! recorded on a [`Graph`]; calling [`Graph::backward`] on a scalar output
//! consumes the graph and returns gradients for every leaf that asked for one.
//! Broadcasting is limited to the row-bias pattern (`add_row`) and scalar
//! scaling.

mod graph;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use graph::{Grads, Graph, Var};
pub use params::{ParamGrads, Parameters};

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// Payload width in bytes (4 or 8).
    const BYTES: usize;

    /// `c = alpha * a @ b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices
    /// of the given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Float for f32 {
    const BYTES: usize = 4;

    unsafe fn gemm(
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

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Float for f64 {
    const BYTES: usize = 8;

    unsafe fn gemm(
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

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major matrix view used by [`gemm_acc`]: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        MatView {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        MatView {
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `out += a @ b` where `out` is row-major.
pub(crate) fn gemm_acc<F: Float>(a: &[F], av: MatView, b: &[F], bv: MatView, out: &mut [F]) {
    debug_assert_eq!(av.cols, bv.rows);
    debug_assert_eq!(out.len(), av.rows * bv.cols);
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: views were built from the buffers' own dimensions above.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            F::one(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Immutable dense tensor. Cloning shares the underlying buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![F::zero(); numel]),
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::c(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut Vec<F> {
        Arc::make_mut(&mut self.data)
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.to_vec()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape("expected 2-d tensor", s, &[0, 0])),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> F {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        let cols = *self.shape.last().expect("row() on scalar");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                    .collect(),
            ),
        }
    }
}

/// `outer, len, inner` decomposition of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
