use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Storage precision tag, written into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(DType::F32),
            8 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Floating-point element type of a tensor. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + DivAssign + Sum
{
    const DTYPE: DType;

    /// `c = alpha * a · b + beta * c` for row/column-strided operands.
    ///
    /// # Safety
    /// Every index reachable through `(m, k, n)` and the given strides must be
    /// in bounds of the respective pointers.
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

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;
    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

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

    fn to_le_bytes_vec(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<f32> {
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

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

    fn to_le_bytes_vec(values: &[f64]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<f64> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect()
    }
}

/// Lossy conversion from an `f64` literal.
#[inline]
pub fn cast<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 is representable in every Real")
}

/// Layout of one gemm operand: row and column strides.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows x cols` matrix.
    pub fn row_major(cols: usize) -> Self {
        Layout { rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a row-major matrix whose *stored* row length is `cols`.
    pub fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols as isize }
    }
}

fn extent(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * l.rs + (cols - 1) as isize * l.cs) as usize + 1
}

/// Safe gemm: `c[m,n] = alpha * a[m,k] · b[k,n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(m: usize, k: usize, n: usize, alpha: F, a: &[F], la: Layout, b: &[F], lb: Layout, beta: F, c: &mut [F], lc: Layout) {
    assert!(la.rs >= 0 && la.cs >= 0 && lb.rs >= 0 && lb.cs >= 0 && lc.rs >= 0 && lc.cs >= 0);
    assert!(extent(m, k, la) <= a.len(), "gemm: lhs out of bounds");
    assert!(extent(k, n, lb) <= b.len(), "gemm: rhs out of bounds");
    assert!(extent(m, n, lc) <= c.len(), "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: extents checked above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        )
    }
}
