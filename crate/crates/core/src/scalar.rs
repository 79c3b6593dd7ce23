//! Floating-point scalar abstraction shared by the tensor engine and every
//! numeric routine built on top of it.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Storage tag written into checkpoint tensor records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A real scalar the engine can compute with.
///
/// Beyond `num_traits::Float`, implementors provide a dense matrix product
/// kernel and a little-endian byte codec.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const DTYPE: DType;

    /// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), where `op(a)` is
    /// `m×k` and `op(b)` is `k×n`, all row-major. With `a_trans`, `a` holds
    /// the `k×m` matrix (likewise `b` holds `n×k` with `b_trans`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

/// (row stride, col stride) of an `rows×cols` operand stored row-major, or
/// stored as its `cols×rows` transpose when `trans`.
fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! check_gemm_lengths {
    ($m:expr, $k:expr, $n:expr, $a:expr, $b:expr, $c:expr) => {
        assert!($a.len() >= $m * $k, "gemm: lhs too short");
        assert!($b.len() >= $k * $n, "gemm: rhs too short");
        assert!($c.len() >= $m * $n, "gemm: output too short");
    };
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_trans: bool,
        b: &[f32],
        b_trans: bool,
        c: &mut [f32],
        accumulate: bool,
    ) {
        check_gemm_lengths!(m, k, n, a, b, c);
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = strides(m, k, a_trans);
        let (rsb, csb) = strides(k, n, b_trans);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: lengths checked above; strides describe in-bounds row-major views.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_trans: bool,
        b: &[f64],
        b_trans: bool,
        c: &mut [f64],
        accumulate: bool,
    ) {
        check_gemm_lengths!(m, k, n, a, b, c);
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = strides(m, k, a_trans);
        let (rsb, csb) = strides(k, n, b_trans);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: lengths checked above; strides describe in-bounds row-major views.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}
