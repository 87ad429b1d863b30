use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar type a tensor can hold. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` for row/column-strided operands,
    /// `a` is m×k, `b` is k×n, `c` is m×n.
    fn gemm(dims: GemmDims, alpha: Self, a: Strided<'_, Self>, b: Strided<'_, Self>, beta: Self, c: StridedMut<'_, Self>);

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct GemmDims {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Strided<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

#[derive(Debug)]
pub struct StridedMut<'a, T> {
    pub data: &'a mut [T],
    pub rs: usize,
    pub cs: usize,
}

fn in_bounds(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> bool {
    rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < len
}

macro_rules! impl_real {
    ($t:ty, $gemm:ident) => {
        impl Real for $t {
            fn gemm(
                d: GemmDims,
                alpha: Self,
                a: Strided<'_, Self>,
                b: Strided<'_, Self>,
                beta: Self,
                c: StridedMut<'_, Self>,
            ) {
                if d.m == 0 || d.n == 0 {
                    return;
                }
                assert!(in_bounds(a.data.len(), d.m, d.k, a.rs, a.cs), "gemm: lhs out of bounds");
                assert!(in_bounds(b.data.len(), d.k, d.n, b.rs, b.cs), "gemm: rhs out of bounds");
                assert!(in_bounds(c.data.len(), d.m, d.n, c.rs, c.cs), "gemm: out out of bounds");
                // SAFETY: the three asserts above guarantee that every element
                // the kernel addresses lies inside the borrowed slices, and the
                // output slice is uniquely borrowed.
                unsafe {
                    matrixmultiply::$gemm(
                        d.m,
                        d.k,
                        d.n,
                        alpha,
                        a.data.as_ptr(),
                        a.rs as isize,
                        a.cs as isize,
                        b.data.as_ptr(),
                        b.rs as isize,
                        b.cs as isize,
                        beta,
                        c.data.as_mut_ptr(),
                        c.rs as isize,
                        c.cs as isize,
                    );
                }
            }

            fn of(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, sgemm);
impl_real!(f64, dgemm);
