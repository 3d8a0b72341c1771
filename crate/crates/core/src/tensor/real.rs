use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element dtype tag, matching the archive encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
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

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar element type of every tensor: `f32` for training, `f64` for verification.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a @ b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `exp(self) - 1` in a form the compiler can vectorize. Full libm
    /// accuracy for 64-bit; within a few ulp for 32-bit.
    fn expm1_fast(self) -> Self;

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path, $expm1:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n);
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                let span = |rs: isize, cs: isize, r: usize, col: usize| {
                    (r as isize - 1) * rs + (col as isize - 1) * cs + 1
                };
                assert!(a.len() as isize >= span(rsa, csa, m, k));
                assert!(b.len() as isize >= span(rsb, csb, k, n));
                // SAFETY: extents of a, b and c were checked against the strides above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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

            #[inline(always)]
            fn expm1_fast(self) -> Self {
                $expm1(self)
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

/// Branch-free `expm1` for `f32`: reduce by `k ln 2`, degree-7 Taylor on
/// `|r| <= ln2 / 2`, rescale by `2^k` built from the exponent bits.
#[inline(always)]
fn expm1_f32(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.clamp(-87.0, 88.0);
    let k = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let p = r * (1.0
        + r * (1.0 / 2.0
            + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    let scale = f32::from_bits(((k as i32 + 127) as u32) << 23);
    if k == 0.0 {
        p
    } else {
        scale * p + (scale - 1.0)
    }
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm, expm1_f32);
impl_real!(f64, DType::F64, matrixmultiply::dgemm, f64::exp_m1);
