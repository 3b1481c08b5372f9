//! Dense 4th-order tensors.
//!
//! Feature maps are stored NHWC `(batch, height, width, channels)` and kernels
//! `(kernel_h, kernel_w, in_channels, out_channels)`, both row-major. With that
//! kernel layout the data buffer read as a `(kh*kw*c_in) x c_out` matrix is the
//! reshaped weight matrix whose column `j` is filter `j`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (default) and `f64`.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Bits of precision, 32 or 64.
    const BITS: u32;

    /// Maximum intra-cluster deviation (relative to `max(1, |x|)`) accepted as
    /// "identical" before trimming.
    const IDENTICAL_TOL: f64;

    /// `c = alpha * a * b + beta * c` for strided row/column-major operands.
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * strides.0 + (cols - 1) as isize * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $bits:expr, $tol:expr, $gemm:path) => {
        impl Scalar for $t {
            const BITS: u32 = $bits;
            const IDENTICAL_TOL: f64 = $tol;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand's extent was bounds-checked above and
                // `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

// f32 cannot resolve 1e-7 at unit magnitude (one ulp is 1.19e-7).
impl_scalar!(f32, 32, 1e-6, matrixmultiply::sgemm);
impl_scalar!(f64, 64, 1e-7, matrixmultiply::dgemm);

/// Dense row-major 4th-order tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dim(
                format!("tensor data for shape {shape:?}"),
                expected,
                data.len(),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for a in 0..shape[0] {
            for b in 0..shape[1] {
                for c in 0..shape[2] {
                    for d in 0..shape[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, s1, s2, s3] = self.shape;
        ((idx[0] * s1 + idx[1]) * s2 + idx[2]) * s3 + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Number of elements in one leading-axis slice.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, i: usize) -> &[T] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "tensor add")?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "tensor add")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "tensor diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&x| x.as_f64() * x.as_f64()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    /// Keep only the listed indices along `axis`, in the given order.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        assert!(axis < 4);
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.shape[axis]) {
            return Err(Error::Input(format!(
                "index {bad} out of range for axis {axis} of extent {}",
                self.shape[axis]
            )));
        }
        let mut shape = self.shape;
        shape[axis] = indices.len();
        Ok(Tensor4::from_fn(shape, |mut idx| {
            idx[axis] = indices[idx[axis]];
            self.get(idx)
        }))
    }

    /// Concatenate along the last axis. All parts must share the leading three extents.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let [n, h, w, _] = first.shape;
        for p in parts {
            if p.shape[..3] != first.shape[..3] {
                return Err(Error::Shape(format!(
                    "concat extents {:?} vs {:?}",
                    &p.shape[..3],
                    &first.shape[..3]
                )));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape[3]).sum();
        let mut data = Vec::with_capacity(n * h * w * total);
        for pix in 0..n * h * w {
            for p in parts {
                let c = p.shape[3];
                data.extend_from_slice(&p.data[pix * c..(pix + 1) * c]);
            }
        }
        Ok(Tensor4 {
            shape: [n, h, w, total],
            data,
        })
    }

    /// Channel range `[start, start + len)` of the last axis.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.shape[3];
        if start + len > c {
            return Err(Error::dim("channel slice end", c, start + len));
        }
        let pixels = self.shape[0] * self.shape[1] * self.shape[2];
        let mut data = Vec::with_capacity(pixels * len);
        for pix in 0..pixels {
            data.extend_from_slice(&self.data[pix * c + start..pix * c + start + len]);
        }
        Ok(Tensor4 {
            shape: [self.shape[0], self.shape[1], self.shape[2], len],
            data,
        })
    }

    fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::<f32>::from_vec([1, 2, 2, 1], vec![0.0; 3]).is_err());
        assert!(Tensor4::<f32>::from_vec([1, 2, 2, 1], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Tensor4::<f64>::from_fn([2, 2, 2, 3], |i| (i[0] * 100 + i[1] * 10 + i[3]) as f64);
        let b = Tensor4::<f64>::from_fn([2, 2, 2, 2], |i| -((i[2] * 7 + i[3]) as f64));
        let c = Tensor4::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), [2, 2, 2, 5]);
        assert_eq!(c.channel_slice(0, 3).unwrap(), a);
        assert_eq!(c.channel_slice(3, 2).unwrap(), b);
    }

    #[test]
    fn select_reorders_and_rejects_out_of_range() {
        let t = Tensor4::<f32>::from_fn([1, 1, 1, 4], |i| i[3] as f32);
        let s = t.select(3, &[3, 0]).unwrap();
        assert_eq!(s.data(), &[3.0, 0.0]);
        assert!(t.select(3, &[4]).is_err());
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, &a, (k as isize, 1), &b, (n as isize, 1), 0.0, &mut c, (n as isize, 1));
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }
}
