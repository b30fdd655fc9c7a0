//! Dense row-major tensors.
//!
//! Storage is generic over [`Real`] so the same kernels run in 32-bit for
//! training and in 64-bit for finite-difference checks. All arithmetic inside
//! kernels is carried out in `f64` and rounded once on store.

use std::fmt;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;

/// Element type of a [`Tensor`].
pub trait Real:
    Copy + Default + PartialEq + PartialOrd + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor from `f64` values, rejecting non-finite input.
    pub fn from_f64s(shape: &[usize], data: &[f64]) -> Result<Self> {
        let t = Self::from_vec(shape, data.iter().map(|&x| T::from_f64(x)).collect())?;
        t.ensure_finite("from_f64s")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::default(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::from_f64(1.0);
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row count when viewed as a matrix; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one extent")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Sum of squares accumulated in 64-bit.
    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64() * x.to_f64()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl Tensor<f32> {
    /// Little-endian byte image of the data.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }
}

pub(crate) fn expect_2d<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Plain matrix product `a·b` with `f64` accumulation.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_2d(a, "matmul")?;
    let (k2, n) = expect_2d(b, "matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let out = kernels::matmul_nn(a.data(), b.data(), m, k, n);
    let t = Tensor::from_vec(&[m, n], out.iter().map(|&x| T::from_f64(x)).collect())?;
    t.ensure_finite("matmul")?;
    Ok(t)
}

/// Raw kernels over row-major slices. Results are `f64` so backward passes can
/// accumulate without rounding.
pub(crate) mod kernels {
    use super::Real;

    /// `a[m×k] · b[k×n]`
    pub fn matmul_nn<T: Real, U: Real>(a: &[T], b: &[U], m: usize, k: usize, n: usize) -> Vec<f64> {
        gemm(&widen(a), &widen(b), m, k, n)
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt<T: Real, U: Real>(a: &[T], b: &[U], m: usize, k: usize, n: usize) -> Vec<f64> {
        gemm(&widen(a), &transpose(b, n, k), m, k, n)
    }

    /// `a[k×m]ᵀ · b[k×n]`
    pub fn matmul_tn<T: Real, U: Real>(a: &[T], b: &[U], k: usize, m: usize, n: usize) -> Vec<f64> {
        gemm(&transpose(a, k, m), &widen(b), m, k, n)
    }

    fn widen<T: Real>(x: &[T]) -> Vec<f64> {
        x.iter().map(|v| v.to_f64()).collect()
    }

    /// `x[r×c]` → `[c×r]` in f64.
    fn transpose<T: Real>(x: &[T], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for (j, v) in x[i * c..(i + 1) * c].iter().enumerate() {
                out[j * r + i] = v.to_f64();
            }
        }
        out
    }

    const MR: usize = 4;
    const NR: usize = 8;

    /// `a[m×k] · b[k×n]`. Every output is summed over `p = 0..k` in order, so
    /// the result is bit-identical to the plain triple loop whatever the tiling.
    fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { gemm_avx2(a, b, m, k, n) };
        }
        gemm_portable(a, b, m, k, n)
    }

    /// Same code compiled with wider vectors. FMA stays disabled so rounding
    /// matches the portable path exactly.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn gemm_avx2(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        gemm_portable(a, b, m, k, n)
    }

    #[inline(always)]
    fn gemm_portable(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0f64; m * n];
        let (mt, nt) = (m - m % MR, n - n % NR);
        for i in (0..mt).step_by(MR) {
            let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
            for j in (0..nt).step_by(NR) {
                let mut acc = [[0.0f64; NR]; MR];
                for p in 0..k {
                    let bp: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile");
                    for r in 0..MR {
                        let ar = rows[r][p];
                        for q in 0..NR {
                            acc[r][q] += ar * bp[q];
                        }
                    }
                }
                for r in 0..MR {
                    c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(&acc[r]);
                }
            }
        }
        // ragged edges
        for i in 0..m {
            let cols = if i < mt { nt..n } else { 0..n };
            for j in cols {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    /// Four-way unrolled dot product; the fixed association order keeps results
    /// independent of the caller.
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let mut s = [0.0f64; 4];
        let chunks = n / 4;
        for c in 0..chunks {
            let i = c * 4;
            s[0] += a[i] * b[i];
            s[1] += a[i + 1] * b[i + 1];
            s[2] += a[i + 2] * b[i + 2];
            s[3] += a[i + 3] * b[i + 3];
        }
        let mut tail = 0.0;
        for i in chunks * 4..n {
            tail += a[i] * b[i];
        }
        (s[0] + s[1]) + (s[2] + s[3]) + tail
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = Rng::new(1);
        let a = Tensor::<f32>::randn(&[4, 4], 1.0, &mut rng);
        assert_eq!(matmul(&a, &Tensor::identity(4)).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = Tensor::<f32>::randn(&[7, 5], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[5, 3], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (g, w) in got.data().iter().zip(naive(&a, &b)) {
            assert!((*g as f64 - w).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatch_reports_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_kernels_agree() {
        let mut rng = Rng::new(3);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let nt = kernels::matmul_nt(a.data(), b.data(), 3, 4, 5);
        // explicit transpose of b
        let mut bt = vec![0.0; 20];
        for i in 0..5 {
            for j in 0..4 {
                bt[j * 5 + i] = b.data()[i * 4 + j];
            }
        }
        let nn = kernels::matmul_nn(a.data(), &bt, 3, 4, 5);
        for (x, y) in nt.iter().zip(&nn) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a.data()[i * 4 + j];
            }
        }
        let tn = kernels::matmul_tn(&at, &bt, 4, 3, 5);
        for (x, y) in tn.iter().zip(&nn) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::<f32>::from_vec(&[0, 2], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }
}
