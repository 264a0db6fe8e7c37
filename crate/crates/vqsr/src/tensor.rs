//! Dense row-major tensors over f32 (training precision) or f64 (wide
//! precision for gradient checks). A scalar is a rank-0 tensor.

use crate::error::{Error, Result};
use rand::Rng;

/// Floating-point element type. Implemented for `f32` and `f64` only; the
/// `LinalgScalar` bound routes matrix products through ndarray's fast path.
pub trait Real:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + ndarray::LinalgScalar
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn maxv(self, o: Self) -> Self;
    fn minv(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn maxv(self, o: Self) -> Self {
                <$t>::max(self, o)
            }
            fn minv(self, o: Self) -> Self {
                <$t>::min(self, o)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{numel} elements for shape {shape:?}"),
                data.len(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::ZERO; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Uniform random values in `[lo, hi)`.
    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    /// Gaussian random values, mean 0, given standard deviation (Box-Muller).
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| F::from_f64(std * randn_f64(rng))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Scalar extraction; the tensor must hold exactly one element.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::shape("Tensor::item", "1 element", self.data.len()));
        }
        Ok(self.data[0])
    }

    /// Interpret as NCHW and return the four dims.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            other => Err(Error::shape("dims4", "rank-4 tensor", format!("{other:?}"))),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", format!("{shape:?}"), self.data.len()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard-normal draw via Box-Muller; kept local so the sampled stream
/// depends only on the rng sequence, not on a distributions crate version.
pub fn randn_f64<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

/// Row-major offset for an NCHW tensor.
#[inline]
pub fn idx4(c_dim: usize, h_dim: usize, w_dim: usize, n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * c_dim + c) * h_dim + h) * w_dim + w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_mismatched_data_len() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(2.5f64);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.item().unwrap(), 2.5);
    }

    #[test]
    fn randn_moments_are_sane() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::<f64>::randn(vec![20000], 1.0, &mut rng);
        let mean: f64 = t.iter().sum::<f64>() / t.numel() as f64;
        let var: f64 = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn idx4_is_row_major() {
        // shape [2, 3, 4, 5]
        assert_eq!(idx4(3, 4, 5, 0, 0, 0, 0), 0);
        assert_eq!(idx4(3, 4, 5, 0, 0, 0, 1), 1);
        assert_eq!(idx4(3, 4, 5, 0, 0, 1, 0), 5);
        assert_eq!(idx4(3, 4, 5, 0, 1, 0, 0), 20);
        assert_eq!(idx4(3, 4, 5, 1, 0, 0, 0), 60);
    }
}
