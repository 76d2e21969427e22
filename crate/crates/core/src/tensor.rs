//! Dense row-major tensors.
//!
//! Feature maps are rank-5 tensors laid out as `(B, C, T, H, W)` with `W`
//! varying fastest. Kernels and classifier weights reuse the same storage with
//! lower ranks: channel-wise spatial kernels are `(C, 3, 3)`, channel-wise
//! temporal kernels `(C, 3)`, pointwise kernels `(C_out, C_in)` with a `(C_out)`
//! bias.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

/// Floating point element type. `f32` is the storage and training type, `f64`
/// the reference type used by gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shape of a rank-5 feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims5 {
    pub b: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims5 {
    pub fn new(b: usize, c: usize, t: usize, h: usize, w: usize) -> Self {
        Self { b, c, t, h, w }
    }

    pub fn numel(&self) -> usize {
        self.b * self.c * self.t * self.h * self.w
    }

    /// Elements in one `(H, W)` frame.
    pub fn frame(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one `(T, H, W)` volume, i.e. one channel of one sample.
    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Elements in one sample.
    pub fn sample(&self) -> usize {
        self.c * self.volume()
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Self { c, ..*self }
    }

    pub fn as_vec(&self) -> Vec<usize> {
        vec![self.b, self.c, self.t, self.h, self.w]
    }

    pub fn index(&self, b: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        (((b * self.c + c) * self.t + t) * self.h + h) * self.w + w
    }
}

impl Display for Dims5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{},{})", self.b, self.c, self.t, self.h, self.w)
    }
}

/// Dense tensor with an arbitrary shape. A rank-0 shape holds one scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Rank-5 `(B, C, T, H, W)` tensor.
pub type FeatureMap<T = f32> = Tensor<T>;

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("len", &self.data.len())
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel_of(shape)],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::dim(
                "from_vec",
                format!("shape {shape:?} needs {} values, got {}", numel_of(shape), data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    /// Rank-5 feature map; every dimension must be at least one.
    pub fn feature_map(dims: Dims5, data: Vec<T>) -> Result<Self> {
        let shape = dims.as_vec();
        if shape.contains(&0) {
            return Err(Error::dim("feature_map", format!("zero-sized dims {dims}")));
        }
        Self::from_vec(&shape, data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel_of(shape)).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The `(B, C, T, H, W)` view of a rank-5 tensor.
    pub fn dims5(&self) -> Result<Dims5> {
        match *self.shape.as_slice() {
            [b, c, t, h, w] => Ok(Dims5 { b, c, t, h, w }),
            _ => Err(Error::dim(
                "dims5",
                format!("expected rank-5 feature map, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the samples selected by `indices` along the leading axis.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        let Some((&b, rest)) = self.shape.split_first() else {
            return Err(Error::dim("select_batch", "rank-0 tensor has no batch axis"));
        };
        let per = numel_of(rest);
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= b {
                return Err(Error::dim("select_batch", format!("index {i} out of {b}")));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_batch", "no tensors"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::dim(
                    "concat_batch",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            b += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = b;
        Ok(Self { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_map_rejects_zero_dims() {
        let err = FeatureMap::<f32>::feature_map(Dims5::new(1, 0, 1, 1, 1), vec![]);
        assert!(err.is_err());
    }

    #[test]
    fn index_is_row_major_w_fastest() {
        let d = Dims5::new(2, 3, 4, 5, 6);
        assert_eq!(d.index(0, 0, 0, 0, 1), 1);
        assert_eq!(d.index(0, 0, 0, 1, 0), 6);
        assert_eq!(d.index(0, 0, 1, 0, 0), 30);
        assert_eq!(d.index(0, 1, 0, 0, 0), 120);
        assert_eq!(d.index(1, 0, 0, 0, 0), 360);
        assert_eq!(d.index(1, 2, 3, 4, 5), d.numel() - 1);
    }

    #[test]
    fn select_and_concat_batch() {
        let t = Tensor::<f32>::from_fn(&[3, 2], |i| i as f32);
        let s = t.select_batch(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[4.0, 5.0, 0.0, 1.0]);
        let c = Tensor::concat_batch(&[&s, &t]).unwrap();
        assert_eq!(c.shape(), &[5, 2]);
        assert!(t.select_batch(&[3]).is_err());
    }
}
