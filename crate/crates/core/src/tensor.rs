//! Dense row-major tensors and the floating-point element trait.
//!
//! Training runs in `f32`; the same code paths are instantiated at `f64` for
//! finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`].
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::Contract(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Tensor::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Tensor::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Tensor::new(shape, (0..n).map(&mut f).collect())
    }

    /// Marks the tensor as a trainable leaf and allocates a zeroed gradient.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: None,
            requires_grad: false,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let conv = |v: &T| U::of(v.as_f64());
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(conv).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(conv).collect()),
            requires_grad: self.requires_grad,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the leading block `[..extents[0], ..extents[1], ...]`.
    pub fn prefix(&self, extents: &[usize]) -> Result<Self> {
        check_prefix(&self.shape, extents)?;
        if extents == self.shape.as_slice() {
            return Tensor::new(&self.shape, self.data.clone());
        }
        let mut out = Vec::with_capacity(extents.iter().product());
        for_each_prefix_run(&self.shape, extents, |start, len| {
            out.extend_from_slice(&self.data[start..start + len]);
        });
        Tensor::new(extents, out)
    }

    /// Bitwise equality of shape and values (the gradient buffer is ignored).
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }
}

pub(crate) fn check_prefix(shape: &[usize], extents: &[usize]) -> Result<()> {
    if shape.len() != extents.len()
        || shape.iter().zip(extents).any(|(&s, &e)| e == 0 || e > s)
    {
        return Err(Error::shape("prefix slice", shape, extents));
    }
    Ok(())
}

/// Calls `f(start, len)` for each contiguous run of the leading block
/// `extents` inside a row-major buffer of shape `shape`, in row-major order.
pub(crate) fn for_each_prefix_run(shape: &[usize], extents: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        return;
    }
    // Trailing dims that are taken in full merge into one run.
    let mut split = rank;
    while split > 1 && extents[split - 1] == shape[split - 1] {
        split -= 1;
    }
    let tail: usize = shape[split..].iter().product();
    let run = extents[split - 1] * tail;
    let mut strides = vec![0usize; split];
    let mut acc = tail;
    for d in (0..split).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    let outer = &extents[..split - 1];
    let mut idx = vec![0usize; outer.len()];
    loop {
        let start: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        f(start, run);
        let mut d = outer.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < outer[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            Tensor::<f32>::zeros(&[1, 0, 4]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn prefix_of_3d() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32).unwrap();
        let p = t.prefix(&[2, 2, 3]).unwrap();
        assert_eq!(p.shape(), &[2, 2, 3]);
        assert_eq!(
            p.data(),
            &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0, 12.0, 13.0, 14.0, 16.0, 17.0, 18.0]
        );
        // full trailing dims collapse into a single run per leading index
        let q = t.prefix(&[1, 3, 4]).unwrap();
        assert_eq!(q.data(), &t.data()[..12]);
        assert!(t.prefix(&[2, 4, 4]).is_err());
    }

    #[test]
    fn cast_round_trip_and_bit_eq() {
        let t = Tensor::<f32>::from_fn(&[3], |i| 0.1 * i as f32).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert!(t.bit_eq(&back));
    }
}
