//! Dense N-dimensional arrays, row-major with the last axis fastest.

use crate::error::CoreError;
use crate::rng::Xorshift64Star;
use crate::scalar::{fl, Scalar};
use crate::Result;

pub const MAX_RANK: usize = 5;

/// Owned dense tensor of rank 1..=5.
///
/// Invariants: every extent is >= 1, rank <= 5, and `data.len()` equals the
/// product of the extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(CoreError::shape(
                "Tensor::new",
                format!("shape {:?} wants {} element(s), got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    fn check_shape(shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(CoreError::shape(
                "Tensor",
                format!("rank {} outside 1..={}", shape.len(), MAX_RANK),
            ));
        }
        if let Some(axis) = shape.iter().position(|&e| e == 0) {
            return Err(CoreError::shape(
                "Tensor",
                format!("axis {} has extent 0 in {:?}", axis, shape),
            ));
        }
        Ok(())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::check_shape(shape).expect("valid shape");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self::check_shape(shape).expect("valid shape");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform values in [lo, hi) drawn from `rng`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Xorshift64Star) -> Self {
        Self::check_shape(shape).expect("valid shape");
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| fl::<T>(rng.uniform(lo, hi))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    /// Single stored value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(CoreError::shape(
                "reshape",
                format!("{:?} ({} elements) -> {:?} ({})", self.shape, self.numel(), shape, numel),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Adds `other` element-wise into self.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, factor: T) {
        for a in self.data.iter_mut() {
            *a *= factor;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|a| *a = value);
    }

    /// Lossy element-wise conversion between scalar types (exact for
    /// f32 -> f64 widening).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64().expect("finite")).expect("representable"))
                .collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::<f32>::new(&[2, 0, 3], vec![]).is_err());
    }

    #[test]
    fn rejects_rank_over_five() {
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        let err = Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("4") && msg.contains("3"), "{msg}");
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f64>::new(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn cast_widening_is_exact() {
        let mut rng = Xorshift64Star::new(3);
        let t = Tensor::<f32>::uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let wide = t.cast::<f64>();
        for (a, b) in t.data().iter().zip(wide.data()) {
            assert_eq!(*a as f64, *b);
        }
    }
}
