use num_traits::{Num, Zero};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
///
/// Images are rank 3 (`[height, width, channels]`); model parameters and
/// autodiff values are rank 2. The element type is left open so exact
/// arithmetic types can be used where only field operations are needed.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn check_same_shape<U>(&self, other: &Tensor<U>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape { expected: self.shape.clone(), found: other.shape.clone() });
        }
        Ok(())
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(f).collect() }
    }

    pub fn zip_map<U, V>(&self, other: &Tensor<U>, mut f: impl FnMut(&T, &U) -> V) -> Result<Tensor<V>> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }
}

impl<T: Clone> Tensor<T> {
    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }
}

impl<T: Num + Clone> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, T::zero())
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn clamp(&self, lo: S, hi: S) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|&v| v * k)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |&a, &b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |&a, &b| a - b)
    }

    /// Euclidean distance between two same-shaped tensors.
    pub fn l2_distance(&self, other: &Self) -> Result<S> {
        self.check_same_shape(other)?;
        let s: S = self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(s.sqrt())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|&v| U::lit(v.as_f64()))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }
}

impl<T: Zero + Clone> Tensor<T> {
    pub fn zeros_like<U>(other: &Tensor<U>) -> Self {
        Tensor { shape: other.shape.clone(), data: vec![T::zero(); other.data.len()] }
    }
}

/// `[height, width, channels]` image helpers.
impl<S: Scalar> Tensor<S> {
    pub fn image_dims(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::Invalid(format!("expected a rank-3 image, got shape {:?}", self.shape))),
        }
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> S {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }
}
