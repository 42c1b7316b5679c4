use std::fmt;

use num_traits::Float;

use super::TensorError;

/// Element type of a [`Tensor`]. Training runs in `f32`; gradient checks run in `f64`.
pub trait Scalar: Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. Gradient bookkeeping lives on the [`Tape`](super::Tape),
/// not here: a `Tensor` is a plain value.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![T::zero()] } else { data };
        Tensor {
            shape: vec![n],
            data,
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
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

    /// Number of rows when viewed as a matrix `[rows, cols]`; 1-D tensors are a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        self.numel() / self.rows()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Stacks equally shaped tensors along a new leading axis (1-D rows become a matrix).
    pub fn stack_rows(rows: &[Tensor<T>]) -> Result<Self, TensorError> {
        let first = rows.first().ok_or(TensorError::Empty)?;
        let cols = first.numel();
        let mut data = Vec::with_capacity(cols * rows.len());
        for r in rows {
            if r.numel() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    left: first.shape.clone(),
                    right: r.shape.clone(),
                });
            }
            data.extend_from_slice(&r.data);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Copies row `i` of a matrix into a `[1, cols]` tensor.
    pub fn row_tensor(&self, i: usize) -> Tensor<T> {
        Tensor {
            shape: vec![1, self.cols()],
            data: self.row(i).to_vec(),
        }
    }

    /// Bytes of the little-endian `f32` encoding; used for hashing and fingerprints.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * 4);
        for v in &self.data {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn stack_rows_builds_matrix() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0]);
        let b = Tensor::<f64>::from_vec(vec![3.0, 4.0]);
        let m = Tensor::stack_rows(&[a, b]).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.row(1), &[3.0, 4.0]);
    }
}
