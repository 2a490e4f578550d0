use super::DiffError;

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::ShapeMismatch { kind: "tensor", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    /// Caller guarantees `product(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// A column of values, shape `[n]`.
    pub fn vector(values: Vec<f64>) -> Self {
        Self { shape: vec![values.len()], data: values }
    }

    /// Stack 3-vectors as rows, shape `[n, 3]`.
    pub fn from_points(points: &[[f64; 3]]) -> Self {
        Self { shape: vec![points.len(), 3], data: points.iter().flatten().copied().collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the leading axis (1 for rank-0 data).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Extent of the trailing axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, DiffError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(DiffError::ShapeMismatch { kind: "reshape", lhs: self.shape, rhs: shape });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transposed(&self) -> Result<Self, DiffError> {
        if self.shape.len() != 2 {
            return Err(DiffError::ShapeMismatch { kind: "transpose", lhs: self.shape.clone(), rhs: vec![] });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
