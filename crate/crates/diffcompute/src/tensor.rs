use crate::GraphError;

/// Dense row-major tensor with up to four axes.
///
/// Image tensors use the `(batch, channel, height, width)` layout throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, GraphError> {
        if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
            return Err(GraphError::shape("tensor", format!("invalid shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(GraphError::shape(
                "tensor",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.len() <= 4 && shape.iter().all(|&d| d > 0));
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Returns the shape as `(n, c, h, w)`; fails unless the tensor has exactly four axes.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4], GraphError> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(GraphError::shape(op, format!("expected 4 axes, got {:?}", self.shape))),
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Sum in index order; deterministic for a fixed layout.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}
