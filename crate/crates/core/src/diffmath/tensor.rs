use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

/// Dense row-major array of finite 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    data: ArrayD<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major values.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        let data = ArrayD::from_shape_vec(IxDyn(shape), values)
            .map_err(|e| Error::contract(e.to_string()))?;
        Self::from_array(data)
    }

    /// Wraps an ndarray, rejecting NaN and infinities.
    pub fn from_array<D: ndarray::Dimension>(array: ndarray::Array<f64, D>) -> Result<Self> {
        if array.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self::from_array_unchecked(array.into_dyn()))
    }

    pub(crate) fn from_array_unchecked(data: ArrayD<f64>) -> Self {
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Self { data }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(&[], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        self.data
            .as_slice()
            .expect("tensor storage is always standard layout")
    }

    pub fn array(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn into_array(self) -> ArrayD<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.values()[0]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl TryFrom<ArrayD<f64>> for Tensor {
    type Error = Error;

    fn try_from(value: ArrayD<f64>) -> Result<Self> {
        Tensor::from_array(value)
    }
}
