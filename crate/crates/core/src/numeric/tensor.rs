use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type of the engine. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

/// Dense row-major array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct Tensor<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    #[serde(skip)]
    grad: Option<Vec<F>>,
    #[serde(skip, default = "default_requires_grad")]
    requires_grad: bool,
}

fn default_requires_grad() -> bool {
    true
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::config(format!("tensor shape {shape:?} has a zero axis")));
        }
        if numel(&shape) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![F::zero(); numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[F]) {
        assert_eq!(delta.len(), self.values.len(), "gradient length");
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += *d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn row(&self, i: usize) -> &[F] {
        let w = *self.shape.last().expect("non-empty shape");
        &self.values[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let w = *self.shape.last().expect("non-empty shape");
        &mut self.values[i * w..(i + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
