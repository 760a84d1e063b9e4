//! Dense f32 tensors with reverse-mode differentiation.
//!
//! The engine is deliberately small: row-major storage, a recording tape,
//! and exactly the primitives the four-conv feature extractor and the
//! bilevel meta-update need. Gradients of every primitive are expressed in
//! terms of the same primitive set, so the tape can differentiate through
//! its own backward pass (needed for the exact-mode meta-gradient).

mod checkpoint;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use tape::{GradMap, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense multi-dimensional array with 32-bit float semantics.
///
/// `grad`, when present, always has the same element count as `data`;
/// it is populated by pulling gradients out of a [`Tape`] after a backward
/// pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dimension(
                "tensor",
                format!("shape {:?} does not hold {} values", shape, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform init in [-bound, +bound], the classic 1/sqrt(fan_in) scheme.
    pub fn rand_uniform(shape: Vec<usize>, bound: f32, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Add `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::dimension(
                "accumulate_grad",
                format!("grad of {} values vs data of {}", delta.len(), self.data.len()),
            ));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Plain SGD: p <- p - lr * grad for every parameter.
///
/// Every parameter must carry a populated gradient; a missing gradient is a
/// contract violation rather than a silent no-op.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f32) -> Result<()> {
    for p in params.iter() {
        if p.grad.is_none() {
            return Err(Error::Contract(
                "sgd_step on a parameter with no gradient".into(),
            ));
        }
    }
    for p in params.iter_mut() {
        let grad = p.grad.as_ref().unwrap();
        for (v, g) in p.data.iter_mut().zip(grad) {
            *v -= lr * g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_mismatched_shape() {
        let err = Tensor::from_vec(vec![2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn sgd_step_with_zero_lr_is_identity() {
        let mut t = Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap().with_grad();
        t.accumulate_grad(&[5.0, 5.0]).unwrap();
        let before = t.data.clone();
        sgd_step(&mut [&mut t], 0.0).unwrap();
        assert_eq!(t.data, before);
    }

    #[test]
    fn sgd_step_requires_gradients() {
        let mut t = Tensor::zeros(vec![2]).with_grad();
        let err = sgd_step(&mut [&mut t], 0.1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let mut t = Tensor::zeros(vec![2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, -1.0]).unwrap();
        assert_eq!(t.grad.as_deref().unwrap(), &[1.5, 1.0]);
    }
}
