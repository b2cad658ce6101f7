//! Parameter containers generic over their leaf type.
//!
//! Stored parameters use `DMatrix<f64>` leaves; the same structures with
//! [`Var`](crate::tape::Var) leaves describe parameters bound onto a tape.
//! `map` visits leaves in one fixed order, which is also the checkpoint
//! order and the optimizer order.

use nalgebra::DMatrix;
use rand::Rng;

/// How the optimizer treats a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm scale or shift.
    Norm,
    /// GIN ε.
    Eps,
}

impl ParamKind {
    /// Decoupled weight decay skips normalization parameters and ε.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

pub type Visitor<'f, T, U> = dyn FnMut(&str, &T, ParamKind) -> U + 'f;
pub type VisitorMut<'f, T> = dyn FnMut(&str, &mut T, ParamKind) + 'f;

/// Affine map `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut Visitor<'_, T, U>) -> Linear<U> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight, ParamKind::Weight),
            bias: f(&format!("{prefix}.bias"), &self.bias, ParamKind::Bias),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.weight, ParamKind::Weight);
        f(&format!("{prefix}.bias"), &mut self.bias, ParamKind::Bias);
    }
}

impl Linear<DMatrix<f64>> {
    /// Uniform(±1/√fan_in) weights and biases.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: DMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound)),
            bias: DMatrix::from_fn(1, fan_out, |_, _| rng.random_range(-bound..bound)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

impl<T> Norm<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut Visitor<'_, T, U>) -> Norm<U> {
        Norm {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma, ParamKind::Norm),
            beta: f(&format!("{prefix}.beta"), &self.beta, ParamKind::Norm),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma, ParamKind::Norm);
        f(&format!("{prefix}.beta"), &mut self.beta, ParamKind::Norm);
    }
}

impl Norm<DMatrix<f64>> {
    pub fn init(dim: usize) -> Self {
        Norm {
            gamma: DMatrix::from_element(1, dim, 1.0),
            beta: DMatrix::zeros(1, dim),
        }
    }
}

/// Running batch-norm statistics used in evaluation mode.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Weight on the previous running value.
pub const BN_MOMENTUM: f64 = 0.9;

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        RunningStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn update(&mut self, batch: &crate::tape::BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}
