//! Numeric substrate: dense linear algebra, a seeded RNG, Adam, and a
//! central-difference gradient checker.

mod adam;
mod gradcheck;
mod matrix;
mod rng;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_check, finite_diff_check_parts, GradCheckReport};
pub use matrix::{dot, Matrix, Vector};
pub use rng::Rng;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape { op: &'static str, expected: String, found: String },
    #[error("non-finite gradient in parameter `{name}` at index {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("loss is not deterministic under frozen noise: {first} then {second}")]
    NonDeterministicLoss { first: f64, second: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// A named collection of trainable tensors.
///
/// Gradients are represented by a value of the same type, so the tensor
/// order returned by `tensors` and `tensors_mut` must agree.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<(&str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.tensors_mut() {
            m.fill(0.0);
        }
        z
    }

    fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.sum_sq()).sum::<f64>().sqrt()
    }

    /// First non-finite entry, if any, as `(tensor name, flat index)`.
    fn first_non_finite(&self) -> Option<(String, usize)> {
        self.tensors()
            .into_iter()
            .find_map(|(name, m)| m.as_slice().iter().position(|x| !x.is_finite()).map(|i| (name.to_string(), i)))
    }
}

/// Ad-hoc parameter set of named matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSet {
    pub entries: Vec<(String, Matrix)>,
}

impl TensorSet {
    pub fn new(entries: Vec<(String, Matrix)>) -> Self {
        TensorSet { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

impl ParamSet for TensorSet {
    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), m)).collect()
    }
}
