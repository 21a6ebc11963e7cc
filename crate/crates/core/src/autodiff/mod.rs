//! Minimal reverse-mode automatic differentiation over dense matrices.

mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use graph::{Gradients, Graph, Var};
pub use kernels::{dot, softmax_in_place};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::{ParamGroup, Tensor};

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward needs a scalar loss, got {0} elements")]
    NonScalarLoss(usize),
    #[error("missing gradient for tunable tensor {0}")]
    MissingGradient(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("model function is not deterministic: {0} vs {1}")]
    NonDeterministic(f64, f64),
}

impl<T: Scalar> ParamGroup<T> {
    /// Accumulates the gradients of `vars` (as returned by [`Graph::bind`])
    /// into the group's tensors. Frozen groups never store a gradient.
    pub fn absorb(&mut self, grads: &Gradients<T>, vars: &[Var]) -> Result<(), AutodiffError> {
        if self.frozen {
            return Ok(());
        }
        if vars.len() != self.tensors.len() {
            return Err(AutodiffError::Shape(format!(
                "{} vars bound for group `{}` of {} tensors",
                vars.len(),
                self.name,
                self.tensors.len()
            )));
        }
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
