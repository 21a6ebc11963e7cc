//! Central finite-difference oracle for the reverse sweep.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::AutodiffError;
use crate::scalar::Scalar;

/// Compares reverse-mode gradients of `model_fn` against central
/// differences, perturbing every entry of every tensor in `params`.
///
/// The error of one tensor is `max_i |auto_i - fd_i| / max(max_i |fd_i|, 1e-8)`;
/// the returned value is the largest such error over all tensors.
/// `model_fn` receives the graph and one leaf per entry of `params`
/// (in order) and must return a scalar node.
pub fn finite_difference_check<'a, T, F>(model_fn: F, params: &[Tensor<T>], epsilon: f64) -> Result<f64, AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Graph<'a, T>, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(AutodiffError::Precondition(format!(
            "epsilon must lie in (0, 1e-3], got {epsilon}"
        )));
    }
    let mut work: Vec<Vec<T>> = params.iter().map(|t| t.data().to_vec()).collect();
    let dims: Vec<(usize, usize)> = params.iter().map(Tensor::dims2).collect();

    let eval = |work: &[Vec<T>], with_grad: bool| -> Result<(T, Vec<Vec<T>>), AutodiffError> {
        let mut g = Graph::new();
        let vars = work
            .iter()
            .zip(&dims)
            .map(|(w, &(r, c))| g.input(r, c, w.clone(), with_grad))
            .collect::<Result<Vec<_>, _>>()?;
        let loss = model_fn(&mut g, &vars)?;
        let value = g.scalar(loss)?;
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(work)
            .map(|(&v, w)| grads.take(v).unwrap_or_else(|| vec![T::zero(); w.len()]))
            .collect();
        Ok((value, gs))
    };

    let (base, analytic) = eval(&work, true)?;
    let (again, _) = eval(&work, false)?;
    if base.as_f64().to_bits() != again.as_f64().to_bits() {
        return Err(AutodiffError::NonDeterministic(base.as_f64(), again.as_f64()));
    }

    let eps = T::lit(epsilon);
    let mut worst = 0.0f64;
    for ti in 0..work.len() {
        let mut max_diff = 0.0f64;
        let mut max_fd = 0.0f64;
        for i in 0..work[ti].len() {
            let orig = work[ti][i];
            work[ti][i] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[ti][i] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[ti][i] = orig;
            let fd = (plus - minus).as_f64() / (2.0 * epsilon);
            max_diff = max_diff.max((analytic[ti][i].as_f64() - fd).abs());
            max_fd = max_fd.max(fd.abs());
        }
        worst = worst.max(max_diff / max_fd.max(1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_is_exact() {
        let w = Tensor::new(vec![1, 3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let x = Tensor::new(vec![3, 1], vec![1.5f64, 0.25, -0.75]).unwrap();
        let err = finite_difference_check(
            |g, v| {
                let xv = g.leaf(&x, false);
                g.matmul(v[0], xv)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn epsilon_bounds() {
        let w = Tensor::scalar(1.0f64);
        let f = |g: &mut Graph<'_, f64>, v: &[Var]| g.mul(v[0], v[0]);
        assert!(finite_difference_check(f, std::slice::from_ref(&w), 0.0).is_err());
        assert!(finite_difference_check(f, std::slice::from_ref(&w), 1e-2).is_err());
        assert!(finite_difference_check(f, std::slice::from_ref(&w), 1e-3).is_ok());
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0f64);
        let w = Tensor::scalar(1.0f64);
        let res = finite_difference_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let c = g.constant(1, 1, vec![calls.get()])?;
                g.mul(v[0], c)
            },
            &[w],
            1e-5,
        );
        assert!(matches!(res, Err(AutodiffError::NonDeterministic(..))));
    }
}
