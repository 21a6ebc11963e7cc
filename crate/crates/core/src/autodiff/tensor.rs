use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AutodiffError;
use crate::scalar::Scalar;

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + for<'d> Deserialize<'d>")]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    #[serde(skip)]
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, AutodiffError> {
        if shape.contains(&0) {
            return Err(AutodiffError::Shape(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n], grad: None }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v], grad: None }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: (0..n).map(&mut f).collect(), grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// View as a matrix: `[r, c]` stays, `[n]` is one row, higher ranks
    /// fold leading dimensions into rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [rest @ .., c] => (rest.iter().product(), *c),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<T>> {
        self.grad.as_mut()
    }

    /// Adds `g` into the stored gradient, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<(), AutodiffError> {
        if g.len() != self.data.len() {
            return Err(AutodiffError::Shape(format!(
                "gradient of length {} for tensor of length {}",
                g.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn set_grad(&mut self, g: Vec<T>) -> Result<(), AutodiffError> {
        if g.len() != self.data.len() {
            return Err(AutodiffError::Shape(format!(
                "gradient of length {} for tensor of length {}",
                g.len(),
                self.data.len()
            )));
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over shape and the little-endian `f64` bits of every value.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        hash_into(&mut h, self);
        h.finalize().into()
    }
}

pub(crate) fn hash_into<T: Scalar>(h: &mut Sha256, t: &Tensor<T>) {
    for &s in &t.shape {
        h.update((s as u64).to_le_bytes());
    }
    for v in &t.data {
        h.update(v.as_f64().to_bits().to_le_bytes());
    }
}

/// A named set of tensors that is either tunable or frozen as a unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + for<'d> Deserialize<'d>")]
pub struct ParamGroup<T> {
    pub name: String,
    pub tensors: Vec<Tensor<T>>,
    pub frozen: bool,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn new(name: impl Into<String>, tensors: Vec<Tensor<T>>, frozen: bool) -> Self {
        Self { name: name.into(), tensors, frozen }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for t in &self.tensors {
            hash_into(&mut h, t);
        }
        h.finalize().into()
    }

    /// Gradients of all tensors concatenated; `None` if any is missing.
    pub fn flat_grad(&self) -> Option<Vec<T>> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.tensors {
            out.extend_from_slice(t.grad()?);
        }
        Some(out)
    }

    /// Splits `flat` back over the tensors as their gradients.
    pub fn set_flat_grad(&mut self, flat: &[T]) -> Result<(), AutodiffError> {
        if flat.len() != self.num_params() {
            return Err(AutodiffError::Shape(format!(
                "flat gradient of length {} for group `{}` with {} params",
                flat.len(),
                self.name,
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.set_grad(flat[off..off + n].to_vec())?;
            off += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn gradient_accumulates() {
        let mut t = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 1.0]).unwrap();
        t.accumulate_grad(&[0.5, -1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 0.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn digest_tracks_values() {
        let a = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.data_mut()[1] = 2.0 + 1e-15;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn flat_grad_round_trip() {
        let mut g = ParamGroup::new(
            "p",
            vec![Tensor::<f64>::zeros(vec![2, 2]), Tensor::zeros(vec![3])],
            false,
        );
        assert!(g.flat_grad().is_none());
        let flat: Vec<f64> = (0..7).map(f64::from).collect();
        g.set_flat_grad(&flat).unwrap();
        assert_eq!(g.flat_grad().unwrap(), flat);
        assert_eq!(g.tensors[1].grad().unwrap(), &[4.0, 5.0, 6.0]);
    }
}
