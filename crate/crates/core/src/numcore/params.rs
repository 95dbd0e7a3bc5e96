use super::Matrix;
use crate::error::{config_err, Result};

/// A fixed, ordered collection of named matrices.
///
/// The visiting order defines the flat layout used by `flatten`,
/// `assign_flat` and the checkpoint format, so implementors must keep
/// `named_tensors` and `tensors_mut` in the same order.
pub trait ParamSet {
    fn named_tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m).collect()
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for m in self.tensors() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return config_err(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.num_scalars()
            ));
        }
        let mut offset = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += alpha * other`, tensor by tensor.
    fn axpy(&mut self, alpha: f64, other: &Self) {
        let others = other.tensors();
        for (m, o) in self.tensors_mut().into_iter().zip(others) {
            m.axpy(alpha, o);
        }
    }

    fn scale(&mut self, alpha: f64) {
        for m in self.tensors_mut() {
            m.scale(alpha);
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        for m in out.tensors_mut() {
            m.as_mut_slice().fill(0.0);
        }
        out
    }

    fn dot(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| super::matrix::dot(a.as_slice(), b.as_slice()))
            .sum()
    }

    fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    /// Bitwise equality of every scalar.
    fn bitwise_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.flatten(), other.flatten());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}
