//! Helpers for binary masks stored as `{0, 1}` tensors.

use crate::tensor::Tensor;

/// First value that is neither 0 nor 1.
pub fn first_non_binary(t: &Tensor) -> Option<f32> {
    t.data().iter().copied().find(|&v| v != 0.0 && v != 1.0)
}

pub fn is_binary(t: &Tensor) -> bool {
    first_non_binary(t).is_none()
}

/// Number of set pixels.
pub fn count(t: &Tensor) -> usize {
    t.data().iter().filter(|&&v| v != 0.0).count()
}

/// `a ⊆ b` pixelwise.
pub fn is_subset(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(&x, &y)| x == 0.0 || y != 0.0)
}

pub(crate) fn from_bools(shape: crate::Shape, bits: &[bool]) -> Tensor {
    Tensor::new(shape, bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).expect("shape matches")
}
