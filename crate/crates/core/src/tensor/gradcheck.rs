use super::{Real, Tensor};

/// Central-difference estimate of `∇f(x)`:
/// `(f(x + eps·eᵢ) - f(x - eps·eᵢ)) / (2·eps)` for every element `i`.
pub fn finite_diff_grad<T: Real>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, eps: f64) -> Tensor<T> {
    assert!(eps > 0.0, "finite_diff_grad: eps must be positive");
    let eps = T::from_f64_lossy(eps);
    let two_eps = eps + eps;
    let mut probe = x.clone();
    probe.clear_grad();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / two_eps);
    }
    Tensor::new(x.shape(), grad).expect("same shape as x")
}
