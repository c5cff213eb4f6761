use super::{Real, Result, Tensor, TensorError};

/// A learnable tensor together with its SGD momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Real = f32> {
    pub value: Tensor<T>,
    momentum: Vec<T>,
    decay_exempt: bool,
    name: String,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let momentum = vec![T::zero(); value.numel()];
        Parameter {
            value: value.with_requires_grad(true),
            momentum,
            decay_exempt: false,
            name: name.into(),
        }
    }

    /// A parameter that weight decay never touches.
    pub fn decay_exempt(name: impl Into<String>, value: Tensor<T>) -> Self {
        Parameter {
            decay_exempt: true,
            ..Self::new(name, value)
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_decay_exempt(&self) -> bool {
        self.decay_exempt
    }

    pub fn momentum_buffer(&self) -> &[T] {
        &self.momentum
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            lr: 2.5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl Sgd {
    pub fn step<'a, T: Real>(&self, params: impl IntoIterator<Item = &'a mut Parameter<T>>) -> Result<()> {
        sgd_step(params, self.lr, self.momentum, self.weight_decay)
    }
}

/// One update per parameter:
/// `g = grad + wd·value` (unless decay-exempt), `buf = μ·buf + g`,
/// `value -= lr·buf`. Gradients are cleared afterwards.
///
/// Every gradient is checked before any parameter is modified.
pub fn sgd_step<'a, T: Real>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut params: Vec<&mut Parameter<T>> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.value.grad().is_none()) {
        return Err(TensorError::MissingGradient(p.name.clone()));
    }
    let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for p in params.iter_mut() {
        let grad = p.value.take_grad().expect("checked above");
        let decay = if p.decay_exempt { T::zero() } else { wd };
        let values = p.value.data_mut();
        for ((v, b), g) in values.iter_mut().zip(p.momentum.iter_mut()).zip(grad) {
            let g = if decay == T::zero() { g } else { g + decay * *v };
            *b = mu * *b + g;
            *v = *v - lr * *b;
        }
    }
    Ok(())
}
