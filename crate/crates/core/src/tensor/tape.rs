use super::kernels::{self, ConvGeom};
use super::{Parameter, Real, Result, Shape, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    BceWithLogits { logits: Var, target: Var },
    L1 { pred: Var, target: Var },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of a forward pass. Nodes are appended in execution order, so the
/// node list is already topologically sorted.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    for (dim, x, y) in [("batch", a.n, b.n), ("channel", a.c, b.c), ("height", a.h, b.h), ("width", a.w, b.w)] {
        if x != y {
            return Err(TensorError::ShapeMismatch {
                op,
                dim,
                expected: x,
                found: y,
            });
        }
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut value = value;
        value.clear_grad();
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Shape, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        let value = Tensor::new(shape, data).expect("kernel produced a consistent shape");
        self.push(value, op, requires_grad)
    }

    /// Record an input; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Record an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Record a copy of a parameter's current value as a trainable leaf.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        self.push(p.value.clone(), Op::Leaf, true)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let s = self.shape(input);
        let ws = self.shape(weight);
        if stride == 0 {
            return Err(TensorError::ZeroStride);
        }
        if ws.c != s.c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                dim: "input channel",
                expected: ws.c,
                found: s.c,
            });
        }
        if ws.h != ws.w {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                dim: "kernel width",
                expected: ws.h,
                found: ws.w,
            });
        }
        let bn = self.value(bias).numel();
        if bn != ws.n {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                dim: "bias length",
                expected: ws.n,
                found: bn,
            });
        }
        let k = ws.h;
        let (ph, pw) = (s.h + 2 * padding, s.w + 2 * padding);
        if ph < k || pw < k {
            return Err(TensorError::KernelTooLarge {
                kernel: k,
                padding,
                h: s.h,
                w: s.w,
            });
        }
        for span in [ph - k, pw - k] {
            if span % stride != 0 {
                return Err(TensorError::StrideMismatch { span, stride });
            }
        }
        let geom = ConvGeom {
            input: s,
            cout: ws.n,
            kernel: k,
            stride,
            padding,
            out_h: (ph - k) / stride + 1,
            out_w: (pw - k) / stride + 1,
        };
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        let keep_cols = self.requires_grad(weight);
        let (out, cols) = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
            keep_cols,
        );
        Ok(self.derived(
            geom.output(),
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let (s, rg) = (t.shape(), self.requires_grad(x));
        self.derived(s, data, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| kernels::stable_sigmoid(v)).collect();
        let (s, rg) = (t.shape(), self.requires_grad(x));
        self.derived(s, data, Op::Sigmoid(x), rg)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(TensorError::OddSpatial {
                op: "max_pool2",
                h: s.h,
                w: s.w,
            });
        }
        let (data, argmax) = kernels::max_pool2(self.value(x).data(), s);
        let rg = self.requires_grad(x);
        Ok(self.derived(Shape::new(s.n, s.c, s.h / 2, s.w / 2), data, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let data = kernels::upsample2(self.value(x).data(), s);
        let rg = self.requires_grad(x);
        self.derived(Shape::new(s.n, s.c, s.h * 2, s.w * 2), data, Op::Upsample2(x), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        for (dim, x, y) in [("batch", sa.n, sb.n), ("height", sa.h, sb.h), ("width", sa.w, sb.w)] {
            if x != y {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    dim,
                    expected: x,
                    found: y,
                });
            }
        }
        let data = kernels::concat_channels(self.value(a).data(), sa, self.value(b).data(), sb);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.derived(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), data, Op::Concat(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.derived(self.shape(a), data, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.derived(self.shape(a), data, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let rg = self.requires_grad(x);
        self.derived(self.shape(x), data, Op::Scale(x, factor), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.exp()).collect();
        let rg = self.requires_grad(x);
        self.derived(self.shape(x), data, Op::Exp(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.requires_grad(x);
        self.derived(Shape::SCALAR, vec![total], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / T::from_usize(t.numel()).expect("count fits");
        let rg = self.requires_grad(x);
        self.derived(Shape::SCALAR, vec![m], Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`, in the
    /// logit-stable form `max(x,0) - x·y + ln(1 + e^-|x|)`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        same_shape("bce_with_logits", self.shape(logits), self.shape(target))?;
        let x = self.value(logits).data();
        let y = self.value(target).data();
        let total: T = x
            .iter()
            .zip(y)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let m = total / T::from_usize(x.len()).expect("count fits");
        let rg = self.requires_grad(logits) || self.requires_grad(target);
        Ok(self.derived(Shape::SCALAR, vec![m], Op::BceWithLogits { logits, target }, rg))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape("l1", self.shape(pred), self.shape(target))?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let total: T = p.iter().zip(t).map(|(&a, &b)| (a - b).abs()).sum();
        let m = total / T::from_usize(p.len()).expect("count fits");
        let rg = self.requires_grad(pred) || self.requires_grad(target);
        Ok(self.derived(Shape::SCALAR, vec![m], Op::L1 { pred, target }, rg))
    }

    /// Reverse-mode sweep from a scalar output. Every leaf that requires a
    /// gradient gets one, all zeros when it does not influence `output`.
    pub fn backward(self, output: Var) -> Result<Gradients<T>> {
        let shape = self.shape(output);
        if shape != Shape::SCALAR {
            return Err(TensorError::NotScalar(shape));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![T::one()]);
        }

        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let rg = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let out = kernels::conv2d_backward(
                        &g,
                        nodes[weight.0].value.data(),
                        cols,
                        geom,
                        [rg(*input), rg(*weight), rg(*bias)],
                    );
                    if let Some(d) = out.input {
                        accumulate(&mut grads, *input, d);
                    }
                    if let Some(d) = out.weight {
                        accumulate(&mut grads, *weight, d);
                    }
                    if let Some(d) = out.bias {
                        accumulate(&mut grads, *bias, d);
                    }
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut d = vec![T::zero(); nodes[x.0].value.numel()];
                    for (&g, &a) in g.iter().zip(argmax) {
                        d[a as usize] += g;
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Upsample2(x) => {
                    let d = kernels::upsample2_backward(&g, nodes[x.0].value.shape());
                    accumulate(&mut grads, *x, d);
                }
                Op::Concat(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
                    if rg(*a) {
                        let d = (0..sa.n).flat_map(|n| g[n * (pa + pb)..][..pa].iter().copied()).collect();
                        accumulate(&mut grads, *a, d);
                    }
                    if rg(*b) {
                        let d = (0..sa.n)
                            .flat_map(|n| g[n * (pa + pb) + pa..][..pb].iter().copied())
                            .collect();
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                    }
                }
                Op::Scale(x, f) => {
                    accumulate(&mut grads, *x, g.iter().map(|&g| g * *f).collect());
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    accumulate(&mut grads, *x, g.iter().zip(y).map(|(&g, &y)| g * y).collect());
                }
                Op::Sum(x) => {
                    accumulate(&mut grads, *x, vec![g[0]; nodes[x.0].value.numel()]);
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.numel();
                    let v = g[0] / T::from_usize(n).expect("count fits");
                    accumulate(&mut grads, *x, vec![v; n]);
                }
                Op::BceWithLogits { logits, target } => {
                    let xv = nodes[logits.0].value.data();
                    let yv = nodes[target.0].value.data();
                    let scale = g[0] / T::from_usize(xv.len()).expect("count fits");
                    if rg(*logits) {
                        let d = xv
                            .iter()
                            .zip(yv)
                            .map(|(&x, &y)| (kernels::stable_sigmoid(x) - y) * scale)
                            .collect();
                        accumulate(&mut grads, *logits, d);
                    }
                    if rg(*target) {
                        accumulate(&mut grads, *target, xv.iter().map(|&x| -x * scale).collect());
                    }
                }
                Op::L1 { pred, target } => {
                    let pv = nodes[pred.0].value.data();
                    let tv = nodes[target.0].value.data();
                    let scale = g[0] / T::from_usize(pv.len()).expect("count fits");
                    let sign: Vec<T> = pv
                        .iter()
                        .zip(tv)
                        .map(|(&p, &t)| {
                            let d = p - t;
                            if d > T::zero() {
                                scale
                            } else if d < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    if rg(*target) {
                        accumulate(&mut grads, *target, sign.iter().map(|&s| -s).collect());
                    }
                    if rg(*pred) {
                        accumulate(&mut grads, *pred, sign);
                    }
                }
            }
        }

        let leaves = nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| {
                if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape();
                let data = g.unwrap_or_else(|| vec![T::zero(); shape.numel()]);
                Some(Tensor::new(shape, data).expect("gradient matches leaf shape"))
            })
            .collect();
        Ok(Gradients { leaves })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of the leaves of a consumed tape.
pub struct Gradients<T: Real = f32> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.get_mut(v.0).and_then(Option::take)
    }

    /// Move the gradient of `v` onto `param`, replacing any previous one.
    pub fn assign(&mut self, v: Var, param: &mut Parameter<T>) -> Result<()> {
        let g = self
            .take(v)
            .ok_or_else(|| TensorError::MissingGradient(param.name().to_string()))?;
        param.value.set_grad(g.into_data())
    }
}
