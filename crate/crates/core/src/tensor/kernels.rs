use super::{Real, Shape};

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub input: Shape,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Rows of the unfolded patch matrix (`Cin·k·k`).
    pub fn patch_len(&self) -> usize {
        self.input.c * self.kernel * self.kernel
    }

    /// Columns of the unfolded patch matrix (`Ho·Wo`).
    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output(&self) -> Shape {
        Shape::new(self.input.n, self.cout, self.out_h, self.out_w)
    }
}

/// Unfold sample `n` of `x` into a `(Cin·k·k) × (Ho·Wo)` patch matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, n: usize, cols: &mut [T]) {
    let s = g.input;
    let k = g.kernel;
    let p = g.out_plane();
    let pad = g.padding as isize;
    for ci in 0..s.c {
        let plane = &x[(n * s.c + ci) * s.plane()..][..s.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let dst = &mut row[oy * g.out_w..][..g.out_w];
                    if iy < 0 || iy >= s.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..][..s.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *d = if ix < 0 || ix >= s.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto sample `n` of `dx`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, n: usize, dx: &mut [T]) {
    let s = g.input;
    let k = g.kernel;
    let p = g.out_plane();
    let pad = g.padding as isize;
    for ci in 0..s.c {
        let plane = &mut dx[(n * s.c + ci) * s.plane()..][..s.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..][..s.w];
                    for (ox, &v) in row[oy * g.out_w..][..g.out_w].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output and, when `keep_cols`, the
/// per-sample patch matrices concatenated.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let kk = g.patch_len();
    let p = g.out_plane();
    let out_shape = g.output();
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut saved = if keep_cols {
        vec![T::zero(); g.input.n * kk * p]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_cols { Vec::new() } else { vec![T::zero(); kk * p] };
    for n in 0..g.input.n {
        let cols: &mut [T] = if keep_cols {
            &mut saved[n * kk * p..][..kk * p]
        } else {
            &mut scratch
        };
        im2col(x, g, n, cols);
        let y = &mut out[n * g.cout * p..][..g.cout * p];
        for (co, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        T::gemm(g.cout, kk, p, weight, (kk, 1), cols, (p, 1), T::one(), y, (p, 1));
    }
    (out, saved)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    dy: &[T],
    weight: &[T],
    cols: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let kk = g.patch_len();
    let p = g.out_plane();
    let [need_x, need_w, need_b] = need;
    let mut dx = need_x.then(|| vec![T::zero(); g.input.numel()]);
    let mut dw = need_w.then(|| vec![T::zero(); g.cout * kk]);
    let mut db = need_b.then(|| vec![T::zero(); g.cout]);
    let mut dcols = if need_x { vec![T::zero(); kk * p] } else { Vec::new() };
    for n in 0..g.input.n {
        let dyn_ = &dy[n * g.cout * p..][..g.cout * p];
        if let Some(db) = db.as_mut() {
            for (co, row) in dyn_.chunks_exact(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let c = &cols[n * kk * p..][..kk * p];
            // dW += dY (Cout×P) · colsᵀ (P×KK)
            T::gemm(g.cout, p, kk, dyn_, (p, 1), c, (1, p), T::one(), dw, (kk, 1));
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ (KK×Cout) · dY (Cout×P)
            T::gemm(kk, g.cout, p, weight, (1, kk), dyn_, (p, 1), T::zero(), &mut dcols, (p, 1));
            col2im(&dcols, g, n, dx);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// 2×2 stride-2 max pooling. Returns values and the flat input index of each
/// window's first maximum in row-major window order.
pub(crate) fn max_pool2<T: Real>(x: &[T], s: Shape) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2× spatial replication.
pub(crate) fn upsample2<T: Real>(x: &[T], s: Shape) -> Vec<T> {
    let (oh, ow) = (s.h * 2, s.w * 2);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for nc in 0..s.n * s.c {
        let plane = &x[nc * s.plane()..][..s.plane()];
        for oy in 0..oh {
            let row = &plane[(oy / 2) * s.w..][..s.w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: each parent collects its four children.
pub(crate) fn upsample2_backward<T: Real>(dy: &[T], s: Shape) -> Vec<T> {
    let ow = s.w * 2;
    let mut dx = vec![T::zero(); s.numel()];
    for nc in 0..s.n * s.c {
        let src = &dy[nc * s.plane() * 4..][..s.plane() * 4];
        let dst = &mut dx[nc * s.plane()..][..s.plane()];
        for y in 0..s.h {
            for x in 0..s.w {
                let i = (2 * y) * ow + 2 * x;
                dst[y * s.w + x] = src[i] + src[i + 1] + src[i + ow] + src[i + ow + 1];
            }
        }
    }
    dx
}

/// Concatenate along channels, `a` first.
pub(crate) fn concat_channels<T: Real>(a: &[T], sa: Shape, b: &[T], sb: Shape) -> Vec<T> {
    let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut out = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa.n {
        out.extend_from_slice(&a[n * pa..][..pa]);
        out.extend_from_slice(&b[n * pb..][..pb]);
    }
    out
}

pub(crate) fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], s: Shape, w: &[f64], b: &[f64], cout: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
        let oh = (s.h + 2 * pad - k) / stride + 1;
        let ow = (s.w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; s.n * cout * oh * ow];
        for n in 0..s.n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..s.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                        acc += x[s.index(n, ci, iy as usize, ix as usize)]
                                            * w[((co * s.c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((n * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let s = Shape::new(2, 3, 7, 6);
        let x: Vec<f64> = (0..s.numel()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 1, 0), (3, 1, 0)] {
            if (s.h + 2 * pad - k) % stride != 0 || (s.w + 2 * pad - k) % stride != 0 {
                continue;
            }
            let cout = 4;
            let w: Vec<f64> = (0..cout * s.c * k * k).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            let b: Vec<f64> = (0..cout).map(|i| i as f64).collect();
            let g = ConvGeom {
                input: s,
                cout,
                kernel: k,
                stride,
                padding: pad,
                out_h: (s.h + 2 * pad - k) / stride + 1,
                out_w: (s.w + 2 * pad - k) / stride + 1,
            };
            let (out, _) = conv2d_forward(&x, &w, &b, &g, false);
            assert_eq!(out, naive_conv(&x, s, &w, &b, cout, k, stride, pad), "k={k} s={stride} p={pad}");
        }
    }

    #[test]
    fn pool_ties_pick_first() {
        let s = Shape::new(1, 1, 2, 2);
        let (v, arg) = max_pool2(&[3.0f32, 3.0, 3.0, 3.0], s);
        assert_eq!(v, vec![3.0]);
        assert_eq!(arg, vec![0]);
        let (_, arg) = max_pool2(&[1.0f32, 3.0, 3.0, 2.0], s);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(stable_sigmoid(0.0f32), 0.5);
        assert!(stable_sigmoid(-1000.0f32) >= 0.0);
        assert_eq!(stable_sigmoid(1000.0f32), 1.0);
    }
}
