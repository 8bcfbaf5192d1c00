use super::{Graph, Var};
use crate::tensor::{gemm, strides, Tensor};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Numpy-style broadcast of two shapes, aligned at the trailing dimension.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast dimensions.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every output offset together with the matching offsets of two
/// broadcast operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let (last, la, lb) = (out[r - 1], sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    loop {
        for j in 0..last {
            f(o, oa + j * la, ob + j * lb);
            o += 1;
        }
        let mut d = r - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums a gradient of shape `out` down to `target` (the inverse of broadcasting).
pub(crate) fn reduce_to(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let st = aligned_strides(target, grad.shape());
    let zeros = vec![0; grad.ndim()];
    let mut acc = vec![0.0; target.iter().product()];
    let g = grad.data();
    for_each_broadcast(grad.shape(), &st, &zeros, |o, t, _| acc[t] += g[o]);
    Tensor::new(target, acc)
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// Partial derivatives (d/da, d/db) at (a, b).
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinOp::Add => (1.0, 1.0),
            BinOp::Sub => (1.0, -1.0),
            BinOp::Mul => (b, a),
            BinOp::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

fn broadcast_apply(a: &Tensor, b: &Tensor, op: BinOp) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| op.apply(x, y));
    }
    let out = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let (sa, sb) = (
        aligned_strides(a.shape(), &out),
        aligned_strides(b.shape(), &out),
    );
    let mut data = vec![0.0; out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = op.apply(ad[i], bd[j]));
    Tensor::new(&out, data)
}

fn broadcast_grads(a: &Tensor, b: &Tensor, grad: &Tensor, op: BinOp) -> (Tensor, Tensor) {
    let out = grad.shape().to_vec();
    let (sa, sb) = (
        aligned_strides(a.shape(), &out),
        aligned_strides(b.shape(), &out),
    );
    let mut ga = vec![0.0; grad.numel()];
    let mut gb = vec![0.0; grad.numel()];
    let (ad, bd, g) = (a.data(), b.data(), grad.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| {
        let (da, db) = op.partials(ad[i], bd[j]);
        ga[o] = g[o] * da;
        gb[o] = g[o] * db;
    });
    (
        reduce_to(&Tensor::new(&out, ga), a.shape()),
        reduce_to(&Tensor::new(&out, gb), b.shape()),
    )
}

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn binary(&mut self, a: Var, b: Var, op: BinOp) -> Var {
        let value = broadcast_apply(self.value(a), self.value(b), op);
        self.push(value, &[a, b], move |args| {
            let (ga, gb) = broadcast_grads(args.inputs[0], args.inputs[1], args.grad, op);
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Div)
    }

    /// Elementwise map with derivative `df(x, y)` in terms of input and output.
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.push(value, &[x], move |args| {
            let data = args
                .grad
                .data()
                .iter()
                .zip(args.inputs[0].data())
                .zip(args.output.data())
                .map(|((&g, &xi), &yi)| g * df(xi, yi))
                .collect();
            vec![Some(Tensor::new(args.grad.shape(), data))]
        })
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, move |v| v + k, |_, _| 1.0)
    }

    pub fn mul_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, move |v| v * k, move |_, _| k)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// Standard normal CDF.
    pub fn normal_cdf(&mut self, x: Var) -> Var {
        self.unary(x, normal_cdf, |x, _| normal_pdf(x))
    }

    /// `max(x, bound)`; the gradient still flows below the bound when it
    /// would push the input upward.
    pub fn lower_bound(&mut self, x: Var, bound: f64) -> Var {
        let value = self.value(x).map(|v| v.max(bound));
        self.push(value, &[x], move |args| {
            let data = args
                .grad
                .data()
                .iter()
                .zip(args.inputs[0].data())
                .map(|(&g, &xi)| if xi >= bound || g < 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(Tensor::new(args.grad.shape(), data))]
        })
    }

    /// Affine fake quantization `scale * (clamp(round(x/scale + zp), 0, qmax) - zp)`
    /// with a straight-through gradient.
    pub fn fake_quant(&mut self, x: Var, scale: f64, zero_point: i32, qmax: u32) -> Var {
        let value = self
            .value(x)
            .map(|v| crate::bitstream::weights::snap(v, scale, zero_point, qmax));
        self.push(value, &[x], |args| vec![Some(args.grad.clone())])
    }

    /// Detaches a value and replaces it: forward `replacement`, gradient
    /// passes to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor) -> Var {
        assert_eq!(self.shape(x), replacement.shape());
        self.push(replacement, &[x], |args| vec![Some(args.grad.clone())])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, &[x], |args| {
            vec![Some(Tensor::full(
                args.inputs[0].shape(),
                args.grad.data()[0],
            ))]
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sums over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len());
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(Tensor::new(&out_shape, out), &[x], move |args| {
            let g = args.grad.data();
            let mut data = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    data[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(&shape, data))]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let orig = self.shape(x).to_vec();
        let value = self.value(x).clone().reshape(shape);
        self.push(value, &[x], move |args| {
            vec![Some(args.grad.clone().reshape(&orig))]
        })
    }

    /// 2-D matrix product `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            false,
            false,
            m,
            n,
            k,
            1.0,
            self.value(a).data(),
            self.value(b).data(),
            0.0,
            &mut out,
        );
        self.push(Tensor::new(&[m, n], out), &[a, b], move |args| {
            let (av, bv, g) = (
                args.inputs[0].data(),
                args.inputs[1].data(),
                args.grad.data(),
            );
            let mut ga = vec![0.0; m * k];
            gemm(false, true, m, k, n, 1.0, g, bv, 0.0, &mut ga);
            let mut gb = vec![0.0; k * n];
            gemm(true, false, k, n, m, 1.0, av, g, 0.0, &mut gb);
            vec![
                Some(Tensor::new(&[m, k], ga)),
                Some(Tensor::new(&[k, n], gb)),
            ]
        })
    }

    /// Batched product `a (B x m x k) * b (B x k x n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "bmm {sa:?} x {sb:?}"
        );
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..bs {
                gemm(
                    false,
                    false,
                    m,
                    n,
                    k,
                    1.0,
                    &av[i * m * k..],
                    &bv[i * k * n..],
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        self.push(Tensor::new(&[bs, m, n], out), &[a, b], move |args| {
            let (av, bv, g) = (
                args.inputs[0].data(),
                args.inputs[1].data(),
                args.grad.data(),
            );
            let mut ga = vec![0.0; bs * m * k];
            let mut gb = vec![0.0; bs * k * n];
            for i in 0..bs {
                let gi = &g[i * m * n..];
                gemm(
                    false,
                    true,
                    m,
                    k,
                    n,
                    1.0,
                    gi,
                    &bv[i * k * n..],
                    0.0,
                    &mut ga[i * m * k..(i + 1) * m * k],
                );
                gemm(
                    true,
                    false,
                    k,
                    n,
                    m,
                    1.0,
                    &av[i * m * k..],
                    gi,
                    0.0,
                    &mut gb[i * k * n..(i + 1) * k * n],
                );
            }
            vec![
                Some(Tensor::new(&[bs, m, k], ga)),
                Some(Tensor::new(&[bs, k, n], gb)),
            ]
        })
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert!(
                    s.len() == first.len()
                        && s[..axis] == first[..axis]
                        && s[axis + 1..] == first[axis + 1..],
                    "concat shape mismatch"
                );
                s[axis]
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut out = vec![0.0; outer * total * inner];
        let mut start = 0;
        for (&p, &len) in parts.iter().zip(&sizes) {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                out[dst..dst + len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            start += len;
        }
        let mut shape = first.clone();
        shape[axis] = total;
        self.push(Tensor::new(&shape, out), parts, move |args| {
            let g = args.grad.data();
            let mut start = 0;
            sizes
                .iter()
                .zip(&args.inputs)
                .map(|(&len, input)| {
                    let mut data = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = (o * total + start) * inner;
                        data[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&g[src..src + len * inner]);
                    }
                    start += len;
                    Some(Tensor::new(input.shape(), data))
                })
                .collect()
        })
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start <= end && end <= shape[axis]);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (n, len) = (shape[axis], end - start);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.push(Tensor::new(&out_shape, out), &[x], move |args| {
            let g = args.grad.data();
            let mut data = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let s = (o * n + start) * inner;
                data[s..s + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(&shape, data))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[3, 1, 5], &[4, 1]), Some(vec![3, 4, 5]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }

    #[test]
    fn broadcast_binary_gradients() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4, 2], 1.0, &mut r);
        let b = Tensor::randn(&[4, 1], 1.0, &mut r).map(|v| v.abs() + 0.5);
        let err = check(&[a, b], |g, v| {
            let s = g.add(v[0], v[1]);
            let m = g.mul(s, v[1]);
            let d = g.div(m, v[1]);
            let d = g.sub(d, v[0]);
            let sq = g.square(d);
            let t = g.mul(sq, v[0]);
            g.sum_all(t)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn unary_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[5, 3], 1.0, &mut r);
        let err = check(&[x], |g, v| {
            let a = g.tanh(v[0]);
            let b = g.softplus(a);
            let c = g.sigmoid(b);
            let d = g.normal_cdf(v[0]);
            let e = g.mul(c, d);
            let f = g.exp(e);
            let h = g.leaky_relu(v[0], 0.1);
            let q = g.mul(f, h);
            let sq = g.square(v[0]);
            let s1 = g.add_scalar(sq, 1.0);
            let s = g.sqrt(s1);
            let l = g.ln(s);
            let lab = g.abs(v[0]);
            let o = g.add(q, l);
            let o = g.mul(o, lab);
            g.mean_all(o)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_bmm_concat_slice_gradients() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        let c = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let d = Tensor::randn(&[2, 4, 5], 1.0, &mut r);
        let err = check(&[a, b, c, d], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let bm = g.bmm(v[2], v[3]);
            let flat = g.reshape(bm, &[6, 5]);
            let sl = g.slice(flat, 1, 1, 3);
            let s2 = g.slice(sl, 0, 0, 3);
            let cat = g.concat(&[m, s2], 0);
            let sq = g.square(cat);
            let ax = g.sum_axis(sq, 1);
            let t = g.tanh(ax);
            g.sum_all(t)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn lower_bound_passes_upward_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![0.05, 0.2, 0.05]), true);
        let lb = g.lower_bound(x, 0.11);
        assert_eq!(g.value(lb).data(), &[0.11, 0.2, 0.11]);
        // loss = -lb[0] + lb[1] + lb[2]: first wants to grow, third to shrink
        let w = g.constant(Tensor::new(&[3], vec![-1.0, 1.0, 1.0]));
        let p = g.mul(lb, w);
        let loss = g.sum_all(p);
        let grads = g.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut g = Graph::no_grad();
        let x = g.leaf(Tensor::ones(&[2]), true);
        let y = g.exp(x);
        assert!(!g.requires_grad(y));
    }
}
