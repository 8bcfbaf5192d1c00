//! Single-image 2-D convolutions via im2col, plus mirror padding and crop.

use super::{Graph, Var};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> usize {
    (input - 1) * stride + kernel + output_pad - 2 * pad
}

/// Unfolds `(C, H, W)` into a `(C*k*k, Ho*Wo)` matrix.
fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.channels * k * k * plane];
    for c in 0..g.channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * plane;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto `(C, H, W)`.
fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    let mut x = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let dst = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * plane;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (o, &b) in bias.iter().enumerate() {
        for v in &mut out[o * plane..(o + 1) * plane] {
            *v += b;
        }
    }
}

fn channel_sums(grad: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    (0..channels)
        .map(|o| grad[o * plane..(o + 1) * plane].iter().sum())
        .collect()
}

/// Plain convolution forward, shared with callers that do not need a graph.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    assert!(
        xs.len() == 3 && ws.len() == 4 && ws[1] == xs[0] && ws[2] == ws[3],
        "conv2d {xs:?} * {ws:?}"
    );
    let g = Geometry {
        channels: xs[0],
        height: xs[1],
        width: xs[2],
        kernel: ws[2],
        stride,
        pad,
        out_h: conv_output_size(xs[1], ws[2], stride, pad),
        out_w: conv_output_size(xs[2], ws[2], stride, pad),
    };
    let cols = im2col(x.data(), &g);
    let (o, ckk, plane) = (ws[0], g.channels * g.kernel * g.kernel, g.out_h * g.out_w);
    let mut out = vec![0.0; o * plane];
    gemm(
        false,
        false,
        o,
        plane,
        ckk,
        1.0,
        w.data(),
        &cols,
        0.0,
        &mut out,
    );
    if let Some(b) = b {
        add_channel_bias(&mut out, b.data(), plane);
    }
    Tensor::new(&[o, g.out_h, g.out_w], out)
}

impl Graph {
    /// `x (C,H,W)`, `w (O,C,k,k)`, `b (O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = conv2d_forward(
            self.value(x),
            self.value(w),
            Some(self.value(b)),
            stride,
            pad,
        );
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geo = Geometry {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kernel: ws[2],
            stride,
            pad,
            out_h: value.shape()[1],
            out_w: value.shape()[2],
        };
        self.push(value, &[x, w, b], move |args| {
            let (o, ckk, plane) = (
                ws[0],
                geo.channels * geo.kernel * geo.kernel,
                geo.out_h * geo.out_w,
            );
            let g = args.grad.data();
            let cols = im2col(args.inputs[0].data(), &geo);
            let mut gw = vec![0.0; o * ckk];
            gemm(false, true, o, ckk, plane, 1.0, g, &cols, 0.0, &mut gw);
            drop(cols);
            let mut gcols = vec![0.0; ckk * plane];
            gemm(
                true,
                false,
                ckk,
                plane,
                o,
                1.0,
                args.inputs[1].data(),
                g,
                0.0,
                &mut gcols,
            );
            let gx = col2im(&gcols, &geo);
            vec![
                Some(Tensor::new(&xs, gx)),
                Some(Tensor::new(&ws, gw)),
                Some(Tensor::new(&[o], channel_sums(g, o, plane))),
            ]
        })
    }

    /// Transposed convolution: `x (Cin,H,W)`, `w (Cin,Cout,k,k)`, `b (Cout)`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(
            xs.len() == 3 && ws.len() == 4 && ws[0] == xs[0] && ws[2] == ws[3],
            "deconv {xs:?} * {ws:?}"
        );
        let (cin, cout, k) = (ws[0], ws[1], ws[2]);
        let out_h = conv_transpose_output_size(xs[1], k, stride, pad, output_pad);
        let out_w = conv_transpose_output_size(xs[2], k, stride, pad, output_pad);
        // geometry of the adjoint convolution that maps the output back to x
        let geo = Geometry {
            channels: cout,
            height: out_h,
            width: out_w,
            kernel: k,
            stride,
            pad,
            out_h: xs[1],
            out_w: xs[2],
        };
        let plane_in = xs[1] * xs[2];
        let ckk = cout * k * k;
        let mut cols = vec![0.0; ckk * plane_in];
        gemm(
            true,
            false,
            ckk,
            plane_in,
            cin,
            1.0,
            self.value(w).data(),
            self.value(x).data(),
            0.0,
            &mut cols,
        );
        let mut out = col2im(&cols, &geo);
        drop(cols);
        add_channel_bias(&mut out, self.value(b).data(), out_h * out_w);
        let value = Tensor::new(&[cout, out_h, out_w], out);
        self.push(value, &[x, w, b], move |args| {
            let g = args.grad.data();
            let gcols = im2col(g, &geo);
            let mut gx = vec![0.0; cin * plane_in];
            gemm(
                false,
                false,
                cin,
                plane_in,
                ckk,
                1.0,
                args.inputs[1].data(),
                &gcols,
                0.0,
                &mut gx,
            );
            let mut gw = vec![0.0; cin * ckk];
            gemm(
                false,
                true,
                cin,
                ckk,
                plane_in,
                1.0,
                args.inputs[0].data(),
                &gcols,
                0.0,
                &mut gw,
            );
            vec![
                Some(Tensor::new(&xs, gx)),
                Some(Tensor::new(&ws, gw)),
                Some(Tensor::new(&[cout], channel_sums(g, cout, out_h * out_w))),
            ]
        })
    }

    /// Extends `(C,H,W)` to `(C,H+pad_h,W+pad_w)` by mirroring about the
    /// last row/column (repeatedly when the pad exceeds the size).
    pub fn mirror_pad(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (nh, nw) = (h + pad_h, w + pad_w);
        let rows: Vec<usize> = (0..nh).map(|i| mirror_index(i, h)).collect();
        let cols: Vec<usize> = (0..nw).map(|j| mirror_index(j, w)).collect();
        let src = self.value(x).data();
        let mut out = vec![0.0; c * nh * nw];
        for ch in 0..c {
            for (i, &r) in rows.iter().enumerate() {
                for (j, &q) in cols.iter().enumerate() {
                    out[(ch * nh + i) * nw + j] = src[(ch * h + r) * w + q];
                }
            }
        }
        self.push(Tensor::new(&[c, nh, nw], out), &[x], move |args| {
            let g = args.grad.data();
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for (i, &r) in rows.iter().enumerate() {
                    for (j, &q) in cols.iter().enumerate() {
                        gx[(ch * h + r) * w + q] += g[(ch * nh + i) * nw + j];
                    }
                }
            }
            vec![Some(Tensor::new(&[c, h, w], gx))]
        })
    }

    /// Keeps the top-left `(C, h, w)` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let rows = self.slice(x, 1, 0, h);
        self.slice(rows, 2, 0, w)
    }
}

/// Index into `0..n` for position `i` of a mirror-extended axis.
fn mirror_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let (oh, ow) = (
            conv_output_size(h, k, stride, pad),
            conv_output_size(wd, k, stride, pad),
        );
        let mut out = Tensor::zeros(&[o, oh, ow]);
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xx * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[ic, iy as usize, ix as usize])
                                        * w.at(&[oc, ic, ki, kj]);
                                }
                            }
                        }
                    }
                    out.set(&[oc, y, xx], acc);
                }
            }
        }
        out
    }

    /// Transposed convolution by direct scatter.
    fn naive_deconv(
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
        op: usize,
    ) -> Tensor {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[1], w.shape()[2]);
        let (oh, ow) = (
            conv_transpose_output_size(h, k, stride, pad, op),
            conv_transpose_output_size(wd, k, stride, pad, op),
        );
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for oc in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    out.set(&[oc, y, xx], b.data()[oc]);
                }
            }
        }
        for ic in 0..cin {
            for y in 0..h {
                for xx in 0..wd {
                    for oc in 0..cout {
                        for ki in 0..k {
                            for kj in 0..k {
                                let oy = (y * stride + ki) as isize - pad as isize;
                                let ox = (xx * stride + kj) as isize - pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    let idx = [oc, oy as usize, ox as usize];
                                    let v =
                                        out.at(&idx) + x.at(&[ic, y, xx]) * w.at(&[ic, oc, ki, kj]);
                                    out.set(&idx, v);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 9, 7], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, 5, 5], 1.0, &mut r);
        let b = Tensor::randn(&[4], 1.0, &mut r);
        let mut g = Graph::no_grad();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv2d(xv, wv, bv, 2, 2);
        let expect = naive_conv(&x, &w, &b, 2, 2);
        assert_eq!(g.shape(y), &[4, 5, 4]);
        assert!(g.value(y).max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn deconv_matches_naive_and_doubles_size() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 4, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 5, 5], 1.0, &mut r);
        let b = Tensor::randn(&[2], 1.0, &mut r);
        let mut g = Graph::no_grad();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv_transpose2d(xv, wv, bv, 2, 2, 1);
        assert_eq!(g.shape(y), &[2, 8, 10]);
        let expect = naive_deconv(&x, &w, &b, 2, 2, 1);
        assert!(g.value(y).max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn conv_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 6, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        let w2 = Tensor::randn(&[3, 2, 5, 5], 0.5, &mut r);
        let b2 = Tensor::randn(&[2], 0.5, &mut r);
        let err = check(&[x, w, b, w2, b2], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1);
            let t = g.tanh(y);
            let z = g.conv_transpose2d(t, v[3], v[4], 2, 2, 1);
            let p = g.mirror_pad(z, 3, 2);
            let c = g.crop(p, 5, 7);
            let sq = g.square(c);
            g.sum_all(sq)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn mirror_pad_reflects() {
        assert_eq!(
            (0..7).map(|i| mirror_index(i, 3)).collect::<Vec<_>>(),
            vec![0, 1, 2, 1, 0, 1, 2]
        );
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]));
        let p = g.mirror_pad(x, 0, 2);
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 2.0, 1.0]);
    }
}
