use rayon::prelude::*;

use super::graph::{GradSink, Op};
use super::linalg::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::nn::BatchNormConfig;
use super::{shape_err, Graph, Mode, Tensor, TensorError, Var};

/// Geometry of one stride-1 convolution.
#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn new(x: &[usize], k: &[usize], pad: usize) -> Result<Self, TensorError> {
        let err = || shape_err("conv2d", format!("input {x:?}, kernel {k:?}, pad {pad}"));
        let (n, cin, h, w) = match *x {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(err()),
        };
        let [cout, kcin, kh, kw] = *k else {
            return Err(err());
        };
        if kcin != cin || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(err());
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            pad,
            ho: h + 2 * pad - kh + 1,
            wo: w + 2 * pad - kw + 1,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_item(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_item(&self) -> usize {
        self.cout * self.out_plane()
    }

    /// Input coordinate for output row/col `o` and kernel offset `k`, if it
    /// falls inside the unpadded input.
    fn src(o: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
        (o + k).checked_sub(pad).filter(|&i| i < len)
    }

    /// Unfold one item into a `patch × (ho·wo)` matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let plane = self.out_plane();
        let mut cols = vec![0.0; self.patch() * plane];
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * plane..][..plane];
                    for oy in 0..self.ho {
                        let Some(sy) = Self::src(oy, i, self.pad, self.h) else { continue };
                        let src = &x[(c * self.h + sy) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            if let Some(sx) = Self::src(ox, j, self.pad, self.w) {
                                row[oy * self.wo + ox] = src[sx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: fold a column matrix back, accumulating.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * plane..][..plane];
                    for oy in 0..self.ho {
                        let Some(sy) = Self::src(oy, i, self.pad, self.h) else { continue };
                        let dst = &mut dx[(c * self.h + sy) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            if let Some(sx) = Self::src(ox, j, self.pad, self.w) {
                                dst[sx] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Stride-1 cross-correlation with zero padding `pad` on both spatial
    /// axes. Input is `[C_in, H, W]` or `[N, C_in, H, W]`; kernel is
    /// `[C_out, C_in, kh, kw]`; bias is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, pad: usize) -> Result<Var, TensorError> {
        let d = ConvDims::new(self.shape(x), self.shape(k), pad)?;
        if self.shape(b) != [d.cout] {
            return Err(shape_err("conv2d", format!("bias {:?} for {} channels", self.shape(b), d.cout)));
        }
        let (xv, kv, bv) = (self.value(x).data(), self.value(k).data(), self.value(b).data());
        let mut out = vec![0.0; d.n * d.out_item()];
        out.par_chunks_mut(d.out_item())
            .zip(xv.par_chunks(d.in_item()))
            .for_each(|(o, xi)| {
                for (plane, &bias) in o.chunks_mut(d.out_plane()).zip(bv) {
                    plane.fill(bias);
                }
                let cols = d.im2col(xi);
                gemm_acc(kv, &cols, o, d.cout, d.patch(), d.out_plane());
            });
        let mut shape = self.shape(x).to_vec();
        let nd = shape.len();
        shape[nd - 3] = d.cout;
        shape[nd - 2] = d.ho;
        shape[nd - 1] = d.wo;
        Ok(self.push(Tensor { shape, data: out }, &[x, k, b], Op::Conv2d { x, k, b, pad }))
    }

    /// 2×2 max pooling with stride 2 over the last two axes. A trailing odd
    /// row or column is dropped; ties go to the first cell in row-major order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 || s[s.len() - 2] < 2 || s[s.len() - 1] < 2 {
            return Err(shape_err("maxpool2d", format!("input {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (ho, wo) = (h / 2, w / 2);
        let planes = xv.numel() / (h * w);
        let mut data = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv.data()[idx] > xv.data()[best] {
                            best = idx;
                        }
                    }
                    data.push(xv.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = s.to_vec();
        let nd = shape.len();
        shape[nd - 2] = ho;
        shape[nd - 1] = wo;
        Ok(self.push(Tensor { shape, data }, &[x], Op::MaxPool2d { x, argmax }))
    }

    /// Per-channel batch normalization of `[N, C, H, W]`.
    ///
    /// In training mode the batch mean and population variance over `N·H·W`
    /// are used and the running statistics move toward them by `momentum`.
    /// In eval mode the running statistics are used as-is.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        cfg: BatchNormConfig,
    ) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let [n, c, h, w] = s[..] else {
            return Err(shape_err("batch_norm2d", format!("input {s:?}")));
        };
        if self.shape(gamma) != [c]
            || self.shape(beta) != [c]
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(shape_err("batch_norm2d", format!("{c} channels, mismatched parameters")));
        }
        let train = cfg.mode == Mode::Train;
        if train && n < 2 {
            return Err(TensorError::BatchTooSmall(n));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let xv = self.value(x).data();
        let channel = |ch: usize| (0..n).flat_map(move |i| (i * c + ch) * plane..(i * c + ch + 1) * plane);
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (m, v) = if train {
                let m = channel(ch).map(|i| xv[i]).sum::<f64>() / count;
                let v = channel(ch).map(|i| (xv[i] - m).powi(2)).sum::<f64>() / count;
                running_mean[ch] = (1.0 - cfg.momentum) * running_mean[ch] + cfg.momentum * m;
                running_var[ch] = (1.0 - cfg.momentum) * running_var[ch] + cfg.momentum * v;
                (m, v)
            } else {
                (running_mean[ch], running_var[ch])
            };
            mean[ch] = m;
            inv_std[ch] = 1.0 / (v + cfg.eps).sqrt();
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (idx, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (idx / plane) % c;
            *xh = (xv[idx] - mean[ch]) * inv_std[ch];
            *o = gv[ch] * *xh + bv[ch];
        }
        Ok(self.push(
            Tensor { shape: s, data: out },
            &[x, gamma, beta],
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: train,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    xv: Var,
    kv: Var,
    bv: Var,
    pad: usize,
    g: &[f64],
    sink: &mut GradSink,
) {
    let d = ConvDims::new(x.shape(), k.shape(), pad).expect("validated in forward");
    let items: Vec<(&[f64], &[f64])> = x.data().chunks(d.in_item()).zip(g.chunks(d.out_item())).collect();
    if sink.wants(kv) {
        let partial: Vec<Vec<f64>> = items
            .par_iter()
            .map(|(xi, gi)| {
                let cols = d.im2col(xi);
                let mut dk = vec![0.0; d.cout * d.patch()];
                gemm_nt_acc(gi, &cols, &mut dk, d.cout, d.out_plane(), d.patch());
                dk
            })
            .collect();
        sink.with(kv, |buf| {
            for dk in &partial {
                for (b, v) in buf.iter_mut().zip(dk) {
                    *b += v;
                }
            }
        });
    }
    sink.with(bv, |buf| {
        for gi in g.chunks(d.out_item()) {
            for (b, plane) in buf.iter_mut().zip(gi.chunks(d.out_plane())) {
                *b += plane.iter().sum::<f64>();
            }
        }
    });
    sink.with(xv, |buf| {
        buf.par_chunks_mut(d.in_item())
            .zip(items.par_iter())
            .for_each(|(dx, (_, gi))| {
                let mut dcols = vec![0.0; d.patch() * d.out_plane()];
                gemm_tn_acc(k.data(), gi, &mut dcols, d.cout, d.patch(), d.out_plane());
                d.col2im(&dcols, dx);
            });
    });
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_backward(
    x_shape: &[usize],
    gamma: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    (x, gv, bv): (Var, Var, Var),
    g: &[f64],
    sink: &mut GradSink,
) {
    let (n, c) = (x_shape[0], x_shape[1]);
    let plane = x_shape[2] * x_shape[3];
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for (idx, (gi, xh)) in g.iter().zip(xhat).enumerate() {
        let ch = (idx / plane) % c;
        sum_g[ch] += gi;
        sum_gx[ch] += gi * xh;
    }
    sink.add(gv, &sum_gx);
    sink.add(bv, &sum_g);
    let count = (n * plane) as f64;
    sink.with(x, |buf| {
        for (idx, d) in buf.iter_mut().enumerate() {
            let ch = (idx / plane) % c;
            let scale = gamma.data()[ch] * inv_std[ch];
            *d += if batch_stats {
                scale * (g[idx] - sum_g[ch] / count - xhat[idx] * sum_gx[ch] / count)
            } else {
                scale * g[idx]
            };
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn bn_cfg(mode: Mode, momentum: f64) -> BatchNormConfig {
        BatchNormConfig {
            momentum,
            eps: 1e-12,
            mode,
        }
    }

    #[test]
    fn conv_hand_example() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let k = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
        assert_eq!(g.value(y).data(), &[6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = g.constant(t(&[1, 3, 4], &data));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn padding_grows_output() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 1, 4, 5]));
        let k = g.constant(Tensor::ones(&[3, 1, 3, 3]));
        let b = g.constant(t(&[3], &[0.0, 1.0, 2.0]));
        let y = g.conv2d(x, k, b, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 4, 5]);
        let v = g.value(y).data();
        assert_eq!(v[0], 4.0);
        assert_eq!(v[6], 9.0);
        assert_eq!(v[20], 5.0);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 2]));
        let k = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv2d(x, k, b, 0).is_err());
        let k2 = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(g.conv2d(x, k2, b, 0).is_err());
    }

    #[test]
    fn maxpool_single_window() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[6.0, 8.0, 12.0, 14.0]));
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.value(y).data(), &[14.0]);
    }

    #[test]
    fn maxpool_drops_odd_edge_and_keeps_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5, 3], 4.5));
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 1]);
        assert!(g.value(y).data().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 2, 2], 3.0));
        let y = g.maxpool2d(x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_too_small() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 4]));
        assert!(matches!(g.maxpool2d(x), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn batch_norm_two_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 1, 1], &[1.0, 3.0]));
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(Tensor::zeros(&[1]));
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let y = g
            .batch_norm2d(x, gamma, beta, &mut rm, &mut rv, bn_cfg(Mode::Train, 0.1))
            .unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
        assert!((rm[0] - 0.2).abs() < 1e-12);
        assert!((rv[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 1, 2], &[0.5, -1.0, 2.0, 3.0]));
        let gamma = g.constant(t(&[2], &[2.0, 1.0]));
        let beta = g.constant(t(&[2], &[0.0, 1.0]));
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let y = g
            .batch_norm2d(x, gamma, beta, &mut rm, &mut rv, bn_cfg(Mode::Eval, 0.1))
            .unwrap();
        let v = g.value(y).data();
        let want = [1.0, -2.0, 3.0, 4.0];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_train_then_eval_agree() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2, 2, 2], &data));
        let gamma = g.constant(t(&[2], &[1.5, 0.5]));
        let beta = g.constant(t(&[2], &[0.1, -0.2]));
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let cfg = BatchNormConfig {
            momentum: 1.0,
            eps: 1e-5,
            mode: Mode::Train,
        };
        let yt = g.batch_norm2d(x, gamma, beta, &mut rm, &mut rv, cfg).unwrap();
        let ye = g
            .batch_norm2d(x, gamma, beta, &mut rm, &mut rv, BatchNormConfig { mode: Mode::Eval, ..cfg })
            .unwrap();
        for (a, b) in g.value(yt).data().iter().zip(g.value(ye).data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_needs_two_items() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(Tensor::zeros(&[1]));
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        assert_eq!(
            g.batch_norm2d(x, gamma, beta, &mut rm, &mut rv, bn_cfg(Mode::Train, 0.1)),
            Err(TensorError::BatchTooSmall(1))
        );
        assert!(g
            .batch_norm2d(x, gamma, beta, &mut rm, &mut rv, bn_cfg(Mode::Eval, 0.1))
            .is_ok());
    }
}
