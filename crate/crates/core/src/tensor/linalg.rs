use super::graph::{GradSink, Op};
use super::{shape_err, Graph, Tensor, TensorError, Var};

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub(super) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: m×n`, `b: k×n`, `out: m×k`.
pub(super) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += aᵀ · g` for `a: m×k`, `g: m×n`, `out: k×n`.
pub(super) fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
}

/// Matmul geometry: `batch` independent `m×k · k×n` products, with `b`
/// either shared (2-D) or batched like `a`.
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims, TensorError> {
    let err = || shape_err("matmul", format!("{a:?} x {b:?}"));
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(err());
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let shared_b = b.len() == 2;
    if !shared_b && a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(err());
    }
    Ok(MatMulDims {
        batch,
        m,
        k,
        n,
        shared_b,
    })
}

impl Graph {
    /// Matrix product over the last two axes. `b` is either 2-D (shared by
    /// every leading index of `a`) or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = matmul_dims(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; d.batch * d.m * d.n];
        if d.shared_b {
            gemm_acc(av, bv, &mut out, d.batch * d.m, d.k, d.n);
        } else {
            for t in 0..d.batch {
                gemm_acc(
                    &av[t * d.m * d.k..(t + 1) * d.m * d.k],
                    &bv[t * d.k * d.n..(t + 1) * d.k * d.n],
                    &mut out[t * d.m * d.n..(t + 1) * d.m * d.n],
                    d.m,
                    d.k,
                    d.n,
                );
            }
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = d.n;
        Ok(self.push(Tensor { shape, data: out }, &[a, b], Op::MatMul { a, b }))
    }

    /// Affine map on the last axis: `x · w + b` with `w: d_in×d_out`, `b: d_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let d_in = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != d_in || bs != [ws[1]] {
            return Err(shape_err("linear", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let d_out = ws[1];
        let rows = self.value(x).numel() / d_in;
        let bias = self.value(b).data();
        let mut out: Vec<f64> = bias.iter().cycle().take(rows * d_out).copied().collect();
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, rows, d_in, d_out);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = d_out;
        Ok(self.push(Tensor { shape, data: out }, &[x, w, b], Op::Linear { x, w, b }))
    }
}

pub(super) fn matmul_backward(a: &Tensor, b: &Tensor, av: Var, bv: Var, g: &[f64], sink: &mut GradSink) {
    let d = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    if d.shared_b {
        let rows = d.batch * d.m;
        sink.with(av, |buf| gemm_nt_acc(g, b.data(), buf, rows, d.n, d.k));
        sink.with(bv, |buf| gemm_tn_acc(a.data(), g, buf, rows, d.k, d.n));
        return;
    }
    let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
    sink.with(av, |buf| {
        for t in 0..d.batch {
            gemm_nt_acc(
                &g[t * mn..(t + 1) * mn],
                &b.data()[t * kn..(t + 1) * kn],
                &mut buf[t * mk..(t + 1) * mk],
                d.m,
                d.n,
                d.k,
            );
        }
    });
    sink.with(bv, |buf| {
        for t in 0..d.batch {
            gemm_tn_acc(
                &a.data()[t * mk..(t + 1) * mk],
                &g[t * mn..(t + 1) * mn],
                &mut buf[t * kn..(t + 1) * kn],
                d.m,
                d.k,
                d.n,
            );
        }
    });
}

pub(super) fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    xv: Var,
    wv: Var,
    bv: Var,
    g: &[f64],
    sink: &mut GradSink,
) {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / d_in;
    sink.with(xv, |buf| gemm_nt_acc(g, w.data(), buf, rows, d_out, d_in));
    sink.with(wv, |buf| gemm_tn_acc(x.data(), g, buf, rows, d_in, d_out));
    sink.with(bv, |buf| {
        for row in g.chunks(d_out) {
            for (b, gi) in buf.iter_mut().zip(row) {
                *b += gi;
            }
        }
    });
}
