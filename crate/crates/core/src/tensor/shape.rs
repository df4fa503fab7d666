use super::graph::{GradSink, Op};
use super::{shape_err, Graph, Tensor, TensorError, Var};

/// `(outer, len, inner)` extents around `axis`.
pub(super) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn swap_axes(data: &[f64], shape: &[usize], a0: usize, a1: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a0, a1);
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut src_strides = in_strides.clone();
    src_strides.swap(a0, a1);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl Graph {
    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(shape_err("mean_axis", format!("axis {axis} for shape {:?}", xv.shape())));
        }
        let (outer, len, inner) = split_at_axis(xv.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for d in data.iter_mut() {
            *d /= len as f64;
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let out = Tensor { shape, data };
        Ok(self.push(out, &[x], Op::MeanAxis { x, axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).reshaped(shape).map_err(|_| {
            shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)))
        })?;
        Ok(self.push(out, &[x], Op::Reshape { x }))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if a0 >= xv.ndim() || a1 >= xv.ndim() {
            return Err(shape_err("transpose", format!("axes {a0},{a1} for {:?}", xv.shape())));
        }
        let (data, shape) = swap_axes(xv.data(), xv.shape(), a0, a1);
        Ok(self.push(Tensor { shape, data }, &[x], Op::Transpose { x, a0, a1 }))
    }

    /// Join along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self
            .value(*xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_rank = s.len() == first.len();
            if !same_rank || (0..s.len()).any(|d| d != axis && s[d] != first[d]) {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} along {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let xv = self.value(v);
                let block = xv.shape()[axis] * inner;
                data.extend_from_slice(&xv.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor { shape, data },
            xs,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.ndim() || len == 0 || start + len > xv.shape()[axis] {
            return Err(shape_err(
                "narrow",
                format!("{start}+{len} along axis {axis} of {:?}", xv.shape()),
            ));
        }
        let (outer, full, inner) = split_at_axis(xv.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor { shape, data }, &[x], Op::Narrow { x, axis, start }))
    }
}

pub(super) fn mean_axis_backward(x: &Tensor, axis: usize, xv: Var, g: &[f64], sink: &mut GradSink) {
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    let scale = 1.0 / len as f64;
    sink.with(xv, |buf| {
        for o in 0..outer {
            let src = &g[o * inner..(o + 1) * inner];
            for l in 0..len {
                let dst = &mut buf[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * scale;
                }
            }
        }
    });
}

pub(super) fn transpose_backward(out: &Tensor, a0: usize, a1: usize, x: Var, g: &[f64], sink: &mut GradSink) {
    let (back, _) = swap_axes(g, out.shape(), a0, a1);
    sink.add(x, &back);
}

pub(super) fn concat_backward(shapes: &[&[usize]], xs: &[Var], axis: usize, g: &[f64], sink: &mut GradSink) {
    let (outer, _, inner) = split_at_axis(shapes[0], axis);
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut offset = 0;
    for (&v, s) in xs.iter().zip(shapes) {
        let block = s[axis] * inner;
        sink.with(v, |buf| {
            for o in 0..outer {
                let src = &g[o * total * inner + offset..o * total * inner + offset + block];
                for (d, x) in buf[o * block..(o + 1) * block].iter_mut().zip(src) {
                    *d += x;
                }
            }
        });
        offset += block;
    }
}

pub(super) fn narrow_backward(
    in_shape: &[usize],
    axis: usize,
    start: usize,
    out: &Tensor,
    x: Var,
    g: &[f64],
    sink: &mut GradSink,
) {
    let (outer, full, inner) = split_at_axis(in_shape, axis);
    let len = out.shape()[axis];
    sink.with(x, |buf| {
        for o in 0..outer {
            let base = (o * full + start) * inner;
            let src = &g[o * len * inner..(o + 1) * len * inner];
            for (d, s) in buf[base..base + len * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn mean_of_constant() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 3, 4], 1.5));
        let m = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.shape(m), &[2, 4]);
        assert!(g.value(m).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn reshape_roundtrip() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], (0..6).map(|i| i as f64).collect()));
        let r = g.reshape(x, &[3, 2]).unwrap();
        let back = g.reshape(r, &[2, 3]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        assert!(g.reshape(x, &[4]).is_err());
    }

    #[test]
    fn transpose_2d() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.transpose(x, 0, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn concat_and_narrow_invert() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.param(t(&[2, 1], vec![5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.narrow(c, 1, 0, 2).unwrap();
        assert_eq!(g.value(back), g.value(a));
        let tail = g.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(tail), g.value(b));
        assert!(g.narrow(c, 1, 2, 2).is_err());
    }

    #[test]
    fn concat_grad_splits_by_slice() {
        let mut g = Graph::new();
        let a = g.param(t(&[1, 2], vec![1.0, 2.0]));
        let b = g.param(t(&[1, 3], vec![3.0, 4.0, 5.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        let w = g.constant(t(&[1, 5], vec![10.0, 20.0, 30.0, 40.0, 50.0]));
        let y = g.mul(c, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[30.0, 40.0, 50.0]);
    }

    #[test]
    fn concat_rejects_mismatch() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 2]));
        let b = g.param(Tensor::zeros(&[3, 1]));
        assert!(g.concat(&[a, b], 1).is_err());
    }
}
