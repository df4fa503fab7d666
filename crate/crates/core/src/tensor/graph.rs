use super::{shape_err, Tensor, TensorError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(super) struct Node {
    pub(super) value: Tensor,
    pub(super) grad: Option<Tensor>,
    pub(super) requires_grad: bool,
    pub(super) op: Op,
}

/// Recorded operation plus whatever its backward rule needs beyond the input
/// and output values.
pub(super) enum Op {
    Leaf,
    /// `b`'s shape is a suffix of `a`'s; `b` is broadcast over the leading axes.
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    MeanAxis { x: Var, axis: usize },
    Reshape { x: Var },
    Transpose { x: Var, a0: usize, a1: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Relu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm2d { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    /// Registry name of the operation.
    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm2d { .. } => "batch_norm2d",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

/// Names of every differentiable operation a [`Graph`] can record.
pub const DIFFERENTIABLE_OPS: [&str; 19] = [
    "add",
    "mul",
    "scale",
    "sum",
    "mean_axis",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "matmul",
    "linear",
    "conv2d",
    "maxpool2d",
    "relu",
    "softmax",
    "layer_norm",
    "batch_norm2d",
    "dropout",
    "cross_entropy",
];

/// Accumulates gradient contributions for the nodes that want them.
pub(super) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl GradSink<'_> {
    pub(super) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Run `f` on the (zero-initialized on first use) gradient buffer of `v`.
    pub(super) fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    pub(super) fn add(&mut self, v: Var, g: &[f64]) {
        self.with(v, |buf| {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        });
    }
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    pub(super) nodes: Vec<Node>,
    consumed: bool,
    fault: Option<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deliberately corrupt the backward rule of the named op (its upstream
    /// gradient is scaled by 1.5). Exists so gradient checkers can prove
    /// they catch a broken rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(t, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub(super) fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward's loss with respect to `v`, if `v`
    /// requires one and influenced the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Element-wise sum; `b` may have a suffix of `a`'s shape and is then
    /// broadcast over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", format!("{sa:?} + {sb:?}")));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<f64> = av
            .data()
            .chunks(bv.len())
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, &[a, b], Op::Add { a, b }))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|v| v * c).collect(),
        };
        self.push(out, &[x], Op::Scale { x, c })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum { x })
    }

    /// Reverse pass from a scalar `loss`. Populates [`Graph::grad`] for every
    /// node that requires a gradient. Can run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let corrupted: Option<Vec<f64>> = match &self.fault {
                Some(f) if f == op.name() => Some(g.iter().map(|v| v * 1.5).collect()),
                _ => None,
            };
            {
                let g = corrupted.as_deref().unwrap_or(&g);
                let mut sink = GradSink {
                    grads: &mut grads,
                    nodes: &self.nodes,
                };
                backward_op(&self.nodes, i, &op, g, &mut sink);
            }
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor { shape, data: g });
        }
        Ok(())
    }
}

fn backward_op(nodes: &[Node], out: usize, op: &Op, g: &[f64], sink: &mut GradSink) {
    let val = |v: Var| &nodes[v.0].value;
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            sink.add(*a, g);
            sink.with(*b, |buf| {
                for chunk in g.chunks(buf.len()) {
                    for (b, x) in buf.iter_mut().zip(chunk) {
                        *b += x;
                    }
                }
            });
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            sink.with(*a, |buf| {
                for ((d, gi), bi) in buf.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            });
            sink.with(*b, |buf| {
                for ((d, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            });
        }
        Op::Scale { x, c } => sink.with(*x, |buf| {
            for (d, gi) in buf.iter_mut().zip(g) {
                *d += gi * c;
            }
        }),
        Op::Sum { x } => sink.with(*x, |buf| {
            for d in buf.iter_mut() {
                *d += g[0];
            }
        }),
        Op::MeanAxis { x, axis } => super::shape::mean_axis_backward(val(*x), *axis, *x, g, sink),
        Op::Reshape { x } => sink.add(*x, g),
        Op::Transpose { x, a0, a1 } => {
            super::shape::transpose_backward(&nodes[out].value, *a0, *a1, *x, g, sink)
        }
        Op::Concat { xs, axis } => {
            let shapes: Vec<&[usize]> = xs.iter().map(|v| val(*v).shape()).collect();
            super::shape::concat_backward(&shapes, xs, *axis, g, sink)
        }
        Op::Narrow { x, axis, start } => {
            super::shape::narrow_backward(val(*x).shape(), *axis, *start, &nodes[out].value, *x, g, sink)
        }
        Op::MatMul { a, b } => super::linalg::matmul_backward(val(*a), val(*b), *a, *b, g, sink),
        Op::Linear { x, w, b } => {
            super::linalg::linear_backward(val(*x), val(*w), *x, *w, *b, g, sink)
        }
        Op::Conv2d { x, k, b, pad } => {
            super::conv::conv2d_backward(val(*x), val(*k), *x, *k, *b, *pad, g, sink)
        }
        Op::MaxPool2d { x, argmax } => sink.with(*x, |buf| {
            for (gi, &idx) in g.iter().zip(argmax) {
                buf[idx] += gi;
            }
        }),
        Op::Relu { x } => {
            let xv = val(*x).data();
            sink.with(*x, |buf| {
                for ((d, gi), xi) in buf.iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            })
        }
        Op::Softmax { x, axis } => {
            super::nn::softmax_backward(&nodes[out].value, *axis, *x, g, sink)
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => super::nn::layer_norm_backward(val(*gamma), xhat, inv_std, *x, *gamma, *beta, g, sink),
        Op::BatchNorm2d {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => super::conv::batch_norm_backward(
            val(*x).shape(),
            val(*gamma),
            xhat,
            inv_std,
            *batch_stats,
            (*x, *gamma, *beta),
            g,
            sink,
        ),
        Op::Dropout { x, mask } => sink.with(*x, |buf| {
            for ((d, gi), m) in buf.iter_mut().zip(g).zip(mask) {
                *d += gi * m;
            }
        }),
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let n = labels.len();
            let c = probs.len() / n;
            sink.with(*logits, |buf| {
                let scale = g[0] / n as f64;
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        buf[i * c + j] += scale * (probs[i * c + j] - onehot);
                    }
                }
            })
        }
    }
}
