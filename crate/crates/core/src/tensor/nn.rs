use super::graph::{GradSink, Op};
use super::shape::split_at_axis;
use super::{shape_err, Graph, Mode, Tensor, TensorError, Var};

/// Batch-norm hyperparameters. Running statistics move as
/// `r ← (1 − momentum)·r + momentum·batch`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
            mode: Mode::Train,
        }
    }
}

/// Identifies one dropout application. The mask bit for element `i` is a
/// pure function of the key and `i`, so reruns reproduce masks exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropoutKey {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    pub layer: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DropoutKey {
    fn stream(&self) -> u64 {
        [self.epoch, self.step, self.layer]
            .iter()
            .fold(splitmix64(self.seed), |h, &v| splitmix64(h ^ v))
    }

    /// Uniform draw in `[0, 1)` for element `i`.
    pub fn uniform(&self, i: u64) -> f64 {
        uniform_at(self.stream(), i)
    }
}

fn uniform_at(stream: u64, i: u64) -> f64 {
    (splitmix64(stream ^ splitmix64(i)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl Graph {
    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push(out, &[x], Op::Relu { x })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(shape_err("softmax", format!("axis {axis} for {:?}", xv.shape())));
        }
        let (outer, len, inner) = split_at_axis(xv.shape(), axis);
        let src = xv.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    data[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    data[at(l)] /= total;
                }
            }
        }
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        Ok(self.push(out, &[x], Op::Softmax { x, axis }))
    }

    /// Standardize over the last axis, then scale by `gamma` and shift by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), self.shape(gamma), self.shape(beta)),
            ));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.numel() / d);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for ((v, g), b) in row.iter().zip(gv).zip(bv) {
                let h = (v - mean) * is;
                xhat.push(h);
                data.push(g * h + b);
            }
        }
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1−p)`. Identity in
    /// eval mode or when `p == 0`.
    ///
    /// Panics unless `0 ≤ p < 1`.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, key: DropoutKey) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout rate {p} outside [0, 1)");
        if mode == Mode::Eval || p == 0.0 {
            return x;
        }
        let stream = key.stream();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel() as u64)
            .map(|i| if uniform_at(stream, i) < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        self.push(out, &[x], Op::Dropout { x, mask })
    }

    /// Mean over the batch of `−log softmax(logits)[label]` for `[N, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let [n, c] = *lv.shape() else {
            return Err(shape_err("cross_entropy", format!("logits {:?}", lv.shape())));
        };
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (row, &label) in lv.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

pub(super) fn softmax_backward(out: &Tensor, axis: usize, x: Var, g: &[f64], sink: &mut GradSink) {
    let (outer, len, inner) = split_at_axis(out.shape(), axis);
    let y = out.data();
    sink.with(x, |buf| {
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                for l in 0..len {
                    buf[at(l)] += y[at(l)] * (g[at(l)] - dot);
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub(super) fn layer_norm_backward(
    gamma: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    x: Var,
    gv: Var,
    bv: Var,
    g: &[f64],
    sink: &mut GradSink,
) {
    let d = gamma.numel();
    sink.with(gv, |buf| {
        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
            for ((b, gi), h) in buf.iter_mut().zip(grow).zip(hrow) {
                *b += gi * h;
            }
        }
    });
    sink.with(bv, |buf| {
        for grow in g.chunks(d) {
            for (b, gi) in buf.iter_mut().zip(grow) {
                *b += gi;
            }
        }
    });
    sink.with(x, |buf| {
        let rows = buf.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).zip(inv_std);
        for (((dx, grow), hrow), is) in rows {
            let dh: Vec<f64> = grow.iter().zip(gamma.data()).map(|(a, b)| a * b).collect();
            let mean_dh = dh.iter().sum::<f64>() / d as f64;
            let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for ((o, a), h) in dx.iter_mut().zip(&dh).zip(hrow) {
                *o += is * (a - mean_dh - h * mean_dhh);
            }
        }
    });
}
