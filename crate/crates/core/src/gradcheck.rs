//! Central finite-difference checks of every differentiable graph op and of
//! the full tiny networks.
//!
//! The error for one coordinate is `|analytic − numeric| / max(1, |numeric|)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{forward, init_params, ArchConfig, Bound, ForwardCtx, ModelParams};
use crate::tensor::{BatchNormConfig, DropoutKey, Graph, Mode, Tensor, TensorError, Var, DIFFERENTIABLE_OPS};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_TRIALS: usize = 100;

const OP_STEP: f64 = 1e-6;
const MODEL_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub seed: u64,
    /// Corrupt this op's backward rule, to prove the checker notices.
    pub inject_fault: Option<String>,
    pub include_models: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            seed: 0,
            inject_fault: None,
            include_models: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub coords: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub ops: Vec<CheckResult>,
    pub models: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().chain(&self.models).all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.ops.iter().chain(&self.models).filter(|c| !c.passed()).collect()
    }

    /// Fixed-width table, one row per check.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>7} {:>9} {:>12} {:>10}  status\n",
            "check", "trials", "coords", "max_error", "tolerance"
        );
        for c in self.ops.iter().chain(&self.models) {
            s.push_str(&format!(
                "{:<16} {:>7} {:>9} {:>12.3e} {:>10.0e}  {}\n",
                c.name,
                c.trials,
                c.coords,
                c.max_error,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;

/// One randomized instance of an op: inputs plus how to apply it.
struct Case {
    inputs: Vec<Tensor>,
    build: Box<Build>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive shape")
}

fn dims(rng: &mut ChaCha8Rng, nd: usize, max: usize) -> Vec<usize> {
    (0..nd).map(|_| rng.gen_range(1..=max)).collect()
}

/// Values spaced at least `gap` apart, in random order.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let data = order.iter().map(|&k| (k as f64 - n as f64 / 2.0) * gap).collect();
    Tensor::new(shape, data).expect("positive shape")
}

fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let case = |inputs: Vec<Tensor>, build: Box<Build>| Case { inputs, build };
    match op {
        "add" => {
            let s = dims(rng, 3, 4);
            let suffix = rng.gen_range(0..=3);
            let a = rand_tensor(rng, &s, -2.0, 2.0);
            let b = rand_tensor(rng, &s[suffix.min(2)..], -2.0, 2.0);
            case(vec![a, b], Box::new(|g, v| g.add(v[0], v[1])))
        }
        "mul" => {
            let s = dims(rng, 2, 5);
            let inputs = vec![rand_tensor(rng, &s, -2.0, 2.0), rand_tensor(rng, &s, -2.0, 2.0)];
            case(inputs, Box::new(|g, v| g.mul(v[0], v[1])))
        }
        "scale" => {
            let c = rng.gen_range(-3.0..3.0);
            let s = dims(rng, 2, 5);
            case(vec![rand_tensor(rng, &s, -2.0, 2.0)], Box::new(move |g, v| Ok(g.scale(v[0], c))))
        }
        "sum" => {
            let s = dims(rng, 3, 4);
            case(vec![rand_tensor(rng, &s, -2.0, 2.0)], Box::new(|g, v| Ok(g.sum(v[0]))))
        }
        "mean_axis" => {
            let s = dims(rng, 3, 4);
            let axis = rng.gen_range(0..3);
            case(
                vec![rand_tensor(rng, &s, -2.0, 2.0)],
                Box::new(move |g, v| g.mean_axis(v[0], axis)),
            )
        }
        "reshape" => {
            let s = dims(rng, 3, 4);
            let to = [s[0] * s[1], s[2]];
            case(vec![rand_tensor(rng, &s, -2.0, 2.0)], Box::new(move |g, v| g.reshape(v[0], &to)))
        }
        "transpose" => {
            let s = dims(rng, 3, 4);
            let (a0, a1) = (rng.gen_range(0..3), rng.gen_range(0..3));
            case(
                vec![rand_tensor(rng, &s, -2.0, 2.0)],
                Box::new(move |g, v| g.transpose(v[0], a0, a1)),
            )
        }
        "concat" => {
            let base = dims(rng, 3, 3);
            let axis = rng.gen_range(0..3);
            let k = rng.gen_range(1..=3);
            let inputs = (0..k)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = rng.gen_range(1..=3);
                    rand_tensor(rng, &s, -2.0, 2.0)
                })
                .collect();
            case(inputs, Box::new(move |g, v| g.concat(v, axis)))
        }
        "narrow" => {
            let s = dims(rng, 3, 4);
            let axis = rng.gen_range(0..3);
            let start = rng.gen_range(0..s[axis]);
            let len = rng.gen_range(1..=s[axis] - start);
            case(
                vec![rand_tensor(rng, &s, -2.0, 2.0)],
                Box::new(move |g, v| g.narrow(v[0], axis, start, len)),
            )
        }
        "matmul" => {
            let (m, k, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let (a_shape, b_shape) = match rng.gen_range(0..3) {
                0 => (vec![m, k], vec![k, n]),
                1 => {
                    let b = rng.gen_range(1..=3);
                    (vec![b, m, k], vec![b, k, n])
                }
                _ => (vec![rng.gen_range(1..=3), m, k], vec![k, n]),
            };
            let inputs = vec![rand_tensor(rng, &a_shape, -2.0, 2.0), rand_tensor(rng, &b_shape, -2.0, 2.0)];
            case(inputs, Box::new(|g, v| g.matmul(v[0], v[1])))
        }
        "linear" => {
            let (d_in, d_out) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let nd = rng.gen_range(1..=2);
            let mut xs = dims(rng, nd, 3);
            xs.push(d_in);
            let inputs = vec![
                rand_tensor(rng, &xs, -2.0, 2.0),
                rand_tensor(rng, &[d_in, d_out], -1.0, 1.0),
                rand_tensor(rng, &[d_out], -1.0, 1.0),
            ];
            case(inputs, Box::new(|g, v| g.linear(v[0], v[1], v[2])))
        }
        "conv2d" => {
            let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(3..=5), rng.gen_range(3..=5));
            let (kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let pad = rng.gen_range(0..=1);
            let inputs = vec![
                rand_tensor(rng, &[n, cin, h, w], -2.0, 2.0),
                rand_tensor(rng, &[cout, cin, kh, kw], -1.0, 1.0),
                rand_tensor(rng, &[cout], -1.0, 1.0),
            ];
            case(inputs, Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], pad)))
        }
        "maxpool2d" => {
            let s = [rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(2..=5)];
            case(vec![distinct_tensor(rng, &s, 0.05)], Box::new(|g, v| g.maxpool2d(v[0])))
        }
        "relu" => {
            let s = dims(rng, 2, 5);
            let mut x = rand_tensor(rng, &s, 0.05, 2.0);
            for v in x.data_mut() {
                if rng.gen_bool(0.5) {
                    *v = -*v;
                }
            }
            case(vec![x], Box::new(|g, v| Ok(g.relu(v[0]))))
        }
        "softmax" => {
            let s = dims(rng, 3, 4);
            let axis = rng.gen_range(0..3);
            case(
                vec![rand_tensor(rng, &s, -3.0, 3.0)],
                Box::new(move |g, v| g.softmax(v[0], axis)),
            )
        }
        "layer_norm" => {
            let d = rng.gen_range(2..=6);
            let mut s = dims(rng, 2, 3);
            s.push(d);
            let inputs = vec![
                rand_tensor(rng, &s, -2.0, 2.0),
                rand_tensor(rng, &[d], 0.5, 1.5),
                rand_tensor(rng, &[d], -0.5, 0.5),
            ];
            case(inputs, Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)))
        }
        "batch_norm2d" => {
            let c = rng.gen_range(1..=3);
            let s = [rng.gen_range(2..=3), c, rng.gen_range(1..=3), rng.gen_range(1..=3)];
            let inputs = vec![
                rand_tensor(rng, &s, -2.0, 2.0),
                rand_tensor(rng, &[c], 0.5, 1.5),
                rand_tensor(rng, &[c], -0.5, 0.5),
            ];
            case(
                inputs,
                Box::new(move |g, v| {
                    let (mut rm, mut rv) = (vec![0.0; c], vec![1.0; c]);
                    let cfg = BatchNormConfig {
                        mode: Mode::Train,
                        ..BatchNormConfig::default()
                    };
                    g.batch_norm2d(v[0], v[1], v[2], &mut rm, &mut rv, cfg)
                }),
            )
        }
        "dropout" => {
            let s = dims(rng, 2, 6);
            let key = DropoutKey {
                seed: rng.gen(),
                ..DropoutKey::default()
            };
            case(
                vec![rand_tensor(rng, &s, -2.0, 2.0)],
                Box::new(move |g, v| Ok(g.dropout(v[0], 0.3, Mode::Train, key))),
            )
        }
        "cross_entropy" => {
            let (n, c) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            case(
                vec![rand_tensor(rng, &[n, c], -3.0, 3.0)],
                Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
            )
        }
        other => panic!("no gradient case for op {other}"),
    }
}

/// Loss `Σ op(inputs) ⊙ r`, plus input gradients when requested.
fn weighted_loss(
    case: &Case,
    inputs: &[Tensor],
    r: Option<&Tensor>,
    fault: Option<&str>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Tensor>>, Tensor), TensorError> {
    let mut g = Graph::new();
    if let Some(f) = fault {
        g.inject_backward_fault(f);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let out_val = g.value(out).clone();
    let r = match r {
        Some(r) => r.clone(),
        None => return Ok((0.0, None, out_val)),
    };
    let w = g.constant(r);
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let value = g.value(loss).item();
    if !want_grad {
        return Ok((value, None, out_val));
    }
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, Some(grads), out_val))
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Check one op over `trials` random instances.
pub fn check_op(op: &str, trials: usize, seed: u64, fault: Option<&str>) -> Result<CheckResult, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::stable_hash(op));
    let mut max_error = 0.0f64;
    let mut coords = 0;
    for _ in 0..trials {
        let case = make_case(op, &mut rng);
        let (_, _, out) = weighted_loss(&case, &case.inputs, None, None, false)?;
        let r = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);
        let (_, grads, _) = weighted_loss(&case, &case.inputs, Some(&r), fault, true)?;
        let grads = grads.expect("requested");
        let mut probe = case.inputs.clone();
        for (i, grad) in grads.iter().enumerate() {
            for j in 0..probe[i].numel() {
                let orig = probe[i].data()[j];
                probe[i].data_mut()[j] = orig + OP_STEP;
                let (up, _, _) = weighted_loss(&case, &probe, Some(&r), None, false)?;
                probe[i].data_mut()[j] = orig - OP_STEP;
                let (down, _, _) = weighted_loss(&case, &probe, Some(&r), None, false)?;
                probe[i].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * OP_STEP);
                max_error = max_error.max(rel_error(grad.data()[j], numeric));
                coords += 1;
            }
        }
    }
    Ok(CheckResult {
        name: op.to_string(),
        trials,
        coords,
        max_error,
        tolerance: OP_TOLERANCE,
    })
}

/// Architecture used for the end-to-end check.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        n_mels: 8,
        input_frames: 16,
        conv_channels: vec![2, 4, 4],
        n_encoder_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        ..ArchConfig::default()
    }
}

fn model_loss(
    params: &ModelParams,
    arch: &ArchConfig,
    x: &Tensor,
    labels: &[usize],
    fault: Option<&str>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Tensor>>), crate::model::ModelError> {
    let mut g = Graph::new();
    if let Some(f) = fault {
        g.inject_backward_fault(f);
    }
    let bound = Bound::new(&mut g, params);
    let xv = g.constant(x.clone());
    let ctx = ForwardCtx::train(DropoutKey {
        seed: 11,
        ..DropoutKey::default()
    });
    let out = forward(&mut g, &bound, arch, xv, &ctx)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    let value = g.value(loss).item();
    if !want_grad {
        return Ok((value, None));
    }
    g.backward(loss)?;
    Ok((value, Some(bound.grads(&g))))
}

/// End-to-end check of every trainable scalar of a network on a random
/// two-item batch, in training mode (batch statistics and a fixed dropout
/// mask).
pub fn check_model(
    name: &str,
    arch: &ArchConfig,
    tolerance: f64,
    seed: u64,
    fault: Option<&str>,
) -> Result<CheckResult, crate::model::ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::stable_hash(name));
    let mut params = init_params(arch, rng.gen())?;
    for (i, spec) in params.specs().to_vec().iter().enumerate() {
        if spec.role.trainable() {
            for v in params.tensor_mut(i).data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }
    let mut shape = vec![2];
    shape.extend(arch.input_shape());
    let x = rand_tensor(&mut rng, &shape, -1.5, 1.5);
    let labels = [0, arch.n_classes - 1];
    let (_, grads) = model_loss(&params, arch, &x, &labels, fault, true)?;
    let grads = grads.expect("requested");
    let mut max_error = 0.0f64;
    let mut coords = 0;
    let mut probe = params.clone();
    for (i, spec) in params.specs().iter().enumerate() {
        if !spec.role.trainable() {
            continue;
        }
        for j in 0..params.tensor(i).numel() {
            let orig = params.tensor(i).data()[j];
            probe.tensor_mut(i).data_mut()[j] = orig + MODEL_STEP;
            let (up, _) = model_loss(&probe, arch, &x, &labels, None, false)?;
            probe.tensor_mut(i).data_mut()[j] = orig - MODEL_STEP;
            let (down, _) = model_loss(&probe, arch, &x, &labels, None, false)?;
            probe.tensor_mut(i).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * MODEL_STEP);
            max_error = max_error.max(rel_error(grads[i].data()[j], numeric));
            coords += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        trials: 1,
        coords,
        max_error,
        tolerance,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error("unknown op {0:?}; known ops: {ops}", ops = DIFFERENTIABLE_OPS.join(", "))]
    UnknownOp(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Run the op registry and, optionally, the tiny CNN–Transformer and MLP
/// end-to-end checks.
pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport, GradcheckError> {
    let fault = opts.inject_fault.as_deref();
    if let Some(f) = fault {
        if !DIFFERENTIABLE_OPS.contains(&f) {
            return Err(GradcheckError::UnknownOp(f.to_string()));
        }
    }
    let ops = DIFFERENTIABLE_OPS
        .iter()
        .map(|op| check_op(op, opts.trials, opts.seed, fault))
        .collect::<Result<Vec<_>, _>>()?;
    let mut models = Vec::new();
    if opts.include_models {
        models.push(check_model("cnn_transformer", &tiny_arch(), MODEL_TOLERANCE, opts.seed, fault)?);
        models.push(check_model("mlp_baseline", &ArchConfig::mlp(), OP_TOLERANCE, opts.seed, fault)?);
    }
    Ok(GradcheckReport { ops, models })
}
