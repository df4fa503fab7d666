use crate::tensor::{BatchNormConfig, DropoutKey, Graph, Mode, Tensor, Var};

use super::{param_specs, ArchConfig, ModelError, ModelParams, NetworkKind};

/// Parameters of one [`ModelParams`] placed on a graph. Trainable tensors
/// become gradient-carrying leaves; running statistics become constants.
pub struct Bound<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl<'p> Bound<'p> {
    pub fn new(g: &mut Graph, params: &'p ModelParams) -> Self {
        let vars = params
            .iter()
            .map(|(s, t)| g.leaf(t.clone(), s.role.trainable()))
            .collect();
        Self { params, vars }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn index(&self, name: &str) -> Result<usize, ModelError> {
        self.params
            .index_of(name)
            .ok_or_else(|| ModelError::InvalidConfig(format!("missing parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        Ok(self.vars[self.index(name)?])
    }

    /// Gradients after backward, aligned with the parameter table. Entries
    /// that received no gradient come back as zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Per-call forward settings.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx {
    pub mode: Mode,
    /// Base key; the layer field is overwritten per dropout site.
    pub dropout_key: DropoutKey,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout_key: DropoutKey::default(),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
        }
    }

    pub fn train(dropout_key: DropoutKey) -> Self {
        Self {
            mode: Mode::Train,
            dropout_key,
            ..Self::eval()
        }
    }

    fn key(&self, layer: u64) -> DropoutKey {
        DropoutKey {
            layer,
            ..self.dropout_key
        }
    }

    fn bn(&self) -> BatchNormConfig {
        BatchNormConfig {
            momentum: self.bn_momentum,
            eps: self.bn_eps,
            mode: self.mode,
        }
    }
}

/// New running statistics, as `(parameter index, values)`.
pub type StatUpdates = Vec<(usize, Vec<f64>)>;

pub struct ForwardOut {
    /// `[N, n_classes]`, before softmax.
    pub logits: Var,
    /// Batch-norm updates. Empty in eval mode.
    pub stat_updates: StatUpdates,
}

/// Sinusoidal position table `[seq_len, d_model]`:
/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(…)`.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(seq_len * d_model);
    for pos in 0..seq_len {
        for j in 0..d_model {
            let two_i = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(two_i / d_model as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[seq_len, d_model], data).expect("positive dims")
}

fn check_params(bound: &Bound, arch: &ArchConfig) -> Result<(), ModelError> {
    arch.validate()?;
    let want = param_specs(arch);
    if bound.params.specs() != want.as_slice() {
        return Err(ModelError::InvalidConfig(
            "parameter table does not match the architecture".into(),
        ));
    }
    Ok(())
}

/// Three `[conv → batch norm → relu → 2×2 max-pool]` blocks, then time
/// steps become tokens: `[N, 1, F, T]` → `[N, T'', C·F'']`, channel-major.
pub fn cnn_frontend(
    g: &mut Graph,
    bound: &Bound,
    arch: &ArchConfig,
    x: Var,
    ctx: &ForwardCtx,
) -> Result<(Var, StatUpdates), ModelError> {
    let mut h = x;
    let mut updates = Vec::new();
    let pad = arch.conv_kernel / 2;
    for i in 0..arch.conv_channels.len() {
        h = g.conv2d(h, bound.var(&format!("conv{i}.weight"))?, bound.var(&format!("conv{i}.bias"))?, pad)?;
        let mi = bound.index(&format!("bn{i}.running_mean"))?;
        let vi = bound.index(&format!("bn{i}.running_var"))?;
        let mut rm = bound.params.tensor(mi).data().to_vec();
        let mut rv = bound.params.tensor(vi).data().to_vec();
        h = g.batch_norm2d(
            h,
            bound.var(&format!("bn{i}.gamma"))?,
            bound.var(&format!("bn{i}.beta"))?,
            &mut rm,
            &mut rv,
            ctx.bn(),
        )?;
        if ctx.mode == Mode::Train {
            updates.push((mi, rm));
            updates.push((vi, rv));
        }
        h = g.relu(h);
        h = g.maxpool2d(h)?;
    }
    let [n, c, f, t] = *g.shape(h) else {
        return Err(ModelError::InvalidConfig(format!("frontend output {:?}", g.shape(h))));
    };
    let h = g.transpose(h, 1, 3)?;
    let h = g.transpose(h, 2, 3)?;
    let h = g.reshape(h, &[n, t, c * f])?;
    Ok((h, updates))
}

/// Multi-head self-attention over `[N, S, d_model]`. Returns the projected
/// output and the per-head attention weights, each `[N, S, S]`.
pub fn multi_head_attention(
    g: &mut Graph,
    bound: &Bound,
    arch: &ArchConfig,
    layer: usize,
    x: Var,
) -> Result<(Var, Vec<Var>), ModelError> {
    let p = |s: &str| format!("enc{layer}.{s}");
    let q = g.linear(x, bound.var(&p("wq"))?, bound.var(&p("bq"))?)?;
    let k = g.linear(x, bound.var(&p("wk"))?, bound.var(&p("bk"))?)?;
    let v = g.linear(x, bound.var(&p("wv"))?, bound.var(&p("bv"))?)?;
    let dk = arch.d_k();
    let mut heads = Vec::with_capacity(arch.n_heads);
    let mut weights = Vec::with_capacity(arch.n_heads);
    for h in 0..arch.n_heads {
        let qh = g.narrow(q, 2, h * dk, dk)?;
        let kh = g.narrow(k, 2, h * dk, dk)?;
        let vh = g.narrow(v, 2, h * dk, dk)?;
        let kt = g.transpose(kh, 1, 2)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        heads.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let cat = g.concat(&heads, 2)?;
    let out = g.linear(cat, bound.var(&p("wo"))?, bound.var(&p("bo"))?)?;
    Ok((out, weights))
}

/// Post-norm encoder layer:
/// `x₁ = LN(x + Dropout(MHA(x)))`, `out = LN(x₁ + Dropout(FFN(x₁)))`.
pub fn encoder_layer(
    g: &mut Graph,
    bound: &Bound,
    arch: &ArchConfig,
    layer: usize,
    x: Var,
    ctx: &ForwardCtx,
) -> Result<Var, ModelError> {
    let p = |s: &str| format!("enc{layer}.{s}");
    let (attn, _) = multi_head_attention(g, bound, arch, layer, x)?;
    let attn = g.dropout(attn, arch.dropout, ctx.mode, ctx.key(1 + 2 * layer as u64));
    let r = g.add(x, attn)?;
    let x1 = g.layer_norm(r, bound.var(&p("ln1.gamma"))?, bound.var(&p("ln1.beta"))?, ctx.ln_eps)?;
    let h = g.linear(x1, bound.var(&p("ff1.weight"))?, bound.var(&p("ff1.bias"))?)?;
    let h = g.relu(h);
    let h = g.linear(h, bound.var(&p("ff2.weight"))?, bound.var(&p("ff2.bias"))?)?;
    let h = g.dropout(h, arch.dropout, ctx.mode, ctx.key(2 + 2 * layer as u64));
    let r = g.add(x1, h)?;
    Ok(g.layer_norm(r, bound.var(&p("ln2.gamma"))?, bound.var(&p("ln2.beta"))?, ctx.ln_eps)?)
}

/// `[N, 26]` MFCC statistics → linear → relu → dropout → linear → `[N, 4]`.
pub fn mlp_baseline_forward(
    g: &mut Graph,
    bound: &Bound,
    arch: &ArchConfig,
    x: Var,
    ctx: &ForwardCtx,
) -> Result<Var, ModelError> {
    let h = g.linear(x, bound.var("mlp.fc1.weight")?, bound.var("mlp.fc1.bias")?)?;
    let h = g.relu(h);
    let h = g.dropout(h, arch.dropout, ctx.mode, ctx.key(0));
    Ok(g.linear(h, bound.var("mlp.fc2.weight")?, bound.var("mlp.fc2.bias")?)?)
}

/// Full network: `[N, 1, F, T*]` (or `[N, 26]` for the MLP) → logits.
pub fn forward(
    g: &mut Graph,
    bound: &Bound,
    arch: &ArchConfig,
    x: Var,
    ctx: &ForwardCtx,
) -> Result<ForwardOut, ModelError> {
    check_params(bound, arch)?;
    let mut want = vec![g.shape(x).first().copied().unwrap_or(0)];
    want.extend(arch.input_shape());
    if g.shape(x) != want.as_slice() {
        return Err(ModelError::Tensor(crate::tensor::TensorError::ShapeMismatch {
            op: "forward",
            detail: format!("input {:?}, expected [N, {:?}]", g.shape(x), arch.input_shape()),
        }));
    }
    if arch.network == NetworkKind::Mlp {
        let logits = mlp_baseline_forward(g, bound, arch, x, ctx)?;
        return Ok(ForwardOut {
            logits,
            stat_updates: Vec::new(),
        });
    }
    let (tokens, stat_updates) = cnn_frontend(g, bound, arch, x, ctx)?;
    let h = g.linear(tokens, bound.var("proj.weight")?, bound.var("proj.bias")?)?;
    let pe = g.constant(positional_encoding(arch.seq_len(), arch.d_model));
    let h = g.add(h, pe)?;
    let mut h = g.dropout(h, arch.dropout, ctx.mode, ctx.key(0));
    for l in 0..arch.n_encoder_layers {
        h = encoder_layer(g, bound, arch, l, h, ctx)?;
    }
    let pooled = g.mean_axis(h, 1)?;
    let logits = g.linear(pooled, bound.var("cls.weight")?, bound.var("cls.bias")?)?;
    Ok(ForwardOut { logits, stat_updates })
}

/// Eval-mode logits for a batch of inputs stacked along axis 0.
pub fn predict_logits(params: &ModelParams, arch: &ArchConfig, inputs: &Tensor) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params);
    let x = g.constant(inputs.clone());
    let out = forward(&mut g, &bound, arch, x, &ForwardCtx::eval())?;
    Ok(g.value(out.logits).clone())
}
