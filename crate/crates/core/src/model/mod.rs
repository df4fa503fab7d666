//! CNN–Transformer emotion classifier and the MFCC-statistics MLP baseline,
//! written as functions over an explicit [`ModelParams`] table.

mod checkpoint;
mod net;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tensor, TensorError};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use net::{
    cnn_frontend, encoder_layer, forward, mlp_baseline_forward, multi_head_attention, positional_encoding,
    predict_logits, Bound, ForwardCtx, ForwardOut,
};

/// Number of emotion classes.
pub const N_CLASSES: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The four target emotions, encoded 0..3 in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmotionLabel {
    Anger,
    Happiness,
    Sadness,
    Neutral,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; N_CLASSES] = [Self::Anger, Self::Happiness, Self::Sadness, Self::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Anger => "anger",
            Self::Happiness => "happiness",
            Self::Sadness => "sadness",
            Self::Neutral => "neutral",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown emotion label {0:?} (expected anger, happiness, sadness or neutral)")]
pub struct UnknownLabel(pub String);

impl FromStr for EmotionLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s.trim())
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

/// Which network a parameter table describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkKind {
    CnnTransformer,
    Mlp,
}

impl NetworkKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::CnnTransformer => "cnn_transformer",
            Self::Mlp => "mlp",
        }
    }
}

impl FromStr for NetworkKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "cnn_transformer" => Ok(Self::CnnTransformer),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown network {other:?} (expected cnn_transformer or mlp)")),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub network: NetworkKind,
    pub n_mels: usize,
    pub input_frames: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub n_encoder_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_classes: usize,
    pub dropout: f64,
    /// MLP baseline input width (mean and std of each MFCC coefficient).
    pub mlp_input: usize,
    pub mlp_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            network: NetworkKind::CnnTransformer,
            n_mels: 128,
            input_frames: 300,
            conv_channels: vec![32, 64, 128],
            conv_kernel: 3,
            n_encoder_layers: 4,
            n_heads: 8,
            d_model: 256,
            d_ff: 512,
            n_classes: N_CLASSES,
            dropout: 0.3,
            mlp_input: 2 * crate::features::DEFAULT_MFCC_COEFFS,
            mlp_hidden: 128,
        }
    }
}

impl ArchConfig {
    pub fn mlp() -> Self {
        Self {
            network: NetworkKind::Mlp,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.n_classes == 0 {
            return bad("n_classes must be positive".into());
        }
        match self.network {
            NetworkKind::Mlp => {
                if self.mlp_input == 0 || self.mlp_hidden == 0 {
                    return bad("mlp widths must be positive".into());
                }
            }
            NetworkKind::CnnTransformer => {
                if self.conv_channels.len() != 3 || self.conv_channels.contains(&0) {
                    return bad(format!("need three positive conv widths, got {:?}", self.conv_channels));
                }
                if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
                    return bad(format!("conv kernel {} must be odd", self.conv_kernel));
                }
                if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
                    return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
                }
                if !self.d_model.is_multiple_of(2) {
                    return bad(format!("d_model {} must be even", self.d_model));
                }
                if self.d_ff == 0 || self.n_encoder_layers == 0 {
                    return bad("d_ff and n_encoder_layers must be positive".into());
                }
                if self.n_mels < 8 || self.input_frames < 8 {
                    return bad(format!(
                        "input {}x{} too small for three 2x2 pools",
                        self.n_mels, self.input_frames
                    ));
                }
            }
        }
        Ok(())
    }

    /// `(F'', T'')` after the three pooling stages.
    pub fn frontend_grid(&self) -> (usize, usize) {
        (self.n_mels / 8, self.input_frames / 8)
    }

    /// Token count entering the encoder.
    pub fn seq_len(&self) -> usize {
        self.frontend_grid().1
    }

    /// Per-token feature width from the CNN (channels × pooled mel bins).
    pub fn d_feat(&self) -> usize {
        self.conv_channels[2] * self.frontend_grid().0
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Shape of one input item, without the batch axis.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.network {
            NetworkKind::CnnTransformer => vec![1, self.n_mels, self.input_frames],
            NetworkKind::Mlp => vec![self.mlp_input],
        }
    }
}

/// What a parameter is for; drives initialization and trainability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, Self::RunningMean | Self::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

fn spec(name: impl Into<String>, shape: &[usize], role: ParamRole) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        role,
    }
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, w: &str, b: &str, d_in: usize, d_out: usize) {
    out.push(spec(
        format!("{prefix}{w}"),
        &[d_in, d_out],
        ParamRole::Weight {
            fan_in: d_in,
            fan_out: d_out,
        },
    ));
    out.push(spec(format!("{prefix}{b}"), &[d_out], ParamRole::Bias));
}

/// Every tensor of the network in its fixed enumeration order.
///
/// CNN–Transformer order: for each conv block `i` in 0..3, `conv{i}.weight`,
/// `conv{i}.bias`, `bn{i}.gamma`, `bn{i}.beta`, `bn{i}.running_mean`,
/// `bn{i}.running_var`; then `proj.weight`, `proj.bias`; then for each
/// encoder layer `l`, `enc{l}.wq`, `bq`, `wk`, `bk`, `wv`, `bv`, `wo`, `bo`,
/// `ln1.gamma`, `ln1.beta`, `ff1.weight`, `ff1.bias`, `ff2.weight`,
/// `ff2.bias`, `ln2.gamma`, `ln2.beta`; finally `cls.weight`, `cls.bias`.
///
/// MLP order: `mlp.fc1.weight`, `mlp.fc1.bias`, `mlp.fc2.weight`, `mlp.fc2.bias`.
pub fn param_specs(arch: &ArchConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    if arch.network == NetworkKind::Mlp {
        linear_specs(&mut out, "mlp.", "fc1.weight", "fc1.bias", arch.mlp_input, arch.mlp_hidden);
        linear_specs(&mut out, "mlp.", "fc2.weight", "fc2.bias", arch.mlp_hidden, arch.n_classes);
        return out;
    }
    let k = arch.conv_kernel;
    let mut cin = 1;
    for (i, &cout) in arch.conv_channels.iter().enumerate() {
        out.push(spec(
            format!("conv{i}.weight"),
            &[cout, cin, k, k],
            ParamRole::Weight {
                fan_in: cin * k * k,
                fan_out: cout * k * k,
            },
        ));
        out.push(spec(format!("conv{i}.bias"), &[cout], ParamRole::Bias));
        out.push(spec(format!("bn{i}.gamma"), &[cout], ParamRole::Gamma));
        out.push(spec(format!("bn{i}.beta"), &[cout], ParamRole::Beta));
        out.push(spec(format!("bn{i}.running_mean"), &[cout], ParamRole::RunningMean));
        out.push(spec(format!("bn{i}.running_var"), &[cout], ParamRole::RunningVar));
        cin = cout;
    }
    let d = arch.d_model;
    linear_specs(&mut out, "proj.", "weight", "bias", arch.d_feat(), d);
    for l in 0..arch.n_encoder_layers {
        let p = format!("enc{l}.");
        for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
            linear_specs(&mut out, &p, w, b, d, d);
        }
        out.push(spec(format!("{p}ln1.gamma"), &[d], ParamRole::Gamma));
        out.push(spec(format!("{p}ln1.beta"), &[d], ParamRole::Beta));
        linear_specs(&mut out, &p, "ff1.weight", "ff1.bias", d, arch.d_ff);
        linear_specs(&mut out, &p, "ff2.weight", "ff2.bias", arch.d_ff, d);
        out.push(spec(format!("{p}ln2.gamma"), &[d], ParamRole::Gamma));
        out.push(spec(format!("{p}ln2.beta"), &[d], ParamRole::Beta));
    }
    linear_specs(&mut out, "cls.", "weight", "bias", d, arch.n_classes);
    out
}

/// Number of trainable scalars.
pub fn count_params(arch: &ArchConfig) -> usize {
    param_specs(arch)
        .iter()
        .filter(|s| s.role.trainable())
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Named tensors of one network, in [`param_specs`] order. Batch-norm
/// running statistics are stored here too but are never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Pair tensors with the specs of `arch`; each name and shape must match.
    pub fn from_tensors(arch: &ArchConfig, named: Vec<(String, Tensor)>) -> Result<Self, CheckpointError> {
        let specs = param_specs(arch);
        if named.len() != specs.len() {
            let tensor = specs
                .get(named.len())
                .or(specs.last())
                .map(|s| s.name.clone())
                .unwrap_or_default();
            return Err(CheckpointError::ShapeMismatch {
                tensor,
                detail: format!("expected {} tensors, found {}", specs.len(), named.len()),
            });
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (s, (name, t)) in specs.iter().zip(named) {
            if name != s.name {
                return Err(CheckpointError::ShapeMismatch {
                    tensor: s.name.clone(),
                    detail: format!("found tensor named {name:?} in its place"),
                });
            }
            if t.shape() != s.shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    tensor: s.name.clone(),
                    detail: format!("expected shape {:?}, found {:?}", s.shape, t.shape()),
                });
            }
            tensors.push(t);
        }
        Ok(Self { specs, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSpec, &Tensor)> {
        self.specs.iter().zip(&self.tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Round every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Overwrite tensors with values produced by a training-mode forward.
    pub fn apply_updates(&mut self, updates: Vec<(usize, Vec<f64>)>) {
        for (i, values) in updates {
            self.tensors[i].data_mut().copy_from_slice(&values);
        }
    }
}

/// Seeded initialization: weights uniform in `±√(6/(fan_in+fan_out))`,
/// biases and betas 0, gammas 1, running mean 0 and running variance 1.
/// Values are drawn in `f32` so they survive a single-precision checkpoint.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<ModelParams, ModelError> {
    arch.validate()?;
    let specs = param_specs(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = specs
        .iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let data = match s.role {
                ParamRole::Weight { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                    (0..n).map(|_| rng.gen_range(-bound..=bound) as f64).collect()
                }
                ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => vec![0.0; n],
                ParamRole::Gamma | ParamRole::RunningVar => vec![1.0; n],
            };
            Tensor::new(&s.shape, data).expect("spec shapes are positive")
        })
        .collect();
    Ok(ModelParams { specs, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_encoding_is_fixed() {
        for (i, l) in EmotionLabel::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(EmotionLabel::from_index(i), Some(*l));
            assert_eq!(l.name().parse::<EmotionLabel>().unwrap(), *l);
        }
        assert_eq!(EmotionLabel::Anger.index(), 0);
        assert_eq!(EmotionLabel::Neutral.index(), 3);
        assert!("fear".parse::<EmotionLabel>().is_err());
        assert_eq!(EmotionLabel::from_index(4), None);
    }

    #[test]
    fn default_geometry() {
        let a = ArchConfig::default();
        a.validate().unwrap();
        assert_eq!(a.frontend_grid(), (16, 37));
        assert_eq!(a.d_feat(), 2048);
        assert_eq!(a.d_k(), 32);
    }

    #[test]
    fn count_matches_hand_arithmetic() {
        let a = ArchConfig::default();
        let conv = (32 * 9 + 32 + 64) + (64 * 32 * 9 + 64 + 128) + (128 * 64 * 9 + 128 + 256);
        let proj = 2048 * 256 + 256;
        let attn = 4 * (256 * 256 + 256);
        assert_eq!(attn, 263_168);
        let layer = attn + 2 * 512 + (256 * 512 + 512) + (512 * 256 + 256);
        let cls = 256 * 4 + 4;
        assert_eq!(cls, 1028);
        assert_eq!(count_params(&a), conv + proj + 4 * layer + cls);
        assert_eq!(count_params(&ArchConfig::mlp()), 26 * 128 + 128 + 128 * 4 + 4);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ArchConfig {
            input_frames: 64,
            d_model: 32,
            d_ff: 64,
            n_encoder_layers: 1,
            ..ArchConfig::default()
        };
        let p1 = init_params(&a, 5).unwrap();
        let p2 = init_params(&a, 5).unwrap();
        let p3 = init_params(&a, 6).unwrap();
        assert_eq!(p1, p2);
        assert_ne!(p1, p3);
        let k = p1.get("conv1.weight").unwrap();
        let bound = (6.0f64 / (32.0 * 9.0 + 64.0 * 9.0)).sqrt() + 1e-7;
        assert!(k.data().iter().all(|v| v.abs() <= bound));
        assert!(p1.get("bn0.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p1.get("proj.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p1.tensors().iter().flat_map(|t| t.data()).all(|&v| v as f32 as f64 == v));
    }

    #[test]
    fn validation_rejects_bad_heads() {
        let a = ArchConfig {
            n_heads: 3,
            ..ArchConfig::default()
        };
        assert!(matches!(a.validate(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn from_tensors_names_offender() {
        let a = ArchConfig::mlp();
        let p = init_params(&a, 0).unwrap();
        let mut named: Vec<(String, Tensor)> =
            p.iter().map(|(s, t)| (s.name.clone(), t.clone())).collect();
        named[2].1 = Tensor::zeros(&[128, 5]);
        match ModelParams::from_tensors(&a, named) {
            Err(CheckpointError::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "mlp.fc2.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
