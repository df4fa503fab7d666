//! Mini-batch training with Adam, cosine annealing and early stopping on
//! validation accuracy.

mod optim;

pub use optim::{adam_step, cosine_lr, AdamState};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::metrics::{argmax, evaluate, MetricsError};
use crate::model::{forward, init_params, ArchConfig, Bound, ForwardCtx, ModelError, ModelParams};
use crate::tensor::{DropoutKey, Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss {value} at epoch {epoch}, batch {step}; training diverged")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },
    #[error("non-finite parameters after epoch {epoch}, batch {step}; training diverged")]
    NonFiniteParams { epoch: usize, step: usize },
    #[error("optimizer shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Arithmetic used for stored parameters between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Compute in f64, round parameters to f32 after every update.
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eta_min: f64,
    pub bn_momentum: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            weight_decay: 1e-5,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eta_min: 0.0,
            bn_momentum: 0.1,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.lr0) {
            return bad(format!("eta_min must lie in [0, lr0], got {}", self.eta_min));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum must lie in [0, 1], got {}", self.bn_momentum));
        }
        Ok(())
    }
}

/// Per-epoch log row. `epoch` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc";

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        ));
    }
    out
}

/// Tracks the best validation accuracy. Only a strictly higher accuracy counts
/// as an improvement, so ties keep the earlier epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_improve: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_improve: 0,
        }
    }

    /// Record an epoch; returns true when it is the new best.
    pub fn observe(&mut self, epoch: usize, val_acc: f64) -> bool {
        if self.best.is_none_or(|b| val_acc > b) {
            self.best = Some(val_acc);
            self.best_epoch = epoch;
            self.since_improve = 0;
            true
        } else {
            self.since_improve += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improve >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Hook for transforming a training batch before the forward pass.
pub trait Augment {
    fn apply(&mut self, batch: &mut Tensor, labels: &[usize], epoch: usize, step: usize);
}

/// Leaves every batch untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoAugment;

impl Augment for NoAugment {
    fn apply(&mut self, _: &mut Tensor, _: &[usize], _: usize, _: usize) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub best: ModelParams,
    /// Parameters after the last epoch run.
    pub last: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOut {
    pub loss: f64,
    pub correct: usize,
}

/// Forward, backward and one Adam update on a single batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    x: Tensor,
    labels: &[usize],
    key: DropoutKey,
    lr: f64,
) -> Result<StepOut, TrainError> {
    let (loss, correct, grads, updates) = {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, params);
        let xv = g.constant(x);
        let ctx = ForwardCtx {
            bn_momentum: cfg.bn_momentum,
            ..ForwardCtx::train(key)
        };
        let out = forward(&mut g, &bound, arch, xv, &ctx)?;
        let c = arch.n_classes;
        let correct = g
            .value(out.logits)
            .data()
            .chunks(c)
            .zip(labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        let loss = g.cross_entropy(out.logits, labels)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: key.epoch as usize + 1,
                step: key.step as usize,
                value,
            });
        }
        g.backward(loss)?;
        (value, correct, bound.grads(&g), out.stat_updates)
    };
    params.apply_updates(updates);
    adam_step(params, &grads, state, lr, cfg.weight_decay)?;
    if cfg.precision == Precision::F32 {
        params.round_to_f32();
    }
    if !params.is_finite() {
        return Err(TrainError::NonFiniteParams {
            epoch: key.epoch as usize + 1,
            step: key.step as usize,
        });
    }
    Ok(StepOut { loss, correct })
}

const SHUFFLE_STREAM: u64 = 1 << 32;

/// Batches of `order`; a trailing batch of one is folded into the one before
/// it so batch-norm always sees at least two items.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

/// Seeded permutation of `0..n` for a given (0-based) epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with(train_set, val_set, arch, cfg, &mut NoAugment, &mut |_| {})
}

/// Full training run from freshly initialized parameters. `on_epoch` sees
/// each log row as soon as it is complete.
pub fn train_with(
    train_set: &Dataset,
    val_set: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    augment: &mut dyn Augment,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    let mut params = init_params(arch, cfg.seed)?;
    if cfg.precision == Precision::F32 {
        params.round_to_f32();
    }
    train_from(params, train_set, val_set, arch, cfg, augment, on_epoch)
}

/// Training run starting from the given parameters.
pub fn train_from(
    mut params: ModelParams,
    train_set: &Dataset,
    val_set: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    augment: &mut dyn Augment,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    arch.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let mut state = AdamState::new(&params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut log = Vec::new();
    let mut stopped_early = false;
    for e in 0..cfg.max_epochs {
        let lr = cosine_lr(e, cfg.max_epochs, cfg.lr0, cfg.eta_min);
        let order = epoch_order(train_set.len(), cfg.seed, e);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, idx) in batches(&order, cfg.batch_size).iter().enumerate() {
            let (mut x, labels) = train_set.batch(idx);
            augment.apply(&mut x, &labels, e, step);
            let key = DropoutKey {
                seed: cfg.seed,
                epoch: e as u64,
                step: step as u64,
                layer: 0,
            };
            let out = train_step(&mut params, &mut state, arch, cfg, x, &labels, key, lr)?;
            loss_sum += out.loss * idx.len() as f64;
            correct += out.correct;
        }
        let n = train_set.len() as f64;
        let val = evaluate(&params, arch, val_set, cfg.batch_size)?;
        let record = EpochRecord {
            epoch: e + 1,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss: val.loss,
            val_acc: val.report.accuracy,
        };
        on_epoch(&record);
        log.push(record);
        if stopper.observe(e + 1, record.val_acc) {
            best = params.clone();
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        last: params,
        best_epoch: stopper.best_epoch(),
        log,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkKind;
    use proptest::prelude::*;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            n_mels: 8,
            input_frames: 16,
            conv_channels: vec![2, 4, 4],
            n_encoder_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            ..ArchConfig::default()
        }
    }

    /// Inputs whose mean level encodes the class.
    fn toy_set(arch: &ArchConfig, n: usize, salt: u64) -> Dataset {
        let shape = arch.input_shape();
        let numel: usize = shape.iter().product();
        let mut ds = Dataset {
            ids: Vec::new(),
            inputs: Vec::new(),
            labels: Vec::new(),
        };
        for i in 0..n {
            let label = i % 4;
            let data = (0..numel)
                .map(|k| {
                    let h = crate::stable_hash(&format!("{salt}:{i}:{k}"));
                    label as f64 - 1.5 + ((h % 1000) as f64 / 1000.0 - 0.5)
                })
                .collect();
            ds.ids.push(format!("u{i}"));
            ds.inputs.push(Tensor::new(&shape, data).unwrap());
            ds.labels.push(label);
        }
        ds
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { weight_decay: -1.0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { max_epochs: 0, ..Default::default() },
            TrainConfig { beta2: 1.0, ..Default::default() },
            TrainConfig { eta_min: 1.0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))), "{cfg:?}");
        }
    }

    #[test]
    fn trailing_singleton_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order, 3).len(), 3);
        assert_eq!(batches(&[0], 4), vec![vec![0]]);
    }

    #[test]
    fn shuffle_is_seeded_permutation() {
        let a = epoch_order(20, 5, 0);
        assert_eq!(a, epoch_order(20, 5, 0));
        assert_ne!(a, epoch_order(20, 5, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn early_stopping_rules() {
        let mut es = EarlyStopping::new(2);
        assert!(es.observe(1, 0.5));
        assert!(!es.observe(2, 0.5));
        assert!(!es.should_stop());
        assert!(!es.observe(3, 0.25));
        assert!(es.should_stop());
        assert_eq!(es.best_epoch(), 1);

        let mut es = EarlyStopping::new(1);
        es.observe(1, 0.75);
        assert!(!es.observe(2, 0.5));
        assert!(es.should_stop());
    }

    #[test]
    fn log_format() {
        let r = EpochRecord {
            epoch: 1,
            lr: 1e-4,
            train_loss: 1.5,
            train_acc: 0.25,
            val_loss: 1.25,
            val_acc: 0.5,
        };
        assert_eq!(log_csv(&[r]), format!("{LOG_HEADER}\n1,0.0001,1.5,0.25,1.25,0.5\n"));
    }

    #[test]
    fn empty_splits_are_rejected() {
        let arch = tiny_arch();
        let full = toy_set(&arch, 8, 0);
        let empty = toy_set(&arch, 0, 0);
        let cfg = TrainConfig::default();
        assert!(matches!(train(&empty, &full, &arch, &cfg), Err(TrainError::EmptySplit("train"))));
        assert!(matches!(train(&full, &empty, &arch, &cfg), Err(TrainError::EmptySplit("val"))));
    }

    #[test]
    fn frozen_batch_loss_descends() {
        let arch = ArchConfig { dropout: 0.0, ..tiny_arch() };
        let data = toy_set(&arch, 8, 1);
        let cfg = TrainConfig { lr0: 1e-2, ..Default::default() };
        let mut params = init_params(&arch, 4).unwrap();
        let mut state = AdamState::new(&params, cfg.beta1, cfg.beta2, cfg.eps);
        let idx: Vec<usize> = (0..8).collect();
        let mut losses = Vec::new();
        for step in 0..6 {
            let (x, y) = data.batch(&idx);
            let key = DropoutKey { seed: 0, epoch: 0, step, layer: 0 };
            losses.push(train_step(&mut params, &mut state, &arch, &cfg, x, &y, key, cfg.lr0).unwrap().loss);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn tiny_lr_keeps_parameters() {
        let arch = tiny_arch();
        let data = toy_set(&arch, 12, 2);
        let cfg = TrainConfig {
            lr0: 1e-12,
            weight_decay: 0.0,
            max_epochs: 1,
            batch_size: 4,
            precision: Precision::F64,
            ..Default::default()
        };
        let init = init_params(&arch, cfg.seed).unwrap();
        let out = train(&data, &data, &arch, &cfg).unwrap();
        for ((spec, a), b) in init.iter().zip(out.last.tensors()) {
            if !spec.role.trainable() {
                continue;
            }
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-9, "{}", spec.name);
            }
        }
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let arch = tiny_arch();
        let data = toy_set(&arch, 10, 3);
        let cfg = TrainConfig { max_epochs: 3, batch_size: 4, lr0: 1e-3, seed: 9, ..Default::default() };
        let a = train(&data, &data, &arch, &cfg).unwrap();
        let b = train(&data, &data, &arch, &cfg).unwrap();
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert_eq!(a.last, b.last);
        assert_eq!(a.best, b.best);
        let c = train(&data, &data, &arch, &TrainConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.log[0].train_loss, c.log[0].train_loss);
    }

    #[test]
    fn patience_one_stops_at_second_epoch() {
        let arch = ArchConfig { network: NetworkKind::Mlp, ..ArchConfig::mlp() };
        let train_set = toy_set(&arch, 8, 4);
        // Every validation item carries the same label, so accuracy can only
        // move by flipping all predictions at once.
        let mut val = toy_set(&arch, 4, 5);
        val.labels = vec![0; 4];
        let cfg = TrainConfig { lr0: 1e-9, patience: 1, max_epochs: 20, ..Default::default() };
        let out = train(&train_set, &val, &arch, &cfg).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn best_params_come_from_best_epoch() {
        let arch = tiny_arch();
        let train_set = toy_set(&arch, 8, 6);
        let val = toy_set(&arch, 8, 7);
        let cfg = TrainConfig { lr0: 3e-3, max_epochs: 8, patience: 3, batch_size: 4, ..Default::default() };
        let out = train(&train_set, &val, &arch, &cfg).unwrap();
        let best_acc = out.log.iter().map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max);
        let first_best = out.log.iter().find(|r| r.val_acc == best_acc).unwrap().epoch;
        assert_eq!(out.best_epoch, first_best);
        let replay = train(
            &train_set,
            &val,
            &arch,
            &TrainConfig { max_epochs: first_best, patience: 100, ..cfg.clone() },
        )
        .unwrap();
        assert_eq!(replay.last, out.best);
    }

    #[test]
    fn divergence_is_reported() {
        let arch = ArchConfig::mlp();
        let mut data = toy_set(&arch, 4, 8);
        data.inputs[0].data_mut()[0] = f64::NAN;
        let err = train(&data, &data, &arch, &TrainConfig::default()).unwrap_err();
        assert!(
            matches!(
                err,
                TrainError::NonFiniteLoss { epoch: 1, step: 0, .. } | TrainError::NonFiniteParams { epoch: 1, step: 0 }
            ),
            "{err}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn batches_cover_order(n in 1usize..80, bs in 2usize..40) {
            let order: Vec<usize> = (0..n).collect();
            let b = batches(&order, bs);
            let flat: Vec<usize> = b.iter().flatten().copied().collect();
            prop_assert_eq!(flat, order);
            if n >= 2 {
                prop_assert!(b.iter().all(|x| x.len() >= 2));
            }
        }
    }
}
