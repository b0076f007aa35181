//! Minibatch training: twin Gaussian-jitter augmentations, hyperspherical
//! embedding, per-sample prototype streaming, loss against a per-batch bank
//! snapshot, and SGD with classical momentum, weight decay, and an optional
//! cosine schedule. Also trains the cross-entropy baseline with identical
//! optimizer settings.
//!
//! Training is logically sequential and consumes randomness only from the
//! state's own generator, so identical (config, data, seed) triples produce
//! bit-identical checkpoints.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Method, OptimizerState, RngState, SCHEMA_VERSION};
use crate::data::{self, DataSplit, EnvDataset};
use crate::error::{HypoError, Result};
use crate::loss::{self, Batch, LossConfig};
use crate::metrics::Classifier;
use crate::model::{LinearHead, MlpEncoder, PrototypeBank, PrototypeMode};

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl std::str::FromStr for LrSchedule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(format!("unknown lr schedule '{other}'")),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// EMA discount for prototype updates.
    pub alpha: f64,
    pub tau: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Isotropic jitter scale of the two augmented views.
    pub augment_sigma: f64,
    pub prototype_mode: PrototypeMode,
    pub hard_negatives: bool,
    pub separation_enabled: bool,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl TrainConfig {
    pub fn hypo_default(seed: u64) -> Self {
        TrainConfig {
            method: Method::Hypo,
            epochs: 200,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Cosine,
            alpha: 0.95,
            tau: 0.1,
            lambda: 1.0,
            seed,
            augment_sigma: 0.05,
            prototype_mode: PrototypeMode::Ema,
            hard_negatives: false,
            separation_enabled: true,
            hidden_dims: vec![64],
            embed_dim: 16,
        }
    }

    pub fn erm_default(seed: u64) -> Self {
        TrainConfig {
            method: Method::Erm,
            ..TrainConfig::hypo_default(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(HypoError::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HypoError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.batch_size < 1 {
            return Err(HypoError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(HypoError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(HypoError::InvalidConfig("alpha must be in [0, 1]".into()));
        }
        if self.tau <= 0.0 {
            return Err(HypoError::InvalidConfig("tau must be > 0".into()));
        }
        if self.lambda <= 0.0 {
            return Err(HypoError::InvalidConfig("lambda must be > 0".into()));
        }
        if self.augment_sigma < 0.0 {
            return Err(HypoError::InvalidConfig("augment_sigma must be >= 0".into()));
        }
        if self.embed_dim < 2 {
            return Err(HypoError::InvalidConfig("embed_dim must be >= 2".into()));
        }
        Ok(())
    }

    fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims
    }
}

/// Cosine decay: base_lr * (1 + cos(pi * epoch / total)) / 2.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    assert!(epoch < total_epochs, "epoch out of schedule range");
    base_lr * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos())
}

/// Classical momentum step on a flat parameter slice:
/// g <- grad + weight_decay * param; buf <- momentum * buf + g;
/// param <- param - lr * buf.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    momentum_buf: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), momentum_buf.len());
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        momentum_buf[i] = momentum * momentum_buf[i] + g;
        params[i] -= lr * momentum_buf[i];
    }
}

/// Momentum buffers mirroring every trained parameter.
#[derive(Debug, Clone)]
pub struct Velocity {
    pub weights: Vec<ndarray::Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub head_weights: Option<ndarray::Array2<f64>>,
    pub head_biases: Option<Array1<f64>>,
}

impl Velocity {
    fn zeros(encoder: &MlpEncoder, head: Option<&LinearHead>) -> Self {
        Velocity {
            weights: encoder
                .weights
                .iter()
                .map(|w| ndarray::Array2::zeros(w.raw_dim()))
                .collect(),
            biases: encoder
                .biases
                .iter()
                .map(|b| Array1::zeros(b.raw_dim()))
                .collect(),
            head_weights: head.map(|h| ndarray::Array2::zeros(h.weights.raw_dim())),
            head_biases: head.map(|h| Array1::zeros(h.biases.raw_dim())),
        }
    }
}

/// Per-epoch record; the baseline leaves the per-term losses empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub var_loss: Option<f64>,
    pub sep_loss: Option<f64>,
    pub train_acc: f64,
}

/// Mutable training state: model, optimizer buffers, RNG, history.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub method: Method,
    pub encoder: MlpEncoder,
    pub bank: Option<PrototypeBank>,
    pub head: Option<LinearHead>,
    pub velocity: Velocity,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochSummary>,
}

impl TrainState {
    pub fn classifier(&self) -> Classifier<'_> {
        match self.method {
            Method::Hypo => Classifier::Prototype {
                encoder: &self.encoder,
                bank: self.bank.as_ref().expect("hypo state carries a bank"),
            },
            Method::Erm => Classifier::Head {
                encoder: &self.encoder,
                head: self.head.as_ref().expect("erm state carries a head"),
            },
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            method: self.method,
            layer_dims: self.encoder.layer_dims().to_vec(),
            weights: self
                .encoder
                .weights
                .iter()
                .map(crate::checkpoint::matrix_to_nested)
                .collect(),
            biases: self.encoder.biases.iter().map(|b| b.to_vec()).collect(),
            prototypes: self
                .bank
                .as_ref()
                .map(|b| b.rows().iter().map(|r| r.coords().to_vec()).collect())
                .unwrap_or_default(),
            mode: self
                .bank
                .as_ref()
                .map(|b| b.mode())
                .unwrap_or(PrototypeMode::Ema),
            alpha: self.bank.as_ref().map(|b| b.alpha()).unwrap_or(0.95),
            head_weights: self
                .head
                .as_ref()
                .map(|h| crate::checkpoint::matrix_to_nested(&h.weights)),
            head_biases: self.head.as_ref().map(|h| h.biases.to_vec()),
            optimizer: OptimizerState {
                weight_momentum: self
                    .velocity
                    .weights
                    .iter()
                    .map(crate::checkpoint::matrix_to_nested)
                    .collect(),
                bias_momentum: self.velocity.biases.iter().map(|b| b.to_vec()).collect(),
                head_weight_momentum: self
                    .velocity
                    .head_weights
                    .as_ref()
                    .map(crate::checkpoint::matrix_to_nested),
                head_bias_momentum: self.velocity.head_biases.as_ref().map(|b| b.to_vec()),
            },
            rng_state: RngState::capture(&self.rng),
            epoch: self.epoch,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<TrainState> {
        let encoder = ckpt.encoder()?;
        let bank = ckpt.bank()?;
        let head = ckpt.head()?;
        match ckpt.method {
            Method::Hypo if bank.is_none() => {
                return Err(HypoError::SchemaError("hypo checkpoint without prototypes".into()))
            }
            Method::Erm if head.is_none() => {
                return Err(HypoError::SchemaError("erm checkpoint without head".into()))
            }
            _ => {}
        }
        let velocity = Velocity {
            weights: ckpt
                .optimizer
                .weight_momentum
                .iter()
                .map(|w| crate::checkpoint::nested_to_matrix(w))
                .collect::<Result<_>>()?,
            biases: ckpt
                .optimizer
                .bias_momentum
                .iter()
                .map(|b| Array1::from(b.clone()))
                .collect(),
            head_weights: ckpt
                .optimizer
                .head_weight_momentum
                .as_ref()
                .map(|w| crate::checkpoint::nested_to_matrix(w))
                .transpose()?,
            head_biases: ckpt
                .optimizer
                .head_bias_momentum
                .as_ref()
                .map(|b| Array1::from(b.clone())),
        };
        Ok(TrainState {
            method: ckpt.method,
            encoder,
            bank,
            head,
            velocity,
            epoch: ckpt.epoch,
            rng: ckpt.rng_state.restore()?,
            history: Vec::new(),
        })
    }
}

/// Fresh state: encoder, then bank or head, drawn from the run seed.
pub fn init_state(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<TrainState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = MlpEncoder::new(&cfg.layer_dims(input_dim), &mut rng)?;
    let (bank, head) = match cfg.method {
        Method::Hypo => (
            Some(PrototypeBank::init(
                num_classes,
                cfg.embed_dim,
                cfg.prototype_mode,
                cfg.alpha,
                &mut rng,
            )?),
            None,
        ),
        Method::Erm => (None, Some(LinearHead::new(num_classes, cfg.embed_dim, &mut rng))),
    };
    let velocity = Velocity::zeros(&encoder, head.as_ref());
    Ok(TrainState {
        method: cfg.method,
        encoder,
        bank,
        head,
        velocity,
        epoch: 0,
        rng,
        history: Vec::new(),
    })
}

fn attach_batch(err: HypoError, epoch: usize, batch_idx: usize) -> HypoError {
    match err {
        HypoError::DegenerateNorm { norm, threshold, .. } => HypoError::degenerate_ctx(
            norm,
            threshold,
            format!("epoch {epoch}, batch {batch_idx}"),
        ),
        other => other,
    }
}

/// One full pass over the training split: shuffle, twin-augment, embed,
/// stream prototype updates, differentiate against the batch-start bank
/// snapshot, and step the optimizer. Returns the epoch summary and appends
/// it to the state's history.
pub fn train_epoch(
    state: &mut TrainState,
    ds: &EnvDataset,
    split: &DataSplit,
    cfg: &TrainConfig,
) -> Result<EpochSummary> {
    if split.train_idx.is_empty() {
        return Err(HypoError::InvalidConfig("empty training split".into()));
    }
    let lr = match cfg.lr_schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Cosine => cosine_lr(state.epoch, cfg.epochs.max(1), cfg.learning_rate),
    };
    let loss_cfg = LossConfig::new(cfg.tau, cfg.lambda, cfg.hard_negatives, cfg.separation_enabled)?;

    let mut order = split.train_idx.clone();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut state.rng);
    }

    let mut loss_sum = 0.0;
    let mut var_sum = 0.0;
    let mut sep_sum = 0.0;
    let mut view_count = 0usize;

    for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
        // Two jittered views per sample, consecutive in batch order.
        let mut xs: Vec<Array1<f64>> = Vec::with_capacity(2 * chunk.len());
        let mut labels = Vec::with_capacity(2 * chunk.len());
        let mut envs = Vec::with_capacity(2 * chunk.len());
        for &idx in chunk {
            let s = &ds.samples[idx];
            for _ in 0..2 {
                let mut x = s.x.clone();
                if cfg.augment_sigma > 0.0 {
                    for v in x.iter_mut() {
                        *v += cfg.augment_sigma * state.rng.sample::<f64, _>(StandardNormal);
                    }
                }
                xs.push(x);
                labels.push(s.label);
                envs.push(s.env);
            }
        }
        let views = xs.len();

        match state.method {
            Method::Hypo => {
                let mut zs = Vec::with_capacity(views);
                let mut traces = Vec::with_capacity(views);
                for x in &xs {
                    let (z, t) = state
                        .encoder
                        .embed(x)
                        .map_err(|e| attach_batch(e, state.epoch, batch_idx))?;
                    zs.push(z);
                    traces.push(t);
                }
                let batch = Batch::new(zs, labels, envs)?;
                let bank = state.bank.as_mut().expect("hypo state carries a bank");
                // Loss and gradients see the bank as it stood at batch start;
                // streamed updates take effect from the next batch on.
                let snapshot = bank.clone();
                if bank.mode() == PrototypeMode::Ema {
                    for (z, &label) in batch.embeddings.iter().zip(&batch.labels) {
                        bank.ema_update(z, label)
                            .map_err(|e| attach_batch(e, state.epoch, batch_idx))?;
                    }
                }
                let grads = loss::backward(&batch, &snapshot, &loss_cfg, &traces, &state.encoder);

                let var = if cfg.hard_negatives {
                    loss::hard_negative_variation_loss(&batch, &snapshot, &loss_cfg)
                } else {
                    loss::variation_loss(&batch, &snapshot, &loss_cfg)
                };
                let sep = if cfg.separation_enabled {
                    loss::separation_loss(&snapshot, &loss_cfg)
                } else {
                    0.0
                };
                loss_sum += (cfg.lambda * var + sep) * views as f64;
                var_sum += var * views as f64;
                sep_sum += sep * views as f64;

                for l in 0..state.encoder.num_layers() {
                    sgd_step(
                        state.encoder.weights[l].as_slice_mut().unwrap(),
                        grads.encoder.weights[l].as_slice().unwrap(),
                        state.velocity.weights[l].as_slice_mut().unwrap(),
                        lr,
                        cfg.momentum,
                        cfg.weight_decay,
                    );
                    sgd_step(
                        state.encoder.biases[l].as_slice_mut().unwrap(),
                        grads.encoder.biases[l].as_slice().unwrap(),
                        state.velocity.biases[l].as_slice_mut().unwrap(),
                        lr,
                        cfg.momentum,
                        cfg.weight_decay,
                    );
                }
                if let Some(proto_grads) = grads.prototypes {
                    // Learnable prototypes take a plain projected gradient
                    // step: no momentum, no weight decay, re-normalized.
                    let bank = state.bank.as_mut().unwrap();
                    for (c, g) in proto_grads.iter().enumerate() {
                        let stepped = bank.row(c).coords() - &(g * lr);
                        let row = crate::geometry::normalize(&crate::geometry::RawVector::new(
                            stepped,
                        ))
                        .map_err(|e| attach_batch(e, state.epoch, batch_idx))?;
                        bank.set_row(c, row);
                    }
                }
            }
            Method::Erm => {
                let mut traces = Vec::with_capacity(views);
                for x in &xs {
                    traces.push(
                        state
                            .encoder
                            .forward(x)
                            .map_err(|e| attach_batch(e, state.epoch, batch_idx))?,
                    );
                }
                let head = state.head.as_ref().expect("erm state carries a head");
                let (ce, enc_grads, head_grads) =
                    loss::cross_entropy_backward(&state.encoder, head, &traces, &labels);
                loss_sum += ce * views as f64;

                for l in 0..state.encoder.num_layers() {
                    sgd_step(
                        state.encoder.weights[l].as_slice_mut().unwrap(),
                        enc_grads.weights[l].as_slice().unwrap(),
                        state.velocity.weights[l].as_slice_mut().unwrap(),
                        lr,
                        cfg.momentum,
                        cfg.weight_decay,
                    );
                    sgd_step(
                        state.encoder.biases[l].as_slice_mut().unwrap(),
                        enc_grads.biases[l].as_slice().unwrap(),
                        state.velocity.biases[l].as_slice_mut().unwrap(),
                        lr,
                        cfg.momentum,
                        cfg.weight_decay,
                    );
                }
                let head = state.head.as_mut().unwrap();
                sgd_step(
                    head.weights.as_slice_mut().unwrap(),
                    head_grads.weights.as_slice().unwrap(),
                    state.velocity.head_weights.as_mut().unwrap().as_slice_mut().unwrap(),
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                );
                sgd_step(
                    head.biases.as_slice_mut().unwrap(),
                    head_grads.biases.as_slice().unwrap(),
                    state.velocity.head_biases.as_mut().unwrap().as_slice_mut().unwrap(),
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                );
            }
        }
        view_count += views;
    }

    // Post-epoch accuracy over the (unaugmented) training split.
    let clf = state.classifier();
    let mut correct = 0usize;
    for &i in &split.train_idx {
        let s = &ds.samples[i];
        if clf.predict(&s.x)? == s.label {
            correct += 1;
        }
    }
    let train_acc = correct as f64 / split.train_idx.len() as f64;

    let n = view_count as f64;
    let summary = EpochSummary {
        epoch: state.epoch,
        lr,
        total_loss: loss_sum / n,
        var_loss: (state.method == Method::Hypo).then_some(var_sum / n),
        sep_loss: (state.method == Method::Hypo).then_some(sep_sum / n),
        train_acc,
    };
    state.epoch += 1;
    state.history.push(summary.clone());
    Ok(summary)
}

/// Output of a full run: final state plus the per-epoch records produced by
/// this invocation (a resumed run only reports its own epochs).
pub struct RunOutput {
    pub state: TrainState,
    pub rows: Vec<EpochSummary>,
}

/// Runs epochs sequentially until `cfg.epochs`, starting fresh or from a
/// resumed state. Uses the canonical 80/20 training-domain split.
pub fn train_run(cfg: &TrainConfig, ds: &EnvDataset, resume: Option<TrainState>) -> Result<RunOutput> {
    cfg.validate()?;
    if ds.num_classes < 2 {
        return Err(HypoError::InvalidConfig("dataset needs >= 2 classes".into()));
    }
    let split = data::standard_split(ds);
    let mut state = match resume {
        Some(s) => s,
        None => init_state(cfg, ds.input_dim, ds.num_classes)?,
    };
    let mut rows = Vec::new();
    while state.epoch < cfg.epochs {
        rows.push(train_epoch(&mut state, ds, &split, cfg)?);
    }
    Ok(RunOutput { state, rows })
}

/// Writes `epoch,lr,total_loss,var_loss,sep_loss,train_acc`; the baseline's
/// per-term columns stay empty.
pub fn write_epoch_csv(rows: &[EpochSummary], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["epoch", "lr", "total_loss", "var_loss", "sep_loss", "train_acc"])?;
    for row in rows {
        writer.write_record([
            row.epoch.to_string(),
            format!("{}", row.lr),
            format!("{}", row.total_loss),
            row.var_loss.map(|v| format!("{v}")).unwrap_or_default(),
            row.sep_loss.map(|v| format!("{v}")).unwrap_or_default(),
            format!("{}", row.train_acc),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_preset, generate, standard_split, EnvRole, ShiftKind, ShiftSpec};
    use crate::loss::{separation_loss_raw, separation_prototype_grads_raw};
    use rand_chacha::ChaCha8Rng;

    fn tiny_dataset(seed: u64) -> EnvDataset {
        generate(&crate::data::GenerateConfig {
            num_classes: 3,
            input_dim: 4,
            n_per_class_per_env: 10,
            envs: vec![
                ShiftSpec { kind: ShiftKind::Rotation, magnitude: 0.0, role: EnvRole::Train },
                ShiftSpec { kind: ShiftKind::Rotation, magnitude: 20.0, role: EnvRole::Train },
                ShiftSpec { kind: ShiftKind::Rotation, magnitude: 50.0, role: EnvRole::Ood },
            ],
            label_noise: 0.0,
            noise_sigma: 0.3,
            seed,
        })
        .unwrap()
    }

    fn tiny_cfg(method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.05,
            hidden_dims: vec![32],
            embed_dim: 4,
            seed,
            ..TrainConfig::hypo_default(seed)
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.5), 0.5);
        assert!((cosine_lr(250, 500, 0.5) - 0.25).abs() < 1e-15);
        // Next-to-last epoch of a 500-epoch schedule at base 0.5.
        let lr = cosine_lr(499, 500, 0.5);
        assert!((lr - 4.934785965721167e-6).abs() < 1e-15, "got {lr}");
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut p = [1.0, -2.0];
        let g = [0.5, 0.25];
        let mut buf = [0.0, 0.0];
        sgd_step(&mut p, &g, &mut buf, 0.1, 0.0, 0.0);
        assert!((p[0] - (1.0 - 0.05)).abs() < 1e-15);
        assert!((p[1] - (-2.0 - 0.025)).abs() < 1e-15);
    }

    #[test]
    fn sgd_buffer_decays_geometrically_without_gradient() {
        let mut p = [0.0];
        let mut buf = [1.0];
        for step in 1..=5 {
            sgd_step(&mut p, &[0.0], &mut buf, 0.0, 0.9, 0.0);
            assert!((buf[0] - 0.9f64.powi(step)).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_two_step_unroll() {
        // lr 0.1, momentum 0.9, constant unit gradient from zero:
        // deltas -0.1 then -0.19.
        let mut p = [0.0];
        let mut buf = [0.0];
        sgd_step(&mut p, &[1.0], &mut buf, 0.1, 0.9, 0.0);
        assert!((p[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &[1.0], &mut buf, 0.1, 0.9, 0.0);
        assert!((p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn noop_config_leaves_model_untouched() {
        let ds = tiny_dataset(5);
        let mut cfg = tiny_cfg(Method::Hypo, 5);
        cfg.augment_sigma = 0.0;
        cfg.alpha = 1.0;
        cfg.learning_rate = 0.0;
        cfg.lr_schedule = LrSchedule::Constant;
        cfg.epochs = 2;
        let split = standard_split(&ds);
        let mut state = init_state(&cfg, ds.input_dim, ds.num_classes).unwrap();
        let before_weights = state.encoder.weights.clone();
        let before_protos: Vec<_> = state
            .bank
            .as_ref()
            .unwrap()
            .rows()
            .iter()
            .map(|r| r.coords().clone())
            .collect();
        train_epoch(&mut state, &ds, &split, &cfg).unwrap();
        train_epoch(&mut state, &ds, &split, &cfg).unwrap();
        assert_eq!(state.epoch, 2);
        assert_eq!(state.history.len(), 2);
        for (a, b) in before_weights.iter().zip(&state.encoder.weights) {
            assert_eq!(a, b);
        }
        for (a, b) in before_protos.iter().zip(state.bank.as_ref().unwrap().rows()) {
            assert_eq!(a, b.coords());
        }
    }

    #[test]
    fn identical_seeds_give_bit_identical_checkpoints() {
        let ds = tiny_dataset(7);
        let cfg = tiny_cfg(Method::Hypo, 7);
        let a = train_run(&cfg, &ds, None).unwrap();
        let b = train_run(&cfg, &ds, None).unwrap();
        let ja = serde_json::to_string(&a.state.to_checkpoint()).unwrap();
        let jb = serde_json::to_string(&b.state.to_checkpoint()).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn erm_and_hypo_diverge_but_both_run() {
        let ds = tiny_dataset(9);
        let hypo = train_run(&tiny_cfg(Method::Hypo, 9), &ds, None).unwrap();
        let erm = train_run(&tiny_cfg(Method::Erm, 9), &ds, None).unwrap();
        assert!(hypo.state.bank.is_some() && hypo.state.head.is_none());
        assert!(erm.state.head.is_some() && erm.state.bank.is_none());
        assert_eq!(hypo.rows.len(), 3);
        assert!(erm.rows.iter().all(|r| r.var_loss.is_none() && r.sep_loss.is_none()));
        assert!(hypo.rows.iter().all(|r| r.var_loss.is_some() && r.sep_loss.is_some()));
    }

    #[test]
    fn prototypes_stay_unit_norm_through_training() {
        let ds = tiny_dataset(11);
        for mode in [PrototypeMode::Ema, PrototypeMode::Learnable] {
            let mut cfg = tiny_cfg(Method::Hypo, 11);
            cfg.prototype_mode = mode;
            cfg.epochs = 4;
            let out = train_run(&cfg, &ds, None).unwrap();
            for row in out.state.bank.unwrap().rows() {
                let norm = row.coords().dot(row.coords()).sqrt();
                assert!((norm - 1.0).abs() <= 1e-9, "norm {norm} in mode {mode:?}");
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = tiny_dataset(13);
        let mut cfg = tiny_cfg(Method::Hypo, 13);
        cfg.epochs = 4;
        let full = train_run(&cfg, &ds, None).unwrap();

        let split = standard_split(&ds);
        let mut partial = init_state(&cfg, ds.input_dim, ds.num_classes).unwrap();
        train_epoch(&mut partial, &ds, &split, &cfg).unwrap();
        train_epoch(&mut partial, &ds, &split, &cfg).unwrap();
        let ckpt = partial.to_checkpoint();
        let resumed_state = TrainState::from_checkpoint(&ckpt).unwrap();
        let resumed = train_run(&cfg, &ds, Some(resumed_state)).unwrap();

        let ja = serde_json::to_string(&full.state.to_checkpoint()).unwrap();
        let jb = serde_json::to_string(&resumed.state.to_checkpoint()).unwrap();
        assert_eq!(ja, jb);
        // The resumed run reports only its own two epochs.
        assert_eq!(resumed.rows.len(), 2);
        assert_eq!(resumed.rows[0].epoch, 2);
    }

    #[test]
    fn zero_epochs_production_initial_checkpoint_only() {
        let ds = tiny_dataset(15);
        let mut cfg = tiny_cfg(Method::Hypo, 15);
        cfg.epochs = 0;
        let out = train_run(&cfg, &ds, None).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.state.epoch, 0);
    }

    #[test]
    fn default_preset_loss_improves() {
        // Short smoke run on the default synthetic task: the mean training
        // loss after the last epoch beats the first epoch's.
        let ds = generate(&default_preset(1)).unwrap();
        let mut cfg = tiny_cfg(Method::Hypo, 1);
        cfg.epochs = 10;
        cfg.hidden_dims = vec![64];
        cfg.embed_dim = 8;
        cfg.batch_size = 64;
        let out = train_run(&cfg, &ds, None).unwrap();
        let first = out.rows.first().unwrap().total_loss;
        let last = out.rows.last().unwrap().total_loss;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn learnable_separation_descent_is_monotone() {
        // Projected gradient descent on the separation term alone (frozen
        // encoder), C = 3, d = 3, lr 0.01: the loss never increases over
        // 100 steps.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows: Vec<Array1<f64>> = (0..3)
            .map(|_| crate::geometry::random_unit_direction(3, &mut rng).coords().clone())
            .collect();
        let mut prev = separation_loss_raw(&rows, 1.0);
        for _ in 0..100 {
            let grads = separation_prototype_grads_raw(&rows, 1.0);
            for (row, g) in rows.iter_mut().zip(grads) {
                let stepped = &*row - &(g * 0.01);
                *row = crate::geometry::normalize(&crate::geometry::RawVector::new(stepped))
                    .unwrap()
                    .coords()
                    .clone();
            }
            let now = separation_loss_raw(&rows, 1.0);
            assert!(now <= prev + 1e-12, "separation rose: {prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn epoch_csv_has_empty_fields_for_erm() {
        let rows = vec![
            EpochSummary {
                epoch: 0,
                lr: 0.1,
                total_loss: 1.5,
                var_loss: None,
                sep_loss: None,
                train_acc: 0.5,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("epochs.csv");
        write_epoch_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,lr,total_loss,var_loss,sep_loss,train_acc"
        );
        assert_eq!(lines.next().unwrap(), "0,0.1,1.5,,,0.5");
    }
}
