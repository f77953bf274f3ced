//! Two-stage training: cross-sectional encoder pre-training, then joint
//! training of the full model under the combined objective with early
//! stopping on validation balanced accuracy.

mod log;
mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Gradients, Tape, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::evaluation::{confusion_metrics, visit_level, SubjectPrediction, THRESHOLD};
use crate::model::{stack_volumes, ArchConfig, Forward, Mode, ModelParams, Variant};
use crate::objectives::{
    self, balanced_w_pos, CohortRole, LossWeights, ObjectiveValues, SubjectPreds,
};
use crate::parallel::{self, Exec};
use crate::rng;
use crate::synth::Subject;
use crate::tensor::Tensor;

pub use log::{LogRow, Phase, TrainLog, LOG_HEADER};
pub use optim::{optimizer_step, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WPosPolicy {
    /// Negative over positive visit count of the training split.
    Balanced,
    /// Use `TrainConfig::w_pos` as given.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Adds the consistency term; with `false` the run uses `lambda_cons = 0`.
    pub consistency: bool,
    #[serde(serialize_with = "crate::short_f32")]
    pub lambda_cons: f32,
    #[serde(serialize_with = "crate::short_f32")]
    pub lambda_reg: f32,
    pub w_pos_policy: WPosPolicy,
    #[serde(serialize_with = "crate::short_f32")]
    pub w_pos: f32,
    pub optimizer: AdamConfig,
    /// Subjects per joint-training batch.
    pub batch_size: usize,
    /// Visits per pre-training batch.
    pub pretrain_batch: usize,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    /// Stop after this many epochs without a better validation BACC.
    pub patience: usize,
    /// Keep the pre-trained convolutional blocks fixed during joint training
    /// and reuse their eval-mode features.
    pub freeze_conv: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::CnnRnnLp,
            consistency: true,
            lambda_cons: 2.0,
            lambda_reg: 0.02,
            w_pos_policy: WPosPolicy::Balanced,
            w_pos: 1.0,
            optimizer: AdamConfig::default(),
            batch_size: 8,
            pretrain_batch: 32,
            pretrain_epochs: 50,
            joint_epochs: 100,
            patience: 20,
            freeze_conv: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.weights(1.0).validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.pretrain_batch == 0 {
            return Err(Error::config("train.pretrain_batch", "must be >= 1"));
        }
        if self.joint_epochs == 0 {
            return Err(Error::config("train.joint_epochs", "must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be >= 1"));
        }
        if !(self.w_pos > 0.0 && self.w_pos.is_finite()) {
            return Err(Error::config("train.w_pos", "must be a finite value > 0"));
        }
        Ok(())
    }

    /// Loss weights with the consistency switch applied and `w_pos` resolved.
    pub fn weights(&self, balanced: f32) -> LossWeights {
        LossWeights {
            lambda_cons: if self.consistency {
                self.lambda_cons
            } else {
                0.0
            },
            lambda_reg: self.lambda_reg,
            w_pos: match self.w_pos_policy {
                WPosPolicy::Balanced => balanced,
                WPosPolicy::Fixed => self.w_pos,
            },
        }
    }

    pub fn resolve_weights(&self, train: &[Subject]) -> LossWeights {
        let labels = train
            .iter()
            .filter(|s| s.role.in_classification())
            .flat_map(|s| s.labels.iter().copied());
        self.weights(balanced_w_pos(labels))
    }
}

/// Per-subject input of a training or evaluation pass: raw volumes, or
/// cached flattened conv-trunk features when the encoder is frozen.
#[derive(Clone, Copy, Debug)]
pub enum Inputs<'a> {
    Volumes(&'a [Tensor]),
    Trunk(&'a [Tensor]),
}

impl<'a> Inputs<'a> {
    fn tensors(&self) -> &'a [Tensor] {
        match *self {
            Inputs::Volumes(v) | Inputs::Trunk(v) => v,
        }
    }
}

/// Runs the model over several subjects on one tape. All visits are encoded
/// as a single batch (so train-mode batch norm sees the whole batch), then
/// split back per subject for the sequence head.
pub fn forward_batch(
    tape: &mut Tape,
    fwd: &mut Forward,
    inputs: &[Inputs],
) -> Result<Vec<Vec<Var>>> {
    let trunk = match inputs.first() {
        Some(Inputs::Trunk(_)) => true,
        Some(Inputs::Volumes(_)) => false,
        None => return Err(Error::invalid("forward_batch", "empty batch")),
    };
    if inputs
        .iter()
        .any(|i| matches!(i, Inputs::Trunk(_)) != trunk)
    {
        return Err(Error::invalid(
            "forward_batch",
            "mixed trunk and volume inputs",
        ));
    }
    let all: Vec<&Tensor> = inputs.iter().flat_map(|i| i.tensors().iter()).collect();
    let stacked = tape.leaf(stack_volumes(&all)?);
    let feats = if trunk {
        fwd.encoder_fc(tape, stacked)?
    } else {
        fwd.encode(tape, stacked)?
    };
    let rows = Forward::rows(tape, feats)?;
    let mut out = Vec::with_capacity(inputs.len());
    let mut start = 0;
    for i in inputs {
        let m = i.tensors().len();
        out.push(fwd.predict_from_features(tape, &rows[start..start + m])?);
        start += m;
    }
    Ok(out)
}

/// Objective value, parameter gradients and batch norm statistics of one
/// mini-batch.
pub struct BatchResult {
    pub values: ObjectiveValues,
    /// Gradient of the total objective per parameter tensor.
    pub grads: Vec<Tensor>,
    pub norm_updates: Vec<Option<BatchStats>>,
    /// Train-mode predictions, one vector per subject.
    pub preds: Vec<Vec<f64>>,
}

/// Builds the batch objective on a fresh tape and differentiates it.
pub fn batch_step(
    params: &ModelParams,
    inputs: &[Inputs],
    roles: &[CohortRole],
    weights: &LossWeights,
    penalize: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<BatchResult> {
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, params, Mode::Train(rng));
    let preds = forward_batch(&mut tape, &mut fwd, inputs)?;
    let subjects: Vec<SubjectPreds> = preds
        .iter()
        .zip(roles)
        .map(|(p, &role)| SubjectPreds {
            preds: p.clone(),
            role,
        })
        .collect();
    let penalty = if penalize {
        objectives::l2_penalty_tape(&mut tape, params, fwd.param_vars())?
    } else {
        let z = tape.leaf(Tensor::scalar(0.0));
        tape.sum(z)
    };
    let obj = objectives::batch_objective(&mut tape, &subjects, penalty, weights)?;
    let values = obj.values(&tape);
    if !values.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite training loss {values:?}"
        )));
    }
    let mut g: Gradients = tape.backward(obj.total)?;
    let grads = fwd.param_vars().iter().map(|&v| g.take(v)).collect();
    let preds = preds
        .iter()
        .map(|p| p.iter().map(|&v| tape.scalar(v) as f64).collect())
        .collect();
    Ok(BatchResult {
        values,
        grads,
        norm_updates: fwd.into_norm_updates(),
        preds,
    })
}

fn apply_norm_updates(params: &mut ModelParams, updates: Vec<Option<BatchStats>>) {
    for (rs, u) in params.norms.iter_mut().zip(updates) {
        if let Some(u) = u {
            rs.update(&u, BN_MOMENTUM);
        }
    }
}

/// Eval-mode predictions for each subject, fanned out over subjects.
pub fn predict(
    params: &ModelParams,
    subjects: &[Subject],
    inputs: &[Inputs],
    exec: Exec,
) -> Result<Vec<SubjectPrediction>> {
    if subjects.len() != inputs.len() {
        return Err(Error::shape(
            "predict",
            format!("{} subjects, {} inputs", subjects.len(), inputs.len()),
        ));
    }
    let idx: Vec<usize> = (0..subjects.len()).collect();
    parallel::try_map_slice(exec, &idx, |&i| {
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, params, Mode::Eval);
        let preds = forward_batch(&mut tape, &mut fwd, &inputs[i..i + 1])?;
        let s = &subjects[i];
        Ok(SubjectPrediction {
            id: s.id.clone(),
            role: s.role,
            labels: s.labels.clone(),
            preds: preds[0].iter().map(|&v| tape.scalar(v) as f64).collect(),
        })
    })
}

/// Visit-level BACC over controls and positives.
pub fn bacc_of(preds: &[SubjectPrediction]) -> Result<f64> {
    let (scores, labels) = visit_level(preds);
    Ok(confusion_metrics(&scores, &labels, THRESHOLD)?.bacc)
}

/// Index of the largest value; ties go to the earliest. NaN never wins.
pub fn best_epoch(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Order-sensitive FNV-1a digest of everything fed into gradient
/// computations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Digest(pub u64);

impl Default for Digest {
    fn default() -> Self {
        Digest(0xcbf2_9ce4_8422_2325)
    }
}

impl Digest {
    pub fn bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0 ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
        }
    }

    pub fn tensor(&mut self, t: &Tensor) {
        for v in t.data() {
            self.bytes(&v.to_bits().to_le_bytes());
        }
    }
}

/// Every visit of every subject as an independent sample.
fn visit_samples(subjects: &[Subject]) -> Vec<(usize, usize)> {
    subjects
        .iter()
        .enumerate()
        .filter(|(_, s)| s.role.in_classification())
        .flat_map(|(i, s)| (0..s.visits()).map(move |t| (i, t)))
        .collect()
}

/// Cross-sectional pre-training: a linear probe on `c_t` over every training
/// visit, under plain weighted BCE. Returns the trained model (probe
/// included); callers keep only its convolutional blocks.
pub fn pretrain_encoder(
    arch: &ArchConfig,
    train: &[Subject],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<ModelParams> {
    cfg.validate()?;
    let samples = visit_samples(train);
    if samples.is_empty() {
        return Err(Error::invalid("pretrain_encoder", "empty training set"));
    }
    let mut params = ModelParams::init(
        Variant::Cnn,
        arch,
        rng::derive_seed(cfg.seed, "pretrain_init", 0),
    )?;
    let mut state = AdamState::new(&params.tensors);
    let weights = LossWeights {
        lambda_cons: 0.0,
        lambda_reg: 0.0,
        ..cfg.resolve_weights(train)
    };
    let start = Instant::now();
    for epoch in 0..cfg.pretrain_epochs {
        let mut order = samples.clone();
        order.shuffle(&mut rng::stream(cfg.seed, "pretrain_shuffle", epoch as u64));
        let mut sums = ObjectiveValues::default();
        let mut batches = 0;
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for (b, chunk) in order.chunks(cfg.pretrain_batch).enumerate() {
            let inputs: Vec<Inputs> = chunk
                .iter()
                .map(|&(i, t)| Inputs::Volumes(&train[i].volumes[t..t + 1]))
                .collect();
            let roles: Vec<CohortRole> = chunk.iter().map(|&(i, _)| train[i].role).collect();
            let mut r = rng::stream(cfg.seed, "pretrain_dropout", (epoch * 1_000_003 + b) as u64);
            let res = batch_step(&params, &inputs, &roles, &weights, false, &mut r)
                .map_err(|e| diverged(e, "pretrain", epoch, b))?;
            let grads: Vec<Option<Tensor>> = res.grads.into_iter().map(Some).collect();
            optimizer_step(&mut params.tensors, &grads, &mut state, &cfg.optimizer)?;
            apply_norm_updates(&mut params, res.norm_updates);
            accumulate(&mut sums, &res.values);
            batches += 1;
            for (&(i, t), p) in chunk.iter().zip(&res.preds) {
                scores.push(p[0]);
                labels.push(train[i].labels[t]);
            }
        }
        let train_bacc = confusion_metrics(&scores, &labels, THRESHOLD)
            .map(|c| c.bacc)
            .unwrap_or(f64::NAN);
        log.push(LogRow::new(
            Phase::Pretrain,
            epoch,
            &sums,
            batches,
            train_bacc,
            f64::NAN,
            start,
        ))?;
    }
    Ok(params)
}

fn diverged(e: Error, phase: &str, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!(
            "{phase} diverged at epoch {epoch}, batch {batch}: {msg}"
        )),
        other => other,
    }
}

fn accumulate(sums: &mut ObjectiveValues, v: &ObjectiveValues) {
    sums.neg_entropy += v.neg_entropy;
    sums.consistency += v.consistency;
    sums.penalty += v.penalty;
    sums.total += v.total;
}

/// Result of [`joint_train`].
pub struct JointOutcome {
    /// Parameters of the best validation epoch.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_val_bacc: f64,
    pub epochs_run: usize,
    /// Digest of the subject ids and inputs of every gradient computation.
    pub input_digest: Digest,
}

/// The model at joint-training step 0: fresh FC, fusion, GRU and head
/// weights, convolutional blocks copied from the pre-trained encoder.
pub fn joint_init(
    arch: &ArchConfig,
    pretrained: &ModelParams,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    let mut params = ModelParams::init(
        cfg.variant,
        arch,
        rng::derive_seed(cfg.seed, "joint_init", 0),
    )?;
    params.copy_conv_blocks_from(pretrained)?;
    Ok(params)
}

/// Flattened eval-mode conv-trunk features of each subject's visits.
pub fn trunk_cache(
    params: &ModelParams,
    subjects: &[Subject],
    exec: Exec,
) -> Result<Vec<Vec<Tensor>>> {
    parallel::try_map_slice(exec, subjects, |s| {
        crate::model::trunk_features(params, &s.volumes)
    })
}

/// Per-subject inputs: cached trunk features when present, else volumes.
pub fn input_views<'a>(
    subjects: &'a [Subject],
    cache: Option<&'a [Vec<Tensor>]>,
) -> Vec<Inputs<'a>> {
    match cache {
        Some(c) => c.iter().map(|f| Inputs::Trunk(f)).collect(),
        None => subjects
            .iter()
            .map(|s| Inputs::Volumes(&s.volumes))
            .collect(),
    }
}

/// Joint training of the full model under Eq. 6, keeping the parameters of
/// the epoch with the best validation BACC.
pub fn joint_train(
    arch: &ArchConfig,
    pretrained: &ModelParams,
    train: &[Subject],
    val: &[Subject],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<JointOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("joint_train", "empty training set"));
    }
    if val.is_empty() {
        return Err(Error::invalid("joint_train", "empty validation set"));
    }
    let mut params = joint_init(arch, pretrained, cfg)?;
    let weights = cfg.resolve_weights(train);
    let (train_cache, val_cache) = if cfg.freeze_conv {
        (
            Some(trunk_cache(&params, train, Exec::Parallel)?),
            Some(trunk_cache(&params, val, Exec::Parallel)?),
        )
    } else {
        (None, None)
    };
    let train_inputs = input_views(train, train_cache.as_deref());
    let val_inputs = input_views(val, val_cache.as_deref());
    let frozen: Vec<bool> = (0..params.tensors.len())
        .map(|i| cfg.freeze_conv && params.group(i).is_conv_block())
        .collect();

    let mut state = AdamState::new(&params.tensors);
    let mut digest = Digest::default();
    let mut val_history = Vec::new();
    let mut best = params.clone();
    let start = Instant::now();
    let mut epochs_run = 0;
    for epoch in 0..cfg.joint_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "joint_shuffle", epoch as u64));
        let mut sums = ObjectiveValues::default();
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<Inputs> = chunk.iter().map(|&i| train_inputs[i]).collect();
            let roles: Vec<CohortRole> = chunk.iter().map(|&i| train[i].role).collect();
            for (&i, inp) in chunk.iter().zip(&inputs) {
                digest.bytes(train[i].id.as_bytes());
                inp.tensors().iter().for_each(|t| digest.tensor(t));
            }
            let mut r = rng::stream(cfg.seed, "joint_dropout", (epoch * 1_000_003 + b) as u64);
            let res = batch_step(&params, &inputs, &roles, &weights, true, &mut r)
                .map_err(|e| diverged(e, "joint", epoch, b))?;
            let grads: Vec<Option<Tensor>> = res
                .grads
                .into_iter()
                .zip(&frozen)
                .map(|(g, &f)| (!f).then_some(g))
                .collect();
            optimizer_step(&mut params.tensors, &grads, &mut state, &cfg.optimizer)?;
            if !cfg.freeze_conv {
                apply_norm_updates(&mut params, res.norm_updates);
            }
            accumulate(&mut sums, &res.values);
            batches += 1;
        }
        let preds = predict(&params, val, &val_inputs, Exec::Parallel)?;
        let val_bacc = bacc_of(&preds)?;
        log.push(LogRow::new(
            Phase::Joint,
            epoch,
            &sums,
            batches,
            f64::NAN,
            val_bacc,
            start,
        ))?;
        val_history.push(val_bacc);
        epochs_run = epoch + 1;
        let b = best_epoch(&val_history).expect("non-empty history");
        if b == epoch {
            best = params.clone();
        } else if epoch - b >= cfg.patience {
            break;
        }
    }
    let best_epoch = best_epoch(&val_history).expect("at least one epoch");
    Ok(JointOutcome {
        params: best,
        best_epoch,
        best_val_bacc: val_history[best_epoch],
        epochs_run,
        input_digest: digest,
    })
}
