//! Fine-tuning and from-scratch training: frozen vs. unfrozen backbone,
//! pretrained vs. scratch initialization, plus the masked-patch pretext in
//! [`pretext`].
//!
//! Targets are z-scored with statistics from the training split only; the
//! optimizer is Adam (beta1 0.9, beta2 0.999, eps 1e-8) with no schedule and
//! no weight decay. Runs are fully deterministic for fixed seeds.

mod pretext;

pub use pretext::{pretrain_pretext, PretextHistory, PretextOptions};

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    forward_batch, insert_params, load_model, segments_to_tensor, EncoderModel, ModelConfig,
    ModelError, ModelVars, Provenance, TargetNorm,
};
use crate::signal::{SegmentDataset, SignalSegment};
use crate::tensor::{GradTape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid training option: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("internal tensor error: {0}")]
    Tensor(TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    Frozen,
    Unfrozen,
}

impl std::str::FromStr for BackboneMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "frozen" => Ok(BackboneMode::Frozen),
            "unfrozen" => Ok(BackboneMode::Unfrozen),
            other => Err(format!("unknown backbone mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitMode {
    Scratch,
    Pretrained(PathBuf),
}

/// Everything a training run needs beyond the datasets.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub backbone_mode: BackboneMode,
    pub init_mode: InitMode,
    /// `None` derives the statistics from the training split at entry.
    pub target_normalization: Option<TargetNorm>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 3e-4,
            seed: 42,
            backbone_mode: BackboneMode::Unfrozen,
            init_mode: InitMode::Scratch,
            target_normalization: None,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae_sbp: f64,
    pub val_mae_dbp: f64,
}

/// Per-epoch losses and validation errors; one record per epoch.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// JSON lines, one record per epoch.
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for rec in &self.epochs {
            out.push_str(&serde_json::to_string(rec).expect("serializable record"));
            out.push('\n');
        }
        std::fs::write(path, out)
    }
}

/// Parameter identifiers that receive gradient updates under a backbone
/// mode. Frozen keeps exactly the first input-embedding layer (projection
/// and bias) and the head; positional/channel embeddings stay frozen.
pub fn trainable_set<T: crate::tensor::Scalar>(
    model: &EncoderModel<T>,
    mode: BackboneMode,
) -> BTreeSet<String> {
    match mode {
        BackboneMode::Unfrozen => model
            .named_tensors()
            .into_iter()
            .map(|(name, _)| name)
            .collect(),
        BackboneMode::Frozen => ["patch_embed.w", "patch_embed.b", "head.w", "head.b"]
            .into_iter()
            .map(String::from)
            .collect(),
    }
}

/// Mean squared error averaged over the batch and both targets.
pub fn loss(predictions: &Tensor<f32>, targets: &Tensor<f32>) -> Result<f32> {
    if predictions.shape() != targets.shape() {
        return Err(TrainError::Config(format!(
            "prediction shape {:?} vs target shape {:?}",
            predictions.shape(),
            targets.shape()
        )));
    }
    let n = predictions.numel() as f64;
    let sum: f64 = predictions
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| ((p - t) as f64).powi(2))
        .sum();
    Ok((sum / n) as f32)
}

/// Population mean/sd of SBP and DBP over a dataset.
pub fn compute_target_norm(ds: &SegmentDataset) -> Result<TargetNorm> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = ds.len() as f64;
    let stats = |pick: fn(&SignalSegment) -> f32| -> (f32, f32) {
        let mean = ds.segments.iter().map(|s| pick(s) as f64).sum::<f64>() / n;
        let var = ds
            .segments
            .iter()
            .map(|s| (pick(s) as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean as f32, var.sqrt() as f32)
    };
    let (sbp_mean, sbp_sd) = stats(|s| s.sbp);
    let (dbp_mean, dbp_sd) = stats(|s| s.dbp);
    if sbp_sd <= 0.0 || dbp_sd <= 0.0 {
        return Err(TrainError::Config(
            "target normalization needs non-degenerate labels".into(),
        ));
    }
    Ok(TargetNorm {
        sbp_mean,
        sbp_sd,
        dbp_mean,
        dbp_sd,
    })
}

/// Z-scored `[n, 2]` target tensor for a slice of segments.
pub fn normalize_targets(segments: &[&SignalSegment], norm: &TargetNorm) -> Tensor<f32> {
    let mut data = Vec::with_capacity(segments.len() * 2);
    for s in segments {
        data.push((s.sbp - norm.sbp_mean) / norm.sbp_sd);
        data.push((s.dbp - norm.dbp_mean) / norm.dbp_sd);
    }
    Tensor::from_vec(vec![segments.len(), 2], data).expect("target shape")
}

/// Map normalized `[n, 2]` predictions back to mmHg pairs `(SBP, DBP)`.
pub fn denormalize(predictions: &Tensor<f32>, norm: &TargetNorm) -> Result<Vec<(f32, f32)>> {
    if norm.sbp_sd <= 0.0 || norm.dbp_sd <= 0.0 || !norm.sbp_sd.is_finite() || !norm.dbp_sd.is_finite()
    {
        return Err(TrainError::Config("normalization sd must be positive".into()));
    }
    Ok(predictions
        .data()
        .chunks_exact(2)
        .map(|p| {
            (
                p[0] * norm.sbp_sd + norm.sbp_mean,
                p[1] * norm.dbp_sd + norm.dbp_mean,
            )
        })
        .collect())
}

/// Resolve the starting model for a run: fresh Xavier weights for scratch,
/// a checkpoint for pretrained.
pub fn prepare_model(cfg: &ModelConfig, opts: &TrainOptions) -> Result<EncoderModel<f32>> {
    match &opts.init_mode {
        InitMode::Scratch => Ok(crate::model::init_xavier(cfg, opts.seed)?),
        InitMode::Pretrained(path) => {
            let model = load_model(path)?;
            if &model.cfg != cfg {
                return Err(TrainError::Config(format!(
                    "checkpoint config {:?} does not match requested {:?}",
                    model.cfg.size_tag, cfg.size_tag
                )));
            }
            Ok(model)
        }
    }
}

pub(crate) struct Adam {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub(crate) fn new() -> Self {
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: HashMap::new(),
        }
    }

    pub(crate) fn begin_step(&mut self) {
        self.step += 1;
    }

    pub(crate) fn update(&mut self, name: &str, weights: &mut Tensor<f32>, grad: &Tensor<f32>, lr: f64) {
        let n = weights.numel();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let data = weights.data_mut();
        for i in 0..n {
            let g = grad.data()[i] as f64;
            let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
            let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            data[i] -= update as f32;
        }
    }
}

/// One training step over a prepared batch; returns the batch loss.
fn train_step(
    model: &mut EncoderModel<f32>,
    batch: &[&SignalSegment],
    norm: &TargetNorm,
    trainable: &BTreeSet<String>,
    adam: &mut Adam,
    lr: f64,
    epoch: usize,
) -> Result<f64> {
    let diverged = |e: TensorError| match e {
        TensorError::NonFinite { .. } => TrainError::Diverged { epoch },
        other => TrainError::Tensor(other),
    };
    let input = segments_to_tensor::<f32>(
        &batch.iter().map(|s| (*s).clone()).collect::<Vec<_>>(),
        &model.cfg,
    )?;
    let mut tape = GradTape::new();
    let vars = insert_params(&mut tape, model, trainable);
    let (pred, _) = forward_batch(&mut tape, &vars, &model.cfg, input, false).map_err(|e| {
        match e {
            ModelError::Tensor(t) => diverged(t),
            other => TrainError::Model(other),
        }
    })?;
    let targets = tape.constant(normalize_targets(batch, norm));
    let loss_var = tape.mse(pred, targets).map_err(diverged)?;
    let loss_val = tape.value(loss_var).item() as f64;
    if !loss_val.is_finite() {
        return Err(TrainError::Diverged { epoch });
    }
    let grads = tape.backward(loss_var).map_err(diverged)?;

    adam.begin_step();
    apply_updates(model, &vars, &grads, trainable, adam, lr);
    Ok(loss_val)
}

fn apply_updates(
    model: &mut EncoderModel<f32>,
    vars: &ModelVars,
    grads: &crate::tensor::Gradients<f32>,
    trainable: &BTreeSet<String>,
    adam: &mut Adam,
    lr: f64,
) {
    let var_by_name: HashMap<String, crate::tensor::Var> = named_vars(vars);
    for (name, tensor) in model.tensors_mut() {
        if !trainable.contains(&name) {
            continue;
        }
        let var = var_by_name[&name];
        if let Some(grad) = grads.get(var) {
            adam.update(&name, tensor, grad, lr);
        }
    }
}

pub(crate) fn named_vars(vars: &ModelVars) -> HashMap<String, crate::tensor::Var> {
    let mut map = HashMap::new();
    map.insert("patch_embed.w".into(), vars.patch_embed_w);
    map.insert("patch_embed.b".into(), vars.patch_embed_b);
    map.insert("pos_emb".into(), vars.pos_emb);
    map.insert("chan_emb".into(), vars.chan_emb);
    for (i, b) in vars.blocks.iter().enumerate() {
        map.insert(format!("block{i}.ln1.g"), b.ln1_g);
        map.insert(format!("block{i}.ln1.b"), b.ln1_b);
        map.insert(format!("block{i}.attn.wq"), b.wq);
        map.insert(format!("block{i}.attn.wk"), b.wk);
        map.insert(format!("block{i}.attn.wv"), b.wv);
        map.insert(format!("block{i}.attn.wo"), b.wo);
        map.insert(format!("block{i}.ln2.g"), b.ln2_g);
        map.insert(format!("block{i}.ln2.b"), b.ln2_b);
        map.insert(format!("block{i}.ff.w1"), b.ff_w1);
        map.insert(format!("block{i}.ff.w2"), b.ff_w2);
    }
    map.insert("final_ln.g".into(), vars.final_ln_g);
    map.insert("final_ln.b".into(), vars.final_ln_b);
    map.insert("head.w".into(), vars.head_w);
    map.insert("head.b".into(), vars.head_b);
    map
}

/// Validation metrics: normalized-unit MSE plus per-target MAE in mmHg.
pub fn validate(
    model: &EncoderModel<f32>,
    ds: &SegmentDataset,
    norm: &TargetNorm,
) -> Result<(f64, f64, f64)> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let preds = model.predict(&ds.segments)?;
    let refs: Vec<&SignalSegment> = ds.segments.iter().collect();
    let targets = normalize_targets(&refs, norm);
    let val_loss = loss(&preds, &targets)? as f64;
    let mmhg = denormalize(&preds, norm)?;
    let n = ds.len() as f64;
    let mae_sbp = ds
        .segments
        .iter()
        .zip(&mmhg)
        .map(|(s, p)| (s.sbp - p.0).abs() as f64)
        .sum::<f64>()
        / n;
    let mae_dbp = ds
        .segments
        .iter()
        .zip(&mmhg)
        .map(|(s, p)| (s.dbp - p.1).abs() as f64)
        .sum::<f64>()
        / n;
    Ok((val_loss, mae_sbp, mae_dbp))
}

/// Mini-batch gradient descent over the trainable parameter set. Frozen
/// parameters come back bit-identical; histories and final weights are
/// deterministic for fixed seeds.
pub fn train(
    mut model: EncoderModel<f32>,
    train_ds: &SegmentDataset,
    val_ds: &SegmentDataset,
    opts: &TrainOptions,
) -> Result<(EncoderModel<f32>, TrainHistory)> {
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if opts.epochs == 0 {
        return Err(TrainError::Config("epochs must be >= 1".into()));
    }
    if opts.learning_rate <= 0.0 || opts.batch_size == 0 {
        return Err(TrainError::Config(
            "learning rate and batch size must be positive".into(),
        ));
    }
    let norm = match opts.target_normalization {
        Some(n) => n,
        None => compute_target_norm(train_ds)?,
    };
    let trainable = trainable_set(&model, opts.backbone_mode);
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut history = TrainHistory::default();

    let n = train_ds.len();
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_weighted = 0.0f64;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&SignalSegment> = chunk.iter().map(|&i| &train_ds.segments[i]).collect();
            let batch_loss = train_step(
                &mut model,
                &batch,
                &norm,
                &trainable,
                &mut adam,
                opts.learning_rate,
                epoch,
            )?;
            loss_weighted += batch_loss * batch.len() as f64;
        }
        let (val_loss, val_mae_sbp, val_mae_dbp) = validate(&model, val_ds, &norm)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_weighted / n as f64,
            val_loss,
            val_mae_sbp,
            val_mae_dbp,
        });
    }

    model.meta.norm = norm;
    model.meta.provenance = match opts.init_mode {
        InitMode::Scratch => Provenance::Scratch,
        InitMode::Pretrained(_) => Provenance::FineTuned,
    };
    model.meta.frozen_backbone = opts.backbone_mode == BackboneMode::Frozen;
    model.meta.epochs = opts.epochs as u32;
    Ok((model, history))
}
