//! Mini-batch training shared by every neural model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::macro_f1_indices;
use crate::matrix::FeatureMatrix;
use crate::nn::{softmax_xent, Adam, AdamConfig, NnError, Param, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("row {row_id} has no {level} label")]
    MissingLabel { row_id: u64, level: String },
    #[error("matrix has no {0} label column")]
    NoLabelColumn(String),
    #[error("bad training config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        TrainConfig {
            batch_size: 200,
            epochs: 100,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_epsilon: a.epsilon,
            seed: 0,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, epsilon: self.adam_epsilon }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(TrainError::Config(format!("validation_fraction {} not in (0, 1)", self.validation_fraction)));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// A network with one softmax head per task.
pub trait MultiHead {
    fn input_width(&self) -> usize;
    fn head_classes(&self) -> Vec<usize>;
    /// `x` is row-major `[batch, input_width]`. Returns one logit tensor per head.
    fn forward(&mut self, x: &[f32], batch: usize, train: bool) -> Result<Vec<Tensor<f32>>, NnError>;
    /// Accumulates gradients from one logit gradient per head.
    fn backward(&mut self, dlogits: &[Tensor<f32>]) -> Result<(), NnError>;
    fn params(&self) -> Vec<&Param<f32>>;
    fn params_mut(&mut self) -> Vec<&mut Param<f32>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    /// Weighted sum of the head losses.
    pub joint: f64,
    pub heads: Vec<f64>,
}

/// One forward/backward/update on a batch.
pub fn train_step<M: MultiHead + ?Sized>(
    model: &mut M,
    adam: &mut Adam<f32>,
    x: &[f32],
    targets: &[Vec<usize>],
    weights: &[f32],
) -> Result<StepLoss, NnError> {
    let batch = targets[0].len();
    let logits = model.forward(x, batch, true)?;
    let mut heads = Vec::with_capacity(logits.len());
    let mut grads = Vec::with_capacity(logits.len());
    let mut joint = 0.0;
    for ((z, t), &w) in logits.iter().zip(targets).zip(weights) {
        let (loss, mut g) = softmax_xent(z, t, None)?;
        g.data.iter_mut().for_each(|v| *v *= w);
        joint += w as f64 * loss as f64;
        heads.push(loss as f64);
        grads.push(g);
    }
    if joint.is_finite() {
        model.params_mut().into_iter().for_each(|p| p.zero_grad());
        model.backward(&grads)?;
        adam.step(&mut model.params_mut());
    }
    Ok(StepLoss { joint, heads })
}

const INFER_CHUNK: usize = 512;

/// Logits per head for every row, in inference mode.
pub fn infer_logits<M: MultiHead + ?Sized>(model: &mut M, x: &[f32], rows: usize) -> Result<Vec<Tensor<f32>>, NnError> {
    let w = model.input_width();
    if x.len() != rows * w {
        return Err(NnError::ShapeMismatch(format!("{} values for {rows} rows of width {w}", x.len())));
    }
    let classes = model.head_classes();
    let mut out: Vec<Vec<f32>> = classes.iter().map(|c| Vec::with_capacity(rows * c)).collect();
    for start in (0..rows).step_by(INFER_CHUNK) {
        let n = INFER_CHUNK.min(rows - start);
        let z = model.forward(&x[start * w..(start + n) * w], n, false)?;
        for (o, t) in out.iter_mut().zip(z) {
            o.extend_from_slice(&t.data);
        }
    }
    Ok(out.into_iter().zip(classes).map(|(d, c)| Tensor { shape: vec![rows, c], data: d }).collect())
}

/// Index of the largest entry in each row; the first one on ties.
pub fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    let c = t.shape[1];
    t.data
        .chunks_exact(c)
        .map(|r| r.iter().enumerate().fold(0, |best, (i, &v)| if v > r[best] { i } else { best }))
        .collect()
}

pub fn predict<M: MultiHead + ?Sized>(model: &mut M, x: &[f32], rows: usize) -> Result<Vec<Vec<usize>>, NnError> {
    Ok(infer_logits(model, x, rows)?.iter().map(argmax_rows).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean joint loss over the epoch's batches, weighted by batch size.
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_head_loss: Vec<f64>,
    pub val_head_loss: Vec<f64>,
    pub train_macro_f1: Vec<f64>,
    pub val_macro_f1: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub heads: Vec<String>,
    pub train_rows: usize,
    pub val_rows: usize,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Training input: features plus one target vector per head.
pub struct TrainData<'a> {
    pub x: &'a [f32],
    pub rows: usize,
    pub targets: Vec<Vec<usize>>,
    pub head_names: Vec<String>,
}

/// Seeded shuffle, then the first `validation_fraction` of rows are held out.
pub fn holdout_split(rows: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let mut perm: Vec<usize> = (0..rows).collect();
    perm.shuffle(rng);
    let n_val = ((rows as f64 * fraction).round() as usize).max(1);
    if rows < n_val + 2 {
        return Err(TrainError::Config(format!("{rows} rows are too few to hold out {n_val} and train on at least 2")));
    }
    let train = perm.split_off(n_val);
    Ok((train, perm))
}

/// Batch boundaries over `n` rows. A trailing batch of one row is merged
/// into the previous batch so batch statistics stay defined.
pub fn batch_bounds(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n).step_by(size).map(|s| (s, (s + size).min(n))).collect();
    if out.len() > 1 && out.last().is_some_and(|&(s, e)| e - s < 2) {
        let (_, e) = out.pop().unwrap();
        out.last_mut().unwrap().1 = e;
    }
    out
}

fn gather(x: &[f32], w: usize, idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        out.extend_from_slice(&x[i * w..(i + 1) * w]);
    }
    out
}

fn pick(t: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| t[i]).collect()
}

fn evaluate<M: MultiHead + ?Sized>(
    model: &mut M,
    x: &[f32],
    targets: &[Vec<usize>],
    weights: &[f32],
) -> Result<(f64, Vec<f64>, Vec<f64>), NnError> {
    let rows = targets[0].len();
    let logits = infer_logits(model, x, rows)?;
    let mut joint = 0.0;
    let mut losses = Vec::new();
    let mut f1 = Vec::new();
    for ((z, t), &w) in logits.iter().zip(targets).zip(weights) {
        let (l, _) = softmax_xent(z, t, None)?;
        joint += w as f64 * l as f64;
        losses.push(l as f64);
        f1.push(macro_f1_indices(t, &argmax_rows(z), z.shape[1]));
    }
    Ok((joint, losses, f1))
}

/// Trains with a joint loss Σ weights[h]·CE_h. All randomness comes from
/// `cfg.seed`, so a single-threaded run is bit-reproducible.
pub fn train_multitask<M: MultiHead + ?Sized>(
    model: &mut M,
    data: &TrainData,
    weights: &[f32],
    cfg: &TrainConfig,
) -> Result<History, TrainError> {
    cfg.validate()?;
    let w = model.input_width();
    let classes = model.head_classes();
    if data.x.len() != data.rows * w || data.targets.len() != classes.len() || weights.len() != classes.len() {
        return Err(TrainError::Config("training data does not match the model".into()));
    }
    for (t, &c) in data.targets.iter().zip(&classes) {
        if t.len() != data.rows {
            return Err(TrainError::Config("target count differs from row count".into()));
        }
        if let Some(&bad) = t.iter().find(|&&v| v >= c) {
            return Err(NnError::IndexOutOfRange { index: bad, classes: c }.into());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train_idx, val_idx) = holdout_split(data.rows, cfg.validation_fraction, &mut rng)?;
    let val_x = gather(data.x, w, &val_idx);
    let val_t: Vec<Vec<usize>> = data.targets.iter().map(|t| pick(t, &val_idx)).collect();
    let mut adam = Adam::new(cfg.adam());
    let mut history =
        History { heads: data.head_names.clone(), train_rows: train_idx.len(), val_rows: val_idx.len(), epochs: Vec::new() };

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, (s, e)) in batch_bounds(train_idx.len(), cfg.batch_size).into_iter().enumerate() {
            let idx = &train_idx[s..e];
            let bx = gather(data.x, w, idx);
            let bt: Vec<Vec<usize>> = data.targets.iter().map(|t| pick(t, idx)).collect();
            let step = train_step(model, &mut adam, &bx, &bt, weights)?;
            if !step.joint.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += step.joint * idx.len() as f64;
        }
        let train_sorted = {
            let mut v = train_idx.clone();
            v.sort_unstable();
            v
        };
        let tx = gather(data.x, w, &train_sorted);
        let tt: Vec<Vec<usize>> = data.targets.iter().map(|t| pick(t, &train_sorted)).collect();
        let (_, train_head_loss, train_macro_f1) = evaluate(model, &tx, &tt, weights)?;
        let (val_loss, val_head_loss, val_macro_f1) = evaluate(model, &val_x, &val_t, weights)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_loss,
            train_head_loss,
            val_head_loss,
            train_macro_f1,
            val_macro_f1,
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, val loss {:.5}, train f1 {:?}, val f1 {:?}",
            rec.train_loss,
            rec.val_loss,
            rec.train_macro_f1,
            rec.val_macro_f1
        );
        history.epochs.push(rec);
    }
    Ok(history)
}

/// Class indices of a label column, failing on the first unlabeled row.
pub fn label_targets(m: &FeatureMatrix, level: &str) -> Result<(Vec<usize>, Vec<String>), TrainError> {
    let col = m.label_column(level).ok_or_else(|| TrainError::NoLabelColumn(level.to_string()))?;
    let t = (0..m.rows())
        .map(|i| col.get(i).ok_or(TrainError::MissingLabel { row_id: m.row_ids[i], level: level.to_string() }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((t, col.vocabulary.clone()))
}
