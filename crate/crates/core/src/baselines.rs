//! Exact k-nearest-neighbor and a dense MLP, each fitted to one label level.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::matrix::{FeatureMatrix, Scaler};
use crate::nn::{Checkpoint, CheckpointError, Dense, Layer, NnError, Param, Relu, Sequential, Tensor};
use crate::train::{label_targets, predict, train_multitask, History, MultiHead, TrainConfig, TrainData, TrainError};

pub const KNN_KIND: &str = "knn";
pub const MLP_KIND: &str = "mlp";
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("k = {k} but only {rows} training rows")]
    KTooLarge { k: usize, rows: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("training matrix hash {found} does not match the checkpoint's {expected}")]
    HashMismatch { found: String, expected: String },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// SHA-256 over the matrix values and the label indices of `level`.
pub fn content_hash(m: &FeatureMatrix, level: &str) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in &m.data {
        h.update(v.to_le_bytes());
    }
    if let Some(col) = m.label_column(level) {
        for v in &col.vocabulary {
            h.update(v.as_bytes());
            h.update([0]);
        }
        for i in &col.indices {
            h.update(i.to_le_bytes());
        }
    }
    let mut s = String::with_capacity(64);
    for b in h.finalize().iter() {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub level: String,
}

#[derive(Debug, Clone)]
pub struct KnnModel {
    pub k: usize,
    pub level: String,
    pub width: usize,
    /// Row-major training features.
    pub data: Vec<f64>,
    pub targets: Vec<usize>,
    pub classes: Vec<String>,
    pub train_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct KnnMeta {
    classes: Vec<String>,
    train_hash: String,
    /// Where the training matrix was read from, as given at fit time.
    train_ref: String,
}

pub fn knn_fit(m: &FeatureMatrix, level: &str, k: usize) -> Result<KnnModel, BaselineError> {
    let (targets, classes) = label_targets(m, level)?;
    let mut model = KnnModel::from_raw(m.data.clone(), m.cols(), targets, classes, k)?;
    model.level = level.to_string();
    model.train_hash = content_hash(m, level);
    Ok(model)
}

impl KnnModel {
    pub fn from_raw(data: Vec<f64>, width: usize, targets: Vec<usize>, classes: Vec<String>, k: usize) -> Result<Self, BaselineError> {
        if k == 0 {
            return Err(BaselineError::ZeroK);
        }
        if data.len() != targets.len() * width {
            return Err(BaselineError::Shape(format!("{} values for {} rows of width {width}", data.len(), targets.len())));
        }
        if k > targets.len() {
            return Err(BaselineError::KTooLarge { k, rows: targets.len() });
        }
        Ok(KnnModel { k, level: String::new(), width, data, targets, classes, train_hash: String::new() })
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    /// Majority vote among the k nearest rows (Euclidean). Equal distances
    /// are ordered by training row; vote ties go to the smaller mean
    /// distance, then the lower class index.
    pub fn predict_row(&self, q: &[f64]) -> usize {
        let mut d: Vec<(f64, usize)> = self
            .data
            .chunks_exact(self.width)
            .enumerate()
            .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < d.len() {
            d.select_nth_unstable_by(self.k - 1, cmp);
            d.truncate(self.k);
        }
        let n = self.classes.len().max(self.targets.iter().max().map_or(0, |m| m + 1));
        let mut votes = vec![0usize; n];
        let mut dist = vec![0.0f64; n];
        for &(sq, i) in &d {
            votes[self.targets[i]] += 1;
            dist[self.targets[i]] += sq.sqrt();
        }
        (0..n)
            .filter(|&c| votes[c] > 0)
            .min_by(|&a, &b| {
                votes[b]
                    .cmp(&votes[a])
                    .then((dist[a] / votes[a] as f64).total_cmp(&(dist[b] / votes[b] as f64)))
                    .then(a.cmp(&b))
            })
            .unwrap()
    }

    /// Queries run in parallel; results do not depend on the thread count.
    pub fn predict(&self, x: &[f64], rows: usize) -> Result<Vec<usize>, BaselineError> {
        if x.len() != rows * self.width {
            return Err(BaselineError::Shape(format!("query has {} values for {rows} rows of width {}", x.len(), self.width)));
        }
        Ok(x.par_chunks(self.width.max(1)).map(|q| self.predict_row(q)).collect())
    }

    pub fn predict_matrix(&self, m: &FeatureMatrix) -> Result<Vec<usize>, BaselineError> {
        self.predict(&m.data, m.rows())
    }

    /// The checkpoint stores no parameters, only the training reference.
    pub fn to_checkpoint(&self, train_ref: &str, seed: u64) -> Checkpoint {
        let cfg = KnnConfig { k: self.k, level: self.level.clone() };
        let meta = KnnMeta { classes: self.classes.clone(), train_hash: self.train_hash.clone(), train_ref: train_ref.to_string() };
        Checkpoint::from_params(
            KNN_KIND,
            seed,
            serde_json::to_value(cfg).expect("config serializes"),
            serde_json::to_value(meta).expect("meta serializes"),
            &[],
        )
    }

    pub fn checkpoint_train_ref(ck: &Checkpoint) -> Result<String, BaselineError> {
        ck.expect_kind(KNN_KIND)?;
        let meta: KnnMeta = serde_json::from_value(ck.header.meta.clone()).map_err(CheckpointError::Header)?;
        Ok(meta.train_ref)
    }

    /// Rebuilds from a checkpoint and the training matrix it refers to.
    pub fn from_checkpoint(ck: &Checkpoint, train: &FeatureMatrix) -> Result<KnnModel, BaselineError> {
        ck.expect_kind(KNN_KIND)?;
        let cfg: KnnConfig = serde_json::from_value(ck.header.config.clone()).map_err(CheckpointError::Header)?;
        let meta: KnnMeta = serde_json::from_value(ck.header.meta.clone()).map_err(CheckpointError::Header)?;
        let found = content_hash(train, &cfg.level);
        if found != meta.train_hash {
            return Err(BaselineError::HashMismatch { found, expected: meta.train_hash });
        }
        knn_fit(train, &cfg.level, cfg.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub level: String,
    pub input_width: usize,
    pub n_classes: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: vec![128, 64], level: "mid".into(), input_width: 121, n_classes: 2 }
    }
}

/// Dense layers with ReLU between them; softmax is applied by the loss.
pub struct MlpNet {
    pub config: MlpConfig,
    stack: Sequential<f32>,
}

pub fn build_mlp(cfg: &MlpConfig, seed: u64) -> Result<MlpNet, BaselineError> {
    if cfg.input_width == 0 || cfg.n_classes < 2 || cfg.hidden.contains(&0) {
        return Err(BaselineError::Shape(format!(
            "layer widths must be positive and classes at least 2 (input {}, hidden {:?}, classes {})",
            cfg.input_width, cfg.hidden, cfg.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Box<dyn Layer<f32> + Send>> = Vec::new();
    let mut w = cfg.input_width;
    for (i, &h) in cfg.hidden.iter().enumerate() {
        let mut d = Dense::new(w, h, &mut rng);
        d.params_mut().into_iter().for_each(|p| p.rename(&format!("dense{i}")));
        layers.push(Box::new(d));
        layers.push(Box::new(Relu::new()));
        w = h;
    }
    let mut out = Dense::new(w, cfg.n_classes, &mut rng);
    out.params_mut().into_iter().for_each(|p| p.rename("out"));
    layers.push(Box::new(out));
    Ok(MlpNet { config: cfg.clone(), stack: Sequential { layers } })
}

impl MultiHead for MlpNet {
    fn input_width(&self) -> usize {
        self.config.input_width
    }

    fn head_classes(&self) -> Vec<usize> {
        vec![self.config.n_classes]
    }

    fn forward(&mut self, x: &[f32], batch: usize, train: bool) -> Result<Vec<Tensor<f32>>, NnError> {
        let t = Tensor::new(vec![batch, self.config.input_width], x.to_vec())?;
        Ok(vec![self.stack.forward(&t, train)?])
    }

    fn backward(&mut self, dlogits: &[Tensor<f32>]) -> Result<(), NnError> {
        self.stack.backward(&dlogits[0]).map(|_| ())
    }

    fn params(&self) -> Vec<&Param<f32>> {
        self.stack.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        self.stack.params_mut()
    }
}

pub struct MlpModel {
    pub seed: u64,
    pub net: MlpNet,
    pub classes: Vec<String>,
    pub column_names: Vec<String>,
    pub scaler: Option<Scaler>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MlpMeta {
    classes: Vec<String>,
    column_names: Vec<String>,
    scaler: Option<Scaler>,
}

/// Trains on one label level of a standardized matrix.
pub fn mlp_fit(m: &FeatureMatrix, cfg: &MlpConfig, train: &TrainConfig) -> Result<(MlpModel, History), BaselineError> {
    let (targets, classes) = label_targets(m, &cfg.level)?;
    let cfg = MlpConfig { input_width: m.cols(), n_classes: classes.len(), ..cfg.clone() };
    let mut net = build_mlp(&cfg, train.seed)?;
    let x = m.to_f32();
    let data = TrainData { x: &x, rows: m.rows(), targets: vec![targets], head_names: vec![cfg.level.clone()] };
    let history = train_multitask(&mut net, &data, &[1.0], train)?;
    Ok((MlpModel { seed: train.seed, net, classes, column_names: m.column_names.clone(), scaler: m.scaler.clone() }, history))
}

impl MlpModel {
    pub fn predict(&mut self, m: &FeatureMatrix) -> Result<Vec<usize>, BaselineError> {
        if m.cols() != self.net.config.input_width {
            return Err(BaselineError::Shape(format!("matrix has {} columns, model expects {}", m.cols(), self.net.config.input_width)));
        }
        Ok(predict(&mut self.net, &m.to_f32(), m.rows())?.remove(0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = MlpMeta { classes: self.classes.clone(), column_names: self.column_names.clone(), scaler: self.scaler.clone() };
        Checkpoint::from_params(
            MLP_KIND,
            self.seed,
            serde_json::to_value(&self.net.config).expect("config serializes"),
            serde_json::to_value(meta).expect("meta serializes"),
            &self.net.params(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<MlpModel, BaselineError> {
        ck.expect_kind(MLP_KIND)?;
        let cfg: MlpConfig = serde_json::from_value(ck.header.config.clone()).map_err(CheckpointError::Header)?;
        let meta: MlpMeta = serde_json::from_value(ck.header.meta.clone()).map_err(CheckpointError::Header)?;
        let mut net = build_mlp(&cfg, ck.header.seed)?;
        ck.load_into(&mut net.params_mut())?;
        Ok(MlpModel { seed: ck.header.seed, net, classes: meta.classes, column_names: meta.column_names, scaler: meta.scaler })
    }
}
