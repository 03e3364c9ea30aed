//! Multi-task hierarchical model: a shared 1-D convolutional encoder, a
//! mid-level head, and a top-level head that also sees the mid-level output.
//!
//! ```text
//! x [B,121,1]
//!  -> BN -> conv(3,2,1) 16 -> ReLU                          61x16
//!  -> residual block
//!       part1  BN -> ReLU -> conv(3,1,1) 16                  61x16
//!       part2  BN -> ReLU -> conv(3,2,2) 32                  32x32
//!       part3  BN -> ReLU -> conv(3,1,1) 32                  32x32
//!       + shortcut conv(1,2,1) 32 on the block input         32x32
//!  -> mid branch  BN -> ReLU -> conv(3,2,1) 64 -> flatten    16x64 = 1024
//!  -> top branch  BN -> ReLU -> conv(3,2,1) 64 -> flatten    16x64 = 1024
//! mid logits = dense(1024 -> n_mid)
//! top logits = dense(1024 + n_mid -> n_top) on [top features | mid logits]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{FeatureMatrix, Scaler};
use crate::nn::{
    conv_out_len, softmax, softmax_backward, BatchNorm, Checkpoint, CheckpointError, Conv1d, Dense, Layer, NnError, Param,
    Relu, Scalar, Sequential, Tensor,
};
use crate::train::{label_targets, predict, train_multitask, History, MultiHead, TrainConfig, TrainData, TrainError};

pub const CHECKPOINT_KIND: &str = "mthl";

#[derive(Debug, Error)]
pub enum MthlError {
    #[error("shape trace violation at {stage}: expected {expected}, got {actual}")]
    ShapeTraceViolation { stage: String, expected: String, actual: String },
    #[error("bad model config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub out: usize,
}

const fn conv(k: usize, s: usize, p: usize, out: usize) -> ConvSpec {
    ConvSpec { k, s, p, out }
}

/// What the top head receives from the mid head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierInput {
    Logits,
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeStage {
    pub stage: String,
    pub length: usize,
    pub channels: usize,
}

impl ShapeStage {
    fn new(stage: &str, length: usize, channels: usize) -> Self {
        ShapeStage { stage: stage.to_string(), length, channels }
    }
}

/// The trace of the default configuration.
pub fn reference_trace() -> Vec<ShapeStage> {
    vec![
        ShapeStage::new("input", 121, 1),
        ShapeStage::new("input_block", 61, 16),
        ShapeStage::new("residual0.part1", 61, 16),
        ShapeStage::new("residual0.part2", 32, 32),
        ShapeStage::new("residual0.part3", 32, 32),
        ShapeStage::new("residual0.shortcut", 32, 32),
        ShapeStage::new("mid_branch", 16, 64),
        ShapeStage::new("top_branch", 16, 64),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MthlConfig {
    pub input_width: usize,
    pub input_block: ConvSpec,
    pub residual_blocks: usize,
    pub part1: ConvSpec,
    pub part2: ConvSpec,
    pub part3: ConvSpec,
    /// None means an identity shortcut, which needs matching shapes.
    pub shortcut: Option<ConvSpec>,
    pub branch: ConvSpec,
    pub n_mid: usize,
    pub n_top: usize,
    pub lambda_top: f64,
    pub hier_input: HierInput,
    /// Checked at build time when set.
    pub expected_trace: Option<Vec<ShapeStage>>,
}

impl Default for MthlConfig {
    fn default() -> Self {
        MthlConfig {
            input_width: 121,
            input_block: conv(3, 2, 1, 16),
            residual_blocks: 1,
            part1: conv(3, 1, 1, 16),
            part2: conv(3, 2, 2, 32),
            part3: conv(3, 1, 1, 32),
            shortcut: Some(conv(1, 2, 1, 32)),
            branch: conv(3, 2, 1, 64),
            n_mid: 2,
            n_top: 2,
            lambda_top: 1.0,
            hier_input: HierInput::Logits,
            expected_trace: Some(reference_trace()),
        }
    }
}

fn shape_str(l: usize, c: usize) -> String {
    format!("{l}x{c}")
}

fn step(stage: &str, len: usize, spec: &ConvSpec) -> Result<usize, MthlError> {
    conv_out_len(len, spec.k, spec.s, spec.p).filter(|&l| l > 0).ok_or_else(|| MthlError::ShapeTraceViolation {
        stage: stage.to_string(),
        expected: "a kernel that fits its input".into(),
        actual: format!("k={} on length {len} with p={}", spec.k, spec.p),
    })
}

impl MthlConfig {
    /// Shapes implied by the config, without building any layer.
    pub fn planned_trace(&self) -> Result<Vec<ShapeStage>, MthlError> {
        let mut t = vec![ShapeStage::new("input", self.input_width, 1)];
        let mut len = step("input_block", self.input_width, &self.input_block)?;
        let mut ch = self.input_block.out;
        t.push(ShapeStage::new("input_block", len, ch));
        for b in 0..self.residual_blocks {
            let name = |p: &str| format!("residual{b}.{p}");
            let l1 = step(&name("part1"), len, &self.part1)?;
            t.push(ShapeStage::new(&name("part1"), l1, self.part1.out));
            let l2 = step(&name("part2"), l1, &self.part2)?;
            t.push(ShapeStage::new(&name("part2"), l2, self.part2.out));
            let l3 = step(&name("part3"), l2, &self.part3)?;
            t.push(ShapeStage::new(&name("part3"), l3, self.part3.out));
            let (ls, cs) = match &self.shortcut {
                Some(s) => (step(&name("shortcut"), len, s)?, s.out),
                None => (len, ch),
            };
            t.push(ShapeStage::new(&name("shortcut"), ls, cs));
            if (ls, cs) != (l3, self.part3.out) {
                return Err(MthlError::ShapeTraceViolation {
                    stage: name("sum"),
                    expected: shape_str(l3, self.part3.out),
                    actual: shape_str(ls, cs),
                });
            }
            (len, ch) = (l3, self.part3.out);
        }
        let lb = step("branch", len, &self.branch)?;
        t.push(ShapeStage::new("mid_branch", lb, self.branch.out));
        t.push(ShapeStage::new("top_branch", lb, self.branch.out));
        Ok(t)
    }

    pub fn flatten_width(&self) -> Result<usize, MthlError> {
        let t = self.planned_trace()?;
        let b = t.last().unwrap();
        Ok(b.length * b.channels)
    }

    fn check(&self) -> Result<(), MthlError> {
        if self.n_mid < 2 || self.n_top < 2 {
            return Err(MthlError::Config(format!("need at least 2 classes per head, got mid {} top {}", self.n_mid, self.n_top)));
        }
        if self.residual_blocks == 0 {
            return Err(MthlError::Config("residual_blocks must be at least 1".into()));
        }
        if !(self.lambda_top >= 0.0 && self.lambda_top.is_finite()) {
            return Err(MthlError::Config("lambda_top must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

fn compare_trace(expected: &[ShapeStage], actual: &[ShapeStage]) -> Result<(), MthlError> {
    for i in 0..expected.len().max(actual.len()) {
        let e = expected.get(i);
        let a = actual.get(i);
        if e != a {
            let show = |s: Option<&ShapeStage>| s.map_or("nothing".to_string(), |s| format!("{} {}", s.stage, shape_str(s.length, s.channels)));
            return Err(MthlError::ShapeTraceViolation {
                stage: e.or(a).map(|s| s.stage.clone()).unwrap_or_default(),
                expected: show(e),
                actual: show(a),
            });
        }
    }
    Ok(())
}

fn named<T: Scalar, L: Layer<T>>(mut layer: L, prefix: &str) -> L {
    for p in layer.params_mut() {
        p.rename(prefix);
    }
    layer
}

/// BN -> ReLU -> conv, with parameter names under `prefix`.
fn pre_act<T: Scalar>(prefix: &str, cin: usize, spec: &ConvSpec, rng: &mut ChaCha8Rng) -> Sequential<T> {
    Sequential {
        layers: vec![
            Box::new(named(BatchNorm::new(cin), &format!("{prefix}.bn"))),
            Box::new(Relu::new()),
            Box::new(named(Conv1d::new(spec.k, spec.s, spec.p, cin, spec.out, rng), &format!("{prefix}.conv"))),
        ],
    }
}

struct ResBlock<T: Scalar> {
    parts: [Sequential<T>; 3],
    shortcut: Option<Conv1d<T>>,
}

impl<T: Scalar> ResBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool, trace: &mut Vec<ShapeStage>, b: usize) -> Result<Tensor<T>, NnError> {
        let mut h = x.clone();
        for (i, part) in self.parts.iter_mut().enumerate() {
            h = part.forward(&h, train)?;
            trace.push(ShapeStage::new(&format!("residual{b}.part{}", i + 1), h.shape[1], h.shape[2]));
        }
        let s = match &mut self.shortcut {
            Some(c) => c.forward(x, train)?,
            None => x.clone(),
        };
        trace.push(ShapeStage::new(&format!("residual{b}.shortcut"), s.shape[1], s.shape[2]));
        if s.shape != h.shape {
            return Err(NnError::ShapeMismatch(format!("residual sum {:?} + {:?}", h.shape, s.shape)));
        }
        h.data.iter_mut().zip(&s.data).for_each(|(a, &b)| *a += b);
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut g = dy.clone();
        for part in self.parts.iter_mut().rev() {
            g = part.backward(&g)?;
        }
        let gs = match &mut self.shortcut {
            Some(c) => c.backward(dy)?,
            None => dy.clone(),
        };
        g.data.iter_mut().zip(&gs.data).for_each(|(a, &b)| *a += b);
        Ok(g)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.parts.iter().flat_map(|p| p.params()).collect();
        if let Some(c) = &self.shortcut {
            v.extend(c.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.parts.iter_mut().flat_map(|p| p.params_mut()).collect();
        if let Some(c) = &mut self.shortcut {
            v.extend(c.params_mut());
        }
        v
    }
}

/// The layer stack. As a [`Layer`] it maps `[B, width, 1]` to
/// `[B, n_mid + n_top]`: mid logits followed by top logits.
pub struct MthlNet<T: Scalar> {
    pub config: MthlConfig,
    input: Sequential<T>,
    blocks: Vec<ResBlock<T>>,
    mid_branch: Sequential<T>,
    top_branch: Sequential<T>,
    pub mid_head: Dense<T>,
    pub top_head: Dense<T>,
    branch_shape: [usize; 2],
    trace: Vec<ShapeStage>,
    mid_probs: Option<Tensor<T>>,
}

/// Builds the network and verifies its shape trace, both from the shape
/// algebra and from a probe forward pass.
pub fn build_model<T: Scalar>(cfg: &MthlConfig, seed: u64) -> Result<MthlNet<T>, MthlError> {
    cfg.check()?;
    let planned = cfg.planned_trace()?;
    if let Some(exp) = &cfg.expected_trace {
        compare_trace(exp, &planned)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ib = &cfg.input_block;
    let input = Sequential {
        layers: vec![
            Box::new(named(BatchNorm::new(1), "input.bn")),
            Box::new(named(Conv1d::new(ib.k, ib.s, ib.p, 1, ib.out, &mut rng), "input.conv")),
            Box::new(Relu::new()),
        ],
    };
    let mut ch = ib.out;
    let mut blocks = Vec::new();
    for b in 0..cfg.residual_blocks {
        let pre = format!("residual{b}");
        let p1 = pre_act(&format!("{pre}.part1"), ch, &cfg.part1, &mut rng);
        let p2 = pre_act(&format!("{pre}.part2"), cfg.part1.out, &cfg.part2, &mut rng);
        let p3 = pre_act(&format!("{pre}.part3"), cfg.part2.out, &cfg.part3, &mut rng);
        let shortcut = cfg
            .shortcut
            .map(|s| named(Conv1d::new(s.k, s.s, s.p, ch, s.out, &mut rng), &format!("{pre}.shortcut")));
        blocks.push(ResBlock { parts: [p1, p2, p3], shortcut });
        ch = cfg.part3.out;
    }
    let mid_branch = pre_act("mid_branch", ch, &cfg.branch, &mut rng);
    let top_branch = pre_act("top_branch", ch, &cfg.branch, &mut rng);
    let last = planned.last().unwrap();
    let flat = last.length * last.channels;
    let mid_head = named(Dense::new(flat, cfg.n_mid, &mut rng), "mid_head");
    let top_head = named(Dense::new(flat + cfg.n_mid, cfg.n_top, &mut rng), "top_head");
    let mut net = MthlNet {
        config: cfg.clone(),
        input,
        blocks,
        mid_branch,
        top_branch,
        mid_head,
        top_head,
        branch_shape: [last.length, last.channels],
        trace: Vec::new(),
        mid_probs: None,
    };
    net.forward_heads(&Tensor::zeros(vec![1, cfg.input_width, 1]), false)?;
    compare_trace(&planned, &net.trace)?;
    Ok(net)
}

fn concat_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, wa) = (a.shape[0], a.shape[1]);
    let wb = b.shape[1];
    let mut data = Vec::with_capacity(n * (wa + wb));
    for (ra, rb) in a.data.chunks_exact(wa).zip(b.data.chunks_exact(wb)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Tensor { shape: vec![n, wa + wb], data }
}

fn split_rows<T: Scalar>(t: &Tensor<T>, wa: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, w) = (t.shape[0], t.shape[1]);
    let mut a = Vec::with_capacity(n * wa);
    let mut b = Vec::with_capacity(n * (w - wa));
    for r in t.data.chunks_exact(w) {
        a.extend_from_slice(&r[..wa]);
        b.extend_from_slice(&r[wa..]);
    }
    (Tensor { shape: vec![n, wa], data: a }, Tensor { shape: vec![n, w - wa], data: b })
}

impl<T: Scalar> MthlNet<T> {
    /// Shapes seen by the last forward pass.
    pub fn trace(&self) -> &[ShapeStage] {
        &self.trace
    }

    pub fn flatten_width(&self) -> usize {
        self.branch_shape[0] * self.branch_shape[1]
    }

    /// Returns (mid logits, top logits).
    pub fn forward_heads(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, Tensor<T>), NnError> {
        let (b, l, c) = x.dims3()?;
        if l != self.config.input_width || c != 1 {
            return Err(NnError::ShapeMismatch(format!("model expects [batch, {}, 1], got {:?}", self.config.input_width, x.shape)));
        }
        self.trace.clear();
        self.trace.push(ShapeStage::new("input", l, c));
        let mut h = self.input.forward(x, train)?;
        self.trace.push(ShapeStage::new("input_block", h.shape[1], h.shape[2]));
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            h = blk.forward(&h, train, &mut self.trace, i)?;
        }
        let mb = self.mid_branch.forward(&h, train)?;
        self.trace.push(ShapeStage::new("mid_branch", mb.shape[1], mb.shape[2]));
        let tb = self.top_branch.forward(&h, train)?;
        self.trace.push(ShapeStage::new("top_branch", tb.shape[1], tb.shape[2]));
        let flat = mb.shape[1] * mb.shape[2];
        let mid = self.mid_head.forward(&mb.reshape(vec![b, flat])?, train)?;
        let hier = match self.config.hier_input {
            HierInput::Logits => mid.clone(),
            HierInput::Probabilities => {
                let p = softmax(&mid)?;
                self.mid_probs = Some(p.clone());
                p
            }
        };
        let top = self.top_head.forward(&concat_rows(&tb.reshape(vec![b, flat])?, &hier), train)?;
        Ok((mid, top))
    }

    pub fn backward_heads(&mut self, dmid: &Tensor<T>, dtop: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let b = dmid.shape[0];
        let flat = self.flatten_width();
        let dcat = self.top_head.backward(dtop)?;
        let (dtop_flat, mut dhier) = split_rows(&dcat, flat);
        if self.config.hier_input == HierInput::Probabilities {
            let p = self.mid_probs.as_ref().ok_or(NnError::NoCache("mthl"))?;
            dhier = softmax_backward(p, &dhier)?;
        }
        let mut dmid_total = dmid.clone();
        dmid_total.data.iter_mut().zip(&dhier.data).for_each(|(a, &g)| *a += g);
        let dmid_flat = self.mid_head.backward(&dmid_total)?;
        let [bl, bc] = self.branch_shape;
        let mut dh = self.mid_branch.backward(&dmid_flat.reshape(vec![b, bl, bc])?)?;
        let dt = self.top_branch.backward(&dtop_flat.reshape(vec![b, bl, bc])?)?;
        dh.data.iter_mut().zip(&dt.data).for_each(|(a, &g)| *a += g);
        for blk in self.blocks.iter_mut().rev() {
            dh = blk.backward(&dh)?;
        }
        self.input.backward(&dh)
    }

    /// Parameters of the top head only.
    pub fn top_head_params(&self) -> Vec<&Param<T>> {
        self.top_head.params()
    }
}

impl<T: Scalar> Layer<T> for MthlNet<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let (mid, top) = self.forward_heads(x, train)?;
        Ok(concat_rows(&mid, &top))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (dmid, dtop) = split_rows(dy, self.config.n_mid);
        self.backward_heads(&dmid, &dtop)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.input.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.mid_branch.params());
        v.extend(self.top_branch.params());
        v.extend(self.mid_head.params());
        v.extend(self.top_head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.input.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.mid_branch.params_mut());
        v.extend(self.top_branch.params_mut());
        v.extend(self.mid_head.params_mut());
        v.extend(self.top_head.params_mut());
        v
    }
}

impl MultiHead for MthlNet<f32> {
    fn input_width(&self) -> usize {
        self.config.input_width
    }

    fn head_classes(&self) -> Vec<usize> {
        vec![self.config.n_mid, self.config.n_top]
    }

    fn forward(&mut self, x: &[f32], batch: usize, train: bool) -> Result<Vec<Tensor<f32>>, NnError> {
        let t = Tensor::new(vec![batch, self.config.input_width, 1], x.to_vec())?;
        let (m, t) = self.forward_heads(&t, train)?;
        Ok(vec![m, t])
    }

    fn backward(&mut self, dlogits: &[Tensor<f32>]) -> Result<(), NnError> {
        self.backward_heads(&dlogits[0], &dlogits[1]).map(|_| ())
    }

    fn params(&self) -> Vec<&Param<f32>> {
        Layer::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        Layer::params_mut(self)
    }
}

/// A trained network with the vocabularies and scaler needed to label new rows.
pub struct MthlModel {
    pub seed: u64,
    pub net: MthlNet<f32>,
    pub mid_classes: Vec<String>,
    pub top_classes: Vec<String>,
    pub column_names: Vec<String>,
    pub scaler: Option<Scaler>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MthlMeta {
    mid_classes: Vec<String>,
    top_classes: Vec<String>,
    column_names: Vec<String>,
    scaler: Option<Scaler>,
}

/// Trains on a standardized matrix carrying `mid` and `top` labels. Class
/// counts come from the matrix vocabularies.
pub fn fit(m: &FeatureMatrix, cfg: &MthlConfig, train: &TrainConfig) -> Result<(MthlModel, History), MthlError> {
    let (mid_t, mid_classes) = label_targets(m, "mid")?;
    let (top_t, top_classes) = label_targets(m, "top")?;
    let cfg = MthlConfig { n_mid: mid_classes.len(), n_top: top_classes.len(), input_width: m.cols(), ..cfg.clone() };
    let mut net = build_model::<f32>(&cfg, train.seed)?;
    let x = m.to_f32();
    let data = TrainData { x: &x, rows: m.rows(), targets: vec![mid_t, top_t], head_names: vec!["mid".into(), "top".into()] };
    let history = train_multitask(&mut net, &data, &[1.0, cfg.lambda_top as f32], train)?;
    let model = MthlModel {
        seed: train.seed,
        net,
        mid_classes,
        top_classes,
        column_names: m.column_names.clone(),
        scaler: m.scaler.clone(),
    };
    Ok((model, history))
}

impl MthlModel {
    /// (mid, top) class indices for each row, in inference mode.
    pub fn predict(&mut self, m: &FeatureMatrix) -> Result<(Vec<usize>, Vec<usize>), MthlError> {
        if m.cols() != self.net.config.input_width {
            return Err(NnError::ShapeMismatch(format!("matrix has {} columns, model expects {}", m.cols(), self.net.config.input_width)).into());
        }
        let mut p = predict(&mut self.net, &m.to_f32(), m.rows())?;
        let top = p.pop().unwrap();
        let mid = p.pop().unwrap();
        Ok((mid, top))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = MthlMeta {
            mid_classes: self.mid_classes.clone(),
            top_classes: self.top_classes.clone(),
            column_names: self.column_names.clone(),
            scaler: self.scaler.clone(),
        };
        Checkpoint::from_params(
            CHECKPOINT_KIND,
            self.seed,
            serde_json::to_value(&self.net.config).expect("config serializes"),
            serde_json::to_value(meta).expect("meta serializes"),
            &Layer::params(&self.net),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<MthlModel, MthlError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let cfg: MthlConfig = serde_json::from_value(ck.header.config.clone()).map_err(CheckpointError::Header)?;
        let meta: MthlMeta = serde_json::from_value(ck.header.meta.clone()).map_err(CheckpointError::Header)?;
        let mut net = build_model::<f32>(&cfg, ck.header.seed)?;
        ck.load_into(&mut Layer::params_mut(&mut net))?;
        Ok(MthlModel {
            seed: ck.header.seed,
            net,
            mid_classes: meta.mid_classes,
            top_classes: meta.top_classes,
            column_names: meta.column_names,
            scaler: meta.scaler,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, softmax_xent, Adam, AdamConfig};
    use crate::train::train_step;
    use rand::Rng;

    fn cfg(n_mid: usize, n_top: usize) -> MthlConfig {
        MthlConfig { n_mid, n_top, ..Default::default() }
    }

    fn small_cfg(hier: HierInput) -> MthlConfig {
        MthlConfig {
            input_width: 13,
            input_block: conv(3, 2, 1, 2),
            part1: conv(3, 1, 1, 2),
            part2: conv(3, 2, 2, 3),
            part3: conv(3, 1, 1, 3),
            shortcut: Some(conv(1, 2, 1, 3)),
            branch: conv(3, 2, 1, 2),
            n_mid: 3,
            n_top: 2,
            hier_input: hier,
            expected_trace: None,
            ..Default::default()
        }
    }

    fn batch(rows: usize, width: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * width).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn default_trace_matches_reference() {
        let net = build_model::<f32>(&cfg(4, 2), 0).unwrap();
        assert_eq!(net.trace(), reference_trace().as_slice());
        assert_eq!(net.flatten_width(), 1024);
        assert_eq!(net.mid_head.weight.shape, vec![1024, 4]);
        assert_eq!(net.top_head.weight.shape, vec![1024 + 4, 2]);
    }

    #[test]
    fn deviation_is_reported() {
        let bad = MthlConfig { part2: conv(3, 2, 1, 32), ..cfg(4, 2) };
        match build_model::<f32>(&bad, 0) {
            Err(MthlError::ShapeTraceViolation { .. }) => {}
            other => panic!("expected a trace violation, got {:?}", other.err()),
        }
        let few = cfg(1, 2);
        assert!(matches!(build_model::<f32>(&few, 0), Err(MthlError::Config(_))));
    }

    #[test]
    fn param_names_unique() {
        let net = build_model::<f32>(&cfg(3, 2), 0).unwrap();
        let names: Vec<&str> = Layer::params(&net).iter().map(|p| p.name.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"residual0.shortcut.w"));
    }

    #[test]
    fn forward_shapes_and_normalization() {
        let mut net = build_model::<f32>(&cfg(5, 3), 1).unwrap();
        let x = batch(200, 121, 1);
        let z = MultiHead::forward(&mut net, &x, 200, true).unwrap();
        assert_eq!(z[0].shape, vec![200, 5]);
        assert_eq!(z[1].shape, vec![200, 3]);
        let p = softmax(&z[0].cast::<f64>()).unwrap();
        for r in p.data.chunks(5) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hierarchical_connection_is_live() {
        let mut net = build_model::<f32>(&cfg(3, 2), 2).unwrap();
        let x = Tensor::new(vec![4, 121, 1], batch(4, 121, 9)).unwrap();
        let (_, before) = net.forward_heads(&x, false).unwrap();
        net.mid_head.weight.value.iter_mut().for_each(|v| *v = 0.0);
        net.mid_head.bias.value.iter_mut().for_each(|v| *v = 0.0);
        let (_, after) = net.forward_heads(&x, false).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn whole_model_gradients() {
        for hier in [HierInput::Logits, HierInput::Probabilities] {
            for seed in 0..5 {
                let mut net = build_model::<f64>(&small_cfg(hier), seed).unwrap();
                let x = Tensor::new(vec![3, 13, 1], batch(3, 13, seed + 50).iter().map(|&v| v as f64).collect()).unwrap();
                let r = grad_check(&mut net, &x, 1e-4, true, seed).unwrap();
                assert!(r.max_rel_error < 1e-4, "{hier:?} {r:?}");
            }
        }
    }

    fn one_step(lambda: f32) -> (Vec<Vec<f32>>, Vec<Vec<f32>>, MthlNet<f32>) {
        let mut net = build_model::<f32>(&cfg(3, 2), 4).unwrap();
        let before: Vec<Vec<f32>> = Layer::params(&net).iter().map(|p| p.value.clone()).collect();
        let mut adam = Adam::new(AdamConfig::default());
        let x = batch(8, 121, 3);
        let t = vec![vec![0, 1, 2, 0, 1, 2, 0, 1], vec![0, 0, 1, 0, 0, 1, 0, 0]];
        train_step(&mut net, &mut adam, &x, &t, &[1.0, lambda]).unwrap();
        let grads: Vec<Vec<f32>> = Layer::params(&net).iter().map(|p| p.grad.clone()).collect();
        let after: Vec<Vec<f32>> = Layer::params(&net).iter().map(|p| p.value.clone()).collect();
        let delta = before.iter().zip(&after).map(|(b, a)| b.iter().zip(a).map(|(x, y)| y - x).collect()).collect();
        (delta, grads, net)
    }

    #[test]
    fn every_trainable_param_moves() {
        let (delta, _, net) = one_step(1.0);
        for (p, d) in Layer::params(&net).iter().zip(&delta) {
            if p.trainable {
                assert!(d.iter().any(|&v| v != 0.0), "{} did not move", p.name);
            }
        }
    }

    #[test]
    fn zero_lambda_zeroes_top_head_gradient() {
        let (_, grads, net) = one_step(0.0);
        for (p, g) in Layer::params(&net).iter().zip(&grads) {
            if (p.name.starts_with("top_head") || p.name.starts_with("top_branch")) && p.trainable {
                assert!(g.iter().all(|&v| v == 0.0), "{} has gradient", p.name);
            }
        }
    }

    #[test]
    fn joint_loss_decomposes() {
        let mut net = build_model::<f32>(&cfg(3, 2), 5).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let x = batch(6, 121, 8);
        let t = vec![vec![0, 1, 2, 2, 1, 0], vec![1, 0, 1, 0, 1, 0]];
        let z = MultiHead::forward(&mut net, &x, 6, true).unwrap();
        let mid = softmax_xent(&z[0], &t[0], None).unwrap().0 as f64;
        let top = softmax_xent(&z[1], &t[1], None).unwrap().0 as f64;
        let mut net = build_model::<f32>(&cfg(3, 2), 5).unwrap();
        let s = train_step(&mut net, &mut adam, &x, &t, &[1.0, 0.5]).unwrap();
        assert!((s.heads[0] - mid).abs() < 1e-6 && (s.heads[1] - top).abs() < 1e-6);
        assert!((s.joint - (mid + 0.5 * top)).abs() < 1e-6);
    }

    #[test]
    fn inference_is_row_wise() {
        let mut net = build_model::<f32>(&cfg(3, 2), 6).unwrap();
        // one training step so running stats are not at their initial values
        let mut adam = Adam::new(AdamConfig::default());
        train_step(&mut net, &mut adam, &batch(10, 121, 1), &[vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0], vec![0; 10]], &[1.0, 1.0]).unwrap();
        let row = batch(1, 121, 2);
        let five: Vec<f32> = row.iter().cycle().take(5 * 121).copied().collect();
        let p = predict(&mut net, &five, 5).unwrap();
        assert!(p[0].iter().all(|&v| v == p[0][0]));
        let x = batch(700, 121, 3);
        let whole = crate::train::infer_logits(&mut net, &x, 700).unwrap();
        let mut parts = crate::train::infer_logits(&mut net, &x[..300 * 121], 300).unwrap();
        let rest = crate::train::infer_logits(&mut net, &x[300 * 121..], 400).unwrap();
        for (a, b) in parts.iter_mut().zip(rest) {
            a.data.extend(b.data);
        }
        assert_eq!(whole[0].data, parts[0].data);
        assert_eq!(whole[1].data, parts[1].data);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = build_model::<f32>(&cfg(3, 2), 7).unwrap();
        let model = MthlModel {
            seed: 7,
            net,
            mid_classes: vec!["a".into(), "b".into(), "c".into()],
            top_classes: vec!["x".into(), "y".into()],
            column_names: vec![],
            scaler: None,
        };
        let bytes = model.to_checkpoint().to_bytes();
        let back = MthlModel::from_checkpoint(&Checkpoint::read_from(&bytes[..]).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
        assert_eq!(back.mid_classes, model.mid_classes);
    }
}
