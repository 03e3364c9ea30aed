//! Subcommand bodies. Each takes fully resolved options and writes its
//! outputs under the given paths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use netml_core::baselines::{knn_fit, mlp_fit, KnnModel, MlpConfig, MlpModel, KNN_KIND, MLP_KIND};
use netml_core::dataset::{class_stats, format_stats, prepare, DatasetError, LabelManifest, Level, PrepareConfig};
use netml_core::eval::{scenario_report, EvalReport, Predictions};
use netml_core::features::{FlowRecord, Labels, SchemaManifest};
use netml_core::flow::FlowConfig;
use netml_core::matrix::{flatten, FeatureMatrix, Scaler};
use netml_core::mthl::{self, MthlConfig, MthlModel};
use netml_core::nn::{layer_suite, Checkpoint};
use netml_core::pipeline::{extract_capture, ExtractSummary};
use netml_core::train::{History, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::require_exists;
use crate::error::CliError;
use crate::io::{create_dir, read_jsonl, read_records, write_json, write_jsonl, write_records, write_text};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COVERAGE_FILE: &str = "summary.txt";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_STD_FILE: &str = "test_std.jsonl";
pub const TEST_CHALLENGE_FILE: &str = "test_challenge.jsonl";
pub const WITHHELD_FILE: &str = "withheld.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const STATS_FILE: &str = "stats.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_JSON_FILE: &str = "report.json";

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

// ---- extract ----

#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub captures: Vec<PathBuf>,
    pub out: PathBuf,
    pub flow: FlowConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSummary {
    pub trace: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub summary: ExtractSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub files: Vec<FileSummary>,
    pub total: ExtractSummary,
    pub conformant: bool,
}

/// Flows and protocol blocks found per capture, plus a total line.
pub fn coverage_table(s: &RunSummary) -> String {
    let heads = ["flows", "metadata", "tls", "dns", "http"];
    let mut rows: Vec<(String, [u64; 5])> = s
        .files
        .iter()
        .map(|f| {
            let c = &f.summary.counts;
            (f.trace.clone(), [c.flows, c.metadata, c.tls, c.dns, c.http])
        })
        .collect();
    let c = &s.total.counts;
    rows.push(("total".into(), [c.flows, c.metadata, c.tls, c.dns, c.http]));
    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<w0$}", "trace");
    for h in heads {
        write!(out, "  {h:>8}").unwrap();
    }
    out.push('\n');
    for (name, v) in rows {
        write!(out, "{name:<w0$}").unwrap();
        for n in v {
            write!(out, "  {n:>8}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn cmd_extract(o: &ExtractOptions) -> Result<RunSummary, CliError> {
    let mut seen = BTreeSet::new();
    for p in &o.captures {
        require_exists(p)?;
        if !seen.insert(file_name(p)) {
            return Err(CliError::Usage(format!("two captures share the trace name {}", file_name(p))));
        }
    }
    if !o.flow.is_conformant() {
        log::warn!("packet cap {} differs from 48; output is flagged non-conformant", o.flow.per_direction_packet_cap);
    }
    create_dir(&o.out)?;
    let results: Vec<(FileSummary, Vec<FlowRecord>)> = o
        .captures
        .par_iter()
        .map(|p| {
            let trace = file_name(p);
            let path = p.display().to_string();
            let outcome = fs::read(p).map_err(|e| e.to_string()).and_then(|b| extract_capture(&b, &trace, o.flow).map_err(|e| e.to_string()));
            match outcome {
                Ok((records, summary)) => {
                    log::info!("{trace}: {} packets, {} flows", summary.packets, records.len());
                    (FileSummary { trace, path, error: None, summary }, records)
                }
                Err(e) => {
                    log::error!("{trace}: {e}");
                    (FileSummary { trace, path, error: Some(e), summary: ExtractSummary::default() }, Vec::new())
                }
            }
        })
        .collect();
    let mut total = ExtractSummary::default();
    let mut files = Vec::new();
    let mut records = Vec::new();
    for (f, r) in results {
        total.merge(&f.summary);
        files.push(f);
        records.extend(r);
    }
    let summary = RunSummary { files, total, conformant: o.flow.is_conformant() };
    write_records(&o.out.join(RECORDS_FILE), &records)?;
    write_json(&o.out.join(SCHEMA_FILE), &SchemaManifest::current(&o.flow))?;
    write_json(&o.out.join(SUMMARY_FILE), &summary)?;
    write_text(&o.out.join(COVERAGE_FILE), &coverage_table(&summary))?;
    let failed: Vec<(String, String)> =
        summary.files.iter().filter_map(|f| f.error.clone().map(|e| (f.path.clone(), e))).collect();
    if !failed.is_empty() {
        return Err(CliError::Partial { total: o.captures.len(), failed });
    }
    Ok(summary)
}

// ---- prepare ----

#[derive(Debug, Clone)]
pub struct PrepareOptions {
    pub records: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub seed: u64,
    pub salt: String,
    pub ratio: [u32; 3],
    pub out: PathBuf,
}

/// One line of the withheld-labels file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WithheldLine {
    pub id: u64,
    pub split: String,
    pub labels: Labels,
}

pub fn read_manifest(path: &Path) -> Result<LabelManifest, CliError> {
    require_exists(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let m: LabelManifest = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    m.validate()?;
    Ok(m)
}

/// Class-count tables for every level that carries labels.
pub fn stats_tables(records: &[FlowRecord]) -> Result<String, CliError> {
    let mut out = Vec::new();
    for level in [Level::Top, Level::Mid, Level::Fine] {
        match class_stats(records, level) {
            Ok(rows) => out.push(format_stats(level, &rows)),
            Err(DatasetError::NoLabelsAtLevel(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if out.is_empty() {
        return Err(CliError::Data("no labeled records".into()));
    }
    Ok(out.join("\n"))
}

pub fn cmd_prepare(o: &PrepareOptions) -> Result<(), CliError> {
    let manifest = read_manifest(&o.manifest)?;
    let mut records = Vec::new();
    for p in &o.records {
        require_exists(p)?;
        records.extend(read_records(p)?);
    }
    let cfg = PrepareConfig { salt: o.salt.as_bytes().to_vec(), seed: o.seed, ratio: o.ratio };
    let p = prepare(records, &manifest, &cfg)?;
    for w in &p.warnings {
        log::warn!("{w}");
    }
    create_dir(&o.out)?;
    write_records(&o.out.join(TRAIN_FILE), &p.train)?;
    write_records(&o.out.join(TEST_STD_FILE), &p.test_std)?;
    write_records(&o.out.join(TEST_CHALLENGE_FILE), &p.test_challenge)?;
    let mut withheld: Vec<WithheldLine> = Vec::new();
    for (split, ws) in [("test-std", &p.withheld_std), ("test-challenge", &p.withheld_challenge)] {
        withheld.extend(ws.iter().map(|w| WithheldLine { id: w.id, split: split.into(), labels: w.labels.clone() }));
    }
    withheld.sort_by_key(|w| w.id);
    write_jsonl(&o.out.join(WITHHELD_FILE), &withheld)?;
    write_json(&o.out.join(SPLIT_FILE), &p.split)?;

    let mut all = p.train.clone();
    for (r, w) in p.test_std.iter().chain(&p.test_challenge).zip(p.withheld_std.iter().chain(&p.withheld_challenge)) {
        let mut r = r.clone();
        r.labels = Some(w.labels.clone());
        all.push(r);
    }
    write_text(&o.out.join(STATS_FILE), &stats_tables(&all)?)?;
    log::info!("train {}, test-std {}, test-challenge {}", p.train.len(), p.test_std.len(), p.test_challenge.len());
    Ok(())
}

// ---- models ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mthl,
    Knn,
    Mlp,
}

/// Reads a labeled records file, flattens it and standardizes with a scaler
/// fitted on it.
pub fn training_matrix(path: &Path) -> Result<FeatureMatrix, CliError> {
    require_exists(path)?;
    let records = read_records(path)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{} holds no records", path.display())));
    }
    let mut m = flatten(&records)?;
    let s = Scaler::fit(&m, &file_name(path));
    s.apply(&mut m)?;
    m.scaler = Some(s);
    Ok(m)
}

fn check_level(level: &str) -> Result<(), CliError> {
    match level {
        "top" | "mid" | "fine" => Ok(()),
        _ => Err(CliError::Usage(format!("unknown label level {level:?}; expected top, mid or fine"))),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub train: PathBuf,
    pub model: ModelKind,
    pub out: PathBuf,
    pub train_cfg: TrainConfig,
    pub mthl: MthlConfig,
    pub mlp_hidden: Vec<usize>,
    pub level: String,
    pub k: usize,
}

pub fn cmd_train(o: &TrainOptions) -> Result<Option<History>, CliError> {
    check_level(&o.level)?;
    o.train_cfg.validate()?;
    let m = training_matrix(&o.train)?;
    log::info!("{} rows x {} columns from {}", m.rows(), m.cols(), o.train.display());
    let (ck, history) = match o.model {
        ModelKind::Mthl => {
            let (model, h) = mthl::fit(&m, &o.mthl, &o.train_cfg)?;
            (model.to_checkpoint(), Some(h))
        }
        ModelKind::Mlp => {
            let cfg = MlpConfig { hidden: o.mlp_hidden.clone(), level: o.level.clone(), ..Default::default() };
            let (model, h) = mlp_fit(&m, &cfg, &o.train_cfg)?;
            (model.to_checkpoint(), Some(h))
        }
        ModelKind::Knn => {
            let model = knn_fit(&m, &o.level, o.k)?;
            let train_ref = fs::canonicalize(&o.train).map_err(|e| CliError::io(&o.train, e))?;
            (model.to_checkpoint(&train_ref.display().to_string(), o.train_cfg.seed), None)
        }
    };
    create_dir(&o.out)?;
    write_bytes(&o.out.join(CHECKPOINT_FILE), &ck.to_bytes())?;
    if let Some(h) = &history {
        write_json(&o.out.join(HISTORY_FILE), h)?;
        if let Some(last) = h.last() {
            log::info!("final train macro-F1 {:?}, validation {:?}", last.train_macro_f1, last.val_macro_f1);
        }
    }
    Ok(history)
}

fn write_bytes(path: &Path, b: &[u8]) -> Result<(), CliError> {
    fs::write(path, b).map_err(|e| CliError::io(path, e))
}

/// A checkpoint of any kind, ready to label rows.
pub enum LoadedModel {
    Mthl(MthlModel),
    Mlp(MlpModel),
    Knn { model: KnnModel, scaler: Scaler, columns: Vec<String> },
}

/// Class indices for one label level.
pub struct LevelPredictions {
    pub level: String,
    pub classes: Vec<String>,
    pub pred: Vec<usize>,
}

impl LoadedModel {
    /// `train_ref` overrides the training file a kNN checkpoint points at.
    pub fn load(path: &Path, train_ref: Option<&Path>) -> Result<LoadedModel, CliError> {
        require_exists(path)?;
        let f = File::open(path).map_err(|e| CliError::io(path, e))?;
        let ck = Checkpoint::read_from(BufReader::new(f))?;
        match ck.header.kind.as_str() {
            mthl::CHECKPOINT_KIND => Ok(LoadedModel::Mthl(MthlModel::from_checkpoint(&ck)?)),
            MLP_KIND => Ok(LoadedModel::Mlp(MlpModel::from_checkpoint(&ck)?)),
            KNN_KIND => {
                let stored = PathBuf::from(KnnModel::checkpoint_train_ref(&ck)?);
                let m = training_matrix(train_ref.unwrap_or(&stored))?;
                let model = KnnModel::from_checkpoint(&ck, &m)?;
                Ok(LoadedModel::Knn { model, scaler: m.scaler.clone().expect("set by training_matrix"), columns: m.column_names })
            }
            other => Err(CliError::Data(format!("{}: unknown model kind {other:?}", path.display()))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LoadedModel::Mthl(_) => mthl::CHECKPOINT_KIND,
            LoadedModel::Mlp(_) => MLP_KIND,
            LoadedModel::Knn { .. } => KNN_KIND,
        }
    }

    fn scaler_and_columns(&self) -> (Option<&Scaler>, &[String]) {
        match self {
            LoadedModel::Mthl(m) => (m.scaler.as_ref(), &m.column_names),
            LoadedModel::Mlp(m) => (m.scaler.as_ref(), &m.column_names),
            LoadedModel::Knn { scaler, columns, .. } => (Some(scaler), columns),
        }
    }

    /// Flattens and standardizes `records` the way the training rows were.
    pub fn matrix(&self, records: &[FlowRecord]) -> Result<FeatureMatrix, CliError> {
        let mut m = flatten(records)?;
        let (scaler, columns) = self.scaler_and_columns();
        if m.column_names != columns {
            return Err(CliError::VocabularyMismatch("feature columns differ from the ones the model was trained on".into()));
        }
        if let Some(s) = scaler {
            s.apply(&mut m)?;
        }
        Ok(m)
    }

    pub fn predict(&mut self, m: &FeatureMatrix) -> Result<Vec<LevelPredictions>, CliError> {
        Ok(match self {
            LoadedModel::Mthl(model) => {
                let (mid, top) = model.predict(m)?;
                vec![
                    LevelPredictions { level: "mid".into(), classes: model.mid_classes.clone(), pred: mid },
                    LevelPredictions { level: "top".into(), classes: model.top_classes.clone(), pred: top },
                ]
            }
            LoadedModel::Mlp(model) => {
                let pred = model.predict(m)?;
                vec![LevelPredictions { level: model.net.config.level.clone(), classes: model.classes.clone(), pred }]
            }
            LoadedModel::Knn { model, .. } => {
                let pred = model.predict_matrix(m)?;
                vec![LevelPredictions { level: model.level.clone(), classes: model.classes.clone(), pred }]
            }
        })
    }
}

fn level_of<'a>(labels: &'a Labels, level: &str) -> Option<&'a str> {
    match level {
        "top" => Some(&labels.top),
        "mid" => Some(&labels.mid),
        "fine" => labels.fine.as_deref(),
        _ => None,
    }
}

/// Reads evaluation records and attaches labels from a withheld-labels file.
pub fn labeled_records(records: &Path, labels: Option<&Path>) -> Result<Vec<FlowRecord>, CliError> {
    require_exists(records)?;
    let mut recs = read_records(records)?;
    if let Some(lp) = labels {
        require_exists(lp)?;
        let lines: Vec<WithheldLine> = read_jsonl(lp)?;
        let map: BTreeMap<u64, &Labels> = lines.iter().map(|w| (w.id, &w.labels)).collect();
        let mut attached = 0;
        for r in recs.iter_mut() {
            if let Some(l) = map.get(&r.id) {
                r.labels = Some((*l).clone());
                attached += 1;
            }
        }
        log::info!("attached labels to {attached} of {} records", recs.len());
    }
    Ok(recs)
}

// ---- evaluate ----

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub checkpoints: Vec<PathBuf>,
    pub eval: PathBuf,
    pub labels: Option<PathBuf>,
    pub out: PathBuf,
    pub datasets: Vec<String>,
    pub train_ref: Option<PathBuf>,
}

pub fn cmd_evaluate(o: &EvaluateOptions) -> Result<EvalReport, CliError> {
    if o.checkpoints.is_empty() {
        return Err(CliError::Usage("no checkpoint given".into()));
    }
    let records = labeled_records(&o.eval, o.labels.as_deref())?;
    if records.iter().all(|r| r.labels.is_none()) {
        return Err(CliError::Data("evaluation records carry no labels; pass the withheld-labels file".into()));
    }
    let dataset: Vec<Option<String>> = records.iter().map(|r| r.labels.as_ref().and_then(|l| l.dataset.clone())).collect();
    let mut preds = Vec::new();
    for cp in &o.checkpoints {
        let mut model = LoadedModel::load(cp, o.train_ref.as_deref())?;
        let m = model.matrix(&records)?;
        for lp in model.predict(&m)? {
            let mut unknown = BTreeSet::new();
            let truth: Vec<Option<usize>> = records
                .iter()
                .map(|r| {
                    let v = r.labels.as_ref().and_then(|l| level_of(l, &lp.level))?;
                    let i = lp.classes.iter().position(|c| c == v);
                    if i.is_none() {
                        unknown.insert(v.to_string());
                    }
                    i
                })
                .collect();
            if !unknown.is_empty() {
                return Err(CliError::VocabularyMismatch(format!(
                    "{} labels {:?} are not in the {} model's vocabulary",
                    lp.level,
                    unknown,
                    model.kind()
                )));
            }
            preds.push(Predictions {
                model: model.kind().to_string(),
                level: lp.level,
                classes: lp.classes,
                truth,
                pred: lp.pred,
                dataset: dataset.clone(),
            });
        }
    }
    let report = scenario_report(&preds, &o.datasets);
    create_dir(&o.out)?;
    write_text(&o.out.join(REPORT_TEXT_FILE), &report.to_text())?;
    write_text(&o.out.join(REPORT_JSON_FILE), &report.to_json())?;
    Ok(report)
}

// ---- predict ----

#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub train_ref: Option<PathBuf>,
}

/// Writes one JSON object per record: its id and a class name per level.
pub fn cmd_predict(o: &PredictOptions) -> Result<usize, CliError> {
    let mut model = LoadedModel::load(&o.checkpoint, o.train_ref.as_deref())?;
    require_exists(&o.input)?;
    let records = read_records(&o.input)?;
    let m = model.matrix(&records)?;
    let levels = model.predict(&m)?;
    let lines: Vec<serde_json::Value> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut obj = serde_json::Map::new();
            obj.insert("id".into(), r.id.into());
            for lp in &levels {
                obj.insert(lp.level.clone(), lp.classes[lp.pred[i]].clone().into());
            }
            serde_json::Value::Object(obj)
        })
        .collect();
    if let Some(dir) = o.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_jsonl(&o.out, &lines)?;
    Ok(lines.len())
}

// ---- stats ----

#[derive(Debug, Clone)]
pub struct StatsOptions {
    pub records: Vec<PathBuf>,
    pub labels: Option<PathBuf>,
    pub level: Option<Level>,
}

pub fn cmd_stats(o: &StatsOptions) -> Result<String, CliError> {
    let mut records = Vec::new();
    for p in &o.records {
        records.extend(labeled_records(p, o.labels.as_deref())?);
    }
    match o.level {
        Some(level) => Ok(format_stats(level, &class_stats(&records, level)?)),
        None => stats_tables(&records),
    }
}

// ---- gradcheck ----

/// Aligned pass/fail table and whether every layer passed.
pub fn cmd_gradcheck(seeds: u64) -> Result<(String, bool), CliError> {
    let rows = layer_suite(seeds).map_err(|e| CliError::Numeric(e.to_string()))?;
    let w = rows.iter().map(|r| r.layer.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<w$}  {:>5}  {:>13}  result\n", "layer", "seeds", "max rel err");
    for r in &rows {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{:<w$}  {:>5}  {:>13.3e}  {verdict}", r.layer, r.seeds, r.max_rel_error).unwrap();
    }
    Ok((out, rows.iter().all(|r| r.passed)))
}
