//! Records to a standardized numeric matrix, and its binary container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! 0      8 bytes   magic "NMLMAT01"
//! 8      u64       header length H
//! 16     H bytes   JSON header (MatrixHeader)
//! ..     f64 × rows × cols, column-major
//! ..     u64 × rows  row ids
//! ..     u32 × rows  per label column, in header order; u32::MAX = missing
//! ```

use std::collections::BTreeSet;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{metadata_column_names, FlowRecord, METADATA_COLUMNS, SCHEMA_VERSION};

pub const MATRIX_MAGIC: &[u8; 8] = b"NMLMAT01";
pub const STD_FLOOR: f64 = 1e-12;
pub const MISSING: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("record {id} has schema version {found}, expected {expected}")]
    SchemaMismatch { id: u64, found: u32, expected: u32 },
    #[error("not a matrix file")]
    BadMagic,
    #[error("matrix file truncated")]
    Truncated,
    #[error("bad matrix header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label:?} not in {column} vocabulary")]
    UnknownLabel { column: String, label: String },
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for MatrixError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            MatrixError::Truncated
        } else {
            MatrixError::Io(e)
        }
    }
}

/// Categorical per-row values with their vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelColumn {
    pub name: String,
    pub vocabulary: Vec<String>,
    #[serde(skip)]
    pub indices: Vec<u32>,
}

impl LabelColumn {
    /// Vocabulary is the sorted set of observed values.
    pub fn from_values<'a>(name: &str, values: impl IntoIterator<Item = Option<&'a str>> + Clone) -> Self {
        let vocab: BTreeSet<&str> = values.clone().into_iter().flatten().collect();
        let vocabulary: Vec<String> = vocab.iter().map(|s| s.to_string()).collect();
        let indices = values
            .into_iter()
            .map(|v| v.map_or(MISSING, |v| vocabulary.binary_search_by(|x| x.as_str().cmp(v)).unwrap() as u32))
            .collect();
        LabelColumn { name: name.to_string(), vocabulary, indices }
    }

    pub fn get(&self, row: usize) -> Option<usize> {
        let i = self.indices[row];
        (i != MISSING).then_some(i as usize)
    }

    pub fn value(&self, row: usize) -> Option<&str> {
        self.get(row).map(|i| self.vocabulary[i].as_str())
    }

    /// Re-indexes against another vocabulary; fails on unseen labels.
    pub fn remap(&self, vocabulary: &[String]) -> Result<LabelColumn, MatrixError> {
        let mut indices = Vec::with_capacity(self.indices.len());
        for row in 0..self.indices.len() {
            indices.push(match self.value(row) {
                None => MISSING,
                Some(v) => vocabulary.iter().position(|x| x == v).ok_or_else(|| MatrixError::UnknownLabel {
                    column: self.name.clone(),
                    label: v.to_string(),
                })? as u32,
            });
        }
        Ok(LabelColumn { name: self.name.clone(), vocabulary: vocabulary.to_vec(), indices })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub fitted_on: String,
}

impl Scaler {
    /// Population mean and std per column. Columns with std below
    /// `STD_FLOOR` get std 1 so they map to 0.
    pub fn fit(m: &FeatureMatrix, fitted_on: &str) -> Scaler {
        let (rows, cols) = (m.rows(), m.cols());
        let mut mean = vec![0.0; cols];
        let mut std = vec![1.0; cols];
        if rows > 0 {
            for r in m.data.chunks_exact(cols) {
                for (acc, x) in mean.iter_mut().zip(r) {
                    *acc += x;
                }
            }
            mean.iter_mut().for_each(|v| *v /= rows as f64);
            let mut var = vec![0.0; cols];
            for r in m.data.chunks_exact(cols) {
                for ((acc, x), mu) in var.iter_mut().zip(r).zip(&mean) {
                    *acc += (x - mu) * (x - mu);
                }
            }
            for (s, v) in std.iter_mut().zip(&var) {
                let sd = (v / rows as f64).sqrt();
                *s = if sd < STD_FLOOR { 1.0 } else { sd };
            }
        }
        Scaler { mean, std, fitted_on: fitted_on.to_string() }
    }

    pub fn apply(&self, m: &mut FeatureMatrix) -> Result<(), MatrixError> {
        if m.cols() != self.mean.len() {
            return Err(MatrixError::Shape(format!("scaler has {} columns, matrix {}", self.mean.len(), m.cols())));
        }
        let cols = m.cols();
        for r in m.data.chunks_exact_mut(cols) {
            for ((x, mu), sd) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - mu) / sd;
            }
        }
        Ok(())
    }

    pub fn invert(&self, m: &mut FeatureMatrix) {
        let cols = m.cols();
        for r in m.data.chunks_exact_mut(cols) {
            for ((x, mu), sd) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * sd + mu;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub column_names: Vec<String>,
    /// Row-major, rows × column_names.len().
    pub data: Vec<f64>,
    pub row_ids: Vec<u64>,
    pub labels: Vec<LabelColumn>,
    pub scaler: Option<Scaler>,
}

/// Label columns built by `flatten`.
pub const LABEL_COLUMNS: [&str; 4] = ["top", "mid", "fine", "dataset"];

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.column_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn label_column(&self, name: &str) -> Option<&LabelColumn> {
        self.labels.iter().find(|l| l.name == name)
    }

    /// Rows in `idx` order.
    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols());
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            column_names: self.column_names.clone(),
            data,
            row_ids: idx.iter().map(|&i| self.row_ids[i]).collect(),
            labels: self
                .labels
                .iter()
                .map(|l| LabelColumn {
                    name: l.name.clone(),
                    vocabulary: l.vocabulary.clone(),
                    indices: idx.iter().map(|&i| l.indices[i]).collect(),
                })
                .collect(),
            scaler: self.scaler.clone(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&x| x as f32).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), MatrixError> {
        let header = MatrixHeader {
            format_version: 1,
            schema_version: SCHEMA_VERSION,
            rows: self.rows() as u64,
            cols: self.cols() as u64,
            column_names: self.column_names.clone(),
            scaler: self.scaler.clone(),
            labels: self.labels.clone(),
        };
        let h = serde_json::to_vec(&header)?;
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&(h.len() as u64).to_le_bytes())?;
        w.write_all(&h)?;
        let (rows, cols) = (self.rows(), self.cols());
        let mut buf = Vec::with_capacity(rows * 8);
        for c in 0..cols {
            buf.clear();
            for r in 0..rows {
                buf.extend_from_slice(&self.data[r * cols + c].to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        buf.clear();
        for id in &self.row_ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        w.write_all(&buf)?;
        for l in &self.labels {
            buf.clear();
            for i in &l.indices {
                buf.extend_from_slice(&i.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<FeatureMatrix, MatrixError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MATRIX_MAGIC {
            return Err(MatrixError::BadMagic);
        }
        let hlen = read_u64(&mut r)? as usize;
        let mut h = Vec::new();
        (&mut r).take(hlen as u64).read_to_end(&mut h)?;
        if h.len() != hlen {
            return Err(MatrixError::Truncated);
        }
        let header: MatrixHeader = serde_json::from_slice(&h)?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(MatrixError::SchemaMismatch { id: 0, found: header.schema_version, expected: SCHEMA_VERSION });
        }
        let (rows, cols) = (header.rows as usize, header.cols as usize);
        if header.column_names.len() != cols {
            return Err(MatrixError::Shape("column name count differs from cols".into()));
        }
        let mut data = vec![0.0; rows * cols];
        for c in 0..cols {
            for row in 0..rows {
                data[row * cols + c] = f64::from_le_bytes(read_array(&mut r)?);
            }
        }
        let row_ids = (0..rows).map(|_| read_u64(&mut r)).collect::<Result<_, _>>()?;
        let mut labels = header.labels;
        for l in labels.iter_mut() {
            l.indices = (0..rows).map(|_| read_array(&mut r).map(u32::from_le_bytes)).collect::<Result<_, _>>()?;
            if l.indices.iter().any(|&i| i != MISSING && i as usize >= l.vocabulary.len()) {
                return Err(MatrixError::Shape(format!("label index out of range in {}", l.name)));
            }
        }
        Ok(FeatureMatrix { column_names: header.column_names, data, row_ids, labels, scaler: header.scaler })
    }
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], MatrixError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, MatrixError> {
    read_array(r).map(u64::from_le_bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixHeader {
    format_version: u32,
    schema_version: u32,
    rows: u64,
    cols: u64,
    column_names: Vec<String>,
    scaler: Option<Scaler>,
    labels: Vec<LabelColumn>,
}

/// Metadata columns only, in manifest order. Labels become the `top`, `mid`,
/// `fine` and `dataset` columns.
pub fn flatten(records: &[FlowRecord]) -> Result<FeatureMatrix, MatrixError> {
    let mut data = Vec::with_capacity(records.len() * METADATA_COLUMNS);
    for r in records {
        if r.schema_version != SCHEMA_VERSION {
            return Err(MatrixError::SchemaMismatch { id: r.id, found: r.schema_version, expected: SCHEMA_VERSION });
        }
        data.extend(r.metadata.to_columns());
    }
    let labels = LABEL_COLUMNS
        .iter()
        .map(|&name| {
            let vals = records.iter().map(|r| {
                r.labels.as_ref().and_then(|l| match name {
                    "top" => Some(l.top.as_str()),
                    "mid" => Some(l.mid.as_str()),
                    "fine" => l.fine.as_deref(),
                    _ => l.dataset.as_deref(),
                })
            });
            LabelColumn::from_values(name, vals)
        })
        .collect();
    Ok(FeatureMatrix {
        column_names: metadata_column_names(),
        data,
        row_ids: records.iter().map(|r| r.id).collect(),
        labels,
        scaler: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Labels, MetadataFeatures};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn record(id: u64, f: impl FnOnce(&mut MetadataFeatures)) -> FlowRecord {
        let mut metadata = MetadataFeatures::default();
        f(&mut metadata);
        FlowRecord {
            schema_version: SCHEMA_VERSION,
            id,
            trace: String::new(),
            sa: "a".into(),
            da: "b".into(),
            time_start: None,
            time_end: None,
            metadata,
            tls: None,
            dns: None,
            http: None,
            labels: None,
        }
    }

    fn raw(rows: usize, cols: usize, data: Vec<f64>) -> FeatureMatrix {
        FeatureMatrix {
            column_names: (0..cols).map(|i| format!("c{i}")).collect(),
            data,
            row_ids: (0..rows as u64).collect(),
            labels: vec![],
            scaler: None,
        }
    }

    #[test]
    fn one_record_one_row() {
        let m = flatten(&[record(9, |m| m.pld_ccnt[0] = 3)]).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 121));
        let c = m.column_names.iter().position(|n| n == "pld_ccnt_0").unwrap();
        assert_eq!(m.row(0)[c], 3.0);
        assert_eq!(m.column_names[c + 15], "pld_ccnt_15");
        let uniq: BTreeSet<_> = m.column_names.iter().collect();
        assert_eq!(uniq.len(), 121);
    }

    #[test]
    fn mixed_schema_rejected() {
        let mut b = record(2, |_| {});
        b.schema_version = 2;
        assert!(matches!(flatten(&[record(1, |_| {}), b]), Err(MatrixError::SchemaMismatch { id: 2, .. })));
    }

    #[test]
    fn z_score_closed_form() {
        let mut m = raw(2, 2, vec![0.0, 5.0, 2.0, 5.0]);
        let s = Scaler::fit(&m, "train");
        assert_eq!(s.mean, vec![1.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        s.apply(&mut m).unwrap();
        assert_eq!(m.data, vec![-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn scaler_not_refit_on_other_data() {
        let train = raw(2, 1, vec![0.0, 2.0]);
        let s = Scaler::fit(&train, "train");
        let mut val = raw(2, 1, vec![4.0, 6.0]);
        s.apply(&mut val).unwrap();
        assert_eq!(val.data, vec![3.0, 5.0]);
    }

    #[test]
    fn labels_and_container_round_trip() {
        let mut rs: Vec<FlowRecord> = (0..5).map(|i| record(i, |m| m.bytes_in = i * 7)).collect();
        for (i, r) in rs.iter_mut().enumerate().take(4) {
            r.labels = Some(Labels { dataset: Some("d".into()), top: "T".into(), mid: ["b", "a"][i % 2].into(), fine: None });
        }
        let mut m = flatten(&rs).unwrap();
        let mid = m.label_column("mid").unwrap();
        assert_eq!(mid.vocabulary, vec!["a", "b"]);
        assert_eq!(mid.indices, vec![1, 0, 1, 0, MISSING]);
        assert_eq!(m.label_column("fine").unwrap().vocabulary.len(), 0);
        let s = Scaler::fit(&m, "train");
        s.apply(&mut m).unwrap();
        m.scaler = Some(s);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..8], MATRIX_MAGIC);
        let back = FeatureMatrix::read_from(&bytes[..]).unwrap();
        assert_eq!(back, m);
        assert!(matches!(FeatureMatrix::read_from(&bytes[..bytes.len() - 1]), Err(MatrixError::Truncated)));
        assert!(matches!(FeatureMatrix::read_from(&b"NOTAMATRIX000000"[..]), Err(MatrixError::BadMagic)));
    }

    #[test]
    fn remap_to_model_vocabulary() {
        let c = LabelColumn::from_values("mid", [Some("b"), None, Some("a")]);
        let r = c.remap(&["b".into(), "a".into(), "z".into()]).unwrap();
        assert_eq!(r.indices, vec![0, MISSING, 1]);
        assert!(c.remap(&["a".into()]).is_err());
    }

    #[test]
    fn random_matrix_standardizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (rows, cols) = (1000, 121);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            for c in 0..cols {
                data.push(if c == 7 { 3.5 } else { rng.random_range(-50.0..50.0) * (c as f64 + 1.0) });
            }
        }
        let mut m = raw(rows, cols, data);
        let s = Scaler::fit(&m, "train");
        s.apply(&mut m).unwrap();
        let after = Scaler::fit(&m, "check");
        for c in 0..cols {
            assert!(after.mean[c].abs() < 1e-9);
            if c == 7 {
                assert!(m.data.iter().skip(7).step_by(cols).all(|&x| x == 0.0));
            } else {
                assert!((after.std[c] - 1.0).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn inverse_recovers_input(vals in proptest::collection::vec(-1e6f64..1e6, 3..60)) {
            let rows = vals.len() / 3;
            let data = vals[..rows * 3].to_vec();
            let mut m = raw(rows, 3, data.clone());
            let s = Scaler::fit(&m, "t");
            s.apply(&mut m).unwrap();
            s.invert(&mut m);
            for (a, b) in m.data.iter().zip(&data) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}
