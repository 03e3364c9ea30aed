//! Anonymization, labeling and stratified splitting of flow records.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::net::{IpAddr, Ipv4Addr};

use hmac::{Hmac, KeyInit, Mac};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::features::{FlowRecord, Labels};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("no manifest entry matches trace(s): {}", .0.join(", "))]
    UnmatchedTrace(Vec<String>),
    #[error("trace {trace} matches several manifest entries: {}", .patterns.join(", "))]
    AmbiguousTrace { trace: String, patterns: Vec<String> },
    #[error("invalid manifest pattern {pattern}: {reason}")]
    BadPattern { pattern: String, reason: String },
    #[error("label {label:?} is not in the declared {level} vocabulary")]
    UnknownLabel { level: String, label: String },
    #[error("record {0} has no labels")]
    MissingLabel(u64),
    #[error("no record carries a {0} label")]
    NoLabelsAtLevel(String),
    #[error("masking salt must not be empty")]
    EmptySalt,
    #[error("split ratio parts must be positive")]
    BadRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Top,
    Mid,
    Fine,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Top => "top",
            Level::Mid => "mid",
            Level::Fine => "fine",
        }
    }

    pub fn of(self, labels: &Labels) -> Option<&str> {
        match self {
            Level::Top => Some(&labels.top),
            Level::Mid => Some(&labels.mid),
            Level::Fine => labels.fine.as_deref(),
        }
    }
}

impl std::str::FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "top" => Ok(Level::Top),
            "mid" => Ok(Level::Mid),
            "fine" => Ok(Level::Fine),
            other => Err(format!("unknown level {other:?} (expected top, mid or fine)")),
        }
    }
}

// ---- masking ----

/// Keyed-hash address tokens. The same address maps to the same token for a
/// given salt.
pub struct Masker {
    mac: Hmac<Sha256>,
}

pub const TOKEN_PREFIX: &str = "ip_";

impl Masker {
    pub fn new(salt: &[u8]) -> Result<Self, DatasetError> {
        if salt.is_empty() {
            return Err(DatasetError::EmptySalt);
        }
        let mac = Hmac::<Sha256>::new_from_slice(salt).expect("hmac accepts any key length");
        Ok(Masker { mac })
    }

    pub fn token(&self, addr: &IpAddr) -> String {
        let mut m = self.mac.clone();
        match addr {
            IpAddr::V4(a) => m.update(&a.to_ipv6_mapped().octets()),
            IpAddr::V6(a) => m.update(&a.octets()),
        }
        let tag = m.finalize().into_bytes();
        let mut s = String::with_capacity(TOKEN_PREFIX.len() + 16);
        s.push_str(TOKEN_PREFIX);
        for b in &tag[..8] {
            write!(s, "{b:02x}").unwrap();
        }
        s
    }

    /// Replaces a field that is wholly an address (optionally with a port or
    /// brackets). Anything else goes through `mask_text`.
    pub fn mask_field(&self, s: &str) -> String {
        if let Some(addr) = parse_host_addr(s) {
            return self.token(&addr.0) + addr.1;
        }
        self.mask_text(s)
    }

    /// Replaces every dotted-quad IPv4 literal inside free text.
    pub fn mask_text(&self, s: &str) -> String {
        let b = s.as_bytes();
        let mut out = String::with_capacity(s.len());
        let mut i = 0;
        while i < b.len() {
            if b[i].is_ascii_digit() && (i == 0 || !is_addr_byte(b[i - 1])) {
                let mut j = i;
                while j < b.len() && (b[j].is_ascii_digit() || b[j] == b'.') {
                    j += 1;
                }
                let run = s[i..j].trim_end_matches('.');
                if let Ok(a) = run.parse::<Ipv4Addr>() {
                    out.push_str(&self.token(&IpAddr::V4(a)));
                    i += run.len();
                    continue;
                }
                out.push_str(&s[i..j]);
                i = j;
                continue;
            }
            let ch = s[i..].chars().next().unwrap();
            out.push(ch);
            i += ch.len_utf8();
        }
        out
    }
}

fn is_addr_byte(b: u8) -> bool {
    b.is_ascii_digit() || b == b'.'
}

/// "1.2.3.4", "1.2.3.4:80", "[::1]:80", "::1" -> (addr, suffix)
fn parse_host_addr(s: &str) -> Option<(IpAddr, &str)> {
    if let Ok(a) = s.parse::<IpAddr>() {
        return Some((a, ""));
    }
    if let Some(rest) = s.strip_prefix('[') {
        let end = rest.find(']')?;
        let a = rest[..end].parse::<IpAddr>().ok()?;
        return Some((a, &rest[end + 1..]));
    }
    let (h, _) = s.rsplit_once(':')?;
    let a = h.parse::<Ipv4Addr>().ok()?;
    Some((IpAddr::V4(a), &s[h.len()..]))
}

/// Masks endpoint fields and address literals inside DNS and HTTP blocks.
/// Values that are already tokens pass through unchanged.
pub fn mask_record(rec: &mut FlowRecord, masker: &Masker) {
    let mask_endpoint = |s: &str| {
        if s.starts_with(TOKEN_PREFIX) {
            s.to_string()
        } else {
            masker.mask_field(s)
        }
    };
    rec.sa = mask_endpoint(&rec.sa);
    rec.da = mask_endpoint(&rec.da);
    if let Some(d) = rec.dns.as_mut() {
        for v in d.dns_answer_ip.iter_mut().chain(&mut d.dns_query_name).chain(&mut d.dns_answer_name) {
            *v = masker.mask_field(v);
        }
    }
    if let Some(h) = rec.http.as_mut() {
        h.http_host = masker.mask_field(&h.http_host);
        h.http_uri = masker.mask_text(&h.http_uri);
    }
}

pub fn mask_addresses(records: &mut [FlowRecord], salt: &[u8]) -> Result<(), DatasetError> {
    let masker = Masker::new(salt)?;
    for r in records {
        mask_record(r, &masker);
    }
    Ok(())
}

// ---- labeling ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Glob over the trace (capture file) name.
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub top: String,
    pub mid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    #[serde(default)]
    pub top: Vec<String>,
    #[serde(default)]
    pub mid: Vec<String>,
    #[serde(default)]
    pub fine: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelManifest {
    pub entries: Vec<ManifestEntry>,
    /// When given, every label must be listed here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vocabulary>,
}

impl LabelManifest {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for e in &self.entries {
            glob::Pattern::new(&e.pattern).map_err(|err| DatasetError::BadPattern {
                pattern: e.pattern.clone(),
                reason: err.msg.to_string(),
            })?;
        }
        if let Some(v) = &self.vocabulary {
            for e in &self.entries {
                let checks = [
                    (Level::Top, Some(&e.top), &v.top),
                    (Level::Mid, Some(&e.mid), &v.mid),
                    (Level::Fine, e.fine.as_ref(), &v.fine),
                ];
                for (level, label, vocab) in checks {
                    if let Some(l) = label {
                        if !vocab.contains(l) {
                            return Err(DatasetError::UnknownLabel {
                                level: level.as_str().into(),
                                label: l.clone(),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// The single entry matching `trace`.
    pub fn lookup(&self, trace: &str) -> Result<&ManifestEntry, DatasetError> {
        let hits: Vec<&ManifestEntry> = self
            .entries
            .iter()
            .filter(|e| glob::Pattern::new(&e.pattern).is_ok_and(|p| p.matches(trace)))
            .collect();
        match hits.as_slice() {
            [one] => Ok(one),
            [] => Err(DatasetError::UnmatchedTrace(vec![trace.to_string()])),
            many => Err(DatasetError::AmbiguousTrace {
                trace: trace.to_string(),
                patterns: many.iter().map(|e| e.pattern.clone()).collect(),
            }),
        }
    }
}

/// Attaches labels by trace name. Fails listing every unmatched trace.
pub fn assign_labels(records: &mut [FlowRecord], manifest: &LabelManifest) -> Result<(), DatasetError> {
    manifest.validate()?;
    let mut cache: HashMap<String, Labels> = HashMap::new();
    let mut unmatched = BTreeSet::new();
    for r in records.iter() {
        if cache.contains_key(&r.trace) || unmatched.contains(&r.trace) {
            continue;
        }
        match manifest.lookup(&r.trace) {
            Ok(e) => {
                let l = Labels { dataset: e.dataset.clone(), top: e.top.clone(), mid: e.mid.clone(), fine: e.fine.clone() };
                cache.insert(r.trace.clone(), l);
            }
            Err(DatasetError::UnmatchedTrace(_)) => {
                unmatched.insert(r.trace.clone());
            }
            Err(e) => return Err(e),
        }
    }
    if !unmatched.is_empty() {
        return Err(DatasetError::UnmatchedTrace(unmatched.into_iter().collect()));
    }
    for r in records.iter_mut() {
        r.labels = Some(cache[&r.trace].clone());
    }
    Ok(())
}

// ---- splitting ----

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub test_std: Vec<u64>,
    pub test_challenge: Vec<u64>,
}

impl DatasetSplit {
    /// Checks disjointness and that the parts cover exactly `ids`.
    pub fn is_partition_of(&self, ids: &[u64]) -> bool {
        let mut all: Vec<u64> = self.train.iter().chain(&self.test_std).chain(&self.test_challenge).copied().collect();
        all.sort_unstable();
        let n = all.len();
        all.dedup();
        let mut want = ids.to_vec();
        want.sort_unstable();
        all.len() == n && all == want
    }
}

/// Smallest stratum that is split; smaller ones go wholly to train.
pub const MIN_STRATUM: usize = 10;

/// Largest-remainder apportionment of `n` items to `ratio`. Ties in the
/// remainder go to the earlier part.
pub fn apportion(n: usize, ratio: [u32; 3]) -> [usize; 3] {
    let total: u64 = ratio.iter().map(|&r| r as u64).sum();
    let mut sizes = [0usize; 3];
    let mut rems = [(0u64, 0usize); 3];
    for i in 0..3 {
        let num = n as u64 * ratio[i] as u64;
        sizes[i] = (num / total) as usize;
        rems[i] = (num % total, i);
    }
    let mut left = n - sizes.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &rems {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Stratified split by mid label. Each stratum is shuffled with a seeded
/// generator (strata visited in label order) and cut proportionally.
/// Returns the split and a warning per stratum kept whole in train.
pub fn split_dataset(
    records: &[FlowRecord],
    ratio: [u32; 3],
    seed: u64,
) -> Result<(DatasetSplit, Vec<String>), DatasetError> {
    if ratio.contains(&0) {
        return Err(DatasetError::BadRatio);
    }
    let mut strata: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for r in records {
        let l = r.labels.as_ref().ok_or(DatasetError::MissingLabel(r.id))?;
        strata.entry(l.mid.as_str()).or_default().push(r.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit::default();
    let mut warnings = Vec::new();
    for (label, mut ids) in strata {
        ids.sort_unstable();
        if ids.len() < MIN_STRATUM {
            warnings.push(format!("class {label:?} has {} records; all kept in train", ids.len()));
            split.train.extend(ids);
            continue;
        }
        ids.shuffle(&mut rng);
        let [a, b, _] = apportion(ids.len(), ratio);
        split.train.extend_from_slice(&ids[..a]);
        split.test_std.extend_from_slice(&ids[a..a + b]);
        split.test_challenge.extend_from_slice(&ids[a + b..]);
    }
    split.train.sort_unstable();
    split.test_std.sort_unstable();
    split.test_challenge.sort_unstable();
    Ok((split, warnings))
}

/// Counts per label at `level`, in ascending label order.
pub fn class_stats(records: &[FlowRecord], level: Level) -> Result<Vec<(String, u64)>, DatasetError> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for r in records {
        if let Some(l) = r.labels.as_ref().and_then(|l| level.of(l)) {
            *counts.entry(l).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(DatasetError::NoLabelsAtLevel(level.as_str().into()));
    }
    Ok(counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// Two aligned columns plus a total line.
pub fn format_stats(level: Level, rows: &[(String, u64)]) -> String {
    let total: u64 = rows.iter().map(|r| r.1).sum();
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(level.as_str().len()).max(5);
    let cw = rows.iter().map(|r| r.1.to_string().len()).max().unwrap_or(0).max(total.to_string().len()).max(5);
    let mut s = String::new();
    writeln!(s, "{:<w$}  {:>cw$}", level.as_str(), "flows").unwrap();
    for (label, n) in rows {
        writeln!(s, "{label:<w$}  {n:>cw$}").unwrap();
    }
    writeln!(s, "{:<w$}  {total:>cw$}", "total").unwrap();
    s
}

// ---- full preparation ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WithheldLabel {
    pub id: u64,
    pub labels: Labels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// Labeled.
    pub train: Vec<FlowRecord>,
    /// Labels stripped; see `withheld`.
    pub test_std: Vec<FlowRecord>,
    pub test_challenge: Vec<FlowRecord>,
    pub withheld_std: Vec<WithheldLabel>,
    pub withheld_challenge: Vec<WithheldLabel>,
    pub split: DatasetSplit,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PrepareConfig {
    pub salt: Vec<u8>,
    pub seed: u64,
    pub ratio: [u32; 3],
}

/// Label, mask, drop absolute timestamps, shuffle, renumber and split.
pub fn prepare(mut records: Vec<FlowRecord>, manifest: &LabelManifest, cfg: &PrepareConfig) -> Result<Prepared, DatasetError> {
    assign_labels(&mut records, manifest)?;
    let masker = Masker::new(&cfg.salt)?;
    for r in records.iter_mut() {
        mask_record(r, &masker);
        r.time_start = None;
        r.time_end = None;
        r.trace.clear();
    }
    // canonical order first so the result does not depend on input order
    records.sort_by(|a, b| a.id.cmp(&b.id).then_with(|| a.sa.cmp(&b.sa)).then_with(|| a.da.cmp(&b.da)));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    records.shuffle(&mut rng);
    for (i, r) in records.iter_mut().enumerate() {
        r.id = i as u64;
    }
    let (split, warnings) = split_dataset(&records, cfg.ratio, cfg.seed)?;
    let ids: Vec<u64> = records.iter().map(|r| r.id).collect();
    assert!(split.is_partition_of(&ids), "split is not a partition");

    let mut part = vec![0u8; records.len()];
    for &i in &split.test_std {
        part[i as usize] = 1;
    }
    for &i in &split.test_challenge {
        part[i as usize] = 2;
    }
    let mut out = Prepared {
        train: Vec::new(),
        test_std: Vec::new(),
        test_challenge: Vec::new(),
        withheld_std: Vec::new(),
        withheld_challenge: Vec::new(),
        split,
        warnings,
    };
    for mut r in records {
        match part[r.id as usize] {
            0 => out.train.push(r),
            p => {
                let labels = r.labels.take().expect("labeled above");
                let w = WithheldLabel { id: r.id, labels };
                if p == 1 {
                    out.withheld_std.push(w);
                    out.test_std.push(r);
                } else {
                    out.withheld_challenge.push(w);
                    out.test_challenge.push(r);
                }
            }
        }
    }
    Ok(out)
}

/// Re-attaches withheld labels by id.
pub fn attach_labels(records: &mut [FlowRecord], withheld: &[WithheldLabel]) -> usize {
    let map: HashMap<u64, &Labels> = withheld.iter().map(|w| (w.id, &w.labels)).collect();
    let mut n = 0;
    for r in records {
        if let Some(l) = map.get(&r.id) {
            r.labels = Some((*l).clone());
            n += 1;
        }
    }
    n
}
