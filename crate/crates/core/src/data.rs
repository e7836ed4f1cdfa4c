//! Flow-record ingestion, task formulation and the synthetic drifting stream.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::{par, rng_from_seed, SoulRng};

pub const CACHE_MAGIC: &[u8; 8] = b"SOULDS\0\0";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Cicids2017,
    Cicids2018,
    Ctu13,
    Unswnb15,
    Generic,
}

impl Schema {
    pub const ALL: [Schema; 5] = [
        Schema::Cicids2017,
        Schema::Cicids2018,
        Schema::Ctu13,
        Schema::Unswnb15,
        Schema::Generic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Schema::Cicids2017 => "cicids2017",
            Schema::Cicids2018 => "cicids2018",
            Schema::Ctu13 => "ctu13",
            Schema::Unswnb15 => "unswnb15",
            Schema::Generic => "generic",
        }
    }

    /// Feature count after preprocessing, where the dataset fixes one.
    pub fn expected_width(self) -> Option<usize> {
        match self {
            Schema::Cicids2017 | Schema::Cicids2018 => Some(84),
            Schema::Ctu13 => Some(39),
            Schema::Unswnb15 => Some(202),
            Schema::Generic => None,
        }
    }

    /// Normalized (lowercase alphanumeric) names of identifier columns.
    fn id_columns(self) -> &'static [&'static str] {
        match self {
            Schema::Cicids2017 | Schema::Cicids2018 => &[
                "id",
                "flowid",
                "srcip",
                "sourceip",
                "srcport",
                "sourceport",
                "dstip",
                "destinationip",
                "dstport",
                "destinationport",
                "timestamp",
                "attemptedcategory",
            ],
            Schema::Ctu13 => &[
                "id",
                "flowid",
                "srcaddr",
                "dstaddr",
                "srcip",
                "dstip",
                "sport",
                "dport",
                "srcport",
                "dstport",
                "starttime",
                "timestamp",
            ],
            Schema::Unswnb15 => &["id", "srcip", "sport", "dstip", "dsport", "stime", "ltime"],
            Schema::Generic => &[],
        }
    }

    fn categorical_columns(self) -> &'static [&'static str] {
        match self {
            Schema::Unswnb15 => &["proto", "state", "service"],
            _ => &[],
        }
    }

    fn default_group_column(self) -> &'static str {
        match self {
            Schema::Unswnb15 => "attackcat",
            _ => "task",
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = normalize(s);
        Schema::ALL
            .into_iter()
            .find(|sc| normalize(sc.name()) == key)
            .ok_or_else(|| Error::Schema(format!("unknown schema '{s}'")))
    }
}

fn normalize(name: &str) -> String {
    name.chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub features: Vec<f64>,
    pub true_label: u8,
    pub visible_label: Option<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub files: usize,
    pub rows_read: usize,
    pub duplicates_removed: usize,
    pub missing_replaced: usize,
    pub attempted_relabeled: usize,
}

/// Preprocessed records plus the task-group each one belongs to. A `None`
/// group marks rows shared out across all groups at split time (UNSW benign).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTable {
    pub schema: Schema,
    pub feature_names: Vec<String>,
    pub records: Vec<FlowRecord>,
    pub groups: Vec<Option<usize>>,
    pub group_names: Vec<String>,
    pub stats: PreprocessStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub count: usize,
    pub attack: usize,
    pub cir: f64,
}

impl FlowTable {
    pub fn width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-group counts; shared rows are reported under an empty name.
    pub fn group_summaries(&self) -> Vec<GroupSummary> {
        let mut counts = vec![(0usize, 0usize); self.group_names.len() + 1];
        for (r, g) in self.records.iter().zip(&self.groups) {
            let slot = g.map_or(self.group_names.len(), |g| g);
            counts[slot].0 += 1;
            counts[slot].1 += r.true_label as usize;
        }
        let mut names = self.group_names.clone();
        names.push(String::new());
        names
            .into_iter()
            .zip(counts)
            .filter(|(n, (c, _))| !n.is_empty() || *c > 0)
            .map(|(name, (count, attack))| GroupSummary {
                name,
                count,
                attack,
                cir: cir(attack, count),
            })
            .collect()
    }

    /// Write as a generic-schema CSV: features, `label`, `task`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = self.feature_names.clone();
        header.push("label".into());
        header.push("task".into());
        w.write_record(&header).map_err(csv_err)?;
        for (r, g) in self.records.iter().zip(&self.groups) {
            let mut row: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
            row.push(r.true_label.to_string());
            row.push(g.map(|g| self.group_names[g].clone()).unwrap_or_default());
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Versioned little-endian binary cache. Returns the SHA-256 of the bytes.
    pub fn write_cache(&self, path: &Path) -> Result<String> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&CacheMeta {
            schema: self.schema,
            feature_names: self.feature_names.clone(),
            group_names: self.group_names.clone(),
            stats: self.stats.clone(),
        })?;
        put_u64(&mut buf, meta.len() as u64);
        buf.extend_from_slice(&meta);
        put_u64(&mut buf, self.records.len() as u64);
        put_u64(&mut buf, self.width() as u64);
        for j in 0..self.width() {
            for r in &self.records {
                buf.extend_from_slice(&r.features[j].to_le_bytes());
            }
        }
        buf.extend(self.records.iter().map(|r| r.true_label));
        for g in &self.groups {
            let v = g.map_or(u32::MAX, |g| g as u32);
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&buf)))
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut rd = ByteReader::new(&bytes, path);
        if rd.take(8)? != CACHE_MAGIC {
            return Err(rd.fail("not a dataset cache"));
        }
        let version = u32::from_le_bytes(rd.take(4)?.try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(rd.fail(&format!("unsupported cache version {version}")));
        }
        let meta_len = rd.u64()? as usize;
        let meta: CacheMeta = serde_json::from_slice(rd.take(meta_len)?)?;
        let n = rd.u64()? as usize;
        let d = rd.u64()? as usize;
        if d != meta.feature_names.len() {
            return Err(rd.fail("width disagrees with feature names"));
        }
        let mut features = vec![vec![0.0; d]; n];
        for j in 0..d {
            for row in features.iter_mut() {
                row[j] = rd.f64()?;
            }
        }
        let labels = rd.take(n)?.to_vec();
        let mut groups = Vec::with_capacity(n);
        for _ in 0..n {
            let v = u32::from_le_bytes(rd.take(4)?.try_into().unwrap());
            groups.push(if v == u32::MAX {
                None
            } else {
                Some(v as usize)
            });
        }
        if !rd.done() {
            return Err(rd.fail("trailing bytes"));
        }
        let records = features
            .into_iter()
            .zip(labels)
            .map(|(features, true_label)| FlowRecord {
                features,
                true_label,
                visible_label: None,
            })
            .collect();
        Ok(FlowTable {
            schema: meta.schema,
            feature_names: meta.feature_names,
            records,
            groups,
            group_names: meta.group_names,
            stats: meta.stats,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    schema: Schema,
    feature_names: Vec<String>,
    group_names: Vec<String>,
    stats: PreprocessStats,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader {
            bytes,
            pos: 0,
            path,
        }
    }

    pub(crate) fn fail(&self, reason: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: format!("{reason} (offset {})", self.pos),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Summary written next to a dataset cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub schema: Schema,
    pub files: Vec<PathBuf>,
    pub width: usize,
    pub expected_width: Option<usize>,
    pub stats: PreprocessStats,
    pub groups: Vec<GroupSummary>,
    pub cache_sha256: String,
}

impl DatasetManifest {
    pub fn new(table: &FlowTable, files: &[PathBuf], cache_sha256: String) -> Self {
        DatasetManifest {
            version: CACHE_VERSION,
            schema: table.schema,
            files: files.to_vec(),
            width: table.width(),
            expected_width: table.schema.expected_width(),
            stats: table.stats.clone(),
            groups: table.group_summaries(),
            cache_sha256,
        }
    }
}

pub fn cir(attack: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        attack as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    /// Label column (matched case- and punctuation-insensitively).
    pub label_column: String,
    /// Column holding the task key; defaults per schema (`task`, UNSW `attack_cat`).
    pub group_column: Option<String>,
    /// Fail instead of warning when the width differs from the schema's.
    pub strict_width: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            label_column: "label".into(),
            group_column: None,
            strict_width: false,
        }
    }
}

pub fn preprocess_csv(files: &[PathBuf], schema: Schema) -> Result<FlowTable> {
    preprocess_csv_with(files, schema, &PreprocessOptions::default())
}

enum Cell {
    Num(Vec<f64>),
    Cat(Vec<String>),
}

struct FileTable {
    names: Vec<String>,
    columns: Vec<Cell>,
    labels: Vec<u8>,
    group_keys: Option<Vec<String>>,
    stats: PreprocessStats,
}

/// Per file: drop identifier columns, drop exact duplicate rows, replace
/// missing / infinite numbers with that file's column mean. Then one-hot the
/// categorical columns, min-max every column over all files (constant columns
/// become 0) and assign task groups.
pub fn preprocess_csv_with(
    files: &[PathBuf],
    schema: Schema,
    opts: &PreprocessOptions,
) -> Result<FlowTable> {
    if files.is_empty() {
        return Err(Error::EmptyInput("no input files".into()));
    }
    let parsed = par::map_coarse(files.len(), |i| read_file(&files[i], schema, opts));
    let parsed: Vec<FileTable> = parsed.into_iter().collect::<Result<_>>()?;

    let names = parsed[0].names.clone();
    for (f, p) in files.iter().zip(&parsed).skip(1) {
        if p.names != names {
            return Err(Error::Schema(format!(
                "{}: columns differ from {}",
                f.display(),
                files[0].display()
            )));
        }
    }

    let mut stats = PreprocessStats::default();
    for p in &parsed {
        stats.files += 1;
        stats.rows_read += p.stats.rows_read;
        stats.duplicates_removed += p.stats.duplicates_removed;
        stats.missing_replaced += p.stats.missing_replaced;
        stats.attempted_relabeled += p.stats.attempted_relabeled;
    }
    let n: usize = parsed.iter().map(|p| p.labels.len()).sum();

    // Expand to final feature columns.
    let mut feature_names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (j, name) in names.iter().enumerate() {
        match &parsed[0].columns[j] {
            Cell::Num(_) => {
                let mut col = Vec::with_capacity(n);
                for p in &parsed {
                    if let Cell::Num(v) = &p.columns[j] {
                        col.extend_from_slice(v);
                    }
                }
                feature_names.push(name.clone());
                columns.push(col);
            }
            Cell::Cat(_) => {
                let mut vocab: Vec<&str> = parsed
                    .iter()
                    .filter_map(|p| match &p.columns[j] {
                        Cell::Cat(v) => Some(v.iter().map(String::as_str)),
                        Cell::Num(_) => None,
                    })
                    .flatten()
                    .collect::<HashSet<_>>()
                    .into_iter()
                    .collect();
                vocab.sort_unstable();
                let index: HashMap<&str, usize> =
                    vocab.iter().enumerate().map(|(i, v)| (*v, i)).collect();
                let mut onehot = vec![vec![0.0; n]; vocab.len()];
                let mut row = 0;
                for p in &parsed {
                    if let Cell::Cat(v) = &p.columns[j] {
                        for s in v {
                            onehot[index[s.as_str()]][row] = 1.0;
                            row += 1;
                        }
                    }
                }
                feature_names.extend(vocab.iter().map(|v| format!("{name}={v}")));
                columns.extend(onehot);
            }
        }
    }

    for col in &mut columns {
        min_max(col);
    }

    let labels: Vec<u8> = parsed
        .iter()
        .flat_map(|p| p.labels.iter().copied())
        .collect();
    let (groups, group_names) = assign_groups(&parsed, schema);

    let records = (0..n)
        .map(|i| FlowRecord {
            features: columns.iter().map(|c| c[i]).collect(),
            true_label: labels[i],
            visible_label: None,
        })
        .collect();

    let table = FlowTable {
        schema,
        feature_names,
        records,
        groups,
        group_names,
        stats,
    };
    if let Some(w) = schema.expected_width() {
        if w != table.width() {
            let msg = format!(
                "{schema}: {} features after preprocessing, schema expects {w}",
                table.width()
            );
            if opts.strict_width {
                return Err(Error::Schema(msg));
            }
            log::warn!("{msg}");
        }
    }
    Ok(table)
}

fn min_max(col: &mut [f64]) {
    let (lo, hi) = col
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if !(range > 0.0) {
        col.iter_mut().for_each(|v| *v = 0.0);
    } else {
        col.iter_mut()
            .for_each(|v| *v = ((*v - lo) / range).clamp(0.0, 1.0));
    }
}

fn assign_groups(parsed: &[FileTable], schema: Schema) -> (Vec<Option<usize>>, Vec<String>) {
    let has_keys = parsed.iter().all(|p| p.group_keys.is_some());
    if !has_keys {
        let mut groups = Vec::new();
        for (i, p) in parsed.iter().enumerate() {
            groups.extend(std::iter::repeat_n(Some(i), p.labels.len()));
        }
        let names = (0..parsed.len())
            .map(|i| format!("file{}", i + 1))
            .collect();
        return (groups, names);
    }
    let shared_benign = schema == Schema::Unswnb15;
    let mut order: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for p in parsed {
        for (k, &l) in p.group_keys.as_ref().unwrap().iter().zip(&p.labels) {
            if shared_benign && l == 0 {
                continue;
            }
            if seen.insert(k.clone()) {
                order.push(k.clone());
            }
        }
    }
    if !shared_benign && order.iter().all(|k| k.parse::<i64>().is_ok()) {
        order.sort_by_key(|k| k.parse::<i64>().unwrap());
    }
    let index: HashMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i))
        .collect();
    let groups = parsed
        .iter()
        .flat_map(|p| {
            p.group_keys
                .as_ref()
                .unwrap()
                .iter()
                .zip(&p.labels)
                .map(|(k, &l)| {
                    if shared_benign && l == 0 {
                        None
                    } else {
                        Some(index[k.as_str()])
                    }
                })
        })
        .collect();
    (groups, order)
}

fn parse_number(s: &str) -> Option<f64> {
    let t = s.trim();
    match t.to_ascii_lowercase().as_str() {
        "" | "nan" | "na" | "null" | "inf" | "+inf" | "-inf" | "infinity" | "+infinity"
        | "-infinity" => Some(f64::NAN),
        _ => t.parse::<f64>().ok(),
    }
}

/// `(label, relabeled_attempted)`.
fn parse_label(s: &str) -> (u8, bool) {
    let t = s.trim().to_ascii_lowercase();
    if t.ends_with("attempted") {
        return (0, true);
    }
    if matches!(
        t.as_str(),
        "benign" | "normal" | "background" | "legitimate" | "0" | "0.0"
    ) {
        return (0, false);
    }
    match t.parse::<f64>() {
        Ok(v) => ((v != 0.0) as u8, false),
        Err(_) => (1, false),
    }
}

fn read_file(path: &Path, schema: Schema, opts: &PreprocessOptions) -> Result<FileTable> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(csv_err)?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let norm_headers: Vec<String> = headers.iter().map(|h| normalize(h)).collect();

    let label_key = normalize(&opts.label_column);
    let label_idx = norm_headers
        .iter()
        .position(|h| *h == label_key)
        .ok_or_else(|| {
            Error::Schema(format!(
                "{}: missing label column '{}'",
                path.display(),
                opts.label_column
            ))
        })?;
    let group_key = normalize(
        opts.group_column
            .as_deref()
            .unwrap_or(schema.default_group_column()),
    );
    let group_idx = norm_headers.iter().position(|h| *h == group_key);
    let ids = schema.id_columns();
    let cats = schema.categorical_columns();

    // (source index, name, categorical)
    let kept: Vec<(usize, String, bool)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx && Some(*i) != group_idx)
        .filter(|(i, _)| !ids.contains(&norm_headers[*i].as_str()))
        .map(|(i, h)| (i, h.clone(), cats.contains(&norm_headers[i].as_str())))
        .collect();

    let mut stats = PreprocessStats::default();
    let mut seen_rows: HashSet<Vec<String>> = HashSet::new();
    let mut nums: Vec<Vec<f64>> = vec![Vec::new(); kept.len()];
    let mut strs: Vec<Vec<String>> = vec![Vec::new(); kept.len()];
    let mut labels = Vec::new();
    let mut group_keys = group_idx.map(|_| Vec::new());

    for (row_no, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        stats.rows_read += 1;
        let key: Vec<String> = kept
            .iter()
            .map(|(i, _, _)| rec[*i].trim().to_string())
            .chain(std::iter::once(rec[label_idx].trim().to_string()))
            .chain(group_idx.map(|g| rec[g].trim().to_string()))
            .collect();
        if !seen_rows.insert(key) {
            stats.duplicates_removed += 1;
            continue;
        }
        for (c, (i, name, categorical)) in kept.iter().enumerate() {
            let cell = &rec[*i];
            if *categorical {
                strs[c].push(cell.trim().to_string());
            } else {
                let v = parse_number(cell).ok_or_else(|| {
                    Error::Schema(format!(
                        "{}: row {}, column '{name}': non-numeric value '{cell}'",
                        path.display(),
                        row_no + 2
                    ))
                })?;
                nums[c].push(v);
            }
        }
        let (label, attempted) = parse_label(&rec[label_idx]);
        stats.attempted_relabeled += attempted as usize;
        labels.push(label);
        if let (Some(keys), Some(g)) = (group_keys.as_mut(), group_idx) {
            keys.push(rec[g].trim().to_string());
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{}: no data rows",
            path.display()
        )));
    }

    let columns = kept
        .iter()
        .enumerate()
        .map(|(c, (_, _, categorical))| {
            if *categorical {
                Cell::Cat(std::mem::take(&mut strs[c]))
            } else {
                let mut col = std::mem::take(&mut nums[c]);
                let finite: Vec<f64> = col.iter().copied().filter(|v| v.is_finite()).collect();
                let mean = if finite.is_empty() {
                    0.0
                } else {
                    finite.iter().sum::<f64>() / finite.len() as f64
                };
                for v in col.iter_mut().filter(|v| !v.is_finite()) {
                    *v = mean;
                    stats.missing_replaced += 1;
                }
                Cell::Num(col)
            }
        })
        .collect();

    Ok(FileTable {
        names: kept.into_iter().map(|(_, n, _)| n).collect(),
        columns,
        labels,
        group_keys,
        stats,
    })
}

/// Features with their true labels. For unlabeled pools the labels are hidden
/// ground truth, read only by the simulated analyst and by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<u8>,
}

impl LabeledSet {
    pub fn empty(width: usize) -> Self {
        LabeledSet {
            features: Matrix::zeros(0, width),
            labels: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[&[f64]], labels: Vec<u8>, width: usize) -> Result<Self> {
        let features = if rows.is_empty() {
            Matrix::zeros(0, width)
        } else {
            Matrix::from_rows(rows)?
        };
        Ok(LabeledSet { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn attack_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(&self, other: &LabeledSet) -> Result<LabeledSet> {
        if self.features.cols() != other.features.cols() {
            return Err(Error::dims(
                format!("{} features", self.features.cols()),
                other.features.cols(),
            ));
        }
        let mut data = self.features.as_slice().to_vec();
        data.extend_from_slice(other.features.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(LabeledSet {
            features: Matrix::new(labels.len(), self.features.cols(), data)?,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    /// 1-based position in the stream.
    pub task_id: usize,
    pub name: String,
    pub labeled: LabeledSet,
    pub unlabeled: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
    /// Attack fraction over the whole task (all splits).
    pub cir: f64,
}

impl TaskDataset {
    pub fn width(&self) -> usize {
        self.test.features.cols()
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.val.len() + self.test.len()
    }

    /// Size of the training pool (labeled + unlabeled).
    pub fn train_size(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    /// Training records with the visible label set where it is known.
    pub fn train_records(&self) -> Vec<FlowRecord> {
        let lab = (0..self.labeled.len()).map(|i| FlowRecord {
            features: self.labeled.features.row(i).to_vec(),
            true_label: self.labeled.labels[i],
            visible_label: Some(self.labeled.labels[i]),
        });
        let unl = (0..self.unlabeled.len()).map(|i| FlowRecord {
            features: self.unlabeled.features.row(i).to_vec(),
            true_label: self.unlabeled.labels[i],
            visible_label: None,
        });
        lab.chain(unl).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskDataset>,
    pub seen_count: usize,
    pub feature_names: Vec<String>,
}

impl TaskStream {
    pub fn width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn is_seen(&self, task_id: usize) -> bool {
        task_id <= self.seen_count
    }

    pub fn seen(&self) -> &[TaskDataset] {
        &self.tasks[..self.seen_count]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.71,
            val: 0.04,
            test: 0.25,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.train, self.val, self.test]
            .iter()
            .all(|f| (0.0..=1.0).contains(f))
            && self.train > 0.0
            && ((self.train + self.val + self.test) - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "split fractions {self:?} must be in [0,1] and sum to 1"
            )))
        }
    }
}

/// Group records into tasks, split each task per class into train / val /
/// test, and mark an `ratio` fraction (per class) of each seen task's training
/// part as visible. Shared rows (UNSW benign) are dealt round-robin across the
/// tasks after a seeded shuffle.
pub fn split_tasks(
    table: &FlowTable,
    seen_count: usize,
    ratio: f64,
    seed: u64,
    fractions: SplitFractions,
) -> Result<TaskStream> {
    fractions.validate()?;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "labeled ratio {ratio} outside (0, 1)"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); table.group_names.len()];
    let mut shared = Vec::new();
    for (i, g) in table.groups.iter().enumerate() {
        match g {
            Some(g) => members[*g].push(i),
            None => shared.push(i),
        }
    }
    let nonempty: Vec<usize> = (0..members.len())
        .filter(|&g| !members[g].is_empty())
        .collect();
    if nonempty.len() < 2 {
        return Err(Error::Task(format!(
            "{} task(s) derivable, need at least 2",
            nonempty.len()
        )));
    }
    if !shared.is_empty() {
        shared.shuffle(&mut rng);
        for (k, i) in shared.into_iter().enumerate() {
            members[nonempty[k % nonempty.len()]].push(i);
        }
        for m in &mut members {
            m.sort_unstable();
        }
    }
    let task_count = nonempty.len();
    if seen_count == 0 || seen_count > task_count {
        return Err(Error::Task(format!(
            "seen count {seen_count} must be in [1, {}]",
            task_count
        )));
    }
    let width = table.width();
    let mut tasks = Vec::with_capacity(task_count);
    for (pos, &g) in nonempty.iter().enumerate() {
        let task_id = pos + 1;
        let idx = &members[g];
        let seen = task_id <= seen_count;
        let mut parts: [Vec<usize>; 4] = Default::default(); // labeled, unlabeled, val, test
        for class in 0..2u8 {
            let mut cls: Vec<usize> = idx
                .iter()
                .copied()
                .filter(|&i| table.records[i].true_label == class)
                .collect();
            cls.shuffle(&mut rng);
            let n = cls.len();
            let n_test = (fractions.test * n as f64).round() as usize;
            let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_test);
            let n_train = n - n_test - n_val;
            let n_vis = if seen {
                (ratio * n_train as f64).round() as usize
            } else {
                0
            };
            parts[0].extend_from_slice(&cls[..n_vis]);
            parts[1].extend_from_slice(&cls[n_vis..n_train]);
            parts[2].extend_from_slice(&cls[n_train..n_train + n_val]);
            parts[3].extend_from_slice(&cls[n_train + n_val..]);
        }
        let make = |ix: &mut Vec<usize>| -> Result<LabeledSet> {
            ix.sort_unstable();
            let rows: Vec<&[f64]> = ix
                .iter()
                .map(|&i| table.records[i].features.as_slice())
                .collect();
            let labels = ix.iter().map(|&i| table.records[i].true_label).collect();
            LabeledSet::from_rows(&rows, labels, width)
        };
        let attack = idx
            .iter()
            .filter(|&&i| table.records[i].true_label == 1)
            .count();
        let [l, u, v, t] = &mut parts;
        tasks.push(TaskDataset {
            task_id,
            name: table.group_names[g].clone(),
            labeled: make(l)?,
            unlabeled: make(u)?,
            val: make(v)?,
            test: make(t)?,
            cir: cir(attack, idx.len()),
        });
    }
    Ok(TaskStream {
        tasks,
        seen_count,
        feature_names: table.feature_names.clone(),
    })
}

/// Drifting two-cluster stream. Benign and attack clusters sit at
/// `0.5 -/+ (separation / 2) * u_t`, where `u_t` lies in the plane of the
/// first two features at `base_angle_deg` for task 1 and turns by
/// `drift_angle_deg` per task. The default base of -45 degrees puts the two
/// clusters on the anti-diagonal, where their cosine distance is largest.
/// With `orthogonal_tasks`, task `t` lives in its own feature plane
/// `(2p, 2p + 1)`, `p = (t - 1) mod (dims / 2)`, and every other feature is
/// exactly 0, so tasks occupy orthogonal input subspaces. Remaining
/// features are centered at 0.5. Tasks listed in `novel_tasks` move their
/// attack cluster to `novel_center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub samples_per_task: usize,
    pub dims: usize,
    /// One value per task, or a single value for all tasks.
    pub cir_per_task: Vec<f64>,
    pub drift_angle_deg: f64,
    pub base_angle_deg: f64,
    pub separation: f64,
    pub noise: f64,
    pub novel_tasks: Vec<usize>,
    /// Defaults to 0.1 on the first two features and 0.9 elsewhere.
    pub novel_center: Option<Vec<f64>>,
    pub orthogonal_tasks: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            tasks: 4,
            samples_per_task: 2000,
            dims: 4,
            cir_per_task: vec![0.1],
            drift_angle_deg: 20.0,
            base_angle_deg: -45.0,
            separation: 0.6,
            noise: 0.05,
            novel_tasks: Vec::new(),
            novel_center: None,
            orthogonal_tasks: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.tasks < 2 {
            return fail(format!("need at least 2 tasks, got {}", self.tasks));
        }
        if self.dims < 2 {
            return fail(format!("dims must be >= 2, got {}", self.dims));
        }
        if self.samples_per_task < 2 {
            return fail("samples_per_task must be >= 2".into());
        }
        if self.cir_per_task.len() != 1 && self.cir_per_task.len() != self.tasks {
            return fail(format!(
                "cir_per_task has {} values for {} tasks",
                self.cir_per_task.len(),
                self.tasks
            ));
        }
        if let Some(c) = self
            .cir_per_task
            .iter()
            .find(|c| !(**c > 0.0 && **c <= 0.5))
        {
            return fail(format!("cir {c} outside (0, 0.5]"));
        }
        if !(self.noise >= 0.0)
            || !self.separation.is_finite()
            || !self.drift_angle_deg.is_finite()
            || !self.base_angle_deg.is_finite()
        {
            return fail("noise, separation and drift angle must be finite, noise >= 0".into());
        }
        if let Some(t) = self.novel_tasks.iter().find(|&&t| t == 0 || t > self.tasks) {
            return fail(format!("novel task {t} outside 1..={}", self.tasks));
        }
        if self.orthogonal_tasks && self.dims < 4 {
            return fail(format!(
                "orthogonal tasks need dims >= 4, got {}",
                self.dims
            ));
        }
        match &self.novel_center {
            Some(c) if c.len() != self.dims => {
                return fail(format!(
                    "novel_center has {} values for {} dims",
                    c.len(),
                    self.dims
                ))
            }
            None if !self.novel_tasks.is_empty() && self.dims < 3 => {
                return fail("default novel center needs dims >= 3".into())
            }
            _ => {}
        }
        Ok(())
    }

    pub fn cir(&self, task_id: usize) -> f64 {
        if self.cir_per_task.len() == 1 {
            self.cir_per_task[0]
        } else {
            self.cir_per_task[task_id - 1]
        }
    }

    /// Feature plane index of a task when tasks are orthogonal.
    pub fn plane(&self, task_id: usize) -> Option<usize> {
        self.orthogonal_tasks
            .then(|| (task_id - 1) % (self.dims / 2))
    }

    /// `(benign_center, attack_center)` of a task.
    pub fn centers(&self, task_id: usize) -> (Vec<f64>, Vec<f64>) {
        let theta =
            (self.base_angle_deg + self.drift_angle_deg * (task_id - 1) as f64).to_radians();
        let half = self.separation / 2.0;
        let (i, j, rest) = match self.plane(task_id) {
            Some(p) => (2 * p, 2 * p + 1, 0.0),
            None => (0, 1, 0.5),
        };
        let mut benign = vec![rest; self.dims];
        let mut attack = vec![rest; self.dims];
        benign[i] = 0.5 - half * theta.cos();
        benign[j] = 0.5 - half * theta.sin();
        attack[i] = 0.5 + half * theta.cos();
        attack[j] = 0.5 + half * theta.sin();
        if self.novel_tasks.contains(&task_id) {
            attack = self.novel_center.clone().unwrap_or_else(|| {
                (0..self.dims)
                    .map(|j| if j < 2 { 0.1 } else { 0.9 })
                    .collect()
            });
        }
        (benign, attack)
    }
}

pub fn generate_synthetic_table(spec: &SyntheticSpec) -> Result<FlowTable> {
    spec.validate()?;
    let mut rng: SoulRng = rng_from_seed(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Spec(e.to_string()))?;
    let mut records = Vec::with_capacity(spec.tasks * spec.samples_per_task);
    let mut groups = Vec::with_capacity(records.capacity());
    for t in 1..=spec.tasks {
        let (benign, attack) = spec.centers(t);
        let n = spec.samples_per_task;
        let n_attack = ((spec.cir(t) * n as f64).round() as usize).clamp(1, n - 1);
        for i in 0..n {
            let label = (i >= n - n_attack) as u8;
            let center = if label == 1 { &attack } else { &benign };
            let plane = spec.plane(t);
            let novel = label == 1 && spec.novel_tasks.contains(&t);
            let features = center
                .iter()
                .enumerate()
                .map(|(j, c)| match plane {
                    Some(p) if !novel && j / 2 != p => 0.0,
                    _ => (c + noise.sample(&mut rng)).clamp(0.0, 1.0),
                })
                .collect();
            records.push(FlowRecord {
                features,
                true_label: label,
                visible_label: None,
            });
            groups.push(Some(t - 1));
        }
    }
    Ok(FlowTable {
        schema: Schema::Generic,
        feature_names: (0..spec.dims).map(|j| format!("f{j}")).collect(),
        records,
        groups,
        group_names: (1..=spec.tasks).map(|t| t.to_string()).collect(),
        stats: PreprocessStats::default(),
    })
}

pub fn generate_synthetic_stream(
    spec: &SyntheticSpec,
    seen_count: usize,
    ratio: f64,
    fractions: SplitFractions,
) -> Result<TaskStream> {
    let table = generate_synthetic_table(spec)?;
    split_tasks(
        &table,
        seen_count,
        ratio,
        spec.seed.wrapping_add(1),
        fractions,
    )
}

/// Per-task counts for a stream, for manifests and logs.
pub fn stream_summary(stream: &TaskStream) -> Vec<BTreeMap<&'static str, f64>> {
    stream
        .tasks
        .iter()
        .map(|t| {
            BTreeMap::from([
                ("task_id", t.task_id as f64),
                ("labeled", t.labeled.len() as f64),
                ("unlabeled", t.unlabeled.len() as f64),
                ("val", t.val.len() as f64),
                ("test", t.test.len() as f64),
                ("cir", t.cir),
            ])
        })
        .collect()
}

/// Hash of a set of files' bytes, in order.
pub fn hash_files(files: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn nan_mean_then_min_max_by_hand() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(
            dir.path(),
            "a.csv",
            "x,c,Label\n1,7,BENIGN\nNaN,7,DoS\n3,7,BENIGN\n",
        );
        let t = preprocess_csv(&[f], Schema::Generic).unwrap();
        // NaN -> mean(1,3)=2, then min-max over {1,2,3}.
        let x: Vec<f64> = t.records.iter().map(|r| r.features[0]).collect();
        assert_eq!(x, vec![0.0, 0.5, 1.0]);
        assert!(t.records.iter().all(|r| r.features[1] == 0.0));
        assert_eq!(t.stats.missing_replaced, 1);
        let y: Vec<u8> = t.records.iter().map(|r| r.true_label).collect();
        assert_eq!(y, vec![0, 1, 0]);
    }

    #[test]
    fn attempted_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(
            dir.path(),
            "a.csv",
            "Flow ID, Source IP,x, Label\n1,a,0.1,Web Attack - Attempted\n2,b,0.2,DoS\n2,b,0.2,DoS\n",
        );
        let t = preprocess_csv(&[f], Schema::Cicids2017).unwrap();
        assert_eq!(t.feature_names, vec!["x".to_string()]);
        assert_eq!(t.len(), 2);
        assert_eq!(t.records[0].true_label, 0);
        assert_eq!(t.stats.attempted_relabeled, 1);
        assert_eq!(t.stats.duplicates_removed, 1);
    }

    #[test]
    fn schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "a.csv", "x,y\n1,2\n");
        assert!(matches!(
            preprocess_csv(&[f], Schema::Generic),
            Err(Error::Schema(_))
        ));
        let g = write(dir.path(), "b.csv", "x,label\n");
        assert!(matches!(
            preprocess_csv(&[g], Schema::Generic),
            Err(Error::EmptyInput(_))
        ));
        let h = write(dir.path(), "c.csv", "x,label\nabc,0\n");
        let err = preprocess_csv(&[h], Schema::Generic)
            .unwrap_err()
            .to_string();
        assert!(err.contains("column 'x'"), "{err}");
        assert!("CICIDS-2017".parse::<Schema>().unwrap() == Schema::Cicids2017);
    }

    #[test]
    fn unsw_one_hot_and_shared_benign() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(
            dir.path(),
            "u.csv",
            "srcip,sport,proto,dur,attack_cat,label\n\
             a,1,tcp,0.5,,0\nb,2,udp,1.5,Fuzzers,1\nc,3,tcp,2.5,Exploits,1\nd,4,arp,3.5,,0\n",
        );
        let t = preprocess_csv(&[f], Schema::Unswnb15).unwrap();
        assert_eq!(
            t.feature_names,
            vec!["proto=arp", "proto=tcp", "proto=udp", "dur"]
        );
        assert_eq!(t.group_names, vec!["Fuzzers", "Exploits"]);
        assert_eq!(t.groups, vec![None, Some(0), Some(1), None]);
        assert_eq!(t.records[1].features, vec![0.0, 0.0, 1.0, 1.0 / 3.0]);
    }

    #[test]
    fn generic_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(
            dir.path(),
            "a.csv",
            "a,b,label,task\n3,10,0,1\n5,20,1,1\n4,13,0,2\n9,11,1,2\n4,nan,0,2\n",
        );
        let once = preprocess_csv(&[f], Schema::Generic).unwrap();
        let out = dir.path().join("once.csv");
        once.write_csv(&out).unwrap();
        let twice = preprocess_csv(&[out], Schema::Generic).unwrap();
        assert_eq!(once.records, twice.records);
        assert_eq!(once.groups, twice.groups);
        assert_eq!(once.feature_names, twice.feature_names);
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let spec = SyntheticSpec {
            tasks: 3,
            samples_per_task: 50,
            ..SyntheticSpec::default()
        };
        let t = generate_synthetic_table(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let h1 = t.write_cache(&p).unwrap();
        let back = FlowTable::read_cache(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.write_cache(&p).unwrap(), h1);
        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(
            FlowTable::read_cache(&p),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn stratified_visibility() {
        let spec = SyntheticSpec {
            tasks: 2,
            samples_per_task: 1000,
            cir_per_task: vec![0.1],
            ..SyntheticSpec::default()
        };
        let table = generate_synthetic_table(&spec).unwrap();
        let all = SplitFractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        let s = split_tasks(&table, 1, 0.2, 3, all).unwrap();
        let t1 = &s.tasks[0];
        assert_eq!(t1.labeled.attack_count(), 20);
        assert_eq!(t1.labeled.len() - t1.labeled.attack_count(), 180);
        assert!(s.tasks[1].labeled.is_empty());
        assert_eq!(split_tasks(&table, 1, 0.2, 3, all).unwrap(), s);
        let other = split_tasks(&table, 1, 0.2, 4, all).unwrap();
        assert_ne!(other.tasks[0].labeled, t1.labeled);
    }

    #[test]
    fn default_split_conserves_counts_and_cir() {
        let spec = SyntheticSpec {
            tasks: 3,
            samples_per_task: 777,
            cir_per_task: vec![0.02, 0.3, 0.5],
            ..SyntheticSpec::default()
        };
        let s = generate_synthetic_stream(&spec, 2, 0.2, SplitFractions::default()).unwrap();
        assert_eq!(
            s.tasks.iter().map(TaskDataset::total).sum::<usize>(),
            3 * 777
        );
        for t in &s.tasks {
            let attack = t.labeled.attack_count()
                + t.unlabeled.attack_count()
                + t.val.attack_count()
                + t.test.attack_count();
            assert_eq!(t.cir, attack as f64 / t.total() as f64);
            assert!((t.cir - spec.cir(t.task_id)).abs() <= 1.0 / 777.0);
        }
        let vis = s.tasks[0].labeled.len() as f64 / s.tasks[0].train_size() as f64;
        assert!((vis - 0.2).abs() < 0.01);
    }

    #[test]
    fn split_errors() {
        let spec = SyntheticSpec {
            tasks: 2,
            samples_per_task: 20,
            ..SyntheticSpec::default()
        };
        let table = generate_synthetic_table(&spec).unwrap();
        let f = SplitFractions::default();
        assert!(matches!(
            split_tasks(&table, 3, 0.2, 0, f),
            Err(Error::Task(_))
        ));
        assert!(matches!(
            split_tasks(&table, 0, 0.2, 0, f),
            Err(Error::Task(_))
        ));
        assert_eq!(split_tasks(&table, 2, 0.2, 0, f).unwrap().seen_count, 2);
        assert!(matches!(
            split_tasks(&table, 1, 1.0, 0, f),
            Err(Error::Config(_))
        ));
        let mut one = table.clone();
        one.groups.iter_mut().for_each(|g| *g = Some(0));
        assert!(matches!(
            split_tasks(&one, 1, 0.2, 0, f),
            Err(Error::Task(_))
        ));
        let bad = SyntheticSpec {
            cir_per_task: vec![0.7],
            ..SyntheticSpec::default()
        };
        assert!(matches!(
            generate_synthetic_table(&bad),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn zero_drift_tasks_share_centers() {
        let spec = SyntheticSpec {
            drift_angle_deg: 0.0,
            ..SyntheticSpec::default()
        };
        assert_eq!(spec.centers(1), spec.centers(4));
        let turned = SyntheticSpec {
            drift_angle_deg: 90.0,
            base_angle_deg: 0.0,
            ..SyntheticSpec::default()
        };
        let (_, a2) = turned.centers(2);
        assert!((a2[0] - 0.5).abs() < 1e-12 && (a2[1] - 0.8).abs() < 1e-12);
        let (b1, a1) = SyntheticSpec::default().centers(1);
        let h = 0.3 * std::f64::consts::FRAC_1_SQRT_2;
        assert!((a1[0] - (0.5 + h)).abs() < 1e-12 && (a1[1] - (0.5 - h)).abs() < 1e-12);
        assert!((b1[0] - (0.5 - h)).abs() < 1e-12 && (b1[1] - (0.5 + h)).abs() < 1e-12);
    }
}
