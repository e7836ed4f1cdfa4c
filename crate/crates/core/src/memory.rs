//! Class-balanced replay buffer.
//!
//! Capacity is split evenly between the two classes (a class that cannot fill
//! its half leaves the rest to the other). Within a class the slots are split
//! across tasks by the allocation factor, again with spill-over, and each
//! (class, task) cell keeps a uniform random subset of what it has seen.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine_distance_with_norms, norm, Matrix};
use crate::nn::NUM_CLASSES;
use crate::SoulRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub features: Vec<f64>,
    pub label: u8,
    pub task_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub label: u8,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferMemory {
    capacity: usize,
    /// Fixed per-task share within a class. `None` means `1/t` over the tasks
    /// present at reorganization time.
    alloc_factor: Option<f64>,
    entries: Vec<MemoryEntry>,
    norms: Vec<f64>,
}

impl BufferMemory {
    pub fn new(capacity: usize) -> Self {
        BufferMemory {
            capacity,
            alloc_factor: None,
            entries: Vec::new(),
            norms: Vec::new(),
        }
    }

    pub fn with_alloc_factor(capacity: usize, alloc_factor: f64) -> Result<Self> {
        if !(alloc_factor > 0.0 && alloc_factor <= 1.0) {
            return Err(Error::Config(format!(
                "allocation factor {alloc_factor} outside (0, 1]"
            )));
        }
        let mut m = Self::new(capacity);
        m.alloc_factor = Some(alloc_factor);
        Ok(m)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alloc_factor(&self) -> Option<f64> {
        self.alloc_factor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for e in &self.entries {
            c[e.label as usize] += 1;
        }
        c
    }

    /// Number of stored entries per task id.
    pub fn task_counts(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.task_id).or_insert(0) += 1;
        }
        out
    }

    /// Merge a task's labeled samples (rows of `features`) into the buffer and
    /// re-balance. Empty input leaves the buffer unchanged.
    pub fn reorganize(
        &mut self,
        features: &Matrix,
        labels: &[u8],
        task_id: usize,
        rng: &mut SoulRng,
    ) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(Error::dims(
                format!("{} labels", features.rows()),
                labels.len(),
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Config(format!("label {l} is not binary")));
        }
        if features.rows() == 0 {
            return Ok(());
        }
        if let Some(first) = self.entries.first() {
            if first.features.len() != features.cols() {
                return Err(Error::dims(
                    format!("{} features", first.features.len()),
                    features.cols(),
                ));
            }
        }

        // (class, task) -> candidates, old entries first.
        let mut cells: BTreeMap<(u8, usize), Vec<MemoryEntry>> = BTreeMap::new();
        for e in self.entries.drain(..) {
            cells.entry((e.label, e.task_id)).or_default().push(e);
        }
        for (i, &label) in labels.iter().enumerate() {
            cells
                .entry((label, task_id))
                .or_default()
                .push(MemoryEntry {
                    features: features.row(i).to_vec(),
                    label,
                    task_id,
                });
        }

        let class_avail: Vec<usize> = (0..NUM_CLASSES as u8)
            .map(|c| {
                cells
                    .iter()
                    .filter(|((cl, _), _)| *cl == c)
                    .map(|(_, v)| v.len())
                    .sum()
            })
            .collect();
        let class_quota = water_fill(self.capacity, &class_avail, None);

        let mut kept = Vec::with_capacity(self.capacity);
        for class in 0..NUM_CLASSES as u8 {
            let keys: Vec<(u8, usize)> = cells.keys().filter(|k| k.0 == class).copied().collect();
            let avail: Vec<usize> = keys.iter().map(|k| cells[k].len()).collect();
            let quotas = water_fill(class_quota[class as usize], &avail, self.alloc_factor);
            for (key, quota) in keys.iter().zip(quotas) {
                let cands = cells.remove(key).unwrap_or_default();
                kept.extend(sample_subset(cands, quota, rng));
            }
        }
        kept.sort_by_key(|e| (e.task_id, e.label));
        self.norms = kept.iter().map(|e| norm(&e.features)).collect();
        self.entries = kept;
        debug_assert!(self.entries.len() <= self.capacity);
        Ok(())
    }

    /// Indices of `min(b_m, len)` distinct entries, uniformly at random.
    pub fn sample_indices(&self, b_m: usize, rng: &mut SoulRng) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let n = b_m.min(self.entries.len());
        Ok(index::sample(rng, self.entries.len(), n).into_vec())
    }

    pub fn sample_batch(&self, b_m: usize, rng: &mut SoulRng) -> Result<Vec<&MemoryEntry>> {
        Ok(self
            .sample_indices(b_m, rng)?
            .into_iter()
            .map(|i| &self.entries[i])
            .collect())
    }

    /// Entries at cosine distance strictly below `c_d` from `x`. Zero-norm
    /// entries (and a zero-norm query) yield nothing.
    pub fn vote_neighbors(&self, x: &[f64], c_d: f64) -> Result<Vec<Neighbor>> {
        if !(c_d > 0.0 && c_d <= 2.0) {
            return Err(Error::Config(format!(
                "cosine threshold {c_d} outside (0, 2]"
            )));
        }
        if let Some(first) = self.entries.first() {
            if first.features.len() != x.len() {
                return Err(Error::dims(
                    format!("{} features", first.features.len()),
                    x.len(),
                ));
            }
        }
        let nx = norm(x);
        if nx == 0.0 {
            return Ok(Vec::new());
        }
        Ok(self
            .entries
            .iter()
            .zip(&self.norms)
            .enumerate()
            .filter(|(_, (_, n))| **n > 0.0)
            .filter_map(|(i, (e, n))| {
                let d = cosine_distance_with_norms(x, nx, &e.features, *n);
                (d < c_d).then_some(Neighbor {
                    index: i,
                    label: e.label,
                    distance: d,
                })
            })
            .collect())
    }

    /// Feature rows of all stored attack entries.
    pub fn attack_features(&self) -> Option<Matrix> {
        let rows: Vec<&[f64]> = self
            .entries
            .iter()
            .filter(|e| e.label == 1)
            .map(|e| e.features.as_slice())
            .collect();
        if rows.is_empty() {
            None
        } else {
            Matrix::from_rows(&rows).ok()
        }
    }

    /// Write `f0..f{d-1},label,task_id` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let width = self.entries.first().map_or(0, |e| e.features.len());
        let mut header: Vec<String> = (0..width).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        header.push("task_id".into());
        w.write_record(&header).map_err(csv_err)?;
        for e in &self.entries {
            let mut rec: Vec<String> = e.features.iter().map(|v| v.to_string()).collect();
            rec.push(e.label.to_string());
            rec.push(e.task_id.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Inverse of [`BufferMemory::write_csv`].
    pub fn read_csv(path: &Path, capacity: usize) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let format_err = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut mem = BufferMemory::new(capacity);
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let n = rec.len();
            if n < 2 {
                return Err(format_err("row shorter than label,task_id".into()));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| format_err(format!("{s}: {e}")))
            };
            let features = rec
                .iter()
                .take(n - 2)
                .map(parse)
                .collect::<Result<Vec<_>>>()?;
            let label: u8 = rec[n - 2]
                .parse()
                .map_err(|e| format_err(format!("label: {e}")))?;
            let task_id = rec[n - 1]
                .parse()
                .map_err(|e| format_err(format!("task_id: {e}")))?;
            mem.norms.push(norm(&features));
            mem.entries.push(MemoryEntry {
                features,
                label,
                task_id,
            });
        }
        if mem.entries.len() > capacity {
            return Err(format_err(format!(
                "{} entries exceed capacity {capacity}",
                mem.entries.len()
            )));
        }
        Ok(mem)
    }
}

/// Split `total` slots over buckets with the given availabilities. Each bucket
/// first gets `min(avail, floor(share * total))` (equal shares when `share` is
/// `None`); leftover slots are then spread evenly over buckets that still have
/// room, remainders going to the earliest buckets.
fn water_fill(total: usize, avail: &[usize], share: Option<f64>) -> Vec<usize> {
    let mut out = vec![0; avail.len()];
    if avail.is_empty() {
        return out;
    }
    if let Some(f) = share {
        let base = (f * total as f64).floor() as usize;
        for (o, &a) in out.iter_mut().zip(avail) {
            *o = a.min(base);
        }
    }
    let mut remaining = total.saturating_sub(out.iter().sum());
    loop {
        let open: Vec<usize> = (0..avail.len()).filter(|&i| out[i] < avail[i]).collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        let each = remaining / open.len();
        if each == 0 {
            for &i in open.iter().take(remaining) {
                out[i] += 1;
            }
            break;
        }
        for &i in &open {
            let add = each.min(avail[i] - out[i]);
            out[i] += add;
            remaining -= add;
        }
    }
    out
}

fn sample_subset(mut cands: Vec<MemoryEntry>, k: usize, rng: &mut SoulRng) -> Vec<MemoryEntry> {
    if cands.len() <= k {
        return cands;
    }
    let mut idx = index::sample(rng, cands.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter()
        .map(|i| std::mem::replace(&mut cands[i], placeholder()))
        .collect()
}

fn placeholder() -> MemoryEntry {
    MemoryEntry {
        features: Vec::new(),
        label: 0,
        task_id: 0,
    }
}
