//! Dataset handling: synthetic fine-grained data, tabular feature ingestion,
//! class-disjoint train/test splits and balanced P×K batch sampling.
//!
//! Feature files are UTF-8 CSV with header `id,label,f0,...,f{D-1}`; labels
//! are non-negative integers. An optional sidecar split file lists the test
//! class ids, one per line. Train and test class sets never overlap.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SgarError};
use crate::numerics;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<i64>,
    pub ids: Vec<String>,
    pub train_classes: BTreeSet<i64>,
    pub test_classes: BTreeSet<i64>,
}

impl DatasetTable {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.train_classes.contains(&self.labels[i]))
            .collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.test_classes.contains(&self.labels[i]))
            .collect()
    }

    /// Indices of the train split grouped by class, deterministically ordered.
    pub fn train_class_groups(&self) -> BTreeMap<i64, Vec<usize>> {
        let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for i in self.train_indices() {
            groups.entry(self.labels[i]).or_default().push(i);
        }
        groups
    }

    fn validate(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(SgarError::Validation("need at least 2 samples".into()));
        }
        if self.labels.len() != self.len() || self.ids.len() != self.len() {
            return Err(SgarError::Validation("column length mismatch".into()));
        }
        let dim = self.dim();
        for (i, row) in self.features.iter().enumerate() {
            if row.len() != dim {
                return Err(SgarError::Validation(format!(
                    "row {i} has {} features, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(SgarError::Validation(format!("non-finite feature in row {i}")));
            }
        }
        if !self.train_classes.is_disjoint(&self.test_classes) {
            return Err(SgarError::Validation(
                "train and test class sets overlap".into(),
            ));
        }
        for (class, group) in self.train_class_groups() {
            if group.len() < 2 {
                return Err(SgarError::Validation(format!(
                    "train class {class} has a single sample"
                )));
            }
        }
        Ok(())
    }
}

/// Generate a synthetic fine-grained dataset with a known intra-class
/// structure: each class has a unit mean and samples displaced along one or
/// two class-specific semantic directions with graded magnitudes, then
/// normalized. The first `n_train_classes` class ids form the train split.
pub fn generate_synthetic(
    n_train_classes: usize,
    n_test_classes: usize,
    samples_per_class: usize,
    dim: usize,
    intra_scale: f64,
    seed: u64,
) -> DatasetTable {
    assert!(dim >= 2 && samples_per_class >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = n_train_classes + n_test_classes;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for class in 0..n_classes as i64 {
        let mean = random_unit(&mut rng, dim);
        let dir_a = random_unit(&mut rng, dim);
        for k in 0..samples_per_class {
            let t = if samples_per_class > 1 {
                k as f64 / (samples_per_class - 1) as f64
            } else {
                0.0
            };
            // graded displacement along the class's semantic direction plus
            // independent scatter, both scaled by intra_scale so difficulty
            // is a single knob and zero spread collapses the class
            let noise_dir = random_unit(&mut rng, dim);
            let noise_mag = rng.gen_range(0.0..0.5) * intra_scale;
            let mut v = mean.clone();
            for d in 0..dim {
                v[d] += intra_scale * t * dir_a[d] + noise_mag * noise_dir[d];
            }
            // mean is unit and the displacement is bounded, so this cannot underflow
            let v = numerics::l2_normalize(&v).expect("synthetic sample norm");
            features.push(v.into_vec());
            labels.push(class);
            ids.push(format!("c{class}_s{k}"));
        }
    }
    DatasetTable {
        features,
        labels,
        ids,
        train_classes: (0..n_train_classes as i64).collect(),
        test_classes: (n_train_classes as i64..n_classes as i64).collect(),
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if let Ok(u) = numerics::l2_normalize(&v) {
            return u.into_vec();
        }
    }
}

/// Load a feature CSV, optionally with a sidecar split file naming the test
/// classes. Without a split file every class belongs to the train split.
pub fn load_table(path: &Path, split_file: Option<&Path>) -> Result<DatasetTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SgarError::Parse {
            line: 0,
            reason: e.to_string(),
        })?;
    let header = reader
        .headers()
        .map_err(|e| SgarError::Parse {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(SgarError::Parse {
            line: 1,
            reason: "expected header id,label,f0,...".into(),
        });
    }
    let dim = header.len() - 2;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2; // header is line 1
        let record = record.map_err(|e| SgarError::Parse {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != dim + 2 {
            return Err(SgarError::Parse {
                line,
                reason: format!("expected {} columns, got {}", dim + 2, record.len()),
            });
        }
        let label: i64 = record[1].parse().map_err(|_| SgarError::Parse {
            line,
            reason: format!("bad label {:?}", &record[1]),
        })?;
        if label < 0 {
            return Err(SgarError::Parse {
                line,
                reason: "label must be non-negative".into(),
            });
        }
        let mut row = Vec::with_capacity(dim);
        for f in record.iter().skip(2) {
            let v: f64 = f.parse().map_err(|_| SgarError::Parse {
                line,
                reason: format!("bad feature {f:?}"),
            })?;
            row.push(v);
        }
        ids.push(record[0].to_string());
        labels.push(label);
        features.push(row);
    }

    let all_classes: BTreeSet<i64> = labels.iter().copied().collect();
    let test_classes: BTreeSet<i64> = match split_file {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let mut set = BTreeSet::new();
            for (i, raw) in text.lines().enumerate() {
                let raw = raw.trim();
                if raw.is_empty() {
                    continue;
                }
                let c: i64 = raw.parse().map_err(|_| SgarError::Parse {
                    line: i + 1,
                    reason: format!("bad class id {raw:?} in split file"),
                })?;
                set.insert(c);
            }
            set
        }
        None => BTreeSet::new(),
    };
    let train_classes: BTreeSet<i64> = all_classes.difference(&test_classes).copied().collect();
    let table = DatasetTable {
        features,
        labels,
        ids,
        train_classes,
        test_classes,
    };
    table.validate()?;
    Ok(table)
}

/// Write a table in the same CSV format `load_table` reads.
pub fn save_table(table: &DatasetTable, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        SgarError::Validation(format!("cannot write {}: {e}", path.display()))
    })?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..table.dim()).map(|d| format!("f{d}")));
    writer
        .write_record(&header)
        .and_then(|_| {
            for i in 0..table.len() {
                let mut rec = vec![table.ids[i].clone(), table.labels[i].to_string()];
                rec.extend(table.features[i].iter().map(|v| format!("{v}")));
                writer.write_record(&rec)?;
            }
            writer.flush().map_err(csv::Error::from)
        })
        .map_err(|e| SgarError::Validation(e.to_string()))
}

/// Write the sidecar split file for `table`'s test classes.
pub fn save_split(table: &DatasetTable, path: &Path) -> Result<()> {
    let mut text = String::new();
    for c in &table.test_classes {
        text.push_str(&format!("{c}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// Balanced P×K sampler: every batch holds exactly P distinct classes with
/// K samples each. An epoch walks the shuffled class list without
/// replacement until fewer than P classes remain; short classes are topped
/// up by sampling with replacement.
pub struct BatchSampler<'a> {
    table: &'a DatasetTable,
    spec: BatchSpec,
    groups: BTreeMap<i64, Vec<usize>>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(table: &'a DatasetTable, spec: BatchSpec) -> Result<Self> {
        assert!(spec.samples_per_class >= 2);
        let groups = table.train_class_groups();
        if groups.len() < spec.classes_per_batch {
            return Err(SgarError::InsufficientClasses {
                needed: spec.classes_per_batch,
                available: groups.len(),
            });
        }
        Ok(Self { table, spec, groups })
    }

    /// The deterministic batch sequence for one epoch.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut classes: Vec<i64> = self.groups.keys().copied().collect();
        classes.shuffle(&mut rng);
        let p = self.spec.classes_per_batch;
        let k = self.spec.samples_per_class;
        let mut batches = Vec::new();
        for chunk in classes.chunks(p) {
            if chunk.len() < p {
                break;
            }
            let mut indices = Vec::with_capacity(p * k);
            for &class in chunk {
                let pool = &self.groups[&class];
                if pool.len() >= k {
                    let mut picked = pool.clone();
                    picked.shuffle(&mut rng);
                    indices.extend_from_slice(&picked[..k]);
                } else {
                    for _ in 0..k {
                        indices.push(pool[rng.gen_range(0..pool.len())]);
                    }
                }
            }
            batches.push(Batch { indices });
        }
        batches
    }

    pub fn batch_views(&self, batch: &Batch) -> (Vec<&'a [f64]>, Vec<i64>) {
        let features = batch
            .indices
            .iter()
            .map(|&i| self.table.features[i].as_slice())
            .collect();
        let labels = batch.indices.iter().map(|&i| self.table.labels[i]).collect();
        (features, labels)
    }
}
