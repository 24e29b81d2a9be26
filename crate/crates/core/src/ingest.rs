//! Dataset loading, quantization and partitioning.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{weave, LossKind, WovenMatrix, LANES};
use crate::wire::{Feature, Q16};

/// Parsed LIBSVM data before normalization. Indices are zero-based.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDataset {
    pub features: usize,
    pub labels: Vec<f64>,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseDataset {
    pub fn samples(&self) -> usize {
        self.rows.len()
    }

    fn dense_column_major(&self) -> Vec<Vec<f64>> {
        let mut cols = vec![vec![0.0; self.samples()]; self.features];
        for (t, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                cols[j][t] = v;
            }
        }
        cols
    }
}

/// Quantized dense dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub samples: usize,
    pub features: usize,
    pub labels: Vec<Q16>,
    /// Row-major `samples x features`.
    pub rows: Vec<Feature>,
}

impl Dataset {
    pub fn row(&self, t: usize) -> &[Feature] {
        &self.rows[t * self.features..(t + 1) * self.features]
    }

    pub fn weave(&self) -> WovenMatrix {
        weave(&self.rows, self.samples, self.features)
    }

    /// Real-valued view, suitable for feeding back into [`normalize_quantize`].
    pub fn to_sparse(&self) -> SparseDataset {
        let rows = (0..self.samples)
            .map(|t| {
                self.row(t)
                    .iter()
                    .enumerate()
                    .filter(|(_, f)| f.0 != 0)
                    .map(|(j, f)| (j, f.to_real()))
                    .collect()
            })
            .collect();
        SparseDataset { features: self.features, labels: self.labels.iter().map(|l| l.to_real()).collect(), rows }
    }
}

pub fn parse_libsvm(path: &Path) -> Result<SparseDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_libsvm_str(&text)
}

pub fn parse_libsvm_str(text: &str) -> Result<SparseDataset> {
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    let mut features = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let mut tokens = body.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 = label_tok.parse().map_err(|_| err(format!("label '{label_tok}' is not numeric")))?;
        let mut row: Vec<(usize, f64)> = Vec::new();
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| err(format!("expected index:value, got '{tok}'")))?;
            let idx: usize = idx.parse().map_err(|_| err(format!("bad feature index '{idx}'")))?;
            if idx == 0 {
                return Err(err("feature indices are 1-based".into()));
            }
            let val: f64 = val.parse().map_err(|_| err(format!("bad feature value '{val}'")))?;
            if row.iter().any(|&(j, _)| j == idx - 1) {
                return Err(err(format!("duplicate feature index {idx}")));
            }
            features = features.max(idx);
            row.push((idx - 1, val));
        }
        labels.push(label);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(SparseDataset { features, labels, rows })
}

/// `round((v - min) / (max - min) * 255)`, ties up.
fn quantize(v: f64, min: f64, max: f64) -> Feature {
    if max <= min {
        return Feature(0);
    }
    let scaled = (v - min) / (max - min) * 255.0;
    Feature((scaled + 0.5).floor().clamp(0.0, 255.0) as u8)
}

fn map_label(label: f64, kind: LossKind, sample: usize) -> Result<Q16> {
    if !label.is_finite() {
        return Err(Error::Data(format!("non-finite label in sample {sample}")));
    }
    match kind {
        LossKind::Logistic => {
            if label == 1.0 {
                Ok(Q16::ONE)
            } else if label == -1.0 || label == 0.0 {
                Ok(Q16::ZERO)
            } else {
                Err(Error::Data(format!("logistic label {label} in sample {sample} is not in {{-1, 0, 1}}")))
            }
        }
        LossKind::Squared => Ok(Q16::from_real(label).unwrap_or(if label > 0.0 { Q16(i32::MAX) } else { Q16(i32::MIN) })),
    }
}

/// Per-feature min-max scaling to `[0, 255/256]` followed by rounding to 8 bits.
pub fn normalize_quantize(sparse: &SparseDataset, kind: LossKind) -> Result<Dataset> {
    if sparse.samples() == 0 {
        return Err(Error::EmptyDataset);
    }
    let (s, d) = (sparse.samples(), sparse.features);
    let cols = sparse.dense_column_major();
    let mut rows = vec![Feature(0); s * d];
    for (j, col) in cols.iter().enumerate() {
        if let Some(t) = col.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value in sample {t}, feature {}", j + 1)));
        }
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (t, &v) in col.iter().enumerate() {
            rows[t * d + j] = quantize(v, min, max);
        }
    }
    let labels = sparse.labels.iter().enumerate().map(|(t, &l)| map_label(l, kind, t)).collect::<Result<_>>()?;
    Ok(Dataset { samples: s, features: d, labels, rows })
}

pub fn load_libsvm(path: &Path, kind: LossKind) -> Result<Dataset> {
    normalize_quantize(&parse_libsvm(path)?, kind)
}

/// Two Gaussian classes separated along a random direction. Labels are ±1.
pub fn synthetic_blobs(samples: usize, features: usize, margin: f64, seed: u64) -> SparseDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction: Vec<f64> = (0..features).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut labels = Vec::with_capacity(samples);
    let mut rows = Vec::with_capacity(samples);
    for _ in 0..samples {
        let y = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let row = direction
            .iter()
            .enumerate()
            .map(|(j, u)| (j, rng.sample::<f64, _>(StandardNormal) + y * margin * u / norm))
            .collect();
        labels.push(y);
        rows.push(row);
    }
    SparseDataset { features, labels, rows }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    /// Contiguous feature spans, one per (worker, engine).
    Model,
    /// Contiguous sample spans, one per worker.
    Data,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    pub workers: usize,
    pub engines: usize,
    /// For model mode, span `m * engines + n` belongs to engine `n` of worker `m`.
    pub spans: Vec<Range<usize>>,
}

impl PartitionPlan {
    /// Union of a worker's spans.
    pub fn worker_span(&self, m: usize) -> Range<usize> {
        let per = self.spans.len() / self.workers;
        self.spans[m * per].start..self.spans[(m + 1) * per - 1].end
    }
}

/// Splits `total` units into `parts` sizes differing by at most one, earlier ones larger.
fn split_even(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

pub fn plan_partitions(
    features: usize,
    samples: usize,
    workers: usize,
    engines: usize,
    mode: PartitionMode,
) -> Result<PartitionPlan> {
    if workers == 0 || engines == 0 {
        return Err(Error::Partition("worker and engine counts must be positive".into()));
    }
    let spans = match mode {
        PartitionMode::Model => {
            let parts = workers * engines;
            if features < LANES * parts {
                return Err(Error::Partition(format!(
                    "{features} features cannot give each of {parts} engines a 64-feature chunk"
                )));
            }
            let mut start = 0;
            split_even(features.div_ceil(LANES), parts)
                .into_iter()
                .map(|c| {
                    let end = (start + c * LANES).min(features);
                    let span = start..end;
                    start = end;
                    span
                })
                .collect()
        }
        PartitionMode::Data => {
            if samples < workers {
                return Err(Error::Partition(format!("{samples} samples for {workers} workers")));
            }
            let mut start = 0;
            split_even(samples, workers)
                .into_iter()
                .map(|c| {
                    let span = start..start + c;
                    start += c;
                    span
                })
                .collect()
        }
    };
    let engines = if mode == PartitionMode::Model { engines } else { 1 };
    Ok(PartitionPlan { mode, workers, engines, spans })
}
