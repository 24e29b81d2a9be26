//! Quantized GLM numerics.
//!
//! Features are stored bit-woven: for every sample and every 64-feature chunk
//! there are eight 64-bit plane words, plane `p` holding the `p`-th most
//! significant bit of each feature. A precision-`s` pass reads planes
//! `0..s` only.
//!
//! Dot products and gradient updates follow the bank datapath: every lane
//! runs an MSB-first bit-serial multiplier (`acc = 2 * acc + bit * w`) over
//! the first `s` planes, the lane product is truncated to Q16.16 and the 64
//! lane results go through a wrapping adder tree. Each product is therefore
//! `(w * trunc_s(f)) >> 8` computed exactly and truncated once, which makes
//! sums over any partition of the features add up bit-exactly.

use std::ops::Range;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wire::{Feature, Q16};

pub const LANES: usize = 64;
pub const PLANES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Squared,
    Logistic,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "squared" => Ok(LossKind::Squared),
            "logistic" => Ok(LossKind::Logistic),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Squared => "squared",
            LossKind::Logistic => "logistic",
        })
    }
}

/// Bit-plane layout of an `S x D` feature matrix, `D` padded to a multiple of 64.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WovenMatrix {
    samples: usize,
    features: usize,
    chunks: usize,
    planes: Vec<u64>,
}

impl WovenMatrix {
    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Feature count before padding.
    pub fn features(&self) -> usize {
        self.features
    }

    /// Feature count after padding to whole chunks.
    pub fn padded_features(&self) -> usize {
        self.chunks * LANES
    }

    pub fn chunks(&self) -> usize {
        self.chunks
    }

    /// The eight plane words of one sample's chunk, MSB plane first.
    pub fn chunk_planes(&self, sample: usize, chunk: usize) -> &[u64] {
        let base = (sample * self.chunks + chunk) * PLANES;
        &self.planes[base..base + PLANES]
    }

    /// Feature `j` of `sample` truncated to its top `s` bits, read from `s` planes.
    pub fn feature(&self, sample: usize, j: usize, s: u32) -> Feature {
        let planes = self.chunk_planes(sample, j / LANES);
        let bit = j % LANES;
        let mut raw = 0u8;
        for (p, word) in planes.iter().take(s as usize).enumerate() {
            if word >> bit & 1 == 1 {
                raw |= 0x80 >> p;
            }
        }
        Feature(raw)
    }

    /// Per-lane top-`s`-bit values of one chunk, right-aligned (`0..2^s`).
    fn lane_values(&self, sample: usize, chunk: usize, s: u32) -> [u8; LANES] {
        let mut q = [0u8; LANES];
        for (p, &plane) in self.chunk_planes(sample, chunk).iter().take(s as usize).enumerate() {
            let weight = 1u8 << (s as usize - 1 - p);
            let mut word = plane;
            while word != 0 {
                let j = word.trailing_zeros() as usize;
                q[j] |= weight;
                word &= word - 1;
            }
        }
        q
    }
}

/// Builds the woven layout from a row-major `samples x features` matrix.
pub fn weave(rows: &[Feature], samples: usize, features: usize) -> WovenMatrix {
    assert_eq!(rows.len(), samples * features, "matrix shape mismatch");
    let chunks = features.div_ceil(LANES);
    let mut planes = vec![0u64; samples * chunks * PLANES];
    for t in 0..samples {
        for (j, f) in rows[t * features..(t + 1) * features].iter().enumerate() {
            let base = (t * chunks + j / LANES) * PLANES;
            let bit = 1u64 << (j % LANES);
            for p in 0..PLANES {
                if f.0 & (0x80 >> p) != 0 {
                    planes[base + p] |= bit;
                }
            }
        }
    }
    WovenMatrix { samples, features, chunks, planes }
}

/// Inverse of [`weave`], dropping the padding.
pub fn unweave(woven: &WovenMatrix) -> Vec<Feature> {
    let mut out = Vec::with_capacity(woven.samples * woven.features);
    for t in 0..woven.samples {
        for j in 0..woven.features {
            out.push(woven.feature(t, j, 8));
        }
    }
    out
}

/// A contiguous, chunk-aligned slice of the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPartition {
    pub start: usize,
    pub weights: Vec<Q16>,
}

impl ModelPartition {
    pub fn zeros(span: Range<usize>) -> Self {
        ModelPartition { start: span.start, weights: vec![Q16::ZERO; span.len()] }
    }

    pub fn span(&self) -> Range<usize> {
        self.start..self.start + self.weights.len()
    }
}

fn check_precision(s: u32) -> Result<()> {
    if (1..=8).contains(&s) {
        Ok(())
    } else {
        Err(Error::Precision(s))
    }
}

fn check_span(woven: &WovenMatrix, span: &Range<usize>) -> Result<()> {
    if !span.start.is_multiple_of(LANES) || span.end > woven.padded_features() || (!span.end.is_multiple_of(LANES) && span.end != woven.features) {
        return Err(Error::Partition(format!(
            "span {span:?} is not chunk-aligned within {} padded features",
            woven.padded_features()
        )));
    }
    Ok(())
}

/// Dot product of `sample`'s features (top `s` bits) with a model partition.
pub fn bit_serial_dot(woven: &WovenMatrix, sample: usize, part: &ModelPartition, s: u32) -> Result<Q16> {
    check_precision(s)?;
    let span = part.span();
    check_span(woven, &span)?;
    let mut acc = 0i32;
    for (ci, weights) in part.weights.chunks(LANES).enumerate() {
        let q = woven.lane_values(sample, span.start / LANES + ci, s);
        for (w, &qj) in weights.iter().zip(q.iter()) {
            if qj != 0 {
                acc = acc.wrapping_add(((w.0 as i64 * qj as i64) >> s) as i32);
            }
        }
    }
    Ok(Q16(acc))
}

/// `grad[j] += trunc_s(feature_j) * scale` over the partition starting at `start`.
pub fn backward_accumulate(
    grad: &mut [Q16],
    start: usize,
    woven: &WovenMatrix,
    sample: usize,
    scale: Q16,
    s: u32,
) -> Result<()> {
    check_precision(s)?;
    let span = start..start + grad.len();
    check_span(woven, &span)?;
    if scale == Q16::ZERO {
        return Ok(());
    }
    for (ci, g) in grad.chunks_mut(LANES).enumerate() {
        let q = woven.lane_values(sample, start / LANES + ci, s);
        for (gj, &qj) in g.iter_mut().zip(q.iter()) {
            if qj != 0 {
                *gj += Q16(((scale.0 as i64 * qj as i64) >> s) as i32);
            }
        }
    }
    Ok(())
}

const LUT_SEGMENTS: usize = 256;
/// Segment width 1/16 in Q16.16.
const LUT_STEP_SHIFT: u32 = 12;
const LUT_MIN: i32 = -8 << 16;
const LUT_MAX: i32 = 8 << 16;

fn sigmoid_knots() -> &'static [i32; LUT_SEGMENTS + 1] {
    static KNOTS: OnceLock<[i32; LUT_SEGMENTS + 1]> = OnceLock::new();
    KNOTS.get_or_init(|| {
        let mut t = [0i32; LUT_SEGMENTS + 1];
        for (i, k) in t.iter_mut().enumerate() {
            let x = -8.0 + i as f64 / 16.0;
            *k = (65536.0 / (1.0 + (-x).exp())).round() as i32;
        }
        t[LUT_SEGMENTS / 2] = Q16::HALF.0;
        t
    })
}

/// Piecewise-linear sigmoid over `[-8, 8)` with 256 segments, clamped to
/// exactly 0 and 1 outside.
pub fn sigmoid_lut(a: Q16) -> Q16 {
    if a.0 >= LUT_MAX {
        return Q16::ONE;
    }
    if a.0 < LUT_MIN {
        return Q16::ZERO;
    }
    let u = (a.0 - LUT_MIN) as u32;
    let idx = (u >> LUT_STEP_SHIFT) as usize;
    let frac = (u & ((1 << LUT_STEP_SHIFT) - 1)) as i64;
    let t = sigmoid_knots();
    let lo = t[idx] as i64;
    let hi = t[idx + 1] as i64;
    Q16((lo + (((hi - lo) * frac) >> LUT_STEP_SHIFT)) as i32)
}

/// Derivative of the loss with respect to the activation.
pub fn df(kind: LossKind, activation: Q16, label: Q16) -> Q16 {
    match kind {
        LossKind::Squared => activation - label,
        LossKind::Logistic => sigmoid_lut(activation) - label,
    }
}

pub fn batch_shift(batch: usize) -> Result<u32> {
    if batch == 0 || !batch.is_power_of_two() {
        return Err(Error::Config(format!("mini-batch size {batch} is not a power of two")));
    }
    Ok(batch.trailing_zeros())
}

/// `x -= g / B` with the division as an arithmetic shift.
pub fn model_update(x: &mut [Q16], g: &[Q16], batch: usize) -> Result<()> {
    let shift = batch_shift(batch)?;
    if x.len() != g.len() {
        return Err(Error::Config(format!("model length {} != gradient length {}", x.len(), g.len())));
    }
    for (xj, gj) in x.iter_mut().zip(g) {
        *xj -= gj.shr(shift);
    }
    Ok(())
}

/// Hyper-parameters shared by every training path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub batch: usize,
    pub precision: u32,
    pub learning_rate: Q16,
    pub epochs: usize,
    pub loss: LossKind,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        batch_shift(self.batch)?;
        check_precision(self.precision)
    }
}

/// Mean training loss of `model` in real arithmetic over the precision-`s` features.
pub fn training_loss(woven: &WovenMatrix, labels: &[Q16], model: &[Q16], s: u32, kind: LossKind) -> f64 {
    let samples = woven.samples();
    if samples == 0 {
        return 0.0;
    }
    let weights: Vec<f64> = model.iter().map(|w| w.to_real()).collect();
    let mut total = 0.0;
    for (t, label) in labels.iter().enumerate().take(samples) {
        let mut a = 0.0;
        for (c, w) in weights.chunks(LANES).enumerate() {
            let q = woven.lane_values(t, c, s);
            for (wj, &qj) in w.iter().zip(q.iter()) {
                if qj != 0 {
                    a += wj * (qj as f64) / (1u32 << s) as f64;
                }
            }
        }
        let b = label.to_real();
        total += match kind {
            LossKind::Squared => 0.5 * (a - b) * (a - b),
            // log(1 + e^a) - b * a, evaluated stably
            LossKind::Logistic => {
                let softplus = if a > 0.0 { a + (-a).exp().ln_1p() } else { a.exp().ln_1p() };
                softplus - b * a
            }
        };
    }
    total / samples as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdOutcome {
    /// Final model, one weight per unpadded feature.
    pub model: Vec<Q16>,
    /// Loss before training followed by the loss after every epoch.
    pub losses: Vec<f64>,
}

/// Sequential mini-batch SGD, the reference every distributed path must match.
///
/// A trailing partial mini-batch is still divided by `B`.
pub fn reference_sgd(woven: &WovenMatrix, labels: &[Q16], cfg: &SgdConfig) -> Result<SgdOutcome> {
    reference_sgd_inner(woven, labels, cfg, true)
}

/// Same as [`reference_sgd`] without loss evaluation.
pub fn reference_sgd_silent(woven: &WovenMatrix, labels: &[Q16], cfg: &SgdConfig) -> Result<SgdOutcome> {
    reference_sgd_inner(woven, labels, cfg, false)
}

fn reference_sgd_inner(woven: &WovenMatrix, labels: &[Q16], cfg: &SgdConfig, report: bool) -> Result<SgdOutcome> {
    cfg.validate()?;
    if labels.len() != woven.samples() {
        return Err(Error::Data(format!("{} labels for {} samples", labels.len(), woven.samples())));
    }
    let d = woven.padded_features();
    let mut x = ModelPartition::zeros(0..d);
    let mut g = vec![Q16::ZERO; d];
    let mut losses = Vec::new();
    if report {
        losses.push(training_loss(woven, labels, &x.weights, cfg.precision, cfg.loss));
    }
    for _ in 0..cfg.epochs {
        for batch_start in (0..woven.samples()).step_by(cfg.batch) {
            g.fill(Q16::ZERO);
            let batch_end = (batch_start + cfg.batch).min(woven.samples());
            for t in batch_start..batch_end {
                let a = bit_serial_dot(woven, t, &x, cfg.precision)?;
                let scale = cfg.learning_rate.wrapping_mul(df(cfg.loss, a, labels[t]));
                backward_accumulate(&mut g, 0, woven, t, scale, cfg.precision)?;
            }
            model_update(&mut x.weights, &g, cfg.batch)?;
        }
        if report {
            losses.push(training_loss(woven, labels, &x.weights, cfg.precision, cfg.loss));
        }
    }
    x.weights.truncate(woven.features());
    Ok(SgdOutcome { model: x.weights, losses })
}
