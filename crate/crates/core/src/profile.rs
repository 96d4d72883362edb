//! Activation statistics and spike detection.
//!
//! [`collect_stats`] runs a full-precision forward pass with a tap at every
//! site and folds each tapped tensor into a [`StatAccumulator`]. The fold is
//! a commutative monoid (max, count, and a Chan-style mean/variance merge),
//! so shards of a stream can be collected independently and merged.
//!
//! Three spike definitions are available:
//! - [`detect_sigma`]: values more than `k` population standard deviations
//!   from the tensor mean.
//! - [`detect_llmint8`]: feature dimensions of magnitude >= 6 that show up in
//!   at least 25% of layers and 6% of token positions.
//! - [`detect_threshold`]: sites whose absolute max exceeds a fixed `θ`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{self, ModelBundle, Observer, Token};
use crate::plan::DEFAULT_THETA;
use crate::site::{Boundary, SiteId, SiteKind};
use crate::tensor::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SIGMA_K: f32 = 6.0;
pub const CURVE_CSV_HEADER: &str = "layer,input_max_abs,output_max_abs";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlmInt8Criteria {
    pub magnitude: f32,
    pub layer_fraction: f64,
    pub token_fraction: f64,
}

impl Default for LlmInt8Criteria {
    fn default() -> Self {
        Self {
            magnitude: 6.0,
            layer_fraction: 0.25,
            token_fraction: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    #[serde(flatten)]
    pub site: SiteId,
    pub max_abs: f32,
    pub mean: f64,
    pub std: f64,
    pub token_argmax: usize,
    pub count: u64,
    /// Token positions observed (rows of the tapped tensors).
    pub tokens: usize,
    /// Values further than `DEFAULT_SIGMA_K` deviations from their tensor's mean.
    pub sigma_outliers: u64,
    pub channel_max_abs: Vec<f32>,
    /// Per channel, token positions with `|x| >= LlmInt8Criteria::magnitude`.
    pub channel_hits: Vec<u32>,
}

#[cfg(test)]
impl SiteStats {
    pub(crate) fn synthetic(site: SiteId, max_abs: f32) -> Self {
        Self {
            site,
            max_abs,
            mean: 0.0,
            std: max_abs as f64 / 3.0,
            token_argmax: 0,
            count: 1,
            tokens: 1,
            sigma_outliers: 0,
            channel_max_abs: vec![max_abs],
            channel_hits: vec![0],
        }
    }
}

/// Running statistics for one site.
#[derive(Debug, Clone, PartialEq)]
pub struct StatAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
    max_abs: f32,
    token_argmax: usize,
    tokens: usize,
    sigma_outliers: u64,
    channel_max_abs: Vec<f32>,
    channel_hits: Vec<u32>,
    hit_magnitude: f32,
}

impl StatAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            max_abs: 0.0,
            token_argmax: 0,
            tokens: 0,
            sigma_outliers: 0,
            channel_max_abs: vec![0.0; channels],
            channel_hits: vec![0; channels],
            hit_magnitude: LlmInt8Criteria::default().magnitude,
        }
    }

    /// Folds in a `[tokens, channels]` activation whose first row is token
    /// position `token_offset` of the stream.
    pub fn push(&mut self, x: &Tensor, token_offset: usize) {
        let d = x.last_dim();
        assert_eq!(d, self.channel_max_abs.len(), "channel count changed between pushes");
        self.sigma_outliers += detect_sigma_count(x.data(), DEFAULT_SIGMA_K);
        for (t, row) in x.rows().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let a = v.abs();
                self.count += 1;
                let delta = v as f64 - self.mean;
                self.mean += delta / self.count as f64;
                self.m2 += delta * (v as f64 - self.mean);
                if a > self.max_abs {
                    self.max_abs = a;
                    self.token_argmax = token_offset + t;
                }
                if a > self.channel_max_abs[c] {
                    self.channel_max_abs[c] = a;
                }
                if a >= self.hit_magnitude {
                    self.channel_hits[c] += 1;
                }
            }
        }
        self.tokens += x.num_rows();
    }

    /// Combines two accumulators over disjoint parts of a stream. Ties in the
    /// maximum resolve to the earlier token.
    pub fn merge(&mut self, other: &StatAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let n = self.count as f64 + other.count as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
        if other.max_abs > self.max_abs
            || (other.max_abs == self.max_abs && other.token_argmax < self.token_argmax)
        {
            self.max_abs = other.max_abs;
            self.token_argmax = other.token_argmax;
        }
        self.tokens += other.tokens;
        self.sigma_outliers += other.sigma_outliers;
        for (a, b) in self.channel_max_abs.iter_mut().zip(&other.channel_max_abs) {
            *a = a.max(*b);
        }
        for (a, b) in self.channel_hits.iter_mut().zip(&other.channel_hits) {
            *a += b;
        }
    }

    pub fn finish(&self, site: SiteId) -> SiteStats {
        SiteStats {
            site,
            max_abs: self.max_abs,
            mean: self.mean,
            std: if self.count > 0 {
                (self.m2 / self.count as f64).max(0.0).sqrt()
            } else {
                0.0
            },
            token_argmax: self.token_argmax,
            count: self.count,
            tokens: self.tokens,
            sigma_outliers: self.sigma_outliers,
            channel_max_abs: self.channel_max_abs.clone(),
            channel_hits: self.channel_hits.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureOutliers {
    pub kind: SiteKind,
    pub boundary: Boundary,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detections {
    pub sigma_k: f32,
    /// Sites holding at least one value beyond `sigma_k` deviations.
    pub sigma: Vec<SiteId>,
    pub llmint8_criteria: LlmInt8Criteria,
    /// Outlier feature dimensions per site group (kind and boundary, across layers).
    pub llmint8_dims: Vec<FeatureOutliers>,
    /// Sites in which a flagged dimension was active.
    pub llmint8: Vec<SiteId>,
    pub theta: f32,
    pub threshold: Vec<SiteId>,
}

impl Default for Detections {
    fn default() -> Self {
        Self {
            sigma_k: DEFAULT_SIGMA_K,
            sigma: Vec::new(),
            llmint8_criteria: LlmInt8Criteria::default(),
            llmint8_dims: Vec::new(),
            llmint8: Vec::new(),
            theta: DEFAULT_THETA,
            threshold: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeReport {
    pub schema_version: u32,
    pub model_id: String,
    pub stream_id: String,
    pub n_layers: usize,
    pub sites: Vec<SiteStats>,
    pub detections: Detections,
}

impl SpikeReport {
    pub fn get(&self, site: SiteId) -> Option<&SiteStats> {
        self.sites.iter().find(|s| s.site == site)
    }

    pub fn max_abs(&self, site: SiteId) -> Result<f32> {
        self.get(site)
            .map(|s| s.max_abs)
            .ok_or_else(|| Error::UnknownSite(site.to_string()))
    }

    /// Recomputes the LLM.int8() and threshold detections. The sigma
    /// detection is fixed at collection time with `DEFAULT_SIGMA_K`.
    pub fn detect(&mut self, criteria: LlmInt8Criteria, theta: f32) {
        let sigma = self
            .sites
            .iter()
            .filter(|s| s.sigma_outliers > 0)
            .map(|s| s.site)
            .collect();
        let mut groups: BTreeMap<(SiteKind, Boundary), Vec<&SiteStats>> = BTreeMap::new();
        for s in &self.sites {
            groups.entry((s.site.kind, s.site.boundary)).or_default().push(s);
        }
        let mut llmint8_dims = Vec::new();
        let mut llmint8 = Vec::new();
        for ((kind, boundary), layers) in groups {
            let hits: Vec<DimHits> = layers
                .iter()
                .map(|s| DimHits {
                    tokens: s.tokens,
                    hits: s.channel_hits.clone(),
                })
                .collect();
            let dims = detect_llmint8_counts(&hits, &criteria);
            if dims.is_empty() {
                continue;
            }
            for (s, h) in layers.iter().zip(&hits) {
                if dims.iter().any(|&j| h.layer_affected(j, &criteria)) {
                    llmint8.push(s.site);
                }
            }
            llmint8_dims.push(FeatureOutliers { kind, boundary, dims });
        }
        llmint8.sort();
        self.detections = Detections {
            sigma_k: DEFAULT_SIGMA_K,
            sigma,
            llmint8_criteria: criteria,
            llmint8_dims,
            llmint8,
            theta,
            threshold: detect_threshold(self, theta),
        };
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "report schema_version {} (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        let d = &r.detections;
        for site in d.sigma.iter().chain(&d.llmint8).chain(&d.threshold) {
            if r.get(*site).is_none() {
                return Err(Error::UnknownSite(format!("detection references missing site {site}")));
            }
        }
        Ok(r)
    }
}

/// Observer that accumulates statistics for every site it sees.
#[derive(Debug, Default)]
pub struct StatsCollector {
    accumulators: BTreeMap<SiteId, StatAccumulator>,
    token_offset: usize,
}

impl StatsCollector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Token position of the next window's first row.
    pub fn set_token_offset(&mut self, offset: usize) {
        self.token_offset = offset;
    }

    pub fn merge(&mut self, other: &StatsCollector) {
        for (site, acc) in &other.accumulators {
            match self.accumulators.get_mut(site) {
                Some(mine) => mine.merge(acc),
                None => {
                    self.accumulators.insert(*site, acc.clone());
                }
            }
        }
    }

    pub fn accumulator(&self, site: &SiteId) -> Option<&StatAccumulator> {
        self.accumulators.get(site)
    }

    pub fn into_stats(self) -> Vec<SiteStats> {
        self.accumulators
            .iter()
            .map(|(site, acc)| acc.finish(*site))
            .collect()
    }
}

impl Observer for StatsCollector {
    fn observe(&mut self, site: SiteId, x: &Tensor) {
        let offset = self.token_offset;
        self.accumulators
            .entry(site)
            .or_insert_with(|| StatAccumulator::new(x.last_dim()))
            .push(x, offset);
    }
}

/// FNV-1a over the token ids; stable identifier for a token stream.
pub fn stream_id(tokens: &[Token]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("len{}-fnv{h:016x}", tokens.len())
}

/// Full-precision forward over `tokens` with taps at every site. Streams
/// longer than the context run as consecutive windows.
pub fn collect_stats(model: &ModelBundle, tokens: &[Token]) -> Result<SpikeReport> {
    if tokens.is_empty() {
        return Err(invalid("token stream is empty"));
    }
    let mut collector = StatsCollector::new();
    let window = model.config.max_context;
    for (i, chunk) in tokens.chunks(window).enumerate() {
        collector.set_token_offset(i * window);
        model::forward_observed(model, chunk, None, &mut collector)?;
    }
    let mut report = SpikeReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model_id: model.model_id.clone(),
        stream_id: stream_id(tokens),
        n_layers: model.config.n_layers,
        sites: collector.into_stats(),
        detections: Detections::default(),
    };
    report.detect(LlmInt8Criteria::default(), DEFAULT_THETA);
    Ok(report)
}

fn mean_std(data: &[f32]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn detect_sigma_count(data: &[f32], k: f32) -> u64 {
    if data.len() < 2 {
        return 0;
    }
    let (mean, std) = mean_std(data);
    let bound = k as f64 * std;
    data.iter().filter(|&&v| (v as f64 - mean).abs() > bound).count() as u64
}

/// Flat positions where `|x - mean| > k·std` (population std).
pub fn detect_sigma(x: &Tensor, k: f32) -> Result<Vec<usize>> {
    if x.len() < 2 {
        return Err(invalid("sigma detection needs at least two values"));
    }
    let (mean, std) = mean_std(x.data());
    let bound = k as f64 * std;
    Ok(x.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| (v as f64 - mean).abs() > bound)
        .map(|(i, _)| i)
        .collect())
}

/// Per-layer counts of token positions at which each dimension reached the
/// outlier magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct DimHits {
    pub tokens: usize,
    pub hits: Vec<u32>,
}

impl DimHits {
    pub fn from_tensor(x: &Tensor, magnitude: f32) -> Self {
        let mut hits = vec![0u32; x.last_dim()];
        for row in x.rows() {
            for (h, v) in hits.iter_mut().zip(row) {
                if v.abs() >= magnitude {
                    *h += 1;
                }
            }
        }
        Self { tokens: x.num_rows(), hits }
    }

    fn layer_affected(&self, dim: usize, c: &LlmInt8Criteria) -> bool {
        self.tokens > 0
            && self.hits.get(dim).is_some_and(|&h| {
                h > 0 && h as f64 >= c.token_fraction * self.tokens as f64
            })
    }
}

/// LLM.int8()-style outlier dimensions from per-layer hit counts.
///
/// A layer counts for dimension `j` when at least `token_fraction` of its
/// token positions reach the magnitude in `j`; `j` is flagged when at least
/// `layer_fraction` of the layers count.
pub fn detect_llmint8_counts(layers: &[DimHits], c: &LlmInt8Criteria) -> Vec<usize> {
    let dims = layers.iter().map(|l| l.hits.len()).max().unwrap_or(0);
    if layers.is_empty() {
        return Vec::new();
    }
    (0..dims)
        .filter(|&j| {
            let affected = layers.iter().filter(|l| l.layer_affected(j, c)).count();
            affected as f64 >= c.layer_fraction * layers.len() as f64
        })
        .collect()
}

/// [`detect_llmint8_counts`] over raw `[tokens, dims]` activations, one per layer.
pub fn detect_llmint8(layers: &[Tensor], c: &LlmInt8Criteria) -> Result<Vec<usize>> {
    if layers.is_empty() {
        return Err(invalid("llm.int8 detection needs at least one layer"));
    }
    let d = layers[0].last_dim();
    if layers.iter().any(|l| l.last_dim() != d) {
        return Err(Error::Shape("layers disagree on feature dimension".into()));
    }
    let hits: Vec<DimHits> = layers.iter().map(|l| DimHits::from_tensor(l, c.magnitude)).collect();
    Ok(detect_llmint8_counts(&hits, c))
}

/// Sites with `max_abs > theta`.
pub fn detect_threshold(report: &SpikeReport, theta: f32) -> Vec<SiteId> {
    report
        .sites
        .iter()
        .filter(|s| s.max_abs > theta)
        .map(|s| s.site)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub layer: usize,
    pub input_max_abs: f32,
    pub output_max_abs: f32,
}

/// Per-layer input/output maxima of one projection kind.
pub fn export_curves(report: &SpikeReport, kind: SiteKind) -> Result<Vec<CurveRow>> {
    (1..=report.n_layers)
        .map(|layer| {
            Ok(CurveRow {
                layer,
                input_max_abs: report.max_abs(SiteId::input(layer, kind))?,
                output_max_abs: report.max_abs(SiteId::output(layer, kind))?,
            })
        })
        .collect()
}

pub fn write_curves_csv(rows: &[CurveRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "{CURVE_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.layer, r.input_max_abs, r.output_max_abs)?;
    }
    Ok(())
}
