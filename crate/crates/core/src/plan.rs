//! Precision plans: which numeric treatment each linear projection gets.
//!
//! A plan lists explicit per-projection treatments; every other in-scope
//! projection receives the default treatment, and everything out of scope
//! (RMSNorm, the attention matmuls, softmax) always runs in full precision.
//! Layers are 1-based.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::formats::Fp8Format;
use crate::model::ModelConfig;
use crate::profile::{detect_threshold, SpikeReport};
use crate::quant::{Granularity, MAX_BITS, MIN_BITS};
use crate::site::{Boundary, SiteId, SiteKind};

pub const PLAN_SCHEMA_VERSION: u32 = 1;

/// Spike threshold on `max_abs`, in activation units.
pub const DEFAULT_THETA: f32 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Treatment {
    Int(u8),
    Fp8(Fp8Format),
    Fp16,
    Full,
}

impl Treatment {
    /// Anything other than integer quantization counts as high precision.
    pub fn is_high_precision(self) -> bool {
        !matches!(self, Treatment::Int(_))
    }
}

impl fmt::Display for Treatment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Treatment::Int(b) => write!(f, "int{b}"),
            Treatment::Fp8(fmt8) => f.write_str(fmt8.name()),
            Treatment::Fp16 => f.write_str("fp16"),
            Treatment::Full => f.write_str("full"),
        }
    }
}

impl FromStr for Treatment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fp8_e5m2" => Treatment::Fp8(Fp8Format::E5M2),
            "fp8_e4m3" => Treatment::Fp8(Fp8Format::E4M3),
            "fp16" => Treatment::Fp16,
            "full" => Treatment::Full,
            _ => {
                let bits = s
                    .strip_prefix("int")
                    .and_then(|b| b.parse::<u8>().ok())
                    .filter(|b| (MIN_BITS..=MAX_BITS).contains(b))
                    .ok_or_else(|| invalid(format!("unknown treatment `{s}`")))?;
                Treatment::Int(bits)
            }
        })
    }
}

impl Serialize for Treatment {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Treatment {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// High-precision treatment for spike-bearing projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HighPrecision {
    Fp16,
    Fp8E5M2,
    Fp8E4M3,
}

impl HighPrecision {
    pub fn treatment(self) -> Treatment {
        match self {
            HighPrecision::Fp16 => Treatment::Fp16,
            HighPrecision::Fp8E5M2 => Treatment::Fp8(Fp8Format::E5M2),
            HighPrecision::Fp8E4M3 => Treatment::Fp8(Fp8Format::E4M3),
        }
    }
}

impl FromStr for HighPrecision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp16" => Ok(HighPrecision::Fp16),
            "fp8e5m2" | "fp8_e5m2" => Ok(HighPrecision::Fp8E5M2),
            "fp8e4m3" | "fp8_e4m3" => Ok(HighPrecision::Fp8E4M3),
            _ => Err(invalid(format!("unknown high-precision treatment `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlanScaleMode {
    #[default]
    Dynamic,
    /// Use the calibrated scales stored in the model bundle.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSite {
    pub layer: usize,
    pub kind: SiteKind,
    /// Where the treatment applies; always the projection input.
    pub boundary: Boundary,
    pub treatment: Treatment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPlan {
    pub schema_version: u32,
    pub name: String,
    pub model_id: String,
    pub default_bits: u8,
    pub default_treatment: Treatment,
    pub granularity: Granularity,
    pub scale_mode: PlanScaleMode,
    /// Apply each treatment to the projection weights as well as its input.
    pub apply_to_weights: bool,
    /// Token row left unquantized (and out of dynamic scales) at every site.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude_token: Option<usize>,
    pub scope: BTreeSet<SiteKind>,
    pub sites: Vec<PlanSite>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// The quantizable site kinds: the seven linear projections of a block.
pub fn default_scope() -> BTreeSet<SiteKind> {
    SiteKind::LINEAR.into_iter().collect()
}

impl PrecisionPlan {
    /// Every in-scope projection quantized to `bits`.
    pub fn uniform(model_id: impl Into<String>, bits: u8) -> Result<Self> {
        let plan = Self {
            schema_version: PLAN_SCHEMA_VERSION,
            name: format!("naive-int{bits}"),
            model_id: model_id.into(),
            default_bits: bits,
            default_treatment: Treatment::Int(bits),
            granularity: Granularity::PerTensor,
            scale_mode: PlanScaleMode::Dynamic,
            apply_to_weights: true,
            exclude_token: None,
            scope: default_scope(),
            sites: Vec::new(),
            seed: None,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Nothing quantized.
    pub fn full(model_id: impl Into<String>) -> Self {
        Self {
            name: "full".into(),
            default_treatment: Treatment::Full,
            ..Self::uniform(model_id, MAX_BITS).expect("8-bit uniform plan is valid")
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_granularity(mut self, g: Granularity) -> Self {
        self.granularity = g;
        self
    }

    pub fn with_weights(mut self, apply: bool) -> Self {
        self.apply_to_weights = apply;
        self
    }

    pub fn with_exclude_token(mut self, token: Option<usize>) -> Self {
        self.exclude_token = token;
        self
    }

    pub fn with_scale_mode(mut self, mode: PlanScaleMode) -> Self {
        self.scale_mode = mode;
        self
    }

    /// Treatment of projection `kind` in `layer`.
    pub fn treatment(&self, layer: usize, kind: SiteKind) -> Treatment {
        if !self.scope.contains(&kind) {
            return Treatment::Full;
        }
        self.sites
            .iter()
            .find(|s| s.layer == layer && s.kind == kind)
            .map(|s| s.treatment)
            .unwrap_or(self.default_treatment)
    }

    /// Listed sites with a high-precision treatment, as `(layer, kind)`.
    pub fn high_precision_sites(&self) -> Vec<(usize, SiteKind)> {
        self.sites
            .iter()
            .filter(|s| s.treatment.is_high_precision())
            .map(|s| (s.layer, s.kind))
            .collect()
    }

    /// Checks the model-independent invariants.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "plan schema_version {} (expected {PLAN_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(MIN_BITS..=MAX_BITS).contains(&self.default_bits) {
            return Err(invalid(format!("default_bits {} out of range", self.default_bits)));
        }
        if let Some(k) = self.scope.iter().find(|k| !k.is_linear()) {
            return Err(invalid(format!("`{k}` cannot be quantized; only linear projections are in scope")));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sites {
            if !self.scope.contains(&s.kind) {
                return Err(invalid(format!("plan site {}@{} is outside the plan scope", s.kind, s.layer)));
            }
            if s.boundary != Boundary::Input {
                return Err(invalid(format!(
                    "plan site {}@{} must use the input boundary",
                    s.kind, s.layer
                )));
            }
            if s.layer == 0 {
                return Err(Error::UnknownSite(format!("{}@0 (layers are 1-based)", s.kind)));
            }
            if !seen.insert((s.layer, s.kind)) {
                return Err(invalid(format!("duplicate plan site {}@{}", s.kind, s.layer)));
            }
        }
        Ok(())
    }

    /// Validates the plan and checks that every listed site exists in `config`.
    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        self.validate()?;
        for s in &self.sites {
            config.check_site(&SiteId::input(s.layer, s.kind))?;
        }
        if let Some(t) = self.exclude_token {
            if t >= config.max_context {
                return Err(Error::OutOfRange { index: t, len: config.max_context });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        plan.validate()?;
        Ok(plan)
    }

    fn sort_sites(&mut self) {
        self.sites.sort_by_key(|s| (s.layer, s.kind));
    }
}

fn high_site(layer: usize, kind: SiteKind, treatment: Treatment) -> PlanSite {
    PlanSite {
        layer,
        kind,
        boundary: Boundary::Input,
        treatment,
    }
}

const SPIKE_KINDS: [SiteKind; 2] = [SiteKind::Out, SiteKind::Down];

/// Down and out projections whose input or output `max_abs` exceeds `theta`
/// get `high`; the rest of the linear layers are quantized to `bits`.
pub fn build_targeted_plan(
    report: &SpikeReport,
    theta: f32,
    high: HighPrecision,
    bits: u8,
) -> Result<PrecisionPlan> {
    if theta.is_nan() || theta <= 0.0 {
        return Err(invalid(format!("threshold must be positive, got {theta}")));
    }
    if report.sites.is_empty() {
        return Err(invalid("spike report has no sites"));
    }
    let spiked: BTreeSet<(usize, SiteKind)> = detect_threshold(report, theta)
        .into_iter()
        .filter(|s| SPIKE_KINDS.contains(&s.kind))
        .map(|s| (s.layer, s.kind))
        .collect();
    let mut plan = PrecisionPlan::uniform(report.model_id.clone(), bits)?;
    plan.name = "mix".into();
    plan.sites = spiked
        .into_iter()
        .map(|(layer, kind)| high_site(layer, kind, high.treatment()))
        .collect();
    plan.sort_sites();
    Ok(plan)
}

/// Same number of high-precision sites as `reference`, drawn uniformly
/// without replacement from the down/out projections the reference does not
/// use. Draws come from ChaCha8 seeded with `seed`.
pub fn build_random_plan(
    report: &SpikeReport,
    reference: &PrecisionPlan,
    seed: u64,
) -> Result<PrecisionPlan> {
    let taken = reference.high_precision_sites();
    if taken.is_empty() {
        return Err(invalid("reference plan has no high-precision sites"));
    }
    let treatments: Vec<Treatment> = reference
        .sites
        .iter()
        .filter(|s| s.treatment.is_high_precision())
        .map(|s| s.treatment)
        .collect();
    let mut candidates: Vec<(usize, SiteKind)> = (1..=report.n_layers)
        .flat_map(|l| SPIKE_KINDS.into_iter().map(move |k| (l, k)))
        .filter(|c| !taken.contains(c))
        .collect();
    let n = taken.len();
    if candidates.len() < n {
        return Err(invalid(format!(
            "random plan needs {n} sites but only {} candidates remain",
            candidates.len()
        )));
    }
    // partial Fisher-Yates
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    let mut plan = PrecisionPlan {
        name: format!("random-s{seed}"),
        sites: candidates[..n]
            .iter()
            .zip(&treatments)
            .map(|(&(layer, kind), &t)| high_site(layer, kind, t))
            .collect(),
        seed: Some(seed),
        ..reference.clone()
    };
    plan.sort_sites();
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{Detections, SiteStats};

    /// A report over `n_layers` where every site reads 1.0 except the listed
    /// output maxima.
    fn report(n_layers: usize, spikes: &[(usize, SiteKind, f32)]) -> SpikeReport {
        let sites = SiteId::all(n_layers)
            .map(|site| {
                let max_abs = spikes
                    .iter()
                    .find(|(l, k, _)| site.layer == *l && site.kind == *k && site.boundary == Boundary::Output)
                    .map(|s| s.2)
                    .unwrap_or(1.0);
                SiteStats::synthetic(site, max_abs)
            })
            .collect();
        SpikeReport {
            schema_version: crate::profile::REPORT_SCHEMA_VERSION,
            model_id: "test".into(),
            stream_id: "none".into(),
            n_layers,
            sites,
            detections: Detections::default(),
        }
    }

    fn high(plan: &PrecisionPlan) -> Vec<(usize, SiteKind)> {
        plan.high_precision_sites()
    }

    #[test]
    fn scope_is_the_seven_linear_layers() {
        let s = default_scope();
        assert_eq!(s.len(), 7);
        assert!(s.contains(&SiteKind::Down));
        assert!(!s.contains(&SiteKind::RmsnormIn));
        assert!(!s.contains(&SiteKind::RmsnormPost));
    }

    #[test]
    fn llama3_8b_like_report() {
        let r = report(32, &[(2, SiteKind::Down, 2500.0), (32, SiteKind::Down, 400.0)]);
        let plan = build_targeted_plan(&r, 100.0, HighPrecision::Fp16, 8).unwrap();
        assert_eq!(high(&plan), vec![(2, SiteKind::Down), (32, SiteKind::Down)]);
        assert_eq!(plan.treatment(2, SiteKind::Down), Treatment::Fp16);
        assert_eq!(plan.treatment(3, SiteKind::Down), Treatment::Int(8));
        assert_eq!(plan.treatment(3, SiteKind::RmsnormIn), Treatment::Full);
    }

    #[test]
    fn mistral_7b_like_report() {
        let r = report(
            32,
            &[
                (2, SiteKind::Down, 900.0),
                (31, SiteKind::Down, 300.0),
                (32, SiteKind::Down, 700.0),
                (32, SiteKind::Out, 150.0),
                // spikes outside down/out never get high precision
                (5, SiteKind::Q, 500.0),
            ],
        );
        let plan = build_targeted_plan(&r, 100.0, HighPrecision::Fp8E5M2, 8).unwrap();
        assert_eq!(
            high(&plan),
            vec![(2, SiteKind::Down), (31, SiteKind::Down), (32, SiteKind::Out), (32, SiteKind::Down)]
        );
    }

    #[test]
    fn quiet_report_gives_uniform_plan() {
        let plan = build_targeted_plan(&report(4, &[]), 100.0, HighPrecision::Fp16, 8).unwrap();
        assert!(plan.sites.is_empty());
        assert!(build_targeted_plan(&report(4, &[]), 0.0, HighPrecision::Fp16, 8).is_err());
    }

    #[test]
    fn random_plan_is_disjoint_deterministic_and_same_size() {
        let r = report(8, &[(2, SiteKind::Down, 400.0), (8, SiteKind::Out, 200.0)]);
        let reference = build_targeted_plan(&r, 100.0, HighPrecision::Fp16, 8).unwrap();
        let a = build_random_plan(&r, &reference, 7).unwrap();
        let b = build_random_plan(&r, &reference, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed, Some(7));
        assert_eq!(high(&a).len(), 2);
        for s in high(&a) {
            assert!(!high(&reference).contains(&s));
            assert!(SPIKE_KINDS.contains(&s.1));
        }
        let others: BTreeSet<_> = (0..20).map(|s| high(&build_random_plan(&r, &reference, s).unwrap())).collect();
        assert!(others.len() > 1);
    }

    #[test]
    fn random_plan_errors() {
        let r = report(1, &[(1, SiteKind::Down, 400.0)]);
        let reference = build_targeted_plan(&r, 100.0, HighPrecision::Fp16, 8).unwrap();
        // one candidate (out@1) is enough for one site
        assert!(build_random_plan(&r, &reference, 0).is_ok());
        let mut greedy = reference.clone();
        greedy.sites.push(high_site(1, SiteKind::Out, Treatment::Fp16));
        assert!(build_random_plan(&r, &greedy, 0).is_err());
        let uniform = PrecisionPlan::uniform("m", 8).unwrap();
        assert!(build_random_plan(&r, &uniform, 0).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let r = report(8, &[(2, SiteKind::Down, 400.0)]);
        let plan = build_targeted_plan(&r, 100.0, HighPrecision::Fp8E5M2, 6)
            .unwrap()
            .with_exclude_token(Some(0));
        let json = plan.to_json().unwrap();
        assert_eq!(PrecisionPlan::from_json(&json).unwrap(), plan);
        assert!(json.contains("\"treatment\": \"fp8_e5m2\""));
        assert!(json.contains("\"default_treatment\": \"int6\""));

        let bad_scope = json.replace("\"q\",", "\"q\", \"rmsnorm_in\",");
        assert!(PrecisionPlan::from_json(&bad_scope).is_err());
        let bad_treatment = json.replace("fp8_e5m2", "int12");
        assert!(PrecisionPlan::from_json(&bad_treatment).is_err());
    }

    #[test]
    fn treatment_strings() {
        for t in [
            Treatment::Int(2),
            Treatment::Int(8),
            Treatment::Fp8(Fp8Format::E4M3),
            Treatment::Fp8(Fp8Format::E5M2),
            Treatment::Fp16,
            Treatment::Full,
        ] {
            assert_eq!(t.to_string().parse::<Treatment>().unwrap(), t);
        }
        assert!("int1".parse::<Treatment>().is_err());
        assert!("bf16".parse::<Treatment>().is_err());
    }
}
