//! Symmetric uniform fake quantization with an absolute-max range.
//!
//! `x̂ = round(x / Δ) · Δ` with `Δ = max|x| / (2^(b-1) - 1)`. The integer is
//! clamped to `±(2^(b-1) - 1)`, so the most negative code is unused. Rounding
//! is half-to-even.
//!
//! A [`Scale`] keeps `Δ` as the exact ratio `range / levels` instead of a
//! rounded `f32`. That makes ties such as `1.0 / (2/3) = 1.5` behave like
//! they do in exact arithmetic, and it reconstructs `±max|x|` exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{self, ModelBundle, Observer, Token};
use crate::site::SiteId;
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Largest integer code for a `bits`-wide symmetric grid: `2^(b-1) - 1`.
pub fn max_code(bits: u8) -> u32 {
    (1u32 << (bits - 1)) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(invalid(format!(
            "bit-width must be in [{MIN_BITS}, {MAX_BITS}], got {bits}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerTensor,
    /// One scale per row of the flattened `[tokens, features]` view.
    PerToken,
}

/// Step size of a quantization grid, `Δ = range / levels`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScaleRepr", into = "ScaleRepr")]
pub struct Scale {
    range: f32,
    levels: u32,
}

#[derive(Serialize, Deserialize)]
struct ScaleRepr {
    delta: f32,
    range: f32,
    levels: u32,
}

impl TryFrom<ScaleRepr> for Scale {
    type Error = Error;

    fn try_from(r: ScaleRepr) -> Result<Self> {
        Scale::from_ratio(r.range, r.levels)
    }
}

impl From<Scale> for ScaleRepr {
    fn from(s: Scale) -> Self {
        ScaleRepr {
            delta: s.delta(),
            range: s.range,
            levels: s.levels,
        }
    }
}

impl Scale {
    fn from_ratio(range: f32, levels: u32) -> Result<Self> {
        if !(range > 0.0 && range.is_finite()) || levels == 0 {
            return Err(invalid(format!(
                "quantization step must be positive, got {range}/{levels}"
            )));
        }
        Ok(Self { range, levels })
    }

    /// A scale with the given step `Δ`.
    pub fn from_delta(delta: f32) -> Result<Self> {
        Self::from_ratio(delta, 1)
    }

    /// The absolute-max scale for a range `max_abs` at `bits`; a zero range
    /// gives `Δ = 1`.
    pub fn from_max_abs(max_abs: f32, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        let levels = max_code(bits);
        if max_abs == 0.0 {
            return Ok(Self { range: levels as f32, levels });
        }
        Self::from_ratio(max_abs, levels)
    }

    pub fn delta(&self) -> f32 {
        (self.range as f64 / self.levels as f64) as f32
    }

    pub fn range(&self) -> f32 {
        self.range
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// Integer code for `x`, clamped to `±qmax`.
    #[inline]
    pub fn code(&self, x: f32, qmax: u32) -> i32 {
        let q = (x as f64 * self.levels as f64 / self.range as f64).round_ties_even();
        q.clamp(-(qmax as f64), qmax as f64) as i32
    }

    /// Value of integer code `k`.
    #[inline]
    pub fn value(&self, k: i32) -> f32 {
        (k as f64 * self.range as f64 / self.levels as f64) as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ScaleMode {
    /// Recompute the scale from each live tensor.
    #[default]
    Dynamic,
    /// Use a fixed scale, typically from calibration.
    Static(Scale),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    bits: u8,
    pub granularity: Granularity,
    pub scale_mode: ScaleMode,
}

impl QuantSpec {
    pub fn new(bits: u8, granularity: Granularity, scale_mode: ScaleMode) -> Result<Self> {
        check_bits(bits)?;
        Ok(Self {
            bits,
            granularity,
            scale_mode,
        })
    }

    pub fn per_tensor(bits: u8) -> Result<Self> {
        Self::new(bits, Granularity::PerTensor, ScaleMode::Dynamic)
    }

    pub fn per_token(bits: u8) -> Result<Self> {
        Self::new(bits, Granularity::PerToken, ScaleMode::Dynamic)
    }

    /// Static per-tensor quantization with step `delta`.
    pub fn with_static_delta(bits: u8, delta: f32) -> Result<Self> {
        Self::new(bits, Granularity::PerTensor, ScaleMode::Static(Scale::from_delta(delta)?))
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }
}

/// `Δ = max|x| / (2^(b-1) - 1)`, or 1 for an all-zero tensor.
pub fn compute_scale(x: &Tensor, bits: u8) -> Result<f32> {
    Ok(Scale::from_max_abs(x.max_abs(), bits)?.delta())
}

fn quantize_slice(src: &[f32], dst: &mut [f32], scale: &Scale, qmax: u32) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = scale.value(scale.code(v, qmax));
    }
}

fn max_abs_rows<'a>(rows: impl Iterator<Item = &'a [f32]>) -> f32 {
    rows.flatten().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Shared path for all activation quantization. Row `exclude`, if given, is
/// copied through and ignored when computing dynamic scales.
pub(crate) fn quantize_rows(x: &Tensor, spec: &QuantSpec, exclude: Option<usize>) -> Result<Tensor> {
    let qmax = max_code(spec.bits);
    let d = x.last_dim();
    let rows = x.num_rows();
    if let Some(e) = exclude {
        if e >= rows {
            return Err(Error::OutOfRange { index: e, len: rows });
        }
    }
    let kept = |i: &usize| Some(*i) != exclude;
    let mut out = x.data().to_vec();
    match (spec.granularity, spec.scale_mode) {
        (_, ScaleMode::Static(scale)) => {
            for i in (0..rows).filter(kept) {
                quantize_slice(x.row(i), &mut out[i * d..(i + 1) * d], &scale, qmax);
            }
        }
        (Granularity::PerTensor, ScaleMode::Dynamic) => {
            let max = max_abs_rows((0..rows).filter(kept).map(|i| x.row(i)));
            let scale = Scale::from_max_abs(max, spec.bits)?;
            for i in (0..rows).filter(kept) {
                quantize_slice(x.row(i), &mut out[i * d..(i + 1) * d], &scale, qmax);
            }
        }
        (Granularity::PerToken, ScaleMode::Dynamic) => {
            for i in (0..rows).filter(kept) {
                let row = x.row(i);
                let scale = Scale::from_max_abs(max_abs_rows(std::iter::once(row)), spec.bits)?;
                quantize_slice(row, &mut out[i * d..(i + 1) * d], &scale, qmax);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Quantize-dequantize `x` according to `spec`.
///
/// Per-token granularity needs at least two axes; tokens are the rows of the
/// flattened `[.., features]` view.
pub fn fake_quantize(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    if spec.granularity == Granularity::PerToken && x.rank() < 2 {
        return Err(Error::Shape(format!(
            "per-token quantization needs a [tokens, features] tensor, got {:?}",
            x.shape()
        )));
    }
    quantize_rows(x, spec, None)
}

/// Like [`fake_quantize`], but row `excluded` passes through unchanged and
/// does not take part in the scale.
pub fn fake_quantize_excluding_token(x: &Tensor, spec: &QuantSpec, excluded: usize) -> Result<Tensor> {
    x.dims2()?;
    quantize_rows(x, spec, Some(excluded))
}

/// Per-tensor absolute-max quantization of a weight matrix.
pub fn quantize_weights(w: &Tensor, bits: u8) -> Result<Tensor> {
    quantize_rows(w, &QuantSpec::per_tensor(bits)?, None)
}

struct MaxTap<'a> {
    wanted: &'a [SiteId],
    maxima: BTreeMap<SiteId, f32>,
}

impl Observer for MaxTap<'_> {
    fn observe(&mut self, site: SiteId, x: &Tensor) {
        if self.wanted.contains(&site) {
            let m = self.maxima.entry(site).or_insert(0.0);
            *m = m.max(x.max_abs());
        }
    }
}

/// Static scales from a full-precision pass over `tokens`: the running
/// absolute max at each site, turned into a scale for `bits`.
///
/// Streams longer than the model context are processed in consecutive
/// windows; maxima merge across windows.
pub fn calibrate_static_scales(
    model: &ModelBundle,
    tokens: &[Token],
    sites: &[SiteId],
    bits: u8,
) -> Result<BTreeMap<SiteId, Scale>> {
    check_bits(bits)?;
    if tokens.is_empty() {
        return Err(invalid("calibration stream is empty"));
    }
    for s in sites {
        model.config.check_site(s)?;
    }
    let mut tap = MaxTap {
        wanted: sites,
        maxima: sites.iter().map(|s| (*s, 0.0)).collect(),
    };
    for window in tokens.chunks(model.config.max_context) {
        model::forward_observed(model, window, None, &mut tap)?;
    }
    tap.maxima
        .into_iter()
        .map(|(site, max)| Ok((site, Scale::from_max_abs(max, bits)?)))
        .collect()
}
