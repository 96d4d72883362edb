//! A small LLaMA-architecture decoder with quantization hooks.
//!
//! Pre-norm blocks: `x → rmsnorm_in → attention(q, k, v, RoPE, causal) → out
//! → residual → rmsnorm_post → down(silu(gate) · up) → residual`, then a final
//! RMSNorm and the LM head. Weights are stored `[in, out]`, so a projection is
//! `x · W`. The gate nonlinearity is assumed to be SiLU.
//!
//! With a [`PrecisionPlan`], each linear projection applies its treatment to
//! its input activations (and optionally its weights) before the matmul.
//! Normalization, the attention score/value products and softmax always run
//! in full precision.

mod container;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use container::{load_bundle, read_bundle, save_bundle, write_bundle, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use synth::{synth_model, BotSpike, InjectionSpec, SpikeInjection};

use crate::error::{invalid, Error, Result};
use crate::formats::{fp16_round_tensor, fp8_quantize_tensor};
use crate::plan::{PlanScaleMode, PrecisionPlan, Treatment};
use crate::quant::{self, QuantSpec, Scale, ScaleMode};
use crate::site::{SiteId, SiteKind};
use crate::tensor::{self, matmul, rms_norm, softmax_in_place, Tensor};

pub type Token = u32;

/// Beginning-of-text token id; streams start with it.
pub const BOT_TOKEN: Token = 0;

/// Context length of the evaluation setup the defaults mirror.
pub const DEFAULT_MAX_CONTEXT: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_base: f32,
    pub rms_eps: f32,
    pub max_context: usize,
}

impl Default for ModelConfig {
    /// The desk-scale configuration: 8 layers, width 64, 4 heads.
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 172,
            vocab_size: 256,
            rope_base: tensor::DEFAULT_ROPE_BASE,
            rms_eps: tensor::DEFAULT_RMS_EPS,
            max_context: DEFAULT_MAX_CONTEXT,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} is not a multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(invalid(format!("head_dim {} must be even", self.head_dim())));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(invalid("rope_base must be positive"));
        }
        if !(self.rms_eps >= 0.0 && self.rms_eps.is_finite()) {
            return Err(invalid("rms_eps must be non-negative"));
        }
        Ok(())
    }

    pub fn check_site(&self, site: &SiteId) -> Result<()> {
        if site.layer == 0 || site.layer > self.n_layers {
            return Err(Error::UnknownSite(format!(
                "{site} (model has layers 1..={})",
                self.n_layers
            )));
        }
        Ok(())
    }

    /// `(in, out)` dimensions of a linear projection.
    pub fn projection_shape(&self, kind: SiteKind) -> Option<(usize, usize)> {
        let d = self.d_model;
        match kind {
            SiteKind::Q | SiteKind::K | SiteKind::V | SiteKind::Out => Some((d, d)),
            SiteKind::Gate | SiteKind::Up => Some((d, self.d_ff)),
            SiteKind::Down => Some((self.d_ff, d)),
            SiteKind::RmsnormIn | SiteKind::RmsnormPost => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub out: Tensor,
    pub gate: Tensor,
    pub up: Tensor,
    pub down: Tensor,
    pub rmsnorm_in: Tensor,
    pub rmsnorm_post: Tensor,
}

impl LayerWeights {
    pub fn get(&self, kind: SiteKind) -> &Tensor {
        match kind {
            SiteKind::Q => &self.q,
            SiteKind::K => &self.k,
            SiteKind::V => &self.v,
            SiteKind::Out => &self.out,
            SiteKind::Gate => &self.gate,
            SiteKind::Up => &self.up,
            SiteKind::Down => &self.down,
            SiteKind::RmsnormIn => &self.rmsnorm_in,
            SiteKind::RmsnormPost => &self.rmsnorm_post,
        }
    }

    pub fn get_mut(&mut self, kind: SiteKind) -> &mut Tensor {
        match kind {
            SiteKind::Q => &mut self.q,
            SiteKind::K => &mut self.k,
            SiteKind::V => &mut self.v,
            SiteKind::Out => &mut self.out,
            SiteKind::Gate => &mut self.gate,
            SiteKind::Up => &mut self.up,
            SiteKind::Down => &mut self.down,
            SiteKind::RmsnormIn => &mut self.rmsnorm_in,
            SiteKind::RmsnormPost => &mut self.rmsnorm_post,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model_id: String,
    pub config: ModelConfig,
    /// `[vocab_size, d_model]`
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    /// `[d_model, vocab_size]`
    pub lm_head: Tensor,
    pub static_scales: Option<BTreeMap<SiteId, Scale>>,
}

impl ModelBundle {
    /// Checks every weight shape against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let expect = |name: String, t: &Tensor, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )))
            }
        };
        expect("embedding".into(), &self.embedding, &[c.vocab_size, c.d_model])?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                c.n_layers,
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for kind in SiteKind::ALL {
                let shape = match c.projection_shape(kind) {
                    Some((a, b)) => vec![a, b],
                    None => vec![c.d_model],
                };
                expect(format!("layers.{}.{kind}", i + 1), layer.get(kind), &shape)?;
            }
        }
        expect("final_norm".into(), &self.final_norm, &[c.d_model])?;
        expect("lm_head".into(), &self.lm_head, &[c.d_model, c.vocab_size])?;
        if let Some(scales) = &self.static_scales {
            for site in scales.keys() {
                c.check_site(site)?;
            }
        }
        Ok(())
    }

    pub fn layer(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer - 1]
    }
}

/// Receives every tapped activation during a forward pass.
pub trait Observer {
    fn observe(&mut self, site: SiteId, x: &Tensor);
}

/// An observer that ignores everything.
pub struct NoTap;

impl Observer for NoTap {
    fn observe(&mut self, _: SiteId, _: &Tensor) {}
}

fn check_tokens(config: &ModelConfig, tokens: &[Token]) -> Result<()> {
    if tokens.is_empty() {
        return Err(invalid("token sequence is empty"));
    }
    if tokens.len() > config.max_context {
        return Err(invalid(format!(
            "sequence of {} tokens exceeds the context of {}",
            tokens.len(),
            config.max_context
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(invalid(format!(
            "token {t} is outside the vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn apply_activation(
    t: Treatment,
    x: &Tensor,
    site: SiteId,
    plan: &PrecisionPlan,
    model: &ModelBundle,
) -> Result<Tensor> {
    match t {
        Treatment::Full => Ok(x.clone()),
        Treatment::Fp16 => fp16_round_tensor(x),
        Treatment::Fp8(f) => fp8_quantize_tensor(x, f),
        Treatment::Int(bits) => {
            let mode = match plan.scale_mode {
                PlanScaleMode::Dynamic => ScaleMode::Dynamic,
                PlanScaleMode::Static => {
                    let scale = model
                        .static_scales
                        .as_ref()
                        .and_then(|s| s.get(&site))
                        .ok_or_else(|| {
                            invalid(format!("static plan needs a calibrated scale for {site}"))
                        })?;
                    ScaleMode::Static(*scale)
                }
            };
            let spec = QuantSpec::new(bits, plan.granularity, mode)?;
            let exclude = plan.exclude_token.filter(|&e| e < x.num_rows());
            quant::quantize_rows(x, &spec, exclude)
        }
    }
}

fn apply_weight(t: Treatment, w: &Tensor) -> Result<Tensor> {
    match t {
        Treatment::Full => Ok(w.clone()),
        Treatment::Fp16 => fp16_round_tensor(w),
        Treatment::Fp8(f) => fp8_quantize_tensor(w, f),
        Treatment::Int(bits) => quant::quantize_weights(w, bits),
    }
}

struct Pass<'a, O: Observer + ?Sized> {
    model: &'a ModelBundle,
    plan: Option<&'a PrecisionPlan>,
    obs: &'a mut O,
}

impl<O: Observer + ?Sized> Pass<'_, O> {
    fn linear(&mut self, layer: usize, kind: SiteKind, x: &Tensor) -> Result<Tensor> {
        let input_site = SiteId::input(layer, kind);
        self.obs.observe(input_site, x);
        let w = self.model.layer(layer).get(kind);
        let y = match self.plan {
            Some(plan) => {
                let t = plan.treatment(layer, kind);
                let xq = apply_activation(t, x, input_site, plan, self.model)?;
                if plan.apply_to_weights && t != Treatment::Full {
                    matmul(&xq, &apply_weight(t, w)?)?
                } else {
                    matmul(&xq, w)?
                }
            }
            None => matmul(x, w)?,
        };
        self.obs.observe(SiteId::output(layer, kind), &y);
        Ok(y)
    }

    fn norm(&mut self, layer: usize, kind: SiteKind, x: &Tensor) -> Result<Tensor> {
        self.obs.observe(SiteId::input(layer, kind), x);
        let eps = self.model.config.rms_eps;
        let y = rms_norm(x, self.model.layer(layer).get(kind), eps)?;
        self.obs.observe(SiteId::output(layer, kind), &y);
        Ok(y)
    }

    fn block(&mut self, layer: usize, x: Tensor) -> Result<Tensor> {
        let h = self.norm(layer, SiteKind::RmsnormIn, &x)?;
        let q = self.linear(layer, SiteKind::Q, &h)?;
        let k = self.linear(layer, SiteKind::K, &h)?;
        let v = self.linear(layer, SiteKind::V, &h)?;
        let attn = causal_attention(&self.model.config, q, k, &v)?;
        let o = self.linear(layer, SiteKind::Out, &attn)?;
        let x = x.add(&o)?;

        let h = self.norm(layer, SiteKind::RmsnormPost, &x)?;
        let gate = self.linear(layer, SiteKind::Gate, &h)?;
        let up = self.linear(layer, SiteKind::Up, &h)?;
        let act = tensor::silu(&gate)?.mul(&up)?;
        let down = self.linear(layer, SiteKind::Down, &act)?;
        x.add(&down)
    }
}

/// Multi-head causal self-attention on `[seq, d_model]` projections.
fn causal_attention(config: &ModelConfig, q: Tensor, k: Tensor, v: &Tensor) -> Result<Tensor> {
    let seq = q.num_rows();
    let (heads, hd, d) = (config.n_heads, config.head_dim(), config.d_model);
    let q = tensor::rope_rotate(&q.reshape(vec![seq, heads, hd])?, config.rope_base)?;
    let k = tensor::rope_rotate(&k.reshape(vec![seq, heads, hd])?, config.rope_base)?;
    let (q, k, v) = (q.data(), k.data(), v.data());
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0f32; seq * d];
    let mut scores = vec![0.0f32; seq];
    for h in 0..heads {
        for t in 0..seq {
            let qt = &q[t * d + h * hd..t * d + (h + 1) * hd];
            for (s, score) in scores[..=t].iter_mut().enumerate() {
                let ks = &k[s * d + h * hd..s * d + (h + 1) * hd];
                *score = qt.iter().zip(ks).fold(0.0f32, |acc, (a, b)| acc + a * b) * scale;
            }
            softmax_in_place(&mut scores[..=t]);
            let o = &mut out[t * d + h * hd..t * d + (h + 1) * hd];
            for (s, &p) in scores[..=t].iter().enumerate() {
                let vs = &v[s * d + h * hd..s * d + (h + 1) * hd];
                for (oi, vi) in o.iter_mut().zip(vs) {
                    *oi += p * vi;
                }
            }
        }
    }
    Tensor::new(vec![seq, d], out)
}

/// Forward pass, reporting every tapped activation to `obs`. Returns logits
/// `[seq, vocab_size]`.
pub fn forward_observed<O: Observer + ?Sized>(
    model: &ModelBundle,
    tokens: &[Token],
    plan: Option<&PrecisionPlan>,
    obs: &mut O,
) -> Result<Tensor> {
    let config = &model.config;
    check_tokens(config, tokens)?;
    if let Some(p) = plan {
        p.validate_for(config)?;
    }
    let d = config.d_model;
    let mut x = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        x.extend_from_slice(model.embedding.row(t as usize));
    }
    let mut x = Tensor::new(vec![tokens.len(), d], x)?;
    let mut pass = Pass { model, plan, obs };
    for layer in 1..=config.n_layers {
        x = pass.block(layer, x)?;
    }
    let x = rms_norm(&x, &model.final_norm, config.rms_eps)?;
    matmul(&x, &model.lm_head)
}

/// Logits for `tokens`; `plan == None` runs in full precision.
pub fn forward(model: &ModelBundle, tokens: &[Token], plan: Option<&PrecisionPlan>) -> Result<Tensor> {
    forward_observed(model, tokens, plan, &mut NoTap)
}

/// `exp` of the mean next-token negative log-likelihood of `tokens[1..]`.
pub fn perplexity_from_logits(logits: &Tensor, tokens: &[Token]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(invalid("perplexity needs at least two tokens"));
    }
    if logits.num_rows() != tokens.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} tokens",
            logits.num_rows(),
            tokens.len()
        )));
    }
    let mut nll = 0.0f64;
    for t in 1..tokens.len() {
        let row = logits.row(t - 1);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
        nll += lse - row[tokens[t] as usize] as f64;
    }
    Ok((nll / (tokens.len() - 1) as f64).exp())
}

pub fn perplexity(model: &ModelBundle, tokens: &[Token], plan: Option<&PrecisionPlan>) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(invalid("perplexity needs at least two tokens"));
    }
    perplexity_from_logits(&forward(model, tokens, plan)?, tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantError {
    pub logit_mse: f64,
    pub logit_max_abs_err: f64,
    pub ppl_full: f64,
    pub ppl: f64,
    pub ppl_delta: f64,
}

/// Logit and perplexity deviation of `plan` from the full-precision model.
pub fn quant_error(model: &ModelBundle, tokens: &[Token], plan: &PrecisionPlan) -> Result<QuantError> {
    let full = forward(model, tokens, None)?;
    let quant = forward(model, tokens, Some(plan))?;
    let mut sq = 0.0f64;
    let mut worst = 0.0f64;
    for (&a, &b) in full.data().iter().zip(quant.data()) {
        let e = (a as f64 - b as f64).abs();
        sq += e * e;
        worst = worst.max(e);
    }
    let ppl_full = perplexity_from_logits(&full, tokens)?;
    let ppl = perplexity_from_logits(&quant, tokens)?;
    Ok(QuantError {
        logit_mse: sq / full.len() as f64,
        logit_max_abs_err: worst,
        ppl_full,
        ppl,
        ppl_delta: ppl - ppl_full,
    })
}
