//! Seeded random decoders with optional injected spikes.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LayerWeights, ModelBundle, ModelConfig, BOT_TOKEN};
use crate::error::{invalid, Result};
use crate::site::SiteKind;
use crate::tensor::Tensor;

/// Scale output channel `channel` of projection `kind` in `layer` by `scale`.
/// For the RMSNorm kinds the gain of that channel is scaled instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeInjection {
    pub layer: usize,
    pub kind: SiteKind,
    pub channel: usize,
    pub scale: f32,
}

/// Set channel `channel` of the BOT token's embedding to `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BotSpike {
    pub channel: usize,
    pub scale: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub injections: Vec<SpikeInjection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bot: Option<BotSpike>,
}

impl InjectionSpec {
    pub fn single(layer: usize, kind: SiteKind, channel: usize, scale: f32) -> Self {
        Self {
            injections: vec![SpikeInjection { layer, kind, channel, scale }],
            bot: None,
        }
    }

    pub fn with_bot(mut self, channel: usize, scale: f32) -> Self {
        self.bot = Some(BotSpike { channel, scale });
        self
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for inj in &self.injections {
            if inj.layer == 0 || inj.layer > config.n_layers {
                return Err(invalid(format!(
                    "injection layer {} outside 1..={}",
                    inj.layer, config.n_layers
                )));
            }
            let width = config.projection_shape(inj.kind).map_or(config.d_model, |(_, out)| out);
            if inj.channel >= width {
                return Err(invalid(format!(
                    "injection channel {} outside {} output channels of {}",
                    inj.channel, width, inj.kind
                )));
            }
            if !(inj.scale >= 1.0 && inj.scale.is_finite()) {
                return Err(invalid(format!("injection scale must be >= 1, got {}", inj.scale)));
            }
        }
        if let Some(bot) = &self.bot {
            if bot.channel >= config.d_model {
                return Err(invalid(format!(
                    "BOT channel {} outside d_model {}",
                    bot.channel, config.d_model
                )));
            }
            if !(bot.scale > 0.0 && bot.scale.is_finite()) {
                return Err(invalid(format!("BOT scale must be positive, got {}", bot.scale)));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f32) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u = (rng.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32);
            (2.0 * u - 1.0) * bound
        })
        .collect();
    Tensor::new(shape, data)
}

fn ones(n: usize) -> Result<Tensor> {
    Tensor::new(vec![n], vec![1.0; n])
}

fn linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    uniform(rng, vec![fan_in, fan_out], (3.0 / fan_in as f32).sqrt())
}

/// Scales output channel `c` of an `[in, out]` matrix.
fn scale_column(w: &mut Tensor, c: usize, s: f32) -> Result<()> {
    let (rows, cols) = w.dims2()?;
    let mut data = w.data().to_vec();
    for r in 0..rows {
        data[r * cols + c] *= s;
    }
    *w = Tensor::new(vec![rows, cols], data)?;
    Ok(())
}

fn scale_entry(v: &mut Tensor, c: usize, s: f32) -> Result<()> {
    let shape = v.shape().to_vec();
    let mut data = v.data().to_vec();
    data[c] *= s;
    *v = Tensor::new(shape, data)?;
    Ok(())
}

/// Builds a deterministic random model.
///
/// Weights are uniform with variance `1/fan_in`; embeddings have unit
/// variance and all RMSNorm gains are one. Draw order is the embedding, then
/// per layer `q, k, v, out, gate, up, down`, then the LM head.
pub fn synth_model(config: &ModelConfig, inject: &InjectionSpec, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    inject.validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, ff) = (config.d_model, config.d_ff);
    let mut embedding = uniform(&mut rng, vec![config.vocab_size, d], 3f32.sqrt())?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            q: linear(&mut rng, d, d)?,
            k: linear(&mut rng, d, d)?,
            v: linear(&mut rng, d, d)?,
            out: linear(&mut rng, d, d)?,
            gate: linear(&mut rng, d, ff)?,
            up: linear(&mut rng, d, ff)?,
            down: linear(&mut rng, ff, d)?,
            rmsnorm_in: ones(d)?,
            rmsnorm_post: ones(d)?,
        });
    }
    let lm_head = linear(&mut rng, d, config.vocab_size)?;

    for inj in &inject.injections {
        let w = layers[inj.layer - 1].get_mut(inj.kind);
        if inj.kind.is_linear() {
            scale_column(w, inj.channel, inj.scale)?;
        } else {
            scale_entry(w, inj.channel, inj.scale)?;
        }
    }
    if let Some(bot) = inject.bot {
        let mut data = embedding.into_data();
        data[BOT_TOKEN as usize * d + bot.channel] = bot.scale;
        embedding = Tensor::new(vec![config.vocab_size, d], data)?;
    }

    let bundle = ModelBundle {
        model_id: format!("synth-s{seed}"),
        config: config.clone(),
        embedding,
        layers,
        final_norm: ones(d)?,
        lm_head,
        static_scales: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 3, d_model: 16, n_heads: 2, d_ff: 24, vocab_size: 32, ..ModelConfig::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_model(&small(), &InjectionSpec::default(), 9).unwrap();
        let b = synth_model(&small(), &InjectionSpec::default(), 9).unwrap();
        let c = synth_model(&small(), &InjectionSpec::default(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.embedding, c.embedding);
    }

    #[test]
    fn weight_bounds() {
        let m = synth_model(&small(), &InjectionSpec::default(), 1).unwrap();
        let a = (3.0f32 / 16.0).sqrt();
        assert!(m.layers[0].q.max_abs() <= a);
        assert!(m.layers[0].down.max_abs() <= (3.0f32 / 24.0).sqrt());
        assert!(m.embedding.max_abs() <= 3f32.sqrt());
    }

    #[test]
    fn injection_scales_one_channel() {
        let base = synth_model(&small(), &InjectionSpec::default(), 1).unwrap();
        let spec = InjectionSpec::single(2, SiteKind::Down, 5, 300.0);
        let m = synth_model(&small(), &spec, 1).unwrap();
        let (w0, w1) = (&base.layers[1].down, &m.layers[1].down);
        for r in 0..24 {
            for c in 0..16 {
                let (a, b) = (w0.data()[r * 16 + c], w1.data()[r * 16 + c]);
                assert_eq!(b, if c == 5 { a * 300.0 } else { a });
            }
        }
        assert_eq!(base.layers[0], m.layers[0]);
    }

    #[test]
    fn bot_spike_row() {
        let m = synth_model(&small(), &InjectionSpec::default().with_bot(3, 40.0), 1).unwrap();
        assert_eq!(m.embedding.row(0)[3], 40.0);
    }

    #[test]
    fn bad_targets() {
        let c = small();
        for spec in [
            InjectionSpec::single(0, SiteKind::Down, 0, 2.0),
            InjectionSpec::single(4, SiteKind::Down, 0, 2.0),
            InjectionSpec::single(1, SiteKind::Down, 16, 2.0),
            InjectionSpec::single(1, SiteKind::Gate, 24, 2.0),
            InjectionSpec::single(1, SiteKind::Down, 0, 0.5),
            InjectionSpec::default().with_bot(16, 2.0),
        ] {
            assert!(synth_model(&c, &spec, 0).is_err(), "{spec:?}");
        }
        assert!(synth_model(&c, &InjectionSpec::single(1, SiteKind::Gate, 23, 1.0), 0).is_ok());
    }
}
