//! Spike-aware mixed-precision fake quantization for small LLaMA-style
//! decoders.
//!
//! The crate covers numeric kernels ([`tensor`]), low-precision formats
//! ([`formats`]), uniform integer fake quantization ([`quant`]), activation
//! profiling ([`profile`]), precision planning ([`plan`]) and an executable
//! decoder with synthetic spike injection ([`model`]).

pub mod error;
pub mod formats;
pub mod model;
pub mod plan;
pub mod profile;
pub mod quant;
pub mod site;
pub mod tensor;
pub mod tokens;

pub use error::{Error, Result};
pub use formats::Fp8Format;
pub use model::{ModelBundle, ModelConfig, Token};
pub use plan::{HighPrecision, PrecisionPlan, Treatment};
pub use profile::SpikeReport;
pub use quant::{Granularity, QuantSpec, Scale, ScaleMode};
pub use site::{Boundary, SiteId, SiteKind};
pub use tensor::Tensor;
