use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use spikequant::model::{self, InjectionSpec, ModelBundle, ModelConfig};
use spikequant::plan::{self, PlanScaleMode};
use spikequant::profile::{self, write_curves_csv};
use spikequant::quant::calibrate_static_scales;
use spikequant::{tokens, PrecisionPlan, SiteId, SiteKind, SpikeReport, Token};

use crate::artifacts::{compare_csv, write_atomic, write_sidecar, Manifest, Metrics, METRICS_SCHEMA_VERSION};
use crate::cli::{CalibrateArgs, CompareArgs, EvalArgs, PlanArgs, ProfileArgs, ScaleArg, SynthArgs, TokenSource};

/// A flag combination clap cannot rule out on its own.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_model(path: &Path) -> Result<ModelBundle> {
    model::load_bundle(path).with_context(|| format!("reading model {}", path.display()))
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))
}

fn load_report(path: &Path) -> Result<SpikeReport> {
    SpikeReport::from_json(&read_text(path, "report")?).with_context(|| format!("parsing report {}", path.display()))
}

fn load_plan(path: &Path) -> Result<PrecisionPlan> {
    PrecisionPlan::from_json(&read_text(path, "plan")?).with_context(|| format!("parsing plan {}", path.display()))
}

/// Parses whitespace-separated token ids.
pub fn parse_token_file(text: &str) -> Result<Vec<Token>> {
    text.split_whitespace()
        .map(|t| t.parse::<Token>().with_context(|| format!("bad token id `{t}`")))
        .collect()
}

fn resolve_tokens(src: &TokenSource, len: usize, config: &ModelConfig, manifest: &mut Manifest) -> Result<Vec<Token>> {
    let toks = if let Some(path) = &src.tokens {
        manifest.inputs.insert("tokens".into(), path.display().to_string());
        parse_token_file(&read_text(path, "tokens")?)?
    } else if let Some(seed) = src.seed_stream {
        manifest.seed = Some(seed);
        manifest.inputs.insert("tokens".into(), format!("seed-stream:{seed}:{len}"));
        tokens::seeded_stream(seed, len, config.vocab_size)?
    } else {
        manifest.inputs.insert("tokens".into(), format!("corpus:{len}"));
        tokens::corpus_stream(len, config.vocab_size)?
    };
    Ok(toks)
}

fn finish(out: &Path, bytes: &[u8], manifest: &Manifest, started: Instant) -> Result<()> {
    write_atomic(out, bytes)?;
    write_sidecar(out, manifest, started.elapsed())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let started = Instant::now();
    let config = ModelConfig {
        n_layers: a.layers,
        d_model: a.d_model,
        n_heads: a.heads,
        d_ff: a.d_ff,
        vocab_size: a.vocab,
        max_context: a.max_context,
        ..ModelConfig::default()
    };
    let spec = InjectionSpec { injections: a.inject, bot: a.bot_spike };
    let bundle = model::synth_model(&config, &spec, a.seed).map_err(|e| UsageError(e.to_string()))?;
    let bytes = model::write_bundle(&bundle)?;
    let mut manifest = Manifest::new("synth").output(&a.out);
    manifest.seed = Some(a.seed);
    finish(&a.out, &bytes, &manifest, started)?;
    println!(
        "wrote {} ({} layers, d_model {}, {} injections)",
        a.out.display(),
        config.n_layers,
        config.d_model,
        spec.injections.len() + spec.bot.is_some() as usize
    );
    Ok(())
}

pub fn profile(a: ProfileArgs) -> Result<()> {
    let started = Instant::now();
    let bundle = load_model(&a.model)?;
    let mut manifest = Manifest::new("profile").input("model", &a.model);
    let toks = resolve_tokens(&a.source, a.len, &bundle.config, &mut manifest)?;
    let report = profile::collect_stats(&bundle, &toks)?;
    if let Some(dir) = &a.curves {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for kind in SiteKind::ALL {
            let rows = profile::export_curves(&report, kind)?;
            let mut buf = Vec::new();
            write_curves_csv(&rows, &mut buf)?;
            let path = dir.join(format!("{kind}.csv"));
            write_atomic(&path, &buf)?;
            manifest = manifest.output(&path);
        }
    }
    manifest = manifest.output(&a.out);
    finish(&a.out, report.to_json()?.as_bytes(), &manifest, started)?;
    let flagged = &report.detections.threshold;
    println!("profiled {} sites over {} tokens; {} above theta={}", report.sites.len(), toks.len(), flagged.len(), report.detections.theta);
    for s in flagged {
        println!("  {s}  max_abs={}", report.max_abs(*s)?);
    }
    Ok(())
}

pub fn plan(a: PlanArgs) -> Result<()> {
    let started = Instant::now();
    let report = load_report(&a.report)?;
    let mut manifest = Manifest::new("plan").input("report", &a.report);
    let mut p = if a.full {
        PrecisionPlan::full(report.model_id.clone())
    } else if a.random {
        let reference_path = a.reference.as_deref().ok_or_else(|| UsageError("--random needs --reference".into()))?;
        let seed = a.seed.ok_or_else(|| UsageError("--random needs --seed".into()))?;
        manifest = manifest.input("reference", reference_path);
        manifest.seed = Some(seed);
        let reference = load_plan(reference_path)?;
        plan::build_random_plan(&report, &reference, seed)?
    } else if a.uniform {
        PrecisionPlan::uniform(report.model_id.clone(), a.bits)?
    } else {
        plan::build_targeted_plan(&report, a.theta, a.high.into(), a.bits)?
    };
    // the random plan inherits its settings from the reference
    if !a.random && !a.full {
        p = p
            .with_granularity(a.granularity.into())
            .with_weights(!a.no_weights)
            .with_exclude_token(a.exclude_token)
            .with_scale_mode(match a.scale {
                ScaleArg::Dynamic => PlanScaleMode::Dynamic,
                ScaleArg::Static => PlanScaleMode::Static,
            });
    }
    if let Some(name) = a.name {
        p = p.with_name(name);
    }
    p.validate()?;
    manifest = manifest.output(&a.out);
    manifest.plan = Some(a.out.display().to_string());
    finish(&a.out, p.to_json()?.as_bytes(), &manifest, started)?;
    let high: Vec<String> = p.high_precision_sites().iter().map(|(l, k)| format!("{k}@{l}")).collect();
    println!("plan `{}`: {} high-precision sites [{}]", p.name, high.len(), high.join(", "));
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let started = Instant::now();
    let mut bundle = load_model(&a.model)?;
    let mut manifest = Manifest::new("calibrate").input("model", &a.model);
    let toks = resolve_tokens(&a.source, a.len, &bundle.config, &mut manifest)?;
    let sites: Vec<SiteId> = (1..=bundle.config.n_layers)
        .flat_map(|l| SiteKind::LINEAR.into_iter().map(move |k| SiteId::input(l, k)))
        .collect();
    bundle.static_scales = Some(calibrate_static_scales(&bundle, &toks, &sites, a.bits)?);
    manifest = manifest.output(&a.out);
    finish(&a.out, &model::write_bundle(&bundle)?, &manifest, started)?;
    println!("calibrated {} sites at {} bits", sites.len(), a.bits);
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let bundle = load_model(&a.model)?;
    let p = load_plan(&a.plan)?;
    let mut manifest = Manifest::new("eval").input("model", &a.model).input("plan", &a.plan);
    manifest.plan = Some(a.plan.display().to_string());
    let toks = resolve_tokens(&a.source, a.len, &bundle.config, &mut manifest)?;
    p.validate_for(&bundle.config)
        .with_context(|| format!("plan {} does not fit model {}", a.plan.display(), a.model.display()))?;
    let err = model::quant_error(&bundle, &toks, &p)?;
    manifest = manifest.output(&a.out);
    let metrics = Metrics {
        schema_version: METRICS_SCHEMA_VERSION,
        plan: p.name.clone(),
        model_id: bundle.model_id.clone(),
        stream_id: profile::stream_id(&toks),
        tokens: toks.len(),
        ppl_full: err.ppl_full,
        ppl: err.ppl,
        ppl_delta: err.ppl_delta,
        logit_mse: err.logit_mse,
        logit_max_abs_err: err.logit_max_abs_err,
        manifest: manifest.clone(),
    };
    finish(&a.out, (serde_json::to_string_pretty(&metrics)? + "\n").as_bytes(), &manifest, started)?;
    println!(
        "{}: ppl {:.4} (full {:.4}, delta {:+.4}), logit mse {:.6e}, max abs err {:.4}",
        metrics.plan, metrics.ppl, metrics.ppl_full, metrics.ppl_delta, metrics.logit_mse, metrics.logit_max_abs_err
    );
    Ok(())
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = Manifest::new("compare");
    let mut rows = Vec::with_capacity(a.metrics.len());
    for (i, path) in a.metrics.iter().enumerate() {
        manifest = manifest.input(&format!("metrics.{}", i + 1), path);
        let m = Metrics::from_json(&read_text(path, "metrics")?).with_context(|| format!("parsing {}", path.display()))?;
        rows.push(m);
    }
    let csv = compare_csv(&rows)?;
    manifest = manifest.output(&a.out);
    finish(&a.out, &csv, &manifest, started)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}
