//! Output files: atomic writes, run manifests and the metrics schema.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Column order of the comparison table.
pub const COMPARE_COLUMNS: [&str; 9] = [
    "plan",
    "model_id",
    "stream_id",
    "tokens",
    "ppl_full",
    "ppl",
    "ppl_delta",
    "logit_mse",
    "logit_max_abs_err",
];

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// What a command read and wrote. Paths are recorded as given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
    pub outputs: Vec<String>,
    pub toolkit_version: String,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            inputs: BTreeMap::new(),
            seed: None,
            plan: None,
            outputs: Vec::new(),
            toolkit_version: TOOLKIT_VERSION.into(),
        }
    }

    pub fn input(mut self, key: &str, path: &Path) -> Self {
        self.inputs.insert(key.into(), path.display().to_string());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    schema_version: u32,
    #[serde(flatten)]
    manifest: &'a Manifest,
    duration_ms: f64,
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// The full manifest, wall-clock time included, next to the primary output.
pub fn write_sidecar(out: &Path, manifest: &Manifest, elapsed: Duration) -> Result<()> {
    let doc = Sidecar {
        schema_version: MANIFEST_SCHEMA_VERSION,
        manifest,
        duration_ms: elapsed.as_secs_f64() * 1e3,
    };
    write_atomic(&sidecar_path(out), (serde_json::to_string_pretty(&doc)? + "\n").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub plan: String,
    pub model_id: String,
    pub stream_id: String,
    pub tokens: usize,
    pub ppl_full: f64,
    pub ppl: f64,
    pub ppl_delta: f64,
    pub logit_mse: f64,
    pub logit_max_abs_err: f64,
    /// Everything except timing, so that reruns are byte-identical.
    pub manifest: Manifest,
}

impl Metrics {
    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        match v.get("schema_version").and_then(|x| x.as_u64()) {
            Some(n) if n == METRICS_SCHEMA_VERSION as u64 => {}
            Some(n) => bail!("metrics schema {n} is not supported (expected {METRICS_SCHEMA_VERSION})"),
            None => bail!("metrics file has no schema_version"),
        }
        Ok(serde_json::from_value(v)?)
    }
}

/// Renders metrics as CSV, one row per plan in input order.
pub fn compare_csv(rows: &[Metrics]) -> Result<Vec<u8>> {
    let mut seen = BTreeMap::new();
    for (i, m) in rows.iter().enumerate() {
        if let Some(j) = seen.insert(m.plan.as_str(), i) {
            bail!("plan `{}` appears in inputs {} and {}", m.plan, j + 1, i + 1);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARE_COLUMNS)?;
    for m in rows {
        w.write_record([
            m.plan.clone(),
            m.model_id.clone(),
            m.stream_id.clone(),
            m.tokens.to_string(),
            m.ppl_full.to_string(),
            m.ppl.to_string(),
            m.ppl_delta.to_string(),
            m.logit_mse.to_string(),
            m.logit_max_abs_err.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}
