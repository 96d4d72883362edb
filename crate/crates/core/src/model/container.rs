//! The SAQT weight container.
//!
//! Little-endian: magic `SAQT`, version `u32`, tensor count `u32`, then per
//! tensor a `u32` name length, the UTF-8 name, a dtype byte, a rank byte,
//! `u64` dims and the payload. dtype 0 is f32; dtype 1 is UTF-8 text, used for
//! the `__config__` JSON and the optional `__scales__` JSON.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerWeights, ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::quant::Scale;
use crate::site::{SiteId, SiteKind};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"SAQT";
pub const CONTAINER_VERSION: u32 = 1;
const CONFIG_SCHEMA_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_TEXT: u8 = 1;
const CONFIG_NAME: &str = "__config__";
const SCALES_NAME: &str = "__scales__";

#[derive(Serialize, Deserialize)]
struct ConfigDoc {
    schema_version: u32,
    model_id: String,
    config: ModelConfig,
}

#[derive(Serialize, Deserialize)]
struct ScaleEntry {
    #[serde(flatten)]
    site: SiteId,
    scale: Scale,
}

enum Entry {
    F32(Tensor),
    Text(String),
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn write_entry(out: &mut Vec<u8>, name: &str, entry: &Entry) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    match entry {
        Entry::F32(t) => {
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Entry::Text(s) => {
            out.push(DTYPE_TEXT);
            out.push(1);
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
    }
}

/// Serializes `model` to bytes in canonical tensor order.
pub fn write_bundle(model: &ModelBundle) -> Result<Vec<u8>> {
    model.validate()?;
    let mut entries: Vec<(String, Entry)> = Vec::new();
    let doc = ConfigDoc {
        schema_version: CONFIG_SCHEMA_VERSION,
        model_id: model.model_id.clone(),
        config: model.config.clone(),
    };
    entries.push((CONFIG_NAME.into(), Entry::Text(serde_json::to_string(&doc)?)));
    if let Some(scales) = &model.static_scales {
        let list: Vec<ScaleEntry> = scales
            .iter()
            .map(|(site, scale)| ScaleEntry { site: *site, scale: *scale })
            .collect();
        entries.push((SCALES_NAME.into(), Entry::Text(serde_json::to_string(&list)?)));
    }
    entries.push(("embedding".into(), Entry::F32(model.embedding.clone())));
    for (i, layer) in model.layers.iter().enumerate() {
        for kind in SiteKind::ALL {
            entries.push((format!("layers.{}.{kind}", i + 1), Entry::F32(layer.get(kind).clone())));
        }
    }
    entries.push(("final_norm".into(), Entry::F32(model.final_norm.clone())));
    entries.push(("lm_head".into(), Entry::F32(model.lm_head.clone())));

    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, entry) in &entries {
        write_entry(&mut out, name, entry);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| fmt_err(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_entry(cur: &mut Cursor<'_>) -> Result<(String, Entry)> {
    let name_len = cur.u32()? as usize;
    let name = std::str::from_utf8(cur.take(name_len)?)
        .map_err(|_| fmt_err("tensor name is not UTF-8"))?
        .to_string();
    let dtype = cur.u8()?;
    let rank = cur.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = usize::try_from(cur.u64()?).map_err(|_| fmt_err(format!("{name}: dim too large")))?;
        shape.push(d);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fmt_err(format!("{name}: element count overflows")))?;
    match dtype {
        DTYPE_F32 => {
            let bytes = count
                .checked_mul(4)
                .ok_or_else(|| fmt_err(format!("{name}: payload too large")))?;
            let data = cur
                .take(bytes)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| fmt_err(format!("{name}: {e}")))?;
            Ok((name, Entry::F32(t)))
        }
        DTYPE_TEXT => {
            if rank != 1 {
                return Err(fmt_err(format!("{name}: text tensors have rank 1")));
            }
            let s = std::str::from_utf8(cur.take(count)?)
                .map_err(|_| fmt_err(format!("{name}: text is not UTF-8")))?;
            Ok((name, Entry::Text(s.to_string())))
        }
        other => Err(fmt_err(format!("{name}: unknown dtype code {other}"))),
    }
}

/// Parses a container; every tensor must be present exactly once.
pub fn read_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4).ok() != Some(CONTAINER_MAGIC.as_slice()) {
        return Err(fmt_err("not a SAQT container (bad magic)"));
    }
    let version = cur.u32()?;
    if version != CONTAINER_VERSION {
        return Err(fmt_err(format!("unsupported container version {version}")));
    }
    let count = cur.u32()?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let (name, entry) = read_entry(&mut cur)?;
        if entries.insert(name.clone(), entry).is_some() {
            return Err(fmt_err(format!("duplicate tensor `{name}`")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    let text = |entries: &mut BTreeMap<String, Entry>, name: &str| -> Result<Option<String>> {
        match entries.remove(name) {
            None => Ok(None),
            Some(Entry::Text(s)) => Ok(Some(s)),
            Some(Entry::F32(_)) => Err(fmt_err(format!("`{name}` must be a text tensor"))),
        }
    };
    let doc: ConfigDoc = serde_json::from_str(
        &text(&mut entries, CONFIG_NAME)?.ok_or_else(|| fmt_err("missing `__config__`"))?,
    )?;
    if doc.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(fmt_err(format!("unsupported config schema {}", doc.schema_version)));
    }
    let static_scales = match text(&mut entries, SCALES_NAME)? {
        None => None,
        Some(s) => {
            let list: Vec<ScaleEntry> = serde_json::from_str(&s)?;
            let mut map = BTreeMap::new();
            for e in list {
                if map.insert(e.site, e.scale).is_some() {
                    return Err(fmt_err(format!("duplicate scale for {}", e.site)));
                }
            }
            Some(map)
        }
    };

    let mut tensor = |name: String| -> Result<Tensor> {
        match entries.remove(&name) {
            Some(Entry::F32(t)) => Ok(t),
            Some(Entry::Text(_)) => Err(fmt_err(format!("`{name}` must be an f32 tensor"))),
            None => Err(fmt_err(format!("missing tensor `{name}`"))),
        }
    };
    let config = doc.config;
    config.validate()?;
    let embedding = tensor("embedding".into())?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 1..=config.n_layers {
        let mut get = |kind: SiteKind| tensor(format!("layers.{l}.{kind}"));
        layers.push(LayerWeights {
            q: get(SiteKind::Q)?,
            k: get(SiteKind::K)?,
            v: get(SiteKind::V)?,
            out: get(SiteKind::Out)?,
            gate: get(SiteKind::Gate)?,
            up: get(SiteKind::Up)?,
            down: get(SiteKind::Down)?,
            rmsnorm_in: get(SiteKind::RmsnormIn)?,
            rmsnorm_post: get(SiteKind::RmsnormPost)?,
        });
    }
    let final_norm = tensor("final_norm".into())?;
    let lm_head = tensor("lm_head".into())?;
    if let Some(name) = entries.keys().next() {
        return Err(fmt_err(format!("unknown tensor `{name}`")));
    }
    let bundle = ModelBundle {
        model_id: doc.model_id,
        config,
        embedding,
        layers,
        final_norm,
        lm_head,
        static_scales,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(model: &ModelBundle, path: &Path) -> Result<()> {
    let bytes = write_bundle(model)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_bundle(&bytes)
}
