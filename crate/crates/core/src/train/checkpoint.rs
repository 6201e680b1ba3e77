//! Single-file training checkpoints in safetensors format.
//!
//! Tensor names are namespaced (`gen.`, `gen_buf.`, `disc.`, `disc_buf.`,
//! `adam_g.m.`, `adam_g.v.`, `adam_d.m.`, `adam_d.v.`). Scalar state and the
//! configuration snapshot live in one JSON document under the `header`
//! metadata key, so the file bytes are a pure function of the state.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "darkdeblur-ckpt-v1";
const HEADER_KEY: &str = "header";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    step: u64,
    adam_g_steps: u64,
    adam_d_steps: Option<u64>,
    config: TrainConfig,
}

pub fn path_for(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:08}.safetensors"))
}

/// Highest-step checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt-")?.strip_suffix(".safetensors")?.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn collect(out: &mut BTreeMap<String, Tensor>, prefix: &str, items: impl IntoIterator<Item = (String, Tensor)>) {
    for (k, t) in items {
        out.insert(format!("{prefix}{k}"), t);
    }
}

fn store_tensors(store: &ParamStore) -> (Vec<(String, Tensor)>, Vec<(String, Tensor)>) {
    let p = store.params().iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    let b = store.buffers().iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    (p, b)
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let (p, b) = store_tensors(&state.gen_store);
    collect(&mut tensors, "gen.", p);
    collect(&mut tensors, "gen_buf.", b);
    let (m, v) = state.adam_g.moments();
    collect(&mut tensors, "adam_g.m.", m.clone());
    collect(&mut tensors, "adam_g.v.", v.clone());
    if let Some(adv) = &state.adversary {
        let (p, b) = store_tensors(&adv.store);
        collect(&mut tensors, "disc.", p);
        collect(&mut tensors, "disc_buf.", b);
        let (m, v) = adv.adam.moments();
        collect(&mut tensors, "adam_d.m.", m.clone());
        collect(&mut tensors, "adam_d.v.", v.clone());
    }
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        step: state.step,
        adam_g_steps: state.adam_g.steps(),
        adam_d_steps: state.adversary.as_ref().map(|a| a.adam.steps()),
        config: state.config.clone(),
    };
    let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header)?)]);
    let contiguous: Vec<(String, Tensor)> = tensors
        .into_iter()
        .map(|(k, t)| Ok((k, t.contiguous()?)))
        .collect::<Result<_>>()?;
    safetensors::serialize(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(meta))
        .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))
}

/// Writes atomically (temp file + rename).
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("safetensors.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take_prefixed(all: &mut HashMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let keys: Vec<String> = all.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
    keys.into_iter()
        .map(|k| {
            let t = all.remove(&k).expect("key listed");
            (k[prefix.len()..].to_string(), t)
        })
        .collect()
}

fn restore_store(store: &ParamStore, params: BTreeMap<String, Tensor>, buffers: BTreeMap<String, Tensor>, what: &str) -> Result<()> {
    if params.keys().ne(store.params().keys()) {
        return Err(Error::Checkpoint(format!("{what} parameter names do not match the configured architecture")));
    }
    if buffers.keys().ne(store.buffers().keys()) {
        return Err(Error::Checkpoint(format!("{what} buffer names do not match the configured architecture")));
    }
    for (k, t) in params.iter().chain(&buffers) {
        store.assign(k, t)?;
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<TrainState> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("not a safetensors archive: {e}")))?;
    let header_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint("archive has no checkpoint header".into()))?;
    let header: Header =
        serde_json::from_str(header_json).map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {:?} (expected {CHECKPOINT_FORMAT:?})",
            header.format
        )));
    }
    let mut all = candle_core::safetensors::load_buffer(bytes, device)?;
    let mut state = TrainState::new(header.config, device)?;
    state.step = header.step;

    let gp = take_prefixed(&mut all, "gen.");
    let gb = take_prefixed(&mut all, "gen_buf.");
    restore_store(&state.gen_store, gp, gb, "generator")?;
    let m = take_prefixed(&mut all, "adam_g.m.");
    let v = take_prefixed(&mut all, "adam_g.v.");
    state.adam_g.restore(header.adam_g_steps, m, v)?;

    match (&mut state.adversary, header.adam_d_steps) {
        (Some(adv), Some(t)) => {
            let dp = take_prefixed(&mut all, "disc.");
            let db = take_prefixed(&mut all, "disc_buf.");
            restore_store(&adv.store, dp, db, "discriminator")?;
            let m = take_prefixed(&mut all, "adam_d.m.");
            let v = take_prefixed(&mut all, "adam_d.v.");
            adv.adam.restore(t, m, v)?;
        }
        (None, None) => {}
        _ => return Err(Error::Checkpoint("discriminator presence disagrees with the ablation setting".into())),
    }
    if let Some(extra) = all.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}` in checkpoint")));
    }
    Ok(state)
}

pub fn load(path: &Path, device: &Device) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, device).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
