//! Versioned checkpoint container: 8-byte magic, length-prefixed JSON
//! metadata (config + tensor directory + stage flags), then raw
//! little-endian f32 payloads in directory order, followed by the Adam
//! moment tensors when optimizer state is saved.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, TtsModel};
use crate::optim::Adam;
use crate::params::ParamGroup;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PSYN0001";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    stage1_done: bool,
    stage2_done: bool,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorMeta>,
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_f32s(payload: &[u8], offset: &mut usize, count: usize) -> Result<Vec<f32>> {
    let bytes = count * 4;
    let end = *offset + bytes;
    if end > payload.len() {
        return Err(Error::Format("checkpoint: truncated payload".into()));
    }
    let out = payload[*offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *offset = end;
    Ok(out)
}

pub fn save(path: &Path, model: &TtsModel, optimizer: Option<&Adam>) -> Result<()> {
    let meta = Metadata {
        config: model.config.clone(),
        stage1_done: model.stage1_done,
        stage2_done: model.stage2_done,
        optimizer_step: optimizer.map(|o| o.state().2),
        tensors: model
            .store
            .entries()
            .iter()
            .map(|e| TensorMeta {
                name: e.name.clone(),
                shape: e.shape.clone(),
                group: e.group,
            })
            .collect(),
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    for e in model.store.entries() {
        push_f32s(&mut buf, &e.data);
    }
    if let Some(adam) = optimizer {
        let (m, v, _) = adam.state();
        for t in m {
            push_f32s(&mut buf, t);
        }
        for t in v {
            push_f32s(&mut buf, t);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Rebuilds the model from its config (fixed registration order), then
/// overwrites every tensor from the payload. Returns the optimizer too
/// when its state was saved.
pub fn load(path: &Path) -> Result<(TtsModel, Option<Adam>)> {
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut file = fs::File::open(path)?;
    let mut head = [0u8; 12];
    file.read_exact(&mut head).map_err(|_| fail("truncated header"))?;
    if &head[0..8] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic"));
    }
    let meta_len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut meta_json = vec![0u8; meta_len];
    file.read_exact(&mut meta_json).map_err(|_| fail("truncated metadata"))?;
    let meta: Metadata =
        serde_json::from_slice(&meta_json).map_err(|e| fail(&format!("metadata parse: {e}")))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let mut model = TtsModel::new(meta.config, 0)?;
    if meta.tensors.len() != model.store.len() {
        return Err(fail(&format!(
            "directory lists {} tensors, model has {}",
            meta.tensors.len(),
            model.store.len()
        )));
    }
    let mut offset = 0usize;
    for (idx, tm) in meta.tensors.iter().enumerate() {
        let entry = &model.store.entries()[idx];
        if entry.name != tm.name || entry.shape != tm.shape {
            return Err(fail(&format!(
                "tensor {idx}: expected {} {:?}, found {} {:?}",
                entry.name, entry.shape, tm.name, tm.shape
            )));
        }
        let count = tm.shape.iter().product();
        *model.store.data_mut(idx) = take_f32s(&payload, &mut offset, count)?;
    }
    model.stage1_done = meta.stage1_done;
    model.stage2_done = meta.stage2_done;
    let optimizer = match meta.optimizer_step {
        Some(step) => {
            let mut m = Vec::with_capacity(model.store.len());
            let mut v = Vec::with_capacity(model.store.len());
            for e in model.store.entries() {
                m.push(take_f32s(&payload, &mut offset, e.data.len())?);
            }
            for e in model.store.entries() {
                v.push(take_f32s(&payload, &mut offset, e.data.len())?);
            }
            Some(Adam::restore(&model.store, m, v, step))
        }
        None => None,
    };
    if offset != payload.len() {
        return Err(fail("trailing bytes after payload"));
    }
    Ok((model, optimizer))
}
