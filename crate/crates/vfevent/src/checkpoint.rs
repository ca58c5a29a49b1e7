//! Unified checkpoint archive: one self-describing keyed binary file holding
//! every parameter array (encoders, head, imaginator), the trainable mask,
//! tokenizer vocabulary and the model configuration.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, Tokenizer};
use crate::error::{Error, Result};
use crate::imaginator::ImaginatorConfig;
use crate::model::ModelState;

const MAGIC: &[u8; 4] = b"VFCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    labels: Vec<String>,
    vocab: Vec<String>,
    hash_buckets: usize,
    resolution: usize,
    encoder: EncoderConfig,
    imaginator: ImaginatorConfig,
    trainable: BTreeMap<String, bool>,
    omega: f64,
}

pub fn save(model: &ModelState, path: &Path) -> Result<()> {
    let meta = Meta {
        labels: model.labels.clone(),
        vocab: model.tokenizer.vocab.clone(),
        hash_buckets: model.tokenizer.hash_buckets,
        resolution: model.resolution,
        encoder: model.encoder_config.clone(),
        imaginator: model.imaginator_config.clone(),
        trainable: model.imaginator.trainable.clone(),
        omega: model.imaginator.omega,
    };
    let meta_bytes = serde_json::to_vec(&meta)
        .map_err(|e| Error::Checkpoint(format!("serializing metadata: {e}")))?;

    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);

    let entries = model.param_entries();
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, values) in entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("opening {}: {e}", path.display())))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut ver = [0u8; 4];
    f.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u64(&mut f)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    f.read_exact(&mut meta_bytes)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("parsing metadata: {e}")))?;

    let tokenizer = Tokenizer::from_vocab(meta.vocab, meta.hash_buckets);
    let mut model = ModelState::init(
        meta.labels,
        tokenizer,
        meta.encoder,
        meta.imaginator,
        meta.resolution,
        0,
    )?;
    model.imaginator.trainable = meta.trainable;
    model.imaginator.omega = meta.omega;

    let count = read_u64(&mut f)? as usize;
    let mut arrays: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u64(&mut f)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let len = read_u64(&mut f)? as usize;
        let mut values = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            f.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        arrays.insert(name, values);
    }

    for (name, param) in model.param_entries_mut() {
        let stored = arrays
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
        if stored.len() != param.len() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has {} values, expected {}",
                stored.len(),
                param.len()
            )));
        }
        *param = stored;
    }
    if !arrays.is_empty() {
        let extra: Vec<String> = arrays.into_keys().collect();
        return Err(Error::Checkpoint(format!(
            "unexpected parameters in archive: {}",
            extra.join(", ")
        )));
    }
    Ok(model)
}
