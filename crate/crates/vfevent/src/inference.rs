//! Text-only inference: resolve a visual context for a query (actual image,
//! synthesized, retrieved, zero image, or none at all) and classify with the
//! fused model. Covers the L / V / RET ablation modes.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::Prediction;
use crate::data::{load_image, ImageArray, Instance};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::seeding;

/// How the visual context of a query is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualMode {
    /// Decode the query's own paired image.
    Actual,
    /// Synthesize an image from the query text with the imaginator.
    Imagine,
    /// Nearest support image by text-embedding cosine similarity.
    Retrieve,
    /// All-zero image through the visual encoder.
    Zero,
    /// No visual input: the visual embedding slot is zeroed (ablation L).
    TextOnly,
    /// No textual input: zero text embedding, actual image (ablation V).
    NoText,
}

impl fmt::Display for VisualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VisualMode::Actual => "actual",
            VisualMode::Imagine => "imagine",
            VisualMode::Retrieve => "retrieve",
            VisualMode::Zero => "zero",
            VisualMode::TextOnly => "textonly",
            VisualMode::NoText => "notext",
        };
        f.write_str(s)
    }
}

impl FromStr for VisualMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "actual" => Ok(VisualMode::Actual),
            "imagine" => Ok(VisualMode::Imagine),
            "retrieve" => Ok(VisualMode::Retrieve),
            "zero" => Ok(VisualMode::Zero),
            "textonly" | "l" => Ok(VisualMode::TextOnly),
            "notext" | "v" => Ok(VisualMode::NoText),
            other => Err(Error::Config(format!("unknown visual mode '{other}'"))),
        }
    }
}

/// A retrieval pool entry: a support instance paired with its decoded image.
pub type PoolEntry = (Instance, ImageArray);

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The pool image whose paired text is most cosine-similar to the query
/// text; ties break towards the lowest pool index.
pub fn retrieve_image<'p>(
    text: &str,
    pool: &'p [PoolEntry],
    model: &ModelState,
) -> Result<&'p ImageArray> {
    if pool.is_empty() {
        return Err(Error::Config("retrieval pool is empty".into()));
    }
    let query = model.encode_text_eval(text)?;
    let mut best = 0usize;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, (inst, _)) in pool.iter().enumerate() {
        let emb = model.encode_text_eval(&inst.text)?;
        let sim = cosine(&query.values, &emb.values);
        if sim > best_sim {
            best_sim = sim;
            best = i;
        }
    }
    Ok(&pool[best].1)
}

/// Resolve the visual context for a query under a mode. `None` means the
/// visual embedding slot is zeroed rather than encoding any image.
pub fn resolve_visual_context(
    query: &Instance,
    mode: VisualMode,
    model: &ModelState,
    pool: &[PoolEntry],
    image_root: &Path,
    global_seed: u64,
) -> Result<Option<ImageArray>> {
    match mode {
        VisualMode::Actual | VisualMode::NoText => {
            let r = query.image_ref.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "mode {mode} requires query '{}' to carry an image",
                    query.id
                ))
            })?;
            Ok(Some(load_image(&image_root.join(r), model.resolution)?))
        }
        VisualMode::Imagine => {
            let seed = seeding::derive_seed_for_id(global_seed, "imagine", &query.id);
            let tokens = model.tokenizer.encode(&query.text);
            Ok(Some(model.imaginator.synthesize(
                &tokens,
                model.imaginator.sample_steps,
                seed,
            )?))
        }
        VisualMode::Retrieve => Ok(Some(retrieve_image(&query.text, pool, model)?.clone())),
        VisualMode::Zero => Ok(Some(ImageArray::zeros(model.resolution))),
        VisualMode::TextOnly => Ok(None),
    }
}

/// Classify one query with the resolved visual context.
pub fn infer(
    query: &Instance,
    mode: VisualMode,
    model: &ModelState,
    pool: &[PoolEntry],
    image_root: &Path,
    global_seed: u64,
) -> Result<Prediction> {
    let visual = resolve_visual_context(query, mode, model, pool, image_root, global_seed)?;
    let text = match mode {
        VisualMode::NoText => None,
        _ => Some(query.text.as_str()),
    };
    model.predict(text, visual.as_ref())
}

/// Build the default retrieval pool from the support set's image-bearing
/// (text, image) pairs.
pub fn support_pool(
    support: &[Instance],
    image_root: &Path,
    resolution: usize,
) -> Result<Vec<PoolEntry>> {
    support
        .iter()
        .filter(|i| i.image_ref.is_some())
        .map(|i| {
            let img = load_image(&image_root.join(i.image_ref.as_ref().unwrap()), resolution)?;
            Ok((i.clone(), img))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predicted: String,
    pub probs: Vec<f64>,
    pub mode: String,
}

/// Classify a query list and return one record per query, in input order.
pub fn infer_batch(
    queries: &[Instance],
    mode: VisualMode,
    model: &ModelState,
    pool: &[PoolEntry],
    image_root: &Path,
    global_seed: u64,
) -> Result<Vec<PredictionRecord>> {
    queries
        .iter()
        .map(|q| {
            let p = infer(q, mode, model, pool, image_root, global_seed)?;
            Ok(PredictionRecord {
                id: q.id.clone(),
                predicted: p.predicted,
                probs: p.probs,
                mode: mode.to_string(),
            })
        })
        .collect()
}

/// Write predictions as JSONL: {id, predicted, probs, mode}.
pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Validation(format!("serializing prediction: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}
