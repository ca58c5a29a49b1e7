//! Dataset loading, image decoding and episodic N+1-way K-shot sampling.
//!
//! The manifest is UTF-8 JSONL, one record per line:
//! `{"id": "...", "text": "...", "event_type": "...", "image": "rel/path.png" | null}`
//! with `event_type = "none"` for non-events. An optional sidecar file
//! (`<manifest>.labels`, one name per line) pins the canonical event-type
//! ordering; otherwise the sorted set of distinct non-none labels is used.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

pub const NONE_LABEL: &str = "none";

/// One sentence with an optional paired image and its gold event type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub label: String,
    pub image_ref: Option<PathBuf>,
}

impl Instance {
    /// Lowercase whitespace tokens of the sentence.
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    /// Ordered event types, excluding "none". Index order defines label ids;
    /// "none" always takes the last index.
    pub event_types: Vec<String>,
    pub image_root: PathBuf,
}

impl Dataset {
    /// All labels in canonical index order: event types then "none".
    pub fn labels(&self) -> Vec<String> {
        let mut out = self.event_types.clone();
        out.push(NONE_LABEL.to_string());
        out
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        if label == NONE_LABEL {
            Some(self.event_types.len())
        } else {
            self.event_types.iter().position(|l| l == label)
        }
    }

    pub fn resolve_image(&self, inst: &Instance) -> Option<PathBuf> {
        inst.image_ref.as_ref().map(|r| self.image_root.join(r))
    }
}

/// An (N+1)-way K-shot support set plus the remaining instances as queries.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<Instance>,
    pub queries: Vec<Instance>,
    pub n_ways: usize,
    pub k_shots: usize,
    pub seed: u64,
    /// Selected event types (excluding "none"), canonical order.
    pub event_types: Vec<String>,
}

impl Episode {
    pub fn labels(&self) -> Vec<String> {
        let mut out = self.event_types.clone();
        out.push(NONE_LABEL.to_string());
        out
    }
}

/// Canonical in-memory image: interleaved RGB, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    pub pixels: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl ImageArray {
    pub fn zeros(resolution: usize) -> Self {
        ImageArray {
            pixels: vec![0.0; 3 * resolution * resolution],
            height: resolution,
            width: resolution,
        }
    }

    pub fn from_pixels(pixels: Vec<f64>, resolution: usize) -> Result<Self> {
        if pixels.len() != 3 * resolution * resolution {
            return Err(Error::Input(format!(
                "pixel count {} does not match resolution {}",
                pixels.len(),
                resolution
            )));
        }
        if !pixels.iter().all(|p| p.is_finite() && (-1.0..=1.0).contains(p)) {
            return Err(Error::Validation("pixel values must be finite and in [-1, 1]".into()));
        }
        Ok(ImageArray { pixels, height: resolution, width: resolution })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Mean value per channel (r, g, b).
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c];
            }
        }
        let n = (self.height * self.width) as f64;
        [sums[0] / n, sums[1] / n, sums[2] / n]
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRecord {
    id: String,
    text: String,
    event_type: String,
    #[serde(default)]
    image: Option<String>,
}

/// Load and validate a JSONL manifest. `image_root` defaults to the manifest's
/// parent directory when not given.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    load_dataset_with_root(path, None)
}

pub fn load_dataset_with_root(path: &Path, image_root: Option<&Path>) -> Result<Dataset> {
    let raw = fs::read_to_string(path)?;
    let root = image_root
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());

    let mut instances = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if rec.text.trim().is_empty() {
            return Err(Error::Schema(format!("record '{}': text is empty", rec.id)));
        }
        if !seen_ids.insert(rec.id.clone()) {
            return Err(Error::Validation(format!("duplicate id '{}'", rec.id)));
        }
        instances.push(Instance {
            id: rec.id,
            text: rec.text,
            label: rec.event_type,
            image_ref: rec.image.map(PathBuf::from),
        });
    }
    if instances.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }

    let dangling: Vec<String> = instances
        .iter()
        .filter(|i| {
            i.image_ref
                .as_ref()
                .map(|r| !root.join(r).is_file())
                .unwrap_or(false)
        })
        .map(|i| i.id.clone())
        .collect();
    if !dangling.is_empty() {
        return Err(Error::Validation(format!(
            "dangling image_ref for ids: {}",
            dangling.join(", ")
        )));
    }

    let event_types = match sidecar_labels(path)? {
        Some(labels) => {
            let set: HashSet<&String> = labels.iter().collect();
            for inst in &instances {
                if inst.label != NONE_LABEL && !set.contains(&inst.label) {
                    return Err(Error::Validation(format!(
                        "record '{}' has label '{}' not in the sidecar label list",
                        inst.id, inst.label
                    )));
                }
            }
            labels
        }
        None => {
            let set: BTreeSet<String> = instances
                .iter()
                .filter(|i| i.label != NONE_LABEL)
                .map(|i| i.label.clone())
                .collect();
            set.into_iter().collect()
        }
    };

    Ok(Dataset { instances, event_types, image_root: root })
}

fn sidecar_labels(manifest: &Path) -> Result<Option<Vec<String>>> {
    let mut sidecar = manifest.as_os_str().to_owned();
    sidecar.push(".labels");
    let sidecar = PathBuf::from(sidecar);
    if !sidecar.is_file() {
        return Ok(None);
    }
    let raw = fs::read_to_string(&sidecar)?;
    let labels: Vec<String> = raw
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let mut seen = HashSet::new();
    for l in &labels {
        if !seen.insert(l) {
            return Err(Error::Validation(format!("duplicate label '{l}' in sidecar")));
        }
        if l == NONE_LABEL {
            return Err(Error::Validation("sidecar must not list 'none'".into()));
        }
    }
    Ok(Some(labels))
}

/// Decode a raster file, resize to `resolution` square, and map channel
/// values linearly from [0, 255] to [-1, 1].
pub fn load_image(path: &Path, resolution: usize) -> Result<ImageArray> {
    if resolution == 0 {
        return Err(Error::Parameter("resolution must be positive".into()));
    }
    let img = image::open(path)?;
    let rgb = img.to_rgb8();
    if rgb.width() == 0 || rgb.height() == 0 {
        return Err(Error::Validation(format!("zero-size image: {}", path.display())));
    }
    let rgb = if rgb.width() as usize == resolution && rgb.height() as usize == resolution {
        rgb
    } else {
        image::imageops::resize(
            &rgb,
            resolution as u32,
            resolution as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    let pixels = rgb
        .pixels()
        .flat_map(|p| p.0.iter().map(|&v| v as f64 * 2.0 / 255.0 - 1.0))
        .collect();
    Ok(ImageArray { pixels, height: resolution, width: resolution })
}

/// Quantize back to 8-bit RGB and write a PNG.
pub fn save_image(img: &ImageArray, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for (i, p) in buf.pixels_mut().enumerate() {
        for c in 0..3 {
            let v = (img.pixels[3 * i + c].clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0;
            p.0[c] = v.round() as u8;
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Deterministically sample an (n_ways+1)-way k_shots-shot episode. The first
/// `n_ways` event types in canonical order are selected; remaining instances
/// of the selected labels form the query set.
pub fn sample_episode(
    dataset: &Dataset,
    n_ways: usize,
    k_shots: usize,
    seed: u64,
) -> Result<Episode> {
    if k_shots == 0 {
        return Err(Error::Sampling("k_shots must be at least 1".into()));
    }
    if n_ways == 0 {
        return Err(Error::Sampling("n_ways must be at least 1".into()));
    }
    if n_ways > dataset.event_types.len() {
        return Err(Error::Sampling(format!(
            "n_ways {} exceeds available event types {}",
            n_ways,
            dataset.event_types.len()
        )));
    }
    let selected: Vec<String> = dataset.event_types[..n_ways].to_vec();
    let mut labels = selected.clone();
    labels.push(NONE_LABEL.to_string());

    let mut by_label: HashMap<&str, Vec<usize>> = HashMap::new();
    for (idx, inst) in dataset.instances.iter().enumerate() {
        by_label.entry(inst.label.as_str()).or_default().push(idx);
    }

    let tag = format!("episode/{n_ways}/{k_shots}");
    let mut rng = seeding::rng_from(seeding::derive_seed(seed, &tag));
    let mut support_idx: Vec<usize> = Vec::with_capacity((n_ways + 1) * k_shots);
    for label in &labels {
        let pool = by_label.get(label.as_str()).cloned().unwrap_or_default();
        if pool.len() < k_shots {
            return Err(Error::Sampling(format!(
                "label '{}' has {} instances, need {} (short by {})",
                label,
                pool.len(),
                k_shots,
                k_shots - pool.len()
            )));
        }
        // Partial Fisher-Yates without replacement.
        let mut pool = pool;
        for j in 0..k_shots {
            let pick = rng.gen_range(j..pool.len());
            pool.swap(j, pick);
        }
        support_idx.extend_from_slice(&pool[..k_shots]);
    }

    let in_support: HashSet<usize> = support_idx.iter().copied().collect();
    let label_set: HashSet<&str> = labels.iter().map(|s| s.as_str()).collect();
    let queries: Vec<Instance> = dataset
        .instances
        .iter()
        .enumerate()
        .filter(|(i, inst)| !in_support.contains(i) && label_set.contains(inst.label.as_str()))
        .map(|(_, inst)| inst.clone())
        .collect();

    Ok(Episode {
        support: support_idx.iter().map(|&i| dataset.instances[i].clone()).collect(),
        queries,
        n_ways,
        k_shots,
        seed,
        event_types: selected,
    })
}
