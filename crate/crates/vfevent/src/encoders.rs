//! Text and visual encoders plus fusion by concatenation.
//!
//! Toy backbones are trainable end-to-end with hand-written backward passes.
//! Pretrained dual encoders can be plugged in through the adapter registry;
//! adapters own their weights and are used as frozen feature extractors.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageArray;
use crate::error::{Error, Result};
use crate::params::{self, GradMap};

/// A dense embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Embedding { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        params::all_finite(&self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Adapter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub text_dim: usize,
    pub visual_dim: usize,
    /// Token-embedding width of the toy text encoder.
    pub embed_dim: usize,
    /// Applied to the textual encoder only, training mode only.
    pub dropout_rate: f64,
    pub hash_buckets: usize,
    pub backend: BackendKind,
    /// Adapter names looked up in the registry when backend = adapter.
    #[serde(default)]
    pub text_adapter: Option<String>,
    #[serde(default)]
    pub visual_adapter: Option<String>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            text_dim: 768,
            visual_dim: 768,
            embed_dim: 64,
            dropout_rate: 0.3,
            hash_buckets: 4096,
            backend: BackendKind::Toy,
            text_adapter: None,
            visual_adapter: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_dim == 0 || self.visual_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Parameter("encoder dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Lowercase whitespace tokenizer with a fixed vocabulary plus hashed
/// out-of-vocabulary buckets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab: Vec<String>,
    pub hash_buckets: usize,
    #[serde(skip)]
    index: OnceLock<HashMap<String, usize>>,
}

impl Tokenizer {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, hash_buckets: usize) -> Self {
        let mut vocab = Vec::new();
        let mut seen = HashMap::new();
        for text in texts {
            for tok in crate::data::tokenize(text) {
                if !seen.contains_key(&tok) {
                    seen.insert(tok.clone(), vocab.len());
                    vocab.push(tok);
                }
            }
        }
        Tokenizer { vocab, hash_buckets, index: OnceLock::new() }
    }

    /// Rebuild from a stored vocabulary (checkpoint loading).
    pub fn from_vocab(vocab: Vec<String>, hash_buckets: usize) -> Self {
        Tokenizer { vocab, hash_buckets, index: OnceLock::new() }
    }

    fn index_map(&self) -> &HashMap<String, usize> {
        self.index.get_or_init(|| {
            self.vocab
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i))
                .collect()
        })
    }

    /// Number of embedding-table rows.
    pub fn table_size(&self) -> usize {
        self.vocab.len() + self.hash_buckets
    }

    /// Row index for a token: vocabulary id, or a hashed bucket for unknowns.
    pub fn token_index(&self, token: &str) -> usize {
        match self.index_map().get(token) {
            Some(&i) => i,
            None => {
                let h = crate::seeding::derive_seed(0, token);
                self.vocab.len() + (h as usize % self.hash_buckets.max(1))
            }
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        crate::data::tokenize(text)
            .iter()
            .map(|t| self.token_index(t))
            .collect()
    }
}

/// Forward-pass cache needed for the backward pass of the toy text encoder.
#[derive(Debug, Clone)]
pub struct TextCache {
    pub indices: Vec<usize>,
    /// Pooled token embedding after the dropout mask.
    pub dropped: Vec<f64>,
    /// Inverted-dropout scale per component (0 or 1/keep; all 1 in eval mode).
    pub mask: Vec<f64>,
}

/// Embedding table over the tokenizer rows, mean-pooled, dropout, then one
/// linear layer to `text_dim`.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    pub embed: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub table_size: usize,
    pub embed_dim: usize,
    pub out_dim: usize,
    pub dropout_rate: f64,
    prefix: String,
}

impl ToyTextEncoder {
    pub fn new(
        prefix: &str,
        table_size: usize,
        embed_dim: usize,
        out_dim: usize,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ToyTextEncoder {
            embed: params::init_uniform(rng, table_size * embed_dim, embed_dim),
            w: params::init_uniform(rng, out_dim * embed_dim, embed_dim),
            b: vec![0.0; out_dim],
            table_size,
            embed_dim,
            out_dim,
            dropout_rate,
            prefix: prefix.to_string(),
        }
    }

    pub fn name_embed(&self) -> String {
        format!("{}.embed", self.prefix)
    }
    pub fn name_w(&self) -> String {
        format!("{}.w", self.prefix)
    }
    pub fn name_b(&self) -> String {
        format!("{}.b", self.prefix)
    }

    /// Encode token indices. `dropout_rng` present means training mode.
    pub fn forward(
        &self,
        indices: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Embedding, TextCache)> {
        if indices.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let mut pooled = vec![0.0; self.embed_dim];
        for &idx in indices {
            let row = &self.embed[idx * self.embed_dim..(idx + 1) * self.embed_dim];
            for (p, &v) in pooled.iter_mut().zip(row.iter()) {
                *p += v;
            }
        }
        let inv_n = 1.0 / indices.len() as f64;
        for p in pooled.iter_mut() {
            *p *= inv_n;
        }
        let mask: Vec<f64> = match dropout_rng {
            Some(rng) if self.dropout_rate > 0.0 => {
                let keep = 1.0 - self.dropout_rate;
                (0..self.embed_dim)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect()
            }
            _ => vec![1.0; self.embed_dim],
        };
        let dropped: Vec<f64> = pooled.iter().zip(mask.iter()).map(|(p, m)| p * m).collect();
        let mut out = params::matvec(&self.w, self.out_dim, self.embed_dim, &dropped);
        for (o, b) in out.iter_mut().zip(self.b.iter()) {
            *o += b;
        }
        if !params::all_finite(&out) {
            return Err(Error::Numerical("non-finite text embedding".into()));
        }
        Ok((Embedding { values: out }, TextCache { indices: indices.to_vec(), dropped, mask }))
    }

    pub fn backward(&self, cache: &TextCache, dout: &[f64], grads: &mut GradMap) {
        let db = params::accumulate(grads, &self.name_b(), self.out_dim);
        params::add_scaled(db, dout, 1.0);
        let dw = params::accumulate(grads, &self.name_w(), self.w.len());
        params::outer_acc(dw, dout, &cache.dropped);
        let dpooled_dropped = params::matvec_t(&self.w, self.out_dim, self.embed_dim, dout);
        let inv_n = 1.0 / cache.indices.len() as f64;
        let dembed = params::accumulate(grads, &self.name_embed(), self.embed.len());
        for &idx in &cache.indices {
            let row = &mut dembed[idx * self.embed_dim..(idx + 1) * self.embed_dim];
            for ((g, d), m) in row.iter_mut().zip(dpooled_dropped.iter()).zip(cache.mask.iter()) {
                *g += d * m * inv_n;
            }
        }
    }
}

/// Flatten + one bias-free linear layer.
#[derive(Debug, Clone)]
pub struct ToyVisualEncoder {
    pub w: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ToyVisualEncoder {
    pub const NAME_W: &'static str = "vis.w";

    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ToyVisualEncoder {
            w: params::init_uniform(rng, out_dim * in_dim, in_dim),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, img: &ImageArray) -> Result<Embedding> {
        if img.len() != self.in_dim {
            return Err(Error::Input(format!(
                "image has {} values, encoder expects {}",
                img.len(),
                self.in_dim
            )));
        }
        let out = params::matvec(&self.w, self.out_dim, self.in_dim, &img.pixels);
        if !params::all_finite(&out) {
            return Err(Error::Numerical("non-finite visual embedding".into()));
        }
        Ok(Embedding { values: out })
    }

    pub fn backward(&self, img: &ImageArray, dout: &[f64], grads: &mut GradMap) {
        let dw = params::accumulate(grads, Self::NAME_W, self.w.len());
        params::outer_acc(dw, dout, &img.pixels);
    }
}

/// Concatenate text and visual embeddings into the joint representation.
pub fn fuse(h_s: &Embedding, h_v: &Embedding) -> Result<Embedding> {
    if !h_s.is_finite() || !h_v.is_finite() {
        return Err(Error::Numerical("non-finite embedding passed to fuse".into()));
    }
    let mut values = Vec::with_capacity(h_s.dim() + h_v.dim());
    values.extend_from_slice(&h_s.values);
    values.extend_from_slice(&h_v.values);
    Ok(Embedding { values })
}

/// Pretrained text-encoder adapter contract.
pub trait TextBackend: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>>;
}

/// Pretrained visual-encoder adapter contract.
pub trait VisualBackend: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_batch(&self, images: &[&ImageArray]) -> Result<Vec<Embedding>>;
}

type TextRegistry = RwLock<HashMap<String, Arc<dyn TextBackend>>>;
type VisualRegistry = RwLock<HashMap<String, Arc<dyn VisualBackend>>>;

fn text_registry() -> &'static TextRegistry {
    static REG: OnceLock<TextRegistry> = OnceLock::new();
    REG.get_or_init(|| RwLock::new(HashMap::new()))
}

fn visual_registry() -> &'static VisualRegistry {
    static REG: OnceLock<VisualRegistry> = OnceLock::new();
    REG.get_or_init(|| RwLock::new(HashMap::new()))
}

pub fn register_text_backend(name: &str, backend: Arc<dyn TextBackend>) {
    text_registry().write().unwrap().insert(name.to_string(), backend);
}

pub fn register_visual_backend(name: &str, backend: Arc<dyn VisualBackend>) {
    visual_registry().write().unwrap().insert(name.to_string(), backend);
}

pub fn text_backend(name: &str) -> Result<Arc<dyn TextBackend>> {
    text_registry()
        .read()
        .unwrap()
        .get(name)
        .cloned()
        .ok_or_else(|| Error::Config(format!("unknown text adapter '{name}'")))
}

pub fn visual_backend(name: &str) -> Result<Arc<dyn VisualBackend>> {
    visual_registry()
        .read()
        .unwrap()
        .get(name)
        .cloned()
        .ok_or_else(|| Error::Config(format!("unknown visual adapter '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn encoder(dropout: f64) -> (ToyTextEncoder, Tokenizer) {
        let tok = Tokenizer::from_texts(["troops attack the city"], 8);
        let mut rng = seeding::rng_from(1);
        let enc = ToyTextEncoder::new("text", tok.table_size(), 6, 5, dropout, &mut rng);
        (enc, tok)
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (enc, tok) = encoder(0.3);
        let idx = tok.encode("troops attack the city");
        let (a, _) = enc.forward(&idx, None).unwrap();
        let (b, _) = enc.forward(&idx, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 5);
    }

    #[test]
    fn empty_tokens_rejected() {
        let (enc, _) = encoder(0.0);
        assert!(enc.forward(&[], None).is_err());
    }

    #[test]
    fn bag_of_words_permutation_invariance() {
        let (enc, tok) = encoder(0.0);
        let (a, _) = enc.forward(&tok.encode("troops attack the city"), None).unwrap();
        let (b, _) = enc.forward(&tok.encode("city the attack troops"), None).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_dropout_training_matches_eval() {
        let (enc, tok) = encoder(0.0);
        let idx = tok.encode("troops attack");
        let mut rng = seeding::rng_from(3);
        let (train, _) = enc.forward(&idx, Some(&mut rng)).unwrap();
        let (eval, _) = enc.forward(&idx, None).unwrap();
        assert_eq!(train, eval);
    }

    #[test]
    fn visual_encoder_is_linear() {
        let mut rng = seeding::rng_from(2);
        let enc = ToyVisualEncoder::new(12, 4, &mut rng);
        let zero = ImageArray::zeros(2);
        let out = enc.forward(&zero).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));

        let img = ImageArray::from_pixels(vec![0.25; 12], 2).unwrap();
        let doubled = ImageArray::from_pixels(vec![0.5; 12], 2).unwrap();
        let a = enc.forward(&img).unwrap();
        let b = enc.forward(&doubled).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn visual_wrong_resolution_rejected() {
        let mut rng = seeding::rng_from(2);
        let enc = ToyVisualEncoder::new(12, 4, &mut rng);
        let img = ImageArray::zeros(3);
        assert!(enc.forward(&img).is_err());
    }

    #[test]
    fn fuse_is_concatenation() {
        let a = Embedding { values: vec![1.0, 2.0] };
        let b = Embedding { values: vec![3.0] };
        let f = fuse(&a, &b).unwrap();
        assert_eq!(f.values, vec![1.0, 2.0, 3.0]);
        let z = fuse(&Embedding::zeros(3), &Embedding::zeros(4)).unwrap();
        assert_eq!(z.values, vec![0.0; 7]);
    }

    #[test]
    fn paper_dims_concatenate_to_1536() {
        let a = Embedding::zeros(768);
        let b = Embedding::zeros(768);
        assert_eq!(fuse(&a, &b).unwrap().dim(), 1536);
    }

    #[test]
    fn oov_tokens_hash_into_buckets() {
        let tok = Tokenizer::from_texts(["known words"], 4);
        let idx = tok.token_index("unseen");
        assert!(idx >= tok.vocab.len() && idx < tok.table_size());
        assert_eq!(idx, tok.token_index("unseen"));
    }
}
