//! Classification head over the fused representation: one linear layer to
//! the N+1 event types, softmax probabilities, cross-entropy and the
//! beta-weighted combined loss.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::params::{self, GradMap};

/// Single linear layer (fused dim -> num_classes) followed by softmax.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub num_classes: usize,
}

pub const NAME_HEAD_W: &str = "head.w";
pub const NAME_HEAD_B: &str = "head.b";

impl ClassifierHead {
    pub fn new(in_dim: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        ClassifierHead {
            w: params::init_uniform(rng, num_classes * in_dim, in_dim),
            b: vec![0.0; num_classes],
            in_dim,
            num_classes,
        }
    }

    pub fn logits(&self, h: &Embedding) -> Result<Vec<f64>> {
        if h.dim() != self.in_dim {
            return Err(Error::Input(format!(
                "fused dim {} does not match head input dim {}",
                h.dim(),
                self.in_dim
            )));
        }
        let mut out = params::matvec(&self.w, self.num_classes, self.in_dim, &h.values);
        for (o, b) in out.iter_mut().zip(self.b.iter()) {
            *o += b;
        }
        if !params::all_finite(&out) {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok(out)
    }

    /// Backprop from d(logits); returns gradient w.r.t. the fused embedding.
    pub fn backward(&self, h: &Embedding, dlogits: &[f64], grads: &mut GradMap) -> Vec<f64> {
        let db = params::accumulate(grads, NAME_HEAD_B, self.num_classes);
        params::add_scaled(db, dlogits, 1.0);
        let dw = params::accumulate(grads, NAME_HEAD_W, self.w.len());
        params::outer_acc(dw, dlogits, &h.values);
        params::matvec_t(&self.w, self.num_classes, self.in_dim, dlogits)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// log softmax via log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Softmax-normalized distribution over the event types.
pub fn class_probs(h: &Embedding, head: &ClassifierHead) -> Result<Vec<f64>> {
    Ok(softmax(&head.logits(h)?))
}

/// Negative log-likelihood of the gold class, plus d(loss)/d(logits).
pub fn cross_entropy_from_logits(logits: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let loss = -logp[gold];
    let mut dlogits: Vec<f64> = logp.iter().map(|lp| lp.exp()).collect();
    dlogits[gold] -= 1.0;
    (loss, dlogits)
}

/// Combined objective: class_term + beta * visual_term.
pub fn combined_loss(class_term: f64, visual_term: f64, beta: f64) -> Result<f64> {
    if !class_term.is_finite() || !visual_term.is_finite() {
        return Err(Error::Numerical("non-finite loss term".into()));
    }
    if beta < 0.0 {
        return Err(Error::Parameter("beta must be non-negative".into()));
    }
    Ok(class_term + beta * visual_term)
}

/// Argmax with ties broken towards the lowest label index.
pub fn argmax_lowest(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Classification output for a single query.
#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub predicted: String,
    pub logit_margin: f64,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>, labels: &[String]) -> Self {
        let best = argmax_lowest(&probs);
        let mut sorted = probs.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let margin = if sorted.len() > 1 { sorted[0] - sorted[1] } else { sorted[0] };
        Prediction {
            predicted: labels[best].clone(),
            probs,
            logit_margin: margin,
        }
    }
}
