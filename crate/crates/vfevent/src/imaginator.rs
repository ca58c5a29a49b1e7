//! The visual imaginator: a text-conditioned denoising diffusion model that
//! synthesizes an image from text, plus the few-shot customization loop in
//! which only the conditioning text encoder is trainable.
//!
//! The denoiser predicts noise; the reconstruction used by the visual loss is
//! recovered as (x_t - sigma * eps_hat) / alpha. Diffusion runs in pixel
//! space at the working resolution; a latent codec can be slotted in through
//! [`LatentCodec`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ImageArray;
use crate::encoders::ToyTextEncoder;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{self, GradMap};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// Per-timestep variance-preserving mixing coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub num_steps: usize,
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub kind: ScheduleKind,
}

/// Build a schedule with alpha_0 = 1, sigma_0 = 0, alpha strictly decreasing
/// and alpha_t^2 + sigma_t^2 = 1 at every t.
pub fn make_schedule(num_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(Error::Parameter("num_steps must be at least 1".into()));
    }
    let denom = (num_steps + 1) as f64;
    let mut alphas = Vec::with_capacity(num_steps + 1);
    let mut sigmas = Vec::with_capacity(num_steps + 1);
    for t in 0..=num_steps {
        let x = t as f64 / denom;
        let (a, s) = match kind {
            ScheduleKind::Cosine => {
                let ang = std::f64::consts::FRAC_PI_2 * x;
                (ang.cos(), ang.sin())
            }
            ScheduleKind::Linear => ((1.0 - x).sqrt(), x.sqrt()),
        };
        alphas.push(a);
        sigmas.push(s);
    }
    Ok(NoiseSchedule { num_steps, alphas, sigmas, kind })
}

/// Forward noising: alpha_t * v + sigma_t * eps, elementwise.
pub fn noising(v: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if eps.len() != v.len() {
        return Err(Error::Input(format!(
            "noise length {} does not match signal length {}",
            eps.len(),
            v.len()
        )));
    }
    if t > schedule.num_steps {
        return Err(Error::Input(format!(
            "timestep {} out of range 0..={}",
            t, schedule.num_steps
        )));
    }
    let a = schedule.alphas[t];
    let s = schedule.sigmas[t];
    Ok(v.iter().zip(eps.iter()).map(|(x, e)| a * x + s * e).collect())
}

/// Sinusoidal timestep embedding over normalized time t/T.
pub fn timestep_embedding(t: usize, num_steps: usize, dim: usize) -> Vec<f64> {
    debug_assert!(dim % 2 == 0, "timestep embedding dim must be even");
    let x = t as f64 / num_steps as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = std::f64::consts::PI * (1 << i) as f64;
        out.push((x * freq).sin());
        out.push((x * freq).cos());
    }
    out
}

/// Which image the customization loss reconstructs towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicy {
    /// Reconstruct the ground-truth support image.
    GroundTruth,
    /// Reconstruct an image pre-generated by the uncustomized model.
    Synthesized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ImaginatorConfig {
    pub num_steps: usize,
    pub schedule: ScheduleKind,
    pub omega: f64,
    pub cond_dim: usize,
    pub cond_embed_dim: usize,
    pub hidden_dim: usize,
    pub t_emb_dim: usize,
    pub sample_steps: usize,
    pub target_policy: TargetPolicy,
}

impl Default for ImaginatorConfig {
    fn default() -> Self {
        ImaginatorConfig {
            num_steps: 1000,
            schedule: ScheduleKind::Cosine,
            omega: 1.0,
            cond_dim: 32,
            cond_embed_dim: 16,
            hidden_dim: 64,
            t_emb_dim: 8,
            sample_steps: 50,
            target_policy: TargetPolicy::GroundTruth,
        }
    }
}

/// Two-layer tanh MLP over [noisy pixels; timestep embedding; conditioning
/// vector], predicting the noise.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

pub const NAME_DEN_W1: &str = "imag.den.w1";
pub const NAME_DEN_B1: &str = "imag.den.b1";
pub const NAME_DEN_W2: &str = "imag.den.w2";
pub const NAME_DEN_B2: &str = "imag.den.b2";

struct DenoiserCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl Denoiser {
    fn new(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Denoiser {
            w1: params::init_uniform(rng, hidden_dim * in_dim, in_dim),
            b1: vec![0.0; hidden_dim],
            w2: params::init_uniform(rng, out_dim * hidden_dim, hidden_dim),
            b2: vec![0.0; out_dim],
            in_dim,
            hidden_dim,
            out_dim,
        }
    }

    fn forward(&self, input: Vec<f64>) -> (Vec<f64>, DenoiserCache) {
        debug_assert_eq!(input.len(), self.in_dim);
        let mut pre = params::matvec(&self.w1, self.hidden_dim, self.in_dim, &input);
        for (p, b) in pre.iter_mut().zip(self.b1.iter()) {
            *p = (*p + b).tanh();
        }
        let hidden = pre;
        let mut out = params::matvec(&self.w2, self.out_dim, self.hidden_dim, &hidden);
        for (o, b) in out.iter_mut().zip(self.b2.iter()) {
            *o += b;
        }
        (out, DenoiserCache { input, hidden })
    }

    /// Backprop from d(eps_hat); returns gradient w.r.t. the input vector.
    fn backward(&self, cache: &DenoiserCache, dout: &[f64], grads: &mut GradMap) -> Vec<f64> {
        let db2 = params::accumulate(grads, NAME_DEN_B2, self.out_dim);
        params::add_scaled(db2, dout, 1.0);
        let dw2 = params::accumulate(grads, NAME_DEN_W2, self.w2.len());
        params::outer_acc(dw2, dout, &cache.hidden);
        let mut dh = params::matvec_t(&self.w2, self.out_dim, self.hidden_dim, dout);
        for (d, h) in dh.iter_mut().zip(cache.hidden.iter()) {
            *d *= 1.0 - h * h;
        }
        let db1 = params::accumulate(grads, NAME_DEN_B1, self.hidden_dim);
        params::add_scaled(db1, &dh, 1.0);
        let dw1 = params::accumulate(grads, NAME_DEN_W1, self.w1.len());
        params::outer_acc(dw1, &dh, &cache.input);
        params::matvec_t(&self.w1, self.hidden_dim, self.in_dim, &dh)
    }
}

/// Codec between image space and the diffusion latent space. Identity at the
/// default working resolution; a pretrained autoencoder can replace it.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &ImageArray) -> Vec<f64>;
    fn decode(&self, latent: &[f64], resolution: usize) -> ImageArray;
}

pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, image: &ImageArray) -> Vec<f64> {
        image.pixels.clone()
    }
    fn decode(&self, latent: &[f64], resolution: usize) -> ImageArray {
        ImageArray {
            pixels: latent.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            height: resolution,
            width: resolution,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImaginatorState {
    /// Conditioning text encoder (the only trainable part under the default
    /// freeze policy).
    pub cond: ToyTextEncoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub omega: f64,
    pub resolution: usize,
    pub t_emb_dim: usize,
    pub sample_steps: usize,
    /// Per-parameter-array trainable flags.
    pub trainable: BTreeMap<String, bool>,
}

impl ImaginatorState {
    pub fn new(
        config: &ImaginatorConfig,
        resolution: usize,
        tokenizer_table_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.t_emb_dim % 2 != 0 {
            return Err(Error::Parameter("t_emb_dim must be even".into()));
        }
        let img_dim = 3 * resolution * resolution;
        let cond = ToyTextEncoder::new(
            "imag.cond",
            tokenizer_table_size,
            config.cond_embed_dim,
            config.cond_dim,
            0.0,
            rng,
        );
        let denoiser = Denoiser::new(
            img_dim + config.t_emb_dim + config.cond_dim,
            config.hidden_dim,
            img_dim,
            rng,
        );
        let mut trainable = BTreeMap::new();
        trainable.insert(cond.name_embed(), true);
        trainable.insert(cond.name_w(), true);
        trainable.insert(cond.name_b(), true);
        for name in [NAME_DEN_W1, NAME_DEN_B1, NAME_DEN_W2, NAME_DEN_B2] {
            trainable.insert(name.to_string(), false);
        }
        Ok(ImaginatorState {
            cond,
            denoiser,
            schedule: make_schedule(config.num_steps, config.schedule)?,
            omega: config.omega,
            resolution,
            t_emb_dim: config.t_emb_dim,
            sample_steps: config.sample_steps,
            trainable,
        })
    }

    pub fn img_dim(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    pub fn set_all_trainable(&mut self) {
        for v in self.trainable.values_mut() {
            *v = true;
        }
    }

    pub fn param_entries(&self) -> Vec<(String, &Vec<f64>)> {
        vec![
            (self.cond.name_embed(), &self.cond.embed),
            (self.cond.name_w(), &self.cond.w),
            (self.cond.name_b(), &self.cond.b),
            (NAME_DEN_W1.to_string(), &self.denoiser.w1),
            (NAME_DEN_B1.to_string(), &self.denoiser.b1),
            (NAME_DEN_W2.to_string(), &self.denoiser.w2),
            (NAME_DEN_B2.to_string(), &self.denoiser.b2),
        ]
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let (n_embed, n_w, n_b) = (
            self.cond.name_embed(),
            self.cond.name_w(),
            self.cond.name_b(),
        );
        vec![
            (n_embed, &mut self.cond.embed),
            (n_w, &mut self.cond.w),
            (n_b, &mut self.cond.b),
            (NAME_DEN_W1.to_string(), &mut self.denoiser.w1),
            (NAME_DEN_B1.to_string(), &mut self.denoiser.b1),
            (NAME_DEN_W2.to_string(), &mut self.denoiser.w2),
            (NAME_DEN_B2.to_string(), &mut self.denoiser.b2),
        ]
    }

    /// Conditioning vector: encoder output L2-normalized so its scale is
    /// independent of initialization — a near-zero conditioning input would
    /// make the denoiser's text pathway all but unlearnable.
    fn cond_vector(
        &self,
        tokens: &[usize],
    ) -> Result<(Vec<f64>, Vec<f64>, crate::encoders::TextCache)> {
        let (emb, cache) = self.cond.forward(tokens, None)?;
        let raw = emb.values;
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let unit: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        Ok((unit, raw, cache))
    }

    /// Gradient of the L2 normalization: with u = r/||r||, pulls a gradient
    /// w.r.t. u back to one w.r.t. r.
    fn cond_norm_backward(raw: &[f64], d_unit: &[f64]) -> Vec<f64> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let unit: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        let dot: f64 = unit.iter().zip(d_unit).map(|(u, d)| u * d).sum();
        unit.iter()
            .zip(d_unit)
            .map(|(u, d)| (d - dot * u) / norm)
            .collect()
    }

    fn predict_noise(&self, x_t: &[f64], t: usize, cond: &[f64]) -> (Vec<f64>, DenoiserCache) {
        let mut input = Vec::with_capacity(self.denoiser.in_dim);
        input.extend_from_slice(x_t);
        input.extend(timestep_embedding(t, self.schedule.num_steps, self.t_emb_dim));
        input.extend_from_slice(cond);
        self.denoiser.forward(input)
    }

    /// Reconstruction-space loss: omega * || x0_hat - target ||_2^2 where
    /// x0_hat = (x_t - sigma_t * eps_hat) / alpha_t.
    pub fn visual_loss(
        &self,
        tokens: &[usize],
        v: &ImageArray,
        target: &ImageArray,
        t: usize,
        eps: &[f64],
    ) -> Result<f64> {
        self.visual_loss_impl(tokens, v, target, t, eps, None)
    }

    /// Same loss, additionally accumulating gradients for every imaginator
    /// parameter (masking to trainable parameters happens at update time).
    pub fn visual_loss_and_grads(
        &self,
        tokens: &[usize],
        v: &ImageArray,
        target: &ImageArray,
        t: usize,
        eps: &[f64],
        grads: &mut GradMap,
    ) -> Result<f64> {
        self.visual_loss_impl(tokens, v, target, t, eps, Some(grads))
    }

    fn visual_loss_impl(
        &self,
        tokens: &[usize],
        v: &ImageArray,
        target: &ImageArray,
        t: usize,
        eps: &[f64],
        grads: Option<&mut GradMap>,
    ) -> Result<f64> {
        if target.len() != v.len() {
            return Err(Error::Input("target shape does not match image shape".into()));
        }
        if v.len() != self.img_dim() {
            return Err(Error::Input(format!(
                "image has {} values, imaginator expects {}",
                v.len(),
                self.img_dim()
            )));
        }
        if t == 0 || t > self.schedule.num_steps {
            return Err(Error::Input(format!(
                "training timestep {} out of range 1..={}",
                t, self.schedule.num_steps
            )));
        }
        let (cond, cond_raw, cond_cache) = self.cond_vector(tokens)?;
        let x_t = noising(&v.pixels, t, eps, &self.schedule)?;
        let (eps_hat, den_cache) = self.predict_noise(&x_t, t, &cond);
        let a = self.schedule.alphas[t];
        let s = self.schedule.sigmas[t];
        let x0_hat: Vec<f64> = x_t
            .iter()
            .zip(eps_hat.iter())
            .map(|(x, e)| (x - s * e) / a)
            .collect();
        if !params::all_finite(&x0_hat) {
            return Err(Error::Numerical(format!(
                "non-finite reconstruction at timestep {t}"
            )));
        }
        let diff: Vec<f64> = x0_hat
            .iter()
            .zip(target.pixels.iter())
            .map(|(p, q)| p - q)
            .collect();
        let loss = self.omega * diff.iter().map(|d| d * d).sum::<f64>();

        if let Some(grads) = grads {
            // dL/d(eps_hat) = 2 * omega * diff * (-sigma/alpha)
            let scale = -2.0 * self.omega * s / a;
            let d_eps_hat: Vec<f64> = diff.iter().map(|d| d * scale).collect();
            let d_input = self.denoiser.backward(&den_cache, &d_eps_hat, grads);
            let cond_start = self.img_dim() + self.t_emb_dim;
            let d_raw = Self::cond_norm_backward(&cond_raw, &d_input[cond_start..]);
            self.cond.backward(&cond_cache, &d_raw, grads);
        }
        Ok(loss)
    }

    /// Deterministic DDIM-style sampling from seeded Gaussian noise.
    pub fn synthesize(
        &self,
        tokens: &[usize],
        num_sample_steps: usize,
        seed: u64,
    ) -> Result<ImageArray> {
        if num_sample_steps == 0 {
            return Err(Error::Parameter("num_sample_steps must be at least 1".into()));
        }
        let (cond, _, _) = self.cond_vector(tokens)?;
        let mut rng = seeding::rng_from(seed);
        let dim = self.img_dim();
        let mut x: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

        let total = self.schedule.num_steps;
        let steps = num_sample_steps.min(total);
        let mut ts: Vec<usize> = (0..=steps)
            .map(|i| ((steps - i) as f64 / steps as f64 * total as f64).round() as usize)
            .collect();
        ts.dedup();

        let mut x0 = vec![0.0; dim];
        for w in ts.windows(2) {
            let (cur, next) = (w[0], w[1]);
            let (eps_hat, _) = self.predict_noise(&x, cur, &cond);
            let a = self.schedule.alphas[cur];
            let s = self.schedule.sigmas[cur];
            for i in 0..dim {
                x0[i] = ((x[i] - s * eps_hat[i]) / a).clamp(-1.0, 1.0);
            }
            let an = self.schedule.alphas[next];
            let sn = self.schedule.sigmas[next];
            for i in 0..dim {
                x[i] = an * x0[i] + sn * eps_hat[i];
            }
            if !params::all_finite(&x) {
                return Err(Error::Numerical(format!(
                    "non-finite sample while stepping from timestep {cur}"
                )));
            }
        }
        ImageArray::from_pixels(x.iter().map(|v| v.clamp(-1.0, 1.0)).collect(), self.resolution)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CustomizeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub target_policy: TargetPolicy,
}

/// Few-shot customization: minimize the visual loss over support (text,
/// image) pairs, updating only parameters whose trainable flag is set.
/// Returns the new state and the per-step mean loss curve.
pub fn customize(
    state: &ImaginatorState,
    support: &[(Vec<usize>, ImageArray)],
    config: &CustomizeConfig,
) -> Result<(ImaginatorState, Vec<f64>)> {
    if support.is_empty() {
        return Err(Error::Customize("support set has no images".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be at least 1".into()));
    }
    let mut out = state.clone();
    let mut losses = Vec::with_capacity(config.steps);
    if config.steps == 0 {
        return Ok((out, losses));
    }

    // Pre-generate targets once when reconstructing synthesized images.
    let targets: Vec<ImageArray> = match config.target_policy {
        TargetPolicy::GroundTruth => support.iter().map(|(_, v)| v.clone()).collect(),
        TargetPolicy::Synthesized => support
            .iter()
            .enumerate()
            .map(|(i, (tokens, _))| {
                state.synthesize(
                    tokens,
                    state.sample_steps,
                    seeding::derive_seed_for_id(config.seed, "customize-target", &i.to_string()),
                )
            })
            .collect::<Result<_>>()?,
    };

    let mut adam = Adam::new(config.learning_rate);
    let mut rng = seeding::rng_from(seeding::derive_seed(config.seed, "customize"));
    let mut order: Vec<usize> = (0..support.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle

    for step in 0..config.steps {
        let mut grads = GradMap::new();
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for _ in 0..config.batch_size {
            if cursor >= order.len() {
                // Deterministic reshuffle each pass over the support set.
                for j in (1..order.len()).rev() {
                    let k = rng.gen_range(0..=j);
                    order.swap(j, k);
                }
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let (tokens, v) = &support[i];
            let t = rng.gen_range(1..=out.schedule.num_steps);
            let eps: Vec<f64> = (0..v.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            loss_sum +=
                out.visual_loss_and_grads(tokens, v, &targets[i], t, &eps, &mut grads)?;
            count += 1;
        }
        let mean_loss = loss_sum / count as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: "non-finite customization loss".into(),
            });
        }
        losses.push(mean_loss);
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v /= count as f64;
            }
        }
        // Freeze policy: drop gradients of non-trainable parameters so the
        // optimizer never touches them.
        let trainable = out.trainable.clone();
        grads.retain(|name, _| trainable.get(name).copied().unwrap_or(false));
        let mut entries = out.param_entries_mut();
        adam.step(&mut entries, &grads);
    }
    Ok((out, losses))
}
