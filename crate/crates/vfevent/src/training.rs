//! Few-shot training orchestration: staged imaginator customization followed
//! by vision-language fine-tuning, or a joint mode optimizing the
//! beta-combined objective directly. Also houses the finite-difference
//! gradient checker used as the oracle for all loss gradients.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::combined_loss;
use crate::data::{load_image, Episode, ImageArray};
use crate::encoders::{EncoderConfig, Tokenizer};
use crate::error::{Error, Result};
use crate::imaginator::{customize, CustomizeConfig, ImaginatorConfig};
use crate::model::{BatchItem, ModelState};
use crate::optim::Adam;
use crate::params::GradMap;
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Staged,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Only the imaginator's conditioning text encoder is trainable during
    /// customization.
    Paper,
    AllTrainable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub k_shots: usize,
    pub n_ways: usize,
    pub freeze_policy: FreezePolicy,
    /// Customization steps for the staged imaginator stage; defaults to one
    /// pass-equivalent per epoch when absent.
    #[serde(default)]
    pub customize_steps: Option<usize>,
    /// Learning rate for customization; defaults to `learning_rate`.
    #[serde(default)]
    pub customize_learning_rate: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 4,
            epochs: 50,
            beta: 0.01,
            seed: 0,
            mode: TrainMode::Staged,
            k_shots: 5,
            n_ways: 8,
            freeze_policy: FreezePolicy::Paper,
            customize_steps: None,
            customize_learning_rate: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Parameter("beta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub stage: String,
    pub class_loss: Option<f64>,
    pub visual_loss: Option<f64>,
    pub combined_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "stage", "class_loss", "visual_loss", "combined_loss"])?;
        for r in &self.records {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
            w.write_record([
                r.step.to_string(),
                r.stage.clone(),
                fmt(r.class_loss),
                fmt(r.visual_loss),
                fmt(r.combined_loss),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn final_class_loss(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.class_loss)
    }

    pub fn final_visual_loss(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.visual_loss)
    }
}

/// Resolve an instance's image, falling back to the zero image when no
/// reference is present.
pub fn instance_image(
    inst: &crate::data::Instance,
    image_root: &Path,
    resolution: usize,
) -> Result<ImageArray> {
    match &inst.image_ref {
        Some(r) => load_image(&image_root.join(r), resolution),
        None => Ok(ImageArray::zeros(resolution)),
    }
}

/// Initialize a fresh model for an episode: vocabulary from the support
/// texts, labels from the episode's event types plus "none".
pub fn init_model_for_episode(
    episode: &Episode,
    encoder_config: &EncoderConfig,
    imaginator_config: &ImaginatorConfig,
    resolution: usize,
    seed: u64,
) -> Result<ModelState> {
    let tokenizer = Tokenizer::from_texts(
        episode.support.iter().map(|i| i.text.as_str()),
        encoder_config.hash_buckets,
    );
    ModelState::init(
        episode.labels(),
        tokenizer,
        encoder_config.clone(),
        imaginator_config.clone(),
        resolution,
        seed,
    )
}

/// Train a model on an episode's support set.
pub fn train(
    episode: &Episode,
    config: &TrainConfig,
    encoder_config: &EncoderConfig,
    imaginator_config: &ImaginatorConfig,
    resolution: usize,
    image_root: &Path,
) -> Result<(ModelState, TrainLog)> {
    let model = init_model_for_episode(
        episode,
        encoder_config,
        imaginator_config,
        resolution,
        config.seed,
    )?;
    train_from(model, episode, config, image_root)
}

/// Train starting from an existing model state (used when a checkpoint seeds
/// the run). Deterministic given (model, episode, config).
pub fn train_from(
    mut model: ModelState,
    episode: &Episode,
    config: &TrainConfig,
    image_root: &Path,
) -> Result<(ModelState, TrainLog)> {
    config.validate()?;
    let mut log = TrainLog::default();

    if config.freeze_policy == FreezePolicy::AllTrainable {
        model.imaginator.set_all_trainable();
    }

    // Lower support instances to model inputs once.
    let mut batch_items = Vec::with_capacity(episode.support.len());
    let mut imag_pairs = Vec::new();
    for inst in &episode.support {
        let gold = model
            .label_index(&inst.label)
            .ok_or_else(|| Error::Input(format!("unknown label '{}'", inst.label)))?;
        let image = instance_image(inst, image_root, model.resolution)?;
        let tokens = model.tokenizer.encode(&inst.text);
        if inst.image_ref.is_some() {
            imag_pairs.push((tokens.clone(), image.clone()));
        }
        batch_items.push(BatchItem { tokens, image, gold });
    }

    let steps_per_epoch = batch_items.len().div_ceil(config.batch_size);
    let mut step = 0usize;

    match config.mode {
        TrainMode::Staged => {
            let customize_steps = config
                .customize_steps
                .unwrap_or(config.epochs * steps_per_epoch);
            if customize_steps > 0 {
                if imag_pairs.is_empty() {
                    return Err(Error::Customize(
                        "staged training needs at least one support image".into(),
                    ));
                }
                let ccfg = CustomizeConfig {
                    steps: customize_steps,
                    batch_size: config.batch_size,
                    learning_rate: config.customize_learning_rate.unwrap_or(config.learning_rate),
                    seed: seeding::derive_seed(config.seed, "customize-stage"),
                    target_policy: model.imaginator_config.target_policy,
                };
                let (imag, losses) = customize(&model.imaginator, &imag_pairs, &ccfg)?;
                model.imaginator = imag;
                for loss in losses {
                    log.records.push(TrainRecord {
                        step,
                        stage: "customize".into(),
                        class_loss: None,
                        visual_loss: Some(loss),
                        combined_loss: None,
                    });
                    step += 1;
                }
            }
            run_classifier_stage(&mut model, &batch_items, config, None, &mut log, &mut step)?;
        }
        TrainMode::Joint => {
            run_classifier_stage(
                &mut model,
                &batch_items,
                config,
                Some(config.beta),
                &mut log,
                &mut step,
            )?;
        }
    }
    Ok((model, log))
}

/// Fine-tune the encoders and head with cross-entropy; with `joint_beta`,
/// adds the beta-weighted visual loss whose gradients flow only to the
/// imaginator's trainable parameters.
fn run_classifier_stage(
    model: &mut ModelState,
    items: &[BatchItem],
    config: &TrainConfig,
    joint_beta: Option<f64>,
    log: &mut TrainLog,
    step: &mut usize,
) -> Result<()> {
    if config.epochs == 0 || items.is_empty() {
        return Ok(());
    }
    let mut adam = Adam::new(config.learning_rate);
    let mut dropout_rng =
        seeding::rng_from(seeding::derive_seed(config.seed, "dropout"));
    let mut visual_rng =
        seeding::rng_from(seeding::derive_seed(config.seed, "visual-noise"));
    let classifier_names = model.classifier_param_names();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let shuffle_seed =
            seeding::derive_seed_for_id(config.seed, "classifier-batches", &epoch.to_string());
        let mut shuffle_rng = seeding::rng_from(shuffle_seed);
        for j in (1..order.len()).rev() {
            let k = shuffle_rng.gen_range(0..=j);
            order.swap(j, k);
        }

        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem {
                    tokens: items[i].tokens.clone(),
                    image: items[i].image.clone(),
                    gold: items[i].gold,
                })
                .collect();
            let mut grads = GradMap::new();
            let class_loss =
                model.class_loss_batch(&batch, Some(&mut dropout_rng), Some(&mut grads))?;
            // Only classifier-path parameters receive cross-entropy updates.
            grads.retain(|name, _| classifier_names.contains(name));

            let mut visual_term = None;
            if let Some(beta) = joint_beta {
                let mut vgrads = GradMap::new();
                let mut vsum = 0.0;
                for item in &batch {
                    let t = visual_rng.gen_range(1..=model.imaginator.schedule.num_steps);
                    let eps: Vec<f64> = (0..item.image.len())
                        .map(|_| visual_rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    vsum += model.imaginator.visual_loss_and_grads(
                        &item.tokens,
                        &item.image,
                        &item.image,
                        t,
                        &eps,
                        &mut vgrads,
                    )?;
                }
                let vmean = vsum / batch.len() as f64;
                visual_term = Some(vmean);
                // Route visual gradients only to imaginator-trainable params.
                let trainable = model.imaginator.trainable.clone();
                let inv_n = beta / batch.len() as f64;
                for (name, g) in vgrads {
                    if !trainable.get(&name).copied().unwrap_or(false) {
                        continue;
                    }
                    let dst = crate::params::accumulate(&mut grads, &name, g.len());
                    crate::params::add_scaled(dst, &g, inv_n);
                }
            }

            if !class_loss.is_finite() {
                return Err(Error::Training {
                    step: *step,
                    msg: "non-finite classification loss".into(),
                });
            }
            let combined = match visual_term {
                Some(v) => Some(combined_loss(class_loss, v, joint_beta.unwrap())?),
                None => None,
            };
            log.records.push(TrainRecord {
                step: *step,
                stage: if joint_beta.is_some() { "joint" } else { "finetune" }.into(),
                class_loss: Some(class_loss),
                visual_loss: visual_term,
                combined_loss: combined,
            });
            *step += 1;

            let mut entries = model.param_entries_mut();
            adam.step(&mut entries, &grads);
        }
    }
    Ok(())
}

/// Which objective the gradient checker differentiates.
#[derive(Debug, Clone, Copy)]
pub enum LossKind {
    Class,
    Visual,
    Combined { beta: f64 },
}

/// A visual-loss example with its noise draw pinned so finite differences
/// see a deterministic objective.
pub struct VisualCheckItem {
    pub tokens: Vec<usize>,
    pub image: ImageArray,
    pub target: ImageArray,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Build pinned visual-check items from batch items.
pub fn pin_visual_items(
    model: &ModelState,
    items: &[BatchItem],
    seed: u64,
) -> Vec<VisualCheckItem> {
    let mut rng = seeding::rng_from(seeding::derive_seed(seed, "gradcheck-noise"));
    items
        .iter()
        .map(|item| {
            let t = rng.gen_range(1..=model.imaginator.schedule.num_steps);
            let eps = (0..item.image.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            VisualCheckItem {
                tokens: item.tokens.clone(),
                image: item.image.clone(),
                target: item.image.clone(),
                t,
                eps,
            }
        })
        .collect()
}

fn eval_loss(
    model: &ModelState,
    class_batch: &[BatchItem],
    visual_batch: &[VisualCheckItem],
    kind: LossKind,
) -> Result<f64> {
    let class = || model.class_loss_batch(class_batch, None, None);
    let visual = || -> Result<f64> {
        let mut sum = 0.0;
        for it in visual_batch {
            sum += model
                .imaginator
                .visual_loss(&it.tokens, &it.image, &it.target, it.t, &it.eps)?;
        }
        Ok(sum / visual_batch.len() as f64)
    };
    match kind {
        LossKind::Class => class(),
        LossKind::Visual => visual(),
        LossKind::Combined { beta } => combined_loss(class()?, visual()?, beta),
    }
}

fn analytic_grads(
    model: &ModelState,
    class_batch: &[BatchItem],
    visual_batch: &[VisualCheckItem],
    kind: LossKind,
) -> Result<GradMap> {
    let mut grads = GradMap::new();
    let class_scale = match kind {
        LossKind::Visual => 0.0,
        _ => 1.0,
    };
    let visual_scale = match kind {
        LossKind::Class => 0.0,
        LossKind::Visual => 1.0,
        LossKind::Combined { beta } => beta,
    };
    if class_scale != 0.0 {
        model.class_loss_batch(class_batch, None, Some(&mut grads))?;
    }
    if visual_scale != 0.0 {
        let mut vgrads = GradMap::new();
        for it in visual_batch {
            model.imaginator.visual_loss_and_grads(
                &it.tokens,
                &it.image,
                &it.target,
                it.t,
                &it.eps,
                &mut vgrads,
            )?;
        }
        let scale = visual_scale / visual_batch.len() as f64;
        for (name, g) in vgrads {
            let dst = crate::params::accumulate(&mut grads, &name, g.len());
            crate::params::add_scaled(dst, &g, scale);
        }
    }
    Ok(grads)
}

/// Compare analytic gradients against central finite differences over every
/// parameter; returns the maximum relative error. The freeze mask is an
/// optimizer concern, so the check differentiates the unmasked objective.
pub fn gradient_check(
    model: &ModelState,
    class_batch: &[BatchItem],
    visual_batch: &[VisualCheckItem],
    epsilon: f64,
    kind: LossKind,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::Parameter("epsilon must be positive".into()));
    }
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::Parameter("epsilon must lie in [1e-6, 1e-4]".into()));
    }
    let grads = analytic_grads(model, class_batch, visual_batch, kind)?;
    for g in grads.values() {
        if !crate::params::all_finite(g) {
            return Err(Error::Numerical("non-finite analytic gradient".into()));
        }
    }

    let mut probe = model.clone();
    let names: Vec<(String, usize)> = probe
        .param_entries()
        .iter()
        .map(|(n, v)| (n.clone(), v.len()))
        .collect();
    let mut max_err: f64 = 0.0;
    for (name, len) in names {
        for i in 0..len {
            let orig = get_param(&probe, &name, i);
            set_param(&mut probe, &name, i, orig + epsilon);
            let up = eval_loss(&probe, class_batch, visual_batch, kind)?;
            set_param(&mut probe, &name, i, orig - epsilon);
            let down = eval_loss(&probe, class_batch, visual_batch, kind)?;
            set_param(&mut probe, &name, i, orig);
            let fd = (up - down) / (2.0 * epsilon);
            let analytic = grads.get(&name).map(|g| g[i]).unwrap_or(0.0);
            let denom = analytic.abs().max(fd.abs()).max(1e-12);
            max_err = max_err.max((analytic - fd).abs() / denom);
        }
    }
    Ok(max_err)
}

fn get_param(model: &ModelState, name: &str, i: usize) -> f64 {
    model
        .param_entries()
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| v[i])
        .unwrap()
}

fn set_param(model: &mut ModelState, name: &str, i: usize, val: f64) {
    for (n, v) in model.param_entries_mut() {
        if n == name {
            v[i] = val;
            return;
        }
    }
    unreachable!("unknown parameter {name}");
}
