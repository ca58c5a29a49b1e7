//! The full model: dual encoders, fusion, classification head and the
//! visual imaginator, with batch loss/gradient plumbing for training.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::classifier::{self, ClassifierHead, Prediction};
use crate::data::ImageArray;
use crate::encoders::{
    fuse, BackendKind, Embedding, EncoderConfig, TextBackend, Tokenizer, ToyTextEncoder,
    ToyVisualEncoder, VisualBackend,
};
use crate::error::{Error, Result};
use crate::imaginator::{ImaginatorConfig, ImaginatorState};
use crate::params::GradMap;
use crate::seeding;

#[derive(Clone)]
pub struct ModelState {
    pub tokenizer: Tokenizer,
    pub text_enc: ToyTextEncoder,
    pub vis_enc: ToyVisualEncoder,
    pub head: ClassifierHead,
    pub imaginator: ImaginatorState,
    /// Labels in canonical index order; "none" is always last.
    pub labels: Vec<String>,
    pub resolution: usize,
    pub encoder_config: EncoderConfig,
    pub imaginator_config: ImaginatorConfig,
    pub text_adapter: Option<Arc<dyn TextBackend>>,
    pub visual_adapter: Option<Arc<dyn VisualBackend>>,
}

/// One training example already lowered to model inputs.
pub struct BatchItem {
    pub tokens: Vec<usize>,
    pub image: ImageArray,
    pub gold: usize,
}

impl ModelState {
    pub fn init(
        labels: Vec<String>,
        tokenizer: Tokenizer,
        encoder_config: EncoderConfig,
        imaginator_config: ImaginatorConfig,
        resolution: usize,
        seed: u64,
    ) -> Result<Self> {
        encoder_config.validate()?;
        if labels.len() < 2 {
            return Err(Error::Parameter("need at least two classes".into()));
        }
        let mut rng = seeding::rng_from(seeding::derive_seed(seed, "model-init"));
        let img_dim = 3 * resolution * resolution;
        let text_enc = ToyTextEncoder::new(
            "text",
            tokenizer.table_size(),
            encoder_config.embed_dim,
            encoder_config.text_dim,
            encoder_config.dropout_rate,
            &mut rng,
        );
        let vis_enc = ToyVisualEncoder::new(img_dim, encoder_config.visual_dim, &mut rng);
        let head = ClassifierHead::new(
            encoder_config.text_dim + encoder_config.visual_dim,
            labels.len(),
            &mut rng,
        );
        let imaginator =
            ImaginatorState::new(&imaginator_config, resolution, tokenizer.table_size(), &mut rng)?;
        let (text_adapter, visual_adapter) = if encoder_config.backend == BackendKind::Adapter {
            let t = encoder_config
                .text_adapter
                .as_deref()
                .map(crate::encoders::text_backend)
                .transpose()?;
            let v = encoder_config
                .visual_adapter
                .as_deref()
                .map(crate::encoders::visual_backend)
                .transpose()?;
            (t, v)
        } else {
            (None, None)
        };
        Ok(ModelState {
            tokenizer,
            text_enc,
            vis_enc,
            head,
            imaginator,
            labels,
            resolution,
            encoder_config,
            imaginator_config,
            text_adapter,
            visual_adapter,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn encode_text_eval(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::Input("empty text".into()));
        }
        match &self.text_adapter {
            Some(backend) => Ok(backend.encode_batch(&[text])?.remove(0)),
            None => {
                let tokens = self.tokenizer.encode(text);
                Ok(self.text_enc.forward(&tokens, None)?.0)
            }
        }
    }

    pub fn encode_image_eval(&self, image: &ImageArray) -> Result<Embedding> {
        match &self.visual_adapter {
            Some(backend) => Ok(backend.encode_batch(&[image])?.remove(0)),
            None => self.vis_enc.forward(image),
        }
    }

    pub fn text_dim(&self) -> usize {
        self.text_adapter
            .as_ref()
            .map(|b| b.dim())
            .unwrap_or(self.encoder_config.text_dim)
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_adapter
            .as_ref()
            .map(|b| b.dim())
            .unwrap_or(self.encoder_config.visual_dim)
    }

    /// Evaluation-mode class distribution. `None` for either modality zeroes
    /// that embedding slot (the text-only / no-text ablations).
    pub fn forward_probs(
        &self,
        text: Option<&str>,
        image: Option<&ImageArray>,
    ) -> Result<Vec<f64>> {
        let h_s = match text {
            Some(t) => self.encode_text_eval(t)?,
            None => Embedding::zeros(self.text_dim()),
        };
        let h_v = match image {
            Some(img) => self.encode_image_eval(img)?,
            None => Embedding::zeros(self.visual_dim()),
        };
        classifier::class_probs(&fuse(&h_s, &h_v)?, &self.head)
    }

    pub fn predict(&self, text: Option<&str>, image: Option<&ImageArray>) -> Result<Prediction> {
        let probs = self.forward_probs(text, image)?;
        Ok(Prediction::from_probs(probs, &self.labels))
    }

    /// Predicted event type for a (sentence, image) pair.
    pub fn predict_event(&self, text: &str, image: &ImageArray) -> Result<String> {
        Ok(self.predict(Some(text), Some(image))?.predicted)
    }

    /// Mean cross-entropy over the batch. With `grads`, accumulates gradients
    /// for the head and (toy backend) both encoders; `dropout_rng` enables
    /// training-mode dropout on the text encoder.
    pub fn class_loss_batch(
        &self,
        batch: &[BatchItem],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        mut grads: Option<&mut GradMap>,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if self.text_adapter.is_some() || self.visual_adapter.is_some() {
            return Err(Error::Config(
                "fine-tuning requires the toy backend; adapters are frozen".into(),
            ));
        }
        let inv_n = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for item in batch {
            if item.gold >= self.num_classes() {
                return Err(Error::Input(format!("gold index {} out of range", item.gold)));
            }
            let (h_s, text_cache) = self
                .text_enc
                .forward(&item.tokens, dropout_rng.as_deref_mut())?;
            let h_v = self.vis_enc.forward(&item.image)?;
            let fused = fuse(&h_s, &h_v)?;
            let logits = self.head.logits(&fused)?;
            let (loss, mut dlogits) = classifier::cross_entropy_from_logits(&logits, item.gold);
            total += loss * inv_n;
            if let Some(grads) = grads.as_deref_mut() {
                for d in dlogits.iter_mut() {
                    *d *= inv_n;
                }
                let dfused = self.head.backward(&fused, &dlogits, grads);
                let (d_text, d_vis) = dfused.split_at(h_s.dim());
                self.text_enc.backward(&text_cache, d_text, grads);
                self.vis_enc.backward(&item.image, d_vis, grads);
            }
        }
        if !total.is_finite() {
            return Err(Error::Numerical("non-finite classification loss".into()));
        }
        Ok(total)
    }

    /// All parameter arrays of the model, stable order and naming.
    pub fn param_entries(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = vec![
            (self.text_enc.name_embed(), &self.text_enc.embed),
            (self.text_enc.name_w(), &self.text_enc.w),
            (self.text_enc.name_b(), &self.text_enc.b),
            (ToyVisualEncoder::NAME_W.to_string(), &self.vis_enc.w),
            (crate::classifier::NAME_HEAD_W.to_string(), &self.head.w),
            (crate::classifier::NAME_HEAD_B.to_string(), &self.head.b),
        ];
        out.extend(self.imaginator.param_entries());
        out
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let (n_embed, n_w, n_b) = (
            self.text_enc.name_embed(),
            self.text_enc.name_w(),
            self.text_enc.name_b(),
        );
        let mut out = vec![
            (n_embed, &mut self.text_enc.embed),
            (n_w, &mut self.text_enc.w),
            (n_b, &mut self.text_enc.b),
            (ToyVisualEncoder::NAME_W.to_string(), &mut self.vis_enc.w),
            (crate::classifier::NAME_HEAD_W.to_string(), &mut self.head.w),
            (crate::classifier::NAME_HEAD_B.to_string(), &mut self.head.b),
        ];
        out.extend(self.imaginator.param_entries_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_entries().iter().map(|(_, v)| v.len()).sum()
    }

    /// Names of the classification-path parameters (encoders + head).
    pub fn classifier_param_names(&self) -> Vec<String> {
        vec![
            self.text_enc.name_embed(),
            self.text_enc.name_w(),
            self.text_enc.name_b(),
            ToyVisualEncoder::NAME_W.to_string(),
            crate::classifier::NAME_HEAD_W.to_string(),
            crate::classifier::NAME_HEAD_B.to_string(),
        ]
    }
}
