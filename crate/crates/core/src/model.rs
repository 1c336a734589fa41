//! End-to-end network assembly.
//!
//! ```text
//! image ─ backbone ─ upsample ─┬─ roi_pool(region 1) ─ SE ─ pool ─┐
//!                              ├─ ...                             ├─ self-attention ─ co-attention ─ softmax
//!                              └─ roi_pool(whole map) ─ SE ─ pool ┘
//! ```
//!
//! The `base` ablation skips everything after the backbone except a global
//! average pool and the classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Padding, Tape, Var};
use crate::config::{FeatureMode, ModelConfig};
use crate::error::{Error, Result};
use crate::head::{
    batch_loss, classifier_logits, co_attention, self_attention, AttentionParams, AttentionTrace, AttentionVars,
    Classifier, ClassifierVars,
};
use crate::params::{glorot_uniform, BoundParams, ParamStore};
use crate::regions::{Box, RegionSet};
use crate::roi::roi_pool;
use crate::se::{se_forward, SEParams, SEVars};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
const KERNEL: usize = 3;

pub fn conv_weight_name(block: usize) -> String {
    format!("backbone.conv{block}.weight")
}

pub fn conv_bias_name(block: usize) -> String {
    format!("backbone.conv{block}.bias")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    regions: RegionSet,
}

/// Tape handles produced by the layers after the backbone.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub probs: Var,
    /// Feature bank rows, regions first and the whole image last.
    pub bank: Vec<Var>,
    /// `(alpha, L, a, Ca)` when attention is enabled.
    pub attention: Option<(Var, Var, Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    pub trace: Option<AttentionTrace>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        argmax(self.probs.data())
    }
}

/// Loss, gradients and prediction for one sample or averaged over a batch.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    /// Mean gradients, in parameter-name order.
    pub grads: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    /// Class probabilities per sample.
    pub probs: Vec<Vec<f64>>,
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

impl Model {
    /// Fresh parameters drawn deterministically from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let regions = config.region_set()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();

        let mut cin = IMAGE_CHANNELS;
        for (i, &cout) in config.backbone_widths.iter().enumerate() {
            let k = glorot_uniform(&mut rng, &[KERNEL, KERNEL, cin, cout], KERNEL * KERNEL * cin, KERNEL * KERNEL * cout)?;
            params.insert(conv_weight_name(i + 1), k)?;
            params.insert(conv_bias_name(i + 1), Tensor::zeros(&[cout])?)?;
            cin = cout;
        }

        let ablation = config.ablation;
        let channels = config.channels();
        if ablation.se_on_regions() {
            if config.share_se {
                SEParams::init(channels, config.se_ratio, &mut rng)?.insert_into(&mut params, "se.regions")?;
            } else {
                for i in 0..regions.len() {
                    SEParams::init(channels, config.se_ratio, &mut rng)?
                        .insert_into(&mut params, &region_se_prefix(i))?;
                }
            }
        }
        if ablation.se_on_image() {
            SEParams::init(channels, config.se_ratio, &mut rng)?.insert_into(&mut params, "se.image")?;
        }
        if ablation.attention() {
            AttentionParams::init(config.feature_dim(), config.hidden(), &mut rng)?
                .insert_into(&mut params, "attention")?;
        }
        Classifier::init(config.feature_dim(), config.num_classes, &mut rng)?.insert_into(&mut params, "classifier")?;

        Ok(Self { config, params, regions })
    }

    /// Wraps existing parameters, checking names and shapes against the layout
    /// that `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config)?;
        let expected: Vec<(&str, &[usize])> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != got {
            let missing: Vec<&str> = expected
                .iter()
                .filter(|e| !got.contains(e))
                .map(|e| e.0)
                .take(5)
                .collect();
            return Err(Error::invalid(format!(
                "parameters do not match the config layout (first mismatches: {missing:?})"
            )));
        }
        Ok(Self {
            config: reference.config,
            params,
            regions: reference.regions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn regions(&self) -> &RegionSet {
        &self.regions
    }

    /// Number of feature-bank rows (`|R| + 1`), or 1 for the base model.
    pub fn bank_len(&self) -> usize {
        if self.config.ablation.uses_regions() {
            self.regions.len() + 1
        } else {
            1
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        if image.shape() != [s, s, IMAGE_CHANNELS] {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: vec![s, s, IMAGE_CHANNELS],
                rhs: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Conv(3×3, same) → relu → maxpool(2) per configured width.
    pub fn backbone(&self, tape: &mut Tape, bound: &BoundParams, image: Var) -> Result<Var> {
        let mut x = image;
        for block in 1..=self.config.backbone_widths.len() {
            let k = bound.var(&conv_weight_name(block))?;
            let b = bound.var(&conv_bias_name(block))?;
            x = tape.conv2d(x, k, b, 1, Padding::Same)?;
            x = tape.relu(x)?;
            x = tape.maxpool2d(x, 2)?;
        }
        Ok(x)
    }

    /// Everything after the backbone, from the last backbone feature map.
    pub fn head(&self, tape: &mut Tape, bound: &BoundParams, feat: Var) -> Result<HeadOutput> {
        let cfg = &self.config;
        let classifier = ClassifierVars::lookup(bound, "classifier")?;
        if !cfg.ablation.uses_regions() {
            let pooled = tape.global_average_pool(feat)?;
            let row = tape.reshape(pooled, vec![1, cfg.channels()])?;
            let logits = classifier_logits(tape, row, &classifier)?;
            let probs = tape.softmax(logits)?;
            return Ok(HeadOutput {
                logits,
                probs,
                bank: vec![pooled],
                attention: None,
            });
        }

        let up = tape.bilinear_upsample(feat, cfg.upsample_factor)?;
        let (h, w) = (tape.shape(up)[0], tape.shape(up)[1]);
        let boxes = self.regions.boxes(h, w)?;
        let image_stream = boxes.len() - 1;
        let mut bank = Vec::with_capacity(boxes.len());
        for (i, b) in boxes.iter().enumerate() {
            let se = if i == image_stream {
                cfg.ablation
                    .se_on_image()
                    .then(|| SEVars::lookup(bound, "se.image"))
                    .transpose()?
            } else if cfg.ablation.se_on_regions() {
                let prefix = if cfg.share_se { "se.regions".to_string() } else { region_se_prefix(i) };
                Some(SEVars::lookup(bound, &prefix)?)
            } else {
                None
            };
            bank.push(self.region_feature(tape, up, b, se.as_ref())?);
        }

        let (logits, attention) = if cfg.ablation.attention() {
            let vars = AttentionVars::lookup(bound, "attention")?;
            let (alpha, l) = self_attention(tape, &bank, &vars, cfg.attention_norm)?;
            let (a, ca) = co_attention(tape, l, &vars)?;
            (classifier_logits(tape, ca, &classifier)?, Some((alpha, l, a, ca)))
        } else {
            let f = tape.stack(&bank)?;
            let n = bank.len();
            let mean = tape.constant(Tensor::new(vec![1, n], vec![1.0 / n as f64; n])?);
            let pooled = tape.matmul(mean, f)?;
            (classifier_logits(tape, pooled, &classifier)?, None)
        };
        let probs = tape.softmax(logits)?;
        Ok(HeadOutput {
            logits,
            probs,
            bank,
            attention,
        })
    }

    fn region_feature(&self, tape: &mut Tape, up: Var, b: &Box, se: Option<&SEVars>) -> Result<Var> {
        let cfg = &self.config;
        let mut x = roi_pool(tape, up, b, cfg.pooled_size)?;
        if let Some(vars) = se {
            x = se_forward(tape, x, vars, cfg.se_skip)?;
        }
        match cfg.feature_mode {
            FeatureMode::Gap => tape.global_average_pool(x),
            FeatureMode::Flatten => {
                let d = tape.value(x).numel();
                tape.reshape(x, vec![d])
            }
        }
    }

    /// Records the full forward pass for `image` on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &BoundParams, image: &Tensor) -> Result<(Var, HeadOutput)> {
        self.check_image(image)?;
        let x = tape.constant(image.clone());
        let feat = self.backbone(tape, bound, x)?;
        let out = self.head(tape, bound, feat)?;
        Ok((feat, out))
    }

    pub fn forward(&self, image: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (_, out) = self.forward_tape(&mut tape, &bound, image)?;
        let trace = out
            .attention
            .map(|(alpha, l, a, ca)| AttentionTrace::capture(&tape, alpha, l, a, ca));
        Ok(Prediction {
            probs: tape.value(out.probs).clone(),
            trace,
        })
    }

    /// Loss and parameter gradients for a single labeled image.
    pub fn sample_gradients(&self, image: &Tensor, label: usize) -> Result<BatchResult> {
        if label >= self.config.num_classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (_, out) = self.forward_tape(&mut tape, &bound, image)?;
        let loss = batch_loss(&mut tape, out.probs, &[label])?;
        let grads = tape.backward(loss)?;
        Ok(BatchResult {
            loss: tape.value(loss).data()[0],
            grads: bound
                .iter()
                .map(|(_, v)| grads.data(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec))
                .collect(),
            predictions: vec![argmax(tape.value(out.probs).data())],
            probs: vec![tape.value(out.probs).data().to_vec()],
        })
    }

    /// Mean loss and gradients over a batch. Samples may run on `pool`, but
    /// their gradients are always reduced in sample order.
    pub fn batch_gradients(&self, batch: &[(&Tensor, usize)], pool: Option<&rayon::ThreadPool>) -> Result<BatchResult> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let per_sample: Vec<Result<BatchResult>> = match pool {
            Some(pool) => pool.install(|| {
                batch
                    .par_iter()
                    .map(|(img, y)| self.sample_gradients(img, *y))
                    .collect()
            }),
            None => batch.iter().map(|(img, y)| self.sample_gradients(img, *y)).collect(),
        };
        let mut iter = per_sample.into_iter();
        let mut acc = iter.next().expect("non-empty batch")?;
        for r in iter {
            let r = r?;
            acc.loss += r.loss;
            for (a, g) in acc.grads.iter_mut().zip(&r.grads) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
            acc.predictions.extend(r.predictions);
            acc.probs.extend(r.probs);
        }
        let m = batch.len() as f64;
        acc.loss /= m;
        for g in &mut acc.grads {
            g.iter_mut().for_each(|v| *v /= m);
        }
        Ok(acc)
    }
}

fn region_se_prefix(i: usize) -> String {
    format!("se.region{i:03}")
}
