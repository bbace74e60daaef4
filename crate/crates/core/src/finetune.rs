//! Supervised task-specific finetuning of the teacher backbone on a small
//! labeled-frame set. The projection head is discarded; a linear
//! classifier over the backbone feature is trained jointly with the
//! full backbone.

use rand::Rng;

use crate::data::Label;
use crate::distill::LossRecord;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::frame::GrayImage;
use crate::numerics::{Graph, Tensor, Var};
use crate::optim::{cosine_lr, AdamW};
use crate::params::{BoundParams, ParamStore};
use crate::rng::SeedStream;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Inverse-frequency class weights in the loss; off by default.
    pub class_weights: bool,
}

impl FinetuneConfig {
    /// Table-1 finetuning recipe.
    pub fn defaults() -> Self {
        FinetuneConfig { lr: 5e-5, weight_decay: 0.001, epochs: 100, batch_size: 64, class_weights: false }
    }
}

pub struct FinetuneResult {
    /// Backbone plus `classifier.*`; the projection head is dropped.
    pub params: ParamStore,
    pub history: Vec<LossRecord>,
}

fn strip_head(backbone: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in backbone.iter() {
        if !name.starts_with("head.") {
            out.insert(name, t.clone());
        }
    }
    out
}

/// Cross-entropy of classifier logits against integer labels; in-graph.
fn cross_entropy(
    g: &Graph,
    logits: Var,
    labels: &[Label],
    class_weights: Option<&[f32; NUM_CLASSES]>,
) -> Result<Var> {
    let (rows, cols) = g.value(logits).dims2()?;
    debug_assert_eq!(rows, labels.len());
    let mut target = Tensor::zeros(&[rows, cols]);
    let mut weight_sum = 0.0f32;
    for (i, &y) in labels.iter().enumerate() {
        let w = class_weights.map(|cw| cw[y as usize]).unwrap_or(1.0);
        target.data_mut()[i * cols + y as usize] = w;
        weight_sum += w;
    }
    let log_p = g.log(g.softmax_t(logits, 1.0)?)?;
    let t = g.constant(target);
    let nll = g.neg(g.sum_all(g.mul(t, log_p)?)?)?;
    g.scale(nll, 1.0 / weight_sum)
}

fn classifier_logits(
    g: &Graph,
    bound: &BoundParams,
    enc: &EncoderConfig,
    frames: &[GrayImage],
) -> Result<Var> {
    let out = encoder::forward_features(g, bound, "", enc, frames, None)?;
    g.add(
        g.matmul(out.features, bound.var("classifier.weight")?)?,
        bound.var("classifier.bias")?,
    )
}

/// Full-network supervised finetuning. Zero epochs returns the input
/// backbone plus a freshly initialized classifier.
pub fn finetune(
    backbone: &ParamStore,
    labeled: &[(GrayImage, Label)],
    enc: &EncoderConfig,
    cfg: &FinetuneConfig,
    seeds: &SeedStream,
) -> Result<FinetuneResult> {
    if labeled.is_empty() {
        return Err(Error::EmptyDataset("finetune needs labeled frames".into()));
    }
    for (_, y) in labeled {
        if *y as usize >= NUM_CLASSES {
            return Err(Error::BadLabel(*y as i64));
        }
    }
    let mut params = strip_head(backbone);
    let mut init_rng = seeds.stream("finetune_init");
    params.insert(
        "classifier.weight",
        Tensor::trunc_normal(&[enc.embed_dim, NUM_CLASSES], 0.02, &mut init_rng),
    );
    params.insert("classifier.bias", Tensor::zeros(&[NUM_CLASSES]));

    let class_weights = cfg.class_weights.then(|| {
        let mut counts = [0usize; NUM_CLASSES];
        for (_, y) in labeled {
            counts[*y as usize] += 1;
        }
        let total = labeled.len() as f32;
        let mut w = [0.0f32; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            w[c] = if counts[c] == 0 { 0.0 } else { total / (NUM_CLASSES as f32 * counts[c] as f32) };
        }
        w
    });

    let mut opt = AdamW::new();
    let mut history = Vec::new();
    let steps_per_epoch = labeled.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        let mut rng = seeds.stream_indexed("finetune_shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let frames: Vec<GrayImage> = batch.iter().map(|&i| labeled[i].0.clone()).collect();
            let labels: Vec<Label> = batch.iter().map(|&i| labeled[i].1).collect();
            let g = Graph::new();
            let bound = BoundParams::bind(&g, &params, true);
            let logits = classifier_logits(&g, &bound, enc, &frames)?;
            let loss = cross_entropy(&g, logits, &labels, class_weights.as_ref())?;
            let loss_value = g.value(loss).scalar_value()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            g.backward(loss)?;
            let lr = cosine_lr(cfg.lr, global_step, total_steps);
            opt.step(&mut params, &bound.grads(), lr, cfg.weight_decay)?;
            history.push(LossRecord { epoch, step, loss: loss_value });
            global_step += 1;
        }
    }
    Ok(FinetuneResult { params, history })
}

/// Probability vector over the 3 classes for one frame.
pub fn predict_frame(
    params: &ParamStore,
    enc: &EncoderConfig,
    frame: &GrayImage,
) -> Result<Tensor> {
    Ok(predict_frames(params, enc, std::slice::from_ref(frame))?.remove(0))
}

/// Batched frame prediction; each row softmax-normalized.
pub fn predict_frames(
    params: &ParamStore,
    enc: &EncoderConfig,
    frames: &[GrayImage],
) -> Result<Vec<Tensor>> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset("predict on empty batch".into()));
    }
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params, false);
    let logits = classifier_logits(&g, &bound, enc, frames)?;
    let probs = g.softmax_t(logits, 1.0)?;
    let v = g.value(probs);
    Ok((0..frames.len())
        .map(|i| Tensor::from_vec(v.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES].to_vec()))
        .collect())
}
