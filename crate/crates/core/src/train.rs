use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geoproto::{shift_augment, ScenePair};
use crate::model::Model;
use crate::numerics::{Graph, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    /// Largest post-image displacement drawn when shift augmentation is on.
    pub max_shift: u32,
    /// Chance that a step's pair is shifted when shift augmentation is on.
    pub augment_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, learning_rate: 0.02, momentum: 0.9, weight_decay: 1e-4, warmup_steps: 100, clip_norm: 10.0, max_shift: 64, augment_probability: 0.5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) || !(0.0..=1.0).contains(&self.augment_probability) {
            return Err(config_err!("invalid training settings {self:?}"));
        }
        Ok(())
    }

    /// Linear warmup into cosine decay.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warm = if step < self.warmup_steps { (step + 1) as f64 / self.warmup_steps as f64 } else { 1.0 };
        let progress = step as f64 / self.steps as f64;
        self.learning_rate * warm * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Momentum SGD; L2 weight decay is added to the gradient.
pub struct Sgd<T> {
    velocity: Vec<Tensor<T>>,
    momentum: T,
    weight_decay: T,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &Model<T>, cfg: &TrainConfig) -> Self {
        let velocity = model.store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { velocity, momentum: T::of(cfg.momentum), weight_decay: T::of(cfg.weight_decay) }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &[Tensor<T>], lr: f64) {
        let lr = T::of(lr);
        let ids: Vec<_> = model.store.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let w = model.store.get_mut(id);
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + *gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Scales gradients in place so that their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub scene: String,
    pub loss: f64,
    pub objectness: f64,
    pub classification: f64,
    pub box_iou: f64,
    pub positives: usize,
    pub learning_rate: f64,
    pub grad_norm: f64,
}

/// Trains in place, one scene per step. `on_step` sees every record.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    scenes: &[ScenePair],
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&Model<T>, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Input("no training scenes".into()));
    }
    let augment = model.config.variant.shift_augmentation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(model, cfg);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..scenes.len()).collect();
            order.shuffle(&mut rng);
        }
        let scene = &scenes[order.pop().expect("refilled above")];
        let pair = if augment && rng.gen_bool(cfg.augment_probability) { shift_augment(scene, &mut rng, cfg.max_shift)? } else { scene.clone() };
        let mut g = Graph::new();
        let (loss, breakdown) = model.loss(&mut g, &pair).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}, scene {}: {m}", pair.id)),
            other => other,
        })?;
        let mut grads = g.backward(loss)?.for_params(&g, &model.store);
        let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("step {step}, scene {}: gradient norm is {grad_norm}", pair.id)));
        }
        let lr = cfg.learning_rate_at(step);
        opt.step(model, &grads, lr);
        let record = StepRecord {
            step,
            scene: pair.id.clone(),
            loss: breakdown.total,
            objectness: breakdown.objectness,
            classification: breakdown.classification,
            box_iou: breakdown.box_iou,
            positives: breakdown.positives,
            learning_rate: lr,
            grad_norm,
        };
        on_step(model, &record)?;
        log.push(record);
    }
    Ok(log)
}
