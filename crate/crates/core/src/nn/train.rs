use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ArchConfig, NormStats, SegmenterModel};
use crate::error::{Error, Result};
use crate::grid::{crop_with_margin, resize_labels, resize_to_min_side, Grid2D, LabelMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_halve_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Iterations averaged into one loss-curve point.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_halve_every: 5000,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 1,
            max_iterations: 60_000,
            log_every: 100,
        }
    }
}

/// Step-halving learning rate.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub initial: f64,
    pub halve_every: usize,
}

impl LrSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        self.initial * 0.5f64.powi((iteration / self.halve_every.max(1)) as i32)
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.batch_size >= 1
            && self.max_iterations >= 1
            && self.lr_halve_every >= 1
            && self.log_every >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { initial: self.learning_rate, halve_every: self.lr_halve_every }
    }
}

/// Cropped, resized training instances plus the normalization statistics of
/// the images they came from.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub samples: Vec<(Grid2D, LabelMap)>,
    pub norm: NormStats,
}

impl TrainingSet {
    /// Crops every `(image index, instance label)` with a seeded random margin and
    /// resizes the crop so its shorter side is `target_min`.
    pub fn from_instances(
        images: &[(Grid2D, Vec<u32>)],
        instances: &[(usize, u32)],
        target_min: usize,
        seed: u64,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let norm = NormStats::from_values(images.iter().flat_map(|(img, _)| img.data()));
        let samples = instances
            .iter()
            .enumerate()
            .map(|(k, &(idx, instance))| {
                let (image, label) = images
                    .get(idx)
                    .ok_or_else(|| Error::InvalidConfig(format!("instance refers to missing image {idx}")))?;
                let (crop, lab, _) = crop_with_margin(image, label, instance, seed.wrapping_add(k as u64))?;
                let resized = resize_to_min_side(&crop, target_min);
                let lab = resize_labels(&lab, resized.width(), resized.height());
                Ok((resized, lab))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, norm })
    }
}

/// Trains a fresh model with momentum SGD and unweighted cross-entropy.
pub fn train(set: &TrainingSet, arch: &ArchConfig, cfg: &TrainConfig, seed: u64) -> Result<SegmenterModel> {
    cfg.validate()?;
    if set.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (i, (img, lab)) in set.samples.iter().enumerate() {
        if !img.same_size(lab) || img.channels() != arch.in_channels {
            return Err(Error::DimensionMismatch(format!("training sample {i} has mismatched image/label")));
        }
    }
    let mut model = SegmenterModel::<f32>::init(arch, set.norm, seed)?;
    let inputs: Vec<Grid2D> = set.samples.iter().map(|(img, _)| set.norm.normalize(img)).collect();
    let ones: Vec<Vec<f32>> = set.samples.iter().map(|(img, _)| vec![1.0; img.pixels()]).collect();

    let mut velocity: Vec<Vec<f32>> = model.params_mut().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f0d);
    let mut order: Vec<usize> = Vec::new();
    let schedule = cfg.schedule();
    let mut curve = Vec::new();
    let mut window = (0f64, 0usize);

    for iteration in 0..cfg.max_iterations {
        let mut grads: Option<Vec<Vec<f32>>> = None;
        let mut batch_loss = 0f64;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..set.samples.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let k = order.pop().expect("refilled above");
            let input = &inputs[k];
            let labels = &set.samples[k].1;
            let (loss, g) = model.loss_and_grad(input.data(), input.height(), input.width(), labels.labels(), &ones[k]);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration, detail: format!("sample {k} produced loss {loss}") });
            }
            batch_loss += loss as f64;
            let tensors = g.tensors();
            match grads.as_mut() {
                None => grads = Some(tensors.into_iter().cloned().collect()),
                Some(acc) => {
                    for (a, t) in acc.iter_mut().zip(tensors) {
                        for (x, y) in a.iter_mut().zip(t) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let grads = grads.expect("batch size >= 1");
        let lr = schedule.at(iteration) as f32;
        let (mu, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
        let inv_batch = 1.0 / cfg.batch_size as f32;
        for (((is_bias, param), g), v) in model.params_mut().into_iter().zip(&grads).zip(&mut velocity) {
            let decay = if is_bias { 0.0 } else { wd };
            for ((p, &gi), vi) in param.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi - lr * (gi * inv_batch + decay * *p);
                *p += *vi;
            }
            if !param.iter().all(|p| p.is_finite()) {
                return Err(Error::NonFinite(format!("parameters diverged at iteration {iteration}")));
            }
        }
        window.0 += batch_loss / cfg.batch_size as f64;
        window.1 += 1;
        if window.1 == cfg.log_every || iteration + 1 == cfg.max_iterations {
            curve.push((window.0 / window.1 as f64) as f32);
            log::debug!("iteration {}: mean loss {:.5}", iteration + 1, curve.last().unwrap());
            window = (0.0, 0);
        }
    }
    model.set_loss_curve(curve);
    Ok(model)
}
