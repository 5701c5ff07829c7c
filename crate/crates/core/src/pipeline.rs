//! One interactive segmentation session: initial prediction inside a box,
//! then rounds of alternating graph-cut label updates and head fine-tuning.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::crf::{self, EnergyConfig};
use crate::error::{Error, Result};
use crate::eval::dice;
use crate::geodesic::scribble_uncertainty;
use crate::grid::{resize_labels_back, resize_to_min_side, BoundingBox, Grid2D, LabelMap, ScribbleSet};
use crate::nn::{FeatureCache, Head, SegmenterModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub t0: f64,
    pub t1: f64,
    pub epsilon: f64,
    pub omega: f64,
    /// Intensity weight of the geodesic metric.
    pub gamma: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub finetune_lr: f64,
    pub energy: EnergyConfig,
    /// Unit weight everywhere instead of the uncertainty-aware map.
    pub uniform_weights: bool,
    /// Restart from the trained head at the start of every round.
    pub reset_head_each_round: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            t0: 0.2,
            t1: 0.7,
            epsilon: 0.2,
            omega: 5.0,
            gamma: 1.0,
            outer_iters: 4,
            inner_iters: 20,
            finetune_lr: 1e-2,
            energy: EnergyConfig::default(),
            uniform_weights: false,
            reset_head_each_round: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        let ok = 0.0 <= self.t0
            && self.t0 < self.t1
            && self.t1 <= 1.0
            && self.omega >= 1.0
            && self.omega.is_finite()
            && self.outer_iters >= 1
            && self.epsilon > 0.0
            && self.gamma >= 0.0
            && self.finetune_lr >= 0.0
            && self.finetune_lr.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid refine config {self:?}")))
        }
    }

    /// Post-processing only: one label update, no fine-tuning.
    pub fn crf_only(&self) -> Self {
        Self { outer_iters: 1, inner_iters: 0, ..self.clone() }
    }
}

/// How a crop is brought to the network's working resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Shorter side of the resized crop.
    pub target_min: usize,
    /// Smallest accepted box side in pixels.
    pub min_box_side: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { target_min: 64, min_box_side: 3 }
    }
}

/// `{i | t0 < p_i < t1}`, compared at the map's `f32` precision.
pub fn network_uncertainty(p: &Grid2D, cfg: &RefineConfig) -> BTreeSet<usize> {
    let (t0, t1) = (cfg.t0 as f32, cfg.t1 as f32);
    p.channel(0)
        .iter()
        .enumerate()
        .filter(|&(_, &v)| t0 < v && v < t1)
        .map(|(i, _)| i)
        .collect()
}

/// `omega` on scribbles, 0 on uncertain pixels, 1 elsewhere.
pub fn build_weight_map(
    scribbles: &ScribbleSet,
    u_p: &BTreeSet<usize>,
    u_s: &BTreeSet<usize>,
    cfg: &RefineConfig,
) -> Grid2D {
    let (w, h) = (scribbles.width(), scribbles.height());
    let mut data = vec![1.0f32; w * h];
    for &i in u_p.iter().chain(u_s) {
        data[i] = 0.0;
    }
    for &i in scribbles.foreground().iter().chain(scribbles.background()) {
        data[i] = cfg.omega as f32;
    }
    Grid2D::new(w, h, 1, data).expect("sized from scribbles")
}

/// Diagnostics of one outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub energy: f64,
    pub loss_start: f64,
    pub loss_end: f64,
    pub uncertain_network: usize,
    pub uncertain_scribble: usize,
    pub label_update_ms: f64,
    pub finetune_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub supervised: bool,
    pub scribble_count: usize,
    pub iterations: Vec<IterationRecord>,
    /// Energy of the labels the round ends with.
    pub energy: f64,
    pub dice: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub round: usize,
    pub iteration: usize,
    pub labels: LabelMap,
}

#[derive(Clone, Debug)]
pub struct Session {
    model: Arc<SegmenterModel>,
    bbox: BoundingBox,
    image_size: (usize, usize),
    crop_size: (usize, usize),
    crop: Grid2D,
    contrast: Grid2D,
    cache: FeatureCache,
    head: Head<f32>,
    prob: Grid2D,
    labels: LabelMap,
    scribbles_crop: ScribbleSet,
    scribbles: ScribbleSet,
    truth: Option<LabelMap>,
    history: Vec<RoundRecord>,
    snapshots: Vec<Snapshot>,
}

/// Crops `image` to `bbox`, runs the network and thresholds at 0.5.
pub fn init_segment(model: Arc<SegmenterModel>, image: &Grid2D, bbox: BoundingBox, cfg: &SessionConfig) -> Result<Session> {
    let start = Instant::now();
    bbox.check_within(image.width(), image.height())?;
    if bbox.width() < cfg.min_box_side || bbox.height() < cfg.min_box_side {
        return Err(Error::InvalidBox(format!(
            "box {}x{} is smaller than the minimum side {}",
            bbox.width(),
            bbox.height(),
            cfg.min_box_side
        )));
    }
    if cfg.target_min == 0 {
        return Err(Error::InvalidConfig("target_min must be positive".into()));
    }
    let raw = image.crop(&bbox)?;
    let crop = resize_to_min_side(&raw, cfg.target_min);
    let (cache, prob) = model.forward(&model.prepare(&crop))?;
    let labels = crf::threshold(&prob);
    let (w, h) = (crop.width(), crop.height());
    let mut session = Session {
        head: model.head().clone(),
        bbox,
        image_size: (image.width(), image.height()),
        crop_size: (raw.width(), raw.height()),
        contrast: crop.rescaled_unit(),
        crop,
        cache,
        prob,
        labels,
        scribbles_crop: ScribbleSet::empty(raw.width(), raw.height()),
        scribbles: ScribbleSet::empty(w, h),
        truth: None,
        history: Vec::new(),
        snapshots: Vec::new(),
        model,
    };
    let energy = session.current_energy(&EnergyConfig::default())?;
    session.history.push(RoundRecord {
        round: 0,
        supervised: false,
        scribble_count: 0,
        iterations: Vec::new(),
        energy,
        dice: None,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    });
    session.snapshots.push(Snapshot { round: 0, iteration: 0, labels: session.labels.clone() });
    Ok(session)
}

impl Session {
    pub fn model(&self) -> &Arc<SegmenterModel> {
        &self.model
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    /// Size of the box crop before resizing; scribbles are given in this frame.
    pub fn crop_size(&self) -> (usize, usize) {
        self.crop_size
    }

    /// The crop at working resolution.
    pub fn crop(&self) -> &Grid2D {
        &self.crop
    }

    pub fn probability(&self) -> &Grid2D {
        &self.prob
    }

    /// Labels at working resolution.
    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn head(&self) -> &Head<f32> {
        &self.head
    }

    pub fn cache(&self) -> &FeatureCache {
        &self.cache
    }

    /// Accumulated scribbles in crop coordinates.
    pub fn scribbles(&self) -> &ScribbleSet {
        &self.scribbles_crop
    }

    /// Accumulated scribbles at working resolution.
    pub fn working_scribbles(&self) -> &ScribbleSet {
        &self.scribbles
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    /// Full-image ground truth; later rounds report Dice against it.
    pub fn set_ground_truth(&mut self, truth: LabelMap) -> Result<()> {
        if (truth.width(), truth.height()) != self.image_size {
            return Err(Error::DimensionMismatch("ground truth must cover the whole image".into()));
        }
        let d = dice(&self.final_labels(), &truth)?;
        self.truth = Some(truth);
        if let Some(first) = self.history.first_mut() {
            if first.dice.is_none() {
                first.dice = Some(d);
            }
        }
        Ok(())
    }

    fn current_energy(&self, cfg: &EnergyConfig) -> Result<f64> {
        crf::energy(&self.labels, &self.prob, &self.contrast, &self.scribbles, cfg)
    }

    /// Merges `new_scribbles` (crop coordinates) and runs one refinement round.
    /// An empty set gives unsupervised refinement.
    pub fn refine(&mut self, new_scribbles: &ScribbleSet, cfg: &RefineConfig) -> Result<&RoundRecord> {
        cfg.validate()?;
        let start = Instant::now();
        let merged = self.scribbles_crop.merged(new_scribbles)?;
        let (w, h) = (self.crop.width(), self.crop.height());
        let working = merged.resampled(w, h);

        let mut head = if cfg.reset_head_each_round { self.model.head().clone() } else { self.head.clone() };
        let mut prob = if cfg.reset_head_each_round { self.model.head_forward_with(&head, &self.cache)? } else { self.prob.clone() };
        let mut labels = self.labels.clone();
        let mut iterations = Vec::with_capacity(cfg.outer_iters);
        let mut snapshots = Vec::with_capacity(cfg.outer_iters);
        let round = self.history.len();

        for it in 0..cfg.outer_iters {
            let t = Instant::now();
            labels = crf::label_update(&prob, &self.contrast, &working, &cfg.energy)?;
            let energy = crf::energy(&labels, &prob, &self.contrast, &working, &cfg.energy)?;
            let label_ms = t.elapsed().as_secs_f64() * 1e3;

            let t = Instant::now();
            let u_p = network_uncertainty(&prob, cfg);
            let u_s = scribble_uncertainty(&labels, &working, &self.crop, cfg.epsilon, cfg.gamma)?;
            let weights = if cfg.uniform_weights {
                Grid2D::filled(w, h, 1, 1.0)
            } else {
                build_weight_map(&working, &u_p, &u_s, cfg)
            };
            let (loss_start, loss_end) = finetune_head(&self.model, &mut head, &self.cache, &labels, &weights, cfg)?;
            prob = self.model.head_forward_with(&head, &self.cache)?;
            iterations.push(IterationRecord {
                energy,
                loss_start,
                loss_end,
                uncertain_network: u_p.len(),
                uncertain_scribble: u_s.len(),
                label_update_ms: label_ms,
                finetune_ms: t.elapsed().as_secs_f64() * 1e3,
            });
            snapshots.push(Snapshot { round, iteration: it + 1, labels: labels.clone() });
        }
        let energy = crf::energy(&labels, &prob, &self.contrast, &working, &cfg.energy)?;

        self.head = head;
        self.prob = prob;
        self.labels = labels;
        self.scribbles = working;
        self.scribbles_crop = merged;
        self.snapshots.extend(snapshots);
        let dice = match &self.truth {
            Some(t) => Some(dice(&self.final_labels(), t)?),
            None => None,
        };
        self.history.push(RoundRecord {
            round,
            supervised: !self.scribbles_crop.is_empty(),
            scribble_count: self.scribbles_crop.len(),
            iterations,
            energy,
            dice,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// Labels in full-image coordinates; background outside the box.
    pub fn final_labels(&self) -> LabelMap {
        self.crop_labels()
            .paste_into(self.image_size.0, self.image_size.1, &self.bbox)
            .expect("box checked at session creation")
    }

    /// Maps working-resolution labels (such as a snapshot) to the full image
    /// without stamping scribbles.
    pub fn to_image_frame(&self, working: &LabelMap) -> LabelMap {
        let back = resize_labels_back(working, self.crop_size);
        back.paste_into(self.image_size.0, self.image_size.1, &self.bbox)
            .expect("box checked at session creation")
    }

    /// Labels at the crop's original size. Scribbled pixels always carry their
    /// scribble label, even where several of them share one working pixel.
    pub fn crop_labels(&self) -> LabelMap {
        let mut out = resize_labels_back(&self.labels, self.crop_size);
        for &i in self.scribbles_crop.foreground() {
            out.set_index(i, true);
        }
        for &i in self.scribbles_crop.background() {
            out.set_index(i, false);
        }
        out
    }

    pub fn diagnostics_json(&self) -> serde_json::Value {
        serde_json::json!({
            "bbox": self.bbox,
            "crop_size": [self.crop_size.0, self.crop_size.1],
            "working_size": [self.crop.width(), self.crop.height()],
            "scribbles": self.scribbles_crop.len(),
            "history": self.history,
        })
    }
}

/// Full-batch gradient descent on the head; returns the weighted loss before and after.
pub fn finetune_head(
    model: &SegmenterModel,
    head: &mut Head<f32>,
    cache: &FeatureCache,
    labels: &LabelMap,
    weights: &Grid2D,
    cfg: &RefineConfig,
) -> Result<(f64, f64)> {
    let lr = cfg.finetune_lr as f32;
    let mut first = None;
    for step in 0..cfg.inner_iters {
        let (loss, grad) = model.backprop_head(head, cache, labels, weights)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: step, detail: "head fine-tuning".into() });
        }
        first.get_or_insert(loss as f64);
        for ((_, param), g) in head.params_mut().into_iter().zip(grad.tensors()) {
            for (p, &gi) in param.iter_mut().zip(g) {
                *p -= lr * gi;
            }
            if !param.iter().all(|p| p.is_finite()) {
                return Err(Error::NonFinite(format!("head parameters diverged at step {step}")));
            }
        }
    }
    let end = model.weighted_loss(head, cache, labels, weights)? as f64;
    if !end.is_finite() {
        return Err(Error::NonFinite("weighted loss after fine-tuning".into()));
    }
    Ok((first.unwrap_or(end), end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchConfig, NormStats};

    fn zero_model() -> Arc<SegmenterModel> {
        Arc::new(SegmenterModel::init(&ArchConfig::toy(), NormStats::default(), 1).unwrap())
    }

    fn bright_square(w: usize, h: usize) -> Grid2D {
        Grid2D::from_fn(w, h, |x, y| if (8..24).contains(&x) && (8..24).contains(&y) { 0.8 } else { 0.2 }).unwrap()
    }

    #[test]
    fn zero_head_segments_nothing() {
        let s = init_segment(zero_model(), &bright_square(32, 32), BoundingBox::new(4, 4, 27, 27).unwrap(), &SessionConfig::default()).unwrap();
        assert_eq!(s.labels().count_foreground(), 0);
        assert_eq!(s.history().len(), 1);
        assert_eq!(s.final_labels().count_foreground(), 0);
    }

    #[test]
    fn uncertainty_and_weights() {
        let cfg = RefineConfig::default();
        let p = Grid2D::new(4, 1, 1, vec![0.5, 0.7, 0.0, 0.2]).unwrap();
        assert_eq!(network_uncertainty(&p, &cfg), BTreeSet::from([0]));
        let s = ScribbleSet::from_indices(4, 1, [0], [3]).unwrap();
        let w = build_weight_map(&s, &BTreeSet::from([0, 1]), &BTreeSet::from([2]), &cfg);
        assert_eq!(w.data(), &[5.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn tiny_box_rejected() {
        let err = init_segment(zero_model(), &bright_square(32, 32), BoundingBox::new(4, 4, 5, 5).unwrap(), &SessionConfig::default());
        assert!(matches!(err, Err(Error::InvalidBox(_))));
    }

    #[test]
    fn supervised_round_keeps_scribbles_and_grows_history() {
        let mut s = init_segment(zero_model(), &bright_square(32, 32), BoundingBox::full(32, 32), &SessionConfig { target_min: 32, min_box_side: 3 }).unwrap();
        let scr = ScribbleSet::from_points(32, 32, &[(15, 15), (16, 16)], &[(1, 1)]).unwrap();
        let rec = s.refine(&scr, &RefineConfig::default()).unwrap().clone();
        assert_eq!(rec.iterations.len(), 4);
        assert_eq!(s.history().len(), 2);
        assert_eq!(s.labels().get(15, 15), 1);
        assert_eq!(s.labels().get(1, 1), 0);
        for snap in s.snapshots() {
            if snap.round > 0 {
                assert_eq!(snap.labels.get(16, 16), 1);
            }
        }
        let clash = ScribbleSet::from_points(32, 32, &[(1, 1)], &[]).unwrap();
        assert!(matches!(s.refine(&clash, &RefineConfig::default()), Err(Error::ScribbleConflict(p)) if p == vec![(1, 1)]));
        assert_eq!(s.history().len(), 2);
    }

    #[test]
    fn uniform_weights_match_when_nothing_is_uncertain() {
        let scr = ScribbleSet::from_points(32, 32, &[(15, 15), (12, 20)], &[(1, 1), (30, 2)]).unwrap();
        let cfg = RefineConfig { t0: 0.0, t1: 1e-30, epsilon: 1e-12, omega: 1.0, ..Default::default() };
        let run = |uniform_weights: bool| {
            let mut s = init_segment(zero_model(), &bright_square(32, 32), BoundingBox::full(32, 32), &SessionConfig { target_min: 32, min_box_side: 3 }).unwrap();
            let rec = s.refine(&scr, &RefineConfig { uniform_weights, ..cfg.clone() }).unwrap().clone();
            assert!(rec.iterations.iter().all(|it| it.uncertain_network == 0 && it.uncertain_scribble == 0));
            (s.labels().clone(), s.probability().data().to_vec(), rec.iterations.iter().map(|it| it.loss_end).collect::<Vec<_>>())
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn crop_labels_keep_every_scribble_after_downscaling() {
        let mut s = init_segment(zero_model(), &bright_square(32, 32), BoundingBox::full(32, 32), &SessionConfig { target_min: 16, min_box_side: 3 }).unwrap();
        assert_eq!(s.crop().width(), 16);
        let scr = ScribbleSet::from_points(32, 32, &[(10, 10), (20, 21)], &[(11, 10), (20, 20)]).unwrap();
        s.refine(&scr, &RefineConfig::default()).unwrap();
        let crop = s.crop_labels();
        assert_eq!((crop.get(10, 10), crop.get(20, 21)), (1, 1));
        assert_eq!((crop.get(11, 10), crop.get(20, 20)), (0, 0));
        assert_eq!(s.final_labels(), crop);
    }
}
