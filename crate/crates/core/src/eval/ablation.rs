use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::robot::robot_scribbles;
use super::synth::SyntheticCase;
use super::{dice, mean_std};
use crate::error::Result;
use crate::grid::{draw_margins, BoundingBox, Grid2D, LabelMap, ScribbleSet};
use crate::io::save_mask;
use crate::nn::SegmenterModel;
use crate::pipeline::{init_segment, RefineConfig, Session, SessionConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Initial,
    CrfUnsupervised,
    BifsegUnsupervised,
    CrfSupervised,
    BifsegUniformSupervised,
    BifsegSupervised,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Initial,
        Method::CrfUnsupervised,
        Method::BifsegUnsupervised,
        Method::CrfSupervised,
        Method::BifsegUniformSupervised,
        Method::BifsegSupervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Initial => "initial",
            Method::CrfUnsupervised => "crf_unsupervised",
            Method::BifsegUnsupervised => "bifseg_unsupervised",
            Method::CrfSupervised => "crf_supervised",
            Method::BifsegUniformSupervised => "bifseg_uniform_supervised",
            Method::BifsegSupervised => "bifseg_supervised",
        }
    }

    pub fn supervised(self) -> bool {
        matches!(self, Method::CrfSupervised | Method::BifsegUniformSupervised | Method::BifsegSupervised)
    }

    fn refine_config(self, base: &RefineConfig) -> RefineConfig {
        match self {
            Method::Initial => base.clone(),
            Method::CrfUnsupervised | Method::CrfSupervised => base.crf_only(),
            Method::BifsegUniformSupervised => RefineConfig { uniform_weights: true, ..base.clone() },
            Method::BifsegUnsupervised | Method::BifsegSupervised => base.clone(),
        }
    }
}

/// An image, its ground truth for one object, and the box a user would draw.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub name: String,
    pub class: String,
    pub image: Grid2D,
    pub truth: LabelMap,
    pub bbox: BoundingBox,
}

impl EvalCase {
    /// The object's tight box widened by seeded per-side margins.
    pub fn from_synthetic(case: &SyntheticCase, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (case.image.width(), case.image.height());
        EvalCase {
            name: case.name.clone(),
            class: case.class.name().to_string(),
            image: case.image.clone(),
            truth: case.truth(),
            bbox: case.bbox.expanded(draw_margins(&mut rng), w, h),
        }
    }
}

/// Evaluation cases for synthetic objects; case `i` draws its margins with `box_seed + i`.
pub fn cases_from_synthetic(cases: &[SyntheticCase], box_seed: u64) -> Vec<EvalCase> {
    cases.iter().enumerate().map(|(i, c)| EvalCase::from_synthetic(c, box_seed.wrapping_add(i as u64))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Seed of the robot user.
    pub seed: u64,
    /// Seed of the box margins drawn around synthetic objects.
    pub box_seed: u64,
    /// Scribbled pixels per robot round.
    pub budget: usize,
    pub rounds: usize,
    pub refine: RefineConfig,
    pub session: SessionConfig,
    #[serde(skip)]
    pub keep_masks: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            box_seed: 100,
            budget: 30,
            rounds: 2,
            refine: RefineConfig::default(),
            session: SessionConfig::default(),
            keep_masks: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub class: String,
    pub bbox: BoundingBox,
    /// Dice per method after each round; unsupervised methods have one entry.
    pub dice: BTreeMap<Method, Vec<f64>>,
    /// Scribbled pixels added in each robot round.
    pub scribbles: Vec<usize>,
    #[serde(skip)]
    pub time_ms: BTreeMap<Method, f64>,
    #[serde(skip)]
    pub masks: BTreeMap<Method, LabelMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub class: String,
    pub round: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub summary: Vec<MethodSummary>,
    pub cases: Vec<CaseResult>,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64() * 1e3))
}

fn run_case(model: &Arc<SegmenterModel>, case: &EvalCase, index: usize, cfg: &AblationConfig) -> Result<CaseResult> {
    let mut dice_by: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    let mut time_ms = BTreeMap::new();
    let mut masks = BTreeMap::new();
    let mut record = |m: Method, s: &Session, ms: f64, dice_by: &mut BTreeMap<Method, Vec<f64>>| -> Result<()> {
        let full = s.final_labels();
        dice_by.entry(m).or_default().push(dice(&full, &case.truth)?);
        *time_ms.entry(m).or_insert(0.0) += ms;
        if cfg.keep_masks {
            masks.insert(m, full);
        }
        Ok(())
    };

    let (base, init_ms) = timed(|| init_segment(model.clone(), &case.image, case.bbox, &cfg.session))?;
    record(Method::Initial, &base, init_ms, &mut dice_by)?;

    let (w, h) = base.crop_size();
    let none = ScribbleSet::empty(w, h);
    for m in [Method::CrfUnsupervised, Method::BifsegUnsupervised] {
        let mut s = base.clone();
        let (_, ms) = timed(|| s.refine(&none, &m.refine_config(&cfg.refine)).map(|_| ()))?;
        record(m, &s, ms, &mut dice_by)?;
    }

    let truth_crop = case.truth.crop(&case.bbox)?;
    let supervised = [Method::CrfSupervised, Method::BifsegUniformSupervised, Method::BifsegSupervised];
    let mut sessions: Vec<Session> = supervised.iter().map(|_| base.clone()).collect();
    let mut scribble_counts = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        // Every variant gets the scribbles the full method's result calls for.
        let reference = sessions.last().expect("three supervised methods");
        let seed = cfg.seed ^ (index as u64) << 16 ^ round as u64;
        let scribbles = robot_scribbles(&reference.crop_labels(), &truth_crop, cfg.budget, seed)?;
        scribble_counts.push(scribbles.len());
        for (m, s) in supervised.iter().zip(sessions.iter_mut()) {
            let (_, ms) = timed(|| s.refine(&scribbles, &m.refine_config(&cfg.refine)).map(|_| ()))?;
            record(*m, s, ms, &mut dice_by)?;
        }
    }
    Ok(CaseResult {
        name: case.name.clone(),
        class: case.class.clone(),
        bbox: case.bbox,
        dice: dice_by,
        scribbles: scribble_counts,
        time_ms,
        masks,
    })
}

/// Runs every method on every case with shared boxes and robot scribbles.
pub fn run_ablation(model: Arc<SegmenterModel>, cases: &[EvalCase], cfg: &AblationConfig) -> Result<AblationReport> {
    cfg.refine.validate()?;
    let results: Vec<CaseResult> = cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| run_case(&model, case, i, cfg))
        .collect::<Result<_>>()?;

    let mut classes: Vec<String> = results.iter().map(|r| r.class.clone()).collect();
    classes.sort();
    classes.dedup();
    classes.push("all".into());
    let mut summary = Vec::new();
    for class in &classes {
        let rows: Vec<&CaseResult> = results.iter().filter(|r| class == "all" || &r.class == class).collect();
        for m in Method::ALL {
            let rounds = if m.supervised() { cfg.rounds } else { 1 };
            for round in 0..rounds {
                let values: Vec<f64> = rows.iter().filter_map(|r| r.dice.get(&m).and_then(|d| d.get(round)).copied()).collect();
                let (mean, std) = mean_std(&values);
                summary.push(MethodSummary {
                    method: m,
                    class: class.clone(),
                    round: if m.supervised() { round + 1 } else { 0 },
                    n: values.len(),
                    mean,
                    std,
                });
            }
        }
    }
    Ok(AblationReport { config: cfg.clone(), summary, cases: results })
}

impl AblationReport {
    /// Mean Dice of `method` over `class` (or every case for `"all"`) after `round`.
    pub fn mean_dice(&self, method: Method, class: &str, round: usize) -> Option<f64> {
        self.summary.iter().find(|s| s.method == method && s.class == class && s.round == round).map(|s| s.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,class,round,n,mean_dice,std_dice\n");
        for s in &self.summary {
            writeln!(out, "{},{},{},{},{:.6},{:.6}", s.method.name(), s.class, s.round, s.n, s.mean, s.std).unwrap();
        }
        out
    }

    /// Machine time per method, averaged over cases. Varies between runs.
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("method,n,mean_ms,std_ms\n");
        for m in Method::ALL {
            let t: Vec<f64> = self.cases.iter().filter_map(|c| c.time_ms.get(&m).copied()).collect();
            let (mean, std) = mean_std(&t);
            writeln!(out, "{},{},{:.3},{:.3}", m.name(), t.len(), mean, std).unwrap();
        }
        out
    }

    /// Writes `report.json` and `report.csv` (reproducible), `timing.csv`, and
    /// per-case masks when they were kept.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("timing.csv"), self.timing_csv())?;
        if self.cases.iter().any(|c| !c.masks.is_empty()) {
            let masks = dir.join("masks");
            fs::create_dir_all(&masks)?;
            for c in &self.cases {
                for (m, mask) in &c.masks {
                    save_mask(masks.join(format!("{}_{}.png", c.name, m.name())), mask)?;
                }
            }
        }
        Ok(())
    }
}
