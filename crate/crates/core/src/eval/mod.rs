//! Scoring, synthetic benchmark data, a scripted scribbling user and the
//! ablation runner that compares refinement variants case by case.

mod ablation;
mod manifest;
mod robot;
mod synth;

pub use ablation::{cases_from_synthetic, run_ablation, AblationConfig, AblationReport, CaseResult, EvalCase, Method, MethodSummary};
pub use manifest::{Manifest, ManifestEntry, ManifestInstance};
pub use robot::{largest_component, robot_scribbles};
pub use synth::{generate_dataset, ShapeClass, SyntheticCase, SyntheticDataset, SyntheticSpec};

use crate::error::{Error, Result};
use crate::grid::LabelMap;

/// `2|A ∩ B| / (|A| + |B|)`, and 1 when both maps are empty.
pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!(
            "dice of {}x{} and {}x{} maps",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (mut inter, mut sum) = (0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        inter += (x & y) as usize;
        sum += (x + y) as usize;
    }
    Ok(if sum == 0 { 1.0 } else { 2.0 * inter as f64 / sum as f64 })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
