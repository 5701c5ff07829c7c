//! Seeded synthetic images with one labelled object each.
//!
//! Every image is a smoothed Gaussian noise texture with a smooth linear bias
//! field, a few unlabelled distractor blobs, and one object whose class
//! decides only its shape. All classes share the same intensity statistics
//! unless `class_offsets` says otherwise.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundingBox, Grid2D, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Ellipse,
    Annulus,
    Rectangle,
}

impl ShapeClass {
    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Ellipse => "ellipse",
            ShapeClass::Annulus => "annulus",
            ShapeClass::Rectangle => "rectangle",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeClass::Ellipse),
            "annulus" => Ok(ShapeClass::Annulus),
            "rectangle" => Ok(ShapeClass::Rectangle),
            other => Err(Error::InvalidConfig(format!("unknown shape class {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Images are square with this side.
    pub image_size: usize,
    pub train_classes: Vec<ShapeClass>,
    pub heldout_classes: Vec<ShapeClass>,
    pub train_per_class: usize,
    /// Test images per held-out class.
    pub test_per_class: usize,
    /// Test images per training class (seen-class evaluation).
    pub test_seen_per_class: usize,
    /// Object semi-axis range as a fraction of `image_size`.
    pub size_range: (f64, f64),
    pub background_mean: f64,
    pub contrast: f64,
    pub intensity_jitter: f64,
    pub class_offsets: BTreeMap<ShapeClass, f64>,
    pub noise_std: f64,
    /// Standard deviation (pixels) of the Gaussian that smooths the noise.
    pub noise_smoothing: f64,
    /// Peak-to-peak amplitude of the linear bias field.
    pub bias_field: f64,
    pub distractors: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 2017,
            image_size: 64,
            train_classes: vec![ShapeClass::Ellipse, ShapeClass::Annulus],
            heldout_classes: vec![ShapeClass::Rectangle],
            train_per_class: 100,
            test_per_class: 20,
            test_seen_per_class: 0,
            size_range: (0.15, 0.3),
            background_mean: 0.35,
            contrast: 0.25,
            intensity_jitter: 0.05,
            class_offsets: BTreeMap::new(),
            noise_std: 0.08,
            noise_smoothing: 1.0,
            bias_field: 0.1,
            distractors: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic spec: {m}")));
        if self.train_classes.len() < 2 {
            return bad("need at least two training classes");
        }
        if self.heldout_classes.is_empty() {
            return bad("need at least one held-out class");
        }
        if self.train_classes.iter().any(|c| self.heldout_classes.contains(c)) {
            return bad("a class cannot be both trained on and held out");
        }
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        let (lo, hi) = self.size_range;
        if !(0.0 < lo && lo <= hi && hi <= 0.4) {
            return bad("size_range must satisfy 0 < lo <= hi <= 0.4");
        }
        if self.noise_std < 0.0 || self.noise_smoothing < 0.0 || self.bias_field < 0.0 || self.intensity_jitter < 0.0 {
            return bad("noise, smoothing, bias and jitter must be non-negative");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::format("synthetic spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One image holding a single object labelled 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCase {
    pub name: String,
    pub class: ShapeClass,
    pub image: Grid2D,
    pub labels: Vec<u32>,
    /// Tight box around the object.
    pub bbox: BoundingBox,
}

impl SyntheticCase {
    pub fn truth(&self) -> LabelMap {
        LabelMap::binarize(self.image.width(), self.image.height(), &self.labels, 1).expect("sized at generation")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<SyntheticCase>,
    pub test: Vec<SyntheticCase>,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: ShapeClass,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    /// Inner/outer radius ratio for annuli.
    hole: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        match self.class {
            ShapeClass::Ellipse => u * u + v * v <= 1.0,
            ShapeClass::Annulus => {
                let r2 = u * u + v * v;
                r2 <= 1.0 && r2 > self.hole * self.hole
            }
            ShapeClass::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
        }
    }

    fn random(class: ShapeClass, size: f64, range: (f64, f64), rng: &mut ChaCha8Rng) -> Self {
        let a = rng.random_range(range.0..=range.1) * size;
        let b = rng.random_range(range.0..=range.1) * size;
        let reach = a.max(b) + 2.0;
        let lo = reach.min(size / 2.0);
        let hi = (size - reach).max(lo + 1e-9);
        Shape {
            class,
            cx: rng.random_range(lo..hi),
            cy: rng.random_range(lo..hi),
            a,
            b,
            angle: rng.random_range(-PI / 6.0..PI / 6.0),
            hole: rng.random_range(0.45..0.6),
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge clamping.
fn blur(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k.iter().enumerate().map(|(t, kv)| kv * data[y * w + clamp(x as isize + t as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(t, kv)| kv * tmp[clamp(y as isize + t as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Smoothed noise rescaled back to standard deviation `std`.
fn texture(w: usize, h: usize, std: f64, smoothing: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f64> = (0..w * h).map(|_| normal.sample(rng)).collect();
    let smooth = blur(&raw, w, h, smoothing);
    let n = smooth.len() as f64;
    let mean = smooth.iter().sum::<f64>() / n;
    let sd = (smooth.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(1e-12);
    smooth.iter().map(|v| (v - mean) / sd * std).collect()
}

fn render(spec: &SyntheticSpec, class: ShapeClass, name: String, rng: &mut ChaCha8Rng) -> SyntheticCase {
    let n = spec.image_size;
    let size = n as f64;
    let shape = Shape::random(class, size, spec.size_range, rng);

    let mut values: Vec<f64> = texture(n, n, spec.noise_std, spec.noise_smoothing, rng);
    let theta = rng.random_range(0.0..2.0 * PI);
    let (s, c) = theta.sin_cos();
    for y in 0..n {
        for x in 0..n {
            let t = ((x as f64 - size / 2.0) * c + (y as f64 - size / 2.0) * s) / size;
            values[y * n + x] += spec.background_mean + spec.bias_field * t;
        }
    }
    let fg_level = spec.contrast + spec.class_offsets.get(&class).copied().unwrap_or(0.0);
    for _ in 0..spec.distractors {
        let mut d = Shape::random(ShapeClass::Ellipse, size, (spec.size_range.0 * 0.3, spec.size_range.0 * 0.6), rng);
        d.angle = rng.random_range(0.0..PI);
        let level = fg_level * rng.random_range(0.5..1.0);
        for y in 0..n {
            for x in 0..n {
                if d.contains(x as f64, y as f64) && !shape.contains(x as f64, y as f64) {
                    values[y * n + x] += level;
                }
            }
        }
    }
    let jitter = if spec.intensity_jitter > 0.0 { rng.random_range(-spec.intensity_jitter..spec.intensity_jitter) } else { 0.0 };
    let mut labels = vec![0u32; n * n];
    for y in 0..n {
        for x in 0..n {
            if shape.contains(x as f64, y as f64) {
                labels[y * n + x] = 1;
                values[y * n + x] += fg_level + jitter;
            }
        }
    }
    let data: Vec<f32> = values.iter().map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32).collect();
    let bbox = BoundingBox::tight(n, n, |x, y| labels[y * n + x] == 1).expect("objects are larger than a pixel");
    SyntheticCase { name, class, image: Grid2D::new(n, n, 1, data).expect("sized"), labels, bbox }
}

/// Training images of the training classes and test images of the held-out
/// (and optionally the training) classes, all reproducible from `spec.seed`.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    for k in 0..spec.train_per_class {
        for &class in &spec.train_classes {
            train.push(render(spec, class, format!("train_{class}_{k:04}"), &mut rng));
        }
    }
    let mut test = Vec::new();
    for &class in &spec.heldout_classes {
        for k in 0..spec.test_per_class {
            test.push(render(spec, class, format!("test_{class}_{k:04}"), &mut rng));
        }
    }
    for &class in &spec.train_classes {
        for k in 0..spec.test_seen_per_class {
            test.push(render(spec, class, format!("test_{class}_{k:04}"), &mut rng));
        }
    }
    Ok(SyntheticDataset { train, test })
}
