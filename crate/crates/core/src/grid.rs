//! Dense grid containers shared by every stage of the pipeline.
//!
//! Multi-channel grids are stored channel-planar: each channel is a
//! row-major `height x width` plane, and planes follow one another.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest margin (pixels) added to each side of a training box.
pub const MAX_TRAIN_MARGIN: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Grid2D {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::DimensionMismatch(format!(
                "grid dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{channels} grid needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid value at flat index {i}")));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Builds a grid from values already known to be finite and correctly sized.
    pub(crate) fn from_raw(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self { width, height, channels, data }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!(value.is_finite());
        Self::from_raw(width, height, channels, vec![value; width * height * channels])
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    /// Single-channel grid from a per-pixel function.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Value of channel 0 at `(x, y)`.
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn get_c(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.pixels() + y * self.width + x]
    }

    pub fn same_size<T: Sized2D>(&self, other: &T) -> bool {
        self.width == other.width() && self.height == other.height()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.width, self.height, self.channels, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Linearly rescales the grid to `[0, 1]`; a constant grid maps to zeros.
    pub fn rescaled_unit(&self) -> Self {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        if range <= 0.0 {
            return Self::zeros(self.width, self.height, self.channels);
        }
        Self::from_raw(
            self.width,
            self.height,
            self.channels,
            self.data.iter().map(|&v| (v - lo) / range).collect(),
        )
    }

    /// Copies the pixels inside `bbox` (all channels).
    pub fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        bbox.check_within(self.width, self.height)?;
        let (w, h) = (bbox.width(), bbox.height());
        let mut data = Vec::with_capacity(w * h * self.channels);
        for c in 0..self.channels {
            let plane = self.channel(c);
            for y in bbox.y_min..=bbox.y_max {
                let row = y * self.width;
                data.extend_from_slice(&plane[row + bbox.x_min..=row + bbox.x_max]);
            }
        }
        Ok(Self::from_raw(w, h, self.channels, data))
    }
}

/// Anything with a 2D pixel extent.
pub trait Sized2D {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
}

impl Sized2D for Grid2D {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
}

impl Sized2D for LabelMap {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
}

/// Binary per-pixel labels; 1 is foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} label map needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::format("label map", format!("label {} at index {i} is not binary", labels[i])));
        }
        Ok(Self { width, height, labels })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, labels: vec![0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y) as u8);
            }
        }
        Self { width, height, labels }
    }

    /// Foreground wherever `values[i] == target`.
    pub fn binarize(width: usize, height: usize, values: &[u32], target: u32) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch("label values do not match dimensions".into()));
        }
        Ok(Self { width, height, labels: values.iter().map(|&v| (v == target) as u8).collect() })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, foreground: bool) {
        self.labels[y * self.width + x] = foreground as u8;
    }

    pub fn set_index(&mut self, index: usize, foreground: bool) {
        self.labels[index] = foreground as u8;
    }

    pub fn count_foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        bbox.check_within(self.width, self.height)?;
        let mut labels = Vec::with_capacity(bbox.area());
        for y in bbox.y_min..=bbox.y_max {
            let row = y * self.width;
            labels.extend_from_slice(&self.labels[row + bbox.x_min..=row + bbox.x_max]);
        }
        Ok(Self { width: bbox.width(), height: bbox.height(), labels })
    }

    /// Full-size map that is background outside `bbox` and `self` inside it.
    pub fn paste_into(&self, width: usize, height: usize, bbox: &BoundingBox) -> Result<Self> {
        bbox.check_within(width, height)?;
        if bbox.width() != self.width || bbox.height() != self.height {
            return Err(Error::DimensionMismatch(format!(
                "cannot paste {}x{} labels into a {}x{} box",
                self.width,
                self.height,
                bbox.width(),
                bbox.height()
            )));
        }
        let mut out = Self::zeros(width, height);
        for y in 0..self.height {
            let dst = (y + bbox.y_min) * width + bbox.x_min;
            out.labels[dst..dst + self.width].copy_from_slice(&self.labels[y * self.width..(y + 1) * self.width]);
        }
        Ok(out)
    }

    pub fn to_grid(&self) -> Grid2D {
        Grid2D::from_raw(self.width, self.height, 1, self.labels.iter().map(|&l| l as f32).collect())
    }
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::InvalidBox(format!("({x_min},{y_min},{x_max},{y_max}) has min > max")));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { x_min: 0, y_min: 0, x_max: width - 1, y_max: height - 1 }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.contains(other.x_min, other.y_min) && self.contains(other.x_max, other.y_max)
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.x_min > self.x_max || self.y_min > self.y_max || self.x_max >= width || self.y_max >= height {
            return Err(Error::InvalidBox(format!(
                "({},{},{},{}) does not fit a {width}x{height} image",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        Ok(())
    }

    /// Tight box around the pixels where `pred(x, y)` holds.
    pub fn tight(width: usize, height: usize, pred: impl Fn(usize, usize) -> bool) -> Option<Self> {
        let mut bbox: Option<Self> = None;
        for y in 0..height {
            for x in 0..width {
                if pred(x, y) {
                    bbox = Some(match bbox {
                        None => Self { x_min: x, y_min: y, x_max: x, y_max: y },
                        Some(b) => Self {
                            x_min: b.x_min.min(x),
                            y_min: b.y_min.min(y),
                            x_max: b.x_max.max(x),
                            y_max: b.y_max.max(y),
                        },
                    });
                }
            }
        }
        bbox
    }

    /// Grows each side by its margin, `[left, top, right, bottom]`, clipping to the image.
    pub fn expanded(&self, margins: [usize; 4], width: usize, height: usize) -> Self {
        let [left, top, right, bottom] = margins;
        Self {
            x_min: self.x_min.saturating_sub(left),
            y_min: self.y_min.saturating_sub(top),
            x_max: (self.x_max + right).min(width - 1),
            y_max: (self.y_max + bottom).min(height - 1),
        }
    }

    /// Parses `x0,y0,x1,y1`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidBox(format!("{s:?}: {e}")))?;
        match parts[..] {
            [x0, y0, x1, y1] => Self::new(x0, y0, x1, y1),
            _ => Err(Error::InvalidBox(format!("{s:?}: expected x0,y0,x1,y1"))),
        }
    }
}

/// Foreground and background scribbles as flat pixel indices of a `width x height` grid.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScribbleSet {
    width: usize,
    height: usize,
    foreground: BTreeSet<usize>,
    background: BTreeSet<usize>,
}

impl ScribbleSet {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, ..Default::default() }
    }

    /// Builds a set from `(x, y)` points. Duplicates within a label are merged.
    pub fn from_points(
        width: usize,
        height: usize,
        foreground: &[(usize, usize)],
        background: &[(usize, usize)],
    ) -> Result<Self> {
        let mut set = Self::empty(width, height);
        let index = |&(x, y): &(usize, usize)| -> Result<usize> {
            if x >= width || y >= height {
                return Err(Error::OutOfBounds { x, y, width, height });
            }
            Ok(y * width + x)
        };
        for p in foreground {
            set.foreground.insert(index(p)?);
        }
        for p in background {
            set.background.insert(index(p)?);
        }
        set.check_disjoint()?;
        Ok(set)
    }

    pub fn from_indices(
        width: usize,
        height: usize,
        foreground: impl IntoIterator<Item = usize>,
        background: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let set = Self {
            width,
            height,
            foreground: foreground.into_iter().collect(),
            background: background.into_iter().collect(),
        };
        let n = width * height;
        if let Some(&i) = set.foreground.iter().chain(&set.background).find(|&&i| i >= n) {
            return Err(Error::OutOfBounds { x: i % width.max(1), y: i / width.max(1), width, height });
        }
        set.check_disjoint()?;
        Ok(set)
    }

    fn check_disjoint(&self) -> Result<()> {
        let clash: Vec<(usize, usize)> = self
            .foreground
            .intersection(&self.background)
            .map(|&i| (i % self.width, i / self.width))
            .collect();
        if clash.is_empty() {
            Ok(())
        } else {
            Err(Error::ScribbleConflict(clash))
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn foreground(&self) -> &BTreeSet<usize> {
        &self.foreground
    }

    pub fn background(&self) -> &BTreeSet<usize> {
        &self.background
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty() && self.background.is_empty()
    }

    pub fn len(&self) -> usize {
        self.foreground.len() + self.background.len()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.label_of(index).is_some()
    }

    /// The user label `s_i` of a scribbled pixel.
    pub fn label_of(&self, index: usize) -> Option<u8> {
        if self.foreground.contains(&index) {
            Some(1)
        } else if self.background.contains(&index) {
            Some(0)
        } else {
            None
        }
    }

    /// Union with `other`; fails naming every pixel that would carry both labels.
    pub fn merged(&self, other: &ScribbleSet) -> Result<Self> {
        if other.width != self.width || other.height != self.height {
            return Err(Error::DimensionMismatch(format!(
                "scribbles for {}x{} cannot merge into {}x{}",
                other.width, other.height, self.width, self.height
            )));
        }
        let merged = Self {
            width: self.width,
            height: self.height,
            foreground: self.foreground.union(&other.foreground).copied().collect(),
            background: self.background.union(&other.background).copied().collect(),
        };
        merged.check_disjoint()?;
        Ok(merged)
    }

    /// Maps the scribbles onto a `width x height` grid of the same extent.
    ///
    /// Each target pixel takes the scribble of its nearest source pixel; source
    /// scribbles that are nobody's nearest pixel (downsampling) are then
    /// forwarded to their own nearest target pixel if it is still free.
    pub fn resampled(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Self::empty(width, height);
        let mut taken = vec![false; width * height];
        let mut reached = BTreeSet::new();
        for ty in 0..height {
            let sy = nearest_source(ty, height, self.height);
            for tx in 0..width {
                let sx = nearest_source(tx, width, self.width);
                let src = sy * self.width + sx;
                if let Some(label) = self.label_of(src) {
                    let t = ty * width + tx;
                    taken[t] = true;
                    reached.insert(src);
                    if label == 1 {
                        out.foreground.insert(t);
                    } else {
                        out.background.insert(t);
                    }
                }
            }
        }
        for (&src, label) in self
            .foreground
            .iter()
            .map(|i| (i, 1u8))
            .chain(self.background.iter().map(|i| (i, 0u8)))
        {
            if reached.contains(&src) {
                continue;
            }
            let tx = nearest_source(src % self.width, self.width, width);
            let ty = nearest_source(src / self.width, self.height, height);
            let t = ty * width + tx;
            if !taken[t] {
                taken[t] = true;
                if label == 1 {
                    out.foreground.insert(t);
                } else {
                    out.background.insert(t);
                }
            }
        }
        out
    }

    /// Scribble points as `(x, y)` pairs, foreground first.
    pub fn points(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let xy = |&i: &usize| (i % self.width, i / self.width);
        (self.foreground.iter().map(xy).collect(), self.background.iter().map(xy).collect())
    }
}

/// Nearest source coordinate for target coordinate `t` under pixel-centre alignment.
pub(crate) fn nearest_source(t: usize, target_len: usize, source_len: usize) -> usize {
    let s = ((t as f64 + 0.5) * source_len as f64 / target_len as f64).floor() as usize;
    s.min(source_len - 1)
}

/// Crops `image` and the binarized instance around the instance's tight box
/// grown by `margins` (`[left, top, right, bottom]`), clipped to the image.
pub fn crop_with_margins(
    image: &Grid2D,
    label: &[u32],
    instance_label: u32,
    margins: [usize; 4],
) -> Result<(Grid2D, LabelMap, BoundingBox)> {
    let (w, h) = (image.width(), image.height());
    if label.len() != w * h {
        return Err(Error::DimensionMismatch("label map does not match the image".into()));
    }
    let tight = BoundingBox::tight(w, h, |x, y| label[y * w + x] == instance_label)
        .ok_or(Error::EmptyInstance(instance_label))?;
    let bbox = tight.expanded(margins, w, h);
    let binary = LabelMap::binarize(w, h, label, instance_label)?;
    Ok((image.crop(&bbox)?, binary.crop(&bbox)?, bbox))
}

/// Draws the four per-side margins uniformly from `0..=MAX_TRAIN_MARGIN`
/// in `[left, top, right, bottom]` order.
pub fn draw_margins(rng: &mut impl Rng) -> [usize; 4] {
    std::array::from_fn(|_| rng.random_range(0..=MAX_TRAIN_MARGIN))
}

/// Training-set crop: tight instance box plus a seeded random margin per side.
pub fn crop_with_margin(
    image: &Grid2D,
    label: &[u32],
    instance_label: u32,
    rng_seed: u64,
) -> Result<(Grid2D, LabelMap, BoundingBox)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    crop_with_margins(image, label, instance_label, draw_margins(&mut rng))
}

/// Output size that brings the shorter side to `target_min`, keeping the aspect ratio.
pub fn min_side_dims(width: usize, height: usize, target_min: usize) -> (usize, usize) {
    if width <= height {
        let h = ((height as f64) * target_min as f64 / width as f64).round() as usize;
        (target_min, h.max(1))
    } else {
        let w = ((width as f64) * target_min as f64 / height as f64).round() as usize;
        (w.max(1), target_min)
    }
}

/// Bilinear resample (pixel-centre aligned, edge-clamped) so that the shorter side is `target_min`.
pub fn resize_to_min_side(image: &Grid2D, target_min: usize) -> Grid2D {
    let (tw, th) = min_side_dims(image.width(), image.height(), target_min.max(1));
    resize_bilinear(image, tw, th)
}

pub fn resize_bilinear(image: &Grid2D, width: usize, height: usize) -> Grid2D {
    if width == image.width() && height == image.height() {
        return image.clone();
    }
    let taps = |t_len: usize, s_len: usize| -> Vec<(usize, usize, f32)> {
        (0..t_len)
            .map(|t| {
                let s = ((t as f64 + 0.5) * s_len as f64 / t_len as f64 - 0.5).clamp(0.0, (s_len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(s_len - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let xs = taps(width, image.width());
    let ys = taps(height, image.height());
    let mut data = Vec::with_capacity(width * height * image.channels());
    for c in 0..image.channels() {
        let plane = image.channel(c);
        let sw = image.width();
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * sw + x0] * (1.0 - fx) + plane[y0 * sw + x1] * fx;
                let bottom = plane[y1 * sw + x0] * (1.0 - fx) + plane[y1 * sw + x1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Grid2D::from_raw(width, height, image.channels(), data)
}

/// Nearest-neighbour resample of a label map to `width x height`.
pub fn resize_labels(label: &LabelMap, width: usize, height: usize) -> LabelMap {
    if width == label.width() && height == label.height() {
        return label.clone();
    }
    let xs: Vec<usize> = (0..width).map(|t| nearest_source(t, width, label.width())).collect();
    LabelMap::from_fn(width, height, |x, y| {
        let sy = nearest_source(y, height, label.height());
        label.get(xs[x], sy) == 1
    })
}

/// Maps labels computed on a resized crop back to the crop's original size.
pub fn resize_labels_back(label: &LabelMap, original: (usize, usize)) -> LabelMap {
    resize_labels(label, original.0, original.1)
}
