//! Exact geodesic distance transform on the 8-connected pixel grid.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, LabelMap, ScribbleSet};

/// Edge cost between 8-neighbours: `sqrt((step * d)^2 + gamma^2 * dI^2)` with `d` 1 or √2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeodesicMetric {
    pub gamma: f64,
    pub spatial_step: f64,
}

impl Default for GeodesicMetric {
    fn default() -> Self {
        Self { gamma: 1.0, spatial_step: 1.0 }
    }
}

impl GeodesicMetric {
    /// Step of `1 / max(width, height)`, so a straight path across the crop has spatial length about 1.
    pub fn normalized(width: usize, height: usize, gamma: f64) -> Self {
        Self { gamma, spatial_step: 1.0 / width.max(height).max(1) as f64 }
    }

    #[inline]
    pub fn edge_cost(&self, dx: isize, dy: isize, di: f64) -> f64 {
        let s2 = (dx * dx + dy * dy) as f64 * self.spatial_step * self.spatial_step;
        (s2 + self.gamma * self.gamma * di * di).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DistanceMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

pub const NEIGHBORS_8: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// A path length kept as an unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`,
/// so long paths do not accumulate rounding error.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Length {
    hi: f64,
    lo: f64,
}

impl Length {
    const ZERO: Length = Length { hi: 0.0, lo: 0.0 };
    const INFINITY: Length = Length { hi: f64::INFINITY, lo: 0.0 };

    fn add(self, c: f64) -> Length {
        let s = self.hi + c;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (c - bb);
        let lo = self.lo + err;
        let hi = s + lo;
        Length { hi, lo: lo - (hi - s) }
    }

    fn cmp(&self, other: &Length) -> Ordering {
        self.hi.total_cmp(&other.hi).then(self.lo.total_cmp(&other.lo))
    }
}

#[derive(PartialEq)]
struct Entry(Length, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest-path distance from every pixel to the nearest seed, using channel 0
/// as intensity. Each value is the exact sum of the edge costs along a shortest
/// path, rounded once.
pub fn geodesic_distance(crop: &Grid2D, seeds: &BTreeSet<usize>, metric: GeodesicMetric) -> Result<DistanceMap> {
    if seeds.is_empty() {
        return Err(Error::NoSeeds);
    }
    let (w, h) = (crop.width(), crop.height());
    if let Some(&bad) = seeds.iter().find(|&&s| s >= w * h) {
        return Err(Error::OutOfBounds { x: bad % w.max(1), y: bad / w.max(1), width: w, height: h });
    }
    let x = crop.channel(0);
    let mut dist = vec![Length::INFINITY; w * h];
    let mut done = vec![false; w * h];
    let mut heap = BinaryHeap::with_capacity(w * h);
    for &s in seeds {
        dist[s] = Length::ZERO;
        heap.push(Entry(Length::ZERO, s));
    }
    while let Some(Entry(d, i)) = heap.pop() {
        if done[i] {
            continue;
        }
        done[i] = true;
        let (px, py) = ((i % w) as isize, (i / w) as isize);
        for &(dx, dy) in &NEIGHBORS_8 {
            let (nx, ny) = (px + dx, py + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if done[j] {
                continue;
            }
            let nd = d.add(metric.edge_cost(dx, dy, x[j] as f64 - x[i] as f64));
            if nd.cmp(&dist[j]) == Ordering::Less {
                dist[j] = nd;
                heap.push(Entry(nd, j));
            }
        }
    }
    Ok(DistanceMap { width: w, height: h, values: dist.into_iter().map(|d| d.hi).collect() })
}

/// Pixels near a scribble of one label but currently carrying the other label.
///
/// Intensities are rescaled to the crop's `[0, 1]` range and the spatial step
/// is normalized by the crop size before the transform, so `epsilon` is a
/// fraction of the crop rather than a pixel count.
pub fn scribble_uncertainty(
    labels: &LabelMap,
    scribbles: &ScribbleSet,
    crop: &Grid2D,
    epsilon: f64,
    gamma: f64,
) -> Result<BTreeSet<usize>> {
    if !crop.same_size(labels) || labels.width() != scribbles.width() || labels.height() != scribbles.height() {
        return Err(Error::DimensionMismatch("labels, scribbles and crop must share dimensions".into()));
    }
    let mut out = BTreeSet::new();
    if scribbles.is_empty() {
        return Ok(out);
    }
    let unit = crop.rescaled_unit();
    let metric = GeodesicMetric::normalized(crop.width(), crop.height(), gamma);
    let y = labels.labels();
    for (seeds, wrong_label) in [(scribbles.foreground(), 0u8), (scribbles.background(), 1u8)] {
        if seeds.is_empty() {
            continue;
        }
        let g = geodesic_distance(&unit, seeds, metric)?;
        out.extend(
            g.values
                .iter()
                .enumerate()
                .filter(|&(i, &d)| d < epsilon && y[i] == wrong_label && !scribbles.contains(i))
                .map(|(i, _)| i),
        );
    }
    Ok(out)
}
