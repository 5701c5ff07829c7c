//! Binary CRF over a crop: unary costs from the network's probabilities,
//! contrast-sensitive pairwise smoothness, and exact label updates by min-cut
//! with scribbles as hard constraints.

mod maxflow;

pub use maxflow::MaxFlow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, LabelMap, ScribbleSet};
use crate::nn::PROB_CLAMP;

/// Finite stand-in for an infinite unary cost.
pub const K_INF: f64 = 1e9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    #[default]
    Four,
    Eight,
}

impl Neighborhood {
    /// Forward neighbour offsets `(dx, dy, distance)`, each unordered pair visited once.
    pub fn offsets(self) -> &'static [(isize, isize, f64)] {
        const FOUR: [(isize, isize, f64); 2] = [(1, 0, 1.0), (0, 1, 1.0)];
        const EIGHT: [(isize, isize, f64); 4] = [
            (1, 0, 1.0),
            (0, 1, 1.0),
            (1, 1, std::f64::consts::SQRT_2),
            (-1, 1, std::f64::consts::SQRT_2),
        ];
        match self {
            Neighborhood::Four => &FOUR,
            Neighborhood::Eight => &EIGHT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub lambda: f64,
    pub sigma: f64,
    pub neighborhood: Neighborhood,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { lambda: 3.0, sigma: 0.1, neighborhood: Neighborhood::Four }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "need lambda >= 0 and sigma > 0, got lambda={} sigma={}",
                self.lambda, self.sigma
            )));
        }
        Ok(())
    }
}

/// Contrast-sensitive Potts term between two neighbours.
pub fn pairwise_potential(xi: f64, xj: f64, yi: u8, yj: u8, dij: f64, cfg: &EnergyConfig) -> f64 {
    if yi == yj {
        return 0.0;
    }
    pairwise_weight(xi, xj, dij, cfg.sigma)
}

#[inline]
fn pairwise_weight(xi: f64, xj: f64, dij: f64, sigma: f64) -> f64 {
    let diff = xi - xj;
    (-(diff * diff) / (2.0 * sigma * sigma)).exp() / dij
}

/// Per-pixel label costs. Scribbled pixels cost 0 for their own label and
/// [`K_INF`] for the other one.
#[derive(Clone, Debug, PartialEq)]
pub struct Unaries {
    pub cost_background: Vec<f64>,
    pub cost_foreground: Vec<f64>,
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub fn unary_from_probability(prob: &Grid2D, scribbles: &ScribbleSet) -> Result<Unaries> {
    check_scribble_dims(prob, scribbles)?;
    let n = prob.pixels();
    let mut cost_background = Vec::with_capacity(n);
    let mut cost_foreground = Vec::with_capacity(n);
    for (i, &p) in prob.channel(0).iter().enumerate() {
        let (c0, c1) = match scribbles.label_of(i) {
            Some(1) => (K_INF, 0.0),
            Some(_) => (0.0, K_INF),
            None => {
                let p = clamp_probability(p as f64);
                (-(1.0 - p).ln(), -p.ln())
            }
        };
        cost_background.push(c0);
        cost_foreground.push(c1);
    }
    Ok(Unaries { cost_background, cost_foreground })
}

fn check_scribble_dims(grid: &Grid2D, scribbles: &ScribbleSet) -> Result<()> {
    if grid.width() != scribbles.width() || grid.height() != scribbles.height() {
        return Err(Error::DimensionMismatch(format!(
            "scribbles for {}x{} do not match a {}x{} grid",
            scribbles.width(),
            scribbles.height(),
            grid.width(),
            grid.height()
        )));
    }
    Ok(())
}

fn check_inputs(prob: &Grid2D, crop: &Grid2D, scribbles: &ScribbleSet, cfg: &EnergyConfig) -> Result<()> {
    cfg.validate()?;
    if !prob.same_size(crop) {
        return Err(Error::DimensionMismatch("probability map and crop differ in size".into()));
    }
    check_scribble_dims(prob, scribbles)
}

/// Calls `f(i, j, distance)` for every unordered neighbour pair.
fn for_each_pair(width: usize, height: usize, nb: Neighborhood, mut f: impl FnMut(usize, usize, f64)) {
    for y in 0..height {
        for x in 0..width {
            for &(dx, dy, d) in nb.offsets() {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                f(y * width + x, ny as usize * width + nx as usize, d);
            }
        }
    }
}

/// Energy of `labels` with scribble-constrained unaries; `+inf` when a scribble is violated.
pub fn energy(labels: &LabelMap, prob: &Grid2D, crop: &Grid2D, scribbles: &ScribbleSet, cfg: &EnergyConfig) -> Result<f64> {
    check_inputs(prob, crop, scribbles, cfg)?;
    if !prob.same_size(labels) {
        return Err(Error::DimensionMismatch("labels and probability map differ in size".into()));
    }
    let y = labels.labels();
    if scribbles
        .foreground()
        .iter()
        .map(|&i| (i, 1))
        .chain(scribbles.background().iter().map(|&i| (i, 0)))
        .any(|(i, s)| y[i] != s)
    {
        return Ok(f64::INFINITY);
    }
    let un = unary_from_probability(prob, scribbles)?;
    let mut e = 0.0;
    for (i, &l) in y.iter().enumerate() {
        e += if l == 1 { un.cost_foreground[i] } else { un.cost_background[i] };
    }
    if cfg.lambda > 0.0 {
        let x = crop.channel(0);
        let mut pair = 0.0;
        for_each_pair(prob.width(), prob.height(), cfg.neighborhood, |i, j, d| {
            pair += pairwise_potential(x[i] as f64, x[j] as f64, y[i], y[j], d, cfg);
        });
        e += cfg.lambda * pair;
    }
    Ok(e)
}

/// Foreground where `p > 0.5`.
pub fn threshold(prob: &Grid2D) -> LabelMap {
    LabelMap::from_fn(prob.width(), prob.height(), |x, y| prob.get(x, y) > 0.5)
}

/// Exact minimizer of the scribble-constrained CRF energy for fixed probabilities.
///
/// Source side is foreground. Ties (zero net terminal capacity, no pairwise
/// pull) land on the sink side, i.e. background.
pub fn label_update(prob: &Grid2D, crop: &Grid2D, scribbles: &ScribbleSet, cfg: &EnergyConfig) -> Result<LabelMap> {
    check_inputs(prob, crop, scribbles, cfg)?;
    let (w, h) = (prob.width(), prob.height());
    let n = w * h;
    let un = unary_from_probability(prob, scribbles)?;
    let x = crop.channel(0);

    let mut pairs = Vec::with_capacity(n * cfg.neighborhood.offsets().len());
    if cfg.lambda > 0.0 {
        for_each_pair(w, h, cfg.neighborhood, |i, j, d| {
            pairs.push((i, j, cfg.lambda * pairwise_weight(x[i] as f64, x[j] as f64, d, cfg.sigma)));
        });
    }

    // Any labelling that honours the scribbles costs less than this.
    let finite_bound: f64 = (0..n)
        .map(|i| match scribbles.label_of(i) {
            Some(_) => 0.0,
            None => un.cost_background[i].max(un.cost_foreground[i]),
        })
        .sum::<f64>()
        + pairs.iter().map(|p| p.2).sum::<f64>();
    if finite_bound >= K_INF {
        return Err(Error::MaxFlow(format!("finite energy bound {finite_bound:e} reaches the hard-constraint cost")));
    }

    let mut graph = MaxFlow::new(n, pairs.len());
    for i in 0..n {
        let (c0, c1) = (un.cost_background[i], un.cost_foreground[i]);
        let m = c0.min(c1);
        graph.add_terminal(i, c0 - m, c1 - m)?;
    }
    for &(i, j, wgt) in &pairs {
        if wgt > 0.0 {
            graph.add_edge(i, j, wgt, wgt)?;
        }
    }
    let flow = graph.maxflow();
    if !flow.is_finite() || flow >= K_INF {
        return Err(Error::MaxFlow(format!("cut value {flow} violates hard constraints")));
    }
    let labels = LabelMap::from_fn(w, h, |px, py| graph.in_source_segment(py * w + px));
    for (i, s) in scribbles.foreground().iter().map(|&i| (i, 1)).chain(scribbles.background().iter().map(|&i| (i, 0))) {
        if labels.labels()[i] != s {
            return Err(Error::MaxFlow(format!("scribbled pixel {i} flipped by the cut")));
        }
    }
    Ok(labels)
}
