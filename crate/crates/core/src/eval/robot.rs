//! Scripted user that scribbles on the worst mistakes of a segmentation.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{LabelMap, ScribbleSet};

const NEIGHBORS_4: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

fn neighbors(i: usize, w: usize, h: usize) -> impl Iterator<Item = Option<usize>> {
    let (x, y) = ((i % w) as isize, (i / w) as isize);
    NEIGHBORS_4.iter().map(move |&(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize).then(|| ny as usize * w + nx as usize)
    })
}

/// Pixels of the largest 4-connected component of `mask`, ascending. Ties go
/// to the component found first in raster order.
pub fn largest_component(mask: &[bool], width: usize, height: usize) -> Vec<usize> {
    let mut seen = vec![false; mask.len()];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            for j in neighbors(i, width, height).flatten() {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort_unstable();
    best
}

/// Interior pixels of `comp` ordered deepest first; seeded tie-breaking.
fn deepest_interior(comp: &[usize], width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = width * height;
    let mut inside = vec![false; n];
    comp.iter().for_each(|&i| inside[i] = true);
    let mut depth = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for &i in comp {
        if neighbors(i, width, height).any(|j| j.is_none_or(|j| !inside[j])) {
            depth[i] = 0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbors(i, width, height).flatten() {
            if inside[j] && depth[j] == usize::MAX {
                depth[j] = depth[i] + 1;
                queue.push_back(j);
            }
        }
    }
    let eroded: Vec<usize> = comp.iter().copied().filter(|&i| depth[i] >= 1).collect();
    let pool = if eroded.is_empty() { comp.to_vec() } else { eroded };
    let mut keyed: Vec<(usize, u64, usize)> = pool.into_iter().map(|i| (depth[i], rng.random(), i)).collect();
    keyed.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|k| k.2).collect()
}

/// Foreground scribbles inside the largest missed region and background
/// scribbles inside the largest false region, at most `budget` pixels in total.
pub fn robot_scribbles(pred: &LabelMap, truth: &LabelMap, budget: usize, seed: u64) -> Result<ScribbleSet> {
    let (w, h) = (pred.width(), pred.height());
    if truth.width() != w || truth.height() != h {
        return Err(Error::DimensionMismatch("prediction and truth differ in size".into()));
    }
    let (p, t) = (pred.labels(), truth.labels());
    let under: Vec<bool> = p.iter().zip(t).map(|(&a, &b)| a == 0 && b == 1).collect();
    let over: Vec<bool> = p.iter().zip(t).map(|(&a, &b)| a == 1 && b == 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg = deepest_interior(&largest_component(&under, w, h), w, h, &mut rng);
    let bg = deepest_interior(&largest_component(&over, w, h), w, h, &mut rng);

    let mut fg_take = fg.len().min(budget.div_ceil(2));
    let bg_take = bg.len().min(budget - fg_take);
    fg_take = fg.len().min(budget - bg_take);
    ScribbleSet::from_indices(w, h, fg[..fg_take].iter().copied(), bg[..bg_take].iter().copied())
}
