//! Run-length encoding of binary masks for transport.
//!
//! A mask is a list of `[start, length]` pairs over its row-major pixel order;
//! pixels inside a run are foreground, everything else is background. Runs are
//! sorted, non-empty and never touch.
//!
//! Scribbles travel as `[x, y, length]` runs: `length` pixels along row `y`
//! starting at column `x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMap, ScribbleSet};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<[usize; 2]>,
}

pub fn encode(mask: &LabelMap) -> RleMask {
    let mut runs: Vec<[usize; 2]> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &l) in mask.labels().iter().enumerate() {
        match (l != 0, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                runs.push([s, i - s]);
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        runs.push([s, mask.labels().len() - s]);
    }
    RleMask { width: mask.width(), height: mask.height(), runs }
}

/// Rejects overlapping, unsorted, empty or out-of-range runs.
pub fn decode(rle: &RleMask) -> Result<LabelMap> {
    let n = rle
        .width
        .checked_mul(rle.height)
        .ok_or_else(|| Error::format("mask RLE", "dimensions overflow"))?;
    let mut labels = vec![0u8; n];
    let mut end = 0;
    for (k, &[start, len]) in rle.runs.iter().enumerate() {
        let stop = start.checked_add(len).filter(|&s| s <= n);
        match stop {
            Some(stop) if len > 0 && (k == 0 || start > end) => {
                labels[start..stop].fill(1);
                end = stop;
            }
            _ => return Err(Error::format("mask RLE", format!("bad run {k}: [{start}, {len}]"))),
        }
    }
    LabelMap::new(rle.width, rle.height, labels)
}

/// Scribbles as label-tagged `[x, y, length]` runs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScribbleRuns {
    #[serde(default)]
    pub foreground: Vec<[usize; 3]>,
    #[serde(default)]
    pub background: Vec<[usize; 3]>,
}

fn expand(runs: &[[usize; 3]], width: usize, height: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for &[x, y, len] in runs {
        if len == 0 {
            continue;
        }
        let last = x.checked_add(len - 1).ok_or_else(|| Error::format("scribble run", "length overflows"))?;
        if last >= width || y >= height {
            return Err(Error::OutOfBounds { x: last, y, width, height });
        }
        out.extend((x..=last).map(|xi| (xi, y)));
    }
    Ok(out)
}

impl ScribbleRuns {
    pub fn to_scribbles(&self, width: usize, height: usize) -> Result<ScribbleSet> {
        ScribbleSet::from_points(width, height, &expand(&self.foreground, width, height)?, &expand(&self.background, width, height)?)
    }

    /// Maximal horizontal runs of each label.
    pub fn from_scribbles(set: &ScribbleSet) -> Self {
        let runs = |idx: &std::collections::BTreeSet<usize>| {
            let mut out: Vec<[usize; 3]> = Vec::new();
            for &i in idx {
                let (x, y) = (i % set.width(), i / set.width());
                match out.last_mut() {
                    Some(r) if r[1] == y && r[0] + r[2] == x => r[2] += 1,
                    _ => out.push([x, y, 1]),
                }
            }
            out
        };
        Self { foreground: runs(set.foreground()), background: runs(set.background()) }
    }

    pub fn pixel_count(&self) -> usize {
        self.foreground.iter().chain(&self.background).map(|r| r[2]).sum()
    }
}
