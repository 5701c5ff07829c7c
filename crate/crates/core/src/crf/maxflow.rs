//! Boykov–Kolmogorov augmenting-path max-flow.
//!
//! Two search trees grow from the terminals; augmenting paths are found where
//! they touch, and saturated tree edges turn their subtrees into orphans that
//! are re-adopted or freed. Terminal capacities are stored as a single signed
//! residual per node (positive: to the source, negative: to the sink).

use std::collections::VecDeque;

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;
const TERMINAL: usize = usize::MAX - 1;
const ORPHAN: usize = usize::MAX - 2;
const INFINITE_DIST: usize = usize::MAX;

#[derive(Clone, Debug)]
pub struct MaxFlow {
    first_arc: Vec<usize>,
    tr_cap: Vec<f64>,
    parent: Vec<usize>,
    is_sink: Vec<bool>,
    ts: Vec<u64>,
    dist: Vec<usize>,
    active: Vec<bool>,
    arc_head: Vec<usize>,
    arc_next: Vec<usize>,
    r_cap: Vec<f64>,
    flow: f64,
    time: u64,
    queue: VecDeque<usize>,
    orphans: VecDeque<usize>,
    solved: bool,
}

#[inline]
fn sister(a: usize) -> usize {
    a ^ 1
}

fn check_cap(cap: f64) -> Result<()> {
    if cap.is_finite() && cap >= 0.0 {
        Ok(())
    } else {
        Err(Error::MaxFlow(format!("capacity {cap} is negative or non-finite")))
    }
}

impl MaxFlow {
    pub fn new(nodes: usize, edge_hint: usize) -> Self {
        Self {
            first_arc: vec![NONE; nodes],
            tr_cap: vec![0.0; nodes],
            parent: vec![NONE; nodes],
            is_sink: vec![false; nodes],
            ts: vec![0; nodes],
            dist: vec![0; nodes],
            active: vec![false; nodes],
            arc_head: Vec::with_capacity(2 * edge_hint),
            arc_next: Vec::with_capacity(2 * edge_hint),
            r_cap: Vec::with_capacity(2 * edge_hint),
            flow: 0.0,
            time: 0,
            queue: VecDeque::new(),
            orphans: VecDeque::new(),
            solved: false,
        }
    }

    pub fn node_count(&self) -> usize {
        self.first_arc.len()
    }

    /// Adds capacity `source` on s→i and `sink` on i→t.
    pub fn add_terminal(&mut self, i: usize, source: f64, sink: f64) -> Result<()> {
        check_cap(source)?;
        check_cap(sink)?;
        let (mut cs, mut ct) = (source, sink);
        let delta = self.tr_cap[i];
        if delta > 0.0 {
            cs += delta;
        } else {
            ct -= delta;
        }
        self.flow += cs.min(ct);
        self.tr_cap[i] = cs - ct;
        Ok(())
    }

    /// Adds arcs i→j with `cap` and j→i with `rev_cap`.
    pub fn add_edge(&mut self, i: usize, j: usize, cap: f64, rev_cap: f64) -> Result<()> {
        check_cap(cap)?;
        check_cap(rev_cap)?;
        if i == j {
            return Err(Error::MaxFlow(format!("self loop at node {i}")));
        }
        let a = self.arc_head.len();
        self.arc_head.push(j);
        self.arc_next.push(self.first_arc[i]);
        self.r_cap.push(cap);
        self.first_arc[i] = a;
        self.arc_head.push(i);
        self.arc_next.push(self.first_arc[j]);
        self.r_cap.push(rev_cap);
        self.first_arc[j] = a + 1;
        Ok(())
    }

    fn set_active(&mut self, i: usize) {
        if !self.active[i] {
            self.active[i] = true;
            self.queue.push_back(i);
        }
    }

    fn next_active(&mut self) -> Option<usize> {
        while let Some(i) = self.queue.pop_front() {
            self.active[i] = false;
            if self.parent[i] != NONE {
                return Some(i);
            }
        }
        None
    }

    fn arcs(&self, i: usize) -> ArcCursor {
        ArcCursor(self.first_arc[i])
    }

    /// Runs to completion and returns the max-flow value.
    pub fn maxflow(&mut self) -> f64 {
        if self.solved {
            return self.flow;
        }
        for i in 0..self.node_count() {
            if self.tr_cap[i] != 0.0 {
                self.is_sink[i] = self.tr_cap[i] < 0.0;
                self.parent[i] = TERMINAL;
                self.dist[i] = 1;
                self.set_active(i);
            } else {
                self.parent[i] = NONE;
            }
        }

        let mut current: Option<usize> = None;
        loop {
            let i = match current.filter(|&c| self.parent[c] != NONE) {
                Some(c) => c,
                None => match self.next_active() {
                    Some(i) => i,
                    None => break,
                },
            };
            current = None;

            let mut bridge = NONE;
            if !self.is_sink[i] {
                let mut it = self.arcs(i);
                while let Some(a) = it.next_arc(&self.arc_next) {
                    if self.r_cap[a] <= 0.0 {
                        continue;
                    }
                    let j = self.arc_head[a];
                    if self.parent[j] == NONE {
                        self.is_sink[j] = false;
                        self.parent[j] = sister(a);
                        self.ts[j] = self.ts[i];
                        self.dist[j] = self.dist[i] + 1;
                        self.set_active(j);
                    } else if self.is_sink[j] {
                        bridge = a;
                        break;
                    } else if self.ts[j] <= self.ts[i] && self.dist[j] > self.dist[i] {
                        self.parent[j] = sister(a);
                        self.ts[j] = self.ts[i];
                        self.dist[j] = self.dist[i] + 1;
                    }
                }
            } else {
                let mut it = self.arcs(i);
                while let Some(a) = it.next_arc(&self.arc_next) {
                    if self.r_cap[sister(a)] <= 0.0 {
                        continue;
                    }
                    let j = self.arc_head[a];
                    if self.parent[j] == NONE {
                        self.is_sink[j] = true;
                        self.parent[j] = sister(a);
                        self.ts[j] = self.ts[i];
                        self.dist[j] = self.dist[i] + 1;
                        self.set_active(j);
                    } else if !self.is_sink[j] {
                        bridge = sister(a);
                        break;
                    } else if self.ts[j] <= self.ts[i] && self.dist[j] > self.dist[i] {
                        self.parent[j] = sister(a);
                        self.ts[j] = self.ts[i];
                        self.dist[j] = self.dist[i] + 1;
                    }
                }
            }

            self.time += 1;
            if bridge != NONE {
                // Keep expanding from the same node after the augmentation.
                current = Some(i);
                self.augment(bridge);
                self.adopt_orphans();
            }
        }
        self.solved = true;
        self.flow
    }

    /// Pushes the bottleneck along source-tree path → `bridge` → sink-tree path.
    fn augment(&mut self, bridge: usize) {
        let mut bottleneck = self.r_cap[bridge];
        let mut i = self.arc_head[sister(bridge)];
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.r_cap[sister(a)]);
            i = self.arc_head[a];
        }
        bottleneck = bottleneck.min(self.tr_cap[i]);
        let mut i = self.arc_head[bridge];
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.r_cap[a]);
            i = self.arc_head[a];
        }
        bottleneck = bottleneck.min(-self.tr_cap[i]);

        self.r_cap[sister(bridge)] += bottleneck;
        self.r_cap[bridge] -= bottleneck;

        let mut i = self.arc_head[sister(bridge)];
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                break;
            }
            self.r_cap[a] += bottleneck;
            self.r_cap[sister(a)] -= bottleneck;
            if self.r_cap[sister(a)] <= 0.0 {
                self.r_cap[sister(a)] = 0.0;
                self.make_orphan_front(i);
            }
            i = self.arc_head[a];
        }
        self.tr_cap[i] -= bottleneck;
        if self.tr_cap[i] <= 0.0 {
            self.tr_cap[i] = 0.0;
            self.make_orphan_front(i);
        }

        let mut i = self.arc_head[bridge];
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                break;
            }
            self.r_cap[sister(a)] += bottleneck;
            self.r_cap[a] -= bottleneck;
            if self.r_cap[a] <= 0.0 {
                self.r_cap[a] = 0.0;
                self.make_orphan_front(i);
            }
            i = self.arc_head[a];
        }
        self.tr_cap[i] += bottleneck;
        if self.tr_cap[i] >= 0.0 {
            self.tr_cap[i] = 0.0;
            self.make_orphan_front(i);
        }

        self.flow += bottleneck;
    }

    fn make_orphan_front(&mut self, i: usize) {
        self.parent[i] = ORPHAN;
        self.orphans.push_front(i);
    }

    fn make_orphan_rear(&mut self, i: usize) {
        self.parent[i] = ORPHAN;
        self.orphans.push_back(i);
    }

    fn adopt_orphans(&mut self) {
        while let Some(i) = self.orphans.pop_front() {
            self.process_orphan(i);
        }
    }

    fn process_orphan(&mut self, i: usize) {
        let sink_tree = self.is_sink[i];
        let mut best_arc = NONE;
        let mut best_dist = INFINITE_DIST;

        let mut it = self.arcs(i);
        while let Some(a0) = it.next_arc(&self.arc_next) {
            let residual = if sink_tree { self.r_cap[a0] } else { self.r_cap[sister(a0)] };
            if residual <= 0.0 {
                continue;
            }
            let j = self.arc_head[a0];
            if self.is_sink[j] != sink_tree || self.parent[j] == NONE {
                continue;
            }
            // Trace j back to its root to make sure it still hangs off a terminal.
            let mut d = 0usize;
            let mut k = j;
            loop {
                if self.ts[k] == self.time {
                    d += self.dist[k];
                    break;
                }
                let a = self.parent[k];
                d += 1;
                if a == TERMINAL {
                    self.ts[k] = self.time;
                    self.dist[k] = 1;
                    break;
                }
                if a == ORPHAN {
                    d = INFINITE_DIST;
                    break;
                }
                k = self.arc_head[a];
            }
            if d == INFINITE_DIST {
                continue;
            }
            if d < best_dist {
                best_arc = a0;
                best_dist = d;
            }
            let mut k = j;
            while self.ts[k] != self.time {
                self.ts[k] = self.time;
                self.dist[k] = d;
                d -= 1;
                k = self.arc_head[self.parent[k]];
            }
        }

        if best_arc != NONE {
            self.parent[i] = best_arc;
            self.ts[i] = self.time;
            self.dist[i] = best_dist + 1;
            return;
        }

        self.parent[i] = NONE;
        let mut it = self.arcs(i);
        while let Some(a0) = it.next_arc(&self.arc_next) {
            let j = self.arc_head[a0];
            let pj = self.parent[j];
            if self.is_sink[j] != sink_tree || pj == NONE {
                continue;
            }
            let residual = if sink_tree { self.r_cap[a0] } else { self.r_cap[sister(a0)] };
            if residual > 0.0 {
                self.set_active(j);
            }
            if pj != TERMINAL && pj != ORPHAN && self.arc_head[pj] == i {
                self.make_orphan_rear(j);
            }
        }
    }

    /// True if node `i` ends on the source side of the minimum cut.
    /// Nodes reachable from neither terminal are placed on the sink side.
    pub fn in_source_segment(&self, i: usize) -> bool {
        self.parent[i] != NONE && !self.is_sink[i]
    }
}

/// Walks a node's adjacency list without holding a borrow of the graph.
struct ArcCursor(usize);

impl ArcCursor {
    fn next_arc(&mut self, next: &[usize]) -> Option<usize> {
        if self.0 == NONE {
            return None;
        }
        let a = self.0;
        self.0 = next[a];
        Some(a)
    }
}
