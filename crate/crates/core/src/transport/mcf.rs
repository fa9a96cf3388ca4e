//! Successive shortest paths on the 4-connected pixel grid.
//!
//! Every directed edge between 4-adjacent pixels has unit cost and unbounded
//! capacity. Residual arcs that undo existing flow cost -1. Node potentials
//! keep reduced costs nonnegative so each shortest path is a Dijkstra run.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::Array2;

use crate::flow::EdgeFlow;

const MASS_TOL: f64 = 1e-15;

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Arc used to reach a node: the neighbor it came from, and whether it
/// cancelled existing opposite flow.
#[derive(Clone, Copy)]
struct Arc {
    from: usize,
    cancels: bool,
}

struct Grid {
    n: usize,
    m: usize,
    flow: EdgeFlow,
}

impl Grid {
    fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let (i, j) = (node / self.m, node % self.m);
        let n = self.n;
        let m = self.m;
        [
            (i > 0).then(|| node - m),
            (i + 1 < n).then(|| node + m),
            (j > 0).then(|| node - 1),
            (j + 1 < m).then(|| node + 1),
        ]
        .into_iter()
        .flatten()
    }

    fn coords(&self, node: usize) -> (usize, usize) {
        (node / self.m, node % self.m)
    }

    fn edge(&self, from: usize, to: usize) -> f64 {
        self.flow
            .get(self.coords(from), self.coords(to))
            .expect("adjacent")
    }

    fn set_edge(&mut self, from: usize, to: usize, value: f64) {
        let (a, b) = (self.coords(from), self.coords(to));
        self.flow.set(a, b, value.max(0.0)).expect("adjacent");
    }
}

/// Minimum-cost flow turning `source` into `target` (equal total mass).
pub(crate) fn solve(source: &Array2<f64>, target: &Array2<f64>) -> (f64, EdgeFlow) {
    let (n, m) = source.dim();
    let nodes = n * m;
    let mut grid = Grid {
        n,
        m,
        flow: EdgeFlow::zeros(n, m),
    };
    // Positive: remaining supply; negative: remaining demand.
    let mut excess: Vec<f64> = source.iter().zip(target.iter()).map(|(a, b)| a - b).collect();
    let mut potential = vec![0.0; nodes];
    let mut dist = vec![f64::INFINITY; nodes];
    let mut arc: Vec<Option<Arc>> = vec![None; nodes];

    while let Some(s) = (0..nodes).find(|&v| excess[v] > MASS_TOL) {
        if !excess.iter().any(|&e| e < -MASS_TOL) {
            break;
        }

        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        arc.iter_mut().for_each(|a| *a = None);
        let mut done = vec![false; nodes];
        let mut heap = BinaryHeap::new();
        dist[s] = 0.0;
        heap.push(Entry { dist: 0.0, node: s });
        while let Some(Entry { dist: d, node: u }) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            for v in grid.neighbors(u) {
                let cancels = grid.edge(v, u) > 0.0;
                let cost: f64 = if cancels { -1.0 } else { 1.0 };
                let reduced = (cost + potential[u] - potential[v]).max(0.0);
                let nd = d + reduced;
                if nd < dist[v] {
                    dist[v] = nd;
                    arc[v] = Some(Arc { from: u, cancels });
                    heap.push(Entry { dist: nd, node: v });
                }
            }
        }

        let t = (0..nodes)
            .filter(|&v| excess[v] < -MASS_TOL)
            .min_by(|&a, &b| {
                (dist[a] + potential[a] - potential[s])
                    .total_cmp(&(dist[b] + potential[b] - potential[s]))
                    .then(a.cmp(&b))
            })
            .expect("a sink exists");

        let mut amount = excess[s].min(-excess[t]);
        let mut v = t;
        while v != s {
            let a = arc[v].expect("path to sink");
            if a.cancels {
                amount = amount.min(grid.edge(v, a.from));
            }
            v = a.from;
        }

        let mut v = t;
        while v != s {
            let a = arc[v].expect("path to sink");
            if a.cancels {
                let left = grid.edge(v, a.from) - amount;
                grid.set_edge(v, a.from, if left <= MASS_TOL { 0.0 } else { left });
            } else {
                let cur = grid.edge(a.from, v);
                grid.set_edge(a.from, v, cur + amount);
            }
            v = a.from;
        }
        excess[s] -= amount;
        excess[t] += amount;
        if excess[s].abs() <= MASS_TOL {
            excess[s] = 0.0;
        }
        if excess[t].abs() <= MASS_TOL {
            excess[t] = 0.0;
        }

        for (p, d) in potential.iter_mut().zip(&dist) {
            if d.is_finite() {
                *p += d;
            }
        }
    }

    let total = grid.flow.total();
    (total, grid.flow)
}
