//! Transportation simplex on a dense cost matrix.
//!
//! The basis is a spanning tree over `rows + cols` nodes with exactly
//! `rows + cols - 1` basic cells, degenerate cells included. Entering and
//! leaving cells are chosen by Bland's rule, which rules out cycling on the
//! heavily degenerate instances that sparse images produce.

use std::collections::VecDeque;

const REDUCED_COST_TOL: f64 = 1e-11;

/// Optimal coupling and its cost for a balanced transportation problem.
pub(crate) struct Solution {
    pub flows: Vec<f64>,
    pub cost: f64,
}

pub(crate) fn solve(supply: &[f64], demand: &[f64], cost: &[f64]) -> Solution {
    let rows = supply.len();
    let cols = demand.len();
    debug_assert_eq!(cost.len(), rows * cols);

    let mut flows = vec![0.0; rows * cols];
    let mut basic = vec![false; rows * cols];
    northwest_corner(supply, demand, &mut flows, &mut basic);

    let mut u = vec![0.0; rows];
    let mut v = vec![0.0; cols];
    loop {
        let adjacency = tree_adjacency(rows, cols, &basic);
        potentials(rows, cols, cost, &adjacency, &mut u, &mut v);

        let entering = (0..rows * cols).find(|&idx| {
            !basic[idx] && cost[idx] - u[idx / cols] - v[idx % cols] < -REDUCED_COST_TOL
        });
        let Some(entering) = entering else { break };

        let cycle = cycle_through(rows, cols, &adjacency, entering);
        // cycle[0] is the entering cell (+); signs alternate from there.
        let theta = cycle
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&c| flows[c])
            .fold(f64::INFINITY, f64::min);
        let leaving = cycle
            .iter()
            .skip(1)
            .step_by(2)
            .copied()
            .filter(|&c| flows[c] == theta)
            .min()
            .expect("cycle has a minus cell");
        for (k, &c) in cycle.iter().enumerate() {
            if k % 2 == 0 {
                flows[c] += theta;
            } else {
                flows[c] = (flows[c] - theta).max(0.0);
            }
        }
        flows[leaving] = 0.0;
        basic[leaving] = false;
        basic[entering] = true;
    }

    let total = flows.iter().zip(cost).map(|(f, c)| f * c).sum();
    Solution { flows, cost: total }
}

fn northwest_corner(supply: &[f64], demand: &[f64], flows: &mut [f64], basic: &mut [bool]) {
    let rows = supply.len();
    let cols = demand.len();
    let mut s = supply.to_vec();
    let mut d = demand.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let amount = s[i].min(d[j]).max(0.0);
        flows[i * cols + j] = amount;
        basic[i * cols + j] = true;
        s[i] -= amount;
        d[j] -= amount;
        if i == rows - 1 && j == cols - 1 {
            break;
        }
        if i == rows - 1 {
            j += 1;
        } else if j == cols - 1 || s[i] <= d[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
}

/// Node ids: rows are `0..rows`, columns are `rows..rows+cols`. Each entry
/// lists `(neighbor, cell)`.
fn tree_adjacency(rows: usize, cols: usize, basic: &[bool]) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); rows + cols];
    for (idx, _) in basic.iter().enumerate().filter(|(_, b)| **b) {
        let (i, j) = (idx / cols, idx % cols);
        adj[i].push((rows + j, idx));
        adj[rows + j].push((i, idx));
    }
    adj
}

fn potentials(
    rows: usize,
    cols: usize,
    cost: &[f64],
    adj: &[Vec<(usize, usize)>],
    u: &mut [f64],
    v: &mut [f64],
) {
    let mut seen = vec![false; rows + cols];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    u[0] = 0.0;
    while let Some(node) = queue.pop_front() {
        for &(next, cell) in &adj[node] {
            if seen[next] {
                continue;
            }
            seen[next] = true;
            if next >= rows {
                v[next - rows] = cost[cell] - u[node];
            } else {
                u[next] = cost[cell] - v[node - rows];
            }
            queue.push_back(next);
        }
    }
    debug_assert!(seen.iter().all(|s| *s), "basis is not a spanning tree");
    let _ = cols;
}

/// Cells of the unique cycle formed by adding `entering` to the basis tree,
/// starting with `entering` and alternating +/-.
fn cycle_through(rows: usize, cols: usize, adj: &[Vec<(usize, usize)>], entering: usize) -> Vec<usize> {
    let (ei, ej) = (entering / cols, entering % cols);
    let start = ei;
    let goal = rows + ej;
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; rows + cols];
    let mut seen = vec![false; rows + cols];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(node) = queue.pop_front() {
        if node == goal {
            break;
        }
        for &(next, cell) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, cell));
                queue.push_back(next);
            }
        }
    }
    // Walk back from the entering column to the entering row; the first cell
    // touches column ej and takes the minus sign.
    let mut cycle = vec![entering];
    let mut node = goal;
    while node != start {
        let (prev, cell) = parent[node].expect("tree path exists");
        cycle.push(cell);
        node = prev;
    }
    cycle
}
