//! Randomized self-check of the transport oracles and flow algebra.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::flow::{apply_flow, compose, edge_from_flow, flow_from_edge, GridImage, GridLike, LocalFlowPlan};
use crate::rng::{SeedStream, StreamRng};
use crate::transport::{min_flow_plan, wasserstein_grid_l1, wasserstein_lp, GroundMetric, TransportPlan};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    /// Largest violation observed; at most `tolerance` when the check passes.
    pub max_residual: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_residual <= self.tolerance
    }
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    worst: f64,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Tracker {
            name,
            tolerance,
            cases: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, residual: f64) {
        self.cases += 1;
        // NaN residuals must fail.
        self.worst = if residual.is_nan() { f64::INFINITY } else { self.worst.max(residual) };
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name.to_string(),
            cases: self.cases,
            max_residual: self.worst,
            tolerance: self.tolerance,
        }
    }
}

fn random_grid(rng: &mut StreamRng, n: usize, m: usize) -> GridImage {
    loop {
        let g = Array2::from_shape_fn((n, m), |_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random() });
        let total = g.sum();
        if total > 0.0 {
            return GridImage::new(g / total).expect("normalized");
        }
    }
}

fn random_plan(rng: &mut StreamRng, n: usize, m: usize, scale: f64) -> LocalFlowPlan {
    let mut d = LocalFlowPlan::zeros(n, m);
    d.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    d
}

fn max_gap(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

/// Runs every check on `pairs` random image pairs on 3x3 and 4x4 grids.
pub fn run_oracle_suite(seed: u64, pairs: usize) -> Result<Vec<CheckResult>> {
    let mut rng = SeedStream::new(seed).rng();
    let mut lemma = Tracker::new("grid_flow_equals_lp", 1e-8);
    let mut plan_norm = Tracker::new("min_flow_plan_norm", 1e-8);
    let mut feasibility = Tracker::new("min_flow_plan_feasibility", 1e-9);
    let mut sandwich = Tracker::new("ground_metric_sandwich", 1e-8);
    let mut pixel_bound = Tracker::new("pixel_l1_at_most_twice_w1", 1e-12);
    let mut upper = Tracker::new("flow_norm_bounds_w1", 1e-8);
    let mut product = Tracker::new("product_coupling_feasible", 1e-12);
    let mut mass = Tracker::new("flow_mass_conservation", 1e-12);
    let mut additivity = Tracker::new("flow_additivity", 1e-12);
    let mut round_trip = Tracker::new("edge_round_trip", 0.0);

    for i in 0..pairs {
        let side = if i % 2 == 0 { 3 } else { 4 };
        let x = random_grid(&mut rng, side, side);
        let t = random_grid(&mut rng, side, side);

        let (w_grid, _) = wasserstein_grid_l1(&x, &t)?;
        let (w1, _) = wasserstein_lp(&x, &t, GroundMetric::L1)?;
        let (w2, _) = wasserstein_lp(&x, &t, GroundMetric::L2)?;
        lemma.record((w_grid - w1).abs());
        let plan = min_flow_plan(&x, &t)?;
        plan_norm.record((plan.l1_norm() - w_grid).abs());
        feasibility.record(max_gap(apply_flow(&x, &plan)?.values(), t.values()));
        sandwich.record((w2 - w1).max(w1 - std::f64::consts::SQRT_2 * w2));
        let l1: f64 = x.values().iter().zip(t.values()).map(|(a, b)| (a - b).abs()).sum();
        pixel_bound.record((l1 - 2.0 * w1).max(l1 - 2.0 * w2));
        let coupling = TransportPlan::product(&x, &t)?;
        product.record(w1 - coupling.cost(GroundMetric::L1, side));

        let d1 = random_plan(&mut rng, side, side, 0.05);
        let d2 = random_plan(&mut rng, side, side, 0.05);
        let moved = apply_flow(&x, &d1)?;
        mass.record((moved.values().sum() - 1.0).abs());
        let stepwise = apply_flow(&moved, &d2)?;
        let joint = apply_flow(&x, &compose(&d1, &d2)?)?;
        additivity.record(max_gap(stepwise.values(), joint.values()));
        round_trip.record(if flow_from_edge(&edge_from_flow(&d1)) == d1 { 0.0 } else { 1.0 });
        if let Ok(target) = moved.to_image() {
            let (w, _) = wasserstein_grid_l1(&x, &target)?;
            upper.record(w - d1.l1_norm());
        }
    }
    Ok([lemma, plan_norm, feasibility, sandwich, pixel_bound, upper, product, mass, additivity, round_trip]
        .into_iter()
        .map(Tracker::finish)
        .collect())
}
