//! Exact 1-Wasserstein distances between images on a pixel grid.
//!
//! Two independent routes are provided. [`wasserstein_lp`] solves the full
//! coupling problem over all pixel pairs with a transportation simplex and
//! supports both L1 and L2 ground metrics. [`wasserstein_grid_l1`] solves the
//! equivalent min-cost flow over 4-adjacent edges only, which is exact for the
//! L1 ground metric. Neither uses entropic regularization.

mod mcf;
mod simplex;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::flow::{flow_from_edge, EdgeFlow, GridImage, GridLike, LocalFlowPlan, MultiChannelImage, NORMALIZATION_TOL};
use crate::{Error, Result};

/// Largest pixel count accepted by [`wasserstein_lp`].
pub const LP_MAX_PIXELS: usize = 64;

/// Slack allowed on coupling marginals.
pub const MARGINAL_TOL: f64 = 1e-8;

/// Distance between pixel positions used as transport cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundMetric {
    /// `|i - i'| + |j - j'|`
    L1,
    /// `sqrt((i - i')^2 + (j - j')^2)`
    L2,
}

impl GroundMetric {
    pub fn distance(self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let di = a.0.abs_diff(b.0) as f64;
        let dj = a.1.abs_diff(b.1) as f64;
        match self {
            GroundMetric::L1 => di + dj,
            GroundMetric::L2 => di.hypot(dj),
        }
    }

    /// Dense `(nm) x (nm)` cost matrix, row-major over pixel indices.
    pub fn cost_matrix(self, height: usize, width: usize) -> Array2<f64> {
        let p = height * width;
        Array2::from_shape_fn((p, p), |(a, b)| {
            self.distance((a / width, a % width), (b / width, b % width))
        })
    }
}

/// A coupling between source pixels (rows) and target pixels (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    coupling: Array2<f64>,
}

impl TransportPlan {
    /// Checks nonnegativity and that the marginals match `x` and `target`.
    pub fn new(coupling: Array2<f64>, x: &GridImage, target: &GridImage) -> Result<Self> {
        let plan = TransportPlan { coupling };
        plan.check_marginals(x, target)?;
        Ok(plan)
    }

    /// The product coupling `x target^T`, always feasible.
    pub fn product(x: &GridImage, target: &GridImage) -> Result<Self> {
        let a: Vec<f64> = x.values().iter().copied().collect();
        let b: Vec<f64> = target.values().iter().copied().collect();
        let coupling = Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j]);
        Self::new(coupling, x, target)
    }

    pub fn coupling(&self) -> &Array2<f64> {
        &self.coupling
    }

    pub fn cost(&self, metric: GroundMetric, width: usize) -> f64 {
        let height = self.coupling.nrows() / width.max(1);
        (&self.coupling * &metric.cost_matrix(height, width)).sum()
    }

    fn check_marginals(&self, x: &GridImage, target: &GridImage) -> Result<()> {
        let p = x.values().len();
        if self.coupling.dim() != (p, target.values().len()) {
            return Err(Error::dims((p, target.values().len()), self.coupling.dim()));
        }
        if let Some((index, &value)) = self.coupling.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::Negative { index, value });
        }
        let rows = self.coupling.sum_axis(ndarray::Axis(1));
        let cols = self.coupling.sum_axis(ndarray::Axis(0));
        let ok = rows.iter().zip(x.values().iter()).all(|(r, v)| (r - v).abs() <= MARGINAL_TOL)
            && cols.iter().zip(target.values().iter()).all(|(c, v)| (c - v).abs() <= MARGINAL_TOL);
        if !ok {
            return Err(Error::Infeasible("coupling marginals do not match".into()));
        }
        Ok(())
    }
}

fn check_pair(x: &GridImage, target: &GridImage) -> Result<()> {
    if x.shape2() != target.shape2() {
        return Err(Error::dims(x.shape2(), target.shape2()));
    }
    Ok(())
}

/// Exact 1-Wasserstein distance via the full coupling problem.
pub fn wasserstein_lp(x: &GridImage, target: &GridImage, metric: GroundMetric) -> Result<(f64, TransportPlan)> {
    check_pair(x, target)?;
    let (n, m) = x.shape2();
    let pixels = n * m;
    if pixels > LP_MAX_PIXELS {
        return Err(Error::Scale {
            pixels,
            limit: LP_MAX_PIXELS,
        });
    }
    let supply: Vec<f64> = x.values().iter().copied().collect();
    let demand: Vec<f64> = target.values().iter().copied().collect();
    let cost = metric.cost_matrix(n, m);
    let sol = simplex::solve(&supply, &demand, cost.as_slice().expect("standard layout"));
    let coupling = Array2::from_shape_vec((pixels, pixels), sol.flows).expect("shape");
    Ok((sol.cost.max(0.0), TransportPlan { coupling }))
}

/// Exact 1-Wasserstein distance (L1 ground metric) via min-cost flow on
/// adjacent-pixel edges.
pub fn wasserstein_grid_l1(x: &GridImage, target: &GridImage) -> Result<(f64, EdgeFlow)> {
    check_pair(x, target)?;
    Ok(mcf::solve(x.values(), target.values()))
}

/// A local flow plan of minimal L1 norm carrying `x` to `target`.
///
/// Its norm equals the L1-ground 1-Wasserstein distance.
pub fn min_flow_plan(x: &GridImage, target: &GridImage) -> Result<LocalFlowPlan> {
    let (_, g) = wasserstein_grid_l1(x, target)?;
    Ok(flow_from_edge(&g))
}

/// L1-ground 1-Wasserstein distance with no transport between channels.
///
/// Equals `sum_K s_K * W1(x^K / s_K, target^K / s_K)`; channels with zero
/// mass contribute nothing.
pub fn per_channel_wasserstein(x: &MultiChannelImage, target: &MultiChannelImage) -> Result<f64> {
    if x.num_channels() != target.num_channels() || x.grid_shape() != target.grid_shape() {
        return Err(Error::dims(
            (x.num_channels(), x.grid_shape()),
            (target.num_channels(), target.grid_shape()),
        ));
    }
    let mut total = 0.0;
    for (k, (a, b)) in x.channels().iter().zip(target.channels()).enumerate() {
        let (sa, sb) = (a.sum(), b.sum());
        if (sa - sb).abs() > NORMALIZATION_TOL {
            return Err(Error::Infeasible(format!(
                "channel {k} mass differs: {sa} vs {sb}"
            )));
        }
        if sa <= 0.0 {
            continue;
        }
        total += mcf::solve(a, b).0;
    }
    Ok(total)
}
