//! Images on pixel grids and local flow plans between them.
//!
//! A local flow plan holds one signed flow per pair of 4-adjacent pixels:
//! `vert[(i, j)]` moves mass from pixel `(i, j)` to `(i + 1, j)` and
//! `horiz[(i, j)]` moves mass from `(i, j)` to `(i, j + 1)`. Negative values
//! move mass the other way. Flows across the image boundary do not exist.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Absolute tolerance on total mass for normalized distributions.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Read access to an `n x m` grid of values.
pub trait GridLike {
    fn values(&self) -> &Array2<f64>;

    fn shape2(&self) -> (usize, usize) {
        self.values().dim()
    }

    fn total_mass(&self) -> f64 {
        self.values().sum()
    }
}

impl GridLike for Array2<f64> {
    fn values(&self) -> &Array2<f64> {
        self
    }
}

fn check_finite(values: &Array2<f64>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

fn check_nonnegative(values: &Array2<f64>) -> Result<()> {
    match values.iter().enumerate().find(|(_, v)| **v < 0.0) {
        Some((index, &value)) => Err(Error::Negative { index, value }),
        None => Ok(()),
    }
}

fn check_unit_mass(total: f64) -> Result<()> {
    if (total - 1.0).abs() <= NORMALIZATION_TOL {
        Ok(())
    } else {
        Err(Error::Normalization {
            total,
            tolerance: NORMALIZATION_TOL,
        })
    }
}

fn check_nonempty(values: &Array2<f64>) -> Result<()> {
    let (n, m) = values.dim();
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument(format!("empty grid {n}x{m}")));
    }
    Ok(())
}

/// A nonnegative grid with total mass 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridImage(Array2<f64>);

impl GridImage {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_nonempty(&values)?;
        check_finite(&values)?;
        check_nonnegative(&values)?;
        check_unit_mass(values.sum())?;
        Ok(GridImage(values))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::new(array_from_rows(rows)?)
    }

    /// All mass on a single pixel.
    pub fn point_mass(height: usize, width: usize, at: (usize, usize)) -> Result<Self> {
        let mut values = Array2::zeros((height, width));
        *values
            .get_mut(at)
            .ok_or_else(|| Error::InvalidArgument(format!("pixel {at:?} outside {height}x{width}")))? = 1.0;
        Self::new(values)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

impl GridLike for GridImage {
    fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

/// A grid with no sign constraint, as produced by applying a flow plan.
///
/// Values may be negative. Total mass equals the mass of the grid the flow
/// was applied to; [`RawGrid::new`] checks for unit mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawGrid(Array2<f64>);

impl RawGrid {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_nonempty(&values)?;
        check_finite(&values)?;
        check_unit_mass(values.sum())?;
        Ok(RawGrid(values))
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Converts to a [`GridImage`] if every entry is nonnegative.
    pub fn to_image(&self) -> Result<GridImage> {
        GridImage::new(self.0.clone())
    }
}

impl GridLike for RawGrid {
    fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

pub(crate) fn array_from_rows(rows: &[&[f64]]) -> Result<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidArgument("ragged rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((n, m), flat).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Signed net flows between 4-adjacent pixels of an `n x m` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalFlowPlan {
    vert: Array2<f64>,
    horiz: Array2<f64>,
    shape: (usize, usize),
}

impl LocalFlowPlan {
    pub fn zeros(height: usize, width: usize) -> Self {
        LocalFlowPlan {
            vert: Array2::zeros((height.saturating_sub(1), width)),
            horiz: Array2::zeros((height, width.saturating_sub(1))),
            shape: (height, width),
        }
    }

    /// Builds a plan from `(n-1) x m` vertical and `n x (m-1)` horizontal flows.
    pub fn new(vert: Array2<f64>, horiz: Array2<f64>) -> Result<Self> {
        let height = horiz.nrows();
        let width = vert.ncols();
        if vert.nrows() + 1 != height || horiz.ncols() + 1 != width {
            return Err(Error::dims(
                "vert (n-1)xm and horiz nx(m-1)",
                (vert.dim(), horiz.dim()),
            ));
        }
        Ok(LocalFlowPlan {
            vert,
            horiz,
            shape: (height, width),
        })
    }

    /// Builds a plan for an `n x m` image from a vector laid out as
    /// [`LocalFlowPlan::to_vec`] produces.
    pub fn from_vec(height: usize, width: usize, coords: &[f64]) -> Result<Self> {
        let nv = height.saturating_sub(1) * width;
        let nh = height * width.saturating_sub(1);
        if coords.len() != nv + nh {
            return Err(Error::dims(nv + nh, coords.len()));
        }
        let vert = Array2::from_shape_vec((height.saturating_sub(1), width), coords[..nv].to_vec())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let horiz = Array2::from_shape_vec((height, width.saturating_sub(1)), coords[nv..].to_vec())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(LocalFlowPlan {
            vert,
            horiz,
            shape: (height, width),
        })
    }

    pub fn vert(&self) -> &Array2<f64> {
        &self.vert
    }

    pub fn horiz(&self) -> &Array2<f64> {
        &self.horiz
    }

    pub fn vert_mut(&mut self) -> &mut Array2<f64> {
        &mut self.vert
    }

    pub fn horiz_mut(&mut self) -> &mut Array2<f64> {
        &mut self.horiz
    }

    /// Shape `(n, m)` of the images this plan acts on.
    pub fn image_shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Number of flow coordinates, `(n-1)m + n(m-1)`.
    pub fn len(&self) -> usize {
        self.vert.len() + self.horiz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Vertical coordinates row-major, followed by horizontal coordinates row-major.
    pub fn to_vec(&self) -> Vec<f64> {
        self.vert.iter().chain(self.horiz.iter()).copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.vert.iter().chain(self.horiz.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.vert.iter_mut().chain(self.horiz.iter_mut())
    }

    pub fn l1_norm(&self) -> f64 {
        self.iter().map(|v| v.abs()).sum()
    }

    pub fn compose(&self, other: &LocalFlowPlan) -> Result<LocalFlowPlan> {
        self.check_same_shape(other)?;
        Ok(LocalFlowPlan {
            vert: &self.vert + &other.vert,
            horiz: &self.horiz + &other.horiz,
            shape: self.shape,
        })
    }

    pub fn negate(&self) -> LocalFlowPlan {
        self.scale(-1.0)
    }

    pub fn scale(&self, factor: f64) -> LocalFlowPlan {
        LocalFlowPlan {
            vert: &self.vert * factor,
            horiz: &self.horiz * factor,
            shape: self.shape,
        }
    }

    fn check_same_shape(&self, other: &LocalFlowPlan) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dims(self.shape, other.shape));
        }
        Ok(())
    }
}

/// Applies a local flow plan to a grid.
///
/// `out[i,j] = x[i,j] + vert[i-1,j] - vert[i,j] + horiz[i,j-1] - horiz[i,j]`,
/// with flows outside the plan treated as zero.
pub fn apply_flow<G: GridLike + ?Sized>(x: &G, d: &LocalFlowPlan) -> Result<RawGrid> {
    let x = x.values();
    if x.dim() != d.shape {
        return Err(Error::dims(d.shape, x.dim()));
    }
    let mut out = x.clone();
    apply_flow_in_place(&mut out, d);
    Ok(RawGrid(out))
}

pub(crate) fn apply_flow_in_place(out: &mut Array2<f64>, d: &LocalFlowPlan) {
    let (n, m) = d.shape;
    debug_assert_eq!(out.dim(), (n, m));
    for i in 0..n.saturating_sub(1) {
        for j in 0..m {
            let f = d.vert[(i, j)];
            out[(i, j)] -= f;
            out[(i + 1, j)] += f;
        }
    }
    for i in 0..n {
        for j in 0..m.saturating_sub(1) {
            let f = d.horiz[(i, j)];
            out[(i, j)] -= f;
            out[(i, j + 1)] += f;
        }
    }
}

/// Adjoint of `d -> apply_flow(x, d)`: maps a gradient with respect to the
/// output grid to the gradient with respect to the flow coordinates.
pub fn flow_adjoint(grad: &Array2<f64>) -> LocalFlowPlan {
    let (n, m) = grad.dim();
    let mut plan = LocalFlowPlan::zeros(n, m);
    for i in 0..n.saturating_sub(1) {
        for j in 0..m {
            plan.vert[(i, j)] = grad[(i + 1, j)] - grad[(i, j)];
        }
    }
    for i in 0..n {
        for j in 0..m.saturating_sub(1) {
            plan.horiz[(i, j)] = grad[(i, j + 1)] - grad[(i, j)];
        }
    }
    plan
}

pub fn compose(d1: &LocalFlowPlan, d2: &LocalFlowPlan) -> Result<LocalFlowPlan> {
    d1.compose(d2)
}

pub fn l1_norm(d: &LocalFlowPlan) -> f64 {
    d.l1_norm()
}

/// The unique flow between two 1D distributions: `flow[i] = sum_{j<=i} (x[j] - target[j])`.
pub fn solve_flow_1d(x: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if x.len() != target.len() {
        return Err(Error::dims(x.len(), target.len()));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty distribution".into()));
    }
    for v in [x, target] {
        if let Some((index, &value)) = v.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::Negative { index, value });
        }
        check_unit_mass(v.iter().sum())?;
    }
    let mut acc = 0.0;
    Ok(x[..x.len() - 1]
        .iter()
        .zip(target)
        .map(|(a, b)| {
            acc += a - b;
            acc
        })
        .collect())
}

/// Nonnegative flows on ordered pairs of 4-adjacent pixels.
///
/// `down[(i,j)]` is the flow `(i,j) -> (i+1,j)`, `up[(i,j)]` the flow
/// `(i+1,j) -> (i,j)`, `right[(i,j)]` the flow `(i,j) -> (i,j+1)` and
/// `left[(i,j)]` the flow `(i,j+1) -> (i,j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeFlow {
    pub(crate) down: Array2<f64>,
    pub(crate) up: Array2<f64>,
    pub(crate) right: Array2<f64>,
    pub(crate) left: Array2<f64>,
    shape: (usize, usize),
}

impl EdgeFlow {
    pub fn zeros(height: usize, width: usize) -> Self {
        let v = (height.saturating_sub(1), width);
        let h = (height, width.saturating_sub(1));
        EdgeFlow {
            down: Array2::zeros(v),
            up: Array2::zeros(v),
            right: Array2::zeros(h),
            left: Array2::zeros(h),
            shape: (height, width),
        }
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.shape
    }

    fn slot(&self, from: (usize, usize), to: (usize, usize)) -> Option<(u8, (usize, usize))> {
        let (n, m) = self.shape;
        if from.0 >= n || from.1 >= m || to.0 >= n || to.1 >= m {
            return None;
        }
        match (to.0 as isize - from.0 as isize, to.1 as isize - from.1 as isize) {
            (1, 0) => Some((0, from)),
            (-1, 0) => Some((1, to)),
            (0, 1) => Some((2, from)),
            (0, -1) => Some((3, to)),
            _ => None,
        }
    }

    fn array(&self, which: u8) -> &Array2<f64> {
        match which {
            0 => &self.down,
            1 => &self.up,
            2 => &self.right,
            _ => &self.left,
        }
    }

    /// Flow from pixel `from` to the adjacent pixel `to`; `None` if not adjacent.
    pub fn get(&self, from: (usize, usize), to: (usize, usize)) -> Option<f64> {
        self.slot(from, to).map(|(w, idx)| self.array(w)[idx])
    }

    pub fn set(&mut self, from: (usize, usize), to: (usize, usize), value: f64) -> Result<()> {
        if !(value >= 0.0) {
            return Err(Error::InvalidArgument(format!("edge flow must be >= 0, got {value}")));
        }
        let (w, idx) = self
            .slot(from, to)
            .ok_or_else(|| Error::InvalidArgument(format!("{from:?} and {to:?} are not adjacent")))?;
        let arr = match w {
            0 => &mut self.down,
            1 => &mut self.up,
            2 => &mut self.right,
            _ => &mut self.left,
        };
        arr[idx] = value;
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.down.sum() + self.up.sum() + self.right.sum() + self.left.sum()
    }

    /// Net outflow minus inflow at every pixel, i.e. `x - x'` for a feasible flow.
    pub fn divergence(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.shape);
        apply_flow_in_place(&mut out, &flow_from_edge(self));
        out.mapv_inplace(|v: f64| -v);
        out
    }
}

/// Net signed flow of an edge flow: opposing flows on each edge cancel.
pub fn flow_from_edge(g: &EdgeFlow) -> LocalFlowPlan {
    LocalFlowPlan {
        vert: &g.down - &g.up,
        horiz: &g.right - &g.left,
        shape: g.shape,
    }
}

/// Splits each signed flow into its positive and negative directed parts.
pub fn edge_from_flow(d: &LocalFlowPlan) -> EdgeFlow {
    let pos = |a: &Array2<f64>| a.mapv(|v| v.max(0.0));
    let neg = |a: &Array2<f64>| a.mapv(|v| (-v).max(0.0));
    EdgeFlow {
        down: pos(&d.vert),
        up: neg(&d.vert),
        right: pos(&d.horiz),
        left: neg(&d.horiz),
        shape: d.shape,
    }
}

/// A multi-channel image normalized by its grand total across channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiChannelImage {
    channels: Vec<Array2<f64>>,
}

impl MultiChannelImage {
    pub fn new(channels: Vec<Array2<f64>>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidArgument("no channels".into()))?;
        let shape = first.dim();
        for c in &channels {
            if c.dim() != shape {
                return Err(Error::dims(shape, c.dim()));
            }
            check_nonempty(c)?;
            check_finite(c)?;
            check_nonnegative(c)?;
        }
        check_unit_mass(channels.iter().map(|c| c.sum()).sum())?;
        Ok(MultiChannelImage { channels })
    }

    pub fn channels(&self) -> &[Array2<f64>] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        self.channels[0].dim()
    }

    /// Per-channel masses `s_K`.
    pub fn masses(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.sum()).collect()
    }
}

/// Channel count and grid size of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn gray(height: usize, width: usize) -> Self {
        ImageShape {
            channels: 1,
            height,
            width,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Length of the flattened, channel-major input vector.
    pub fn input_len(&self) -> usize {
        self.channels * self.pixels()
    }

    /// Flow coordinates per channel.
    pub fn flow_len(&self) -> usize {
        self.height.saturating_sub(1) * self.width + self.height * self.width.saturating_sub(1)
    }
}

/// A single- or multi-channel normalized image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Image {
    Gray(GridImage),
    Color(MultiChannelImage),
}

impl Image {
    pub fn shape(&self) -> ImageShape {
        match self {
            Image::Gray(g) => {
                let (height, width) = g.shape2();
                ImageShape::gray(height, width)
            }
            Image::Color(c) => {
                let (height, width) = c.grid_shape();
                ImageShape {
                    channels: c.num_channels(),
                    height,
                    width,
                }
            }
        }
    }

    pub fn channel_grids(&self) -> Vec<&Array2<f64>> {
        match self {
            Image::Gray(g) => vec![g.values()],
            Image::Color(c) => c.channels.iter().collect(),
        }
    }

    /// Channel-major, row-major pixel values.
    pub fn flatten(&self) -> Vec<f64> {
        self.channel_grids()
            .into_iter()
            .flat_map(|c| c.iter().copied().collect::<Vec<_>>())
            .collect()
    }

    /// Applies one flow plan per channel and returns the flattened result.
    pub fn apply_flows(&self, flows: &[LocalFlowPlan]) -> Result<Vec<f64>> {
        let grids = self.channel_grids();
        if flows.len() != grids.len() {
            return Err(Error::dims(grids.len(), flows.len()));
        }
        let mut out = Vec::with_capacity(self.shape().input_len());
        for (grid, flow) in grids.into_iter().zip(flows) {
            let raw = apply_flow(grid, flow)?;
            out.extend(raw.0.iter().copied());
        }
        Ok(out)
    }

    /// Image obtained by applying flows, if it is still nonnegative.
    pub fn with_flows(&self, flows: &[LocalFlowPlan]) -> Result<Image> {
        let shape = self.shape();
        let flat = self.apply_flows(flows)?;
        let grids: Vec<Array2<f64>> = flat
            .chunks(shape.pixels())
            .map(|c| Array2::from_shape_vec((shape.height, shape.width), c.to_vec()).expect("shape"))
            .collect();
        match self {
            Image::Gray(_) => Ok(Image::Gray(GridImage::new(grids.into_iter().next().expect("one channel"))?)),
            Image::Color(_) => Ok(Image::Color(MultiChannelImage::new(grids)?)),
        }
    }
}

impl From<GridImage> for Image {
    fn from(g: GridImage) -> Self {
        Image::Gray(g)
    }
}

impl From<MultiChannelImage> for Image {
    fn from(c: MultiChannelImage) -> Self {
        Image::Color(c)
    }
}

/// Sum of absolute pixel differences, `||x - y||_1`.
pub fn pixel_l1_distance<A: GridLike + ?Sized, B: GridLike + ?Sized>(x: &A, y: &B) -> Result<f64> {
    let (a, b) = (x.values(), y.values());
    if a.dim() != b.dim() {
        return Err(Error::dims(a.dim(), b.dim()));
    }
    Ok(a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).sum())
}

/// Row sums of a grid.
pub fn row_masses<G: GridLike + ?Sized>(x: &G) -> Vec<f64> {
    x.values().sum_axis(Axis(1)).to_vec()
}
