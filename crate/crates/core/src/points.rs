//! Geometric kernels: farthest point sampling, kNN and ball-query grouping,
//! the shared-point inverse index, and inverse-distance interpolation.
//!
//! Everything here is a pure function over immutable inputs; all distance
//! comparisons use squared distances, and ties always break toward the
//! lowest point index. Brute-force scans only — the library targets desk
//! scale (N ≤ 4096), and the tests compare against equally simple oracles.

use std::fmt;

use crate::tensor::{Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum PointOpsError {
    EmptyCloud,
    SampleCountOutOfRange { requested: usize, points: usize },
    StartOutOfRange { start: usize, points: usize },
    NeighborCountOutOfRange { requested: usize, points: usize },
    NonPositiveRadius { radius: f64 },
    MissingFeatures,
    Tensor(TensorError),
}

impl fmt::Display for PointOpsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PointOpsError::EmptyCloud => write!(f, "point cloud must contain at least one point"),
            PointOpsError::SampleCountOutOfRange { requested, points } => {
                write!(f, "cannot sample {requested} centers from {points} points")
            }
            PointOpsError::StartOutOfRange { start, points } => {
                write!(f, "start index {start} out of range for {points} points")
            }
            PointOpsError::NeighborCountOutOfRange { requested, points } => {
                write!(f, "cannot group {requested} neighbors from {points} points")
            }
            PointOpsError::NonPositiveRadius { radius } => {
                write!(f, "ball query radius must be positive, got {radius}")
            }
            PointOpsError::MissingFeatures => write!(f, "point cloud has no features"),
            PointOpsError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PointOpsError {}

impl From<TensorError> for PointOpsError {
    fn from(e: TensorError) -> Self {
        PointOpsError::Tensor(e)
    }
}

/// N points with coordinates, optional per-point features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    pub features: Option<Tensor>,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>) -> PointCloud {
        PointCloud {
            coords,
            features: None,
            labels: None,
        }
    }

    pub fn with_features(mut self, features: Tensor) -> PointCloud {
        assert_eq!(features.shape()[0], self.coords.len());
        self.features = Some(features);
        self
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> PointCloud {
        assert_eq!(labels.len(), self.coords.len());
        self.labels = Some(labels);
        self
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_width(&self) -> usize {
        self.features.as_ref().map_or(0, |f| f.shape()[1])
    }
}

pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// M region centers with an M×K neighbor table and the inverse shared-point
/// index: for each point, every (region, slot) pair that contains it.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrouping {
    pub center_indices: Vec<usize>,
    /// Flat M×K neighbor indices, row-major by region.
    pub neighbor_indices: Vec<usize>,
    pub regions: usize,
    pub region_size: usize,
    pub points: usize,
    pub inverse_index: Vec<Vec<(usize, usize)>>,
    pub radius: Option<f64>,
}

impl RegionGrouping {
    fn from_neighbors(
        center_indices: Vec<usize>,
        neighbor_indices: Vec<usize>,
        region_size: usize,
        points: usize,
        radius: Option<f64>,
    ) -> RegionGrouping {
        let regions = center_indices.len();
        debug_assert_eq!(neighbor_indices.len(), regions * region_size);
        let mut inverse_index = vec![Vec::new(); points];
        for j in 0..regions {
            for s in 0..region_size {
                let p = neighbor_indices[j * region_size + s];
                inverse_index[p].push((j, s));
            }
        }
        RegionGrouping {
            center_indices,
            neighbor_indices,
            regions,
            region_size,
            points,
            inverse_index,
            radius,
        }
    }

    pub fn neighbor(&self, region: usize, slot: usize) -> usize {
        self.neighbor_indices[region * self.region_size + slot]
    }

    /// Checks the transpose relation between the neighbor table and the
    /// inverse index by full reconstruction.
    pub fn inverse_index_is_consistent(&self) -> bool {
        let mut total = 0;
        for (p, members) in self.inverse_index.iter().enumerate() {
            total += members.len();
            for &(j, s) in members {
                if j >= self.regions || s >= self.region_size || self.neighbor(j, s) != p {
                    return false;
                }
            }
        }
        if total != self.regions * self.region_size {
            return false;
        }
        // every table entry appears in the inverse index
        let mut seen = vec![0usize; self.points];
        for &p in &self.neighbor_indices {
            seen[p] += 1;
        }
        seen.iter()
            .zip(self.inverse_index.iter())
            .all(|(&c, inv)| c == inv.len())
    }
}

/// Greedy max-min farthest point sampling. The first index is `start`; each
/// following pick maximizes the minimum distance to the selected set, ties
/// to the lowest index.
pub fn farthest_point_sampling(
    cloud: &PointCloud,
    count: usize,
    start: usize,
) -> Result<Vec<usize>, PointOpsError> {
    let n = cloud.len();
    if n == 0 {
        return Err(PointOpsError::EmptyCloud);
    }
    if count == 0 || count > n {
        return Err(PointOpsError::SampleCountOutOfRange {
            requested: count,
            points: n,
        });
    }
    if start >= n {
        return Err(PointOpsError::StartOutOfRange { start, points: n });
    }
    let mut selected = Vec::with_capacity(count);
    let mut min_sq = vec![f64::INFINITY; n];
    let mut current = start;
    selected.push(start);
    for _ in 1..count {
        let cur_coord = cloud.coords[current];
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for (i, d) in min_sq.iter_mut().enumerate() {
            let sq = squared_distance(&cloud.coords[i], &cur_coord);
            if sq < *d {
                *d = sq;
            }
            if *d > best {
                best = *d;
                best_idx = i;
            }
        }
        selected.push(best_idx);
        current = best_idx;
    }
    Ok(selected)
}

/// K nearest neighbors per center, ascending by distance, ties to the
/// lowest index. Each region includes its own center.
pub fn knn(
    cloud: &PointCloud,
    center_indices: &[usize],
    k: usize,
) -> Result<RegionGrouping, PointOpsError> {
    let n = cloud.len();
    if n == 0 {
        return Err(PointOpsError::EmptyCloud);
    }
    if k == 0 || k > n {
        return Err(PointOpsError::NeighborCountOutOfRange {
            requested: k,
            points: n,
        });
    }
    let mut neighbors = Vec::with_capacity(center_indices.len() * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for &c in center_indices {
        let center = cloud.coords[c];
        order.clear();
        order.extend(0..n);
        let dist: Vec<f64> = cloud
            .coords
            .iter()
            .map(|p| squared_distance(p, &center))
            .collect();
        order.sort_by(|&a, &b| {
            dist[a]
                .partial_cmp(&dist[b])
                .unwrap()
                .then_with(|| a.cmp(&b))
        });
        neighbors.extend_from_slice(&order[..k]);
    }
    Ok(RegionGrouping::from_neighbors(
        center_indices.to_vec(),
        neighbors,
        k,
        n,
        None,
    ))
}

/// Up to K points within `radius` of each center, ascending by distance,
/// ties to the lowest index. When fewer than K qualify, the nearest
/// qualifying point fills the remaining slots.
pub fn ball_query(
    cloud: &PointCloud,
    center_indices: &[usize],
    radius: f64,
    k: usize,
) -> Result<RegionGrouping, PointOpsError> {
    let n = cloud.len();
    if n == 0 {
        return Err(PointOpsError::EmptyCloud);
    }
    if radius <= 0.0 {
        return Err(PointOpsError::NonPositiveRadius { radius });
    }
    if k == 0 || k > n {
        return Err(PointOpsError::NeighborCountOutOfRange {
            requested: k,
            points: n,
        });
    }
    let r_sq = radius * radius;
    let mut neighbors = Vec::with_capacity(center_indices.len() * k);
    for &c in center_indices {
        let center = cloud.coords[c];
        let mut qualifying: Vec<(f64, usize)> = cloud
            .coords
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let d = squared_distance(p, &center);
                (d <= r_sq).then_some((d, i))
            })
            .collect();
        qualifying.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        // the center itself qualifies (distance 0), so qualifying is never empty
        for s in 0..k {
            let pick = qualifying.get(s).unwrap_or(&qualifying[0]).1;
            neighbors.push(pick);
        }
    }
    Ok(RegionGrouping::from_neighbors(
        center_indices.to_vec(),
        neighbors,
        k,
        n,
        Some(radius),
    ))
}

/// Relative neighbor coordinates per slot: `x_neighbor − x_center`, M×K×3.
pub fn relative_coords(cloud: &PointCloud, grouping: &RegionGrouping) -> Tensor {
    let (m, k) = (grouping.regions, grouping.region_size);
    let mut data = Vec::with_capacity(m * k * 3);
    for j in 0..m {
        let center = cloud.coords[grouping.center_indices[j]];
        for s in 0..k {
            let p = cloud.coords[grouping.neighbor(j, s)];
            data.push(p[0] - center[0]);
            data.push(p[1] - center[1]);
            data.push(p[2] - center[2]);
        }
    }
    Tensor::new(vec![m, k, 3], data).unwrap()
}

/// Gathers each region into an M×K×(3+C) tensor: relative coordinate
/// followed by the neighbor's feature row.
pub fn group(cloud: &PointCloud, grouping: &RegionGrouping) -> Result<Tensor, PointOpsError> {
    let features = cloud.features.as_ref().ok_or(PointOpsError::MissingFeatures)?;
    let c = features.shape()[1];
    let (m, k) = (grouping.regions, grouping.region_size);
    let rel = relative_coords(cloud, grouping);
    let mut data = Vec::with_capacity(m * k * (3 + c));
    for j in 0..m {
        for s in 0..k {
            let base = (j * k + s) * 3;
            data.extend_from_slice(&rel.data()[base..base + 3]);
            let p = grouping.neighbor(j, s);
            data.extend_from_slice(&features.data()[p * c..(p + 1) * c]);
        }
    }
    Ok(Tensor::new(vec![m, k, 3 + c], data).unwrap())
}

/// Weight floor added to squared distances before inversion.
pub const INTERP_EPS: f64 = 1e-8;

/// Number of source neighbors blended per destination point.
pub const INTERP_NEIGHBORS: usize = 3;

/// Precomputed 3-nearest-neighbor interpolation: per destination point,
/// source row indices and normalized inverse-squared-distance weights.
#[derive(Debug, Clone)]
pub struct InterpolationPlan {
    /// `neighbors` entries per destination point.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub neighbors: usize,
    pub destinations: usize,
}

pub fn interpolation_plan(src: &[[f64; 3]], dst: &[[f64; 3]]) -> InterpolationPlan {
    let m = src.len();
    let take = INTERP_NEIGHBORS.min(m);
    let mut indices = Vec::with_capacity(dst.len() * take);
    let mut weights = Vec::with_capacity(dst.len() * take);
    for d in dst {
        let mut best: Vec<(f64, usize)> = src
            .iter()
            .enumerate()
            .map(|(i, s)| (squared_distance(s, d), i))
            .collect();
        best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        let mut w = [0.0; INTERP_NEIGHBORS];
        let mut total = 0.0;
        for t in 0..take {
            w[t] = 1.0 / (best[t].0 + INTERP_EPS);
            total += w[t];
        }
        for t in 0..take {
            indices.push(best[t].1);
            weights.push(w[t] / total);
        }
    }
    InterpolationPlan {
        indices,
        weights,
        neighbors: take,
        destinations: dst.len(),
    }
}

/// Inverse-squared-distance interpolation of source features onto
/// destination coordinates (3 nearest sources, fewer if M < 3).
pub fn interpolate_features(
    src_coords: &[[f64; 3]],
    src_features: &Tensor,
    dst_coords: &[[f64; 3]],
) -> Result<Tensor, PointOpsError> {
    if src_coords.is_empty() {
        return Err(PointOpsError::EmptyCloud);
    }
    let plan = interpolation_plan(src_coords, dst_coords);
    let c = src_features.shape()[1];
    let mut data = vec![0.0; dst_coords.len() * c];
    for d in 0..plan.destinations {
        for t in 0..plan.neighbors {
            let slot = d * plan.neighbors + t;
            let srow = plan.indices[slot] * c;
            let w = plan.weights[slot];
            for ch in 0..c {
                data[d * c + ch] += w * src_features.data()[srow + ch];
            }
        }
    }
    Ok(Tensor::new(vec![dst_coords.len(), c], data).unwrap())
}

/// Tape variant of [`interpolate_features`]: same plan, differentiable in
/// the source features.
pub fn interpolate_features_var(
    plan: &InterpolationPlan,
    src_features: &Var,
) -> Result<Var, TensorError> {
    let tape = src_features.tape().clone();
    let c = src_features.shape()[1];
    let n = plan.destinations;
    let mut out: Option<Var> = None;
    for t in 0..plan.neighbors {
        let rows: Vec<usize> = (0..n).map(|d| plan.indices[d * plan.neighbors + t]).collect();
        let w: Vec<f64> = (0..n).map(|d| plan.weights[d * plan.neighbors + t]).collect();
        let w = tape.constant(Tensor::new(vec![n, 1], w).unwrap());
        let term = src_features.gather_rows(&rows)?.mul(&w)?;
        out = Some(match out {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let _ = c;
    Ok(out.expect("at least one interpolation neighbor"))
}

/// Overlap statistics of a grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedPointStats {
    pub slots_total: usize,
    pub points_covered: usize,
    /// `histogram[m]` = number of points appearing in exactly m slots.
    pub multiplicity_histogram: Vec<usize>,
    pub fraction_shared: f64,
}

pub fn shared_point_stats(grouping: &RegionGrouping) -> SharedPointStats {
    let n = grouping.points;
    let mut covered = 0;
    let mut shared = 0;
    let mut max_mult = 0;
    for inv in &grouping.inverse_index {
        let m = inv.len();
        max_mult = max_mult.max(m);
        if m >= 1 {
            covered += 1;
        }
        if m >= 2 {
            shared += 1;
        }
    }
    let mut histogram = vec![0usize; max_mult + 1];
    for inv in &grouping.inverse_index {
        histogram[inv.len()] += 1;
    }
    SharedPointStats {
        slots_total: grouping.regions * grouping.region_size,
        points_covered: covered,
        multiplicity_histogram: histogram,
        fraction_shared: shared as f64 / n as f64,
    }
}
