//! Local context propagation: pool each region into a descriptor, derive
//! per-region logits, then rewrite every shared point's feature as a
//! softmax-weighted sum of its copies across the regions that contain it.
//!
//! The softmax normalizes per point and per channel over exactly the set of
//! regions containing that point, so the weights of each point's copies sum
//! to 1 regardless of how many regions it belongs to. Points in a single
//! region pass through unchanged (a singleton softmax is exactly 1).

use crate::points::RegionGrouping;
use crate::tensor::{Tensor, TensorError, Var};

/// The per-region projection from pooled descriptors (width 2C) to logits
/// (width C); the "1×1 convolution".
#[derive(Debug, Clone)]
pub struct LcpParams<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> LcpParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LcpParams<U> {
        LcpParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn for_each<'a>(&'a self, path: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{path}.weight"), &self.weight);
        f(format!("{path}.bias"), &self.bias);
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{path}.weight"), &mut self.weight);
        f(format!("{path}.bias"), &mut self.bias);
    }
}

pub fn init_lcp(width: usize, rng: &mut impl rand::Rng) -> LcpParams<Tensor> {
    LcpParams {
        weight: crate::attention::uniform_init(rng, vec![2 * width, width], 2 * width),
        bias: crate::attention::uniform_init(rng, vec![width], 2 * width),
    }
}

/// Intermediate values, exposed for testing.
#[derive(Debug, Clone)]
pub struct LcpState {
    /// Max ⊕ mean pooled region descriptors, M×2C.
    pub descriptors: Tensor,
    /// Raw per-region logits, M×C.
    pub logits: Tensor,
    /// For each point, its normalized weights: one row per membership,
    /// C columns, rows summing to 1 per channel.
    pub point_weights: Vec<Tensor>,
}

/// Channelwise max over the K slots concatenated with channelwise mean:
/// `[M,K,C] -> [M,2C]`.
pub fn region_descriptor(region_features: &Var) -> Result<Var, TensorError> {
    let max = region_features.reduce_max(1)?;
    let mean = region_features.reduce_mean(1)?;
    Var::concat(&[&max, &mean], 1)
}

/// Per-region logits `A·W + b`, M×C. The softmax over these is applied per
/// shared point inside [`lcp_propagate`], normalizing over exactly the
/// regions that contain each point.
pub fn region_weights(descriptors: &Var, params: &LcpParams<Var>) -> Result<Var, TensorError> {
    descriptors.matmul(&params.weight)?.add(&params.bias)
}

/// Membership tables derived from the inverse index, in point order.
struct MembershipIndex {
    /// Flat slot index (region·K + slot) per membership.
    slot_rows: Vec<usize>,
    /// Region index per membership.
    region_rows: Vec<usize>,
    /// Owning point per membership.
    point_rows: Vec<usize>,
    /// Points with no membership at all.
    orphans: Vec<usize>,
}

fn membership_index(grouping: &RegionGrouping) -> MembershipIndex {
    let total: usize = grouping.inverse_index.iter().map(|v| v.len()).sum();
    let mut slot_rows = Vec::with_capacity(total);
    let mut region_rows = Vec::with_capacity(total);
    let mut point_rows = Vec::with_capacity(total);
    let mut orphans = Vec::new();
    for (p, members) in grouping.inverse_index.iter().enumerate() {
        if members.is_empty() {
            orphans.push(p);
        }
        for &(j, s) in members {
            slot_rows.push(j * grouping.region_size + s);
            region_rows.push(j);
            point_rows.push(p);
        }
    }
    MembershipIndex {
        slot_rows,
        region_rows,
        point_rows,
        orphans,
    }
}

/// Rewrites each point's feature as the per-channel softmax-weighted sum of
/// its copies across regions: `[M,K,C] -> [N,C]`.
///
/// Points with no membership keep their `prior` feature (zero without one);
/// with a covering grouping this case never occurs.
pub fn lcp_propagate(
    region_features: &Var,
    logits: &Var,
    grouping: &RegionGrouping,
    prior: Option<&Var>,
) -> Result<Var, TensorError> {
    let (out, _) = propagate_impl(region_features, logits, grouping, prior)?;
    Ok(out)
}

fn propagate_impl(
    region_features: &Var,
    logits: &Var,
    grouping: &RegionGrouping,
    prior: Option<&Var>,
) -> Result<(Var, Var), TensorError> {
    let shape = region_features.shape();
    if shape.len() != 3 || shape[0] != grouping.regions || shape[1] != grouping.region_size {
        return Err(TensorError::ShapeMismatch {
            op: "lcp_propagate",
            lhs: shape,
            rhs: vec![grouping.regions, grouping.region_size],
        });
    }
    let (m, k, c) = (shape[0], shape[1], shape[2]);
    let n = grouping.points;
    let tape = region_features.tape().clone();
    let idx = membership_index(grouping);
    let t = idx.slot_rows.len();

    let flat = region_features.reshape(vec![m * k, c])?;
    let gathered_feats = flat.gather_rows(&idx.slot_rows)?; // [T,C]
    let gathered_logits = logits.gather_rows(&idx.region_rows)?; // [T,C]

    // Per-segment max, detached: softmax(x − c) = softmax(x) for any
    // constant c, so subtracting it changes no value and no gradient.
    let logit_values = gathered_logits.value();
    let mut seg_max = vec![f64::NEG_INFINITY; n * c];
    for (row, &p) in idx.point_rows.iter().enumerate() {
        for ch in 0..c {
            let v = logit_values.data()[row * c + ch];
            if v > seg_max[p * c + ch] {
                seg_max[p * c + ch] = v;
            }
        }
    }
    let max_rows: Vec<f64> = idx
        .point_rows
        .iter()
        .flat_map(|&p| seg_max[p * c..(p + 1) * c].iter().copied())
        .collect();
    let max_const = tape.constant(Tensor::new(vec![t, c], max_rows)?);

    let exps = gathered_logits.sub(&max_const)?.exp(); // [T,C]
    let zeros_n = tape.constant(Tensor::zeros(vec![n, c]));
    let seg_sums = zeros_n.scatter_add_rows(&idx.point_rows, &exps)?; // [N,C]
    let sums_per_row = seg_sums.gather_rows(&idx.point_rows)?; // [T,C]
    let weights = exps.div(&sums_per_row)?; // [T,C], per-point per-channel softmax

    let weighted = weights.mul(&gathered_feats)?;
    let zeros_out = tape.constant(Tensor::zeros(vec![n, c]));
    let mut out = zeros_out.scatter_add_rows(&idx.point_rows, &weighted)?;

    if !idx.orphans.is_empty() {
        if let Some(prev) = prior {
            let mut mask = Tensor::zeros(vec![n, 1]);
            for &p in &idx.orphans {
                mask.data_mut()[p] = 1.0;
            }
            let mask = tape.constant(mask);
            out = out.add(&prev.mul(&mask)?)?;
        }
    }
    Ok((out, weights))
}

/// Full LCP pass: descriptors → logits → per-point propagation, then the
/// updated per-point features are scattered back into every (region, slot)
/// they occupy, so the next transformer layer sees propagated features.
pub fn lcp_forward(
    region_features: &Var,
    grouping: &RegionGrouping,
    params: &LcpParams<Var>,
    prior: Option<&Var>,
) -> Result<Var, TensorError> {
    let descriptors = region_descriptor(region_features)?;
    let logits = region_weights(&descriptors, params)?;
    let (points, _) = propagate_impl(region_features, &logits, grouping, prior)?;
    let shape = region_features.shape();
    let updated = points.gather_rows(&grouping.neighbor_indices)?;
    updated.reshape(shape)
}

/// Like [`lcp_forward`] but also returns the intermediate state.
pub fn lcp_forward_with_state(
    region_features: &Var,
    grouping: &RegionGrouping,
    params: &LcpParams<Var>,
    prior: Option<&Var>,
) -> Result<(Var, LcpState), TensorError> {
    let descriptors = region_descriptor(region_features)?;
    let logits = region_weights(&descriptors, params)?;
    let (points, weights) = propagate_impl(region_features, &logits, grouping, prior)?;
    let shape = region_features.shape();
    let c = shape[2];
    let updated = points.gather_rows(&grouping.neighbor_indices)?.reshape(shape)?;

    let wv = weights.value();
    let mut point_weights = Vec::with_capacity(grouping.points);
    let mut row = 0;
    for members in &grouping.inverse_index {
        let rows = members.len();
        let data = wv.data()[row * c..(row + rows) * c].to_vec();
        point_weights.push(Tensor::new(vec![rows, c], data)?);
        row += rows;
    }
    Ok((
        updated,
        LcpState {
            descriptors: descriptors.value(),
            logits: logits.value(),
            point_weights,
        },
    ))
}
