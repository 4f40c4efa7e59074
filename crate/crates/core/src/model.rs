//! Network assembly: LCPFormer blocks (grouping → attention → LCP →
//! attention → projection → max-pool), upsampling stages, and the
//! classification/segmentation heads, plus the named presets.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::attention::{
    init_transformer_layer, transformer_layer, uniform_init, TransformerLayerParams,
};
use crate::lcp::{init_lcp, lcp_forward, LcpParams};
use crate::points::{
    ball_query, farthest_point_sampling, interpolation_plan, interpolate_features_var, knn,
    relative_coords, PointCloud, PointOpsError, RegionGrouping,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
    /// Detection-style backbone: blocks plus two upsampling stages, no head.
    DetectionBackbone,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroupingKind {
    Knn,
    Ball { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Layer norm after each residual.
    Post,
    /// No normalization; the layer equations taken literally.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub out_points: usize,
    pub neighbors: usize,
    pub in_width: usize,
    pub out_width: usize,
    pub attention_layers_before: usize,
    pub attention_layers_after: usize,
    pub grouping: GroupingKind,
}

impl BlockConfig {
    pub fn knn(out_points: usize, neighbors: usize, in_width: usize, out_width: usize) -> Self {
        BlockConfig {
            out_points,
            neighbors,
            in_width,
            out_width,
            attention_layers_before: 1,
            attention_layers_after: 1,
            grouping: GroupingKind::Knn,
        }
    }

    pub fn ball(
        out_points: usize,
        neighbors: usize,
        radius: f64,
        in_width: usize,
        out_width: usize,
    ) -> Self {
        BlockConfig {
            grouping: GroupingKind::Ball { radius },
            ..BlockConfig::knn(out_points, neighbors, in_width, out_width)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub input_points: usize,
    pub embed_width: usize,
    pub blocks: Vec<BlockConfig>,
    /// Output width of each upsampling stage, deepest first. Empty for
    /// classification; one per block for segmentation.
    pub upsample_widths: Vec<usize>,
    pub head_hidden: usize,
    pub classes: usize,
    pub norm: NormMode,
    pub heads: usize,
    pub lcp_enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Tensor(TensorError),
    Points(PointOpsError),
    Config(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Points(e) => write!(f, "{e}"),
            ModelError::Config(msg) => write!(f, "invalid model config: {msg}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<PointOpsError> for ModelError {
    fn from(e: PointOpsError) -> Self {
        ModelError::Points(e)
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.blocks.is_empty() {
            return err("at least one block required".into());
        }
        let mut width = self.embed_width;
        let mut points = self.input_points;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_width != width {
                return err(format!(
                    "block {i} expects input width {} but receives {width}",
                    b.in_width
                ));
            }
            if b.out_points == 0 || b.out_points > points {
                return err(format!(
                    "block {i} samples {} centers from {points} points",
                    b.out_points
                ));
            }
            if b.neighbors == 0 || b.neighbors > points {
                return err(format!(
                    "block {i} groups {} neighbors from {points} points",
                    b.neighbors
                ));
            }
            if b.in_width % self.heads != 0 {
                return err(format!(
                    "block {i} width {} not divisible by {} heads",
                    b.in_width, self.heads
                ));
            }
            if b.attention_layers_before + b.attention_layers_after == 0 {
                return err(format!("block {i} has no attention layers"));
            }
            width = b.out_width;
            points = b.out_points;
        }
        match self.task {
            Task::Classification => {
                if !self.upsample_widths.is_empty() {
                    return err("classification takes no upsampling stages".into());
                }
            }
            Task::Segmentation => {
                if self.upsample_widths.len() != self.blocks.len() {
                    return err(format!(
                        "segmentation needs {} upsampling stages, got {}",
                        self.blocks.len(),
                        self.upsample_widths.len()
                    ));
                }
            }
            Task::DetectionBackbone => {
                if self.upsample_widths.len() >= self.blocks.len() {
                    return err("backbone upsampling cannot pass the input level".into());
                }
            }
        }
        Ok(())
    }

    pub fn last_block_width(&self) -> usize {
        self.blocks.last().map(|b| b.out_width).unwrap_or(0)
    }

    /// Feature width entering upsampling stage `u` and the skip width it
    /// concatenates with.
    fn upstage_in_widths(&self, u: usize) -> (usize, usize) {
        let carried = if u == 0 {
            self.last_block_width()
        } else {
            self.upsample_widths[u - 1]
        };
        let target_level = self.blocks.len() - 1 - u;
        let skip = if target_level == 0 {
            self.embed_width
        } else {
            self.blocks[target_level - 1].out_width
        };
        (carried, skip)
    }
}

// ── parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    pub before: Vec<TransformerLayerParams<T>>,
    pub lcp: Option<LcpParams<T>>,
    pub after: Vec<TransformerLayerParams<T>>,
    pub proj_w: T,
    pub proj_b: T,
}

#[derive(Debug, Clone)]
pub struct UpStageParams<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone)]
pub struct HeadParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: Option<T>,
    pub b2: Option<T>,
}

#[derive(Debug, Clone)]
pub struct LcpFormerParams<T> {
    pub embed_w: T,
    pub embed_b: T,
    pub blocks: Vec<BlockParams<T>>,
    pub upstages: Vec<UpStageParams<T>>,
    pub head: Option<HeadParams<T>>,
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            before: self.before.iter().map(|l| l.map(f)).collect(),
            lcp: self.lcp.as_ref().map(|l| l.map(f)),
            after: self.after.iter().map(|l| l.map(f)).collect(),
            proj_w: f(&self.proj_w),
            proj_b: f(&self.proj_b),
        }
    }

    pub fn for_each<'a>(&'a self, path: &str, f: &mut impl FnMut(String, &'a T)) {
        for (i, l) in self.before.iter().enumerate() {
            l.for_each(&format!("{path}.before{i}"), f);
        }
        if let Some(l) = &self.lcp {
            l.for_each(&format!("{path}.lcp"), f);
        }
        for (i, l) in self.after.iter().enumerate() {
            l.for_each(&format!("{path}.after{i}"), f);
        }
        f(format!("{path}.proj_w"), &self.proj_w);
        f(format!("{path}.proj_b"), &self.proj_b);
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(String, &mut T)) {
        for (i, l) in self.before.iter_mut().enumerate() {
            l.for_each_mut(&format!("{path}.before{i}"), f);
        }
        if let Some(l) = &mut self.lcp {
            l.for_each_mut(&format!("{path}.lcp"), f);
        }
        for (i, l) in self.after.iter_mut().enumerate() {
            l.for_each_mut(&format!("{path}.after{i}"), f);
        }
        f(format!("{path}.proj_w"), &mut self.proj_w);
        f(format!("{path}.proj_b"), &mut self.proj_b);
    }
}

impl<T> LcpFormerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LcpFormerParams<U> {
        LcpFormerParams {
            embed_w: f(&self.embed_w),
            embed_b: f(&self.embed_b),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            upstages: self
                .upstages
                .iter()
                .map(|u| UpStageParams {
                    weight: f(&u.weight),
                    bias: f(&u.bias),
                })
                .collect(),
            head: self.head.as_ref().map(|h| HeadParams {
                w1: f(&h.w1),
                b1: f(&h.b1),
                w2: h.w2.as_ref().map(|t| f(t)),
                b2: h.b2.as_ref().map(|t| f(t)),
            }),
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        f("embed.w".to_string(), &self.embed_w);
        f("embed.b".to_string(), &self.embed_b);
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each(&format!("block{i}"), f);
        }
        for (i, u) in self.upstages.iter().enumerate() {
            f(format!("up{i}.w"), &u.weight);
            f(format!("up{i}.b"), &u.bias);
        }
        if let Some(h) = &self.head {
            f("head.w1".to_string(), &h.w1);
            f("head.b1".to_string(), &h.b1);
            if let Some(w2) = &h.w2 {
                f("head.w2".to_string(), w2);
            }
            if let Some(b2) = &h.b2 {
                f("head.b2".to_string(), b2);
            }
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        f("embed.w".to_string(), &mut self.embed_w);
        f("embed.b".to_string(), &mut self.embed_b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("block{i}"), f);
        }
        for (i, u) in self.upstages.iter_mut().enumerate() {
            f(format!("up{i}.w"), &mut u.weight);
            f(format!("up{i}.b"), &mut u.bias);
        }
        if let Some(h) = &mut self.head {
            f("head.w1".to_string(), &mut h.w1);
            f("head.b1".to_string(), &mut h.b1);
            if let Some(w2) = &mut h.w2 {
                f("head.w2".to_string(), w2);
            }
            if let Some(b2) = &mut h.b2 {
                f("head.b2".to_string(), b2);
            }
        }
    }
}

pub type ModelParams = LcpFormerParams<Tensor>;

/// Deterministic parameter initialization from a seed.
pub fn param_init(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let rng = &mut ChaCha12Rng::seed_from_u64(seed);
    let with_norm = cfg.norm == NormMode::Post;
    let blocks = cfg
        .blocks
        .iter()
        .map(|b| BlockParams {
            before: (0..b.attention_layers_before)
                .map(|_| init_transformer_layer(b.in_width, cfg.heads, with_norm, rng))
                .collect(),
            lcp: cfg.lcp_enabled.then(|| init_lcp(b.in_width, rng)),
            after: (0..b.attention_layers_after)
                .map(|_| init_transformer_layer(b.in_width, cfg.heads, with_norm, rng))
                .collect(),
            proj_w: uniform_init(rng, vec![b.in_width, b.out_width], b.in_width),
            proj_b: uniform_init(rng, vec![b.out_width], b.in_width),
        })
        .collect();
    let upstages = (0..cfg.upsample_widths.len())
        .map(|u| {
            let (carried, skip) = cfg.upstage_in_widths(u);
            let fan = carried + skip;
            UpStageParams {
                weight: uniform_init(rng, vec![fan, cfg.upsample_widths[u]], fan),
                bias: uniform_init(rng, vec![cfg.upsample_widths[u]], fan),
            }
        })
        .collect();
    let head = match cfg.task {
        Task::Classification => {
            let readout = 2 * cfg.last_block_width();
            Some(HeadParams {
                w1: uniform_init(rng, vec![readout, cfg.head_hidden], readout),
                b1: uniform_init(rng, vec![cfg.head_hidden], readout),
                w2: Some(uniform_init(rng, vec![cfg.head_hidden, cfg.classes], cfg.head_hidden)),
                b2: Some(uniform_init(rng, vec![cfg.classes], cfg.head_hidden)),
            })
        }
        Task::Segmentation => {
            let last = *cfg.upsample_widths.last().unwrap();
            Some(HeadParams {
                w1: uniform_init(rng, vec![last, cfg.classes], last),
                b1: uniform_init(rng, vec![cfg.classes], last),
                w2: None,
                b2: None,
            })
        }
        Task::DetectionBackbone => None,
    };
    LcpFormerParams {
        embed_w: uniform_init(rng, vec![3, cfg.embed_width], 3),
        embed_b: uniform_init(rng, vec![cfg.embed_width], 3),
        blocks,
        upstages,
        head,
    }
}

pub fn param_count(params: &ModelParams) -> usize {
    let mut total = 0;
    params.for_each(&mut |_, t| total += t.numel());
    total
}

pub fn named_tensors(params: &ModelParams) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    params.for_each(&mut |name, t| out.push((name, t.clone())));
    out
}

/// Mounts parameters onto a tape; differentiable when `requires_grad`.
pub fn mount(params: &ModelParams, tape: &Tape, requires_grad: bool) -> LcpFormerParams<Var> {
    params.map(&mut |t| {
        if requires_grad {
            tape.var(t.clone())
        } else {
            tape.constant(t.clone())
        }
    })
}

/// Gradients of every parameter after a backward pass, in `for_each` order.
pub fn gradients(mounted: &LcpFormerParams<Var>) -> Vec<Tensor> {
    let mut out = Vec::new();
    mounted.for_each(&mut |_, v| {
        out.push(v.grad().expect("backward must run before reading gradients"));
    });
    out
}

// ── forward passes ──────────────────────────────────────────────────────

fn build_grouping(
    cloud: &PointCloud,
    cfg: &BlockConfig,
    fps_start: usize,
) -> Result<(Vec<usize>, RegionGrouping), ModelError> {
    let centers = farthest_point_sampling(cloud, cfg.out_points, fps_start)?;
    let grouping = match cfg.grouping {
        GroupingKind::Knn => knn(cloud, &centers, cfg.neighbors)?,
        GroupingKind::Ball { radius } => ball_query(cloud, &centers, radius, cfg.neighbors)?,
    };
    Ok((centers, grouping))
}

/// One LCPFormer block over per-point features `[N, C]`, producing center
/// coordinates and pooled features `[M, C']`.
pub fn block_forward(
    coords: &[[f64; 3]],
    features: &Var,
    cfg: &BlockConfig,
    params: &BlockParams<Var>,
    fps_start: usize,
) -> Result<(Vec<[f64; 3]>, Var), ModelError> {
    let cloud = PointCloud::new(coords.to_vec());
    let (centers, grouping) = build_grouping(&cloud, cfg, fps_start)?;
    block_forward_grouped(coords, features, &grouping, params)
        .map(|pooled| (centers.iter().map(|&i| coords[i]).collect(), pooled))
}

/// Block body over an explicit grouping (the testable core).
pub fn block_forward_grouped(
    coords: &[[f64; 3]],
    features: &Var,
    grouping: &RegionGrouping,
    params: &BlockParams<Var>,
) -> Result<Var, ModelError> {
    let tape = features.tape().clone();
    let cloud = PointCloud::new(coords.to_vec());
    let (m, k) = (grouping.regions, grouping.region_size);
    let c = features.shape()[1];

    let rel = tape.constant(relative_coords(&cloud, grouping));
    let mut x = features
        .gather_rows(&grouping.neighbor_indices)?
        .reshape(vec![m, k, c])?;
    for layer in &params.before {
        x = transformer_layer(&rel, &x, layer)?;
    }
    if let Some(lcp) = &params.lcp {
        x = lcp_forward(&x, grouping, lcp, Some(features))?;
    }
    for layer in &params.after {
        x = transformer_layer(&rel, &x, layer)?;
    }
    let projected = x.matmul(&params.proj_w)?.add(&params.proj_b)?;
    Ok(projected.reduce_max(1)?)
}

/// Embeds raw coordinates to the first block's width.
fn embed(tape: &Tape, coords: &[[f64; 3]], params: &LcpFormerParams<Var>) -> Result<Var, ModelError> {
    let n = coords.len();
    let data: Vec<f64> = coords.iter().flat_map(|p| p.iter().copied()).collect();
    let x = tape.constant(Tensor::new(vec![n, 3], data)?);
    Ok(x.matmul(&params.embed_w)?.add(&params.embed_b)?.relu())
}

fn run_blocks(
    tape: &Tape,
    cloud: &PointCloud,
    cfg: &ModelConfig,
    params: &LcpFormerParams<Var>,
    fps_start: usize,
) -> Result<Vec<(Vec<[f64; 3]>, Var)>, ModelError> {
    let mut levels = Vec::with_capacity(cfg.blocks.len() + 1);
    let x0 = embed(tape, &cloud.coords, params)?;
    levels.push((cloud.coords.clone(), x0));
    for (i, (bcfg, bparams)) in cfg.blocks.iter().zip(params.blocks.iter()).enumerate() {
        let start = if i == 0 { fps_start } else { 0 };
        let (coords, feats) = {
            let (prev_coords, prev_feats) = levels.last().unwrap();
            block_forward(prev_coords, prev_feats, bcfg, bparams, start)?
        };
        levels.push((coords, feats));
    }
    Ok(levels)
}

fn run_upstages(
    levels: &[(Vec<[f64; 3]>, Var)],
    params: &LcpFormerParams<Var>,
) -> Result<(Vec<[f64; 3]>, Var), ModelError> {
    let depth = levels.len() - 1;
    let mut cur_coords = levels[depth].0.clone();
    let mut cur = levels[depth].1.clone();
    for (u, stage) in params.upstages.iter().enumerate() {
        let target = depth - 1 - u;
        let (t_coords, t_feats) = &levels[target];
        let plan = interpolation_plan(&cur_coords, t_coords);
        let interp = interpolate_features_var(&plan, &cur)?;
        let merged = Var::concat(&[&interp, t_feats], 1)?;
        cur = merged.matmul(&stage.weight)?.add(&stage.bias)?.relu();
        cur_coords = t_coords.clone();
    }
    Ok((cur_coords, cur))
}

/// Classification network: blocks, global max⊕mean readout, MLP head.
/// Returns `[1, classes]` logits.
pub fn classification_forward(
    tape: &Tape,
    cloud: &PointCloud,
    cfg: &ModelConfig,
    params: &LcpFormerParams<Var>,
    fps_start: usize,
) -> Result<Var, ModelError> {
    let levels = run_blocks(tape, cloud, cfg, params, fps_start)?;
    let pooled = &levels.last().unwrap().1;
    let maxed = pooled.reduce_max(0)?;
    let meaned = pooled.reduce_mean(0)?;
    let readout = Var::concat(&[&maxed, &meaned], 0)?;
    let width = 2 * cfg.last_block_width();
    let x = readout.reshape(vec![1, width])?;
    let head = params.head.as_ref().expect("classification head");
    let hidden = x.matmul(&head.w1)?.add(&head.b1)?.relu();
    let logits = hidden
        .matmul(head.w2.as_ref().expect("classification head w2"))?
        .add(head.b2.as_ref().expect("classification head b2"))?;
    Ok(logits)
}

/// Segmentation network: blocks, mirrored upsampling with skip
/// connections, pointwise head. Returns `[N, classes]` logits.
pub fn segmentation_forward(
    tape: &Tape,
    cloud: &PointCloud,
    cfg: &ModelConfig,
    params: &LcpFormerParams<Var>,
    fps_start: usize,
) -> Result<Var, ModelError> {
    let levels = run_blocks(tape, cloud, cfg, params, fps_start)?;
    let (_, feats) = run_upstages(&levels, params)?;
    let head = params.head.as_ref().expect("segmentation head");
    Ok(feats.matmul(&head.w1)?.add(&head.b1)?)
}

/// Detection-style backbone: blocks plus the configured upsampling stages.
/// Returns the final coordinates and per-point features.
pub fn backbone_forward(
    tape: &Tape,
    cloud: &PointCloud,
    cfg: &ModelConfig,
    params: &LcpFormerParams<Var>,
    fps_start: usize,
) -> Result<(Vec<[f64; 3]>, Var), ModelError> {
    let levels = run_blocks(tape, cloud, cfg, params, fps_start)?;
    run_upstages(&levels, params)
}

/// Task-dispatching logits forward for classification and segmentation.
pub fn forward_logits(
    tape: &Tape,
    cloud: &PointCloud,
    cfg: &ModelConfig,
    params: &LcpFormerParams<Var>,
    fps_start: usize,
) -> Result<Var, ModelError> {
    match cfg.task {
        Task::Classification => classification_forward(tape, cloud, cfg, params, fps_start),
        Task::Segmentation => segmentation_forward(tape, cloud, cfg, params, fps_start),
        Task::DetectionBackbone => Err(ModelError::Config(
            "detection backbone has no logits head".into(),
        )),
    }
}

// ── presets ─────────────────────────────────────────────────────────────

pub const PRESET_NAMES: &[&str] = &[
    "miniature-cls",
    "miniature-seg",
    "desk-cls",
    "desk-seg",
    "paper-cls",
    "paper-seg",
    "paper-det",
];

/// Builds a named architecture preset for the given class count.
pub fn preset(name: &str, classes: usize) -> Result<ModelConfig, ModelError> {
    let cfg = match name {
        // tiny nets used by gradient checks and oracle tests
        "miniature-cls" => ModelConfig {
            task: Task::Classification,
            input_points: 128,
            embed_width: 8,
            blocks: vec![BlockConfig::knn(16, 6, 8, 8), BlockConfig::knn(8, 4, 8, 8)],
            upsample_widths: vec![],
            head_hidden: 8,
            classes,
            norm: NormMode::Post,
            heads: 2,
            lcp_enabled: true,
        },
        "miniature-seg" => ModelConfig {
            task: Task::Segmentation,
            input_points: 128,
            embed_width: 8,
            blocks: vec![BlockConfig::knn(32, 6, 8, 8), BlockConfig::knn(8, 4, 8, 8)],
            upsample_widths: vec![8, 8],
            head_hidden: 8,
            classes,
            norm: NormMode::Post,
            heads: 2,
            lcp_enabled: true,
        },
        // CPU-sized training presets
        "desk-cls" => ModelConfig {
            task: Task::Classification,
            input_points: 512,
            embed_width: 8,
            blocks: vec![
                BlockConfig::knn(48, 16, 8, 12),
                BlockConfig::knn(24, 12, 12, 16),
                BlockConfig::knn(12, 8, 16, 24),
                BlockConfig::knn(8, 8, 24, 32),
            ],
            upsample_widths: vec![],
            head_hidden: 32,
            classes,
            norm: NormMode::Post,
            heads: 4,
            lcp_enabled: true,
        },
        "desk-seg" => ModelConfig {
            task: Task::Segmentation,
            input_points: 4096,
            embed_width: 12,
            blocks: vec![
                BlockConfig::knn(256, 16, 12, 16),
                BlockConfig::knn(96, 12, 16, 24),
                BlockConfig::knn(48, 8, 24, 32),
                BlockConfig::knn(24, 8, 32, 32),
            ],
            upsample_widths: vec![24, 16, 12, 12],
            head_hidden: 12,
            classes,
            norm: NormMode::Post,
            heads: 4,
            lcp_enabled: true,
        },
        // architecture-faithful presets: 1024 points kept at 256 centers
        // through four blocks with the 16/12/8/8 neighbor ladder
        "paper-cls" => ModelConfig {
            task: Task::Classification,
            input_points: 1024,
            embed_width: 64,
            blocks: vec![
                BlockConfig::knn(256, 16, 64, 128),
                BlockConfig::knn(256, 12, 128, 256),
                BlockConfig::knn(256, 8, 256, 512),
                BlockConfig::knn(256, 8, 512, 512),
            ],
            upsample_widths: vec![],
            head_hidden: 512,
            classes,
            norm: NormMode::Post,
            heads: 4,
            lcp_enabled: true,
        },
        // 4096 kept in block 1, then 1024/512/256, K=16 throughout,
        // mirrored by four upsampling stages back to the input points
        "paper-seg" => ModelConfig {
            task: Task::Segmentation,
            input_points: 4096,
            embed_width: 64,
            blocks: vec![
                BlockConfig::knn(4096, 16, 64, 64),
                BlockConfig::knn(1024, 16, 64, 128),
                BlockConfig::knn(512, 16, 128, 256),
                BlockConfig::knn(256, 16, 256, 512),
            ],
            upsample_widths: vec![256, 128, 64, 64],
            head_hidden: 64,
            classes,
            norm: NormMode::Post,
            heads: 4,
            lcp_enabled: true,
        },
        // detection backbone schedule: ball query with radii 0.2/0.4/0.8/1.2
        // and two upsampling stages; no detection head
        "paper-det" => ModelConfig {
            task: Task::DetectionBackbone,
            input_points: 4096,
            embed_width: 64,
            blocks: vec![
                BlockConfig::ball(2048, 16, 0.2, 64, 128),
                BlockConfig::ball(1024, 16, 0.4, 128, 256),
                BlockConfig::ball(512, 16, 0.8, 256, 512),
                BlockConfig::ball(256, 16, 1.2, 512, 512),
            ],
            upsample_widths: vec![256, 256],
            head_hidden: 0,
            classes,
            norm: NormMode::Post,
            heads: 4,
            lcp_enabled: true,
        },
        other => {
            return Err(ModelError::Config(format!(
                "unknown preset '{other}' (expected one of {PRESET_NAMES:?})"
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Shrinks any config to gradient-checkable size (width ≤ 8) while keeping
/// its structure: block count, grouping kinds, norm mode, task.
pub fn miniaturize(cfg: &ModelConfig) -> ModelConfig {
    let points = 48;
    let width = 6;
    let mut out = cfg.clone();
    out.input_points = points;
    out.embed_width = width;
    out.heads = 2;
    out.head_hidden = if cfg.task == Task::Classification { width } else { cfg.head_hidden.min(width) };
    let mut prev = points;
    for b in out.blocks.iter_mut() {
        let scaled = (b.out_points * points).div_euclid(cfg.input_points).max(2);
        b.out_points = scaled.min(prev);
        b.neighbors = b.neighbors.min(3).min(prev);
        b.in_width = width;
        b.out_width = width;
        prev = b.out_points;
    }
    for w in out.upsample_widths.iter_mut() {
        *w = width;
    }
    out.validate().expect("miniaturized config must be valid");
    out
}
