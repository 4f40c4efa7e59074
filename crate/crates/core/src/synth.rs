//! Synthetic dataset generation: primitive shape surfaces for
//! classification and ground-plane scenes for segmentation. Generation is a
//! pure function of (spec, seed).

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::model::Task;
use crate::points::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
}

pub const SHAPE_KINDS: [ShapeKind; 5] = [
    ShapeKind::Sphere,
    ShapeKind::Cube,
    ShapeKind::Cylinder,
    ShapeKind::Torus,
    ShapeKind::Cone,
];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub task: Task,
    pub classes: usize,
    /// Clouds per class (classification) or total scenes (segmentation).
    pub samples: usize,
    pub points: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    BadClassCount { requested: usize, available: usize },
    BadSampleCount,
    BadPointCount,
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::BadClassCount { requested, available } => {
                write!(f, "{requested} classes requested, {available} shape kinds available")
            }
            SynthError::BadSampleCount => write!(f, "sample count must be at least 1"),
            SynthError::BadPointCount => write!(f, "point count must be at least 1"),
        }
    }
}

impl std::error::Error for SynthError {}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// One uniform sample on the surface of a unit-sized primitive centered at
/// the origin.
fn sample_surface(kind: ShapeKind, rng: &mut impl Rng) -> [f64; 3] {
    match kind {
        ShapeKind::Sphere => {
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            let r = (1.0 - z * z).sqrt();
            [r * phi.cos(), r * phi.sin(), z]
        }
        ShapeKind::Cube => {
            // half-extent 1, faces have equal area
            let face = rng.gen_range(0..6u32);
            let u: f64 = rng.gen_range(-1.0..1.0);
            let v: f64 = rng.gen_range(-1.0..1.0);
            match face {
                0 => [1.0, u, v],
                1 => [-1.0, u, v],
                2 => [u, 1.0, v],
                3 => [u, -1.0, v],
                4 => [u, v, 1.0],
                _ => [u, v, -1.0],
            }
        }
        ShapeKind::Cylinder => {
            // radius 1, height 2: lateral area 4π, two caps 2π
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            if rng.gen_range(0.0..3.0) < 2.0 {
                let z: f64 = rng.gen_range(-1.0..1.0);
                [phi.cos(), phi.sin(), z]
            } else {
                let r = rng.gen_range(0.0..1.0f64).sqrt();
                let z = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                [r * phi.cos(), r * phi.sin(), z]
            }
        }
        ShapeKind::Torus => {
            // major radius 0.7, minor 0.3; area element ∝ R + r·cos ψ
            let (big_r, small_r) = (0.7, 0.3);
            let theta: f64 = rng.gen_range(0.0..2.0 * PI);
            let psi = loop {
                let psi: f64 = rng.gen_range(0.0..2.0 * PI);
                let accept: f64 = rng.gen_range(0.0..1.0);
                if accept < (big_r + small_r * psi.cos()) / (big_r + small_r) {
                    break psi;
                }
            };
            let ring = big_r + small_r * psi.cos();
            [ring * theta.cos(), ring * theta.sin(), small_r * psi.sin()]
        }
        ShapeKind::Cone => {
            // base radius 1 at z = -0.75, apex at z = +0.75
            let (radius, height): (f64, f64) = (1.0, 1.5);
            let slant = (radius * radius + height * height).sqrt();
            let lateral = PI * radius * slant;
            let base = PI * radius * radius;
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            if rng.gen_range(0.0..lateral + base) < lateral {
                // height fraction with pdf 2(1−t)
                let t = 1.0 - rng.gen_range(0.0..1.0f64).sqrt();
                let r = radius * (1.0 - t);
                [r * phi.cos(), r * phi.sin(), -0.75 + height * t]
            } else {
                let r = radius * rng.gen_range(0.0..1.0f64).sqrt();
                [r * phi.cos(), r * phi.sin(), -0.75]
            }
        }
    }
}

fn rotate_z(p: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Labeled shape clouds: uniform surface samples with Gaussian noise and a
/// random rotation about the vertical axis, scaled to unit max radius.
pub fn gen_shapes(spec: &DatasetSpec) -> Result<Vec<LabeledCloud>, SynthError> {
    if spec.classes == 0 || spec.classes > SHAPE_KINDS.len() {
        return Err(SynthError::BadClassCount {
            requested: spec.classes,
            available: SHAPE_KINDS.len(),
        });
    }
    if spec.samples == 0 {
        return Err(SynthError::BadSampleCount);
    }
    if spec.points == 0 {
        return Err(SynthError::BadPointCount);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.classes * spec.samples);
    for (label, &kind) in SHAPE_KINDS[..spec.classes].iter().enumerate() {
        for _ in 0..spec.samples {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let mut coords: Vec<[f64; 3]> = (0..spec.points)
                .map(|_| {
                    let mut p = rotate_z(sample_surface(kind, &mut rng), angle);
                    if spec.noise > 0.0 {
                        p[0] += spec.noise * gaussian(&mut rng);
                        p[1] += spec.noise * gaussian(&mut rng);
                        p[2] += spec.noise * gaussian(&mut rng);
                    }
                    p
                })
                .collect();
            let max_r = coords
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0, f64::max);
            if max_r > 0.0 {
                for p in coords.iter_mut() {
                    p[0] /= max_r;
                    p[1] /= max_r;
                    p[2] /= max_r;
                }
            }
            out.push(LabeledCloud {
                cloud: PointCloud::new(coords),
                label: label as u32,
            });
        }
    }
    Ok(out)
}

/// Fraction of a scene's point budget given to each placed object.
pub const SCENE_OBJECT_FRACTION: f64 = 0.13;

/// Ground-plane scenes with 2–4 non-overlapping primitives; per-point
/// labels (0 = ground, then one label per object kind).
pub fn gen_scenes(spec: &DatasetSpec) -> Result<Vec<PointCloud>, SynthError> {
    if spec.classes == 0 || spec.classes > SHAPE_KINDS.len() + 1 {
        return Err(SynthError::BadClassCount {
            requested: spec.classes,
            available: SHAPE_KINDS.len() + 1,
        });
    }
    if spec.samples == 0 {
        return Err(SynthError::BadSampleCount);
    }
    if spec.points == 0 {
        return Err(SynthError::BadPointCount);
    }
    let kinds = &SHAPE_KINDS[..spec.classes - 1];
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let object_count = if kinds.is_empty() {
            0
        } else {
            rng.gen_range(2..=4usize)
        };
        // placements: (kind index, scale, x, y) with overlap rejection
        let mut placed: Vec<(usize, f64, f64, f64)> = Vec::new();
        for _ in 0..object_count {
            let kind_idx = rng.gen_range(0..kinds.len());
            let scale = rng.gen_range(0.18..0.3);
            for _attempt in 0..100 {
                let x = rng.gen_range(-0.65..0.65);
                let y = rng.gen_range(-0.65..0.65);
                let clear = placed.iter().all(|&(_, s, px, py)| {
                    let d = ((x - px) * (x - px) + (y - py) * (y - py)).sqrt();
                    d > 1.1 * (scale + s)
                });
                if clear {
                    placed.push((kind_idx, scale, x, y));
                    break;
                }
            }
        }

        let object_budget = (spec.points as f64 * SCENE_OBJECT_FRACTION).round() as usize;
        let ground_budget = spec.points - object_budget * placed.len();
        let mut coords = Vec::with_capacity(spec.points);
        let mut labels = Vec::with_capacity(spec.points);
        for _ in 0..ground_budget {
            coords.push([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0]);
            labels.push(0u32);
        }
        for &(kind_idx, scale, x, y) in &placed {
            let kind = kinds[kind_idx];
            // lift so the primitive rests on the plane
            let lift = match kind {
                ShapeKind::Sphere | ShapeKind::Cube | ShapeKind::Cylinder => scale,
                ShapeKind::Torus => 0.3 * scale,
                ShapeKind::Cone => 0.75 * scale,
            };
            let angle = rng.gen_range(0.0..2.0 * PI);
            for _ in 0..object_budget {
                let p = rotate_z(sample_surface(kind, &mut rng), angle);
                coords.push([x + scale * p[0], y + scale * p[1], lift + scale * p[2]]);
                labels.push(kind_idx as u32 + 1);
            }
        }
        if spec.noise > 0.0 {
            for p in coords.iter_mut() {
                p[0] += spec.noise * gaussian(&mut rng);
                p[1] += spec.noise * gaussian(&mut rng);
                p[2] += spec.noise * gaussian(&mut rng);
            }
        }
        out.push(PointCloud::new(coords).with_labels(labels));
    }
    Ok(out)
}

/// Uniform cloud in the unit cube, used by the overlap statistics command.
pub fn uniform_cube_cloud(points: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..points)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect(),
    )
}
