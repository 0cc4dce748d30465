//! Procedural shape dataset and pretraining of the generative prior by
//! joint optimization of a per-shape latent table and both decoder branches.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{self, Array, Graph, LeafValues, SparseMatrix};
use crate::error::{FinvError, Result};
use crate::generator::{
    self, bind_branch, branch_forward, decode, fourier_features, init_params, vertex_position, ArchConfig, Binding,
    GeneratorParams, LatentPair, PriorSampler, VoxelFields,
};
use crate::optimizer::{Adam, AdamConfig};
use crate::seeds;

/// Logit magnitude used for hard occupancy.
pub const HARD_LOGIT: f64 = 30.0;

/// Colors used by training shapes.
pub const TRAIN_PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.20, 0.15],
    [0.15, 0.55, 0.85],
    [0.20, 0.75, 0.30],
    [0.90, 0.75, 0.15],
    [0.60, 0.30, 0.75],
    [0.85, 0.85, 0.85],
];

/// Colors never seen in training, for the novel-texture split.
pub const NOVEL_PALETTE: [[f64; 3]; 4] = [
    [0.10, 0.80, 0.75],
    [0.95, 0.45, 0.70],
    [0.45, 0.30, 0.10],
    [0.55, 0.65, 0.15],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PrimitiveKind {
    Box {
        half_extents: [f64; 3],
    },
    Sphere {
        radius: f64,
    },
    /// Axis along world z.
    Cylinder {
        radius: f64,
        half_height: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub color: [f64; 3],
}

impl Primitive {
    /// Half extent of the bounding box along each axis.
    pub fn half_box(&self) -> [f64; 3] {
        match self.kind {
            PrimitiveKind::Box { half_extents } => half_extents,
            PrimitiveKind::Sphere { radius } => [radius; 3],
            PrimitiveKind::Cylinder { radius, half_height } => [radius, radius, half_height],
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.kind {
            PrimitiveKind::Box { half_extents: h } => (0..3).all(|k| d[k].abs() <= h[k]),
            PrimitiveKind::Sphere { radius } => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= radius * radius,
            PrimitiveKind::Cylinder { radius, half_height } => {
                d[0] * d[0] + d[1] * d[1] <= radius * radius && d[2].abs() <= half_height
            }
        }
    }

    fn center_distance(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|k| (p[k] - self.center[k]).powi(2)).sum::<f64>().sqrt()
    }

    fn surface_area(&self) -> f64 {
        use std::f64::consts::PI;
        match self.kind {
            PrimitiveKind::Box { half_extents: h } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            PrimitiveKind::Sphere { radius } => 4.0 * PI * radius * radius,
            PrimitiveKind::Cylinder { radius, half_height } => {
                2.0 * PI * radius * radius + 2.0 * PI * radius * 2.0 * half_height
            }
        }
    }

    /// Uniform sample on the primitive's surface.
    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        use std::f64::consts::PI;
        let c = self.center;
        match self.kind {
            PrimitiveKind::Box { half_extents: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut axis = 2;
                for (k, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = k;
                        break;
                    }
                    pick -= a;
                }
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = if k == axis {
                        if rng.gen::<bool>() {
                            h[k]
                        } else {
                            -h[k]
                        }
                    } else {
                        rng.gen_range(-h[k]..=h[k])
                    };
                }
                [c[0] + p[0], c[1] + p[1], c[2] + p[2]]
            }
            PrimitiveKind::Sphere { radius } => {
                let z: f64 = rng.gen_range(-1.0..=1.0);
                let t = rng.gen_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                [
                    c[0] + radius * r * t.cos(),
                    c[1] + radius * r * t.sin(),
                    c[2] + radius * z,
                ]
            }
            PrimitiveKind::Cylinder { radius, half_height } => {
                let cap = radius * radius;
                let side = 2.0 * radius * 2.0 * half_height;
                let t = rng.gen_range(0.0..2.0 * PI);
                if rng.gen::<f64>() * (cap + side) < cap {
                    let r = radius * rng.gen::<f64>().sqrt();
                    let z = if rng.gen::<bool>() { half_height } else { -half_height };
                    [c[0] + r * t.cos(), c[1] + r * t.sin(), c[2] + z]
                } else {
                    let z = rng.gen_range(-half_height..=half_height);
                    [c[0] + radius * t.cos(), c[1] + radius * t.sin(), c[2] + z]
                }
            }
        }
    }
}

/// A union of one to three primitives inside the unit cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub primitives: Vec<Primitive>,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.primitives.len()) {
            return Err(FinvError::InvalidInput(format!(
                "a shape needs 1 to 3 primitives, got {}",
                self.primitives.len()
            )));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let h = p.half_box();
            if !h.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(FinvError::InvalidInput(format!("primitive {i} has a nonpositive size")));
            }
            if !(0..3).all(|k| p.center[k] - h[k] >= -0.5 && p.center[k] + h[k] <= 0.5) {
                return Err(FinvError::InvalidInput(format!("primitive {i} leaves the unit cube")));
            }
            if !p.color.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(FinvError::InvalidInput(format!("primitive {i} color outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Draws a random shape whose colors come from `palette`.
    pub fn random(seed: u64, palette: &[[f64; 3]]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.gen_range(1..=3);
        let primitives = (0..count)
            .map(|i| {
                let kind = match rng.gen_range(0..3) {
                    0 => PrimitiveKind::Box {
                        half_extents: [
                            rng.gen_range(0.08..0.3),
                            rng.gen_range(0.08..0.3),
                            rng.gen_range(0.08..0.3),
                        ],
                    },
                    1 => PrimitiveKind::Sphere {
                        radius: rng.gen_range(0.1..0.3),
                    },
                    _ => PrimitiveKind::Cylinder {
                        radius: rng.gen_range(0.08..0.25),
                        half_height: rng.gen_range(0.1..0.3),
                    },
                };
                let probe = Primitive {
                    kind,
                    center: [0.0; 3],
                    color: [0.0; 3],
                };
                let h = probe.half_box();
                // The first primitive sits near the middle so parts stay attached.
                let spread = if i == 0 { 0.1 } else { 0.25 };
                let center = [0, 1, 2].map(|k| {
                    let bound = (0.5 - h[k]).min(spread);
                    rng.gen_range(-bound..=bound)
                });
                Primitive {
                    kind,
                    center,
                    color: palette[rng.gen_range(0..palette.len())],
                }
            })
            .collect();
        Self { primitives, seed }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.primitives.iter().any(|q| q.contains(p))
    }

    /// Color of the nearest primitive containing `p`, or of the nearest
    /// primitive overall when `p` is outside the shape.
    pub fn color_at(&self, p: [f64; 3]) -> [f64; 3] {
        let nearest = |it: &mut dyn Iterator<Item = &Primitive>| {
            it.min_by(|a, b| a.center_distance(p).total_cmp(&b.center_distance(p)))
                .map(|q| q.color)
        };
        nearest(&mut self.primitives.iter().filter(|q| q.contains(p)))
            .or_else(|| nearest(&mut self.primitives.iter()))
            .unwrap_or([0.0; 3])
    }

    /// Axis-aligned bounds `(min, max)` of the union.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.primitives {
            let h = p.half_box();
            for k in 0..3 {
                lo[k] = lo[k].min(p.center[k] - h[k]);
                hi[k] = hi[k].max(p.center[k] + h[k]);
            }
        }
        (lo, hi)
    }
}

/// Ground truth for one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTruth {
    pub fields: VoxelFields,
    pub surface: Vec<[f64; 3]>,
}

/// Hard occupancy fields and `surface_points` samples on the surface of the
/// union.
pub fn generate_shape(spec: &ShapeSpec, grid_size: usize, surface_points: usize) -> Result<ShapeTruth> {
    spec.validate()?;
    if grid_size < 2 {
        return Err(FinvError::InvalidInput("grid size must be at least 2".into()));
    }
    let n = grid_size.pow(3);
    let mut occupancy_logits = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(3 * n);
    for i in 0..n {
        let p = vertex_position(i, grid_size);
        occupancy_logits.push(if spec.contains(p) { HARD_LOGIT } else { -HARD_LOGIT });
        colors.extend(spec.color_at(p));
    }
    let fields = VoxelFields {
        grid_size,
        occupancy_logits,
        colors,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, "surface", 0));
    let areas: Vec<f64> = spec.primitives.iter().map(Primitive::surface_area).collect();
    let total: f64 = areas.iter().sum();
    let mut surface = Vec::with_capacity(surface_points);
    let mut attempts = 0usize;
    while surface.len() < surface_points && attempts < 1000 * surface_points.max(1) {
        attempts += 1;
        let mut pick = rng.gen::<f64>() * total;
        let mut which = areas.len() - 1;
        for (k, a) in areas.iter().enumerate() {
            if pick < *a {
                which = k;
                break;
            }
            pick -= a;
        }
        let p = spec.primitives[which].sample_surface(&mut rng);
        let buried = spec
            .primitives
            .iter()
            .enumerate()
            .any(|(k, q)| k != which && q.contains(p) && strictly_inside(q, p));
        if !buried {
            surface.push(p);
        }
    }
    Ok(ShapeTruth { fields, surface })
}

fn strictly_inside(q: &Primitive, p: [f64; 3]) -> bool {
    let eps = 1e-9;
    let d = [p[0] - q.center[0], p[1] - q.center[1], p[2] - q.center[2]];
    match q.kind {
        PrimitiveKind::Box { half_extents: h } => (0..3).all(|k| d[k].abs() < h[k] - eps),
        PrimitiveKind::Sphere { radius } => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() < radius - eps,
        PrimitiveKind::Cylinder { radius, half_height } => {
            (d[0] * d[0] + d[1] * d[1]).sqrt() < radius - eps && d[2].abs() < half_height - eps
        }
    }
}

/// Occupied volume as a fraction of the unit cube, each vertex standing for
/// a cell of side `1/(V-1)`.
pub fn occupancy_fraction(fields: &VoxelFields) -> f64 {
    let occupied = fields.occupancy_logits.iter().filter(|&&l| l > 0.0).count();
    occupied as f64 / ((fields.grid_size - 1) as f64).powi(3)
}

/// Intersection over union of `sigmoid(logit) > 0.5` between two fields.
pub fn occupancy_iou(a: &VoxelFields, b: &VoxelFields) -> Result<f64> {
    if a.grid_size != b.grid_size || a.occupancy_logits.len() != b.occupancy_logits.len() {
        return Err(FinvError::InvalidInput("IoU between grids of different size".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.occupancy_logits.iter().zip(&b.occupancy_logits) {
        let (p, q) = (*x > 0.0, *y > 0.0);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Which dataset split a shape belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    /// Held-out shapes with training colors.
    Test,
    /// Held-out shapes with colors outside the training palette.
    NovelTexture,
}

/// `count` shapes of `split`; the splits draw from disjoint seed streams.
pub fn dataset(split: Split, count: usize, seed: u64) -> Vec<ShapeSpec> {
    let (stream, palette): (&str, &[[f64; 3]]) = match split {
        Split::Train => ("train", &TRAIN_PALETTE),
        Split::Test => ("test", &TRAIN_PALETTE),
        Split::NovelTexture => ("novel", &NOVEL_PALETTE),
    };
    (0..count)
        .map(|i| ShapeSpec::random(seeds::derive(seed, stream, i as u64), palette))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub arch: ArchConfig,
    pub shapes: usize,
    pub steps: usize,
    pub batch: usize,
    /// Latent regularizer weight.
    pub beta: f64,
    pub points_per_shape: usize,
    pub param_lr: f64,
    pub latent_lr: f64,
    pub latent_init_std: f64,
    pub variance_floor: f64,
    pub grid_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            shapes: 64,
            steps: 2000,
            batch: 8,
            beta: 1e-3,
            points_per_shape: 512,
            param_lr: 3e-3,
            latent_lr: 3e-2,
            latent_init_std: 0.1,
            variance_floor: 1e-4,
            grid_size: 32,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |m: &str| Err(FinvError::InvalidConfig(m.into()));
        if self.shapes < 16 {
            return bad("pretraining needs at least 16 shapes");
        }
        if self.batch == 0 || self.points_per_shape == 0 {
            return bad("batch and points_per_shape must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and nonnegative");
        }
        if !(self.param_lr > 0.0 && self.latent_lr > 0.0 && self.latent_init_std >= 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.variance_floor > 0.0) {
            return bad("variance_floor must be positive");
        }
        if self.grid_size < 2 {
            return bad("grid_size must be at least 2");
        }
        Ok(())
    }
}

/// A pretrained prior.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorBundle {
    pub params: GeneratorParams,
    pub latent_table: Vec<LatentPair>,
    pub sampler: PriorSampler,
    pub config: PretrainConfig,
    pub seed: u64,
    /// Training loss per step.
    pub losses: Vec<f64>,
}

struct TrainingShape {
    truth: VoxelFields,
    occupied: Vec<usize>,
    /// Vertices with a 6-neighbor of opposite occupancy.
    boundary: Vec<usize>,
}

/// Jointly fits the latent table and both decoder branches to `shapes`.
pub fn pretrain_prior(shapes: &[ShapeSpec], config: &PretrainConfig, seed: u64) -> Result<PriorBundle> {
    config.validate()?;
    if shapes.len() < 16 {
        return Err(FinvError::InvalidConfig(format!(
            "pretraining needs at least 16 shapes, got {}",
            shapes.len()
        )));
    }
    let v = config.grid_size;
    let data: Vec<TrainingShape> = shapes
        .iter()
        .map(|s| {
            let truth = generate_shape(s, v, 0)?.fields;
            let occupied = (0..truth.vertex_count())
                .filter(|&i| truth.occupancy_logits[i] > 0.0)
                .collect();
            let boundary = boundary_vertices(&truth);
            Ok(TrainingShape {
                truth,
                occupied,
                boundary,
            })
        })
        .collect::<Result<_>>()?;

    let arch = config.arch;
    let d = arch.d_latent;
    let mut params = init_params(&arch, seeds::derive(seed, "prior-init", 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "pretrain", 0));
    let init = Normal::new(0.0, config.latent_init_std).map_err(|e| FinvError::InvalidConfig(e.to_string()))?;
    let mut table_geo: Vec<f64> = (0..shapes.len() * d).map(|_| init.sample(&mut rng)).collect();
    let mut table_tex: Vec<f64> = (0..shapes.len() * d).map(|_| init.sample(&mut rng)).collect();

    let phi_sizes: Vec<usize> = params.phi.tensors().iter().map(|t| t.len()).collect();
    let theta_sizes: Vec<usize> = params.theta.tensors().iter().map(|t| t.len()).collect();
    let mut adam_phi = Adam::new(AdamConfig::with_lr(config.param_lr), &phi_sizes);
    let mut adam_theta = Adam::new(AdamConfig::with_lr(config.param_lr), &theta_sizes);
    let mut adam_table = Adam::new(
        AdamConfig::with_lr(config.latent_lr),
        &[table_geo.len(), table_tex.len()],
    );

    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<usize> = (0..config.batch.min(shapes.len()))
            .map(|_| {
                if order.is_empty() {
                    order = (0..shapes.len()).collect();
                    order.shuffle(&mut rng);
                }
                order.pop().expect("refilled")
            })
            .collect();
        let sample = sample_points(&data, &batch, config.points_per_shape, &mut rng);
        let loss = training_step(
            &mut params,
            &mut table_geo,
            &mut table_tex,
            &batch,
            &sample,
            config,
            &mut adam_phi,
            &mut adam_theta,
            &mut adam_table,
        )?;
        if !loss.is_finite() || !params.is_finite() {
            return Err(FinvError::Numerical(format!(
                "pretraining diverged at step {step}: loss {loss}, last finite losses {:?}",
                &losses[losses.len().saturating_sub(5)..]
            )));
        }
        losses.push(loss);
    }

    let latent_table: Vec<LatentPair> = (0..shapes.len())
        .map(|i| LatentPair {
            geo: table_geo[i * d..(i + 1) * d].to_vec(),
            tex: table_tex[i * d..(i + 1) * d].to_vec(),
        })
        .collect();
    let sampler = PriorSampler::fit(&latent_table, config.variance_floor)?;
    Ok(PriorBundle {
        params,
        latent_table,
        sampler,
        config: config.clone(),
        seed,
        losses,
    })
}

struct PointSample {
    positions: Vec<[f64; 3]>,
    occupancy: Vec<f64>,
    colors: Vec<[f64; 3]>,
}

fn boundary_vertices(fields: &VoxelFields) -> Vec<usize> {
    let v = fields.grid_size;
    let inside = |i: usize| fields.occupancy_logits[i] > 0.0;
    let mut out = Vec::new();
    for iz in 0..v {
        for iy in 0..v {
            for ix in 0..v {
                let i = fields.index(ix, iy, iz);
                let c = [ix, iy, iz];
                let differs = (0..3).any(|k| {
                    [-1i64, 1].iter().any(|&s| {
                        let n = c[k] as i64 + s;
                        if n < 0 || n >= v as i64 {
                            return false;
                        }
                        let mut m = c;
                        m[k] = n as usize;
                        inside(fields.index(m[0], m[1], m[2])) != inside(i)
                    })
                });
                if differs {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// A third of each shape's points come from occupied vertices, a third
/// from vertices next to the surface and a third uniformly from the grid.
fn sample_points(data: &[TrainingShape], batch: &[usize], per_shape: usize, rng: &mut ChaCha8Rng) -> PointSample {
    let mut out = PointSample {
        positions: Vec::with_capacity(batch.len() * per_shape),
        occupancy: Vec::with_capacity(batch.len() * per_shape),
        colors: Vec::with_capacity(batch.len() * per_shape),
    };
    for &b in batch {
        let shape = &data[b];
        let n = shape.truth.vertex_count();
        let v = shape.truth.grid_size;
        for k in 0..per_shape {
            let pool = match k % 3 {
                0 => &shape.occupied,
                1 => &shape.boundary,
                _ => &Vec::new(),
            };
            let i = if pool.is_empty() {
                rng.gen_range(0..n)
            } else {
                pool[rng.gen_range(0..pool.len())]
            };
            out.positions.push(vertex_position(i, v));
            out.occupancy.push((shape.truth.occupancy_logits[i] > 0.0) as u8 as f64);
            out.colors.push(shape.truth.color(i));
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn training_step(
    params: &mut GeneratorParams,
    table_geo: &mut [f64],
    table_tex: &mut [f64],
    batch: &[usize],
    sample: &PointSample,
    config: &PretrainConfig,
    adam_phi: &mut Adam,
    adam_theta: &mut Adam,
    adam_table: &mut Adam,
) -> Result<f64> {
    let d = config.arch.d_latent;
    let b = batch.len();
    let p = sample.positions.len();
    let per = p / b;
    let f = config.arch.feature_dim();

    let mut g = Graph::new();
    let mut feats = Vec::with_capacity(p * f);
    for &x in &sample.positions {
        feats.extend(fourier_features(x, config.arch.fourier_bands));
    }
    let feats = g.constant(Array::new(vec![p, f], feats)?);
    let geo = g.leaf("table.geo", &[b, d], true);
    let tex = g.leaf("table.tex", &[b, d], true);
    let phi = bind_branch(&mut g, &params.phi, "phi", Binding::Trainable);
    let theta = bind_branch(&mut g, &params.theta, "theta", Binding::Trainable);
    let expand = Arc::new(SparseMatrix::from_rows(b, (0..p).map(|r| vec![(r / per, 1.0)])));

    let logits = branch_forward(&mut g, feats, geo, Some(Arc::clone(&expand)), &phi)?;
    let both = g.concat(&[geo, tex], 1)?;
    let color_logits = branch_forward(&mut g, feats, both, Some(expand), &theta)?;
    let colors = g.sigmoid(color_logits)?;

    // Occupancy BCE on logits: softplus(x) - y·x, averaged over points.
    let y = g.constant(Array::new(vec![p, 1], sample.occupancy.clone())?);
    let sp = g.softplus(logits)?;
    let yx = g.mul(y, logits)?;
    let bce = g.sub(sp, yx)?;
    let bce = g.mean(bce)?;

    // Color MSE over occupied points.
    let occupied = sample.occupancy.iter().sum::<f64>();
    let target: Vec<f64> = sample.colors.iter().flatten().copied().collect();
    let target = g.constant(Array::new(vec![p, 3], target)?);
    let diff_c = g.sub(colors, target)?;
    let sq = g.mul(diff_c, diff_c)?;
    let weights: Vec<f64> = sample
        .occupancy
        .iter()
        .flat_map(|&o| [o / (3.0 * occupied.max(1.0)); 3])
        .collect();
    let weights = g.constant(Array::new(vec![p, 3], weights)?);
    let color = g.mul(sq, weights)?;
    let color = g.sum(color)?;

    let geo_sq = g.mul(geo, geo)?;
    let tex_sq = g.mul(tex, tex)?;
    let geo_sq = g.sum(geo_sq)?;
    let tex_sq = g.sum(tex_sq)?;
    let reg = g.add(geo_sq, tex_sq)?;
    let reg = g.scale(reg, config.beta / b as f64)?;
    let data_term = g.add(bce, color)?;
    let loss = g.add(data_term, reg)?;

    let mut leaves = LeafValues::new();
    let rows = |table: &[f64]| -> Vec<f64> { batch.iter().flat_map(|&i| table[i * d..(i + 1) * d].to_vec()).collect() };
    leaves.insert(geo, Array::new(vec![b, d], rows(table_geo))?);
    leaves.insert(tex, Array::new(vec![b, d], rows(table_tex))?);
    phi.insert_values(&params.phi, &mut leaves);
    theta.insert_values(&params.theta, &mut leaves);
    let values = diff::evaluate(&g, &leaves)?;
    let value = values.scalar(loss);
    if !value.is_finite() {
        return Ok(value);
    }

    let mut wrt = vec![geo, tex];
    wrt.extend(&phi.tensors);
    wrt.extend(&theta.tensors);
    let mut grads = diff::backward_wrt(&g, &values, loss, &wrt)?;
    let mut take = |id| grads.take(id).expect("requested gradient");

    let scatter = |rows: Array| {
        let mut full = vec![0.0; table_geo.len()];
        for (k, &i) in batch.iter().enumerate() {
            for j in 0..d {
                full[i * d + j] += rows.data()[k * d + j];
            }
        }
        full
    };
    let g_geo = scatter(take(geo));
    let g_tex = scatter(take(tex));
    let gp: Vec<Array> = phi.tensors.iter().map(|&id| take(id)).collect();
    let gt: Vec<Array> = theta.tensors.iter().map(|&id| take(id)).collect();
    adam_table.step(&mut [table_geo, table_tex], &[&g_geo, &g_tex]);
    adam_phi.step_arrays(&mut params.phi.tensors_mut(), &gp.iter().collect::<Vec<_>>());
    adam_theta.step_arrays(&mut params.theta.tensors_mut(), &gt.iter().collect::<Vec<_>>());
    Ok(value)
}

/// Mean occupancy IoU of each table entry's decode against its training
/// shape.
pub fn training_iou(bundle: &PriorBundle, shapes: &[ShapeSpec]) -> Result<f64> {
    if shapes.len() != bundle.latent_table.len() || shapes.is_empty() {
        return Err(FinvError::InvalidInput(format!(
            "{} shapes for a latent table of {}",
            shapes.len(),
            bundle.latent_table.len()
        )));
    }
    let v = bundle.config.grid_size;
    let mut total = 0.0;
    for (w, s) in bundle.latent_table.iter().zip(shapes) {
        let truth = generate_shape(s, v, 0)?.fields;
        total += occupancy_iou(&decode(w, &bundle.params, v)?, &truth)?;
    }
    Ok(total / shapes.len() as f64)
}

const TABLE_MAGIC: &[u8] = b"FINVTABLE1\n";

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    seed: u64,
    config: PretrainConfig,
}

impl PriorBundle {
    /// Writes `params.bin`, `latent_table.bin`, `sampler.json`,
    /// `config.json` and `losses.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| FinvError::io(dir, e))?;
        generator::save_checkpoint(&self.params, &dir.join("params.bin"))?;

        let d = self.params.arch.d_latent;
        let mut bytes = TABLE_MAGIC.to_vec();
        bytes.extend((self.latent_table.len() as u64).to_le_bytes());
        bytes.extend((d as u64).to_le_bytes());
        for w in &self.latent_table {
            for x in w.geo.iter().chain(&w.tex) {
                bytes.extend(x.to_le_bytes());
            }
        }
        write_file(&dir.join("latent_table.bin"), &bytes)?;
        let sampler = serde_json::to_string_pretty(&self.sampler).expect("sampler serializes");
        write_file(&dir.join("sampler.json"), sampler.as_bytes())?;
        let meta = BundleMeta {
            seed: self.seed,
            config: self.config.clone(),
        };
        let meta = serde_json::to_string_pretty(&meta).expect("config serializes");
        write_file(&dir.join("config.json"), meta.as_bytes())?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l:e}\n"));
        }
        write_file(&dir.join("losses.csv"), csv.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = generator::load_checkpoint(&dir.join("params.bin"))?;
        let table_path = dir.join("latent_table.bin");
        let bytes = fs::read(&table_path).map_err(|e| FinvError::io(&table_path, e))?;
        let bad = |detail: &str| FinvError::malformed("latent table", &table_path, detail);
        let body = bytes.strip_prefix(TABLE_MAGIC).ok_or_else(|| bad("missing magic"))?;
        if body.len() < 16 {
            return Err(bad("truncated header"));
        }
        let count = u64::from_le_bytes(body[..8].try_into().expect("8 bytes")) as usize;
        let d = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let data = &body[16..];
        if d != params.arch.d_latent {
            return Err(bad("latent size differs from the decoder"));
        }
        if Some(data.len()) != count.checked_mul(2 * d * 8) {
            return Err(bad("data length does not match header"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let latent_table = values.chunks_exact(2 * d).map(LatentPair::from_slice).collect();

        let sampler: PriorSampler = read_json(&dir.join("sampler.json"), "sampler")?;
        sampler.validate()?;
        if sampler.dim() != d {
            return Err(FinvError::malformed(
                "sampler",
                dir.join("sampler.json"),
                "dimension differs from the decoder",
            ));
        }
        let meta: BundleMeta = read_json(&dir.join("config.json"), "prior config")?;
        let losses_path = dir.join("losses.csv");
        let losses = match fs::read_to_string(&losses_path) {
            Ok(text) => text
                .lines()
                .skip(1)
                .map(|l| {
                    l.split(',')
                        .nth(1)
                        .and_then(|x| x.parse().ok())
                        .ok_or_else(|| FinvError::malformed("loss history", &losses_path, l))
                })
                .collect::<Result<_>>()?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(FinvError::io(&losses_path, e)),
        };
        Ok(Self {
            params,
            latent_table,
            sampler,
            config: meta.config,
            seed: meta.seed,
            losses,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| FinvError::io(path, e))?;
    f.write_all(bytes).map_err(|e| FinvError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| FinvError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FinvError::malformed(what, path, e.to_string()))
}
