//! Differentiable emission-absorption rendering of voxel fields.
//!
//! Rays are marched through the unit cube `[-0.5, 0.5]³` with a fixed
//! number of equally spaced samples. Occupancy logits and colors are
//! trilinearly interpolated from the grid, so for a fixed camera the whole
//! sampling step is a constant sparse matrix. A [`RayPlan`] precomputes that
//! matrix once per camera and grid size; [`composite_nodes`] turns field
//! nodes of a graph into image nodes.

use std::path::Path;
use std::sync::Arc;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::diff::{self, Array, Graph, LeafValues, NodeId, SparseMatrix};
use crate::error::{FinvError, Result};
use crate::generator::{self, GeneratorParams, LatentPair, VoxelFields};

pub type Vec3 = [f64; 3];
pub type Mat4 = [[f64; 4]; 4];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Option<Vec3> {
    let n = dot(a, a).sqrt();
    (n > 1e-12).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

/// Pinhole camera. Camera frame: x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rigid world-to-camera transform, row-major.
    pub world_to_camera: Mat4,
    pub width: usize,
    pub height: usize,
}

/// Result of [`Camera::project`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
}

impl Projection {
    pub fn behind_camera(&self) -> bool {
        self.depth <= 0.0
    }
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, world_to_camera: Mat4, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            world_to_camera,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` mapping to image-up.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fx: f64, fy: f64, width: usize, height: usize) -> Result<Self> {
        let bad = || FinvError::InvalidInput("degenerate look-at configuration".into());
        let z = normalize(sub(target, eye)).ok_or_else(bad)?;
        let x = normalize(cross(z, up)).ok_or_else(bad)?;
        let y = cross(z, x);
        let t = [-dot(x, eye), -dot(y, eye), -dot(z, eye)];
        let m = [
            [x[0], x[1], x[2], t[0]],
            [y[0], y[1], y[2], t[1]],
            [z[0], z[1], z[2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Self::new(fx, fy, width as f64 / 2.0, height as f64 / 2.0, m, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(FinvError::InvalidInput("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(FinvError::InvalidInput("image size must be positive".into()));
        }
        validate_rigid(&self.world_to_camera)
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        rotation_block(&self.world_to_camera)
    }

    pub fn translation(&self) -> Vec3 {
        let m = &self.world_to_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        let r = self.rotation();
        let t = self.translation();
        let mut c = [0.0; 3];
        for (j, cj) in c.iter_mut().enumerate() {
            *cj = -(0..3).map(|i| r[i][j] * t[i]).sum::<f64>();
        }
        c
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let m = &self.world_to_camera;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }

    /// Pinhole projection; `depth ≤ 0` marks a point behind the camera, in
    /// which case the pixel is meaningless.
    pub fn project(&self, p: Vec3) -> Projection {
        let c = self.to_camera(p);
        let depth = c[2];
        if depth <= 0.0 {
            return Projection {
                pixel: [f64::NAN, f64::NAN],
                depth,
            };
        }
        Projection {
            pixel: [self.fx * c[0] / depth + self.cx, self.fy * c[1] / depth + self.cy],
            depth,
        }
    }

    /// World point at camera-frame depth `depth` behind pixel `pixel`.
    pub fn unproject(&self, pixel: [f64; 2], depth: f64) -> Vec3 {
        let c = [
            (pixel[0] - self.cx) / self.fx * depth,
            (pixel[1] - self.cy) / self.fy * depth,
            depth,
        ];
        let r = self.rotation();
        let q = sub(c, self.translation());
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..3).map(|i| r[i][j] * q[i]).sum();
        }
        out
    }

    /// Unit world-space direction through the center of pixel `(u, v)`.
    pub fn ray_direction(&self, u: usize, v: usize) -> Vec3 {
        let p = self.unproject([u as f64 + 0.5, v as f64 + 0.5], 1.0);
        normalize(sub(p, self.center())).expect("pixel ray has nonzero length")
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

pub fn rotation_block(m: &Mat4) -> [[f64; 3]; 3] {
    [
        [m[0][0], m[0][1], m[0][2]],
        [m[1][0], m[1][1], m[1][2]],
        [m[2][0], m[2][1], m[2][2]],
    ]
}

/// Checks that `m` is a rigid transform: orthonormal rotation block with
/// determinant +1 and last row `(0, 0, 0, 1)`.
pub fn validate_rigid(m: &Mat4) -> Result<()> {
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(FinvError::InvalidInput("pose contains non-finite entries".into()));
    }
    let r = rotation_block(m);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((rtr - target).abs());
        }
    }
    let det = dot(r[0], cross(r[1], r[2]));
    if worst >= 1e-9 || (det - 1.0).abs() >= 1e-9 {
        return Err(FinvError::InvalidInput(format!(
            "pose rotation is not a proper rotation (orthonormality error {worst:e}, det {det})"
        )));
    }
    if m[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(FinvError::InvalidInput("pose last row must be (0, 0, 0, 1)".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub samples: usize,
    pub density: f64,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            density: 25.0,
            background: [0.0; 3],
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || !(self.density > 0.0) {
            return Err(FinvError::InvalidConfig(
                "renderer needs samples ≥ 1 and density > 0".into(),
            ));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(FinvError::InvalidConfig("background color outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Row-major image with `H·W` mask values and `H·W·3` colors.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub mask: Vec<f64>,
}

/// Ray-cube intersection `[t_near, t_far]` for the unit cube, if nonempty.
pub fn intersect_unit_cube(origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a].abs() > 0.5 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut lo, mut hi) = ((-0.5 - origin[a]) * inv, (0.5 - origin[a]) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t1 > t0 + 1e-12).then_some((t0, t1))
}

/// Trilinear interpolation weights of point `p` on a grid of size `v`, as
/// `(vertex index, weight)` pairs; points outside the cube are clamped.
pub fn trilinear_weights(p: Vec3, v: usize) -> [(usize, f64); 8] {
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let u = ((p[a] + 0.5) * (v - 1) as f64).clamp(0.0, (v - 1) as f64);
        let i0 = (u.floor() as usize).min(v - 2);
        base[a] = i0;
        frac[a] = u - i0 as f64;
    }
    let mut out = [(0usize, 0.0); 8];
    for (corner, slot) in out.iter_mut().enumerate() {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = [dx, dy, dz]
            .iter()
            .zip(&frac)
            .map(|(&d, &f)| if d == 1 { f } else { 1.0 - f })
            .product();
        let idx = ((base[2] + dz) * v + base[1] + dy) * v + base[0] + dx;
        *slot = (idx, w);
    }
    out
}

/// Precomputed sampling for one camera and grid size.
#[derive(Clone, Debug)]
pub struct RayPlan {
    pub width: usize,
    pub height: usize,
    pub grid_size: usize,
    pub samples: usize,
    /// Pixel index of every ray that hits the cube.
    pub hit_pixels: Vec<usize>,
    /// `[rays·samples, V³]` trilinear sampling matrix.
    pub interp: Arc<SparseMatrix>,
    /// `[rays, samples]` per-sample optical depth of unit occupancy, `σ·Δ`.
    pub extinction: Arc<Array>,
    /// `[H·W, rays]` placement of ray results into the image.
    pub scatter: Arc<SparseMatrix>,
    pub background: [f64; 3],
}

impl RayPlan {
    pub fn new(camera: &Camera, grid_size: usize, config: &RenderConfig) -> Result<Self> {
        camera.validate()?;
        config.validate()?;
        if grid_size < 2 {
            return Err(FinvError::InvalidInput("grid size must be at least 2".into()));
        }
        let s = config.samples;
        let origin = camera.center();
        let mut hit_pixels = Vec::new();
        let mut rows = Vec::new();
        let mut extinction = Vec::new();
        for v in 0..camera.height {
            for u in 0..camera.width {
                let dir = camera.ray_direction(u, v);
                let Some((t0, t1)) = intersect_unit_cube(origin, dir) else {
                    continue;
                };
                let delta = (t1 - t0) / s as f64;
                hit_pixels.push(v * camera.width + u);
                for i in 0..s {
                    let t = t0 + (i as f64 + 0.5) * delta;
                    let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
                    rows.push(trilinear_weights(p, grid_size).to_vec());
                    extinction.push(config.density * delta);
                }
            }
        }
        let n_rays = hit_pixels.len();
        let interp = SparseMatrix::from_rows(grid_size.pow(3), rows);
        let mut scatter_rows = vec![Vec::new(); camera.pixel_count()];
        for (r, &p) in hit_pixels.iter().enumerate() {
            scatter_rows[p].push((r, 1.0));
        }
        let scatter = SparseMatrix::from_rows(n_rays, scatter_rows);
        Ok(Self {
            width: camera.width,
            height: camera.height,
            grid_size,
            samples: s,
            hit_pixels,
            interp: Arc::new(interp),
            extinction: Arc::new(Array::new(vec![n_rays, s], extinction).expect("extinction shape")),
            scatter: Arc::new(scatter),
            background: config.background,
        })
    }

    pub fn ray_count(&self) -> usize {
        self.hit_pixels.len()
    }
}

/// Per-ray compositing. `logits: [R, S]`, `colors: [R, S, 3]` (optional),
/// `extinction: [R, S]`. Returns `(rgb [R, 3], mask [R])`.
///
/// With `a_i = sigmoid(logit_i)·extinction_i`, transmittance is
/// `T_i = exp(-Σ_{j<i} a_j)`, opacity `α_i = 1 - exp(-a_i)`, and the mask is
/// `1 - exp(-Σ a_i)`.
pub fn composite_samples(
    g: &mut Graph,
    logits: NodeId,
    colors: Option<NodeId>,
    extinction: NodeId,
) -> Result<(Option<NodeId>, NodeId)> {
    let occ = g.sigmoid(logits)?;
    let a = g.mul(occ, extinction)?;
    let depth = g.sum_axis(a, 1)?;
    let neg_depth = g.scale(depth, -1.0)?;
    let survive = g.exp(neg_depth)?;
    let mask = g.one_minus(survive)?;
    let rgb = match colors {
        Some(c) => {
            let shape = g.shape(a).to_vec();
            let cum = g.cumsum_exclusive(a)?;
            let neg_cum = g.scale(cum, -1.0)?;
            let trans = g.exp(neg_cum)?;
            let neg_a = g.scale(a, -1.0)?;
            let keep = g.exp(neg_a)?;
            let alpha = g.one_minus(keep)?;
            let w = g.mul(trans, alpha)?;
            let w = g.reshape(w, &[shape[0], shape[1], 1])?;
            let weighted = g.mul(w, c)?;
            Some(g.sum_axis(weighted, 1)?)
        }
        None => None,
    };
    Ok((rgb, mask))
}

/// Image nodes for field nodes `logits: [V³]` and `colors: [V³, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct ImageNodes {
    /// `[H·W, 3]`, present when colors were supplied.
    pub rgb: Option<NodeId>,
    /// `[H·W]`.
    pub mask: NodeId,
}

pub fn composite_nodes(g: &mut Graph, plan: &RayPlan, logits: NodeId, colors: Option<NodeId>) -> Result<ImageNodes> {
    let (r, s) = (plan.ray_count(), plan.samples);
    let pixels = plan.width * plan.height;
    if r == 0 {
        // Nothing hits the cube: constant background and empty mask.
        let mask = g.constant(Array::zeros(&[pixels]));
        let rgb = colors.map(|_| {
            let bg = Array::from_fn(&[pixels, 3], |i| plan.background[i % 3]);
            g.constant(bg)
        });
        return Ok(ImageNodes { rgb, mask });
    }
    let logits = g.reshape(logits, &[plan.grid_size.pow(3)])?;
    let sampled = g.sparse_matmul(Arc::clone(&plan.interp), logits)?;
    let sampled = g.reshape(sampled, &[r, s])?;
    let sampled_colors = match colors {
        Some(c) => {
            let c = g.sparse_matmul(Arc::clone(&plan.interp), c)?;
            Some(g.reshape(c, &[r, s, 3])?)
        }
        None => None,
    };
    let ext = g.constant_shared(Arc::clone(&plan.extinction));
    let (ray_rgb, ray_mask) = composite_samples(g, sampled, sampled_colors, ext)?;
    let mask = g.sparse_matmul(Arc::clone(&plan.scatter), ray_mask)?;
    let rgb = match ray_rgb {
        Some(c) => {
            let mut rgb = g.sparse_matmul(Arc::clone(&plan.scatter), c)?;
            if plan.background != [0.0; 3] {
                let empty = g.one_minus(mask)?;
                let empty = g.reshape(empty, &[pixels, 1])?;
                let bg = g.constant(Array::vector(plan.background.to_vec()));
                let fill = g.mul(empty, bg)?;
                rgb = g.add(rgb, fill)?;
            }
            Some(rgb)
        }
        None => None,
    };
    Ok(ImageNodes { rgb, mask })
}

/// Renders fixed fields from `camera`.
pub fn render(fields: &VoxelFields, camera: &Camera, config: &RenderConfig) -> Result<RenderOutput> {
    fields.validate()?;
    let plan = RayPlan::new(camera, fields.grid_size, config)?;
    render_with_plan(fields, &plan)
}

pub fn render_with_plan(fields: &VoxelFields, plan: &RayPlan) -> Result<RenderOutput> {
    let n = fields.vertex_count();
    let mut g = Graph::new();
    let logits = g.constant(Array::vector(fields.occupancy_logits.clone()));
    let colors = g.constant(Array::new(vec![n, 3], fields.colors.clone())?);
    let nodes = composite_nodes(&mut g, plan, logits, Some(colors))?;
    let values = diff::evaluate(&g, &LeafValues::new())?;
    let rgb = nodes.rgb.expect("colors supplied");
    Ok(RenderOutput {
        width: plan.width,
        height: plan.height,
        rgb: values.get(rgb).data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        mask: values
            .get(nodes.mask)
            .data()
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect(),
    })
}

/// Decodes `w` with `params` on a `grid_size³` grid and renders it.
pub fn render_object(
    w: &LatentPair,
    params: &GeneratorParams,
    camera: &Camera,
    grid_size: usize,
    config: &RenderConfig,
) -> Result<RenderOutput> {
    let fields = generator::decode(w, params, grid_size)?;
    render(&fields, camera, config)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer size");
    let img: RgbImage = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let i = 3 * (y as usize * width + x as usize);
        Rgb([quantize(rgb[i]), quantize(rgb[i + 1]), quantize(rgb[i + 2])])
    });
    img.save(path).map_err(|e| FinvError::malformed("png", path, e))
}

pub fn save_gray_png(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height, "gray buffer size");
    let img: GrayImage = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        Luma([quantize(values[y as usize * width + x as usize])])
    });
    img.save(path).map_err(|e| FinvError::malformed("png", path, e))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(FinvError::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| FinvError::malformed("png", path, e))
}

/// Returns `(width, height, rgb in [0, 1])`.
pub fn load_rgb_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok((w as usize, h as usize, data))
}

pub fn load_gray_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok((w as usize, h as usize, data))
}
