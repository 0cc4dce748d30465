//! Loss terms over valid pixels and the composed reconstruction objectives.
//!
//! Every loss is available in two forms: a graph builder that takes a
//! predicted-image node, and a plain function on buffers that evaluates the
//! same graph on constants.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::{self, Array, Graph, LeafValues, NodeId, SparseMatrix};
use crate::error::{FinvError, Result};
use crate::generator::{self, Binding, BranchNodes, GeneratorParams, LatentPair};
use crate::harness::ObservationFrame;
use crate::renderer::{self, RayPlan, RenderConfig};

pub const MASK_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerceptualKind {
    /// Validity-weighted L1 over a Gaussian pyramid.
    Pyramid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda_mse: f64,
    pub mask_weight: f64,
    pub perceptual: PerceptualKind,
    pub pyramid_levels: usize,
    pub pyramid_sigma: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_mse: 1.0,
            mask_weight: 1.0,
            perceptual: PerceptualKind::Pyramid,
            pyramid_levels: 3,
            pyramid_sigma: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mse >= 0.0 && self.mask_weight >= 0.0) {
            return Err(FinvError::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if self.pyramid_levels == 0 || !(self.pyramid_sigma > 0.0) {
            return Err(FinvError::InvalidConfig("pyramid needs ≥ 1 level and σ > 0".into()));
        }
        Ok(())
    }
}

fn valid_count(valid: &[f64]) -> Result<f64> {
    let n: f64 = valid.iter().sum();
    if n <= 0.0 {
        return Err(FinvError::InvalidInput("no valid pixels".into()));
    }
    Ok(n)
}

/// Mean binary cross-entropy over valid pixels of `pred: [P]` against
/// `gt`, with the prediction clamped to `[1e-6, 1 - 1e-6]`.
pub fn mask_loss_node(g: &mut Graph, pred: NodeId, gt: &[f64], valid: &[f64]) -> Result<NodeId> {
    let n = valid_count(valid)?;
    let pos = g.constant(Array::vector(gt.iter().zip(valid).map(|(t, v)| -t * v / n).collect()));
    let neg = g.constant(Array::vector(
        gt.iter().zip(valid).map(|(t, v)| -(1.0 - t) * v / n).collect(),
    ));
    let p = g.clamp(pred, MASK_CLAMP, 1.0 - MASK_CLAMP)?;
    let log_p = g.log(p)?;
    let q = g.one_minus(p)?;
    let log_q = g.log(q)?;
    let a = g.mul(pos, log_p)?;
    let b = g.mul(neg, log_q)?;
    let terms = g.add(a, b)?;
    Ok(g.sum(terms)?)
}

/// Mean squared error over valid pixel-channel entries of `pred: [P, 3]`.
pub fn mse_loss_node(g: &mut Graph, pred: NodeId, gt: &Arc<Array>, valid: &[f64]) -> Result<NodeId> {
    let n = valid_count(valid)?;
    let target = g.constant_shared(Arc::clone(gt));
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    let weights = g.constant(Array::new(
        vec![valid.len(), 1],
        valid.iter().map(|v| v / (3.0 * n)).collect(),
    )?);
    let weighted = g.mul(sq, weights)?;
    Ok(g.sum(weighted)?)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Blur-then-subsample operator from a `w × h` image to `⌈w/2⌉ × ⌈h/2⌉`,
/// with kernel weights renormalized at the image border.
pub fn downsample_operator(width: usize, height: usize, sigma: f64) -> (SparseMatrix, usize, usize) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (ow, oh) = (width.div_ceil(2), height.div_ceil(2));
    let mut rows = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let (cx, cy) = (2 * ox as i64, 2 * oy as i64);
            let mut row = Vec::new();
            let mut total = 0.0;
            for dy in -radius..=radius {
                let y = cy + dy;
                if y < 0 || y >= height as i64 {
                    continue;
                }
                for dx in -radius..=radius {
                    let x = cx + dx;
                    if x < 0 || x >= width as i64 {
                        continue;
                    }
                    let w = kernel[(dy + radius) as usize] * kernel[(dx + radius) as usize];
                    total += w;
                    row.push((y as usize * width + x as usize, w));
                }
            }
            for e in &mut row {
                e.1 /= total;
            }
            rows.push(row);
        }
    }
    (SparseMatrix::from_rows(width * height, rows), ow, oh)
}

/// Pluggable perceptual distance, prepared for one target image.
pub trait PerceptualLoss: Send + Sync + std::fmt::Debug {
    /// Loss node for a predicted image node of shape `[H·W, 3]`.
    fn loss_node(&self, g: &mut Graph, pred: NodeId) -> Result<NodeId>;
}

/// `Σ_l Σ |P_l((pred − gt)·v)| / (3 Σ P_l(v))` where `P_l` is the `l`-fold
/// blur-and-subsample operator (`P_0` the identity) and `v` the validity
/// mask. Each level is the validity-weighted mean absolute difference of
/// the normalized-convolution pyramids, so a constant offset `c` costs `c`
/// per level.
#[derive(Debug)]
pub struct PyramidLoss {
    target: Arc<Array>,
    valid: Arc<Array>,
    operators: Vec<Arc<SparseMatrix>>,
    level_scales: Vec<f64>,
}

impl PyramidLoss {
    pub fn new(
        width: usize,
        height: usize,
        target: Arc<Array>,
        valid: &[f64],
        levels: usize,
        sigma: f64,
    ) -> Result<Self> {
        let n = valid_count(valid)?;
        let mut operators = Vec::new();
        let mut level_scales = vec![1.0 / (3.0 * n)];
        let (mut w, mut h) = (width, height);
        let mut v = valid.to_vec();
        for _ in 1..levels {
            let (op, ow, oh) = downsample_operator(w, h, sigma);
            let mut next = vec![0.0; ow * oh];
            for (r, out) in next.iter_mut().enumerate() {
                *out = op.row(r).map(|(c, x)| x * v[c]).sum();
            }
            v = next;
            level_scales.push(1.0 / (3.0 * v.iter().sum::<f64>()));
            operators.push(Arc::new(op));
            (w, h) = (ow, oh);
        }
        Ok(Self {
            target,
            valid: Arc::new(Array::new(vec![valid.len(), 1], valid.to_vec())?),
            operators,
            level_scales,
        })
    }

    pub fn levels(&self) -> usize {
        self.level_scales.len()
    }

    /// Per-level loss nodes.
    pub fn level_nodes(&self, g: &mut Graph, pred: NodeId) -> Result<Vec<NodeId>> {
        let target = g.constant_shared(Arc::clone(&self.target));
        let valid = g.constant_shared(Arc::clone(&self.valid));
        let d = g.sub(pred, target)?;
        let mut e = g.mul(d, valid)?;
        let mut out = Vec::with_capacity(self.levels());
        for (l, &scale) in self.level_scales.iter().enumerate() {
            if l > 0 {
                e = g.sparse_matmul(Arc::clone(&self.operators[l - 1]), e)?;
            }
            let a = g.abs(e)?;
            let s = g.sum(a)?;
            out.push(g.scale(s, scale)?);
        }
        Ok(out)
    }
}

impl PerceptualLoss for PyramidLoss {
    fn loss_node(&self, g: &mut Graph, pred: NodeId) -> Result<NodeId> {
        let levels = self.level_nodes(g, pred)?;
        let mut total = levels[0];
        for &l in &levels[1..] {
            total = g.add(total, l)?;
        }
        Ok(total)
    }
}

fn make_perceptual(
    config: &ObjectiveConfig,
    width: usize,
    height: usize,
    target: Arc<Array>,
    valid: &[f64],
) -> Result<Arc<dyn PerceptualLoss>> {
    match config.perceptual {
        PerceptualKind::Pyramid => Ok(Arc::new(PyramidLoss::new(
            width,
            height,
            target,
            valid,
            config.pyramid_levels,
            config.pyramid_sigma,
        )?)),
    }
}

fn eval_scalar(g: &Graph, node: NodeId) -> Result<f64> {
    Ok(diff::evaluate(g, &LeafValues::new())?.scalar(node))
}

fn image_array(rgb: &[f64]) -> Result<Array> {
    Ok(Array::new(vec![rgb.len() / 3, 3], rgb.to_vec())?)
}

pub fn mask_loss(pred: &[f64], gt: &[f64], valid: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), gt.len(), valid.len(), 1)?;
    let mut g = Graph::new();
    let p = g.constant(Array::vector(pred.to_vec()));
    let node = mask_loss_node(&mut g, p, gt, valid)?;
    eval_scalar(&g, node)
}

pub fn mse_loss(pred: &[f64], gt: &[f64], valid: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), gt.len(), valid.len(), 3)?;
    let mut g = Graph::new();
    let p = g.constant(image_array(pred)?);
    let node = mse_loss_node(&mut g, p, &Arc::new(image_array(gt)?), valid)?;
    eval_scalar(&g, node)
}

/// Perceptual proxy between two `width × height` RGB images.
pub fn perceptual_loss(
    pred: &[f64],
    gt: &[f64],
    valid: &[f64],
    width: usize,
    height: usize,
    config: &ObjectiveConfig,
) -> Result<f64> {
    check_lengths(pred.len(), gt.len(), valid.len(), 3)?;
    if valid.len() != width * height {
        return Err(FinvError::InvalidInput("image size does not match buffers".into()));
    }
    let loss = make_perceptual(config, width, height, Arc::new(image_array(gt)?), valid)?;
    let mut g = Graph::new();
    let p = g.constant(image_array(pred)?);
    let node = loss.loss_node(&mut g, p)?;
    eval_scalar(&g, node)
}

fn check_lengths(pred: usize, gt: usize, valid: usize, channels: usize) -> Result<()> {
    if pred != gt || pred != valid * channels {
        return Err(FinvError::InvalidInput(format!(
            "loss inputs of lengths {pred}, {gt} and {valid} valid pixels"
        )));
    }
    Ok(())
}

/// A frame with everything its loss terms need precomputed: the ray plan
/// for its camera, the composited target and the perceptual operator.
#[derive(Clone, Debug)]
pub struct PreparedFrame {
    pub index: usize,
    pub plan: Arc<RayPlan>,
    pub target_rgb: Arc<Array>,
    pub target_mask: Vec<f64>,
    pub valid: Vec<f64>,
    pub perceptual: Arc<dyn PerceptualLoss>,
}

impl PreparedFrame {
    pub fn new(
        frame: &ObservationFrame,
        grid_size: usize,
        render: &RenderConfig,
        config: &ObjectiveConfig,
    ) -> Result<Self> {
        frame.validate()?;
        config.validate()?;
        let plan = RayPlan::new(&frame.camera, grid_size, render)?;
        let bg = render.background;
        let composited: Vec<f64> = frame
            .rgb
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let m = frame.object_mask[i / 3];
                m * c + (1.0 - m) * bg[i % 3]
            })
            .collect();
        let target_rgb = Arc::new(image_array(&composited)?);
        let perceptual = make_perceptual(
            config,
            frame.width(),
            frame.height(),
            Arc::clone(&target_rgb),
            &frame.validity_mask,
        )
        .map_err(|_| FinvError::InvalidInput(format!("frame {} has no valid pixels", frame.index)))?;
        Ok(Self {
            index: frame.index,
            plan: Arc::new(plan),
            target_rgb,
            target_mask: frame.object_mask.clone(),
            valid: frame.validity_mask.clone(),
            perceptual,
        })
    }

    pub fn prepare_all(
        frames: &[ObservationFrame],
        grid_size: usize,
        render: &RenderConfig,
        config: &ObjectiveConfig,
    ) -> Result<Vec<Self>> {
        frames.iter().map(|f| Self::new(f, grid_size, render, config)).collect()
    }
}

/// Loss nodes of one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameLosses {
    pub perceptual: NodeId,
    pub mask: NodeId,
    pub mse: NodeId,
}

/// Renders field nodes `logits: [V³]`/`[V³, 1]` and `colors: [V³, 3]`
/// through `frame` and attaches its loss terms.
pub fn frame_loss_nodes(g: &mut Graph, frame: &PreparedFrame, logits: NodeId, colors: NodeId) -> Result<FrameLosses> {
    let img = renderer::composite_nodes(g, &frame.plan, logits, Some(colors))?;
    let rgb = img.rgb.expect("colors supplied");
    Ok(FrameLosses {
        perceptual: frame.perceptual.loss_node(g, rgb)?,
        mask: mask_loss_node(g, img.mask, &frame.target_mask, &frame.valid)?,
        mse: mse_loss_node(g, rgb, &frame.target_rgb, &frame.valid)?,
    })
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut total = nodes[0];
    for &n in &nodes[1..] {
        total = g.add(total, n)?;
    }
    Ok(total)
}

/// Graph of the decoder, renderer and all loss terms over a set of frames.
#[derive(Clone, Debug)]
pub struct ObjectiveGraph {
    pub graph: Graph,
    pub w_geo: NodeId,
    pub w_tex: NodeId,
    pub phi: BranchNodes,
    pub theta: BranchNodes,
    pub latent_binding: Binding,
    /// `Σ_t` perceptual loss.
    pub perceptual: NodeId,
    /// `Σ_t` mask loss: the geometry refinement objective.
    pub mask: NodeId,
    pub mse: NodeId,
    /// `Σ_t perceptual + mask_weight · mask`.
    pub phase1: NodeId,
    /// `Σ_t perceptual + λ_MSE · mse`: the texture refinement objective.
    pub texture: NodeId,
    pub per_frame: Vec<FrameLosses>,
}

/// How each input enters an [`ObjectiveGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bindings {
    pub latent: Binding,
    pub phi: Binding,
    pub theta: Binding,
}

impl Bindings {
    /// Latent inversion with a frozen generator.
    pub const INVERSION: Self = Self {
        latent: Binding::Trainable,
        phi: Binding::Constant,
        theta: Binding::Constant,
    };
    /// Generator refinement around a fixed latent.
    pub const REFINE: Self = Self {
        latent: Binding::Constant,
        phi: Binding::Trainable,
        theta: Binding::Trainable,
    };
    /// Texture-only refinement once geometry is fixed.
    pub const REFINE_TEXTURE: Self = Self {
        latent: Binding::Constant,
        phi: Binding::Constant,
        theta: Binding::Trainable,
    };
}

impl ObjectiveGraph {
    /// Builds the graph. Inputs bound as constants take their values from
    /// `w` and `params`; the rest are supplied through [`Self::leaf_values`].
    pub fn build(
        params: &GeneratorParams,
        w: &LatentPair,
        frames: &[PreparedFrame],
        config: &ObjectiveConfig,
        bindings: Bindings,
    ) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| FinvError::InvalidInput("objective needs at least one frame".into()))?;
        let arch = &params.arch;
        let grid = first.plan.grid_size;
        if frames.iter().any(|f| f.plan.grid_size != grid) {
            return Err(FinvError::InvalidInput(
                "frames prepared for different grid sizes".into(),
            ));
        }
        let mut g = Graph::new();
        let feats = g.constant_shared(generator::grid_features(grid, arch.fourier_bands));
        let (w_geo, w_tex) = match bindings.latent {
            Binding::Constant => (
                g.constant(Array::vector(w.geo.clone())),
                g.constant(Array::vector(w.tex.clone())),
            ),
            b => {
                let diff = b == Binding::Trainable;
                (
                    g.leaf("w_geo", &[arch.d_latent], diff),
                    g.leaf("w_tex", &[arch.d_latent], diff),
                )
            }
        };
        let phi = generator::bind_branch(&mut g, &params.phi, "phi", bindings.phi);
        let theta = generator::bind_branch(&mut g, &params.theta, "theta", bindings.theta);
        let logits = generator::geometry_nodes(&mut g, feats, w_geo, &phi)?;
        let colors = generator::texture_nodes(&mut g, feats, w_geo, w_tex, &theta)?;
        let per_frame = frames
            .iter()
            .map(|f| frame_loss_nodes(&mut g, f, logits, colors))
            .collect::<Result<Vec<_>>>()?;
        let perceptual = sum_nodes(&mut g, &per_frame.iter().map(|l| l.perceptual).collect::<Vec<_>>())?;
        let mask = sum_nodes(&mut g, &per_frame.iter().map(|l| l.mask).collect::<Vec<_>>())?;
        let mse = sum_nodes(&mut g, &per_frame.iter().map(|l| l.mse).collect::<Vec<_>>())?;
        let weighted_mask = g.scale(mask, config.mask_weight)?;
        let phase1 = g.add(perceptual, weighted_mask)?;
        let weighted_mse = g.scale(mse, config.lambda_mse)?;
        let texture = g.add(perceptual, weighted_mse)?;
        Ok(Self {
            graph: g,
            w_geo,
            w_tex,
            phi,
            theta,
            latent_binding: bindings.latent,
            perceptual,
            mask,
            mse,
            phase1,
            texture,
            per_frame,
        })
    }

    pub fn leaf_values(&self, w: &LatentPair, params: &GeneratorParams) -> LeafValues {
        let mut values = LeafValues::new();
        if self.latent_binding != Binding::Constant {
            values.insert(self.w_geo, Array::vector(w.geo.clone()));
            values.insert(self.w_tex, Array::vector(w.tex.clone()));
        }
        self.phi.insert_values(&params.phi, &mut values);
        self.theta.insert_values(&params.theta, &mut values);
        values
    }

    pub fn evaluate(&self, w: &LatentPair, params: &GeneratorParams) -> Result<diff::Values> {
        Ok(diff::evaluate(&self.graph, &self.leaf_values(w, params))?)
    }
}

/// Scalar values of the objective terms for one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValues {
    pub perceptual: f64,
    pub mask: f64,
    pub mse: f64,
    pub phase1: f64,
    pub texture: f64,
}

impl ObjectiveGraph {
    pub fn values(&self, v: &diff::Values) -> ObjectiveValues {
        ObjectiveValues {
            perceptual: v.scalar(self.perceptual),
            mask: v.scalar(self.mask),
            mse: v.scalar(self.mse),
            phase1: v.scalar(self.phase1),
            texture: v.scalar(self.texture),
        }
    }
}

fn evaluate_terms(
    params: &GeneratorParams,
    w: &LatentPair,
    frames: &[PreparedFrame],
    config: &ObjectiveConfig,
) -> Result<ObjectiveValues> {
    let bindings = Bindings {
        latent: Binding::Constant,
        phi: Binding::Frozen,
        theta: Binding::Frozen,
    };
    let og = ObjectiveGraph::build(params, w, frames, config, bindings)?;
    let v = og.evaluate(w, params)?;
    Ok(og.values(&v))
}

/// `Σ_t [perceptual + mask_weight · mask]`.
pub fn phase1_objective(
    w: &LatentPair,
    params: &GeneratorParams,
    frames: &[PreparedFrame],
    config: &ObjectiveConfig,
) -> Result<f64> {
    Ok(evaluate_terms(params, w, frames, config)?.phase1)
}

/// `Σ_t mask`; depends only on `w_geo` and `phi`.
pub fn geometry_refine_objective(
    w: &LatentPair,
    params: &GeneratorParams,
    frames: &[PreparedFrame],
    config: &ObjectiveConfig,
) -> Result<f64> {
    Ok(evaluate_terms(params, w, frames, config)?.mask)
}

/// `Σ_t [perceptual + λ_MSE · mse]`.
pub fn texture_refine_objective(
    w: &LatentPair,
    params: &GeneratorParams,
    frames: &[PreparedFrame],
    config: &ObjectiveConfig,
) -> Result<f64> {
    Ok(evaluate_terms(params, w, frames, config)?.texture)
}

pub fn objective_values(
    w: &LatentPair,
    params: &GeneratorParams,
    frames: &[PreparedFrame],
    config: &ObjectiveConfig,
) -> Result<ObjectiveValues> {
    evaluate_terms(params, w, frames, config)
}
