//! The object prior: two coordinate-conditioned MLP decoders.
//!
//! The geometry branch maps `[fourier(x); w_geo]` to an occupancy logit and
//! is parameterized by `phi`; the texture branch maps
//! `[fourier(x); w_geo; w_tex]` to an RGB color and is parameterized by
//! `theta`. Occupancy never depends on `w_tex` or `theta`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{self, Array, Graph, LeafValues, NodeId, SparseMatrix};
use crate::error::{FinvError, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"FINVPRIOR1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub d_latent: usize,
    pub hidden: usize,
    /// Number of hidden tanh layers.
    pub layers: usize,
    pub fourier_bands: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_latent: 32,
            hidden: 64,
            layers: 3,
            fourier_bands: 4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(FinvError::InvalidConfig(
                "decoder needs at least one hidden layer".into(),
            ));
        }
        if self.hidden == 0 || self.d_latent == 0 {
            return Err(FinvError::InvalidConfig(
                "hidden width and latent size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of the positional encoding: `x` plus a sine and cosine per
    /// coordinate and band.
    pub fn feature_dim(&self) -> usize {
        3 + 6 * self.fourier_bands
    }

    fn branch_count(&self, latent: usize, out: usize) -> usize {
        let h = self.hidden;
        (self.feature_dim() + latent) * h + h + (self.layers - 1) * (h * h + h) + h * out + out
    }

    pub fn geometry_param_count(&self) -> usize {
        self.branch_count(self.d_latent, 1)
    }

    pub fn texture_param_count(&self) -> usize {
        self.branch_count(2 * self.d_latent, 3)
    }
}

/// The per-object optimization variable `(w_geo, w_tex)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPair {
    pub geo: Vec<f64>,
    pub tex: Vec<f64>,
}

impl LatentPair {
    pub fn zeros(d: usize) -> Self {
        Self {
            geo: vec![0.0; d],
            tex: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.geo.len()
    }

    pub fn is_finite(&self) -> bool {
        self.geo.iter().chain(&self.tex).all(|v| v.is_finite())
    }

    /// Concatenation `[w_geo; w_tex]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.geo.iter().chain(&self.tex).copied().collect()
    }

    pub fn from_slice(values: &[f64]) -> Self {
        let d = values.len() / 2;
        Self {
            geo: values[..d].to_vec(),
            tex: values[d..].to_vec(),
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.geo.iter().chain(&self.tex).map(|v| v * v).sum()
    }
}

/// Weights of one decoder branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub coord_weight: Array,
    pub latent_weight: Array,
    pub bias: Array,
    pub hidden: Vec<(Array, Array)>,
    pub out_weight: Array,
    pub out_bias: Array,
}

impl Branch {
    fn init(arch: &ArchConfig, latent: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let h = arch.hidden;
        let f = arch.feature_dim();
        let mut gaussian = |shape: &[usize], std: f64| {
            Array::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                std * z
            })
        };
        let first_std = 1.0 / ((f + latent) as f64).sqrt();
        let hidden_std = 1.0 / (h as f64).sqrt();
        let coord_weight = gaussian(&[f, h], first_std);
        let latent_weight = gaussian(&[latent, h], first_std);
        let hidden = (1..arch.layers)
            .map(|_| (gaussian(&[h, h], hidden_std), Array::zeros(&[h])))
            .collect();
        let out_weight = gaussian(&[h, out], hidden_std);
        Self {
            coord_weight,
            latent_weight,
            bias: Array::zeros(&[h]),
            hidden,
            out_weight,
            out_bias: Array::zeros(&[out]),
        }
    }

    pub fn tensors(&self) -> Vec<&Array> {
        let mut v = vec![&self.coord_weight, &self.latent_weight, &self.bias];
        for (w, b) in &self.hidden {
            v.push(w);
            v.push(b);
        }
        v.push(&self.out_weight);
        v.push(&self.out_bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        let mut v = vec![&mut self.coord_weight, &mut self.latent_weight, &mut self.bias];
        for (w, b) in &mut self.hidden {
            v.push(w);
            v.push(b);
        }
        v.push(&mut self.out_weight);
        v.push(&mut self.out_bias);
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["coord_weight".to_string(), "latent_weight".into(), "bias".into()];
        for i in 0..self.hidden.len() {
            names.push(format!("hidden{i}_weight"));
            names.push(format!("hidden{i}_bias"));
        }
        names.push("out_weight".into());
        names.push("out_bias".into());
        names
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    fn from_tensors(arch: &ArchConfig, tensors: Vec<Array>, latent: usize, out: usize) -> Result<Self> {
        let expected = 5 + 2 * (arch.layers - 1);
        if tensors.len() != expected {
            return Err(FinvError::InvalidInput(format!(
                "branch has {} tensors, architecture needs {expected}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut next = |shape: &[usize]| -> Result<Array> {
            let t = it.next().expect("tensor count checked");
            if t.shape() != shape {
                return Err(FinvError::InvalidInput(format!(
                    "tensor shape {:?} does not match architecture {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t)
        };
        let (h, f) = (arch.hidden, arch.feature_dim());
        let coord_weight = next(&[f, h])?;
        let latent_weight = next(&[latent, h])?;
        let bias = next(&[h])?;
        let mut hidden = Vec::new();
        for _ in 1..arch.layers {
            let w = next(&[h, h])?;
            let b = next(&[h])?;
            hidden.push((w, b));
        }
        let out_weight = next(&[h, out])?;
        let out_bias = next(&[out])?;
        Ok(Self {
            coord_weight,
            latent_weight,
            bias,
            hidden,
            out_weight,
            out_bias,
        })
    }
}

/// Geometry (`phi`) and texture (`theta`) decoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub arch: ArchConfig,
    pub phi: Branch,
    pub theta: Branch,
}

impl GeneratorParams {
    pub fn param_count(&self) -> usize {
        self.phi.param_count() + self.theta.param_count()
    }

    pub fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.theta.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let check = |b: &Branch, latent, out| {
            Branch::from_tensors(&self.arch, b.tensors().into_iter().cloned().collect(), latent, out)
        };
        check(&self.phi, self.arch.d_latent, 1)?;
        check(&self.theta, 2 * self.arch.d_latent, 3)?;
        if !self.is_finite() {
            return Err(FinvError::InvalidInput("generator parameters are not finite".into()));
        }
        Ok(())
    }
}

/// Fan-in scaled Gaussian initialization with zero biases.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<GeneratorParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = Branch::init(arch, arch.d_latent, 1, &mut rng);
    let theta = Branch::init(arch, 2 * arch.d_latent, 3, &mut rng);
    Ok(GeneratorParams {
        arch: *arch,
        phi,
        theta,
    })
}

/// Diagonal Gaussian over latent pairs, standing in for the mapping networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSampler {
    pub mean_geo: Vec<f64>,
    pub mean_tex: Vec<f64>,
    pub scale_geo: Vec<f64>,
    pub scale_tex: Vec<f64>,
}

impl PriorSampler {
    pub fn standard(d: usize) -> Self {
        Self {
            mean_geo: vec![0.0; d],
            mean_tex: vec![0.0; d],
            scale_geo: vec![1.0; d],
            scale_tex: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean_geo.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.mean_tex.len() != d || self.scale_geo.len() != d || self.scale_tex.len() != d {
            return Err(FinvError::InvalidInput("sampler vectors differ in length".into()));
        }
        let ok = self
            .scale_geo
            .iter()
            .chain(&self.scale_tex)
            .all(|s| s.is_finite() && *s >= 0.0);
        if !ok {
            return Err(FinvError::InvalidInput(
                "sampler scales must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Per-coordinate mean and standard deviation of `table`, with the
    /// variance floored at `variance_floor`.
    pub fn fit(table: &[LatentPair], variance_floor: f64) -> Result<Self> {
        let first = table
            .first()
            .ok_or_else(|| FinvError::InvalidInput("cannot fit a sampler to an empty table".into()))?;
        let d = first.dim();
        let n = table.len() as f64;
        let stats = |pick: &dyn Fn(&LatentPair) -> &[f64]| {
            let mut mean = vec![0.0; d];
            for w in table {
                for (m, v) in mean.iter_mut().zip(pick(w)) {
                    *m += v / n;
                }
            }
            let mut var = vec![0.0; d];
            for w in table {
                for ((s, v), m) in var.iter_mut().zip(pick(w)).zip(&mean) {
                    *s += (v - m) * (v - m) / n;
                }
            }
            let scale = var.into_iter().map(|v: f64| v.max(variance_floor).sqrt()).collect();
            (mean, scale)
        };
        let (mean_geo, scale_geo) = stats(&|w| &w.geo);
        let (mean_tex, scale_tex) = stats(&|w| &w.tex);
        Ok(Self {
            mean_geo,
            mean_tex,
            scale_geo,
            scale_tex,
        })
    }

    /// `w = mean + scale ⊙ z` with `z ~ N(0, I)`, deterministic in `seed`.
    pub fn sample(&self, seed: u64) -> LatentPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |mean: &[f64], scale: &[f64]| -> Vec<f64> {
            mean.iter()
                .zip(scale)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + s * z
                })
                .collect()
        };
        let geo = draw(&self.mean_geo, &self.scale_geo);
        let tex = draw(&self.mean_tex, &self.scale_tex);
        LatentPair { geo, tex }
    }

    pub fn mean(&self) -> LatentPair {
        LatentPair {
            geo: self.mean_geo.clone(),
            tex: self.mean_tex.clone(),
        }
    }
}

/// Occupancy logits and colors on the `V³` vertices of the unit cube
/// `[-0.5, 0.5]³`. Vertex `(ix, iy, iz)` is stored at `(iz·V + iy)·V + ix`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFields {
    pub grid_size: usize,
    pub occupancy_logits: Vec<f64>,
    /// Three values per vertex, in `[0, 1]`.
    pub colors: Vec<f64>,
}

impl VoxelFields {
    pub fn constant(grid_size: usize, logit: f64, color: [f64; 3]) -> Self {
        let n = grid_size.pow(3);
        Self {
            grid_size,
            occupancy_logits: vec![logit; n],
            colors: color.iter().copied().cycle().take(3 * n).collect(),
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.grid_size.pow(3)
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.grid_size + iy) * self.grid_size + ix
    }

    pub fn occupancy(&self, i: usize) -> f64 {
        diff::sigmoid(self.occupancy_logits[i])
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        [self.colors[3 * i], self.colors[3 * i + 1], self.colors[3 * i + 2]]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertex_count();
        if self.grid_size < 2 || self.occupancy_logits.len() != n || self.colors.len() != 3 * n {
            return Err(FinvError::InvalidInput(format!(
                "voxel fields of size {} have {} logits and {} color values",
                self.grid_size,
                self.occupancy_logits.len(),
                self.colors.len()
            )));
        }
        if !self.occupancy_logits.iter().all(|v| v.is_finite()) {
            return Err(FinvError::InvalidInput("occupancy logits are not finite".into()));
        }
        if !self.colors.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(FinvError::InvalidInput("colors outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// World position of grid vertex `i` along one axis for a grid of size `v`.
pub fn vertex_coord(i: usize, v: usize) -> f64 {
    -0.5 + i as f64 / (v - 1) as f64
}

pub fn vertex_position(index: usize, v: usize) -> [f64; 3] {
    let ix = index % v;
    let iy = (index / v) % v;
    let iz = index / (v * v);
    [vertex_coord(ix, v), vertex_coord(iy, v), vertex_coord(iz, v)]
}

/// `[x, sin(2^k π x), cos(2^k π x)]` for `k < bands`, per coordinate.
pub fn fourier_features(p: [f64; 3], bands: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(3 + 6 * bands);
    f.extend_from_slice(&p);
    for k in 0..bands {
        let freq = std::f64::consts::PI * (1u64 << k) as f64;
        for &c in &p {
            f.push((freq * c).sin());
        }
        for &c in &p {
            f.push((freq * c).cos());
        }
    }
    f
}

/// Positional encodings of every grid vertex, shape `[V³, feature_dim]`.
pub fn grid_features(grid_size: usize, bands: usize) -> Arc<Array> {
    let n = grid_size.pow(3);
    let dim = 3 + 6 * bands;
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        data.extend(fourier_features(vertex_position(i, grid_size), bands));
    }
    Arc::new(Array::new(vec![n, dim], data).expect("feature grid shape"))
}

/// How a parameter tensor enters a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Baked into the graph; subgraphs depending only on it are folded.
    Constant,
    /// Supplied per evaluation, no gradient.
    Frozen,
    /// Supplied per evaluation, differentiated.
    Trainable,
}

/// Graph nodes holding one branch's tensors, in [`Branch::tensors`] order.
#[derive(Clone, Debug)]
pub struct BranchNodes {
    pub tensors: Vec<NodeId>,
    pub binding: Binding,
}

impl BranchNodes {
    /// Adds this branch's leaf values (nothing for constant bindings).
    pub fn insert_values(&self, branch: &Branch, values: &mut LeafValues) {
        if self.binding == Binding::Constant {
            return;
        }
        for (&id, t) in self.tensors.iter().zip(branch.tensors()) {
            values.insert(id, t.clone());
        }
    }
}

pub fn bind_branch(g: &mut Graph, branch: &Branch, prefix: &str, binding: Binding) -> BranchNodes {
    let tensors = branch
        .tensors()
        .into_iter()
        .zip(branch.tensor_names())
        .map(|(t, name)| match binding {
            Binding::Constant => g.constant(t.clone()),
            Binding::Frozen => g.leaf(format!("{prefix}.{name}"), t.shape(), false),
            Binding::Trainable => g.leaf(format!("{prefix}.{name}"), t.shape(), true),
        })
        .collect();
    BranchNodes { tensors, binding }
}

/// Runs one branch MLP over `features: [P, F]`.
///
/// `latents` has shape `[B, L]`. With `expand = None`, `B` must be 1 and the
/// latent is shared by every point; otherwise `expand` is a `[P, B]` selector
/// assigning each point its latent row.
pub fn branch_forward(
    g: &mut Graph,
    features: NodeId,
    latents: NodeId,
    expand: Option<Arc<SparseMatrix>>,
    nodes: &BranchNodes,
) -> Result<NodeId> {
    let t = &nodes.tensors;
    let coord = g.linear(features, t[0], t[2])?;
    let latent = g.matmul(latents, t[1])?;
    let latent = match expand {
        Some(m) => g.sparse_matmul(m, latent)?,
        None => latent,
    };
    let mut h = g.add_tanh(coord, latent)?;
    let hidden_layers = (t.len() - 5) / 2;
    for l in 0..hidden_layers {
        h = g.linear_tanh(h, t[3 + 2 * l], t[4 + 2 * l])?;
    }
    Ok(g.linear(h, t[t.len() - 2], t[t.len() - 1])?)
}

/// Occupancy logits `[P, 1]` from the geometry branch.
pub fn geometry_nodes(g: &mut Graph, features: NodeId, w_geo: NodeId, phi: &BranchNodes) -> Result<NodeId> {
    let d = g.shape(w_geo).iter().product::<usize>();
    let row = g.reshape(w_geo, &[1, d])?;
    branch_forward(g, features, row, None, phi)
}

/// Colors `[P, 3]` in `(0, 1)` from the texture branch.
pub fn texture_nodes(
    g: &mut Graph,
    features: NodeId,
    w_geo: NodeId,
    w_tex: NodeId,
    theta: &BranchNodes,
) -> Result<NodeId> {
    let d = g.shape(w_geo).iter().product::<usize>();
    let geo = g.reshape(w_geo, &[1, d])?;
    let tex = g.reshape(w_tex, &[1, d])?;
    let both = g.concat(&[geo, tex], 1)?;
    let logits = branch_forward(g, features, both, None, theta)?;
    Ok(g.sigmoid(logits)?)
}

/// Decodes `w` into voxel fields on a `grid_size³` grid.
pub fn decode(w: &LatentPair, params: &GeneratorParams, grid_size: usize) -> Result<VoxelFields> {
    let arch = &params.arch;
    if w.geo.len() != arch.d_latent || w.tex.len() != arch.d_latent {
        return Err(FinvError::InvalidInput(format!(
            "latent of size {}/{} for a decoder expecting {}",
            w.geo.len(),
            w.tex.len(),
            arch.d_latent
        )));
    }
    if grid_size < 2 {
        return Err(FinvError::InvalidInput("grid size must be at least 2".into()));
    }
    let mut g = Graph::new();
    let feats = g.constant_shared(grid_features(grid_size, arch.fourier_bands));
    let w_geo = g.constant(Array::vector(w.geo.clone()));
    let w_tex = g.constant(Array::vector(w.tex.clone()));
    let phi = bind_branch(&mut g, &params.phi, "phi", Binding::Constant);
    let theta = bind_branch(&mut g, &params.theta, "theta", Binding::Constant);
    let occ = geometry_nodes(&mut g, feats, w_geo, &phi)?;
    let colors = texture_nodes(&mut g, feats, w_geo, w_tex, &theta)?;
    let values = diff::evaluate(&g, &LeafValues::new())?;
    Ok(VoxelFields {
        grid_size,
        occupancy_logits: values.get(occ).data().to_vec(),
        colors: values.get(colors).data().to_vec(),
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchConfig,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

/// Writes `params` as magic line, little-endian header length, JSON header
/// and little-endian `f64` data in tensor order.
pub fn save_checkpoint(params: &GeneratorParams, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<&Array> = Vec::new();
    for (prefix, branch) in [("phi", &params.phi), ("theta", &params.theta)] {
        for (name, t) in branch.tensor_names().into_iter().zip(branch.tensors()) {
            tensors.push(TensorHeader {
                name: format!("{prefix}.{name}"),
                shape: t.shape().to_vec(),
            });
            data.push(t);
        }
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        arch: params.arch,
        tensors,
    })
    .expect("header serializes");
    let mut bytes = Vec::with_capacity(header.len() + 8 * params.param_count() + 32);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for t in data {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| FinvError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| FinvError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<GeneratorParams> {
    let bytes = fs::read(path).map_err(|e| FinvError::io(path, e))?;
    let bad = |detail: &str| FinvError::malformed("checkpoint", path, detail);
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .ok_or_else(|| bad("missing FINVPRIOR1 magic"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let header_len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < header_len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&rest[..header_len]).map_err(|e| bad(&e.to_string()))?;
    header.arch.validate()?;
    let mut payload = rest[header_len..].chunks_exact(8);
    let mut phi = Vec::new();
    let mut theta = Vec::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let chunk = payload.next().ok_or_else(|| bad("truncated tensor data"))?;
            values.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
        let array = Array::new(t.shape.clone(), values).map_err(|e| bad(&e.to_string()))?;
        if t.name.starts_with("phi.") {
            phi.push(array);
        } else if t.name.starts_with("theta.") {
            theta.push(array);
        } else {
            return Err(bad(&format!("unknown tensor {}", t.name)));
        }
    }
    if payload.next().is_some() || !payload.remainder().is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let arch = header.arch;
    let params = GeneratorParams {
        arch,
        phi: Branch::from_tensors(&arch, phi, arch.d_latent, 1)?,
        theta: Branch::from_tensors(&arch, theta, 2 * arch.d_latent, 3)?,
    };
    params.validate()?;
    Ok(params)
}

pub const FIELDS_MAGIC: &[u8] = b"FINVFIELDS1\n";

/// Writes `fields` as magic line, little-endian `u64` grid size, then
/// little-endian `f64` logits and colors.
pub fn save_fields(fields: &VoxelFields, path: &Path) -> Result<()> {
    fields.validate()?;
    let mut bytes = Vec::with_capacity(FIELDS_MAGIC.len() + 8 + 32 * fields.vertex_count());
    bytes.extend_from_slice(FIELDS_MAGIC);
    bytes.extend_from_slice(&(fields.grid_size as u64).to_le_bytes());
    for v in fields.occupancy_logits.iter().chain(&fields.colors) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| FinvError::io(path, e))
}

pub fn load_fields(path: &Path) -> Result<VoxelFields> {
    let bytes = fs::read(path).map_err(|e| FinvError::io(path, e))?;
    let bad = |detail: &str| FinvError::malformed("fields file", path, detail);
    let rest = bytes
        .strip_prefix(FIELDS_MAGIC)
        .ok_or_else(|| bad("missing FINVFIELDS1 magic"))?;
    if rest.len() < 8 {
        return Err(bad("truncated grid size"));
    }
    let v = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let n = v.checked_pow(3).ok_or_else(|| bad("grid size overflows"))?;
    let data = &rest[8..];
    if data.len() != 32 * n {
        return Err(bad(&format!(
            "expected {} bytes of field data, found {}",
            32 * n,
            data.len()
        )));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let fields = VoxelFields {
        grid_size: v,
        occupancy_logits: values[..n].to_vec(),
        colors: values[n..].to_vec(),
    };
    fields.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            d_latent: 4,
            hidden: 8,
            layers: 2,
            fourier_bands: 2,
        }
    }

    #[test]
    fn fields_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let mut f = VoxelFields::constant(3, 0.25, [0.1, 0.2, 0.3]);
        f.occupancy_logits[5] = -30.0;
        f.colors[7] = 0.9;
        save_fields(&f, &path).unwrap();
        assert_eq!(load_fields(&path).unwrap(), f);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_fields(&path), Err(FinvError::Malformed { .. })));
        assert!(matches!(
            load_fields(&dir.path().join("none.bin")),
            Err(FinvError::MissingFile(_))
        ));
    }

    #[test]
    fn zero_weight_decoder_outputs_its_biases() {
        let arch = small_arch();
        let mut params = init_params(&arch, 0).unwrap();
        for t in params.phi.tensors_mut().into_iter().chain(params.theta.tensors_mut()) {
            t.data_mut().fill(0.0);
        }
        params.phi.out_bias.data_mut()[0] = 1.25;
        params.theta.out_bias.data_mut().copy_from_slice(&[-1.0, 0.0, 2.0]);
        let fields = decode(&LatentPair::zeros(4), &params, 5).unwrap();
        assert!(fields.occupancy_logits.iter().all(|&v| v == 1.25));
        let expected = [diff::sigmoid(-1.0), 0.5, diff::sigmoid(2.0)];
        for i in 0..fields.vertex_count() {
            assert_eq!(fields.color(i), expected);
        }
    }

    #[test]
    fn decoded_shapes_follow_grid_size() {
        let arch = ArchConfig {
            d_latent: 32,
            ..ArchConfig::default()
        };
        let params = init_params(&arch, 3).unwrap();
        let w = PriorSampler::standard(32).sample(1);
        let fields = decode(&w, &params, 32).unwrap();
        assert_eq!(fields.occupancy_logits.len(), 32 * 32 * 32);
        assert_eq!(fields.colors.len(), 32 * 32 * 32 * 3);
    }

    #[test]
    fn texture_latent_does_not_touch_occupancy() {
        let arch = small_arch();
        let params = init_params(&arch, 11).unwrap();
        let sampler = PriorSampler::standard(4);
        let a = sampler.sample(5);
        let mut b = a.clone();
        b.tex = sampler.sample(6).tex;
        let (fa, fb) = (decode(&a, &params, 6).unwrap(), decode(&b, &params, 6).unwrap());
        assert!(fa
            .occupancy_logits
            .iter()
            .zip(&fb.occupancy_logits)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(fa.colors, fb.colors);
    }

    #[test]
    fn degenerate_sampler_returns_means() {
        let sampler = PriorSampler {
            mean_geo: vec![0.5, -1.0],
            mean_tex: vec![2.0, 3.0],
            scale_geo: vec![0.0; 2],
            scale_tex: vec![0.0; 2],
        };
        assert_eq!(sampler.sample(42), sampler.mean());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let sampler = PriorSampler::standard(8);
        assert_eq!(sampler.sample(7), sampler.sample(7));
        assert_ne!(sampler.sample(7), sampler.sample(8));
    }

    #[test]
    fn unit_sampler_monte_carlo_mean() {
        let sampler = PriorSampler {
            mean_geo: vec![0.3; 4],
            mean_tex: vec![-0.7; 4],
            scale_geo: vec![1.0; 4],
            scale_tex: vec![1.0; 4],
        };
        let n = 10_000;
        let mut geo = [0.0; 4];
        let mut tex = [0.0; 4];
        for seed in 0..n {
            let w = sampler.sample(seed);
            for i in 0..4 {
                geo[i] += w.geo[i] / n as f64;
                tex[i] += w.tex[i] / n as f64;
            }
        }
        for i in 0..4 {
            assert!((geo[i] - 0.3).abs() < 0.05, "geo mean {}", geo[i]);
            assert!((tex[i] + 0.7).abs() < 0.05, "tex mean {}", tex[i]);
        }
    }

    #[test]
    fn fitted_sampler_floors_variance() {
        let table = vec![LatentPair::zeros(3); 5];
        let s = PriorSampler::fit(&table, 1e-4).unwrap();
        assert!(s
            .scale_geo
            .iter()
            .chain(&s.scale_tex)
            .all(|&v| (v - 0.01).abs() < 1e-15));
    }

    #[test]
    fn init_is_deterministic() {
        let arch = small_arch();
        assert_eq!(init_params(&arch, 9).unwrap(), init_params(&arch, 9).unwrap());
        assert_ne!(init_params(&arch, 9).unwrap(), init_params(&arch, 10).unwrap());
    }

    #[test]
    fn parameter_count_matches_formula() {
        let arch = ArchConfig {
            d_latent: 32,
            hidden: 64,
            layers: 3,
            fourier_bands: 4,
        };
        let params = init_params(&arch, 0).unwrap();
        // geometry: (27 + 32)·64 + 64 + 2·(64² + 64) + 64 + 1
        let geo = 59 * 64 + 64 + 2 * (64 * 64 + 64) + 64 + 1;
        // texture: (27 + 64)·64 + 64 + 2·(64² + 64) + 3·64 + 3
        let tex = 91 * 64 + 64 + 2 * (64 * 64 + 64) + 192 + 3;
        assert_eq!(params.phi.param_count(), geo);
        assert_eq!(params.theta.param_count(), tex);
        assert_eq!(arch.geometry_param_count(), geo);
        assert_eq!(arch.texture_param_count(), tex);
    }

    #[test]
    fn zero_layers_is_rejected() {
        let arch = ArchConfig {
            layers: 0,
            ..ArchConfig::default()
        };
        assert!(matches!(init_params(&arch, 0), Err(FinvError::InvalidConfig(_))));
    }

    #[test]
    fn initial_logits_have_moderate_spread() {
        let arch = ArchConfig::default();
        let params = init_params(&arch, 21).unwrap();
        let sampler = PriorSampler::standard(arch.d_latent);
        for seed in 0..3 {
            let fields = decode(&sampler.sample(seed), &params, 12).unwrap();
            let n = fields.occupancy_logits.len() as f64;
            let mean = fields.occupancy_logits.iter().sum::<f64>() / n;
            let var = fields.occupancy_logits.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            assert!((0.1..=10.0).contains(&std), "logit std {std}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.bin");
        let params = init_params(&small_arch(), 4).unwrap();
        save_checkpoint(&params, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"FINVPRIOR1"));
        assert_eq!(load_checkpoint(&path).unwrap(), params);

        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(FinvError::Malformed { .. })));
        fs::write(&path, b"NOTAPRIOR").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(FinvError::Malformed { .. })));
        assert!(matches!(
            load_checkpoint(&dir.path().join("absent.bin")),
            Err(FinvError::MissingFile(_))
        ));
    }
}
