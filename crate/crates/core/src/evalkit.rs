//! Image and shape metrics, isosurface extraction, the novel-view
//! evaluation protocol and ablation runs.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::error::{FinvError, Result};
use crate::finv::{self, BaselineConfig, FinvState, ReconstructionConfig};
use crate::generator::{GeneratorParams, PriorSampler, VoxelFields};
use crate::harness::{mask_bbox, ObservationFrame, SequenceReader};
use crate::objectives::{self, ObjectiveConfig};
use crate::priorlab::ShapeTruth;
use crate::renderer::{self, rotation_block, validate_rigid, Camera, Mat4, RenderConfig};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Half-open pixel rectangle `[u0, u1) × [v0, v1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub u0: usize,
    pub v0: usize,
    pub u1: usize,
    pub v1: usize,
}

impl Region {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            u0: 0,
            v0: 0,
            u1: width,
            v1: height,
        }
    }

    pub fn width(&self) -> usize {
        self.u1.saturating_sub(self.u0)
    }

    pub fn height(&self) -> usize {
        self.v1.saturating_sub(self.v0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        (self.u0..self.u1).contains(&u) && (self.v0..self.v1).contains(&v)
    }

    /// Per-pixel `{0, 1}` indicator on a `width × height` image.
    pub fn mask(&self, width: usize, height: usize) -> Vec<f64> {
        (0..width * height)
            .map(|i| self.contains(i % width, i / width) as u8 as f64)
            .collect()
    }

    /// The region scaled about its center by `1 + dilation`, grown to at
    /// least `min_size` pixels per side where the image allows, and clipped
    /// to the image.
    pub fn dilated(&self, dilation: f64, min_size: usize, width: usize, height: usize) -> Self {
        let grow = |lo: usize, hi: usize, limit: usize| {
            let len = (hi - lo) as f64;
            let center = (lo + hi) as f64 / 2.0;
            let half = (len * (1.0 + dilation) / 2.0).max(min_size.min(limit) as f64 / 2.0);
            let mut a = (center - half).floor().max(0.0) as usize;
            let mut b = ((center + half).ceil() as usize).min(limit);
            // Shift rather than shrink when clipped against a border.
            let want = ((2.0 * half).ceil() as usize).min(limit);
            if b - a < want {
                if a == 0 {
                    b = want;
                } else {
                    a = limit - want;
                }
            }
            (a, b)
        };
        let (u0, u1) = grow(self.u0, self.u1, width);
        let (v0, v1) = grow(self.v0, self.v1, height);
        Self { u0, v0, u1, v1 }
    }
}

fn check_images(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<()> {
    if a.len() != width * height * channels || b.len() != a.len() {
        return Err(FinvError::InvalidInput(format!(
            "images of {} and {} values for a {width}x{height}x{channels} layout",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over the region's pixels and all channels.
pub fn psnr(a: &[f64], b: &[f64], width: usize, height: usize, region: Region) -> Result<f64> {
    check_images(a, b, width, height, 3)?;
    if region.is_empty() || region.u1 > width || region.v1 > height {
        return Err(FinvError::InvalidInput(format!(
            "PSNR region {region:?} is empty or out of bounds"
        )));
    }
    let mut sum = 0.0;
    for v in region.v0..region.v1 {
        for u in region.u0..region.u1 {
            let i = 3 * (v * width + u);
            for c in 0..3 {
                sum += (a[i + c] - b[i + c]).powi(2);
            }
        }
    }
    let mse = sum / (3 * region.width() * region.height()) as f64;
    Ok(if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    })
}

/// Per-pixel channel mean of an `H·W·3` image.
pub fn to_gray(rgb: &[f64]) -> Vec<f64> {
    rgb.chunks_exact(3).map(|c| (c[0] + c[1] + c[2]) / 3.0).collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Mean local SSIM of two grayscale images over every 11×11 Gaussian
/// window that fits inside the region.
pub fn ssim_gray(a: &[f64], b: &[f64], width: usize, height: usize, region: Region) -> Result<f64> {
    check_images(a, b, width, height, 1)?;
    if region.u1 > width || region.v1 > height {
        return Err(FinvError::InvalidInput(format!(
            "SSIM region {region:?} is out of bounds"
        )));
    }
    if region.width() < SSIM_WINDOW || region.height() < SSIM_WINDOW {
        return Err(FinvError::InvalidInput(format!(
            "SSIM region {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            region.width(),
            region.height()
        )));
    }
    let win = gaussian_window();
    let (rw, rh) = (region.width(), region.height());
    let at = |img: &[f64], u: usize, v: usize| img[(region.v0 + v) * width + region.u0 + u];
    let mut total = 0.0;
    let (nw, nh) = (rw - SSIM_WINDOW + 1, rh - SSIM_WINDOW + 1);
    for y in 0..nh {
        for x in 0..nw {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, wj) in win.iter().enumerate() {
                for (i, wi) in win.iter().enumerate() {
                    let w = wi * wj;
                    let (p, q) = (at(a, x + i, y + j), at(b, x + i, y + j));
                    ma += w * p;
                    mb += w * q;
                    saa += w * p * p;
                    sbb += w * q * q;
                    sab += w * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (nw * nh) as f64)
}

/// SSIM of two RGB images after per-pixel channel averaging.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, region: Region) -> Result<f64> {
    check_images(a, b, width, height, 3)?;
    ssim_gray(&to_gray(a), &to_gray(b), width, height, region)
}

fn check_clouds(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(FinvError::InvalidInput("point clouds must be nonempty".into()));
    }
    Ok(())
}

fn squared_distance(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
}

/// Squared distance from every point of `from` to its nearest neighbor in
/// `to`.
pub fn nearest_squared_distances(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    let tree = RTree::bulk_load(to.to_vec());
    from.iter()
        .map(|p| {
            tree.nearest_neighbor(p)
                .map_or(f64::INFINITY, |q| squared_distance(p, q))
        })
        .collect()
}

/// Symmetric mean squared nearest-neighbor distance.
pub fn chamfer_l2(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<f64> {
    check_clouds(p, q)?;
    let pq = nearest_squared_distances(p, q);
    let qp = nearest_squared_distances(q, p);
    Ok(pq.iter().sum::<f64>() / p.len() as f64 + qp.iter().sum::<f64>() / q.len() as f64)
}

/// Harmonic mean of precision (points of `p` within `tau` of `q`) and recall
/// (points of `q` within `tau` of `p`).
pub fn f1_score(p: &[[f64; 3]], q: &[[f64; 3]], tau: f64) -> Result<f64> {
    check_clouds(p, q)?;
    let within = |d: &[f64]| d.iter().filter(|&&x| x <= tau * tau).count() as f64 / d.len() as f64;
    let precision = within(&nearest_squared_distances(p, q));
    let recall = within(&nearest_squared_distances(q, p));
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Diagonal length of the axis-aligned bounding box of `points`.
pub fn bbox_diagonal(points: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
}

/// Triangle mesh with per-vertex colors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub colors: Vec<[f64; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() != self.vertices.len() {
            return Err(FinvError::InvalidInput("mesh colors do not match its vertices".into()));
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= self.vertices.len()) {
                return Err(FinvError::InvalidInput(format!(
                    "triangle {t} indexes past the vertex list"
                )));
            }
            if self.triangle_area(t) <= 1e-12 {
                return Err(FinvError::InvalidInput(format!("triangle {t} is degenerate")));
            }
        }
        Ok(())
    }

    /// Number of triangles incident to each undirected edge.
    pub fn edge_incidence(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        !self.is_empty() && self.edge_incidence().values().all(|&c| c == 2)
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// `n` area-weighted uniform samples on the surface, deterministic in
    /// `seed`; empty for an empty mesh.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<[f64; 3]> {
        if self.is_empty() {
            return Vec::new();
        }
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in 0..self.triangles.len() {
            acc += self.triangle_area(t);
            cumulative.push(acc);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = rng.gen::<f64>() * acc;
                let t = cumulative.partition_point(|&c| c <= x).min(self.triangles.len() - 1);
                let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
                let (mut r1, mut r2) = (rng.gen::<f64>(), rng.gen::<f64>());
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                [0, 1, 2].map(|k| a[k] + r1 * (b[k] - a[k]) + r2 * (c[k] - a[k]))
            })
            .collect()
    }

    /// Wavefront OBJ with `v x y z r g b` lines and 1-based faces.
    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(64 * (self.vertices.len() + self.triangles.len()));
        out.push_str("# vertices with rgb colors\n");
        for (p, c) in self.vertices.iter().zip(&self.colors) {
            out.push_str(&format!("v {} {} {} {} {} {}\n", p[0], p[1], p[2], c[0], c[1], c[2]));
        }
        for t in &self.triangles {
            out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        let mut f = fs::File::create(path).map_err(|e| FinvError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| FinvError::io(path, e))
    }

    pub fn read_obj(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FinvError::io(path, e))?;
        let mut mesh = Mesh::default();
        for (n, line) in text.lines().enumerate() {
            let bad = || FinvError::malformed("obj", path, format!("line {}: {line}", n + 1));
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let vals: Vec<f64> = parts.map(|x| x.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                    if vals.len() != 6 {
                        return Err(bad());
                    }
                    mesh.vertices.push([vals[0], vals[1], vals[2]]);
                    mesh.colors.push([vals[3], vals[4], vals[5]]);
                }
                Some("f") => {
                    let idx: Vec<usize> = parts
                        .map(|x| x.split('/').next().unwrap_or("").parse::<usize>().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 || idx.contains(&0) {
                        return Err(bad());
                    }
                    mesh.triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
                }
                _ => {}
            }
        }
        mesh.validate().map_err(|e| FinvError::malformed("obj", path, e))?;
        Ok(mesh)
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// The six tetrahedra of a cube sharing its main diagonal `0 → 7`; corner
/// `c` sits at offset `(c & 1, c >> 1 & 1, c >> 2 & 1)`. Neighboring cubes
/// split shared faces identically, so the extracted surface has no cracks.
const CUBE_TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Isosurface of `sigmoid(occupancy_logits)` at `iso`, by marching cubes
/// with each cube split into six tetrahedra. The grid is padded with one
/// layer of empty vertices so surfaces of fields touching the boundary are
/// closed. Vertex colors are trilinear samples of the color grid.
pub fn extract_mesh(fields: &VoxelFields, iso: f64) -> Result<Mesh> {
    fields.validate()?;
    if !(0.0 < iso && iso < 1.0) {
        return Err(FinvError::InvalidInput(format!("iso level {iso} outside (0, 1)")));
    }
    let v = fields.grid_size;
    let p = v + 2;
    // Padded lattice index (i, j, k) maps to grid vertex (i - 1, j - 1, k - 1).
    let value = |i: usize, j: usize, k: usize| -> f64 {
        if i == 0 || j == 0 || k == 0 || i > v || j > v || k > v {
            0.0
        } else {
            fields.occupancy(fields.index(i - 1, j - 1, k - 1))
        }
    };
    let h = 1.0 / (v - 1) as f64;
    let position = |i: usize, j: usize, k: usize| [i, j, k].map(|c| -0.5 + (c as f64 - 1.0) * h);
    let lattice = |i: usize, j: usize, k: usize| (k * p + j) * p + i;

    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    for k in 0..p - 1 {
        for j in 0..p - 1 {
            for i in 0..p - 1 {
                let corner = |c: usize| (i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1));
                let vals: [f64; 8] = std::array::from_fn(|c| {
                    let (a, b, d) = corner(c);
                    value(a, b, d)
                });
                let inside = vals.iter().filter(|&&x| x > iso).count();
                if inside == 0 || inside == 8 {
                    continue;
                }
                for tet in CUBE_TETS {
                    let ids = tet.map(|c| {
                        let (a, b, d) = corner(c);
                        lattice(a, b, d)
                    });
                    let pos = tet.map(|c| {
                        let (a, b, d) = corner(c);
                        position(a, b, d)
                    });
                    let tv = tet.map(|c| vals[c]);
                    let mut vertex = |a: usize, b: usize, mesh: &mut Mesh| {
                        let key = (ids[a].min(ids[b]), ids[a].max(ids[b]));
                        *edge_vertex.entry(key).or_insert_with(|| {
                            let t = (iso - tv[a]) / (tv[b] - tv[a]);
                            let x = [0, 1, 2].map(|m| pos[a][m] + t * (pos[b][m] - pos[a][m]));
                            mesh.vertices.push(x);
                            mesh.colors.push(sample_color(fields, x));
                            mesh.vertices.len() - 1
                        })
                    };
                    let ins: Vec<usize> = (0..4).filter(|&c| tv[c] > iso).collect();
                    let outs: Vec<usize> = (0..4).filter(|&c| tv[c] <= iso).collect();
                    let polygon: Vec<usize> = match (ins.len(), outs.len()) {
                        (1, 3) => outs.iter().map(|&o| vertex(ins[0], o, &mut mesh)).collect(),
                        (3, 1) => ins.iter().map(|&n| vertex(n, outs[0], &mut mesh)).collect(),
                        (2, 2) => vec![
                            vertex(ins[0], outs[0], &mut mesh),
                            vertex(ins[0], outs[1], &mut mesh),
                            vertex(ins[1], outs[1], &mut mesh),
                            vertex(ins[1], outs[0], &mut mesh),
                        ],
                        _ => continue,
                    };
                    let center_in = centroid(ins.iter().map(|&c| pos[c]));
                    let center_out = centroid(outs.iter().map(|&c| pos[c]));
                    let outward = sub(center_out, center_in);
                    let tris: Vec<[usize; 3]> = if polygon.len() == 3 {
                        vec![[polygon[0], polygon[1], polygon[2]]]
                    } else {
                        vec![
                            [polygon[0], polygon[1], polygon[2]],
                            [polygon[0], polygon[2], polygon[3]],
                        ]
                    };
                    for mut t in tris {
                        let [a, b, c] = t.map(|x| mesh.vertices[x]);
                        let n = cross(sub(b, a), sub(c, a));
                        if 0.5 * norm(n) <= 1e-12 {
                            continue;
                        }
                        if dot(n, outward) < 0.0 {
                            t.swap(1, 2);
                        }
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

fn centroid(points: impl Iterator<Item = [f64; 3]>) -> [f64; 3] {
    let (mut s, mut n) = ([0.0; 3], 0.0);
    for p in points {
        for k in 0..3 {
            s[k] += p[k];
        }
        n += 1.0;
    }
    s.map(|x| x / n)
}

/// Trilinear color sample at world point `x`, clamped to the grid.
pub fn sample_color(fields: &VoxelFields, x: [f64; 3]) -> [f64; 3] {
    let v = fields.grid_size;
    let mut out = [0.0; 3];
    for (i, w) in renderer::trilinear_weights(x.map(|c| c.clamp(-0.5, 0.5)), v) {
        let c = fields.color(i);
        for k in 0..3 {
            out[k] += w * c[k];
        }
    }
    out.map(|c| c.clamp(0.0, 1.0))
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix.
pub fn quaternion(r: &[[f64; 3]; 3]) -> [f64; 4] {
    let trace = r[0][0] + r[1][1] + r[2][2];
    let q = if trace > 0.0 {
        let s = 2.0 * (trace + 1.0).sqrt();
        [
            0.25 * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        ]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = 2.0 * (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt();
        [
            (r[2][1] - r[1][2]) / s,
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        ]
    } else if r[1][1] > r[2][2] {
        let s = 2.0 * (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt();
        [
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
        ]
    } else {
        let s = 2.0 * (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt();
        [
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
        ]
    };
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    q.map(|x| x / n)
}

/// Geodesic angle `2·arccos(|⟨q_a, q_b⟩|)` between the rotation blocks of
/// two rigid transforms, in degrees.
pub fn rotation_delta(pose_a: &Mat4, pose_b: &Mat4) -> Result<f64> {
    validate_rigid(pose_a)?;
    validate_rigid(pose_b)?;
    Ok(quaternion_delta(
        quaternion(&rotation_block(pose_a)),
        quaternion(&rotation_block(pose_b)),
    ))
}

/// Angle in degrees between the rotations of two unit quaternions.
pub fn quaternion_delta(qa: [f64; 4], qb: [f64; 4]) -> f64 {
    let d: f64 = qa.iter().zip(&qb).map(|(a, b)| a * b).sum();
    (2.0 * d.abs().min(1.0).acos()).to_degrees()
}

/// Protocol and metric settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// First 0-based frame index used for evaluation.
    pub eval_start: usize,
    /// Relative growth of the ground-truth bounding box.
    pub bbox_dilation: f64,
    pub iso: f64,
    pub surface_samples: usize,
    /// F1 threshold as a fraction of the ground-truth bounding-box diagonal.
    pub f1_tau_fraction: f64,
    pub render: RenderConfig,
    pub objective: ObjectiveConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_start: 5,
            bbox_dilation: 0.1,
            iso: 0.5,
            surface_samples: 2048,
            f1_tau_fraction: 0.05,
            render: RenderConfig::default(),
            objective: ObjectiveConfig::default(),
            seed: 0,
        }
    }
}

/// Metrics on one evaluation view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub frame: usize,
    pub rotation_delta_deg: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Pyramid perceptual proxy, not LPIPS.
    pub perceptual_proxy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    pub chamfer_l2: f64,
    pub f1: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub records: Vec<ViewRecord>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_perceptual_proxy: f64,
    pub shape: ShapeMetrics,
    /// Frame indices whose images were read while reconstructing.
    pub input_frames_read: Vec<usize>,
}

impl EvalReport {
    /// Report with means over `records`.
    pub fn new(k: usize, records: Vec<ViewRecord>, shape: ShapeMetrics, input_frames_read: Vec<usize>) -> Self {
        Self {
            k,
            mean_psnr: mean(records.iter().map(|r| r.psnr)),
            mean_ssim: mean(records.iter().map(|r| r.ssim)),
            mean_perceptual_proxy: mean(records.iter().map(|r| r.perceptual_proxy)),
            records,
            shape,
            input_frames_read,
        }
    }
}

/// A reconstruction method mapping input frames to voxel fields.
pub trait Reconstructor: Send + Sync {
    fn name(&self) -> String;
    fn reconstruct(&self, frames: &[ObservationFrame], seed: u64) -> Result<VoxelFields>;

    /// One reconstruction from `frames[..k]` per `k` in strictly increasing
    /// `ks`, each equal to `reconstruct(&frames[..k], seed)`.
    fn reconstruct_prefixes(&self, frames: &[ObservationFrame], ks: &[usize], seed: u64) -> Result<Vec<VoxelFields>> {
        finv::validate_prefixes(ks, frames.len())?;
        ks.iter().map(|&k| self.reconstruct(&frames[..k], seed)).collect()
    }
}

/// Phase I states shared between methods that differ only in refinement
/// settings, keyed by seed, Phase I settings and the observed frames.
#[derive(Debug, Default)]
pub struct Phase1Cache {
    states: Mutex<HashMap<Phase1Key, FinvState>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Phase1Key {
    seed: u64,
    config: String,
    frames: u64,
    k: usize,
}

impl Phase1Key {
    fn new(config: &ReconstructionConfig, frames: &[ObservationFrame], seed: u64) -> Self {
        let mut phase1 = config.clone();
        let defaults = finv::FinvConfig::default();
        phase1.finv.refine_steps = defaults.refine_steps;
        phase1.finv.geometry_step_cap = defaults.geometry_step_cap;
        phase1.finv.param_lr = defaults.param_lr;
        phase1.finv.refine_top_k = defaults.refine_top_k;
        let mut h = DefaultHasher::new();
        for f in frames {
            for x in f
                .rgb
                .iter()
                .chain(&f.object_mask)
                .chain(&f.validity_mask)
                .chain(f.camera.world_to_camera.iter().flatten())
            {
                x.to_bits().hash(&mut h);
            }
            f.index.hash(&mut h);
            [f.camera.fx, f.camera.fy, f.camera.cx, f.camera.cy]
                .map(f64::to_bits)
                .hash(&mut h);
        }
        Self {
            seed,
            config: format!("{phase1:?}"),
            frames: h.finish(),
            k: frames.len(),
        }
    }
}

impl Phase1Cache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.states.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &Phase1Key) -> Option<FinvState> {
        self.states.lock().expect("cache lock").get(key).cloned()
    }

    fn insert(&self, key: Phase1Key, state: &FinvState) {
        self.states.lock().expect("cache lock").insert(key, state.snapshot());
    }
}

/// Filtering inversion under a pretrained prior.
#[derive(Clone, Debug)]
pub struct FinvMethod {
    pub label: String,
    pub params: Arc<GeneratorParams>,
    pub sampler: PriorSampler,
    pub config: ReconstructionConfig,
    pub cache: Option<Arc<Phase1Cache>>,
}

impl Reconstructor for FinvMethod {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn reconstruct(&self, frames: &[ObservationFrame], seed: u64) -> Result<VoxelFields> {
        let mut fields = self.reconstruct_prefixes(frames, &[frames.len()], seed)?;
        Ok(fields.remove(0))
    }

    fn reconstruct_prefixes(&self, frames: &[ObservationFrame], ks: &[usize], seed: u64) -> Result<Vec<VoxelFields>> {
        finv::validate_prefixes(ks, frames.len())?;
        let mut state = finv::init_population(&self.config, Arc::clone(&self.params), &self.sampler, seed)?;
        let mut out = Vec::with_capacity(ks.len());
        for &k in ks {
            let key = self
                .cache
                .as_ref()
                .map(|_| Phase1Key::new(&self.config, &frames[..k], seed));
            match key.as_ref().and_then(|key| self.cache.as_ref()?.get(key)) {
                Some(snapshot) => {
                    state = FinvState::restore(&snapshot, &frames[..k])?;
                    // The snapshot may come from an arm with other refinement settings.
                    state.config = self.config.clone();
                }
                None => {
                    for f in &frames[state.frames_seen.len()..k] {
                        finv::step_observation(&mut state, f)?;
                    }
                    if let (Some(cache), Some(key)) = (&self.cache, key) {
                        cache.insert(key, &state);
                    }
                }
            }
            let result = finv::select(&state, finv::refine(&state)?)?;
            out.push(result.decode(self.config.finv.grid_size)?);
        }
        Ok(out)
    }
}

/// Direct optimization of raw voxel fields without a prior.
#[derive(Clone, Debug)]
pub struct BaselineMethod {
    pub config: ReconstructionConfig,
    pub baseline: BaselineConfig,
}

impl Reconstructor for BaselineMethod {
    fn name(&self) -> String {
        "baseline".into()
    }

    fn reconstruct(&self, frames: &[ObservationFrame], _seed: u64) -> Result<VoxelFields> {
        finv::baseline_direct_fit(frames, &self.config, &self.baseline)
    }
}

/// Returns fixed fields regardless of input.
#[derive(Clone, Debug)]
pub struct FixedFields(pub VoxelFields);

impl Reconstructor for FixedFields {
    fn name(&self) -> String {
        "fixed".into()
    }

    fn reconstruct(&self, _frames: &[ObservationFrame], _seed: u64) -> Result<VoxelFields> {
        Ok(self.0.clone())
    }
}

/// Metrics of `fields` on eval views `eval_start..` of the sequence.
pub fn evaluate_fields(
    fields: &VoxelFields,
    reader: &SequenceReader,
    truth: &ShapeTruth,
    input_cameras: &[Camera],
    config: &EvalConfig,
) -> Result<(Vec<ViewRecord>, ShapeMetrics)> {
    if reader.len() <= config.eval_start {
        return Err(FinvError::InvalidInput(format!(
            "a sequence of {} frames has no evaluation frames from index {}",
            reader.len(),
            config.eval_start
        )));
    }
    let mut records = Vec::new();
    for i in config.eval_start..reader.len() {
        let camera = reader.camera(i)?;
        let (w, h) = (camera.width, camera.height);
        let gt = renderer::render(&truth.fields, &camera, &config.render)?;
        let pred = renderer::render(fields, &camera, &config.render)?;
        let silhouette: Vec<bool> = gt.mask.iter().map(|&m| m >= 0.5).collect();
        let region = match mask_bbox(&silhouette, w) {
            Some((u0, v0, u1, v1)) => Region {
                u0,
                v0,
                u1: u1 + 1,
                v1: v1 + 1,
            }
            .dilated(config.bbox_dilation, SSIM_WINDOW, w, h),
            None => Region::full(w, h),
        };
        let valid = region.mask(w, h);
        let rotation_delta_deg = input_cameras
            .iter()
            .map(|c| rotation_delta(&c.world_to_camera, &camera.world_to_camera))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        records.push(ViewRecord {
            frame: i,
            rotation_delta_deg,
            psnr: psnr(&pred.rgb, &gt.rgb, w, h, region)?,
            ssim: ssim(&pred.rgb, &gt.rgb, w, h, region)?,
            perceptual_proxy: objectives::perceptual_loss(&pred.rgb, &gt.rgb, &valid, w, h, &config.objective)?,
        });
    }
    let shape = shape_metrics(fields, truth, config)?;
    Ok((records, shape))
}

/// Chamfer and F1 of surface samples of the extracted mesh against the
/// ground-truth cloud. An empty mesh is represented by the grid center.
pub fn shape_metrics(fields: &VoxelFields, truth: &ShapeTruth, config: &EvalConfig) -> Result<ShapeMetrics> {
    let mesh = extract_mesh(fields, config.iso)?;
    let mut samples = mesh.sample_surface(
        config.surface_samples,
        crate::seeds::derive(config.seed, "mesh-samples", 0),
    );
    if samples.is_empty() {
        samples.push([0.0; 3]);
    }
    let tau = config.f1_tau_fraction * bbox_diagonal(&truth.surface);
    Ok(ShapeMetrics {
        chamfer_l2: chamfer_l2(&samples, &truth.surface)?,
        f1: f1_score(&samples, &truth.surface, tau)?,
        tau,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    s / n as f64
}

/// Reconstructs from the first `k` frames and evaluates on the remaining
/// protocol frames against the ground truth.
pub fn evaluate_sequence(
    method: &dyn Reconstructor,
    reader: &SequenceReader,
    truth: &ShapeTruth,
    k: usize,
    seed: u64,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let mut reports = evaluate_sequence_prefixes(method, reader, truth, &[k], seed, config)?;
    Ok(reports.remove(0))
}

/// [`evaluate_sequence`] for each `k` in strictly increasing `ks`, reading
/// the first `max(ks)` frames once. Every report lists all frames read.
pub fn evaluate_sequence_prefixes(
    method: &dyn Reconstructor,
    reader: &SequenceReader,
    truth: &ShapeTruth,
    ks: &[usize],
    seed: u64,
    config: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    if ks.iter().any(|&k| k == 0 || k > config.eval_start) {
        return Err(FinvError::InvalidInput(format!(
            "k values {ks:?} must lie in 1..={}",
            config.eval_start
        )));
    }
    finv::validate_prefixes(ks, config.eval_start)?;
    if reader.len() <= config.eval_start {
        return Err(FinvError::InvalidInput(format!(
            "a sequence of {} frames has no evaluation frames",
            reader.len()
        )));
    }
    let before = reader.accessed().len();
    let inputs = reader.first(ks[ks.len() - 1])?;
    let all_fields = method.reconstruct_prefixes(&inputs, ks, seed)?;
    let input_frames_read = reader.accessed()[before..].to_vec();
    ks.iter()
        .zip(all_fields)
        .map(|(&k, fields)| {
            let cameras: Vec<Camera> = inputs[..k].iter().map(|f| f.camera.clone()).collect();
            let (records, shape) = evaluate_fields(&fields, reader, truth, &cameras, config)?;
            Ok(EvalReport::new(k, records, shape, input_frames_read.clone()))
        })
        .collect()
}

/// Ablation arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One particle, no filtering, no refinement.
    InversionOnly,
    /// Full population with filtering, no refinement.
    Filter,
    /// Filtering and refinement.
    Full,
    /// Direct field optimization without the prior.
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::InversionOnly,
        Variant::Filter,
        Variant::Full,
        Variant::Baseline,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::InversionOnly => "inversion-only",
            Variant::Filter => "filter",
            Variant::Full => "full",
            Variant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| FinvError::InvalidConfig(format!("unknown variant {s:?}")))
    }

    /// The reconstruction config of this arm derived from the full config.
    pub fn config(self, base: &ReconstructionConfig) -> ReconstructionConfig {
        let mut c = base.clone();
        match self {
            Variant::InversionOnly => {
                c.finv.population_size = 1;
                c.finv.filter = false;
                c.finv.refine_steps = 0;
                c.finv.refine_top_k = 1;
            }
            Variant::Filter => c.finv.refine_steps = 0,
            Variant::Full | Variant::Baseline => {}
        }
        c
    }

    pub fn method(
        self,
        base: &ReconstructionConfig,
        baseline: &BaselineConfig,
        params: &Arc<GeneratorParams>,
        sampler: &PriorSampler,
    ) -> Box<dyn Reconstructor> {
        match self {
            Variant::Baseline => Box::new(BaselineMethod {
                config: base.clone(),
                baseline: baseline.clone(),
            }),
            v => Box::new(FinvMethod {
                label: v.label().into(),
                params: Arc::clone(params),
                sampler: sampler.clone(),
                config: v.config(base),
                cache: None,
            }),
        }
    }

    /// Methods for `variants` whose FINV arms share one Phase I cache.
    pub fn methods(
        variants: &[Variant],
        base: &ReconstructionConfig,
        baseline: &BaselineConfig,
        params: &Arc<GeneratorParams>,
        sampler: &PriorSampler,
    ) -> Vec<(Variant, Box<dyn Reconstructor>)> {
        let cache = Arc::new(Phase1Cache::new());
        variants
            .iter()
            .map(|&v| {
                let method: Box<dyn Reconstructor> = match v {
                    Variant::Baseline => v.method(base, baseline, params, sampler),
                    _ => Box::new(FinvMethod {
                        label: v.label().into(),
                        params: Arc::clone(params),
                        sampler: sampler.clone(),
                        config: v.config(base),
                        cache: Some(Arc::clone(&cache)),
                    }),
                };
                (v, method)
            })
            .collect()
    }
}

/// One benchmark sequence on disk with its ground truth.
pub struct BenchmarkItem {
    pub name: String,
    pub reader: SequenceReader,
    pub truth: ShapeTruth,
}

/// Evaluation of one (variant, master seed, sequence, k) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub sequence: String,
    pub report: EvalReport,
}

/// Per-variant, per-k means over sequences and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub k: usize,
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_perceptual_proxy: f64,
    pub mean_chamfer_l2: f64,
    pub mean_f1: f64,
    /// Least-squares slope of perceptual proxy against rotation delta.
    pub perceptual_slope_per_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<VariantSummary>,
}

/// Seed for one benchmark cell; identical across variants so arms are
/// compared on the same initial draws.
pub fn cell_seed(master: u64, sequence: usize) -> u64 {
    crate::seeds::derive(master, "ablation", sequence as u64)
}

/// Evaluates every variant on every sequence for each `k` and master seed.
/// A sequence uses the same seed for every `k` and variant, so prefix
/// reconstructions share one Phase I pass. Sequences run in parallel; rows
/// are ordered by variant, seed, sequence, k.
pub fn run_ablation(
    benchmark: &[BenchmarkItem],
    variants: &[(Variant, Box<dyn Reconstructor>)],
    ks: &[usize],
    master_seeds: &[u64],
    config: &EvalConfig,
) -> Result<AblationTable> {
    if variants.is_empty() || ks.is_empty() || master_seeds.is_empty() {
        return Err(FinvError::InvalidConfig(
            "ablation needs variants, k values and seeds".into(),
        ));
    }
    let mut rows = Vec::new();
    for (variant, method) in variants {
        for &seed in master_seeds {
            let cells: Vec<Vec<AblationRow>> = benchmark
                .par_iter()
                .enumerate()
                .map(|(s, item)| {
                    let reports = evaluate_sequence_prefixes(
                        method.as_ref(),
                        &item.reader,
                        &item.truth,
                        ks,
                        cell_seed(seed, s),
                        config,
                    )?;
                    Ok(reports
                        .into_iter()
                        .map(|report| AblationRow {
                            variant: *variant,
                            seed,
                            sequence: item.name.clone(),
                            report,
                        })
                        .collect())
                })
                .collect::<Result<_>>()?;
            rows.extend(cells.into_iter().flatten());
        }
    }
    let summaries = summarize(&rows);
    Ok(AblationTable { rows, summaries })
}

/// Per-variant, per-k aggregates in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<VariantSummary> {
    let mut keys: Vec<(Variant, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.variant, r.report.k)) {
            keys.push((r.variant, r.report.k));
        }
    }
    keys.into_iter()
        .map(|(variant, k)| {
            let group: Vec<&AblationRow> = rows
                .iter()
                .filter(|r| r.variant == variant && r.report.k == k)
                .collect();
            let views: Vec<&ViewRecord> = group.iter().flat_map(|r| &r.report.records).collect();
            let xs: Vec<f64> = views.iter().map(|v| v.rotation_delta_deg).collect();
            let ys: Vec<f64> = views.iter().map(|v| v.perceptual_proxy).collect();
            VariantSummary {
                variant,
                k,
                count: group.len(),
                mean_psnr: mean(group.iter().map(|r| r.report.mean_psnr)),
                mean_ssim: mean(group.iter().map(|r| r.report.mean_ssim)),
                mean_perceptual_proxy: mean(group.iter().map(|r| r.report.mean_perceptual_proxy)),
                mean_chamfer_l2: mean(group.iter().map(|r| r.report.shape.chamfer_l2)),
                mean_f1: mean(group.iter().map(|r| r.report.shape.f1)),
                perceptual_slope_per_deg: linear_fit(&xs, &ys).map(|f| f.0).unwrap_or(f64::NAN),
            }
        })
        .collect()
}

/// Least-squares `(slope, intercept)` of `ys` against `xs`; `None` with
/// fewer than two distinct `x` values.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

pub const VIEW_CSV_HEADER: [&str; 9] = [
    "variant",
    "seed",
    "sequence",
    "k",
    "frame",
    "rotation_delta_deg",
    "psnr",
    "ssim",
    "perceptual_proxy",
];

pub const SUMMARY_CSV_HEADER: [&str; 9] = [
    "variant",
    "k",
    "count",
    "mean_psnr",
    "mean_ssim",
    "mean_perceptual_proxy",
    "mean_chamfer_l2",
    "mean_f1",
    "perceptual_slope_per_deg",
];

pub const SEQUENCE_CSV_HEADER: [&str; 10] = [
    "variant",
    "seed",
    "sequence",
    "k",
    "mean_psnr",
    "mean_ssim",
    "mean_perceptual_proxy",
    "chamfer_l2",
    "f1",
    "tau",
];

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| FinvError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> FinvError + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => FinvError::io(path, io),
        other => FinvError::malformed("csv", path, format!("{other:?}")),
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.10e}")
}

/// Per-view records, one line per evaluated frame.
pub fn write_view_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(VIEW_CSV_HEADER).map_err(&err)?;
    for r in rows {
        for v in &r.report.records {
            w.write_record([
                r.variant.label().to_string(),
                r.seed.to_string(),
                r.sequence.clone(),
                r.report.k.to_string(),
                v.frame.to_string(),
                fmt(v.rotation_delta_deg),
                fmt(v.psnr),
                fmt(v.ssim),
                fmt(v.perceptual_proxy),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| FinvError::io(path, e))
}

/// Per-sequence means and shape metrics.
pub fn write_sequence_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(SEQUENCE_CSV_HEADER).map_err(&err)?;
    for r in rows {
        w.write_record([
            r.variant.label().to_string(),
            r.seed.to_string(),
            r.sequence.clone(),
            r.report.k.to_string(),
            fmt(r.report.mean_psnr),
            fmt(r.report.mean_ssim),
            fmt(r.report.mean_perceptual_proxy),
            fmt(r.report.shape.chamfer_l2),
            fmt(r.report.shape.f1),
            fmt(r.report.shape.tau),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| FinvError::io(path, e))
}

pub fn write_summary_csv(path: &Path, summaries: &[VariantSummary]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(SUMMARY_CSV_HEADER).map_err(&err)?;
    for s in summaries {
        w.write_record([
            s.variant.label().to_string(),
            s.k.to_string(),
            s.count.to_string(),
            fmt(s.mean_psnr),
            fmt(s.mean_ssim),
            fmt(s.mean_perceptual_proxy),
            fmt(s.mean_chamfer_l2),
            fmt(s.mean_f1),
            fmt(s.perceptual_slope_per_deg),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| FinvError::io(path, e))
}
