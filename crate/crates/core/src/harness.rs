//! Synthetic sequential observations of ground-truth objects and the
//! on-disk sequence format.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FinvError, Result};
use crate::priorlab::{self, ShapeSpec, ShapeTruth, Split};
use crate::renderer::{self, Camera, RenderConfig};
use crate::seeds;

/// One observed image with its object mask, validity mask and camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub index: usize,
    pub camera: Camera,
    /// Row-major `H·W·3` colors in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// Visible object pixels, `{0, 1}`.
    pub object_mask: Vec<f64>,
    /// Trusted pixels (in frame and unoccluded), `{0, 1}`.
    pub validity_mask: Vec<f64>,
}

impl ObservationFrame {
    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let n = self.camera.pixel_count();
        if self.rgb.len() != 3 * n || self.object_mask.len() != n || self.validity_mask.len() != n {
            return Err(FinvError::InvalidInput(format!(
                "frame {} buffers do not match its {}x{} camera",
                self.index, self.camera.width, self.camera.height
            )));
        }
        let binary = |v: &f64| *v == 0.0 || *v == 1.0;
        if !self.object_mask.iter().all(binary) || !self.validity_mask.iter().all(binary) {
            return Err(FinvError::InvalidInput(format!(
                "frame {} masks are not binary",
                self.index
            )));
        }
        if self.object_mask.iter().zip(&self.validity_mask).any(|(m, v)| *m > *v) {
            return Err(FinvError::InvalidInput(format!(
                "frame {} marks object pixels outside the valid region",
                self.index
            )));
        }
        if !self.rgb.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(FinvError::InvalidInput(format!(
                "frame {} colors outside [0, 1]",
                self.index
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OccluderShape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occlusion {
    /// Target fraction of each frame's silhouette to hide, in `[0, 1)`.
    pub fraction: f64,
    pub shape: OccluderShape,
    /// Occluder color painted into the observed image.
    pub color: [f64; 3],
}

impl Default for Occlusion {
    fn default() -> Self {
        Self {
            fraction: 0.0,
            shape: OccluderShape::Rectangle,
            color: [0.5; 3],
        }
    }
}

/// Visible window in normalized image coordinates; pixels whose centers
/// fall outside are out of frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crop {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Crop {
    pub fn contains(&self, u: usize, v: usize, width: usize, height: usize) -> bool {
        let x = (u as f64 + 0.5) / width as f64;
        let y = (v as f64 + 0.5) / height as f64;
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub shape: ShapeSpec,
    pub frames: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub azimuth_start_deg: f64,
    /// Azimuth covered from the first to the last frame.
    pub azimuth_span_deg: f64,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub grid_size: usize,
    pub occlusion: Occlusion,
    pub crop: Option<Crop>,
    pub seed: u64,
}

/// Minimum sequence length; evaluation uses frames 5 and later.
pub const MIN_FRAMES: usize = 6;
/// Focal length per image pixel of width; objects of unit-cube scale fill
/// most of the frame from the default radius.
pub const FOCAL_PER_PIXEL: f64 = 1.25;

/// Number of surface samples in the ground-truth point cloud.
pub const SURFACE_POINTS: usize = 2048;

impl SequenceSpec {
    /// Default arc sequence around `shape`.
    pub fn new(shape: ShapeSpec, seed: u64) -> Self {
        Self {
            shape,
            frames: 10,
            radius: 1.6,
            elevation_deg: 25.0,
            azimuth_start_deg: 0.0,
            azimuth_span_deg: 180.0,
            width: 64,
            height: 64,
            focal: 64.0 * FOCAL_PER_PIXEL,
            grid_size: 32,
            occlusion: Occlusion::default(),
            crop: None,
            seed,
        }
    }

    /// Square `size × size` images at the default field of view.
    pub fn with_resolution(mut self, size: usize) -> Self {
        self.width = size;
        self.height = size;
        self.focal = size as f64 * FOCAL_PER_PIXEL;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let bad = |m: String| Err(FinvError::InvalidConfig(m));
        if self.frames < MIN_FRAMES {
            return bad(format!(
                "a sequence needs at least {MIN_FRAMES} frames, got {}",
                self.frames
            ));
        }
        if !(self.radius > 0.87) || !self.radius.is_finite() {
            return bad(format!("camera radius {} does not clear the unit cube", self.radius));
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return bad("image size and focal length must be positive".into());
        }
        if self.grid_size < 2 {
            return bad("grid_size must be at least 2".into());
        }
        let q = self.occlusion.fraction;
        if !(0.0..1.0).contains(&q) {
            return bad(format!("occlusion fraction {q} outside [0, 1)"));
        }
        if !self.occlusion.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return bad("occluder color outside [0, 1]".into());
        }
        if let Some(c) = self.crop {
            if !(0.0 <= c.x0 && c.x0 < c.x1 && c.x1 <= 1.0 && 0.0 <= c.y0 && c.y0 < c.y1 && c.y1 <= 1.0) {
                return bad(format!("crop window {c:?} is not inside the image"));
            }
        }
        Ok(())
    }

    pub fn camera(&self, t: usize) -> Result<Camera> {
        let step = if self.frames > 1 {
            self.azimuth_span_deg / (self.frames - 1) as f64
        } else {
            0.0
        };
        let az = (self.azimuth_start_deg + step * t as f64).to_radians();
        let el = self.elevation_deg.to_radians();
        let eye = [
            self.radius * el.cos() * az.cos(),
            self.radius * el.cos() * az.sin(),
            self.radius * el.sin(),
        ];
        Camera::look_at(
            eye,
            [0.0; 3],
            [0.0, 0.0, 1.0],
            self.focal,
            self.focal,
            self.width,
            self.height,
        )
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        (0..self.frames).map(|t| self.camera(t)).collect()
    }
}

/// A generated sequence with its ground truth.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub spec: SequenceSpec,
    pub frames: Vec<ObservationFrame>,
    pub truth: ShapeTruth,
}

/// Renders the ground truth along the trajectory and applies occlusion and
/// cropping to the validity and object masks.
pub fn make_sequence(spec: &SequenceSpec, render: &RenderConfig) -> Result<Sequence> {
    spec.validate()?;
    let truth = priorlab::generate_shape(&spec.shape, spec.grid_size, SURFACE_POINTS)?;
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let camera = spec.camera(t)?;
        let out = renderer::render(&truth.fields, &camera, render)?;
        let (w, h) = (camera.width, camera.height);
        let silhouette: Vec<bool> = out.mask.iter().map(|&m| m >= 0.5).collect();
        let mut valid = vec![true; w * h];
        if let Some(crop) = spec.crop {
            for v in 0..h {
                for u in 0..w {
                    valid[v * w + u] = crop.contains(u, v, w, h);
                }
            }
        }
        let mut rgb = out.rgb;
        if spec.occlusion.fraction > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, "occluder", t as u64));
            let occluder = place_occluder(&silhouette, w, h, &spec.occlusion, &mut rng);
            for (i, &o) in occluder.iter().enumerate() {
                if o {
                    valid[i] = false;
                    rgb[3 * i..3 * i + 3].copy_from_slice(&spec.occlusion.color);
                }
            }
        }
        for (i, &ok) in valid.iter().enumerate() {
            if !ok && spec.crop.is_some_and(|c| !c.contains(i % w, i / w, w, h)) {
                rgb[3 * i..3 * i + 3].fill(0.0);
            }
        }
        let object_mask = silhouette
            .iter()
            .zip(&valid)
            .map(|(&s, &v)| (s && v) as u8 as f64)
            .collect();
        let frame = ObservationFrame {
            index: t,
            camera,
            rgb,
            object_mask,
            validity_mask: valid.iter().map(|&v| v as u8 as f64).collect(),
        };
        frame.validate()?;
        frames.push(frame);
    }
    if frames.iter().all(|f| f.object_mask.iter().all(|&m| m == 0.0)) {
        return Err(FinvError::InvalidInput("the object is not visible in any frame".into()));
    }
    Ok(Sequence {
        spec: spec.clone(),
        frames,
        truth,
    })
}

/// Image-space bounding box `(u0, v0, u1, v1)` (inclusive) of `mask`.
pub fn mask_bbox(mask: &[bool], width: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (u, v) = (i % width, i / width);
        bbox = Some(match bbox {
            None => (u, v, u, v),
            Some((a, b, c, d)) => (a.min(u), b.min(v), c.max(u), d.max(v)),
        });
    }
    bbox
}

/// An axis-aligned occluder entering the silhouette's bounding box from a
/// random side, with a random extent along that side, grown until it hides
/// at least `fraction` of the silhouette.
fn place_occluder(silhouette: &[bool], w: usize, h: usize, occlusion: &Occlusion, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut region = vec![false; w * h];
    let Some((u0, v0, u1, v1)) = mask_bbox(silhouette, w) else {
        return region;
    };
    let total = silhouette.iter().filter(|&&s| s).count();
    let side = rng.gen_range(0..4);
    let horizontal = side < 2;
    // Extent across the sweep direction, as a fraction of the bbox.
    let (lo, hi) = if horizontal { (v0, v1) } else { (u0, u1) };
    let span = hi - lo + 1;
    let keep = ((span as f64) * rng.gen_range(0.6..=1.0)).ceil() as usize;
    let start = lo + rng.gen_range(0..=span - keep.min(span));
    let across = (start, start + keep.min(span) - 1);
    let depth_max = if horizontal { u1 - u0 + 1 } else { v1 - v0 + 1 };
    for depth in 1..=depth_max {
        let rect = match side {
            0 => (u0, across.0, u0 + depth - 1, across.1),
            1 => (u1 + 1 - depth, across.0, u1, across.1),
            2 => (across.0, v0, across.1, v0 + depth - 1),
            _ => (across.0, v1 + 1 - depth, across.1, v1),
        };
        fill_occluder(&mut region, w, rect, occlusion.shape);
        let hidden = region.iter().zip(silhouette).filter(|(&r, &s)| r && s).count();
        if hidden as f64 >= occlusion.fraction * total as f64 {
            break;
        }
    }
    region
}

fn fill_occluder(region: &mut [bool], w: usize, (a, b, c, d): (usize, usize, usize, usize), shape: OccluderShape) {
    let (cu, cv) = ((a + c) as f64 / 2.0, (b + d) as f64 / 2.0);
    let (ru, rv) = ((c - a) as f64 / 2.0 + 0.5, (d - b) as f64 / 2.0 + 0.5);
    region.fill(false);
    for v in b..=d {
        for u in a..=c {
            let inside = match shape {
                OccluderShape::Rectangle => true,
                OccluderShape::Ellipse => ((u as f64 - cu) / ru).powi(2) + ((v as f64 - cv) / rv).powi(2) <= 1.0,
            };
            if inside {
                region[v * w + u] = true;
            }
        }
    }
}

/// Held-out benchmark sequences on `Split::Test` shapes.
pub fn benchmark_specs(count: usize, seed: u64, occlusion: f64) -> Vec<SequenceSpec> {
    priorlab::dataset(Split::Test, count, seed)
        .into_iter()
        .enumerate()
        .map(|(i, shape)| {
            let mut spec = SequenceSpec::new(shape, seeds::derive(seed, "sequence", i as u64));
            spec.azimuth_start_deg = 360.0 * (seeds::derive(seed, "azimuth", i as u64) % 3600) as f64 / 3600.0;
            spec.occlusion.fraction = occlusion;
            spec
        })
        .collect()
}

/// Schema tag of the sequence manifest.
pub const SEQUENCE_SCHEMA: &str = "FINVSEQ1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub index: usize,
    pub rgb: String,
    pub mask: String,
    pub validity: String,
    /// Row-major world-to-camera matrix.
    pub world_to_camera: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub frames: Vec<FrameEntry>,
    /// Generating spec, present for synthetic sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SequenceSpec>,
}

/// Writes the frames' PNGs and the manifest into `dir`.
pub fn save_sequence(frames: &[ObservationFrame], spec: Option<&SequenceSpec>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FinvError::io(dir, e))?;
    let mut entries = Vec::with_capacity(frames.len());
    for f in frames {
        f.validate()?;
        let (w, h) = (f.width(), f.height());
        let entry = FrameEntry {
            index: f.index,
            rgb: format!("rgb_{:04}.png", f.index),
            mask: format!("mask_{:04}.png", f.index),
            validity: format!("valid_{:04}.png", f.index),
            world_to_camera: flatten(&f.camera.world_to_camera),
            fx: f.camera.fx,
            fy: f.camera.fy,
            cx: f.camera.cx,
            cy: f.camera.cy,
            width: w,
            height: h,
        };
        renderer::save_rgb_png(&dir.join(&entry.rgb), w, h, &f.rgb)?;
        renderer::save_gray_png(&dir.join(&entry.mask), w, h, &f.object_mask)?;
        renderer::save_gray_png(&dir.join(&entry.validity), w, h, &f.validity_mask)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        schema: SEQUENCE_SCHEMA.into(),
        frames: entries,
        spec: spec.cloned(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| FinvError::io(&path, e))
}

fn flatten(m: &renderer::Mat4) -> [f64; 16] {
    let mut out = [0.0; 16];
    for r in 0..4 {
        out[4 * r..4 * r + 4].copy_from_slice(&m[r]);
    }
    out
}

/// Lazily loads frames from a sequence directory and records which frames
/// were read.
#[derive(Debug)]
pub struct SequenceReader {
    dir: PathBuf,
    manifest: Manifest,
    accessed: Mutex<Vec<usize>>,
}

impl SequenceReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| FinvError::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| FinvError::malformed("sequence manifest", &path, e))?;
        if manifest.schema != SEQUENCE_SCHEMA {
            return Err(FinvError::malformed(
                "sequence manifest",
                &path,
                format!("unknown schema {:?}", manifest.schema),
            ));
        }
        if let Some(spec) = &manifest.spec {
            spec.validate()
                .map_err(|e| FinvError::malformed("sequence manifest", &path, e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            accessed: Mutex::new(Vec::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn spec(&self) -> Option<&SequenceSpec> {
        self.manifest.spec.as_ref()
    }

    /// Camera of frame `i`, read from the manifest without touching images.
    pub fn camera(&self, i: usize) -> Result<Camera> {
        let e = self.entry(i)?;
        let m = &e.world_to_camera;
        let pose = [
            [m[0], m[1], m[2], m[3]],
            [m[4], m[5], m[6], m[7]],
            [m[8], m[9], m[10], m[11]],
            [m[12], m[13], m[14], m[15]],
        ];
        Camera::new(e.fx, e.fy, e.cx, e.cy, pose, e.width, e.height)
            .map_err(|err| FinvError::malformed("sequence manifest", self.dir.join(MANIFEST_FILE), err))
    }

    fn entry(&self, i: usize) -> Result<&FrameEntry> {
        self.manifest
            .frames
            .get(i)
            .ok_or_else(|| FinvError::InvalidInput(format!("frame {i} requested from a sequence of {}", self.len())))
    }

    /// Loads frame `i` and records the access.
    pub fn frame(&self, i: usize) -> Result<ObservationFrame> {
        let e = self.entry(i)?;
        self.accessed.lock().expect("access log").push(i);
        let camera = self.camera(i)?;
        let load = |name: &str, gray: bool| -> Result<Vec<f64>> {
            let path = self.dir.join(name);
            let (w, h, data) = if gray {
                renderer::load_gray_png(&path)?
            } else {
                renderer::load_rgb_png(&path)?
            };
            if (w, h) != (e.width, e.height) {
                return Err(FinvError::malformed(
                    "frame image",
                    &path,
                    format!("{w}x{h}, manifest says {}x{}", e.width, e.height),
                ));
            }
            Ok(data)
        };
        let rgb = load(&e.rgb, false)?;
        let object_mask = load(&e.mask, true)?
            .into_iter()
            .map(|v| (v >= 0.5) as u8 as f64)
            .collect();
        let validity_mask = load(&e.validity, true)?
            .into_iter()
            .map(|v| (v >= 0.5) as u8 as f64)
            .collect();
        let frame = ObservationFrame {
            index: e.index,
            camera,
            rgb,
            object_mask,
            validity_mask,
        };
        frame
            .validate()
            .map_err(|err| FinvError::malformed("frame", self.dir.join(&e.mask), err))?;
        Ok(frame)
    }

    /// Loads the first `k` frames.
    pub fn first(&self, k: usize) -> Result<Vec<ObservationFrame>> {
        if k > self.len() {
            return Err(FinvError::InvalidInput(format!(
                "{k} frames requested from a sequence of {}",
                self.len()
            )));
        }
        (0..k).map(|i| self.frame(i)).collect()
    }

    /// Frame indices read so far, in order.
    pub fn accessed(&self) -> Vec<usize> {
        self.accessed.lock().expect("access log").clone()
    }
}

pub fn load_sequence(dir: &Path) -> Result<Vec<ObservationFrame>> {
    let reader = SequenceReader::open(dir)?;
    reader.first(reader.len())
}

#[cfg(test)]
mod tests;
