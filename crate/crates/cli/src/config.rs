//! The run configuration: one TOML file plus `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use finv::evalkit::{EvalConfig, Variant};
use finv::finv::{BaselineConfig, FinvConfig, ReconstructionConfig};
use finv::harness::{self, SequenceSpec};
use finv::objectives::ObjectiveConfig;
use finv::priorlab::{PretrainConfig, Split};
use finv::renderer::RenderConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Output locations, relative to the `--out` root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub prior: PathBuf,
    pub runs: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            prior: "prior".into(),
            runs: "runs".into(),
            reports: "reports".into(),
        }
    }
}

/// Benchmark sequence generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub sequences: usize,
    pub split: Split,
    pub frames: usize,
    pub image_size: usize,
    pub grid_size: usize,
    pub occlusion: f64,
    pub radius: f64,
    pub elevation_deg: f64,
    pub azimuth_span_deg: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            sequences: 20,
            split: Split::Test,
            frames: 10,
            image_size: 64,
            grid_size: 32,
            occlusion: 0.3,
            radius: 1.6,
            elevation_deg: 25.0,
            azimuth_span_deg: 180.0,
        }
    }
}

/// Protocol settings; rendering and losses come from the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub eval_start: usize,
    pub bbox_dilation: f64,
    pub iso: f64,
    pub surface_samples: usize,
    pub f1_tau_fraction: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            eval_start: d.eval_start,
            bbox_dilation: d.bbox_dilation,
            iso: d.iso,
            surface_samples: d.surface_samples,
            f1_tau_fraction: d.f1_tau_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    pub ks: Vec<usize>,
    pub master_seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            ks: vec![1, 3, 5],
            master_seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub harness: HarnessConfig,
    pub prior: PretrainConfig,
    pub finv: FinvConfig,
    pub objective: ObjectiveConfig,
    pub render: RenderConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalSettings,
    pub ablate: AblateConfig,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `overrides` of the
    /// form `section.key=value`, where `value` is a TOML literal or a bare
    /// string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut root = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let config: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.reconstruction().validate()?;
        self.prior.validate()?;
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Validation("seed must fit a signed 64-bit integer".into()));
        }
        if self.ablate.variants.is_empty() || self.ablate.ks.is_empty() || self.ablate.master_seeds.is_empty() {
            return Err(CliError::Validation(
                "ablate needs variants, ks and master_seeds".into(),
            ));
        }
        if self.eval.eval_start >= self.harness.frames {
            return Err(CliError::Validation(format!(
                "eval_start {} leaves no evaluation frames in {}-frame sequences",
                self.eval.eval_start, self.harness.frames
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn reconstruction(&self) -> ReconstructionConfig {
        ReconstructionConfig {
            finv: self.finv.clone(),
            objective: self.objective.clone(),
            render: self.render.clone(),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            eval_start: self.eval.eval_start,
            bbox_dilation: self.eval.bbox_dilation,
            iso: self.eval.iso,
            surface_samples: self.eval.surface_samples,
            f1_tau_fraction: self.eval.f1_tau_fraction,
            render: self.render.clone(),
            objective: self.objective.clone(),
            seed: self.seed,
        }
    }

    /// Sequence specs of the benchmark, one per generated shape.
    pub fn sequence_specs(&self) -> Vec<SequenceSpec> {
        let h = &self.harness;
        let shapes = finv::priorlab::dataset(h.split, h.sequences, self.seed);
        harness::benchmark_specs(h.sequences, self.seed, h.occlusion)
            .into_iter()
            .zip(shapes)
            .map(|(spec, shape)| {
                let mut spec = spec.with_resolution(h.image_size);
                spec.shape = shape;
                spec.frames = h.frames;
                spec.grid_size = h.grid_size;
                spec.radius = h.radius;
                spec.elevation_deg = h.elevation_deg;
                spec.azimuth_span_deg = h.azimuth_span_deg;
                spec
            })
            .collect()
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("malformed override key `{key}`")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = parts.split_last().expect("nonempty key");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("`{p}` in override `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
