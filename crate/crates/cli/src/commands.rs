//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use finv::evalkit::{self, AblationRow, BenchmarkItem, EvalReport, Variant};
use finv::generator::{self, VoxelFields};
use finv::harness::{self, SequenceReader, MANIFEST_FILE, SURFACE_POINTS};
use finv::priorlab::{self, PriorBundle, ShapeTruth, Split};
use finv::{finv as core, renderer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{resolve, CliError};

pub const RUN_RECORD: &str = "run.json";
pub const FIELDS_FILE: &str = "fields.bin";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

pub struct Context {
    pub root: PathBuf,
    pub force: bool,
    pub config: RunConfig,
}

impl Context {
    fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.root, p)
    }

    /// Fails if `path` exists and `--force` was not given.
    fn check_output(&self, path: &Path) -> Result<(), CliError> {
        if path.exists() && !self.force {
            return Err(CliError::Validation(format!(
                "{} already exists; pass --force to replace it",
                path.display()
            )));
        }
        Ok(())
    }

    /// Empties and recreates the output directory `dir`.
    fn replace_dir(&self, dir: &Path) -> Result<(), CliError> {
        self.check_output(dir)?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
    }

    fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        write(&dir.join(CONFIG_SNAPSHOT), self.config.to_toml().as_bytes())
    }

    fn load_prior(&self) -> Result<PriorBundle, CliError> {
        Ok(PriorBundle::load(&self.path(&self.config.paths.prior))?)
    }
}

fn write(path: &Path, data: &[u8]) -> Result<(), CliError> {
    fs::write(path, data).map_err(|e| CliError::io(path, e))
}

/// What `reconstruct` ran, for later evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    /// Sequence directory relative to the output root, as given.
    pub sequence: PathBuf,
    pub k: usize,
    pub variant: Variant,
    pub seed: u64,
    pub frames_read: Vec<usize>,
}

fn truth_for(reader: &SequenceReader, dir: &Path) -> Result<ShapeTruth, CliError> {
    let spec = reader.spec().ok_or_else(|| {
        CliError::Validation(format!(
            "{} has no generating spec, so its ground truth is unknown",
            dir.display()
        ))
    })?;
    Ok(priorlab::generate_shape(&spec.shape, spec.grid_size, SURFACE_POINTS)?)
}

fn dir_name(p: &Path) -> String {
    p.file_name()
        .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Subdirectories of `dir` containing `marker`, sorted by name.
fn list_dirs_with(dir: &Path, marker: &str) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.join(marker).is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn synth(ctx: &Context) -> Result<(), CliError> {
    let specs = ctx.config.sequence_specs();
    for s in &specs {
        s.validate()?;
    }
    let dir = ctx.path(&ctx.config.paths.data);
    ctx.check_output(&dir)?;
    let sequences = specs
        .par_iter()
        .map(|s| harness::make_sequence(s, &ctx.config.render))
        .collect::<Result<Vec<_>, _>>()?;
    ctx.replace_dir(&dir)?;
    for (i, seq) in sequences.iter().enumerate() {
        harness::save_sequence(&seq.frames, Some(&seq.spec), &dir.join(format!("seq_{i:03}")))?;
    }
    ctx.write_snapshot(&dir)?;
    println!("wrote {} sequences to {}", sequences.len(), dir.display());
    Ok(())
}

pub fn pretrain(ctx: &Context) -> Result<(), CliError> {
    let dir = ctx.path(&ctx.config.paths.prior);
    ctx.check_output(&dir)?;
    let c = &ctx.config;
    let shapes = priorlab::dataset(Split::Train, c.prior.shapes, c.seed);
    let bundle = priorlab::pretrain_prior(&shapes, &c.prior, c.seed)?;
    let iou = priorlab::training_iou(&bundle, &shapes)?;
    ctx.replace_dir(&dir)?;
    bundle.save(&dir)?;
    ctx.write_snapshot(&dir)?;
    println!("final training IoU: {iou:.4}");
    println!("wrote prior to {}", dir.display());
    Ok(())
}

pub fn reconstruct(
    ctx: &Context,
    sequence: &Path,
    k: usize,
    variant: Variant,
    name: Option<&str>,
) -> Result<(), CliError> {
    let c = &ctx.config;
    let eval = c.eval_config();
    if k == 0 || k > eval.eval_start {
        return Err(CliError::Validation(format!("k must lie in 1..={}", eval.eval_start)));
    }
    let seq_dir = ctx.path(sequence);
    let reader = SequenceReader::open(&seq_dir)?;
    if reader.len() <= eval.eval_start {
        return Err(CliError::Validation(format!(
            "{} has {} frames and none left for evaluation",
            seq_dir.display(),
            reader.len()
        )));
    }
    let name = name.map_or_else(
        || format!("{}-{}-k{k}", dir_name(&seq_dir), variant.label()),
        str::to_string,
    );
    let run_dir = ctx.path(&c.paths.runs).join(name);
    ctx.check_output(&run_dir)?;
    let rc = variant.config(&c.reconstruction());
    let prior = match variant {
        Variant::Baseline => None,
        _ => Some(ctx.load_prior()?),
    };

    let frames = reader.first(k)?;
    let frames_read = reader.accessed();
    let (fields, result) = match &prior {
        None => (core::baseline_direct_fit(&frames, &rc, &c.baseline)?, None),
        Some(p) => {
            let result = core::reconstruct(&frames, Arc::new(p.params.clone()), &p.sampler, &rc, c.seed)?;
            (result.decode(rc.finv.grid_size)?, Some(result))
        }
    };

    ctx.replace_dir(&run_dir)?;
    match &result {
        Some(r) => core::write_run_bundle(&run_dir, r, &c.paths.prior.display().to_string(), &c.to_toml())?,
        None => ctx.write_snapshot(&run_dir)?,
    }
    generator::save_fields(&fields, &run_dir.join(FIELDS_FILE))?;
    let mesh = evalkit::extract_mesh(&fields, eval.iso)?;
    mesh.write_obj(&run_dir.join("mesh.obj"))?;
    let views = run_dir.join("views");
    fs::create_dir_all(&views).map_err(|e| CliError::io(&views, e))?;
    for i in eval.eval_start..reader.len() {
        let camera = reader.camera(i)?;
        let out = renderer::render(&fields, &camera, &c.render)?;
        renderer::save_rgb_png(
            &views.join(format!("frame_{i:03}.png")),
            camera.width,
            camera.height,
            &out.rgb,
        )?;
    }
    let record = RunRecord {
        sequence: sequence.to_path_buf(),
        k,
        variant,
        seed: c.seed,
        frames_read,
    };
    write(
        &run_dir.join(RUN_RECORD),
        serde_json::to_string_pretty(&record)
            .expect("run record serializes")
            .as_bytes(),
    )?;
    println!(
        "{} from {k} frame(s): {} triangles, wrote {}",
        variant.label(),
        mesh.triangles.len(),
        run_dir.display()
    );
    Ok(())
}

fn read_run(dir: &Path) -> Result<RunRecord, CliError> {
    let path = dir.join(RUN_RECORD);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn evaluate_run(ctx: &Context, dir: &Path) -> Result<AblationRow, CliError> {
    let record = read_run(dir)?;
    let seq_dir = ctx.path(&record.sequence);
    let reader = SequenceReader::open(&seq_dir)?;
    let truth = truth_for(&reader, &seq_dir)?;
    let fields: VoxelFields = generator::load_fields(&dir.join(FIELDS_FILE))?;
    let cameras = (0..record.k).map(|i| reader.camera(i)).collect::<Result<Vec<_>, _>>()?;
    let (records, shape) = evalkit::evaluate_fields(&fields, &reader, &truth, &cameras, &ctx.config.eval_config())?;
    Ok(AblationRow {
        variant: record.variant,
        seed: record.seed,
        sequence: dir_name(&seq_dir),
        report: EvalReport::new(record.k, records, shape, record.frames_read),
    })
}

fn write_reports(ctx: &Context, dir: &Path, rows: &[AblationRow]) -> Result<Vec<evalkit::VariantSummary>, CliError> {
    let summaries = evalkit::summarize(rows);
    ctx.replace_dir(dir)?;
    evalkit::write_view_csv(&dir.join("views.csv"), rows)?;
    evalkit::write_sequence_csv(&dir.join("sequences.csv"), rows)?;
    evalkit::write_summary_csv(&dir.join("summary.csv"), &summaries)?;
    ctx.write_snapshot(dir)?;
    Ok(summaries)
}

fn print_summaries(summaries: &[evalkit::VariantSummary]) {
    println!("variant          k  runs  PSNR     SSIM    perceptual-proxy");
    for s in summaries {
        println!(
            "{:<16} {:>1}  {:>4}  {:>7.3}  {:.4}  {:.5}",
            s.variant.label(),
            s.k,
            s.count,
            s.mean_psnr,
            s.mean_ssim,
            s.mean_perceptual_proxy
        );
    }
}

pub fn evaluate(ctx: &Context, runs: &[PathBuf]) -> Result<(), CliError> {
    let dirs = if runs.is_empty() {
        list_dirs_with(&ctx.path(&ctx.config.paths.runs), RUN_RECORD)?
    } else {
        runs.iter().map(|r| ctx.path(r)).collect()
    };
    if dirs.is_empty() {
        return Err(CliError::Validation("no run directories to evaluate".into()));
    }
    let out = ctx.path(&ctx.config.paths.reports).join("evaluate");
    ctx.check_output(&out)?;
    let rows = dirs
        .par_iter()
        .map(|d| evaluate_run(ctx, d))
        .collect::<Result<Vec<_>, _>>()?;
    let summaries = write_reports(ctx, &out, &rows)?;
    print_summaries(&summaries);
    println!("wrote reports to {}", out.display());
    Ok(())
}

pub fn ablate(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let out = ctx.path(&c.paths.reports).join("ablate");
    ctx.check_output(&out)?;
    let data = ctx.path(&c.paths.data);
    let benchmark = list_dirs_with(&data, MANIFEST_FILE)?
        .into_iter()
        .map(|dir| {
            let reader = SequenceReader::open(&dir)?;
            let truth = truth_for(&reader, &dir)?;
            Ok(BenchmarkItem {
                name: dir_name(&dir),
                reader,
                truth,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if benchmark.is_empty() {
        return Err(CliError::Validation(format!("no sequences under {}", data.display())));
    }
    let prior = ctx.load_prior()?;
    let methods = Variant::methods(
        &c.ablate.variants,
        &c.reconstruction(),
        &c.baseline,
        &Arc::new(prior.params),
        &prior.sampler,
    );
    let table = evalkit::run_ablation(
        &benchmark,
        &methods,
        &c.ablate.ks,
        &c.ablate.master_seeds,
        &c.eval_config(),
    )?;
    let summaries = write_reports(ctx, &out, &table.rows)?;
    print_summaries(&summaries);
    println!("wrote reports to {}", out.display());
    Ok(())
}

pub fn export_mesh(ctx: &Context, run: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let run_dir = ctx.path(run);
    let fields = generator::load_fields(&run_dir.join(FIELDS_FILE))?;
    let path = match output {
        Some(p) => ctx.path(p),
        None => ctx
            .path(&ctx.config.paths.reports)
            .join("meshes")
            .join(format!("{}.obj", dir_name(&run_dir))),
    };
    ctx.check_output(&path)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mesh = evalkit::extract_mesh(&fields, ctx.config.eval.iso)?;
    mesh.write_obj(&path)?;
    println!(
        "wrote {} vertices, {} triangles to {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        path.display()
    );
    Ok(())
}
