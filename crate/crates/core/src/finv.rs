//! Filtering inversion: a population of latent hypotheses optimized in
//! parallel against a frozen prior, filtered by percentile rank and
//! resampled at every new observation, followed by per-candidate generator
//! refinement around the surviving latents.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{self, Array, Graph, LeafValues};
use crate::error::{FinvError, Result};
use crate::generator::{self, GeneratorParams, LatentPair, PriorSampler, VoxelFields};
use crate::harness::ObservationFrame;
use crate::objectives::{self, Bindings, ObjectiveConfig, ObjectiveGraph, PreparedFrame};
use crate::optimizer::{Adam, AdamConfig};
use crate::renderer::RenderConfig;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinvConfig {
    pub population_size: usize,
    pub gamma: f64,
    pub steps_t0: usize,
    pub steps_per_obs: usize,
    pub refine_steps: usize,
    pub geometry_step_cap: usize,
    pub latent_lr: f64,
    pub param_lr: f64,
    pub resample_sigma: f64,
    pub refine_top_k: usize,
    /// When false, new observations skip ranking and resampling.
    pub filter: bool,
    pub grid_size: usize,
}

impl Default for FinvConfig {
    fn default() -> Self {
        Self {
            population_size: 8,
            gamma: 0.3,
            steps_t0: 150,
            steps_per_obs: 100,
            refine_steps: 500,
            geometry_step_cap: 100,
            latent_lr: 1e-2,
            param_lr: 1e-3,
            resample_sigma: 0.1,
            refine_top_k: 3,
            filter: true,
            grid_size: 32,
        }
    }
}

impl FinvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FinvError::InvalidConfig(m.into()));
        if self.population_size == 0 {
            return bad("population size must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.latent_lr > 0.0 && self.param_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.resample_sigma >= 0.0) {
            return bad("resample_sigma must be nonnegative");
        }
        if self.refine_top_k == 0 {
            return bad("refine_top_k must be at least 1");
        }
        if self.grid_size < 2 {
            return bad("grid size must be at least 2");
        }
        Ok(())
    }

    /// Survivor count `max(1, ⌈γN⌉)`.
    pub fn survivors(&self) -> usize {
        survivor_count(self.gamma, self.population_size)
    }
}

/// `max(1, ⌈γ·n⌉)`, robust to products like `0.3 · 10` landing just above
/// an integer in floating point.
pub fn survivor_count(gamma: f64, n: usize) -> usize {
    let k = (gamma * n as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(n.max(1))
}

/// All settings a reconstruction needs besides the prior.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructionConfig {
    pub finv: FinvConfig,
    pub objective: ObjectiveConfig,
    pub render: RenderConfig,
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        self.finv.validate()?;
        self.objective.validate()?;
        self.render.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub id: usize,
    pub w: LatentPair,
    /// Eq. 1 objective at the last evaluation.
    pub cumulative_loss: f64,
    /// Summed perceptual term at the last evaluation (the ranking loss).
    pub perceptual_loss: f64,
    pub mask_loss: f64,
    pub lineage: Option<usize>,
    pub rng_seed: u64,
    /// Set when an evaluation produced non-finite values.
    pub dead: bool,
}

/// One row of the per-step loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub step: usize,
    pub particle_id: usize,
    pub objective: f64,
    pub perceptual: f64,
    pub mask: f64,
}

/// The running filter.
#[derive(Clone, Debug)]
pub struct FinvState {
    pub particles: Vec<Particle>,
    pub frames_seen: Vec<ObservationFrame>,
    pub prepared: Vec<PreparedFrame>,
    pub prior_params: Arc<GeneratorParams>,
    pub sampler: PriorSampler,
    pub config: ReconstructionConfig,
    /// Index of the most recent observation; `None` before the first.
    pub t: Option<usize>,
    pub master_seed: u64,
    pub next_id: usize,
    pub diagnostics: Vec<StepRecord>,
}

pub fn init_population(
    config: &ReconstructionConfig,
    params: Arc<GeneratorParams>,
    sampler: &PriorSampler,
    seed: u64,
) -> Result<FinvState> {
    config.validate()?;
    sampler.validate()?;
    if sampler.dim() != params.arch.d_latent {
        return Err(FinvError::InvalidInput(format!(
            "sampler has dimension {}, prior expects {}",
            sampler.dim(),
            params.arch.d_latent
        )));
    }
    let n = config.finv.population_size;
    let particles = (0..n)
        .map(|i| {
            let rng_seed = seeds::derive(seed, "init", i as u64);
            Particle {
                id: i,
                w: sampler.sample(rng_seed),
                cumulative_loss: f64::INFINITY,
                perceptual_loss: f64::INFINITY,
                mask_loss: f64::INFINITY,
                lineage: None,
                rng_seed,
                dead: false,
            }
        })
        .collect();
    Ok(FinvState {
        particles,
        frames_seen: Vec::new(),
        prepared: Vec::new(),
        prior_params: params,
        sampler: sampler.clone(),
        config: config.clone(),
        t: None,
        master_seed: seed,
        next_id: n,
        diagnostics: Vec::new(),
    })
}

struct ParticleRun {
    particle: Particle,
    records: Vec<StepRecord>,
}

fn run_particle(
    og: &ObjectiveGraph,
    params: &GeneratorParams,
    mut particle: Particle,
    steps: usize,
    lr: f64,
    t: usize,
) -> Result<ParticleRun> {
    let d = particle.w.dim();
    let mut adam = Adam::new(AdamConfig::with_lr(lr), &[d, d]);
    let mut records = Vec::with_capacity(steps + 1);
    let mut step = 0;
    loop {
        let values = match og.evaluate(&particle.w, params) {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                particle.dead = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let terms = og.values(&values);
        if !(terms.phase1.is_finite() && terms.perceptual.is_finite()) {
            particle.dead = true;
            break;
        }
        particle.cumulative_loss = terms.phase1;
        particle.perceptual_loss = terms.perceptual;
        particle.mask_loss = terms.mask;
        particle.dead = false;
        records.push(StepRecord {
            t,
            step,
            particle_id: particle.id,
            objective: terms.phase1,
            perceptual: terms.perceptual,
            mask: terms.mask,
        });
        if step == steps {
            break;
        }
        let grads = diff::backward_wrt(&og.graph, &values, og.phase1, &[og.w_geo, og.w_tex])?;
        let (gg, gt) = (grads.get(og.w_geo).expect("w_geo"), grads.get(og.w_tex).expect("w_tex"));
        if !(gg.all_finite() && gt.all_finite()) {
            particle.dead = true;
            break;
        }
        let mut next = particle.w.clone();
        adam.step(&mut [&mut next.geo, &mut next.tex], &[gg.data(), gt.data()]);
        if !next.is_finite() {
            particle.dead = true;
            break;
        }
        particle.w = next;
        step += 1;
    }
    if particle.dead {
        particle.cumulative_loss = f64::INFINITY;
        particle.perceptual_loss = f64::INFINITY;
        particle.mask_loss = f64::INFINITY;
    }
    Ok(ParticleRun { particle, records })
}

/// Runs `steps` Adam updates of every particle's latent on the Eq. 1
/// objective over all frames seen, then records the final objective.
/// With `steps = 0` the losses are only re-evaluated.
pub fn optimize_particles(state: &mut FinvState, steps: usize) -> Result<()> {
    if state.prepared.is_empty() {
        return Err(FinvError::InvalidInput("no frames observed yet".into()));
    }
    let params = Arc::clone(&state.prior_params);
    let placeholder = LatentPair::zeros(params.arch.d_latent);
    let og = ObjectiveGraph::build(
        &params,
        &placeholder,
        &state.prepared,
        &state.config.objective,
        Bindings::INVERSION,
    )?;
    let lr = state.config.finv.latent_lr;
    let t = state.t.unwrap_or(0);
    let particles = std::mem::take(&mut state.particles);
    let runs: Vec<ParticleRun> = particles
        .into_par_iter()
        .map(|p| run_particle(&og, &params, p, steps, lr, t))
        .collect::<Result<_>>()?;
    for run in runs {
        state.diagnostics.extend(run.records);
        state.particles.push(run.particle);
    }
    Ok(())
}

/// Particle order by `(dead, loss, id)` with `loss` picked by `key`.
fn rank_order(particles: &[Particle], key: impl Fn(&Particle) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..particles.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&particles[a], &particles[b]);
        pa.dead
            .cmp(&pb.dead)
            .then(key(pa).total_cmp(&key(pb)))
            .then(pa.id.cmp(&pb.id))
    });
    order
}

/// Keeps the `max(1, ⌈γN⌉)` particles with the smallest summed perceptual
/// loss, ties broken by smaller id. Survivors are returned in id order.
pub fn rank_and_filter(state: &mut FinvState) {
    let k = survivor_count(state.config.finv.gamma, state.particles.len());
    let order = rank_order(&state.particles, |p| p.perceptual_loss);
    let mut keep = vec![false; state.particles.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    let mut survivors: Vec<Particle> = std::mem::take(&mut state.particles)
        .into_iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect();
    survivors.sort_by_key(|p| p.id);
    state.particles = survivors;
}

/// Refills the population to `N` by cloning survivors round-robin in id
/// order, perturbing each clone with `N(0, σ²)` noise on both latents.
pub fn resample(state: &mut FinvState) {
    let n = state.config.finv.population_size;
    let sigma = state.config.finv.resample_sigma;
    let k = state.particles.len();
    if k == 0 {
        return;
    }
    let t = state.t.unwrap_or(0) as u64;
    let survivors = state.particles.clone();
    for c in 0..n.saturating_sub(k) {
        let parent = &survivors[c % k];
        let id = state.next_id;
        state.next_id += 1;
        let rng_seed = seeds::derive(state.master_seed, "resample", (t << 32) ^ id as u64);
        let w = if parent.dead || !parent.w.is_finite() {
            state.sampler.sample(rng_seed)
        } else {
            let mut w = parent.w.clone();
            if sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                let noise = Normal::new(0.0, sigma).expect("valid sigma");
                for v in w.geo.iter_mut().chain(w.tex.iter_mut()) {
                    *v += noise.sample(&mut rng);
                }
            }
            w
        };
        state.particles.push(Particle {
            id,
            w,
            cumulative_loss: parent.cumulative_loss,
            perceptual_loss: parent.perceptual_loss,
            mask_loss: parent.mask_loss,
            lineage: Some(parent.id),
            rng_seed,
            dead: false,
        });
    }
}

/// Adds one observation: the first is followed by `steps_t0` updates; every
/// later one by re-evaluation, filtering, resampling and `steps_per_obs`
/// updates over all frames so far.
pub fn step_observation(state: &mut FinvState, frame: &ObservationFrame) -> Result<()> {
    let prepared = PreparedFrame::new(
        frame,
        state.config.finv.grid_size,
        &state.config.render,
        &state.config.objective,
    )?;
    state.frames_seen.push(frame.clone());
    state.prepared.push(prepared);
    let t = state.t.map_or(0, |t| t + 1);
    state.t = Some(t);
    if t == 0 {
        optimize_particles(state, state.config.finv.steps_t0)
    } else {
        if state.config.finv.filter {
            optimize_particles(state, 0)?;
            rank_and_filter(state);
            resample(state);
        }
        optimize_particles(state, state.config.finv.steps_per_obs)
    }
}

/// Runs Phase I over `frames` in order.
pub fn run_phase1(
    frames: &[ObservationFrame],
    params: Arc<GeneratorParams>,
    sampler: &PriorSampler,
    config: &ReconstructionConfig,
    seed: u64,
) -> Result<FinvState> {
    if frames.is_empty() {
        return Err(FinvError::InvalidInput(
            "reconstruction needs at least one frame".into(),
        ));
    }
    let mut state = init_population(config, params, sampler, seed)?;
    for f in frames {
        step_observation(&mut state, f)?;
    }
    Ok(state)
}

/// A refined hypothesis.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub particle_id: usize,
    pub w: LatentPair,
    pub params: GeneratorParams,
    /// Eq. 1 objective on all frames after refinement.
    pub final_loss: f64,
    /// Eq. 1 objective before refinement.
    pub phase1_loss: f64,
    pub records: Vec<RefineRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineRecord {
    pub particle_id: usize,
    pub step: usize,
    pub geometry: f64,
    pub texture: f64,
}

fn refine_one(
    prior: &GeneratorParams,
    particle: &Particle,
    frames: &[PreparedFrame],
    config: &ReconstructionConfig,
) -> Result<Candidate> {
    let fc = &config.finv;
    let oc = &config.objective;
    let w = &particle.w;
    let mut params = prior.clone();
    let phi_sizes: Vec<usize> = params.phi.tensors().iter().map(|t| t.len()).collect();
    let theta_sizes: Vec<usize> = params.theta.tensors().iter().map(|t| t.len()).collect();
    let mut adam_phi = Adam::new(AdamConfig::with_lr(fc.param_lr), &phi_sizes);
    let mut adam_theta = Adam::new(AdamConfig::with_lr(fc.param_lr), &theta_sizes);
    let cap = fc.geometry_step_cap.min(fc.refine_steps);
    let mut records = Vec::with_capacity(fc.refine_steps);

    let joint = (cap > 0)
        .then(|| ObjectiveGraph::build(&params, w, frames, oc, Bindings::REFINE))
        .transpose()?;
    for step in 0..cap {
        let og = joint.as_ref().expect("joint graph");
        let values = og.evaluate(w, &params)?;
        let terms = og.values(&values);
        records.push(RefineRecord {
            particle_id: particle.id,
            step,
            geometry: terms.mask,
            texture: terms.texture,
        });
        let mut gphi = diff::backward_wrt(&og.graph, &values, og.mask, &og.phi.tensors)?;
        let mut gtheta = diff::backward_wrt(&og.graph, &values, og.texture, &og.theta.tensors)?;
        let gp: Vec<Array> = og
            .phi
            .tensors
            .iter()
            .map(|&id| gphi.take(id).expect("phi grad"))
            .collect();
        let gt: Vec<Array> = og
            .theta
            .tensors
            .iter()
            .map(|&id| gtheta.take(id).expect("theta grad"))
            .collect();
        adam_phi.step_arrays(&mut params.phi.tensors_mut(), &gp.iter().collect::<Vec<_>>());
        adam_theta.step_arrays(&mut params.theta.tensors_mut(), &gt.iter().collect::<Vec<_>>());
        if !params.is_finite() {
            return Err(FinvError::Numerical(format!(
                "refinement of particle {} diverged",
                particle.id
            )));
        }
    }
    drop(joint);
    if fc.refine_steps > cap {
        // Geometry is frozen from here on; fold it into the graph.
        let og = ObjectiveGraph::build(&params, w, frames, oc, Bindings::REFINE_TEXTURE)?;
        for step in cap..fc.refine_steps {
            let values = og.evaluate(w, &params)?;
            let terms = og.values(&values);
            records.push(RefineRecord {
                particle_id: particle.id,
                step,
                geometry: terms.mask,
                texture: terms.texture,
            });
            let mut gtheta = diff::backward_wrt(&og.graph, &values, og.texture, &og.theta.tensors)?;
            let gt: Vec<Array> = og
                .theta
                .tensors
                .iter()
                .map(|&id| gtheta.take(id).expect("theta grad"))
                .collect();
            adam_theta.step_arrays(&mut params.theta.tensors_mut(), &gt.iter().collect::<Vec<_>>());
            if !params.theta.is_finite() {
                return Err(FinvError::Numerical(format!(
                    "refinement of particle {} diverged",
                    particle.id
                )));
            }
        }
    }
    let final_loss = objectives::phase1_objective(w, &params, frames, oc)?;
    Ok(Candidate {
        particle_id: particle.id,
        w: w.clone(),
        params,
        final_loss,
        phase1_loss: particle.cumulative_loss,
        records,
    })
}

/// Refines the generator around each of the `refine_top_k` best particles.
/// Candidates are returned in Phase I rank order.
pub fn refine(state: &FinvState) -> Result<Vec<Candidate>> {
    if state.prepared.is_empty() {
        return Err(FinvError::InvalidInput("refinement needs Phase I results".into()));
    }
    let order = rank_order(&state.particles, |p| p.cumulative_loss);
    let top: Vec<&Particle> = order
        .iter()
        .take(state.config.finv.refine_top_k)
        .map(|&i| &state.particles[i])
        .filter(|p| !p.dead)
        .collect();
    if top.is_empty() {
        return Err(FinvError::Numerical("every particle diverged during Phase I".into()));
    }
    top.into_par_iter()
        .map(|p| refine_one(&state.prior_params, p, &state.prepared, &state.config))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub w: LatentPair,
    pub params: GeneratorParams,
    pub final_loss: f64,
    pub candidates: Vec<Candidate>,
    pub diagnostics: Vec<StepRecord>,
    pub particles: Vec<Particle>,
}

impl ReconstructionResult {
    pub fn decode(&self, grid_size: usize) -> Result<VoxelFields> {
        generator::decode(&self.w, &self.params, grid_size)
    }
}

/// Picks the candidate with the lowest final loss (first on ties).
pub fn select(state: &FinvState, candidates: Vec<Candidate>) -> Result<ReconstructionResult> {
    let best = candidates
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.final_loss.total_cmp(&b.1.final_loss).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| FinvError::Numerical("no refinement candidates".into()))?;
    Ok(ReconstructionResult {
        w: candidates[best].w.clone(),
        params: candidates[best].params.clone(),
        final_loss: candidates[best].final_loss,
        candidates,
        diagnostics: state.diagnostics.clone(),
        particles: state.particles.clone(),
    })
}

/// Phase I over `frames`, refinement, and selection of the best candidate.
pub fn reconstruct(
    frames: &[ObservationFrame],
    params: Arc<GeneratorParams>,
    sampler: &PriorSampler,
    config: &ReconstructionConfig,
    seed: u64,
) -> Result<ReconstructionResult> {
    let state = run_phase1(frames, params, sampler, config, seed)?;
    let candidates = refine(&state)?;
    select(&state, candidates)
}

/// Checks that `ks` is strictly increasing within `1..=available`.
pub fn validate_prefixes(ks: &[usize], available: usize) -> Result<()> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|p| p[0] >= p[1]) || ks[ks.len() - 1] > available {
        return Err(FinvError::InvalidInput(format!(
            "prefix lengths {ks:?} must be strictly increasing within 1..={available}"
        )));
    }
    Ok(())
}

/// One reconstruction per prefix length in `ks`, sharing a single Phase I
/// pass. Each result equals `reconstruct(&frames[..k], ..)` with the same seed,
/// because particle initialization and resampling draws depend only on the
/// seed, the observation index and particle ids.
pub fn reconstruct_prefixes(
    frames: &[ObservationFrame],
    ks: &[usize],
    params: Arc<GeneratorParams>,
    sampler: &PriorSampler,
    config: &ReconstructionConfig,
    seed: u64,
) -> Result<Vec<ReconstructionResult>> {
    validate_prefixes(ks, frames.len())?;
    let mut state = init_population(config, params, sampler, seed)?;
    let mut results = Vec::with_capacity(ks.len());
    for &k in ks {
        for f in &frames[state.frames_seen.len()..k] {
            step_observation(&mut state, f)?;
        }
        let candidates = refine(&state)?;
        results.push(select(&state, candidates)?);
    }
    Ok(results)
}

impl FinvState {
    /// Copy without observations or prepared ray plans, for cheap caching.
    pub fn snapshot(&self) -> FinvState {
        FinvState {
            particles: self.particles.clone(),
            frames_seen: Vec::new(),
            prepared: Vec::new(),
            prior_params: Arc::clone(&self.prior_params),
            sampler: self.sampler.clone(),
            config: self.config.clone(),
            t: self.t,
            master_seed: self.master_seed,
            next_id: self.next_id,
            diagnostics: self.diagnostics.clone(),
        }
    }

    /// Reattaches the observations a snapshot was taken after.
    pub fn restore(snapshot: &FinvState, frames: &[ObservationFrame]) -> Result<FinvState> {
        let seen = snapshot.t.map_or(0, |t| t + 1);
        if frames.len() != seen {
            return Err(FinvError::InvalidInput(format!(
                "snapshot was taken after {seen} observations, got {}",
                frames.len()
            )));
        }
        let c = &snapshot.config;
        let mut state = snapshot.snapshot();
        state.prepared = PreparedFrame::prepare_all(frames, c.finv.grid_size, &c.render, &c.objective)?;
        state.frames_seen = frames.to_vec();
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub steps: usize,
    pub lr: f64,
    pub init_logit: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.05,
            init_logit: 0.0,
        }
    }
}

/// Fits raw occupancy logits and colors (through a sigmoid) directly to the
/// frames, with the same renderer and Eq. 1 losses and no decoder.
pub fn baseline_direct_fit(
    frames: &[ObservationFrame],
    config: &ReconstructionConfig,
    baseline: &BaselineConfig,
) -> Result<VoxelFields> {
    if frames.is_empty() {
        return Err(FinvError::InvalidInput("direct fit needs at least one frame".into()));
    }
    config.validate()?;
    let v = config.finv.grid_size;
    let n = v.pow(3);
    let prepared = PreparedFrame::prepare_all(frames, v, &config.render, &config.objective)?;
    let mut g = Graph::new();
    let logits = g.leaf("logits", &[n], true);
    let color_logits = g.leaf("color_logits", &[n, 3], true);
    let colors = g.sigmoid(color_logits)?;
    let mut total = None;
    for f in &prepared {
        let l = objectives::frame_loss_nodes(&mut g, f, logits, colors)?;
        let m = g.scale(l.mask, config.objective.mask_weight)?;
        let s = g.add(l.perceptual, m)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one frame");
    let mut occ = Array::full(&[n], baseline.init_logit);
    let mut col = Array::zeros(&[n, 3]);
    let mut adam = Adam::new(AdamConfig::with_lr(baseline.lr), &[n, 3 * n]);
    for _ in 0..baseline.steps {
        let leaves = LeafValues::from([(logits, occ.clone()), (color_logits, col.clone())]);
        let values = diff::evaluate(&g, &leaves)?;
        let grads = diff::backward_wrt(&g, &values, total, &[logits, color_logits])?;
        let (go, gc) = (
            grads.get(logits).expect("logit grad"),
            grads.get(color_logits).expect("color grad"),
        );
        adam.step(&mut [occ.data_mut(), col.data_mut()], &[go.data(), gc.data()]);
    }
    Ok(VoxelFields {
        grid_size: v,
        occupancy_logits: occ.into_data(),
        colors: col.data().iter().map(|&c| diff::sigmoid(c)).collect(),
    })
}

#[derive(Serialize)]
struct ChosenLatent<'a> {
    /// Index of the chosen `refined_{i}.bin`.
    candidate: usize,
    particle_id: usize,
    final_loss: f64,
    w: &'a LatentPair,
}

/// Writes the reconstruction bundle into `dir`: prior reference, refined
/// checkpoints, chosen latent, per-step losses and the config snapshot.
pub fn write_run_bundle(
    dir: &Path,
    result: &ReconstructionResult,
    prior_ref: &str,
    config_snapshot: &str,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FinvError::io(dir, e))?;
    let write = |name: &str, data: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, data).map_err(|e| FinvError::io(&p, e))
    };
    write("prior_ref.txt", format!("{prior_ref}\n").as_bytes())?;
    write("config.toml", config_snapshot.as_bytes())?;
    let best = result
        .candidates
        .iter()
        .position(|c| c.w == result.w && c.final_loss == result.final_loss)
        .unwrap_or(0);
    for (i, c) in result.candidates.iter().enumerate() {
        generator::save_checkpoint(&c.params, &dir.join(format!("refined_{i}.bin")))?;
    }
    let chosen = ChosenLatent {
        candidate: best,
        particle_id: result.candidates[best].particle_id,
        final_loss: result.final_loss,
        w: &result.w,
    };
    write(
        "latent.json",
        serde_json::to_string_pretty(&chosen).expect("latent json").as_bytes(),
    )?;
    write_loss_csv(&dir.join("losses.csv"), &result.diagnostics)
}

pub fn write_loss_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FinvError::malformed("csv", path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| FinvError::malformed("csv", path, e))?;
    }
    w.flush().map_err(|e| FinvError::io(path, e))
}
