//! Nesterov-momentum descent with the alternating normal/position schedule
//! and simultaneous multi-view batching.
//!
//! Each cycle samples a set of views, runs `t_n` steps that update normals
//! from the image gradient (positions meanwhile only follow the regularizer
//! forces), then `t_p` steps that update positions through the full backward
//! pass plus regularizers. Gradients are evaluated at the Nesterov look-ahead
//! point. Normal gradients are projected onto the tangent space of the unit
//! sphere and normals renormalized after every update.

use crate::backward::{backward_normals, backward_pass, GradientBuffer};
use crate::config::OptimizationConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::forward::{rasterize_report, RenderOutput, ShadingMode};
use crate::geometry::{bounding_box, bounding_box_diagonal, Camera, ImagePlanes, PointCloud};
use crate::loss::{smape, total_loss, LossReport};
use crate::regularize::{
    build_neighbor_graph_with_radius, compute_frames, default_radius, projection_loss_with_frames,
    repulsion_loss_with_frames,
};
use crate::views::sample_sphere_views;
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SEED_TAG_VIEWS: u64 = 1;
pub const SEED_TAG_SUBSET: u64 = 2;
pub const SEED_TAG_NOISE: u64 = 3;

/// Stable seed derivation so every module draw gets its own stream.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Normal,
    Position,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Normal => write!(f, "normal"),
            Phase::Position => write!(f, "position"),
        }
    }
}

/// Momentum buffers and schedule counters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub velocity_position: Vec<Vector3<f64>>,
    pub velocity_normal: Vec<Vector3<f64>>,
    pub cycle_index: usize,
    pub step_index: usize,
    pub phase: Phase,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            velocity_position: vec![Vector3::zeros(); n],
            velocity_normal: vec![Vector3::zeros(); n],
            cycle_index: 0,
            step_index: 0,
            phase: Phase::Normal,
        }
    }

    /// Velocities are only meaningful for a fixed point count.
    pub fn ensure_len(&mut self, n: usize) {
        if self.velocity_position.len() != n {
            self.velocity_position = vec![Vector3::zeros(); n];
            self.velocity_normal = vec![Vector3::zeros(); n];
        }
    }
}

/// One Nesterov update: v' = mu v - lr g, params' = params + v'. The caller
/// supplies `gradient` evaluated at the look-ahead point params + mu v.
pub fn nesterov_step(
    params: &mut [Vector3<f64>],
    velocity: &mut [Vector3<f64>],
    gradient: &[Vector3<f64>],
    lr: f64,
    momentum: f64,
) {
    assert_eq!(params.len(), velocity.len());
    assert_eq!(params.len(), gradient.len());
    for i in 0..params.len() {
        velocity[i] = velocity[i] * momentum - gradient[i] * lr;
        params[i] += velocity[i];
    }
}

/// Clip per-point gradient norms at `factor` times the median non-zero norm.
pub fn clip_gradients(grads: &mut [Vector3<f64>], factor: f64) {
    if factor <= 0.0 {
        return;
    }
    let mut norms: Vec<f64> = grads
        .iter()
        .map(|g| g.norm())
        .filter(|&n| n > 0.0)
        .collect();
    if norms.is_empty() {
        return;
    }
    norms.sort_by(|a, b| a.partial_cmp(b).expect("finite norms"));
    let median = norms[norms.len() / 2];
    let cap = factor * median;
    for g in grads.iter_mut() {
        let n = g.norm();
        if n > cap {
            *g *= cap / n;
        }
    }
}

/// Where reference images come from.
pub enum References {
    /// Fixed camera/image pairs. When there are more pairs than
    /// `views_per_step`, each cycle samples a subset.
    Fixed(Vec<(Camera, ImagePlanes)>),
    /// A target cloud rendered on freshly sampled sphere views every cycle.
    FromTarget {
        target: PointCloud,
        /// Camera distance as a multiple of the target bbox diagonal.
        distance_rel: f64,
        focal_px: f64,
        width: u32,
        height: u32,
    },
}

/// Per-step log record. `log_line` is the canonical text form.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub cycle: usize,
    pub step: usize,
    pub phase: Phase,
    pub image_loss: f64,
    pub l_p: f64,
    pub l_r: f64,
    pub total: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{} {} {} {} {} {} {}",
            self.cycle, self.step, self.phase, self.image_loss, self.l_p, self.l_r, self.total
        )
    }
}

/// Optional callbacks for progress and failure diagnostics.
#[derive(Default)]
pub struct OptimizationHooks<'a> {
    /// Called after every step with the record and the updated cloud.
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord, &PointCloud)>,
    /// Called when a non-finite loss or gradient aborts the run.
    pub on_nonfinite: Option<&'a mut dyn FnMut(&GradientBuffer, &PointCloud)>,
}

struct ViewBatch {
    cameras: Vec<Camera>,
    references: Vec<ImagePlanes>,
}

fn views_for_cycle(
    refs: &References,
    cfg: &OptimizationConfig,
    mode: ShadingMode,
    seed: u64,
    cycle: usize,
) -> Result<ViewBatch> {
    match refs {
        References::Fixed(pairs) => {
            if pairs.is_empty() {
                return Err(Error::MissingInput("no reference views".into()));
            }
            let mut indices: Vec<usize> = (0..pairs.len()).collect();
            if pairs.len() > cfg.views_per_step {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    SEED_TAG_SUBSET,
                    cycle as u64,
                ));
                indices.shuffle(&mut rng);
                indices.truncate(cfg.views_per_step);
            }
            Ok(ViewBatch {
                cameras: indices.iter().map(|&i| pairs[i].0.clone()).collect(),
                references: indices.iter().map(|&i| pairs[i].1.clone()).collect(),
            })
        }
        References::FromTarget {
            target,
            distance_rel,
            focal_px,
            width,
            height,
        } => {
            let (lo, hi) = bounding_box(target)?;
            let center = (lo + hi) / 2.0;
            let diag = bounding_box_diagonal(target)?;
            let radius = (distance_rel * diag).max(1e-6);
            let set = sample_sphere_views(
                center,
                radius,
                cfg.views_per_step,
                derive_seed(seed, SEED_TAG_VIEWS, cycle as u64),
                0.05,
                *focal_px,
                *width,
                *height,
            )?;
            let references: Vec<ImagePlanes> = set
                .cameras
                .iter()
                .map(|cam| {
                    rasterize_report(target, cam, mode, cfg).map(|out| out.image.planes)
                })
                .collect::<Result<_>>()?;
            Ok(ViewBatch {
                cameras: set.cameras,
                references,
            })
        }
    }
}

fn lookahead_cloud(cloud: &PointCloud, state: &OptimizerState, momentum: f64) -> PointCloud {
    let mut ahead = cloud.clone();
    if momentum == 0.0 {
        return ahead;
    }
    for i in 0..ahead.len() {
        ahead.positions[i] += state.velocity_position[i] * momentum;
        let n = ahead.normals[i] + state.velocity_normal[i] * momentum;
        let len = n.norm();
        if len > 0.0 {
            ahead.normals[i] = n / len;
        }
    }
    ahead
}

/// Regularizer losses and combined weighted position gradient at `cloud`.
fn regularizer_terms(
    cloud: &PointCloud,
    cfg: &OptimizationConfig,
) -> Result<(f64, f64, Vec<Vector3<f64>>)> {
    let n = cloud.len();
    let mut grad = vec![Vector3::zeros(); n];
    if n < 2 || (cfg.gamma_p == 0.0 && cfg.gamma_r == 0.0) {
        return Ok((0.0, 0.0, grad));
    }
    let base_radius = default_radius(cloud, cfg)?;
    let mut l_p = 0.0;
    let mut l_r = 0.0;
    if cfg.gamma_r > 0.0 {
        let graph = build_neighbor_graph_with_radius(cloud, cfg, base_radius)?;
        let frames = compute_frames(cloud, &graph);
        let (lr_val, g) = repulsion_loss_with_frames(cloud, &graph, &frames);
        l_r = lr_val;
        for i in 0..n {
            grad[i] += g[i] * cfg.gamma_r;
        }
    }
    if cfg.gamma_p > 0.0 {
        // Large-deformation runs widen the projection radius to pull
        // outliers back to the surface.
        let radius = if cfg.deform_proj_d_rel > 0.0 {
            cfg.deform_proj_d_rel * bounding_box_diagonal(cloud)?.sqrt()
        } else {
            base_radius
        };
        let graph = build_neighbor_graph_with_radius(cloud, cfg, radius)?;
        let frames = compute_frames(cloud, &graph);
        let (lp_val, g) = projection_loss_with_frames(cloud, &graph, &frames);
        l_p = lp_val;
        for i in 0..n {
            grad[i] += g[i] * cfg.gamma_p;
        }
    }
    Ok((l_p, l_r, grad))
}

/// Run the alternating optimization. Returns the optimized cloud and the
/// full per-step loss history.
pub fn run_optimization(
    initial: &PointCloud,
    refs: &References,
    cfg: &OptimizationConfig,
    mode: ShadingMode,
    seed: u64,
    hooks: &mut OptimizationHooks,
) -> Result<(PointCloud, Vec<StepRecord>)> {
    cfg.validate()?;
    initial.validate()?;
    let mut cloud = initial.clone();
    let n = cloud.len();
    let mut state = OptimizerState::new(n);
    let mut history: Vec<StepRecord> = Vec::new();
    let mut prev_cycle_total: Option<f64> = None;
    let mut step_counter = 0usize;

    'cycles: for cycle in 0..cfg.cycles {
        state.cycle_index = cycle;
        let batch = views_for_cycle(refs, cfg, mode, seed, cycle)?;
        let phases: [(Phase, usize); 2] =
            [(Phase::Normal, cfg.t_n), (Phase::Position, cfg.t_p)];
        for (phase, steps) in phases {
            state.phase = phase;
            for _ in 0..steps {
                let record = optimization_step(
                    &mut cloud,
                    &mut state,
                    &batch,
                    cfg,
                    mode,
                    phase,
                    cycle,
                    step_counter,
                    hooks,
                )?;
                if let Some(cb) = hooks.on_step.as_deref_mut() {
                    cb(&record, &cloud);
                }
                history.push(record);
                step_counter += 1;
                state.step_index = step_counter;
            }
        }
        let last_total = history
            .last()
            .map(|r| r.total)
            .expect("at least one step per cycle");
        if let Some(prev) = prev_cycle_total {
            let improvement = prev - last_total;
            if improvement < cfg.early_stop_rel * prev.abs() {
                break 'cycles;
            }
        }
        prev_cycle_total = Some(last_total);
    }
    Ok((cloud, history))
}

#[allow(clippy::too_many_arguments)]
fn optimization_step(
    cloud: &mut PointCloud,
    state: &mut OptimizerState,
    batch: &ViewBatch,
    cfg: &OptimizationConfig,
    mode: ShadingMode,
    phase: Phase,
    cycle: usize,
    step: usize,
    hooks: &mut OptimizationHooks,
) -> Result<StepRecord> {
    let mut ahead = lookahead_cloud(cloud, state, cfg.momentum);

    // Forward over all views of the batch; occlusion counters reflect the
    // current batch only.
    ahead.reset_occlusion_counts();
    let outputs: Vec<RenderOutput> = {
        let ahead_ref = &ahead;
        exec::map_slice(&batch.cameras, |cam| {
            crate::forward::rasterize_unchecked(ahead_ref, cam, mode, cfg)
        })
    };
    let mut images = Vec::with_capacity(outputs.len());
    let mut caches = Vec::with_capacity(outputs.len());
    let mut reports = Vec::with_capacity(outputs.len());
    for out in outputs {
        images.push(out.image);
        caches.push(out.cache);
        reports.push(out.occluded_points);
    }
    crate::forward::apply_occlusion_reports(&mut ahead, &reports);

    // Image losses and pixel gradients.
    let mut view_losses = Vec::with_capacity(images.len());
    let mut pixel_grads = Vec::with_capacity(images.len());
    for (image, reference) in images.iter().zip(&batch.references) {
        let (l, g) = smape(&image.planes, reference)?;
        view_losses.push(l);
        pixel_grads.push(g);
    }

    let (l_p, l_r, reg_grad) = regularizer_terms(&ahead, cfg)?;
    let report: LossReport = total_loss(view_losses, l_p, l_r, cfg.gamma_p, cfg.gamma_r);
    let mut buffer = GradientBuffer::zeros(cloud.len());
    match phase {
        Phase::Normal => {
            for ((camera, cache), g) in batch.cameras.iter().zip(&caches).zip(&pixel_grads) {
                backward_normals(&ahead, camera, mode, cache, g, cfg, &mut buffer)?;
            }
        }
        Phase::Position => {
            buffer = backward_pass(&ahead, &batch.cameras, mode, &caches, &pixel_grads, cfg)?;
        }
    }

    if !report.total.is_finite() || !buffer.all_finite() {
        if let Some(cb) = hooks.on_nonfinite.as_deref_mut() {
            cb(&buffer, cloud);
        }
        return Err(Error::NonFiniteLoss { cycle, step });
    }

    match phase {
        Phase::Normal => {
            // Tangent-projected normal gradients keep the update on the unit
            // sphere after renormalization.
            let mut d_normal = buffer.d_normal;
            for (g, n) in d_normal.iter_mut().zip(&ahead.normals) {
                *g -= n * g.dot(n);
            }
            clip_gradients(&mut d_normal, cfg.clip_factor);
            nesterov_step(
                &mut cloud.normals,
                &mut state.velocity_normal,
                &d_normal,
                cfg.lr_normal,
                cfg.momentum,
            );
            for n in &mut cloud.normals {
                let len = n.norm();
                if len > 0.0 {
                    *n /= len;
                } else {
                    *n = Vector3::new(0.0, 0.0, 1.0);
                }
            }
            // Positions follow the regularizer forces only.
            let mut g = reg_grad;
            clip_gradients(&mut g, cfg.clip_factor);
            nesterov_step(
                &mut cloud.positions,
                &mut state.velocity_position,
                &g,
                cfg.lr_position,
                cfg.momentum,
            );
        }
        Phase::Position => {
            let mut g = buffer.d_position;
            for (gi, ri) in g.iter_mut().zip(&reg_grad) {
                *gi += ri;
            }
            clip_gradients(&mut g, cfg.clip_factor);
            nesterov_step(
                &mut cloud.positions,
                &mut state.velocity_position,
                &g,
                cfg.lr_position,
                cfg.momentum,
            );
        }
    }
    // Carry the occlusion counters observed this step; the next step's
    // regularizer weights see them.
    cloud.occlusion_count = ahead.occlusion_count.clone();

    Ok(StepRecord {
        cycle,
        step,
        phase,
        image_loss: report.image_loss,
        l_p: report.projection_term,
        l_r: report.repulsion_term,
        total: report.total,
    })
}
