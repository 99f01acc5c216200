//! End-to-end experiment drivers behind the CLI: render, noise, metrics,
//! view generation, and the deform/edit optimization workflows.
//!
//! Every run creates its output directory, echoes the fully resolved config
//! to `config.resolved`, and finishes by writing `manifest.txt` listing every
//! file the run produced, so reruns can be diffed byte for byte.

use crate::config::OptimizationConfig;
use crate::error::{Error, Result};
use crate::forward::ShadingMode;
use crate::geometry::{bounding_box, bounding_box_diagonal, Camera, PointCloud};
use crate::io;
use crate::loss::{chamfer_distance, hausdorff_distance};
use crate::optim::{
    run_optimization, OptimizationHooks, References, StepRecord, SEED_TAG_NOISE,
};
use crate::views::{error_aware_views_from_cloud, sample_sphere_views, ViewSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Camera distance for generated views, relative to the bbox diagonal.
pub const VIEW_DISTANCE_REL: f64 = 1.6;
/// Position perturbation of sampled views, relative to the sphere radius.
pub const VIEW_PERTURB_REL: f64 = 0.05;
/// Focus set size of the error-aware sampler.
pub const ERROR_AWARE_K_FOCUS: usize = 5;

/// Bookkeeping shared by all runs: output directory, resolved config echo,
/// output manifest.
pub struct RunContext {
    out_dir: PathBuf,
    manifest: Vec<String>,
}

impl RunContext {
    pub fn create(out_dir: &Path, cfg: &OptimizationConfig) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut ctx = RunContext {
            out_dir: out_dir.to_path_buf(),
            manifest: Vec::new(),
        };
        ctx.write_text("config.resolved", &cfg.to_text())?;
        Ok(ctx)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    fn record(&mut self, rel: &str) {
        self.manifest.push(rel.to_string());
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.record(rel);
        Ok(())
    }

    pub fn add_file<F: FnOnce(&Path) -> Result<()>>(&mut self, rel: &str, write: F) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write(&path)?;
        self.record(rel);
        Ok(())
    }

    /// Write `manifest.txt` (its own name included) and finish the run.
    pub fn finish(mut self) -> Result<()> {
        self.manifest.push("manifest.txt".to_string());
        let mut text = String::new();
        for line in &self.manifest {
            let _ = writeln!(text, "{line}");
        }
        let path = self.path("manifest.txt");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Load a cloud and assign splat sigmas: global override when configured,
/// otherwise the nearest-neighbor heuristic.
pub fn load_cloud_with_sigma(path: &Path, cfg: &OptimizationConfig) -> Result<PointCloud> {
    let mut cloud = io::read_cloud(path)?;
    if cfg.sigma_global > 0.0 {
        cloud.set_uniform_sigma(cfg.sigma_global);
    } else {
        cloud.assign_sigma_heuristic();
    }
    Ok(cloud)
}

pub fn parse_mode(s: &str) -> Result<ShadingMode> {
    match s {
        "diffuse" => Ok(ShadingMode::DiffuseThreeSunRgb),
        "normal" => Ok(ShadingMode::NormalMap),
        "invdepth" => Ok(ShadingMode::InverseDepth),
        other => Err(Error::MissingInput(format!(
            "unknown shading mode `{other}` (expected diffuse|normal|invdepth)"
        ))),
    }
}

/// Render one cloud from one camera into `out/<name>`; the extension picks
/// PNG or PFM.
pub fn run_render(
    cloud_path: &Path,
    camera_path: &Path,
    mode: ShadingMode,
    cfg: &OptimizationConfig,
    out_dir: &Path,
    out_name: &str,
) -> Result<()> {
    let mut ctx = RunContext::create(out_dir, cfg)?;
    let cloud = load_cloud_with_sigma(cloud_path, cfg)?;
    let camera = io::read_camera(camera_path)?;
    let (image, _) = crate::forward::rasterize(&cloud, &camera, mode, cfg)?;
    ctx.add_file(out_name, |p| io::write_image(p, &image))?;
    ctx.finish()
}

/// Perturb a cloud with relative Gaussian noise and write it back out.
pub fn run_noise(
    cloud_path: &Path,
    sigma_rel: f64,
    seed: u64,
    cfg: &OptimizationConfig,
    out_dir: &Path,
    out_name: &str,
) -> Result<()> {
    let mut ctx = RunContext::create(out_dir, cfg)?;
    let cloud = io::read_cloud(cloud_path)?;
    let noisy = crate::geometry::add_gaussian_noise(
        &cloud,
        sigma_rel,
        crate::optim::derive_seed(seed, SEED_TAG_NOISE, 0),
    )?;
    ctx.add_file(out_name, |p| {
        io::write_ply(p, &noisy, io::PlyFormat::BinaryLittleEndian)
    })?;
    ctx.finish()
}

/// Chamfer and Hausdorff distances between two clouds, in fixed-precision
/// scientific notation. Returns the printed lines.
pub fn run_metrics(
    a_path: &Path,
    b_path: &Path,
    cfg: &OptimizationConfig,
    out_dir: Option<&Path>,
) -> Result<String> {
    let a = io::read_cloud(a_path)?;
    let b = io::read_cloud(b_path)?;
    let cd = chamfer_distance(&a, &b)?;
    let hd = hausdorff_distance(&a, &b)?;
    let text = format!("CD {cd:.6e}\nHD {hd:.6e}\n");
    if let Some(dir) = out_dir {
        let mut ctx = RunContext::create(dir, cfg)?;
        ctx.write_text("metrics.txt", &text)?;
        ctx.finish()?;
    }
    Ok(text)
}

/// Generated camera files are named `view_%03d.cam`.
pub fn write_view_set(ctx: &mut RunContext, set: &ViewSet) -> Result<()> {
    for (i, cam) in set.cameras.iter().enumerate() {
        ctx.add_file(&format!("view_{i:03}.cam"), |p| io::write_camera(p, cam))?;
    }
    Ok(())
}

/// Emit sphere-sampled cameras around a cloud.
#[allow(clippy::too_many_arguments)]
pub fn run_views_sphere(
    cloud_path: &Path,
    count: usize,
    seed: u64,
    focal_px: f64,
    size: u32,
    cfg: &OptimizationConfig,
    out_dir: &Path,
) -> Result<()> {
    let mut ctx = RunContext::create(out_dir, cfg)?;
    let cloud = io::read_cloud(cloud_path)?;
    let (lo, hi) = bounding_box(&cloud)?;
    let center = (lo + hi) / 2.0;
    let diag = bounding_box_diagonal(&cloud)?;
    let set = sample_sphere_views(
        center,
        (VIEW_DISTANCE_REL * diag).max(1e-6),
        count,
        seed,
        VIEW_PERTURB_REL,
        focal_px,
        size,
        size,
    )?;
    write_view_set(&mut ctx, &set)?;
    ctx.finish()
}

/// Emit error-aware cameras: render the cloud through the reference set's
/// cameras, find the worst region, and focus new views on it.
#[allow(clippy::too_many_arguments)]
pub fn run_views_error_aware(
    cloud_path: &Path,
    refs_dir: &Path,
    count: usize,
    seed: u64,
    mode: ShadingMode,
    cfg: &OptimizationConfig,
    out_dir: &Path,
) -> Result<()> {
    let mut ctx = RunContext::create(out_dir, cfg)?;
    let cloud = load_cloud_with_sigma(cloud_path, cfg)?;
    let pairs = load_reference_dir(refs_dir)?;
    let cameras: Vec<Camera> = pairs.iter().map(|(c, _)| c.clone()).collect();
    let references: Vec<_> = pairs.into_iter().map(|(_, img)| img).collect();
    let set = error_aware_views_from_cloud(
        &cloud,
        &cameras,
        &references,
        mode,
        cfg,
        ERROR_AWARE_K_FOCUS,
        count,
        seed,
        VIEW_PERTURB_REL,
    )?;
    write_view_set(&mut ctx, &set)?;
    ctx.finish()
}

/// Reference directory layout: `view_%03d.cam` paired with `view_%03d.pfm`
/// (or `.png`).
pub fn load_reference_dir(dir: &Path) -> Result<Vec<(Camera, crate::geometry::ImagePlanes)>> {
    let mut cam_files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("cam"))
        .collect();
    cam_files.sort();
    if cam_files.is_empty() {
        return Err(Error::MissingInput(format!(
            "no .cam files in {}",
            dir.display()
        )));
    }
    let mut pairs = Vec::with_capacity(cam_files.len());
    for cam_path in cam_files {
        let camera = io::read_camera(&cam_path)?;
        let pfm = cam_path.with_extension("pfm");
        let png = cam_path.with_extension("png");
        let image = if pfm.exists() {
            io::read_pfm(&pfm)?
        } else if png.exists() {
            io::read_png(&png)?
        } else {
            return Err(Error::MissingInput(format!(
                "no reference image for {}",
                cam_path.display()
            )));
        };
        if image.width() != camera.width as usize || image.height() != camera.height as usize {
            return Err(Error::ShapeMismatch(format!(
                "{}: image is {}x{}, camera expects {}x{}",
                cam_path.display(),
                image.width(),
                image.height(),
                camera.width,
                camera.height
            )));
        }
        pairs.push((camera, image));
    }
    Ok(pairs)
}

pub struct OptimizeOutcome {
    pub final_cloud: PointCloud,
    pub history: Vec<StepRecord>,
    /// Final (chamfer, hausdorff) against the target cloud when one exists.
    pub final_metrics: Option<(f64, f64)>,
}

/// Shared driver for the deform and edit workflows.
#[allow(clippy::too_many_arguments)]
fn run_optimize(
    initial: PointCloud,
    refs: References,
    target_cloud: Option<&PointCloud>,
    mode: ShadingMode,
    cfg: &OptimizationConfig,
    seed: u64,
    out_dir: &Path,
    snapshot_every: usize,
) -> Result<OptimizeOutcome> {
    let mut ctx = RunContext::create(out_dir, cfg)?;
    let mut log = String::new();
    let mut snapshots: Vec<(String, PointCloud)> = Vec::new();
    let steps_per_cycle = cfg.t_n + cfg.t_p;
    let dump_path = out_dir.join("gradient_dump.ply");
    {
        let mut on_step = |record: &StepRecord, cloud: &PointCloud| {
            let _ = writeln!(log, "{}", record.log_line());
            let cycle_end = (record.step + 1) % steps_per_cycle == 0;
            let periodic = snapshot_every > 0 && (record.step + 1) % snapshot_every == 0;
            if cycle_end || periodic {
                snapshots.push((
                    format!("snapshots/cycle_{:02}_step_{:04}", record.cycle, record.step),
                    cloud.clone(),
                ));
            }
        };
        let mut on_nonfinite = |buffer: &crate::backward::GradientBuffer, cloud: &PointCloud| {
            let _ = io::write_gradient_ply(&dump_path, cloud, &buffer.d_position);
        };
        let mut hooks = OptimizationHooks {
            on_step: Some(&mut on_step),
            on_nonfinite: Some(&mut on_nonfinite),
        };
        let (final_cloud, history) =
            run_optimization(&initial, &refs, cfg, mode, seed, &mut hooks)?;
        drop(hooks);

        ctx.write_text("loss_log.txt", &log)?;
        for (name, cloud) in &snapshots {
            ctx.add_file(&format!("{name}.ply"), |p| {
                io::write_ply(p, cloud, io::PlyFormat::BinaryLittleEndian)
            })?;
        }
        ctx.add_file("final.ply", |p| {
            io::write_ply(p, &final_cloud, io::PlyFormat::BinaryLittleEndian)
        })?;

        // A render of the final state from one reference view.
        let render_cam = match &refs {
            References::Fixed(pairs) => Some(pairs[0].0.clone()),
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
                sample_sphere_views(
                    center,
                    (*distance_rel * diag).max(1e-6),
                    1,
                    seed,
                    0.0,
                    *focal_px,
                    *width,
                    *height,
                )?
                .cameras
                .first()
                .cloned()
            }
        };
        if let Some(cam) = render_cam {
            let (image, _) = crate::forward::rasterize(&final_cloud, &cam, mode, cfg)?;
            ctx.add_file("final.png", |p| io::write_png(p, &image.planes))?;
        }

        let final_metrics = match target_cloud {
            Some(target) => {
                let cd = chamfer_distance(&final_cloud, target)?;
                let hd = hausdorff_distance(&final_cloud, target)?;
                ctx.write_text("metrics.txt", &format!("CD {cd:.6e}\nHD {hd:.6e}\n"))?;
                Some((cd, hd))
            }
            None => None,
        };
        ctx.finish()?;
        Ok(OptimizeOutcome {
            final_cloud,
            history,
            final_metrics,
        })
    }
}

/// Large deformation towards a target: references either come from a
/// directory of (camera, image) pairs or are rendered internally from a
/// target cloud with per-cycle view resampling.
#[allow(clippy::too_many_arguments)]
pub fn run_deform(
    initial_path: &Path,
    target_path: Option<&Path>,
    refs_dir: Option<&Path>,
    image_size: u32,
    mode: ShadingMode,
    cfg: &OptimizationConfig,
    seed: u64,
    out_dir: &Path,
    snapshot_every: usize,
) -> Result<OptimizeOutcome> {
    let initial = load_cloud_with_sigma(initial_path, cfg)?;
    let (refs, target_cloud) = match (target_path, refs_dir) {
        (Some(target_path), _) => {
            let target = load_cloud_with_sigma(target_path, cfg)?;
            (
                References::FromTarget {
                    target: target.clone(),
                    distance_rel: VIEW_DISTANCE_REL,
                    focal_px: image_size as f64,
                    width: image_size,
                    height: image_size,
                },
                Some(target),
            )
        }
        (None, Some(dir)) => (References::Fixed(load_reference_dir(dir)?), None),
        (None, None) => {
            return Err(Error::MissingInput(
                "deform needs a target cloud or a reference directory".into(),
            ))
        }
    };
    run_optimize(
        initial,
        refs,
        target_cloud.as_ref(),
        mode,
        cfg,
        seed,
        out_dir,
        snapshot_every,
    )
}

/// Local surface editing: keep the silhouette, move geometry through normals
/// driven by externally filtered reference images.
#[allow(clippy::too_many_arguments)]
pub fn run_edit(
    cloud_path: &Path,
    refs_dir: &Path,
    mode: ShadingMode,
    cfg: &OptimizationConfig,
    seed: u64,
    out_dir: &Path,
    snapshot_every: usize,
) -> Result<OptimizeOutcome> {
    let initial = load_cloud_with_sigma(cloud_path, cfg)?;
    let refs = References::Fixed(load_reference_dir(refs_dir)?);
    run_optimize(
        initial, refs, None, mode, cfg, seed, out_dir, snapshot_every,
    )
}
