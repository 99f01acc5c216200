//! Camera placement: farthest-point sampling on a hulling sphere, plus the
//! error-aware refinement that focuses extra views on the worst image region.

use crate::error::{Error, Result};
use crate::forward::ShadingMode;
use crate::geometry::{Camera, ImagePlanes, PointCloud};
use crate::loss::SMAPE_EPSILON;
use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Size of the candidate direction set for farthest-point sampling.
pub const CANDIDATE_DIRECTIONS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingScheme {
    Sphere,
    ErrorAware,
}

/// A set of generated cameras plus how they were made.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub cameras: Vec<Camera>,
    pub seed: u64,
    pub scheme: SamplingScheme,
    /// Every camera is aimed at this point.
    pub target: Vector3<f64>,
}

/// Deterministic, near-uniform unit directions from a spherical Fibonacci
/// lattice.
pub fn fibonacci_directions(count: usize) -> Vec<Vector3<f64>> {
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    (0..count)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * (i as f64 / golden).fract();
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Greedy farthest-point subset of the candidate directions: seeded start,
/// then each pick maximizes the minimum angle to the chosen set (ties go to
/// the lower candidate index).
fn farthest_point_directions(count: usize, seed: u64) -> Vec<Vector3<f64>> {
    let candidates = fibonacci_directions(CANDIDATE_DIRECTIONS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..candidates.len());
    let mut chosen = vec![start];
    // min_dot[i] tracks the largest cosine between candidate i and the chosen
    // set; the farthest candidate minimizes it.
    let mut max_cos: Vec<f64> = candidates.iter().map(|c| c.dot(&candidates[start])).collect();
    while chosen.len() < count.min(candidates.len()) {
        let mut best = usize::MAX;
        let mut best_cos = f64::INFINITY;
        for (i, &mc) in max_cos.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            if mc < best_cos {
                best_cos = mc;
                best = i;
            }
        }
        chosen.push(best);
        for (i, mc) in max_cos.iter_mut().enumerate() {
            *mc = mc.max(candidates[i].dot(&candidates[best]));
        }
    }
    // Repeat directions if more views than candidates were requested.
    (0..count)
        .map(|i| candidates[chosen[i % chosen.len()]])
        .collect()
}

/// Sample `count` cameras on a sphere around `center`, aimed at `center`.
/// Positions get a uniform perturbation of `perturb_rel * radius` per axis.
pub fn sample_sphere_views(
    center: Vector3<f64>,
    radius: f64,
    count: usize,
    seed: u64,
    perturb_rel: f64,
    focal_px: f64,
    width: u32,
    height: u32,
) -> Result<ViewSet> {
    if !(radius > 0.0) {
        return Err(Error::InvalidCamera(format!("sphere radius {radius}")));
    }
    if count == 0 {
        return Err(Error::InvalidCamera("need at least one view".into()));
    }
    let dirs = farthest_point_directions(count, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15));
    let amp = perturb_rel * radius;
    let mut cameras = Vec::with_capacity(count);
    for dir in dirs {
        let mut eye = center + dir * radius;
        if amp > 0.0 {
            eye += Vector3::new(
                rng.gen_range(-amp..=amp),
                rng.gen_range(-amp..=amp),
                rng.gen_range(-amp..=amp),
            );
        }
        cameras.push(Camera::look_at(eye, center, focal_px, width, height)?);
    }
    Ok(ViewSet {
        cameras,
        seed,
        scheme: SamplingScheme::Sphere,
        target: center,
    })
}

/// Box-filter downsample by an integer factor (partial boxes at the border
/// average whatever they cover).
pub fn downsample_box(img: &ImagePlanes, factor: usize) -> ImagePlanes {
    assert!(factor >= 1);
    let w = img.width().div_ceil(factor);
    let h = img.height().div_ceil(factor);
    let mut out = ImagePlanes::new(w, h, img.channels());
    for c in 0..img.channels() {
        for oy in 0..h {
            for ox in 0..w {
                let mut sum = 0.0;
                let mut count = 0.0;
                for yy in oy * factor..((oy + 1) * factor).min(img.height()) {
                    for xx in ox * factor..((ox + 1) * factor).min(img.width()) {
                        sum += img.get(c, yy, xx);
                        count += 1.0;
                    }
                }
                out.set(c, oy, ox, sum / count);
            }
        }
    }
    out
}

/// Per-pixel SMAPE contribution summed over channels.
fn pixel_error(a: &ImagePlanes, b: &ImagePlanes, y: usize, x: usize) -> f64 {
    let mut e = 0.0;
    for c in 0..a.channels() {
        let va = a.get(c, y, x);
        let vb = b.get(c, y, x);
        e += (va - vb).abs() / (va.abs() + vb.abs() + SMAPE_EPSILON);
    }
    e
}

pub const ERROR_AWARE_DOWNSAMPLE: usize = 4;
pub const ERROR_AWARE_RADIUS_SCALE: f64 = 0.25;

/// Place `count` cameras focused on the region that currently renders worst.
///
/// Downsamples each rendered/reference pair, finds the (view, pixel) with the
/// largest error, takes the `k_focus` points projecting nearest to that pixel
/// and aims a small sphere of cameras at their mean. Zero error everywhere
/// falls back to plain sphere sampling around the cloud.
#[allow(clippy::too_many_arguments)]
pub fn error_aware_views(
    cloud: &PointCloud,
    cameras: &[Camera],
    rendered: &[ImagePlanes],
    reference: &[ImagePlanes],
    k_focus: usize,
    count: usize,
    seed: u64,
    perturb_rel: f64,
) -> Result<ViewSet> {
    if cameras.is_empty() || cameras.len() != rendered.len() || cameras.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} cameras, {} rendered, {} reference images",
            cameras.len(),
            rendered.len(),
            reference.len()
        )));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }

    // Worst downsampled pixel across all views.
    let mut best: Option<(f64, usize, usize, usize)> = None; // (err, view, y, x)
    for v in 0..cameras.len() {
        if !rendered[v].same_shape(&reference[v]) {
            return Err(Error::ShapeMismatch(format!(
                "view {v}: rendered and reference shapes differ"
            )));
        }
        let small_r = downsample_box(&rendered[v], ERROR_AWARE_DOWNSAMPLE);
        let small_f = downsample_box(&reference[v], ERROR_AWARE_DOWNSAMPLE);
        for y in 0..small_r.height() {
            for x in 0..small_r.width() {
                let e = pixel_error(&small_r, &small_f, y, x);
                if best.map_or(true, |(be, ..)| e > be) {
                    best = Some((e, v, y, x));
                }
            }
        }
    }
    let (err, view, dy, dx) = best.expect("at least one pixel");
    let bbox = crate::geometry::bounding_box(cloud)?;
    let cloud_center = (bbox.0 + bbox.1) / 2.0;
    if err == 0.0 {
        // Nothing to focus on.
        let mean_dist = cameras
            .iter()
            .map(|c| (c.eye() - cloud_center).norm())
            .sum::<f64>()
            / cameras.len() as f64;
        let cam0 = &cameras[0];
        return sample_sphere_views(
            cloud_center,
            mean_dist.max(1e-9),
            count,
            seed,
            perturb_rel,
            cam0.focal_px,
            cam0.width,
            cam0.height,
        );
    }

    // Map the downsampled pixel back to full-resolution coordinates (center
    // of the box it covers).
    let f = ERROR_AWARE_DOWNSAMPLE as f64;
    let pixel = Vector2::new(dx as f64 * f + (f - 1.0) / 2.0, dy as f64 * f + (f - 1.0) / 2.0);
    let camera = &cameras[view];

    // k_focus points whose projections are nearest the pixel.
    let mut by_dist: Vec<(f64, u32)> = cloud
        .positions
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            camera
                .project(p)
                .map(|(px, _)| ((px - pixel).norm_squared(), i as u32))
        })
        .collect();
    by_dist.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    by_dist.truncate(k_focus.max(1));
    if by_dist.is_empty() {
        return Err(Error::InvalidCloud(
            "no point projects into the worst-error view".into(),
        ));
    }
    let focus: Vector3<f64> = by_dist
        .iter()
        .map(|&(_, i)| cloud.positions[i as usize])
        .sum::<Vector3<f64>>()
        / by_dist.len() as f64;

    let radius = ERROR_AWARE_RADIUS_SCALE * (camera.eye() - focus).norm();
    let mut set = sample_sphere_views(
        focus,
        radius.max(1e-9),
        count,
        seed,
        perturb_rel,
        camera.focal_px,
        camera.width,
        camera.height,
    )?;
    set.scheme = SamplingScheme::ErrorAware;
    Ok(set)
}

/// Render-and-refocus convenience used by the CLI: renders the cloud with
/// the given cameras and compares against the provided references.
pub fn error_aware_views_from_cloud(
    cloud: &PointCloud,
    cameras: &[Camera],
    reference: &[ImagePlanes],
    mode: ShadingMode,
    cfg: &crate::config::OptimizationConfig,
    k_focus: usize,
    count: usize,
    seed: u64,
    perturb_rel: f64,
) -> Result<ViewSet> {
    let rendered: Vec<ImagePlanes> = cameras
        .iter()
        .map(|cam| crate::forward::rasterize(cloud, cam, mode, cfg).map(|(img, _)| img.planes))
        .collect::<Result<_>>()?;
    error_aware_views(
        cloud,
        cameras,
        &rendered,
        reference,
        k_focus,
        count,
        seed,
        perturb_rel,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_views_are_nearly_antipodal() {
        let set = sample_sphere_views(Vector3::zeros(), 2.0, 2, 9, 0.0, 64.0, 64, 64).unwrap();
        let d0 = set.cameras[0].eye().normalize();
        let d1 = set.cameras[1].eye().normalize();
        let angle = d0.dot(&d1).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle > 150.0, "angle {angle}");
    }

    #[test]
    fn farthest_point_beats_random_subsets() {
        let dirs = farthest_point_directions(12, 4);
        let min_pairwise = |ds: &[Vector3<f64>]| -> f64 {
            let mut m = f64::INFINITY;
            for i in 0..ds.len() {
                for j in i + 1..ds.len() {
                    m = m.min(ds[i].dot(&ds[j]).clamp(-1.0, 1.0).acos());
                }
            }
            m
        };
        let fps_min = min_pairwise(&dirs);
        let candidates = fibonacci_directions(CANDIDATE_DIRECTIONS);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..1000 {
            let subset: Vec<Vector3<f64>> = (0..12)
                .map(|_| candidates[rng.gen_range(0..candidates.len())])
                .collect();
            assert!(fps_min >= min_pairwise(&subset) - 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_looks_at_target() {
        let a = sample_sphere_views(Vector3::new(1.0, 2.0, 3.0), 5.0, 7, 42, 0.05, 80.0, 64, 48)
            .unwrap();
        let b = sample_sphere_views(Vector3::new(1.0, 2.0, 3.0), 5.0, 7, 42, 0.05, 80.0, 64, 48)
            .unwrap();
        assert_eq!(a.cameras.len(), 7);
        for (ca, cb) in a.cameras.iter().zip(&b.cameras) {
            assert_eq!(ca, cb);
        }
        for cam in &a.cameras {
            let (px, _) = cam.project(&Vector3::new(1.0, 2.0, 3.0)).unwrap();
            let c = cam.principal_point();
            assert_relative_eq!(px.x, c.x, epsilon = 1e-6);
            assert_relative_eq!(px.y, c.y, epsilon = 1e-6);
        }
    }

    #[test]
    fn downsample_box_averages() {
        let img = ImagePlanes::from_data(4, 2, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let small = downsample_box(&img, 2);
        assert_eq!(small.width(), 2);
        assert_eq!(small.height(), 1);
        assert_relative_eq!(small.get(0, 0, 0), (1.0 + 2.0 + 5.0 + 6.0) / 4.0);
        assert_relative_eq!(small.get(0, 0, 1), (3.0 + 4.0 + 7.0 + 8.0) / 4.0);
    }
}
