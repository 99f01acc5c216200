//! Backward pass: per-pixel loss gradients to per-point gradients.
//!
//! The pixel value factors into the shaded attribute w_k, the smooth splat
//! weight rho_bar_k and a binary visibility term h. Gradients for normals and
//! the smooth part of positions follow the chain rule with hand-derived
//! partials; the visibility term is discontinuous, so its position gradient
//! is a linear approximation built from the intensity jump when a point's
//! visibility at a pixel flips, divided by the displacement that causes the
//! flip. Contributions whose intensity change cannot reduce the loss are
//! zeroed.
//!
//! All derivative formulas work on the frame-free form of the splat weight:
//! with A = d(screen)/d(p_world) (2x3) and m = A n, the screen covariance of
//! the splat is sigma^2 B + I where B = A A^T - m m^T = J J^T, and
//!
//! ```text
//! rho_bar(x) = sqrt(det B) / (2 pi sqrt(det S)) * exp(-0.5 d^T S^-1 d),
//! S = sigma^2 B + I,  d = x - center_px.
//! ```
//!
//! so d ln rho = 0.5 tr(B^-1 dB) - 0.5 tr(S^-1 dS) - 0.5 d(d^T S^-1 d).

use crate::config::OptimizationConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::forward::{
    blend_pixel, splat_geometries, Fragment, FragmentCache, ShadingMode, SplatGeometry,
};
use crate::geometry::{Camera, ImagePlanes, PointCloud};
use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};

/// Per-pixel, per-channel upstream gradient dL/dI.
pub type PixelLossGrad = ImagePlanes;

/// Accumulated per-point gradients.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub d_position: Vec<Vector3<f64>>,
    pub d_normal: Vec<Vector3<f64>>,
}

impl GradientBuffer {
    pub fn zeros(n: usize) -> Self {
        GradientBuffer {
            d_position: vec![Vector3::zeros(); n],
            d_normal: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_position.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.d_position[i] += other.d_position[i];
            self.d_normal[i] += other.d_normal[i];
        }
    }

    pub fn all_finite(&self) -> bool {
        self.d_position
            .iter()
            .chain(self.d_normal.iter())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

fn check_inputs(
    cloud: &PointCloud,
    camera: &Camera,
    mode: ShadingMode,
    cache: &FragmentCache,
    g: &PixelLossGrad,
) -> Result<()> {
    if cache.cloud_len() != cloud.len() {
        return Err(Error::StaleCache(format!(
            "cache built for {} points, cloud has {}",
            cache.cloud_len(),
            cloud.len()
        )));
    }
    if cache.width() != camera.width as usize || cache.height() != camera.height as usize {
        return Err(Error::StaleCache(format!(
            "cache is {}x{}, camera renders {}x{}",
            cache.width(),
            cache.height(),
            camera.width,
            camera.height
        )));
    }
    if g.width() != cache.width() || g.height() != cache.height() || g.channels() != mode.channels()
    {
        return Err(Error::ShapeMismatch(format!(
            "loss gradient is {}x{}x{}, expected {}x{}x{}",
            g.channels(),
            g.height(),
            g.width(),
            mode.channels(),
            cache.height(),
            cache.width()
        )));
    }
    Ok(())
}

/// Blended value and visible weight sum for every pixel, recomputed from the
/// cache with the same arithmetic as the forward pass.
pub(crate) struct PixelSummary {
    pub value: Vec<Vector3<f64>>,
    pub sum_rho: Vec<f64>,
}

pub(crate) fn summarize_pixels(cache: &FragmentCache, background: Vector3<f64>) -> PixelSummary {
    let w = cache.width();
    let h = cache.height();
    let per_pixel = exec::map_indexed(w * h, |i| {
        let (y, x) = (i / w, i % w);
        match blend_pixel(cache.pixel(y, x)) {
            Some((v, s)) => (v, s),
            None => (background, 0.0),
        }
    });
    let mut value = Vec::with_capacity(w * h);
    let mut sum_rho = Vec::with_capacity(w * h);
    for (v, s) in per_pixel {
        value.push(v);
        sum_rho.push(s);
    }
    PixelSummary { value, sum_rho }
}

/// Everything point-constant needed to evaluate d(rho_bar)/dp and
/// d(rho_bar)/dn at arbitrary pixel offsets.
struct SplatPartials {
    sigma2: f64,
    /// d(center_px)/dp, one 2-vector per world axis.
    dxk_dp: [Vector2<f64>; 3],
    /// d(B)/dp_j.
    db_dp: [Matrix2<f64>; 3],
    /// 0.5 tr(B^-1 dB_j) - 0.5 sigma^2 tr(S^-1 dB_j) per world axis.
    trace_p: [f64; 3],
    /// Offset-independent part of d ln rho / dn.
    dn_const: Vector3<f64>,
    a: Matrix2x3<f64>,
    m: Vector2<f64>,
}

impl SplatPartials {
    fn build(camera: &Camera, p: &Vector3<f64>, n: &Vector3<f64>, sigma: f64, geom: &SplatGeometry) -> Self {
        let pc = camera.to_camera_space(p);
        let dep = geom.depth;
        let f = camera.focal_px;
        let s = crate::forward::screen_jacobian(camera, &pc);
        let a = s * camera.rotation;
        let m = a * n;
        let b = a * a.transpose() - m * m.transpose();
        let b_inv = b.try_inverse().expect("non-singular splat");
        let sigma2 = sigma * sigma;
        let s_inv = geom.conic;

        // dS/d(camera coords).
        let dep2 = dep * dep;
        let dep3 = dep2 * dep;
        let ds_dxc = Matrix2x3::new(0.0, 0.0, f / dep2, 0.0, 0.0, 0.0);
        let ds_dyc = Matrix2x3::new(0.0, 0.0, 0.0, 0.0, 0.0, -f / dep2);
        let ds_dzc = Matrix2x3::new(
            f / dep2,
            0.0,
            2.0 * f * pc.x / dep3,
            0.0,
            -f / dep2,
            -2.0 * f * pc.y / dep3,
        );

        let mut dxk_dp = [Vector2::zeros(); 3];
        let mut db_dp = [Matrix2::zeros(); 3];
        let mut trace_p = [0.0; 3];
        for j in 0..3 {
            let r_j = camera.rotation.column(j).into_owned();
            let ds_j = ds_dxc * r_j.x + ds_dyc * r_j.y + ds_dzc * r_j.z;
            let da_j = ds_j * camera.rotation;
            let dm_j = da_j * n;
            let db_j = da_j * a.transpose() + a * da_j.transpose()
                - dm_j * m.transpose()
                - m * dm_j.transpose();
            dxk_dp[j] = s * r_j;
            trace_p[j] = 0.5 * (b_inv * db_j).trace() - 0.5 * sigma2 * (s_inv * db_j).trace();
            db_dp[j] = db_j;
        }

        // Normal path: dB_j = -(a_j m^T + m a_j^T), so the traces collapse to
        // inner products with the columns of A.
        let bim = b_inv * m;
        let sim = s_inv * m;
        let dn_const = a.transpose() * (sim * sigma2 - bim);

        SplatPartials {
            sigma2,
            dxk_dp,
            db_dp,
            trace_p,
            dn_const,
            a,
            m,
        }
    }

    /// d rho_bar / d position at pixel offset `d`, given rho_bar there.
    fn drho_dp(&self, conic: &Matrix2<f64>, d: &Vector2<f64>, rho: f64) -> Vector3<f64> {
        let u = conic * d;
        let mut out = Vector3::zeros();
        for j in 0..3 {
            let dln = self.trace_p[j]
                + u.dot(&self.dxk_dp[j])
                + 0.5 * self.sigma2 * (u.transpose() * self.db_dp[j] * u)[0];
            out[j] = rho * dln;
        }
        out
    }

    /// d rho_bar / d normal at pixel offset `d`, given rho_bar there.
    fn drho_dn(&self, conic: &Matrix2<f64>, d: &Vector2<f64>, rho: f64) -> Vector3<f64> {
        let u = conic * d;
        let dln = self.dn_const - self.a.transpose() * u * (self.sigma2 * self.m.dot(&u));
        dln * rho
    }
}

/// d w_c / d n for each channel, as rows.
fn shading_dn(
    mode: ShadingMode,
    camera: &Camera,
    n: &Vector3<f64>,
    albedo: &Vector3<f64>,
) -> [Vector3<f64>; 3] {
    let mut rows = [Vector3::zeros(); 3];
    match mode {
        ShadingMode::DiffuseThreeSunRgb => {
            let n_cam = camera.rotation * n;
            for c in 0..3 {
                // Sub-gradient 0 at the max(0, .) kink.
                if n_cam[c] > 0.0 {
                    rows[c] = camera.rotation.row(c).transpose() * albedo[c];
                }
            }
        }
        ShadingMode::NormalMap => {
            for c in 0..3 {
                rows[c] = camera.rotation.row(c).transpose() * 0.5;
            }
        }
        ShadingMode::InverseDepth => {}
    }
    rows
}

/// d w_c / d p for each channel. Sun lights and the normal map do not depend
/// on position; inverse depth does.
fn shading_dp(mode: ShadingMode, camera: &Camera, depth: f64) -> [Vector3<f64>; 3] {
    let mut rows = [Vector3::zeros(); 3];
    if mode == ShadingMode::InverseDepth {
        rows[0] = camera.rotation.row(2).transpose() / (depth * depth);
    }
    rows
}

/// Accumulate dL/dn over every visible fragment: through the shaded
/// attribute and through the splat weight.
pub fn backward_normals(
    cloud: &PointCloud,
    camera: &Camera,
    mode: ShadingMode,
    cache: &FragmentCache,
    g: &PixelLossGrad,
    cfg: &OptimizationConfig,
    buf: &mut GradientBuffer,
) -> Result<()> {
    backward_normals_terms(cloud, camera, mode, cache, g, cfg, buf, true, true)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_normals_terms(
    cloud: &PointCloud,
    camera: &Camera,
    mode: ShadingMode,
    cache: &FragmentCache,
    g: &PixelLossGrad,
    cfg: &OptimizationConfig,
    buf: &mut GradientBuffer,
    include_w_term: bool,
    include_rho_term: bool,
) -> Result<()> {
    check_inputs(cloud, camera, mode, cache, g)?;
    if buf.len() != cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient buffer holds {} points, cloud has {}",
            buf.len(),
            cloud.len()
        )));
    }
    let geoms = splat_geometries(cloud, camera, mode, cfg);
    let summary = summarize_pixels(cache, mode.background_vec());
    let channels = mode.channels();
    let width = cache.width();

    let grads = exec::map_indexed(cloud.len(), |k| {
        let Some((geom, attr)) = geoms[k].as_ref() else {
            return Vector3::zeros();
        };
        if geom.bbox_px.is_empty() {
            return Vector3::zeros();
        }
        let partials =
            SplatPartials::build(camera, &cloud.positions[k], &cloud.normals[k], cloud.splat_sigma[k], geom);
        let dw_dn = shading_dn(mode, camera, &cloud.normals[k], &cloud.albedo[k]);
        let mut acc = Vector3::zeros();
        for y in geom.bbox_px.y0..=geom.bbox_px.y1 {
            for x in geom.bbox_px.x0..=geom.bbox_px.x1 {
                let frags = cache.pixel(y as usize, x as usize);
                let Some(f) = frags
                    .iter()
                    .find(|f| f.point_index == k as u32 && f.visible)
                else {
                    continue;
                };
                let idx = y as usize * width + x as usize;
                let sum_rho = summary.sum_rho[idx];
                let i_x = summary.value[idx];
                let d = Vector2::new(x as f64 - geom.center_px.x, y as f64 - geom.center_px.y);
                let drho = if include_rho_term {
                    partials.drho_dn(&geom.conic, &d, f.rho_bar)
                } else {
                    Vector3::zeros()
                };
                for c in 0..channels {
                    let gc = g.get(c, y as usize, x as usize);
                    if gc == 0.0 {
                        continue;
                    }
                    if include_w_term {
                        acc += dw_dn[c] * (gc * f.rho_bar / sum_rho);
                    }
                    acc += drho * (gc * (attr[c] - i_x[c]) / sum_rho);
                }
            }
        }
        acc
    });
    for (k, gk) in grads.into_iter().enumerate() {
        buf.d_normal[k] += gk;
    }
    Ok(())
}

/// Accumulate the differentiable part of dL/dp: splat-weight motion through
/// the center and the Jacobian, plus the attribute's own depth dependence.
pub fn backward_positions_smooth(
    cloud: &PointCloud,
    camera: &Camera,
    mode: ShadingMode,
    cache: &FragmentCache,
    g: &PixelLossGrad,
    cfg: &OptimizationConfig,
    buf: &mut GradientBuffer,
) -> Result<()> {
    check_inputs(cloud, camera, mode, cache, g)?;
    if buf.len() != cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient buffer holds {} points, cloud has {}",
            buf.len(),
            cloud.len()
        )));
    }
    let geoms = splat_geometries(cloud, camera, mode, cfg);
    let summary = summarize_pixels(cache, mode.background_vec());
    let channels = mode.channels();
    let width = cache.width();

    let grads = exec::map_indexed(cloud.len(), |k| {
        let Some((geom, attr)) = geoms[k].as_ref() else {
            return Vector3::zeros();
        };
        if geom.bbox_px.is_empty() {
            return Vector3::zeros();
        }
        let partials =
            SplatPartials::build(camera, &cloud.positions[k], &cloud.normals[k], cloud.splat_sigma[k], geom);
        let dw_dp = shading_dp(mode, camera, geom.depth);
        let mut acc = Vector3::zeros();
        for y in geom.bbox_px.y0..=geom.bbox_px.y1 {
            for x in geom.bbox_px.x0..=geom.bbox_px.x1 {
                let frags = cache.pixel(y as usize, x as usize);
                let Some(f) = frags
                    .iter()
                    .find(|f| f.point_index == k as u32 && f.visible)
                else {
                    continue;
                };
                let idx = y as usize * width + x as usize;
                let sum_rho = summary.sum_rho[idx];
                let i_x = summary.value[idx];
                let d = Vector2::new(x as f64 - geom.center_px.x, y as f64 - geom.center_px.y);
                let drho = partials.drho_dp(&geom.conic, &d, f.rho_bar);
                for c in 0..channels {
                    let gc = g.get(c, y as usize, x as usize);
                    if gc == 0.0 {
                        continue;
                    }
                    acc += drho * (gc * (attr[c] - i_x[c]) / sum_rho);
                    acc += dw_dp[c] * (gc * f.rho_bar / sum_rho);
                }
            }
        }
        acc
    });
    for (k, gk) in grads.into_iter().enumerate() {
        buf.d_position[k] += gk;
    }
    Ok(())
}

/// Which branch of the visibility approximation produced a contribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisibilityCase {
    /// Point invisible at the pixel, nothing visible in front of it.
    TowardFree,
    /// Point invisible at the pixel, occluded by closer fragments.
    TowardOccluded,
    /// Point visible at the pixel.
    Visible,
}

/// One recorded visibility term, for inspection in tests and diagnostics.
#[derive(Debug, Clone)]
pub struct VisibilityRecord {
    pub point: u32,
    pub pixel: (usize, usize),
    pub case: VisibilityCase,
    pub delta_i: Vector3<f64>,
    /// Channel-summed inner product of dL/dI with delta_i.
    pub loss_dot: f64,
    /// (delta_p, emitted contribution) per term; case `Visible` has two.
    pub terms: Vec<(Vector3<f64>, Vector3<f64>)>,
}

/// Re-evaluate the pixel after hypothetically inserting point `k` front-wise
/// at `depth_new` with its peak weight. Fragments already belonging to `k`
/// are dropped first.
fn insert_eval(
    frags: &[Fragment],
    k: u32,
    rho_peak: f64,
    attr: &Vector3<f64>,
    depth_new: f64,
    merge_t: f64,
) -> Vector3<f64> {
    let mut front = depth_new;
    for f in frags {
        if f.point_index != k {
            front = front.min(f.depth);
        }
    }
    let mut sum_rho = rho_peak; // k is visible by construction
    for f in frags {
        if f.point_index != k && f.depth - front <= merge_t {
            sum_rho += f.rho_bar;
        }
    }
    let mut value = *attr * (rho_peak / sum_rho);
    for f in frags {
        if f.point_index != k && f.depth - front <= merge_t {
            value += f.attribute * (f.rho_bar / sum_rho);
        }
    }
    value
}

/// Re-evaluate the pixel after removing every fragment of point `k`,
/// promoting whatever the new front-most depth admits.
fn remove_eval(
    frags: &[Fragment],
    k: u32,
    merge_t: f64,
    background: &Vector3<f64>,
) -> Vector3<f64> {
    let mut front = f64::INFINITY;
    for f in frags {
        if f.point_index != k {
            front = front.min(f.depth);
        }
    }
    if !front.is_finite() {
        return *background;
    }
    let mut sum_rho = 0.0;
    for f in frags {
        if f.point_index != k && f.depth - front <= merge_t {
            sum_rho += f.rho_bar;
        }
    }
    let mut value = Vector3::zeros();
    for f in frags {
        if f.point_index != k && f.depth - front <= merge_t {
            value += f.attribute * (f.rho_bar / sum_rho);
        }
    }
    value
}

/// Smallest in-plane world displacement taking the splat center out of its
/// own cutoff support at the pixel, measured in the ellipse metric.
fn exit_displacement(
    camera: &Camera,
    geom: &SplatGeometry,
    pixel: &Vector2<f64>,
    cutoff_c: f64,
) -> Vector3<f64> {
    let d = pixel - geom.center_px;
    let q2 = (d.transpose() * geom.conic * d)[0];
    let delta_screen = if q2 > 1e-20 {
        let scale = (2.0 * cutoff_c / q2).sqrt();
        d * (1.0 - scale)
    } else {
        // Center sits on the pixel: exit along the fastest direction, the
        // major eigenvector of the conic.
        let eig = geom.conic.symmetric_eigen();
        let (idx, lambda) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
            (0, eig.eigenvalues[0])
        } else {
            (1, eig.eigenvalues[1])
        };
        let mut v = eig.eigenvectors.column(idx).into_owned();
        if v.x < 0.0 || (v.x == 0.0 && v.y < 0.0) {
            v = -v;
        }
        -v * (2.0 * cutoff_c / lambda).sqrt()
    };
    // Screen displacement of the center to a world in-plane displacement at
    // the point's depth.
    let scale = geom.depth / camera.focal_px;
    let cam = Vector3::new(delta_screen.x * scale, -delta_screen.y * scale, 0.0);
    camera.rotation.transpose() * cam
}

/// Context shared by all visibility evaluations of one view.
struct VisibilityContext<'a> {
    camera: &'a Camera,
    cache: &'a FragmentCache,
    g: &'a PixelLossGrad,
    summary: &'a PixelSummary,
    background: Vector3<f64>,
    channels: usize,
    cutoff_c: f64,
    epsilon: f64,
}

/// Visibility gradient of point `k` at one pixel. Returns the contribution
/// to dL/dp_k and, when `record` is set, a full trace of the evaluation.
fn visibility_at_pixel(
    ctx: &VisibilityContext,
    geom: &SplatGeometry,
    attr: &Vector3<f64>,
    p_k: &Vector3<f64>,
    k: u32,
    x: usize,
    y: usize,
    record: Option<&mut Vec<VisibilityRecord>>,
) -> Vector3<f64> {
    let channels = ctx.channels;
    // Skip pixels with no upstream signal: the zero-filter would drop them.
    let mut g_any = false;
    let mut g_vec = Vector3::zeros();
    for c in 0..channels {
        let gc = ctx.g.get(c, y, x);
        g_vec[c] = gc;
        g_any |= gc != 0.0;
    }
    if !g_any {
        return Vector3::zeros();
    }

    let frags = ctx.cache.pixel(y, x);
    let merge_t = ctx.cache.merge_t();
    let idx = y * ctx.cache.width() + x;
    let i_old = ctx.summary.value[idx];

    let visible_here = frags
        .iter()
        .any(|f| f.point_index == k && f.visible);
    let pixel = Vector2::new(x as f64, y as f64);

    let (case, delta_i, terms_dp): (VisibilityCase, Vector3<f64>, Vec<Vector3<f64>>) =
        if visible_here {
            let i_new = remove_eval(frags, k, merge_t, &ctx.background);
            let q_x = ctx.camera.backproject(&pixel, geom.depth);
            let toward = q_x - p_k;
            let away = exit_displacement(ctx.camera, geom, &pixel, ctx.cutoff_c);
            (VisibilityCase::Visible, i_new - i_old, vec![away, toward])
        } else {
            // Front-most depth among fragments of other points.
            let mut front = f64::INFINITY;
            for f in frags {
                if f.point_index != k && f.visible {
                    front = front.min(f.depth);
                }
            }
            let occluded = front.is_finite() && geom.depth - front > merge_t;
            if occluded {
                let depth_new = front - merge_t;
                let i_new = insert_eval(frags, k, geom.prefactor, attr, depth_new, merge_t);
                let target = ctx.camera.backproject(&pixel, depth_new);
                (
                    VisibilityCase::TowardOccluded,
                    i_new - i_old,
                    vec![target - p_k],
                )
            } else {
                let i_new = insert_eval(frags, k, geom.prefactor, attr, geom.depth, merge_t);
                let q_x = ctx.camera.backproject(&pixel, geom.depth);
                (VisibilityCase::TowardFree, i_new - i_old, vec![q_x - p_k])
            }
        };

    let mut loss_dot = 0.0;
    for c in 0..channels {
        loss_dot += g_vec[c] * delta_i[c];
    }
    // Zero-filter: only keep contributions whose intensity change can reduce
    // the loss.
    if loss_dot >= 0.0 {
        if let Some(rec) = record {
            rec.push(VisibilityRecord {
                point: k,
                pixel: (y, x),
                case,
                delta_i,
                loss_dot,
                terms: Vec::new(),
            });
        }
        return Vector3::zeros();
    }

    let mut total = Vector3::zeros();
    let mut recorded_terms = Vec::new();
    for dp in &terms_dp {
        let contribution = dp * (loss_dot / (dp.norm_squared() + ctx.epsilon));
        total += contribution;
        if record.is_some() {
            recorded_terms.push((*dp, contribution));
        }
    }
    if let Some(rec) = record {
        rec.push(VisibilityRecord {
            point: k,
            pixel: (y, x),
            case,
            delta_i,
            loss_dot,
            terms: recorded_terms,
        });
    }
    total
}

/// Visibility gradient of one point at one pixel (the per-pixel operation;
/// the batch pass amortizes the shared setup).
pub fn visibility_gradient(
    cloud: &PointCloud,
    camera: &Camera,
    mode: ShadingMode,
    cache: &FragmentCache,
    g: &PixelLossGrad,
    cfg: &OptimizationConfig,
    point: usize,
    pixel_xy: (usize, usize),
) -> Result<Vector3<f64>> {
    check_inputs(cloud, camera, mode, cache, g)?;
    let Some(geom) = crate::forward::compute_splat_geometry(
        camera,
        &cloud.positions[point],
        &cloud.normals[point],
        cloud.splat_sigma[point],
        cfg.cutoff_c,
    ) else {
        return Ok(Vector3::zeros());
    };
    let attr = crate::forward::shade_point(
        mode,
        &cloud.normals[point],
        &cloud.albedo[point],
        geom.depth,
        camera,
    );
    let summary = summarize_pixels(cache, mode.background_vec());
    let ctx = VisibilityContext {
        camera,
        cache,
        g,
        summary: &summary,
        background: mode.background_vec(),
        channels: mode.channels(),
        cutoff_c: cfg.cutoff_c,
        epsilon: cfg.epsilon_grad,
    };
    Ok(visibility_at_pixel(
        &ctx,
        &geom,
        &attr,
        &cloud.positions[point],
        point as u32,
        pixel_xy.0,
        pixel_xy.1,
        None,
    ))
}

/// Visibility pass over a whole view: every point scans an R-dilated
/// neighborhood of its own splat bbox.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_positions_visibility(
    cloud: &PointCloud,
    camera: &Camera,
    mode: ShadingMode,
    cache: &FragmentCache,
    g: &PixelLossGrad,
    cfg: &OptimizationConfig,
    buf: &mut GradientBuffer,
    mut recorder: Option<&mut Vec<VisibilityRecord>>,
) -> Result<()> {
    check_inputs(cloud, camera, mode, cache, g)?;
    let geoms = splat_geometries(cloud, camera, mode, cfg);
    let summary = summarize_pixels(cache, mode.background_vec());
    let ctx = VisibilityContext {
        camera,
        cache,
        g,
        summary: &summary,
        background: mode.background_vec(),
        channels: mode.channels(),
        cutoff_c: cfg.cutoff_c,
        epsilon: cfg.epsilon_grad,
    };
    let r = cfg.vis_dilation_px as i64;

    if let Some(rec) = recorder.as_deref_mut() {
        // Sequential instrumented path.
        for (k, entry) in geoms.iter().enumerate() {
            let Some((geom, attr)) = entry.as_ref() else { continue };
            let region = geom.bbox_px.dilate(r, camera.width, camera.height);
            if region.is_empty() {
                continue;
            }
            let mut acc = Vector3::zeros();
            for y in region.y0..=region.y1 {
                for x in region.x0..=region.x1 {
                    acc += visibility_at_pixel(
                        &ctx,
                        geom,
                        attr,
                        &cloud.positions[k],
                        k as u32,
                        x as usize,
                        y as usize,
                        Some(rec),
                    );
                }
            }
            buf.d_position[k] += acc;
        }
        return Ok(());
    }

    let grads = exec::map_indexed(cloud.len(), |k| {
        let Some((geom, attr)) = geoms[k].as_ref() else {
            return Vector3::zeros();
        };
        let region = geom.bbox_px.dilate(r, camera.width, camera.height);
        if region.is_empty() {
            return Vector3::zeros();
        }
        let mut acc = Vector3::zeros();
        for y in region.y0..=region.y1 {
            for x in region.x0..=region.x1 {
                acc += visibility_at_pixel(
                    &ctx,
                    geom,
                    attr,
                    &cloud.positions[k],
                    k as u32,
                    x as usize,
                    y as usize,
                    None,
                );
            }
        }
        acc
    });
    for (k, gk) in grads.into_iter().enumerate() {
        buf.d_position[k] += gk;
    }
    Ok(())
}

/// Visibility pass with full instrumentation: returns the gradient buffer
/// and one record per evaluated (point, pixel) contribution, including the
/// zero-filtered ones.
pub fn visibility_pass_recorded(
    cloud: &PointCloud,
    camera: &Camera,
    mode: ShadingMode,
    cache: &FragmentCache,
    g: &PixelLossGrad,
    cfg: &OptimizationConfig,
) -> Result<(GradientBuffer, Vec<VisibilityRecord>)> {
    let mut buf = GradientBuffer::zeros(cloud.len());
    let mut records = Vec::new();
    backward_positions_visibility(cloud, camera, mode, cache, g, cfg, &mut buf, Some(&mut records))?;
    Ok((buf, records))
}

/// Full backward pass over a set of views: normals, smooth positions and
/// visibility gradients, accumulated in view order.
pub fn backward_pass(
    cloud: &PointCloud,
    cameras: &[Camera],
    mode: ShadingMode,
    caches: &[FragmentCache],
    g_per_view: &[PixelLossGrad],
    cfg: &OptimizationConfig,
) -> Result<GradientBuffer> {
    if cameras.len() != caches.len() || cameras.len() != g_per_view.len() {
        return Err(Error::ShapeMismatch(format!(
            "view counts disagree: {} cameras, {} caches, {} gradients",
            cameras.len(),
            caches.len(),
            g_per_view.len()
        )));
    }
    let mut buf = GradientBuffer::zeros(cloud.len());
    for ((camera, cache), g) in cameras.iter().zip(caches).zip(g_per_view) {
        backward_normals(cloud, camera, mode, cache, g, cfg, &mut buf)?;
        backward_positions_smooth(cloud, camera, mode, cache, g, cfg, &mut buf)?;
        backward_positions_visibility(cloud, camera, mode, cache, g, cfg, &mut buf, None)?;
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::rasterize_unchecked;
    use approx::assert_relative_eq;

    fn camera(width: u32, height: u32, focal: f64, distance: f64) -> Camera {
        Camera::look_at(
            Vector3::new(0.0, 0.0, distance),
            Vector3::zeros(),
            focal,
            width,
            height,
        )
        .unwrap()
    }

    fn single_splat_cloud(sigma: f64) -> PointCloud {
        let mut cloud = PointCloud::new(
            vec![Vector3::zeros()],
            vec![Vector3::new(0.0, 0.0, 1.0)],
        )
        .unwrap();
        cloud.set_uniform_sigma(sigma);
        cloud
    }

    /// Curved patch of overlapping splats: bounded depth spread so every
    /// fragment stays merged (no occlusion boundaries).
    fn patch_cloud(seed: u64, count: usize) -> PointCloud {
        use rand::Rng as _;
        use rand::SeedableRng as _;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut positions = Vec::new();
        let mut normals = Vec::new();
        for _ in 0..count {
            let x = rng.gen_range(-0.25..0.25);
            let y = rng.gen_range(-0.25..0.25);
            let z = 0.05 * (x * x + y * y);
            positions.push(Vector3::new(x, y, z));
            let n = Vector3::new(
                rng.gen_range(-0.35..0.35),
                rng.gen_range(-0.35..0.35),
                1.0,
            );
            normals.push(n.normalize());
        }
        let mut cloud = PointCloud::new(positions, normals).unwrap();
        cloud.set_uniform_sigma(0.12);
        cloud
    }

    /// Upstream gradient restricted to pixels where every splat is either
    /// deep inside or clearly outside its support, so finite differences see
    /// no truncation jumps.
    fn interior_gradient(
        cloud: &PointCloud,
        cam: &Camera,
        mode: ShadingMode,
        cfg: &OptimizationConfig,
        seed: u64,
    ) -> PixelLossGrad {
        use rand::Rng as _;
        use rand::SeedableRng as _;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let geoms: Vec<_> = (0..cloud.len())
            .filter_map(|i| {
                crate::forward::compute_splat_geometry(
                    cam,
                    &cloud.positions[i],
                    &cloud.normals[i],
                    cloud.splat_sigma[i],
                    cfg.cutoff_c,
                )
            })
            .collect();
        let mut g = ImagePlanes::new(cam.width as usize, cam.height as usize, mode.channels());
        for y in 0..cam.height as usize {
            for x in 0..cam.width as usize {
                let interior = geoms.iter().all(|geom| {
                    let q = geom.quadratic_form(x as f64, y as f64);
                    q < cfg.cutoff_c - 0.5 || q > cfg.cutoff_c + 0.5
                });
                if !interior {
                    continue;
                }
                for c in 0..mode.channels() {
                    g.set(c, y, x, rng.gen_range(-1.0..1.0));
                }
            }
        }
        g
    }

    /// Scalar probe loss sum_x g . I(x) rendered from scratch.
    fn probe_loss(
        cloud: &PointCloud,
        cam: &Camera,
        mode: ShadingMode,
        cfg: &OptimizationConfig,
        g: &PixelLossGrad,
    ) -> f64 {
        let out = rasterize_unchecked(cloud, cam, mode, cfg);
        out.image
            .planes
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum()
    }

    fn fd_check(
        cloud: &PointCloud,
        cam: &Camera,
        mode: ShadingMode,
        cfg: &OptimizationConfig,
        g: &PixelLossGrad,
        check_positions: bool,
    ) {
        let out = rasterize_unchecked(cloud, cam, mode, cfg);
        let mut buf = GradientBuffer::zeros(cloud.len());
        backward_normals(cloud, cam, mode, &out.cache, g, cfg, &mut buf).unwrap();
        backward_positions_smooth(cloud, cam, mode, &out.cache, g, cfg, &mut buf).unwrap();
        let h = 1e-4;
        for i in 0..cloud.len() {
            for axis in 0..3 {
                // Normals: perturb the raw (unnormalized) component, which is
                // exactly what the analytic gradient differentiates.
                let mut plus = cloud.clone();
                plus.normals[i][axis] += h;
                let mut minus = cloud.clone();
                minus.normals[i][axis] -= h;
                let fd =
                    (probe_loss(&plus, cam, mode, cfg, g) - probe_loss(&minus, cam, mode, cfg, g))
                        / (2.0 * h);
                let an = buf.d_normal[i][axis];
                assert!(
                    (fd - an).abs() <= 1e-3 * an.abs().max(fd.abs()).max(1e-6) + 1e-6,
                    "normal fd mismatch: point {i} axis {axis}: fd {fd} vs analytic {an}"
                );
                if check_positions {
                    let mut plus = cloud.clone();
                    plus.positions[i][axis] += h;
                    let mut minus = cloud.clone();
                    minus.positions[i][axis] -= h;
                    let fd = (probe_loss(&plus, cam, mode, cfg, g)
                        - probe_loss(&minus, cam, mode, cfg, g))
                        / (2.0 * h);
                    let an = buf.d_position[i][axis];
                    assert!(
                        (fd - an).abs() <= 1e-3 * an.abs().max(fd.abs()).max(1e-6) + 1e-6,
                        "position fd mismatch: point {i} axis {axis}: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn single_splat_gradients_match_finite_differences() {
        let cam = camera(48, 48, 60.0, 3.0);
        let mut cloud = single_splat_cloud(0.08);
        // Normal strictly inside the positive camera octant keeps diffuse
        // shading away from its kinks.
        cloud.normals[0] = Vector3::new(0.3, 0.35, 0.9).normalize();
        let cfg = OptimizationConfig::default();
        for mode in [
            ShadingMode::DiffuseThreeSunRgb,
            ShadingMode::NormalMap,
            ShadingMode::InverseDepth,
        ] {
            let g = interior_gradient(&cloud, &cam, mode, &cfg, 17);
            fd_check(&cloud, &cam, mode, &cfg, &g, true);
        }
    }

    #[test]
    fn overlapping_patch_gradients_match_finite_differences() {
        let cam = camera(64, 64, 80.0, 3.0);
        let cloud = patch_cloud(23, 5);
        let cfg = OptimizationConfig::default();
        let g = interior_gradient(&cloud, &cam, ShadingMode::DiffuseThreeSunRgb, &cfg, 29);
        fd_check(&cloud, &cam, ShadingMode::DiffuseThreeSunRgb, &cfg, &g, true);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_buffer() {
        let cam = camera(32, 32, 40.0, 3.0);
        let cloud = patch_cloud(5, 4);
        let cfg = OptimizationConfig::default();
        let out = rasterize_unchecked(&cloud, &cam, ShadingMode::DiffuseThreeSunRgb, &cfg);
        let g = ImagePlanes::new(32, 32, 3);
        let buf = backward_pass(
            &cloud,
            std::slice::from_ref(&cam),
            ShadingMode::DiffuseThreeSunRgb,
            std::slice::from_ref(&out.cache),
            std::slice::from_ref(&g),
            &cfg,
        )
        .unwrap();
        assert!(buf.d_normal.iter().all(|v| v.norm() == 0.0));
        assert!(buf.d_position.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn normal_map_attribute_term_is_the_affine_jacobian() {
        let cam = camera(32, 32, 40.0, 3.0);
        let cloud = single_splat_cloud(0.1);
        let cfg = OptimizationConfig::default();
        let mode = ShadingMode::NormalMap;
        let out = rasterize_unchecked(&cloud, &cam, mode, &cfg);
        let g = interior_gradient(&cloud, &cam, mode, &cfg, 3);
        let mut buf = GradientBuffer::zeros(1);
        backward_normals_terms(&cloud, &cam, mode, &out.cache, &g, &cfg, &mut buf, true, false)
            .unwrap();
        // One visible splat: rho/sum_rho = 1, so the gradient is the constant
        // affine map d w_c / d n = R_c / 2 weighted by the upstream sums.
        let mut expected = Vector3::zeros();
        for c in 0..3 {
            let mut gsum = 0.0;
            for y in 0..32 {
                for x in 0..32 {
                    if !out.cache.pixel(y, x).is_empty() {
                        gsum += g.get(c, y, x);
                    }
                }
            }
            expected += cam.rotation.row(c).transpose() * (0.5 * gsum);
        }
        assert_relative_eq!(buf.d_normal[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn duplicating_a_view_doubles_the_buffer() {
        let cam = camera(48, 48, 60.0, 3.0);
        let cloud = patch_cloud(7, 5);
        let cfg = OptimizationConfig::default();
        let mode = ShadingMode::DiffuseThreeSunRgb;
        let out = rasterize_unchecked(&cloud, &cam, mode, &cfg);
        let mut g = ImagePlanes::new(48, 48, 3);
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v = ((i % 13) as f64 - 6.0) / 7.0;
        }
        let one = backward_pass(
            &cloud,
            std::slice::from_ref(&cam),
            mode,
            std::slice::from_ref(&out.cache),
            std::slice::from_ref(&g),
            &cfg,
        )
        .unwrap();
        let two = backward_pass(
            &cloud,
            &[cam.clone(), cam.clone()],
            mode,
            &[out.cache.clone(), out.cache.clone()],
            &[g.clone(), g.clone()],
            &cfg,
        )
        .unwrap();
        for i in 0..cloud.len() {
            assert_relative_eq!(two.d_position[i], one.d_position[i] * 2.0, epsilon = 1e-15);
            assert_relative_eq!(two.d_normal[i], one.d_normal[i] * 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn backward_pass_composes_the_three_contributions() {
        let cam = camera(48, 48, 60.0, 3.0);
        let cloud = single_splat_cloud(0.1);
        let cfg = OptimizationConfig::default();
        let mode = ShadingMode::DiffuseThreeSunRgb;
        let out = rasterize_unchecked(&cloud, &cam, mode, &cfg);
        let mut g = ImagePlanes::new(48, 48, 3);
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v = ((i % 7) as f64 - 3.0) / 11.0;
        }
        let full = backward_pass(
            &cloud,
            std::slice::from_ref(&cam),
            mode,
            std::slice::from_ref(&out.cache),
            std::slice::from_ref(&g),
            &cfg,
        )
        .unwrap();
        let mut parts = GradientBuffer::zeros(1);
        backward_normals(&cloud, &cam, mode, &out.cache, &g, &cfg, &mut parts).unwrap();
        backward_positions_smooth(&cloud, &cam, mode, &out.cache, &g, &cfg, &mut parts).unwrap();
        let (vis, _) =
            visibility_pass_recorded(&cloud, &cam, mode, &out.cache, &g, &cfg).unwrap();
        parts.add_assign(&vis);
        assert_relative_eq!(full.d_position[0], parts.d_position[0], epsilon = 1e-15);
        assert_relative_eq!(full.d_normal[0], parts.d_normal[0], epsilon = 1e-15);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cam = camera(16, 16, 20.0, 3.0);
        let cloud = patch_cloud(1, 3);
        let cfg = OptimizationConfig::default();
        let out = rasterize_unchecked(&cloud, &cam, ShadingMode::DiffuseThreeSunRgb, &cfg);
        let bigger = patch_cloud(1, 4);
        let g = ImagePlanes::new(16, 16, 3);
        let mut buf = GradientBuffer::zeros(bigger.len());
        let err = backward_normals(
            &bigger,
            &cam,
            ShadingMode::DiffuseThreeSunRgb,
            &out.cache,
            &g,
            &cfg,
            &mut buf,
        )
        .unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)));
    }

    #[test]
    fn view_count_mismatch_is_rejected() {
        let cam = camera(16, 16, 20.0, 3.0);
        let cloud = patch_cloud(1, 3);
        let cfg = OptimizationConfig::default();
        let out = rasterize_unchecked(&cloud, &cam, ShadingMode::DiffuseThreeSunRgb, &cfg);
        let g = ImagePlanes::new(16, 16, 3);
        let err = backward_pass(
            &cloud,
            &[cam.clone(), cam],
            ShadingMode::DiffuseThreeSunRgb,
            std::slice::from_ref(&out.cache),
            std::slice::from_ref(&g),
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    // --- visibility gradient cases ---------------------------------------

    /// Lone splat centered on the image; gradient favors the splat's own
    /// color at a far pixel (toward case) or rejects it (filtered).
    fn lone_splat_scene() -> (PointCloud, Camera, OptimizationConfig) {
        let cam = camera(64, 64, 80.0, 4.0);
        let cloud = single_splat_cloud(0.05);
        let cfg = OptimizationConfig::default();
        (cloud, cam, cfg)
    }

    #[test]
    fn zero_filter_emits_exact_zero() {
        let (cloud, cam, cfg) = lone_splat_scene();
        let mode = ShadingMode::DiffuseThreeSunRgb;
        let out = rasterize_unchecked(&cloud, &cam, mode, &cfg);
        // Positive upstream gradient on empty pixels only: pulling the splat
        // there can only add intensity, which increases this loss, so every
        // contribution must be filtered to an exact zero.
        let mut g = ImagePlanes::new(64, 64, 3);
        for y in 0..64 {
            for x in 0..64 {
                if out.cache.pixel(y, x).is_empty() {
                    for c in 0..3 {
                        g.set(c, y, x, 1.0);
                    }
                }
            }
        }
        let (buf, records) =
            visibility_pass_recorded(&cloud, &cam, mode, &out.cache, &g, &cfg).unwrap();
        assert_eq!(buf.d_position[0], Vector3::zeros());
        assert!(!records.is_empty());
        for r in &records {
            assert!(r.loss_dot >= 0.0);
            assert!(r.terms.is_empty());
        }
        // The per-pixel operation agrees.
        let v = visibility_gradient(&cloud, &cam, mode, &out.cache, &g, &cfg, 0, (40, 50)).unwrap();
        assert_eq!(v, Vector3::zeros());
    }

    #[test]
    fn toward_case_matches_the_linear_approximation_formula() {
        let (cloud, cam, cfg) = lone_splat_scene();
        let mode = ShadingMode::DiffuseThreeSunRgb;
        let out = rasterize_unchecked(&cloud, &cam, mode, &cfg);
        // Want the splat at a background pixel 10 px from the center.
        let (center, depth) = cam.project(&cloud.positions[0]).unwrap();
        let px = (center.x as usize + 10, center.y as usize);
        let mut g = ImagePlanes::new(64, 64, 3);
        for c in 0..3 {
            g.set(c, px.1, px.0, -1.0);
        }
        let contribution =
            visibility_gradient(&cloud, &cam, mode, &out.cache, &g, &cfg, 0, px).unwrap();

        // Independent evaluation of the stated formula.
        let attr = crate::forward::shade_point(
            mode,
            &cloud.normals[0],
            &cloud.albedo[0],
            depth,
            &cam,
        );
        let delta_i = attr; // black background, splat alone fills the pixel
        let q_x = cam.backproject(&Vector2::new(px.0 as f64, px.1 as f64), depth);
        let delta_p = q_x - cloud.positions[0];
        let loss_dot: f64 = (0..3).map(|c| -delta_i[c]).sum();
        let expected = delta_p * (loss_dot / (delta_p.norm_squared() + cfg.epsilon_grad));
        assert_relative_eq!(contribution, expected, epsilon = 1e-12);
        // Pulls the point towards the pixel in descent direction.
        assert!((-contribution).dot(&delta_p) > 0.0);
    }

    #[test]
    fn occluded_case_moves_point_towards_camera() {
        let cam = camera(64, 64, 80.0, 4.0);
        // Two splats on the optical axis; the rear one well beyond the merge
        // threshold. Rear is red-ish, front renders dark.
        let mut cloud = PointCloud::with_attributes(
            vec![Vector3::new(0.0, 0.0, 0.5), Vector3::new(0.0, 0.0, 0.0)],
            vec![Vector3::new(0.0, 0.0, 1.0); 2],
            vec![Vector3::new(0.05, 0.05, 0.05), Vector3::new(1.0, 0.0, 0.0)],
            vec![0.05; 2],
        )
        .unwrap();
        cloud.albedo[1] = Vector3::new(1.0, 1.0, 1.0);
        let cfg = OptimizationConfig::default();
        let mode = ShadingMode::DiffuseThreeSunRgb;
        let out = rasterize_unchecked(&cloud, &cam, mode, &cfg);
        let (center, _) = cam.project(&cloud.positions[1]).unwrap();
        let px = (center.x.round() as usize, center.y.round() as usize);
        // Favor brighter values at the pixel: the occluded white splat
        // becoming visible reduces the loss.
        let mut g = ImagePlanes::new(64, 64, 3);
        for c in 0..3 {
            g.set(c, px.1, px.0, -1.0);
        }
        let (_, records) =
            visibility_pass_recorded(&cloud, &cam, mode, &out.cache, &g, &cfg).unwrap();
        let rec = records
            .iter()
            .find(|r| r.point == 1 && r.pixel == (px.1, px.0))
            .expect("record for the occluded point at the center pixel");
        assert_eq!(rec.case, VisibilityCase::TowardOccluded);
        assert!(rec.loss_dot < 0.0);
        let (delta_p, contribution) = rec.terms[0];
        // The displacement that flips visibility moves the point closer to
        // the camera (camera-space z up, depth down)...
        assert!((cam.rotation * delta_p).z > 0.0);
        // ... and so does the descent step.
        assert!((cam.rotation * -contribution).z > 0.0);
    }

    #[test]
    fn visible_case_terms_have_opposite_in_plane_signs() {
        let (cloud, cam, cfg) = lone_splat_scene();
        let mode = ShadingMode::DiffuseThreeSunRgb;
        let out = rasterize_unchecked(&cloud, &cam, mode, &cfg);
        let (center, _) = cam.project(&cloud.positions[0]).unwrap();
        // A pixel inside the support but off center.
        let px = (center.x.round() as usize + 2, center.y.round() as usize);
        assert!(out
            .cache
            .pixel(px.1, px.0)
            .iter()
            .any(|f| f.point_index == 0 && f.visible));
        // Removal reduces the loss when the upstream gradient is positive on
        // the splat's own color.
        let mut g = ImagePlanes::new(64, 64, 3);
        for c in 0..3 {
            g.set(c, px.1, px.0, 1.0);
        }
        let (_, records) =
            visibility_pass_recorded(&cloud, &cam, mode, &out.cache, &g, &cfg).unwrap();
        let rec = records
            .iter()
            .find(|r| r.pixel == (px.1, px.0) && r.case == VisibilityCase::Visible)
            .expect("visible-case record");
        assert_eq!(rec.terms.len(), 2);
        let in_plane = |v: &Vector3<f64>| {
            let c = cam.rotation * v;
            Vector2::new(c.x, c.y)
        };
        let away = in_plane(&rec.terms[0].0);
        let toward = in_plane(&rec.terms[1].0);
        assert!(away.dot(&toward) < 0.0, "away {away:?} toward {toward:?}");
    }

    #[test]
    fn epsilon_bounds_every_emitted_term() {
        let cam = camera(48, 48, 60.0, 3.5);
        let cloud = patch_cloud(41, 6);
        let cfg = OptimizationConfig::default();
        let mode = ShadingMode::DiffuseThreeSunRgb;
        let out = rasterize_unchecked(&cloud, &cam, mode, &cfg);
        let mut g = ImagePlanes::new(48, 48, 3);
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v = ((i % 17) as f64 - 8.0) / 5.0;
        }
        let (_, records) =
            visibility_pass_recorded(&cloud, &cam, mode, &out.cache, &g, &cfg).unwrap();
        let bound = 1.0 / (2.0 * cfg.epsilon_grad.sqrt());
        let mut emitted = 0usize;
        for r in &records {
            for (dp, _) in &r.terms {
                emitted += 1;
                let phi_grad = r.delta_i.norm() * dp.norm() / (dp.norm_squared() + cfg.epsilon_grad);
                assert!(phi_grad <= r.delta_i.norm() * bound + 1e-15);
            }
        }
        assert!(emitted > 0, "scene emitted no visibility terms");
    }

    #[test]
    fn single_descent_step_reduces_the_matching_loss() {
        // One splat 6 px off its reference position; a small step along the
        // negative gradient must reduce the SMAPE loss.
        let cam = camera(64, 64, 80.0, 4.0);
        let cfg = OptimizationConfig::default();
        let mode = ShadingMode::DiffuseThreeSunRgb;
        let mut reference_cloud = single_splat_cloud(0.05);
        reference_cloud.normals[0] = Vector3::new(0.2, 0.3, 0.95).normalize();
        let mut cloud = reference_cloud.clone();
        cloud.positions[0].x += 6.0 * 4.0 / 80.0; // ~6 px at depth 4
        let reference = rasterize_unchecked(&reference_cloud, &cam, mode, &cfg).image;

        let loss_of = |c: &PointCloud| {
            let img = rasterize_unchecked(c, &cam, mode, &cfg).image;
            crate::loss::smape(&img.planes, &reference.planes).unwrap().0
        };
        let out = rasterize_unchecked(&cloud, &cam, mode, &cfg);
        let (_, g) = crate::loss::smape(&out.image.planes, &reference.planes).unwrap();
        let buf = backward_pass(
            &cloud,
            std::slice::from_ref(&cam),
            mode,
            std::slice::from_ref(&out.cache),
            std::slice::from_ref(&g),
            &cfg,
        )
        .unwrap();
        let before = loss_of(&cloud);
        let mut stepped = cloud.clone();
        stepped.positions[0] -= buf.d_position[0] * 0.5;
        let after = loss_of(&stepped);
        assert!(
            after < before,
            "loss did not decrease: {before} -> {after} (grad {:?})",
            buf.d_position[0]
        );
    }
}
