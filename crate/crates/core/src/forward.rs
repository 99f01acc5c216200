//! Screen-space EWA splatting forward pass.
//!
//! Each point is an isotropic Gaussian of deviation sigma in its tangent
//! plane. Projecting the tangent plane to the screen and linearizing at the
//! point yields a 2x2 map J, so the splat becomes an elliptical Gaussian with
//! covariance sigma^2 J J^T, convolved with a unit screen-space low-pass
//! (+I). The rasterizer truncates that ellipse at a cutoff on its quadratic
//! form, resolves occlusion with a depth merge threshold, normalizes the
//! per-pixel attribute sum, and caches the top-K nearest fragments per pixel
//! for the backward pass.

use crate::config::OptimizationConfig;
use crate::error::Result;
use crate::exec;
use crate::geometry::{bounding_box_diagonal, Camera, ImagePlanes, PointCloud, RenderedImage};
use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};

/// Minimum |det J| before a splat is treated as numerically singular.
pub const SINGULAR_DET_J: f64 = 1e-12;

/// What gets written into each rendered channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShadingMode {
    /// Diffuse albedo under three orthogonal camera-space sun lights colored
    /// pure red, green and blue: channel c is albedo_c * max(0, n_cam . e_c).
    DiffuseThreeSunRgb,
    /// Camera-space normal mapped affinely to [0,1]: (n_cam + 1) / 2.
    NormalMap,
    /// Single channel 1 / depth.
    InverseDepth,
}

impl ShadingMode {
    pub fn channels(&self) -> usize {
        match self {
            ShadingMode::DiffuseThreeSunRgb | ShadingMode::NormalMap => 3,
            ShadingMode::InverseDepth => 1,
        }
    }

    pub fn background(&self) -> Vec<f64> {
        match self {
            ShadingMode::DiffuseThreeSunRgb => vec![0.0, 0.0, 0.0],
            ShadingMode::NormalMap => vec![0.5, 0.5, 0.5],
            ShadingMode::InverseDepth => vec![0.0],
        }
    }

    /// Background padded into a fixed-width vector.
    pub fn background_vec(&self) -> Vector3<f64> {
        let bg = self.background();
        let mut v = Vector3::zeros();
        for (c, b) in bg.iter().enumerate() {
            v[c] = *b;
        }
        v
    }
}

/// Inclusive pixel rectangle, already clipped to the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelRect {
    pub fn is_empty(&self) -> bool {
        self.x0 > self.x1 || self.y0 > self.y1
    }

    pub fn dilate(&self, r: i64, width: u32, height: u32) -> PixelRect {
        PixelRect {
            x0: (self.x0 - r).max(0),
            y0: (self.y0 - r).max(0),
            x1: (self.x1 + r).min(width as i64 - 1),
            y1: (self.y1 + r).min(height as i64 - 1),
        }
    }
}

/// Screen-space footprint of one splat.
#[derive(Debug, Clone)]
pub struct SplatGeometry {
    /// Projection of the point center.
    pub center_px: Vector2<f64>,
    /// Inverse screen covariance (sigma^2 J J^T + I)^-1.
    pub conic: Matrix2<f64>,
    /// Tangent-to-screen linearization.
    pub jacobian: Matrix2<f64>,
    /// Peak splat weight: |det J| / (2 pi sqrt(det(sigma^2 J J^T + I))), so
    /// rho_bar(x) = prefactor * exp(-0.5 (x - center)^T conic (x - center)).
    pub prefactor: f64,
    /// Camera-space depth of the point.
    pub depth: f64,
    /// Tightest pixel rectangle containing the cutoff level set, clipped.
    pub bbox_px: PixelRect,
}

impl SplatGeometry {
    /// Gaussian exponent term 0.5 d^T conic d at pixel offset d.
    #[inline]
    pub fn quadratic_form(&self, px: f64, py: f64) -> f64 {
        let d = Vector2::new(px - self.center_px.x, py - self.center_px.y);
        0.5 * (d.transpose() * self.conic * d)[0]
    }

    /// Untruncated splat weight at the pixel center.
    #[inline]
    pub fn rho_bar(&self, px: f64, py: f64) -> f64 {
        self.prefactor * (-self.quadratic_form(px, py)).exp()
    }
}

/// The projection screen map S = d(screen)/d(p_cam) at a camera-space point.
pub(crate) fn screen_jacobian(camera: &Camera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let f = camera.focal_px;
    let dep = -pc.z;
    Matrix2x3::new(
        f / dep,
        0.0,
        f * pc.x / (dep * dep),
        0.0,
        -f / dep,
        -f * pc.y / (dep * dep),
    )
}

/// Deterministic orthonormal tangent basis perpendicular to `n`.
pub fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = n.iamin(); // axis least aligned with n
    let mut e = Vector3::zeros();
    e[a] = 1.0;
    let t1 = e.cross(n).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

/// Build the screen-space geometry of one splat, or `None` when the point is
/// culled: behind the camera, back-facing, or with a numerically singular
/// tangent-to-screen map.
///
/// `n` is assumed unit length; the function itself tolerates small deviations
/// so that finite-difference probes stay well-defined.
pub fn compute_splat_geometry(
    camera: &Camera,
    p: &Vector3<f64>,
    n: &Vector3<f64>,
    sigma: f64,
    cutoff_c: f64,
) -> Option<SplatGeometry> {
    debug_assert!(sigma > 0.0);
    let pc = camera.to_camera_space(p);
    let depth = -pc.z;
    if depth <= 0.0 {
        return None;
    }
    let n_cam = camera.rotation * n;
    // Back-face cull: normal pointing away from the camera.
    if n_cam.dot(&pc) >= 0.0 {
        return None;
    }
    let s = screen_jacobian(camera, &pc);
    let a = s * camera.rotation; // d(screen)/d(p_world)
    let m = a * n;
    let b = a * a.transpose() - m * m.transpose(); // J J^T for any tangent frame
    let det_b = b.determinant();
    if det_b < SINGULAR_DET_J * SINGULAR_DET_J {
        return None;
    }
    let cov = b * (sigma * sigma) + Matrix2::identity();
    let det_cov = cov.determinant();
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det_cov;
    let prefactor = det_b.sqrt() / (2.0 * std::f64::consts::PI * det_cov.sqrt());

    let (t1, t2) = tangent_basis(n);
    let j1 = a * t1;
    let j2 = a * t2;
    let jacobian = Matrix2::new(j1.x, j2.x, j1.y, j2.y);

    let c = camera.principal_point();
    let center_px = Vector2::new(
        c.x + camera.focal_px * pc.x / depth,
        c.y - camera.focal_px * pc.y / depth,
    );
    // Tightest axis-aligned box of the level set 0.5 d^T conic d <= C:
    // half extent along axis i is sqrt(2 C cov_ii).
    let hx = (2.0 * cutoff_c * cov[(0, 0)]).sqrt();
    let hy = (2.0 * cutoff_c * cov[(1, 1)]).sqrt();
    let bbox_px = PixelRect {
        x0: (center_px.x - hx).ceil().max(0.0) as i64,
        y0: (center_px.y - hy).ceil().max(0.0) as i64,
        x1: (center_px.x + hx).floor().min(camera.width as f64 - 1.0) as i64,
        y1: (center_px.y + hy).floor().min(camera.height as f64 - 1.0) as i64,
    };

    Some(SplatGeometry {
        center_px,
        conic,
        jacobian,
        prefactor,
        depth,
        bbox_px,
    })
}

/// Shaded attribute vector of a point for one view. Channels beyond the
/// mode's count stay zero.
pub fn shade_point(
    mode: ShadingMode,
    n: &Vector3<f64>,
    albedo: &Vector3<f64>,
    depth: f64,
    camera: &Camera,
) -> Vector3<f64> {
    match mode {
        ShadingMode::DiffuseThreeSunRgb => {
            let n_cam = camera.rotation * n;
            Vector3::new(
                albedo.x * n_cam.x.max(0.0),
                albedo.y * n_cam.y.max(0.0),
                albedo.z * n_cam.z.max(0.0),
            )
        }
        ShadingMode::NormalMap => {
            let n_cam = camera.rotation * n;
            (n_cam + Vector3::new(1.0, 1.0, 1.0)) / 2.0
        }
        ShadingMode::InverseDepth => Vector3::new(1.0 / depth, 0.0, 0.0),
    }
}

/// One splat sample at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub point_index: u32,
    /// Untruncated Gaussian weight at the pixel center.
    pub rho_bar: f64,
    /// Shaded attribute of the point in this view.
    pub attribute: Vector3<f64>,
    /// Camera-space depth of the point.
    pub depth: f64,
    /// Survived cutoff and occlusion truncation.
    pub visible: bool,
}

/// Per-pixel lists of at most K fragments, depth-sorted, front-most first.
#[derive(Debug, Clone)]
pub struct FragmentCache {
    width: usize,
    height: usize,
    k: usize,
    /// Depth merge threshold used when the cache was built (world units).
    merge_t: f64,
    cloud_len: usize,
    frags: Vec<Fragment>,
    lens: Vec<u8>,
}

impl FragmentCache {
    fn new(width: usize, height: usize, k: usize, merge_t: f64, cloud_len: usize) -> Self {
        let placeholder = Fragment {
            point_index: u32::MAX,
            rho_bar: 0.0,
            attribute: Vector3::zeros(),
            depth: f64::INFINITY,
            visible: false,
        };
        FragmentCache {
            width,
            height,
            k,
            merge_t,
            cloud_len,
            frags: vec![placeholder; width * height * k],
            lens: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn merge_t(&self) -> f64 {
        self.merge_t
    }

    pub fn cloud_len(&self) -> usize {
        self.cloud_len
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[Fragment] {
        let i = y * self.width + x;
        let len = self.lens[i] as usize;
        &self.frags[i * self.k..i * self.k + len]
    }

    pub fn total_fragments(&self) -> usize {
        self.lens.iter().map(|&l| l as usize).sum()
    }
}

/// Insert a fragment into a depth-sorted fixed-capacity slice, keeping the K
/// smallest keys (depth, point index).
fn insert_fragment(slot: &mut [Fragment], len: &mut u8, frag: Fragment) {
    let k = slot.len();
    let n = *len as usize;
    let key = (frag.depth, frag.point_index);
    let mut pos = n;
    for (i, f) in slot[..n].iter().enumerate() {
        if key < (f.depth, f.point_index) {
            pos = i;
            break;
        }
    }
    if pos == n {
        if n < k {
            slot[n] = frag;
            *len += 1;
        }
        return;
    }
    let last = if n < k { n } else { k - 1 };
    for i in (pos..last).rev() {
        slot[i + 1] = slot[i];
    }
    slot[pos] = frag;
    if n < k {
        *len += 1;
    }
}

/// Mark visibility against the front-most depth, then blend. Returns `None`
/// for an empty pixel. Blending normalizes each weight first so a single
/// fragment reproduces its attribute exactly.
pub(crate) fn blend_pixel(frags: &[Fragment]) -> Option<(Vector3<f64>, f64)> {
    if frags.is_empty() {
        return None;
    }
    let mut sum_rho = 0.0;
    for f in frags {
        if f.visible {
            sum_rho += f.rho_bar;
        }
    }
    let mut value = Vector3::zeros();
    for f in frags {
        if f.visible {
            value += f.attribute * (f.rho_bar / sum_rho);
        }
    }
    Some((value, sum_rho))
}

fn set_visibility(frags: &mut [Fragment], merge_t: f64) {
    if frags.is_empty() {
        return;
    }
    let front = frags[0].depth;
    for f in frags.iter_mut() {
        f.visible = f.depth - front <= merge_t;
    }
}

/// Everything a forward pass produces.
pub struct RenderOutput {
    pub image: RenderedImage,
    pub cache: FragmentCache,
    /// Indices of points that rasterized at least one fragment but are
    /// visible at none of their pixels, in increasing order.
    pub occluded_points: Vec<u32>,
}

/// Render a cloud and keep the fragment cache for gradient evaluation.
pub fn rasterize(
    cloud: &PointCloud,
    camera: &Camera,
    mode: ShadingMode,
    cfg: &OptimizationConfig,
) -> Result<(RenderedImage, FragmentCache)> {
    let out = rasterize_report(cloud, camera, mode, cfg)?;
    Ok((out.image, out.cache))
}

/// As [`rasterize`], also reporting which points were occluded everywhere so
/// the caller can bump occlusion counters between passes.
pub fn rasterize_report(
    cloud: &PointCloud,
    camera: &Camera,
    mode: ShadingMode,
    cfg: &OptimizationConfig,
) -> Result<RenderOutput> {
    cloud.validate()?;
    cfg.validate()?;
    Ok(rasterize_unchecked(cloud, camera, mode, cfg))
}

/// Forward pass without input validation. Used internally and by
/// finite-difference probes that perturb normals slightly off unit length.
pub(crate) fn rasterize_unchecked(
    cloud: &PointCloud,
    camera: &Camera,
    mode: ShadingMode,
    cfg: &OptimizationConfig,
) -> RenderOutput {
    let width = camera.width as usize;
    let height = camera.height as usize;
    let channels = mode.channels();
    let n = cloud.len();
    let merge_t = if n == 0 {
        0.0
    } else {
        cfg.merge_t_rel * bounding_box_diagonal(cloud).expect("non-empty cloud")
    };

    let geoms = splat_geometries(cloud, camera, mode, cfg);

    // Row binning: candidates iterate in point order inside each row.
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); height];
    for (i, g) in geoms.iter().enumerate() {
        if let Some((geom, _)) = g {
            if geom.bbox_px.is_empty() {
                continue;
            }
            for y in geom.bbox_px.y0..=geom.bbox_px.y1 {
                bins[y as usize].push(i as u32);
            }
        }
    }

    struct RowOut {
        frags: Vec<Fragment>,
        lens: Vec<u8>,
        image: Vec<f64>,
        produced: Vec<u32>,
        visible: Vec<u32>,
    }

    let background = mode.background_vec();
    let k = cfg.cache_k;
    let rows: Vec<RowOut> = exec::map_indexed(height, |y| {
        let placeholder = Fragment {
            point_index: u32::MAX,
            rho_bar: 0.0,
            attribute: Vector3::zeros(),
            depth: f64::INFINITY,
            visible: false,
        };
        let mut frags = vec![placeholder; width * k];
        let mut lens = vec![0u8; width];
        let mut produced = Vec::new();
        for &gi in &bins[y] {
            let (geom, attr) = geoms[gi as usize].as_ref().expect("binned geometry");
            let mut any = false;
            for x in geom.bbox_px.x0..=geom.bbox_px.x1 {
                let q = geom.quadratic_form(x as f64, y as f64);
                if q > cfg.cutoff_c {
                    continue;
                }
                any = true;
                let frag = Fragment {
                    point_index: gi,
                    rho_bar: geom.prefactor * (-q).exp(),
                    attribute: *attr,
                    depth: geom.depth,
                    visible: false,
                };
                let xi = x as usize;
                insert_fragment(&mut frags[xi * k..(xi + 1) * k], &mut lens[xi], frag);
            }
            if any {
                produced.push(gi);
            }
        }
        let mut image = vec![0.0; channels * width];
        let mut visible = Vec::new();
        for x in 0..width {
            let slot = &mut frags[x * k..x * k + lens[x] as usize];
            set_visibility(slot, merge_t);
            let value = match blend_pixel(slot) {
                Some((v, _)) => v,
                None => background,
            };
            for c in 0..channels {
                image[c * width + x] = value[c];
            }
            for f in slot.iter() {
                if f.visible {
                    visible.push(f.point_index);
                }
            }
        }
        RowOut {
            frags,
            lens,
            image,
            produced,
            visible,
        }
    });

    // Deterministic assembly in row order.
    let mut cache = FragmentCache::new(width, height, k, merge_t, n);
    let mut planes = ImagePlanes::new(width, height, channels);
    let mut produced_flags = vec![false; n];
    let mut visible_flags = vec![false; n];
    for (y, row) in rows.into_iter().enumerate() {
        cache.frags[y * width * k..(y + 1) * width * k].copy_from_slice(&row.frags);
        cache.lens[y * width..(y + 1) * width].copy_from_slice(&row.lens);
        for c in 0..channels {
            for x in 0..width {
                planes.set(c, y, x, row.image[c * width + x]);
            }
        }
        for i in row.produced {
            produced_flags[i as usize] = true;
        }
        for i in row.visible {
            visible_flags[i as usize] = true;
        }
    }
    let occluded_points = (0..n as u32)
        .filter(|&i| produced_flags[i as usize] && !visible_flags[i as usize])
        .collect();

    RenderOutput {
        image: RenderedImage {
            planes,
            background: mode.background(),
        },
        cache,
        occluded_points,
    }
}

/// Geometry plus shaded attribute for every point; `None` for culled points.
pub(crate) fn splat_geometries(
    cloud: &PointCloud,
    camera: &Camera,
    mode: ShadingMode,
    cfg: &OptimizationConfig,
) -> Vec<Option<(SplatGeometry, Vector3<f64>)>> {
    exec::map_indexed(cloud.len(), |i| {
        let geom = compute_splat_geometry(
            camera,
            &cloud.positions[i],
            &cloud.normals[i],
            cloud.splat_sigma[i],
            cfg.cutoff_c,
        )?;
        let attr = shade_point(mode, &cloud.normals[i], &cloud.albedo[i], geom.depth, camera);
        Some((geom, attr))
    })
}

/// Apply occlusion reports from a set of views: a point occluded in a view
/// gets its counter bumped once for that view.
pub fn apply_occlusion_reports(cloud: &mut PointCloud, reports: &[Vec<u32>]) {
    for report in reports {
        for &i in report {
            cloud.occlusion_count[i as usize] += 1;
        }
    }
}
