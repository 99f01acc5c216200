//! Core domain types: point clouds, cameras and image buffers.
//!
//! Conventions fixed here and inherited by every other module:
//! - world and camera space are right-handed, the camera looks along -z in
//!   camera space with y up,
//! - the principal point sits at the image center ((w-1)/2, (h-1)/2) with
//!   pixel centers on integer coordinates,
//! - depth is the camera-space z distance (not ray length), positive in
//!   front of the camera.

use crate::error::{Error, Result};
use crate::exec;
use crate::grid::SpatialGrid;
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const UNIT_NORMAL_TOL: f64 = 1e-6;

/// A point set with per-point shading and splatting attributes.
///
/// All arrays always have the same length. Normals stay unit length; any
/// code that mutates them must renormalize before handing the cloud back.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub albedo: Vec<Vector3<f64>>,
    pub splat_sigma: Vec<f64>,
    pub occlusion_count: Vec<u32>,
}

impl PointCloud {
    /// Build a cloud with white albedo and unit splat sigmas. Use
    /// [`PointCloud::assign_sigma_heuristic`] or an explicit override to set
    /// splat sizes before rendering.
    pub fn new(positions: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        let n = positions.len();
        let albedo = vec![Vector3::new(1.0, 1.0, 1.0); n];
        Self::with_attributes(positions, normals, albedo, vec![1.0; n])
    }

    pub fn with_attributes(
        positions: Vec<Vector3<f64>>,
        normals: Vec<Vector3<f64>>,
        albedo: Vec<Vector3<f64>>,
        splat_sigma: Vec<f64>,
    ) -> Result<Self> {
        let cloud = PointCloud {
            occlusion_count: vec![0; positions.len()],
            positions,
            normals,
            albedo,
            splat_sigma,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.normals.len() != n
            || self.albedo.len() != n
            || self.splat_sigma.len() != n
            || self.occlusion_count.len() != n
        {
            return Err(Error::InvalidCloud(format!(
                "attribute lengths disagree: positions {n}, normals {}, albedo {}, sigma {}, occlusion {}",
                self.normals.len(),
                self.albedo.len(),
                self.splat_sigma.len(),
                self.occlusion_count.len()
            )));
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidCloud(format!("non-finite position at {i}")));
            }
        }
        for (i, nrm) in self.normals.iter().enumerate() {
            if (nrm.norm() - 1.0).abs() > UNIT_NORMAL_TOL {
                return Err(Error::InvalidCloud(format!(
                    "normal {i} has length {} (must be unit within {UNIT_NORMAL_TOL})",
                    nrm.norm()
                )));
            }
        }
        for (i, a) in self.albedo.iter().enumerate() {
            if !a.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
                return Err(Error::InvalidCloud(format!(
                    "albedo {i} outside [0,1]: {a:?}"
                )));
            }
        }
        for (i, s) in self.splat_sigma.iter().enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::InvalidCloud(format!(
                    "splat sigma {i} = {s} (must be strictly positive)"
                )));
            }
        }
        Ok(())
    }

    /// Per-point splat deviation: mean distance to the 7 nearest neighbors.
    /// Splats sized this way overlap enough for hole-free renderings at
    /// typical sampling densities. A lone point falls back to sigma 1.
    pub fn assign_sigma_heuristic(&mut self) {
        const NEIGHBORS: usize = 7;
        let n = self.len();
        if n <= 1 {
            self.splat_sigma = vec![1.0; n];
            return;
        }
        let diag = bounding_box_diagonal(self).unwrap_or(1.0);
        let cell = if diag > 0.0 {
            (diag / (n as f64).cbrt()).max(diag * 1e-6)
        } else {
            1.0
        };
        let grid = SpatialGrid::build(&self.positions, cell);
        let sigmas = exec::map_indexed(n, |i| {
            let knn = grid.k_nearest(&self.positions[i], NEIGHBORS, i as u32);
            if knn.is_empty() {
                return 1.0;
            }
            let mean: f64 = knn
                .iter()
                .map(|&j| (self.positions[j as usize] - self.positions[i]).norm())
                .sum::<f64>()
                / knn.len() as f64;
            if mean > 0.0 {
                mean
            } else {
                // Coincident duplicates: fall back to a scale-derived size.
                (diag * 1e-3).max(1e-9)
            }
        });
        self.splat_sigma = sigmas;
    }

    /// Set one sigma for every point.
    pub fn set_uniform_sigma(&mut self, sigma: f64) {
        assert!(sigma > 0.0, "sigma must be positive");
        for s in &mut self.splat_sigma {
            *s = sigma;
        }
    }

    pub fn reset_occlusion_counts(&mut self) {
        for o in &mut self.occlusion_count {
            *o = 0;
        }
    }
}

/// Length of the axis-aligned bounding box diagonal of the cloud positions.
pub fn bounding_box_diagonal(cloud: &PointCloud) -> Result<f64> {
    let (lo, hi) = bounding_box(cloud)?;
    Ok((hi - lo).norm())
}

/// Axis-aligned bounding box (min corner, max corner).
pub fn bounding_box(cloud: &PointCloud) -> Result<(Vector3<f64>, Vector3<f64>)> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut lo = cloud.positions[0];
    let mut hi = cloud.positions[0];
    for p in &cloud.positions[1..] {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    Ok((lo, hi))
}

/// Perturb positions with i.i.d. zero-mean Gaussian noise whose standard
/// deviation is `sigma_rel` times the bounding box diagonal (measured before
/// the perturbation). Normals are left untouched.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma_rel: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma_rel.is_finite() && sigma_rel >= 0.0) {
        return Err(Error::InvalidCloud(format!(
            "noise sigma must be non-negative, got {sigma_rel}"
        )));
    }
    let mut out = cloud.clone();
    if sigma_rel == 0.0 || cloud.is_empty() {
        return Ok(out);
    }
    let sigma = sigma_rel * bounding_box_diagonal(cloud)?;
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("positive std");
    for p in &mut out.positions {
        p.x += normal.sample(&mut rng);
        p.y += normal.sample(&mut rng);
        p.z += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Pinhole camera: world-to-camera rigid transform plus square-pixel focal
/// length. Looks along -z in camera space, y up.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub focal_px: f64,
    pub width: u32,
    pub height: u32,
}

pub const ORTHONORMAL_TOL: f64 = 1e-9;

impl Camera {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        focal_px: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera(format!(
                "rotation not orthonormal (max |R^T R - I| = {dev:.3e})"
            )));
        }
        if !(focal_px.is_finite() && focal_px > 0.0) {
            return Err(Error::InvalidCamera(format!("focal_px = {focal_px}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera(format!(
                "resolution {width}x{height}"
            )));
        }
        Ok(Camera {
            rotation,
            translation,
            focal_px,
            width,
            height,
        })
    }

    /// Camera at `eye` aimed at `target`. `up` defaults to +y with a +z
    /// fallback when the view direction is (anti)parallel to it.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        focal_px: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let view = target - eye;
        if view.norm() == 0.0 {
            return Err(Error::InvalidCamera("eye coincides with target".into()));
        }
        // Camera looks along -z, so +z points from target towards the eye.
        let z = (-view).normalize();
        let mut up = Vector3::new(0.0, 1.0, 0.0);
        if up.cross(&z).norm() < 1e-9 {
            up = Vector3::new(0.0, 0.0, 1.0);
        }
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -rotation * eye;
        Camera::new(rotation, translation, focal_px, width, height)
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        Vector2::new(
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// World position of the camera center.
    pub fn eye(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    pub fn to_camera_space(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_world_space(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    /// Project a world point. Returns screen pixel coordinates and positive
    /// camera-space depth, or `None` when the point is at or behind the
    /// camera plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let pc = self.to_camera_space(p);
        self.project_camera_space(&pc)
    }

    pub fn project_camera_space(&self, pc: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let depth = -pc.z;
        if depth <= 0.0 {
            return None;
        }
        let c = self.principal_point();
        Some((
            Vector2::new(
                c.x + self.focal_px * pc.x / depth,
                c.y - self.focal_px * pc.y / depth,
            ),
            depth,
        ))
    }

    /// Invert the projection at a known depth.
    pub fn backproject(&self, screen: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let c = self.principal_point();
        let pc = Vector3::new(
            (screen.x - c.x) * depth / self.focal_px,
            -(screen.y - c.y) * depth / self.focal_px,
            -depth,
        );
        self.to_world_space(&pc)
    }
}

/// Planar image storage: `channels` planes of `height x width` f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlanes {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImagePlanes {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        ImagePlanes {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels);
        ImagePlanes {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn same_shape(&self, other: &ImagePlanes) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Pixel value across channels (up to 3; missing channels read as 0).
    pub fn pixel_vec(&self, y: usize, x: usize) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        for c in 0..self.channels.min(3) {
            v[c] = self.get(c, y, x);
        }
        v
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A rendered image plus the background value written wherever no splat
/// contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub planes: ImagePlanes,
    pub background: Vec<f64>,
}

impl RenderedImage {
    pub fn constant(width: usize, height: usize, background: Vec<f64>) -> Self {
        let mut planes = ImagePlanes::new(width, height, background.len());
        for c in 0..background.len() {
            for y in 0..height {
                for x in 0..width {
                    planes.set(c, y, x, background[c]);
                }
            }
        }
        RenderedImage { planes, background }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub fn axis_camera(width: u32, height: u32, focal: f64, distance: f64) -> Camera {
        // Eye on +z looking at the origin: camera space equals world space
        // shifted by `distance` along z.
        Camera::look_at(
            Vector3::new(0.0, 0.0, distance),
            Vector3::zeros(),
            focal,
            width,
            height,
        )
        .unwrap()
    }

    fn tiny_cloud(positions: Vec<Vector3<f64>>) -> PointCloud {
        let n = positions.len();
        PointCloud::new(positions, vec![Vector3::new(0.0, 0.0, 1.0); n]).unwrap()
    }

    #[test]
    fn bbox_diagonal_matches_definition() {
        // Degenerate box.
        let single = tiny_cloud(vec![Vector3::new(3.0, -1.0, 2.0)]);
        assert_eq!(bounding_box_diagonal(&single).unwrap(), 0.0);

        // Two points along the main diagonal.
        let two = tiny_cloud(vec![Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0)]);
        assert_relative_eq!(bounding_box_diagonal(&two).unwrap(), 3f64.sqrt());

        // All eight corners of the unit cube.
        let mut corners = Vec::new();
        for i in 0..8 {
            corners.push(Vector3::new(
                (i & 1) as f64,
                ((i >> 1) & 1) as f64,
                ((i >> 2) & 1) as f64,
            ));
        }
        let cube = tiny_cloud(corners);
        assert_relative_eq!(bounding_box_diagonal(&cube).unwrap(), 3f64.sqrt());
    }

    #[test]
    fn bbox_of_empty_cloud_errors() {
        let empty = tiny_cloud(vec![]);
        assert!(matches!(
            bounding_box_diagonal(&empty),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn noise_zero_is_identity_and_seeds_are_deterministic() {
        let cloud = tiny_cloud(vec![
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ]);
        let same = add_gaussian_noise(&cloud, 0.0, 7).unwrap();
        assert_eq!(same, cloud);

        let a = add_gaussian_noise(&cloud, 0.05, 42).unwrap();
        let b = add_gaussian_noise(&cloud, 0.05, 42).unwrap();
        assert_eq!(a, b);
        let c = add_gaussian_noise(&cloud, 0.05, 43).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.normals, cloud.normals);
    }

    #[test]
    fn noise_std_matches_request() {
        // Unit-diagonal cloud: two anchor points plus bulk at the origin.
        let n = 100_000;
        let mut positions = vec![Vector3::zeros(); n];
        positions[0] = Vector3::new(1.0 / 3f64.sqrt(), 1.0 / 3f64.sqrt(), 1.0 / 3f64.sqrt());
        let cloud = tiny_cloud(positions);
        assert_relative_eq!(bounding_box_diagonal(&cloud).unwrap(), 1.0, epsilon = 1e-12);

        let sigma_rel = 0.01;
        let noisy = add_gaussian_noise(&cloud, sigma_rel, 123).unwrap();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut count = 0usize;
        for i in 1..n {
            let d = noisy.positions[i] - cloud.positions[i];
            for v in d.iter() {
                sum += v;
                sum2 += v * v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let std = (sum2 / count as f64 - mean * mean).sqrt();
        assert!(
            (std - sigma_rel).abs() < 0.05 * sigma_rel,
            "sample std {std} vs requested {sigma_rel}"
        );
    }

    #[test]
    fn negative_noise_rejected() {
        let cloud = tiny_cloud(vec![Vector3::zeros()]);
        assert!(add_gaussian_noise(&cloud, -0.1, 1).is_err());
    }

    #[test]
    fn projection_examples() {
        let cam = axis_camera(64, 48, 50.0, 5.0);
        // On the optical axis at depth d.
        let (px, depth) = cam.project(&Vector3::zeros()).unwrap();
        assert_relative_eq!(px.x, 31.5, epsilon = 1e-12);
        assert_relative_eq!(px.y, 23.5, epsilon = 1e-12);
        assert_relative_eq!(depth, 5.0, epsilon = 1e-12);

        // One focal-length-normalized unit to the side: exactly +1 pixel.
        let d = 5.0;
        let p = cam.to_world_space(&Vector3::new(d / 50.0, 0.0, -d));
        let (px, _) = cam.project(&p).unwrap();
        assert_relative_eq!(px.x, 32.5, epsilon = 1e-12);
        assert_relative_eq!(px.y, 23.5, epsilon = 1e-12);

        // Behind the camera.
        assert!(cam.project(&Vector3::new(0.0, 0.0, 10.0)).is_none());
    }

    #[test]
    fn project_backproject_round_trip() {
        let cam = Camera::look_at(
            Vector3::new(2.0, -1.0, 4.0),
            Vector3::new(0.2, 0.3, -0.1),
            80.0,
            100,
            80,
        )
        .unwrap();
        let points = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.5, -0.4, 0.3),
            Vector3::new(-1.0, 1.0, -1.0),
        ];
        for p in points {
            let (px, depth) = cam.project(&p).unwrap();
            let back = cam.backproject(&px, depth);
            assert_relative_eq!(back, p, epsilon = 1e-9 * p.norm().max(1.0));
        }
    }

    #[test]
    fn camera_rejects_bad_rotation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.1;
        assert!(Camera::new(r, Vector3::zeros(), 50.0, 10, 10).is_err());
    }

    #[test]
    fn sigma_heuristic_is_mean_neighbor_distance() {
        // Regular 3x3 grid in the plane, spacing 1: the 7 nearest of the
        // center point are 4 at distance 1 and 3 at sqrt(2).
        let mut positions = Vec::new();
        for y in -1..=1 {
            for x in -1..=1 {
                positions.push(Vector3::new(x as f64, y as f64, 0.0));
            }
        }
        let mut cloud = tiny_cloud(positions);
        cloud.assign_sigma_heuristic();
        let center = 4; // (0,0) in row-major -1..=1 order
        let expected = (4.0 * 1.0 + 3.0 * 2f64.sqrt()) / 7.0;
        assert_relative_eq!(cloud.splat_sigma[center], expected, epsilon = 1e-12);
    }

    #[test]
    fn cloud_validation_catches_bad_normals() {
        let bad = PointCloud::new(vec![Vector3::zeros()], vec![Vector3::new(0.0, 0.0, 0.5)]);
        assert!(bad.is_err());
    }
}
