//! Shared helpers for integration tests: independent oracles and scene
//! construction.

use nalgebra::{Matrix2, Vector2, Vector3};
use splat_core::forward::tangent_basis;
use splat_core::{Camera, PointCloud};

/// Finite-difference oracle for the tangent-to-screen map: perturb along the
/// tangent basis of `n` and project through the camera. Independent of the
/// closed-form Jacobian in the renderer.
pub fn fd_jacobian(camera: &Camera, p: &Vector3<f64>, n: &Vector3<f64>, h: f64) -> Matrix2<f64> {
    let (t1, t2) = tangent_basis(n);
    let project = |q: &Vector3<f64>| -> Vector2<f64> {
        let (px, _) = camera.project(q).expect("point in front of camera");
        px
    };
    let col = |t: &Vector3<f64>| -> Vector2<f64> {
        let plus = project(&(p + t * h));
        let minus = project(&(p - t * h));
        (plus - minus) / (2.0 * h)
    };
    let c1 = col(&t1);
    let c2 = col(&t2);
    Matrix2::new(c1.x, c2.x, c1.y, c2.y)
}

/// Splat weight computed entirely from the finite-difference Jacobian:
/// rho(x) = |det J| / (2 pi sqrt det(sigma^2 J J^T + I)) *
///          exp(-0.5 d^T (sigma^2 J J^T + I)^-1 d).
pub fn fd_rho_bar(
    camera: &Camera,
    p: &Vector3<f64>,
    n: &Vector3<f64>,
    sigma: f64,
    pixel: &Vector2<f64>,
) -> f64 {
    let j = fd_jacobian(camera, p, n, 1e-6);
    let cov = j * j.transpose() * sigma * sigma + Matrix2::identity();
    let det_cov = cov.determinant();
    let inv = cov.try_inverse().unwrap();
    let (center, _) = camera.project(p).unwrap();
    let d = pixel - center;
    let q = 0.5 * (d.transpose() * inv * d)[0];
    j.determinant().abs() / (2.0 * std::f64::consts::PI * det_cov.sqrt()) * (-q).exp()
}

pub fn unit_cloud(positions: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>, sigma: f64) -> PointCloud {
    let mut cloud = PointCloud::new(positions, normals).unwrap();
    cloud.set_uniform_sigma(sigma);
    cloud
}

pub fn axis_camera(size: u32, focal: f64, distance: f64) -> Camera {
    Camera::look_at(
        Vector3::new(0.0, 0.0, distance),
        Vector3::zeros(),
        focal,
        size,
        size,
    )
    .unwrap()
}
