//! Synthetic point-sampled shapes for tests, benchmarks and demos.

use crate::geometry::PointCloud;
use nalgebra::Vector3;

/// Near-uniform sphere sampling via the spherical Fibonacci lattice,
/// normals pointing outward.
pub fn sphere(center: Vector3<f64>, radius: f64, count: usize) -> PointCloud {
    let dirs = crate::views::fibonacci_directions(count);
    let positions = dirs.iter().map(|d| center + d * radius).collect();
    PointCloud::new(positions, dirs).expect("unit normals by construction")
}

/// Uniform-ish sampling of the six faces of an axis-aligned cube, normals
/// facing outward. Produces at least `count` points in a deterministic grid.
pub fn cube(center: Vector3<f64>, half_extent: f64, count: usize) -> PointCloud {
    let per_face = count.div_ceil(6);
    let m = (per_face as f64).sqrt().ceil() as usize;
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    for face in 0..6 {
        let axis = face / 2;
        let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
        let mut normal = Vector3::zeros();
        normal[axis] = sign;
        let (u_axis, v_axis) = ((axis + 1) % 3, (axis + 2) % 3);
        for iu in 0..m {
            for iv in 0..m {
                // Cell centers, strictly inside the face.
                let u = ((iu as f64 + 0.5) / m as f64 * 2.0 - 1.0) * half_extent;
                let v = ((iv as f64 + 0.5) / m as f64 * 2.0 - 1.0) * half_extent;
                let mut p = Vector3::zeros();
                p[axis] = sign * half_extent;
                p[u_axis] = u;
                p[v_axis] = v;
                positions.push(center + p);
                normals.push(normal);
            }
        }
    }
    PointCloud::new(positions, normals).expect("unit normals by construction")
}

/// Regular grid in the z = 0 plane centered at the origin, normals +z.
pub fn plane_grid(nx: usize, ny: usize, spacing: f64) -> PointCloud {
    let mut positions = Vec::with_capacity(nx * ny);
    let x0 = -(nx as f64 - 1.0) / 2.0 * spacing;
    let y0 = -(ny as f64 - 1.0) / 2.0 * spacing;
    for j in 0..ny {
        for i in 0..nx {
            positions.push(Vector3::new(
                x0 + i as f64 * spacing,
                y0 + j as f64 * spacing,
                0.0,
            ));
        }
    }
    let n = positions.len();
    PointCloud::new(positions, vec![Vector3::new(0.0, 0.0, 1.0); n])
        .expect("unit normals by construction")
}

/// Area-uniform filled disk in the z = 0 plane (Fibonacci spiral), normals
/// +z.
pub fn disk(center: Vector3<f64>, radius: f64, count: usize) -> PointCloud {
    let golden_angle = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut positions = Vec::with_capacity(count);
    for i in 0..count {
        let r = radius * ((i as f64 + 0.5) / count as f64).sqrt();
        let theta = golden_angle * i as f64;
        positions.push(center + Vector3::new(r * theta.cos(), r * theta.sin(), 0.0));
    }
    PointCloud::new(positions, vec![Vector3::new(0.0, 0.0, 1.0); count])
        .expect("unit normals by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_on_surface_with_outward_normals() {
        let c = Vector3::new(1.0, -2.0, 0.5);
        let cloud = sphere(c, 2.0, 500);
        assert_eq!(cloud.len(), 500);
        for (p, n) in cloud.positions.iter().zip(&cloud.normals) {
            assert!(((p - c).norm() - 2.0).abs() < 1e-12);
            assert!((p - c).normalize().dot(n) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn cube_faces_cover_all_orientations() {
        let cloud = cube(Vector3::zeros(), 1.0, 600);
        assert!(cloud.len() >= 600);
        for (p, n) in cloud.positions.iter().zip(&cloud.normals) {
            let axis = n.iamax();
            assert!((p[axis].abs() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn disk_stays_inside_radius() {
        let cloud = disk(Vector3::zeros(), 3.0, 200);
        for p in &cloud.positions {
            assert!(p.xy().norm() <= 3.0 + 1e-12);
            assert_eq!(p.z, 0.0);
        }
    }
}
