//! Surface regularization: neighbor graph, visibility-weighted PCA frames,
//! repulsion and projection losses.
//!
//! The graph weighting combines a spatial Gaussian psi, a normal-similarity
//! Gaussian theta and a visibility factor phi = 1/(o+1) that demotes points
//! occluded in many views (likely outliers inside the model). The weighted
//! PCA of neighbor offsets gives each point a tangent frame; repulsion
//! maximizes in-plane neighbor spacing, projection pulls points onto the
//! local plane. Frames and weights are treated as constants within a step:
//! the losses act as per-step corrective forces, not as terms differentiated
//! through the SVD.

use crate::config::OptimizationConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{bounding_box_diagonal, PointCloud};
use crate::grid::SpatialGrid;
use nalgebra::{Matrix3, Vector3};

pub const REPULSION_STABILIZER: f64 = 1e-4;

/// Radius-capped nearest-neighbor graph with per-pair weights, CSR layout.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    pub radius: f64,
    offsets: Vec<u32>,
    neighbors: Vec<u32>,
    psi: Vec<f64>,
    theta: Vec<f64>,
    phi: Vec<f64>,
    w: Vec<f64>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    pub fn psi(&self, i: usize) -> &[f64] {
        &self.psi[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        &self.theta[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    pub fn phi(&self, i: usize) -> &[f64] {
        &self.phi[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    /// Normalized weights: w = psi theta phi / sum over the neighborhood.
    pub fn w(&self, i: usize) -> &[f64] {
        &self.w[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }
}

/// Default neighborhood radius 4 sqrt(diag / N), scaled by the config
/// coefficient.
pub fn default_radius(cloud: &PointCloud, cfg: &OptimizationConfig) -> Result<f64> {
    let diag = bounding_box_diagonal(cloud)?;
    let n = cloud.len() as f64;
    let d = cfg.neigh_d_rel * (diag / n).sqrt();
    if d > 0.0 {
        Ok(d)
    } else {
        // Degenerate cloud (all points coincide): any positive radius works.
        Ok(1e-6)
    }
}

pub fn build_neighbor_graph(cloud: &PointCloud, cfg: &OptimizationConfig) -> Result<NeighborGraph> {
    let radius = default_radius(cloud, cfg)?;
    build_neighbor_graph_with_radius(cloud, cfg, radius)
}

pub fn build_neighbor_graph_with_radius(
    cloud: &PointCloud,
    cfg: &OptimizationConfig,
    radius: f64,
) -> Result<NeighborGraph> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::InvalidCloud(format!(
            "neighbor graph needs at least 2 points, got {n}"
        )));
    }
    let grid = SpatialGrid::for_radius(&cloud.positions, radius);
    let theta_denom = (1.0 - cfg.neigh_theta.cos()).max(1e-5);
    let d2 = radius * radius;

    struct Row {
        ids: Vec<u32>,
        psi: Vec<f64>,
        theta: Vec<f64>,
        phi: Vec<f64>,
        w: Vec<f64>,
    }

    let rows = exec::map_indexed(n, |i| {
        let mut ids = grid.within_radius(&cloud.positions[i], radius, i as u32);
        ids.truncate(cfg.k_neigh);
        let mut psi = Vec::with_capacity(ids.len());
        let mut theta = Vec::with_capacity(ids.len());
        let mut phi = Vec::with_capacity(ids.len());
        let mut w = Vec::with_capacity(ids.len());
        let mut w_sum = 0.0;
        for &kk in &ids {
            let k = kk as usize;
            let dist2 = (cloud.positions[i] - cloud.positions[k]).norm_squared();
            let psi_ik = (-dist2 / d2).exp();
            let align = 1.0 - cloud.normals[k].dot(&cloud.normals[i]);
            let theta_ik = (-(align * align) / theta_denom).exp();
            let phi_ik = 1.0 / (cloud.occlusion_count[k] as f64 + 1.0);
            let prod = psi_ik * theta_ik * phi_ik;
            psi.push(psi_ik);
            theta.push(theta_ik);
            phi.push(phi_ik);
            w.push(prod);
            w_sum += prod;
        }
        if w_sum > 0.0 {
            for v in &mut w {
                *v /= w_sum;
            }
        }
        Row {
            ids,
            psi,
            theta,
            phi,
            w,
        }
    });

    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0u32);
    let mut neighbors = Vec::new();
    let mut psi = Vec::new();
    let mut theta = Vec::new();
    let mut phi = Vec::new();
    let mut w = Vec::new();
    for row in rows {
        neighbors.extend_from_slice(&row.ids);
        psi.extend_from_slice(&row.psi);
        theta.extend_from_slice(&row.theta);
        phi.extend_from_slice(&row.phi);
        w.extend_from_slice(&row.w);
        offsets.push(neighbors.len() as u32);
    }
    Ok(NeighborGraph {
        radius,
        offsets,
        neighbors,
        psi,
        theta,
        phi,
        w,
    })
}

/// Local tangent frame from the weighted PCA of a neighborhood.
#[derive(Debug, Clone)]
pub struct LocalFrame {
    /// First two principal directions, orthonormal.
    pub tangent_basis: [Vector3<f64>; 2],
    /// Third principal direction, sign-aligned with the point normal.
    pub frame_normal: Vector3<f64>,
    pub weighted_centroid: Vector3<f64>,
}

impl LocalFrame {
    /// Projector onto the tangent plane.
    pub fn tangent_projector(&self) -> Matrix3<f64> {
        let t1 = &self.tangent_basis[0];
        let t2 = &self.tangent_basis[1];
        t1 * t1.transpose() + t2 * t2.transpose()
    }

    /// Orthonormal completion of `normal`, used when PCA is degenerate.
    pub fn fallback(normal: &Vector3<f64>, centroid: Vector3<f64>) -> Self {
        let (t1, t2) = crate::forward::tangent_basis(normal);
        LocalFrame {
            tangent_basis: [t1, t2],
            frame_normal: *normal,
            weighted_centroid: centroid,
        }
    }
}

/// Weighted PCA of point `i`'s neighborhood: eigen-decompose the covariance
/// of the weighted offset vectors w_ik (p_k - centroid). Degenerate (rank
/// < 2) neighborhoods fall back to a frame built from the point normal.
pub fn weighted_pca(cloud: &PointCloud, graph: &NeighborGraph, i: usize) -> LocalFrame {
    let ids = graph.neighbors(i);
    let w = graph.w(i);
    let centroid: Vector3<f64> = ids
        .iter()
        .zip(w)
        .map(|(&k, &wk)| cloud.positions[k as usize] * wk)
        .sum();
    if ids.len() < 3 {
        return LocalFrame::fallback(&cloud.normals[i], centroid);
    }
    let mut cov = Matrix3::zeros();
    for (&k, &wk) in ids.iter().zip(w) {
        let u = (cloud.positions[k as usize] - centroid) * wk;
        cov += u * u.transpose();
    }
    let eig = cov.symmetric_eigen();
    // Sort eigenpairs descending.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let l0 = eig.eigenvalues[order[0]];
    let l1 = eig.eigenvalues[order[1]];
    if !(l0 > 0.0) || l1 <= 1e-9 * l0 {
        return LocalFrame::fallback(&cloud.normals[i], centroid);
    }
    let t1 = eig.eigenvectors.column(order[0]).normalize();
    let mut vn = eig.eigenvectors.column(order[2]).normalize();
    if vn.dot(&cloud.normals[i]) < 0.0 {
        vn = -vn;
    }
    // Right-handed orthonormal triple (t1, t2, vn).
    let t2 = vn.cross(&t1);
    LocalFrame {
        tangent_basis: [t1, t2],
        frame_normal: vn,
        weighted_centroid: centroid,
    }
}

/// Frames for all points, in index order.
pub fn compute_frames(cloud: &PointCloud, graph: &NeighborGraph) -> Vec<LocalFrame> {
    exec::map_indexed(cloud.len(), |i| weighted_pca(cloud, graph, i))
}

fn scatter_pairs(
    n: usize,
    per_point: Vec<(f64, Vec<(u32, Vector3<f64>)>)>,
) -> (f64, Vec<Vector3<f64>>) {
    let mut loss = 0.0;
    let mut grad = vec![Vector3::zeros(); n];
    for (l, pairs) in per_point {
        loss += l;
        for (idx, g) in pairs {
            grad[idx as usize] += g;
        }
    }
    (loss, grad)
}

/// Repulsion loss: mean over points of sum over neighbors of
/// psi / (|in-plane offset|^2 + 1e-4), with analytic position gradients.
/// Frames and weights are frozen for the step.
pub fn repulsion_loss(cloud: &PointCloud, graph: &NeighborGraph) -> (f64, Vec<Vector3<f64>>) {
    let frames = compute_frames(cloud, graph);
    repulsion_loss_with_frames(cloud, graph, &frames)
}

pub fn repulsion_loss_with_frames(
    cloud: &PointCloud,
    graph: &NeighborGraph,
    frames: &[LocalFrame],
) -> (f64, Vec<Vector3<f64>>) {
    let n = cloud.len();
    let inv_n = 1.0 / n as f64;
    let per_point = exec::map_indexed(n, |i| {
        let ids = graph.neighbors(i);
        if ids.is_empty() {
            return (0.0, Vec::new());
        }
        let proj = frames[i].tangent_projector();
        let psi = graph.psi(i);
        let mut loss = 0.0;
        let mut pairs = Vec::with_capacity(ids.len() + 1);
        let mut grad_i = Vector3::zeros();
        for (&kk, &psi_ik) in ids.iter().zip(psi) {
            let k = kk as usize;
            let d = proj * (cloud.positions[i] - cloud.positions[k]);
            let denom = d.norm_squared() + REPULSION_STABILIZER;
            loss += inv_n * psi_ik / denom;
            // d/dp_i of 1/(|P (p_i - p_k)|^2 + c) = -2 P d / (...)^2.
            let g = d * (2.0 * inv_n * psi_ik / (denom * denom));
            grad_i -= g;
            pairs.push((kk, g));
        }
        pairs.push((i as u32, grad_i));
        (loss, pairs)
    });
    scatter_pairs(n, per_point)
}

/// Projection loss: mean over points of sum over neighbors of
/// w_ik (point-to-plane distance)^2, with analytic position gradients.
pub fn projection_loss(cloud: &PointCloud, graph: &NeighborGraph) -> (f64, Vec<Vector3<f64>>) {
    let frames = compute_frames(cloud, graph);
    projection_loss_with_frames(cloud, graph, &frames)
}

pub fn projection_loss_with_frames(
    cloud: &PointCloud,
    graph: &NeighborGraph,
    frames: &[LocalFrame],
) -> (f64, Vec<Vector3<f64>>) {
    let n = cloud.len();
    let inv_n = 1.0 / n as f64;
    let per_point = exec::map_indexed(n, |i| {
        let ids = graph.neighbors(i);
        if ids.is_empty() {
            return (0.0, Vec::new());
        }
        let vn = frames[i].frame_normal;
        let w = graph.w(i);
        let mut loss = 0.0;
        let mut pairs = Vec::with_capacity(ids.len() + 1);
        let mut grad_i = Vector3::zeros();
        for (&kk, &w_ik) in ids.iter().zip(w) {
            let k = kk as usize;
            let off = vn.dot(&(cloud.positions[i] - cloud.positions[k]));
            loss += inv_n * w_ik * off * off;
            let g = vn * (2.0 * inv_n * w_ik * off);
            grad_i += g;
            pairs.push((kk, -g));
        }
        pairs.push((i as u32, grad_i));
        (loss, pairs)
    });
    scatter_pairs(n, per_point)
}
