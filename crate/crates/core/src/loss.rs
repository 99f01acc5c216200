//! Image losses and point-set metrics.

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{ImagePlanes, PointCloud};
use crate::grid::SpatialGrid;

pub const SMAPE_EPSILON: f64 = 1e-5;

/// Symmetric mean absolute percentage error between two images, plus its
/// per-pixel gradient with respect to the first argument. The sum runs over
/// channels while the normalization is by pixel count only, so a 3-channel
/// loss can exceed 1.
pub fn smape(rendered: &ImagePlanes, reference: &ImagePlanes) -> Result<(f64, ImagePlanes)> {
    if !rendered.same_shape(reference) {
        return Err(Error::ShapeMismatch(format!(
            "rendered {}x{}x{} vs reference {}x{}x{}",
            rendered.channels(),
            rendered.height(),
            rendered.width(),
            reference.channels(),
            reference.height(),
            reference.width()
        )));
    }
    let hw = (rendered.width() * rendered.height()) as f64;
    let mut grad = ImagePlanes::new(rendered.width(), rendered.height(), rendered.channels());
    let mut loss = 0.0;
    let rd = rendered.data();
    let fd = reference.data();
    let gd = grad.data_mut();
    for i in 0..rd.len() {
        let a = rd[i];
        let b = fd[i];
        let denom = a.abs() + b.abs() + SMAPE_EPSILON;
        let diff = a - b;
        loss += diff.abs() / denom;
        // d/da of |a-b| / (|a| + |b| + eps); sub-gradient 0 where a == b.
        let sign_diff = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        let sign_a = if a > 0.0 {
            1.0
        } else if a < 0.0 {
            -1.0
        } else {
            0.0
        };
        gd[i] = (sign_diff * denom - diff.abs() * sign_a) / (denom * denom) / hw;
    }
    Ok((loss / hw, grad))
}

/// Composition of the total objective for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub per_view_image_losses: Vec<f64>,
    pub image_loss: f64,
    pub projection_term: f64,
    pub repulsion_term: f64,
    pub total: f64,
}

/// Total objective: sum of per-view image losses plus weighted regularizers.
pub fn total_loss(
    per_view_image_losses: Vec<f64>,
    projection_term: f64,
    repulsion_term: f64,
    gamma_p: f64,
    gamma_r: f64,
) -> LossReport {
    assert!(gamma_p >= 0.0 && gamma_r >= 0.0);
    let image_loss: f64 = per_view_image_losses.iter().sum();
    let total = image_loss + gamma_p * projection_term + gamma_r * repulsion_term;
    LossReport {
        per_view_image_losses,
        image_loss,
        projection_term,
        repulsion_term,
        total,
    }
}

fn nearest_squared_dists(from: &PointCloud, to: &PointCloud) -> Vec<f64> {
    // Cell size from the target cloud extent; nearest queries expand shells
    // as needed.
    let (lo, hi) = crate::geometry::bounding_box(to).expect("non-empty");
    let diag = (hi - lo).norm();
    let cell = if diag > 0.0 {
        (diag / (to.len() as f64).cbrt()).max(diag * 1e-9)
    } else {
        1.0
    };
    let grid = SpatialGrid::build(&to.positions, cell);
    exec::map_slice(&from.positions, |p| {
        let j = grid.nearest(p, u32::MAX).expect("non-empty target");
        (to.positions[j as usize] - p).norm_squared()
    })
}

/// Chamfer distance: symmetrized mean squared nearest-neighbor distance,
/// 0.5 (mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2).
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ab = nearest_squared_dists(a, b);
    let ba = nearest_squared_dists(b, a);
    let mean_ab: f64 = ab.iter().sum::<f64>() / ab.len() as f64;
    let mean_ba: f64 = ba.iter().sum::<f64>() / ba.len() as f64;
    Ok(0.5 * (mean_ab + mean_ba))
}

/// Hausdorff distance: worst nearest-neighbor distance over both directions.
pub fn hausdorff_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ab = nearest_squared_dists(a, b);
    let ba = nearest_squared_dists(b, a);
    let max_sq = ab
        .iter()
        .chain(ba.iter())
        .fold(0.0f64, |acc, &d| acc.max(d));
    Ok(max_sq.sqrt())
}
