//! Uniform hash grid over 3D points.
//!
//! Radius queries dominate the regularizers, the splat-size heuristic and the
//! point-set metrics, and clouds get rebuilt every position step, so the index
//! is a flat hash grid rather than a tree: O(N) build, O(candidates) query.
//! All queries return neighbors sorted by (distance, index) so results do not
//! depend on map iteration order.

use nalgebra::Vector3;
use std::collections::HashMap;

pub struct SpatialGrid {
    cell_size: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    points: Vec<Vector3<f64>>,
}

impl SpatialGrid {
    /// Build a grid with the given cell size. `cell_size` must be positive.
    pub fn build(points: &[Vector3<f64>], cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "grid cell size must be positive");
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell_size)).or_default().push(i as u32);
        }
        SpatialGrid {
            cell_size,
            cells,
            points: points.to_vec(),
        }
    }

    /// Grid sized for radius queries of `radius`: one cell per radius.
    pub fn for_radius(points: &[Vector3<f64>], radius: f64) -> Self {
        Self::build(points, radius.max(1e-12))
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices of points within `radius` of `query`, excluding `exclude`
    /// (pass `u32::MAX` to keep everything), sorted by (distance, index).
    pub fn within_radius(&self, query: &Vector3<f64>, radius: f64, exclude: u32) -> Vec<u32> {
        let r2 = radius * radius;
        let reach = (radius / self.cell_size).ceil() as i64;
        let center = Self::key(query, self.cell_size);
        let mut found: Vec<(f64, u32)> = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let key = (center.0 + dx, center.1 + dy, center.2 + dz);
                    let Some(ids) = self.cells.get(&key) else { continue };
                    for &i in ids {
                        if i == exclude {
                            continue;
                        }
                        let d2 = (self.points[i as usize] - query).norm_squared();
                        if d2 <= r2 {
                            found.push((d2, i));
                        }
                    }
                }
            }
        }
        found.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        found.into_iter().map(|(_, i)| i).collect()
    }

    /// The `k` nearest points to `query` (excluding `exclude`), sorted by
    /// (distance, index). Expands the search shell until enough candidates
    /// are provably inside the scanned region.
    pub fn k_nearest(&self, query: &Vector3<f64>, k: usize, exclude: u32) -> Vec<u32> {
        if k == 0 {
            return Vec::new();
        }
        let center = Self::key(query, self.cell_size);
        let max_reach = self.max_reach() as i64;
        let mut best: Vec<(f64, u32)> = Vec::new();
        let mut reach: i64 = 0;
        loop {
            // Scan the shell at Chebyshev distance `reach`.
            for dx in -reach..=reach {
                for dy in -reach..=reach {
                    for dz in -reach..=reach {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != reach {
                            continue;
                        }
                        let key = (center.0 + dx, center.1 + dy, center.2 + dz);
                        let Some(ids) = self.cells.get(&key) else { continue };
                        for &i in ids {
                            if i == exclude {
                                continue;
                            }
                            let d2 = (self.points[i as usize] - query).norm_squared();
                            best.push((d2, i));
                        }
                    }
                }
            }
            best.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            // After scanning shells 0..=reach every point strictly closer
            // than reach * cell_size has been seen.
            let safe = reach as f64 * self.cell_size;
            if best.len() >= k && best[k - 1].0.sqrt() < safe {
                break;
            }
            reach += 1;
            if reach > max_reach {
                break;
            }
        }
        best.truncate(k);
        best.into_iter().map(|(_, i)| i).collect()
    }

    /// Nearest single point (never `exclude`); `None` on an effectively empty
    /// grid.
    pub fn nearest(&self, query: &Vector3<f64>, exclude: u32) -> Option<u32> {
        self.k_nearest(query, 1, exclude).first().copied()
    }

    fn max_reach(&self) -> usize {
        // Worst case: all points in one far cell. Bound by the key spread.
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for k in self.cells.keys() {
            lo = (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2));
            hi = (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2));
        }
        if self.cells.is_empty() {
            return 0;
        }
        let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(hi.2 - lo.2);
        span.unsigned_abs() as usize + 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..5 {
                    pts.push(Vector3::new(i as f64, j as f64, k as f64));
                }
            }
        }
        pts
    }

    #[test]
    fn radius_query_matches_brute_force() {
        let pts = cloud();
        let grid = SpatialGrid::for_radius(&pts, 1.5);
        let q = Vector3::new(2.2, 2.2, 2.2);
        let got = grid.within_radius(&q, 1.5, u32::MAX);
        let mut want: Vec<(f64, u32)> = pts
            .iter()
            .enumerate()
            .filter(|(_, p)| (*p - q).norm() <= 1.5)
            .map(|(i, p)| ((p - q).norm_squared(), i as u32))
            .collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want.into_iter().map(|(_, i)| i).collect::<Vec<_>>());
    }

    #[test]
    fn k_nearest_matches_brute_force() {
        let pts = cloud();
        let grid = SpatialGrid::build(&pts, 0.8);
        let q = Vector3::new(0.1, 4.3, 2.0);
        for k in [1usize, 3, 7, 20] {
            let got = grid.k_nearest(&q, k, u32::MAX);
            let mut all: Vec<(f64, u32)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| ((p - q).norm_squared(), i as u32))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<u32> = all.into_iter().take(k).map(|(_, i)| i).collect();
            assert_eq!(got, want, "k = {k}");
        }
    }

    #[test]
    fn exclude_is_respected() {
        let pts = vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)];
        let grid = SpatialGrid::build(&pts, 1.0);
        assert_eq!(grid.nearest(&Vector3::zeros(), 0), Some(1));
        assert_eq!(grid.k_nearest(&Vector3::zeros(), 2, 0), vec![1]);
    }
}
