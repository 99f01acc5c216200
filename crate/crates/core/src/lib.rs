//! Differentiable surface splatting for point-based geometry processing.
//!
//! The crate renders point clouds with screen-space EWA splatting (each point
//! becomes an oriented elliptical Gaussian in image space), propagates
//! image-space loss gradients back to point positions and normals with
//! hand-derived partials plus a linear visibility approximation for the
//! discontinuous occlusion/cutoff term, and runs regularized multi-view
//! optimization on top of that: deform a cloud towards reference images,
//! edit local geometry through filtered references, or denoise.
//!
//! Module map:
//! - [`geometry`]: point clouds, cameras, images.
//! - [`forward`]: splat geometry, shading, the rasterizer and fragment cache.
//! - [`backward`]: gradient buffers, smooth partials, visibility gradients.
//! - [`regularize`]: neighbor graph, visibility-weighted PCA, repulsion and
//!   projection losses.
//! - [`loss`]: SMAPE image loss, total objective, Chamfer/Hausdorff metrics.
//! - [`optim`]: Nesterov descent with the alternating normal/position schedule.
//! - [`views`]: camera placement on a hulling sphere and error-aware focusing.
//! - [`pipeline`]: end-to-end experiment drivers used by the CLI.
//!
//! The data-parallel inner loops run on rayon when the default `parallel`
//! feature is enabled and fall back to plain sequential iteration without it;
//! both paths produce bit-identical results (ordered reductions only).

pub mod backward;
pub mod config;
pub mod error;
pub mod exec;
pub mod forward;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod regularize;
pub mod synth;
pub mod views;

pub use config::OptimizationConfig;
pub use error::{Error, Result};
pub use forward::{rasterize, Fragment, FragmentCache, ShadingMode, SplatGeometry};
pub use geometry::{Camera, ImagePlanes, PointCloud, RenderedImage};
