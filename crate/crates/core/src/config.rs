//! Optimization hyper-parameters and their flat `key = value` file format.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// All tunables of the renderer, backward pass, regularizers and optimizer.
///
/// Defaults reproduce the reference settings: cutoff 4, merge threshold 1% of
/// the bounding box diagonal, cache depth 5, learning rates 5/5000, 16 cycles
/// of 12 views, loss weights 0.02/0.05, neighborhood bandwidth 4*sqrt(diag/N)
/// with an angular bandwidth of pi/3, and a visibility stabilizer of 1e-5.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationConfig {
    /// Ellipse support threshold C on the quadratic form 0.5 d^T conic d.
    pub cutoff_c: f64,
    /// Occlusion merge threshold as a fraction of the bounding box diagonal.
    pub merge_t_rel: f64,
    /// Fragment cache depth K.
    pub cache_k: usize,
    pub lr_position: f64,
    pub lr_normal: f64,
    /// Nesterov momentum coefficient.
    pub momentum: f64,
    /// Steps per cycle spent on normals.
    pub t_n: usize,
    /// Steps per cycle spent on positions.
    pub t_p: usize,
    pub cycles: usize,
    /// Camera views rendered simultaneously per optimization step.
    pub views_per_step: usize,
    /// Weight of the projection regularizer.
    pub gamma_p: f64,
    /// Weight of the repulsion regularizer.
    pub gamma_r: f64,
    /// Neighborhood radius coefficient: D = neigh_d_rel * sqrt(diag / N).
    pub neigh_d_rel: f64,
    /// Angular bandwidth Theta (radians) of the normal-similarity weight.
    pub neigh_theta: f64,
    /// Cap on neighbors per point within the radius.
    pub k_neigh: usize,
    /// Projection-term radius for large deformations:
    /// D_p = deform_proj_d_rel * sqrt(diag). Zero selects the default rule.
    pub deform_proj_d_rel: f64,
    /// Visibility-gradient stabilizer epsilon.
    pub epsilon_grad: f64,
    /// Pixel dilation radius around each splat bbox scanned for visibility
    /// gradients.
    pub vis_dilation_px: usize,
    /// Global splat sigma override; zero keeps the per-point heuristic.
    pub sigma_global: f64,
    /// Relative per-cycle improvement below which optimization stops early.
    pub early_stop_rel: f64,
    /// Per-point gradient norms are clipped at this multiple of the median
    /// non-zero norm each step. Zero disables clipping.
    pub clip_factor: f64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        OptimizationConfig {
            cutoff_c: 4.0,
            merge_t_rel: 0.01,
            cache_k: 5,
            lr_position: 5.0,
            lr_normal: 5000.0,
            momentum: 0.9,
            t_n: 15,
            t_p: 25,
            cycles: 16,
            views_per_step: 12,
            gamma_p: 0.02,
            gamma_r: 0.05,
            neigh_d_rel: 4.0,
            neigh_theta: std::f64::consts::FRAC_PI_3,
            k_neigh: 20,
            deform_proj_d_rel: 0.1,
            epsilon_grad: 1e-5,
            vis_dilation_px: 16,
            sigma_global: 0.0,
            early_stop_rel: 1e-5,
            clip_factor: 10.0,
        }
    }
}

impl OptimizationConfig {
    /// Schedule for local surface editing: many normal steps, one position
    /// step per cycle.
    pub fn edit_schedule(mut self) -> Self {
        self.t_n = 19;
        self.t_p = 1;
        self
    }

    /// Schedule for large deformation: position-heavy cycles.
    pub fn deform_schedule(mut self) -> Self {
        self.t_p = 25;
        self.t_n = 15;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cutoff_c", self.cutoff_c),
            ("merge_t_rel", self.merge_t_rel),
            ("lr_position", self.lr_position),
            ("lr_normal", self.lr_normal),
            ("neigh_d_rel", self.neigh_d_rel),
            ("neigh_theta", self.neigh_theta),
            ("epsilon_grad", self.epsilon_grad),
            ("early_stop_rel", self.early_stop_rel),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("gamma_p", self.gamma_p),
            ("gamma_r", self.gamma_r),
            ("deform_proj_d_rel", self.deform_proj_d_rel),
            ("sigma_global", self.sigma_global),
            ("clip_factor", self.clip_factor),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.cache_k < 1 {
            return Err(Error::InvalidConfig("cache_k must be >= 1".into()));
        }
        if self.k_neigh < 1 {
            return Err(Error::InvalidConfig("k_neigh must be >= 1".into()));
        }
        if self.cycles < 1 {
            return Err(Error::InvalidConfig("cycles must be >= 1".into()));
        }
        if self.views_per_step < 1 {
            return Err(Error::InvalidConfig("views_per_step must be >= 1".into()));
        }
        if self.t_n + self.t_p == 0 {
            return Err(Error::InvalidConfig(
                "schedule needs t_n + t_p >= 1 steps per cycle".into(),
            ));
        }
        Ok(())
    }

    /// Parse the flat `key = value` format. Unknown keys are rejected;
    /// missing keys keep their defaults. `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = OptimizationConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(
                    origin,
                    format!("line {}: expected `key = value`, got `{raw}`", lineno + 1),
                ));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value)
                .map_err(|msg| Error::parse(origin, format!("line {}: {msg}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn f(value: &str, key: &str) -> std::result::Result<f64, String> {
            value
                .parse::<f64>()
                .map_err(|_| format!("invalid float for {key}: `{value}`"))
        }
        fn u(value: &str, key: &str) -> std::result::Result<usize, String> {
            value
                .parse::<usize>()
                .map_err(|_| format!("invalid integer for {key}: `{value}`"))
        }
        match key {
            "cutoff_c" => self.cutoff_c = f(value, key)?,
            "merge_t_rel" => self.merge_t_rel = f(value, key)?,
            "cache_k" => self.cache_k = u(value, key)?,
            "lr_position" => self.lr_position = f(value, key)?,
            "lr_normal" => self.lr_normal = f(value, key)?,
            "momentum" => self.momentum = f(value, key)?,
            "t_n" => self.t_n = u(value, key)?,
            "t_p" => self.t_p = u(value, key)?,
            "cycles" => self.cycles = u(value, key)?,
            "views_per_step" => self.views_per_step = u(value, key)?,
            "gamma_p" => self.gamma_p = f(value, key)?,
            "gamma_r" => self.gamma_r = f(value, key)?,
            "neigh_d_rel" => self.neigh_d_rel = f(value, key)?,
            "neigh_theta" => self.neigh_theta = f(value, key)?,
            "k_neigh" => self.k_neigh = u(value, key)?,
            "deform_proj_d_rel" => self.deform_proj_d_rel = f(value, key)?,
            "epsilon_grad" => self.epsilon_grad = f(value, key)?,
            "vis_dilation_px" => self.vis_dilation_px = u(value, key)?,
            "sigma_global" => self.sigma_global = f(value, key)?,
            "early_stop_rel" => self.early_stop_rel = f(value, key)?,
            "clip_factor" => self.clip_factor = f(value, key)?,
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    /// Serialize in the same `key = value` format, one key per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cutoff_c = {}", self.cutoff_c);
        let _ = writeln!(s, "merge_t_rel = {}", self.merge_t_rel);
        let _ = writeln!(s, "cache_k = {}", self.cache_k);
        let _ = writeln!(s, "lr_position = {}", self.lr_position);
        let _ = writeln!(s, "lr_normal = {}", self.lr_normal);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "t_n = {}", self.t_n);
        let _ = writeln!(s, "t_p = {}", self.t_p);
        let _ = writeln!(s, "cycles = {}", self.cycles);
        let _ = writeln!(s, "views_per_step = {}", self.views_per_step);
        let _ = writeln!(s, "gamma_p = {}", self.gamma_p);
        let _ = writeln!(s, "gamma_r = {}", self.gamma_r);
        let _ = writeln!(s, "neigh_d_rel = {}", self.neigh_d_rel);
        let _ = writeln!(s, "neigh_theta = {}", self.neigh_theta);
        let _ = writeln!(s, "k_neigh = {}", self.k_neigh);
        let _ = writeln!(s, "deform_proj_d_rel = {}", self.deform_proj_d_rel);
        let _ = writeln!(s, "epsilon_grad = {}", self.epsilon_grad);
        let _ = writeln!(s, "vis_dilation_px = {}", self.vis_dilation_px);
        let _ = writeln!(s, "sigma_global = {}", self.sigma_global);
        let _ = writeln!(s, "early_stop_rel = {}", self.early_stop_rel);
        let _ = writeln!(s, "clip_factor = {}", self.clip_factor);
        s
    }
}
