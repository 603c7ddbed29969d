//! Model hyperparameters, loadable from a flat TOML file. Every field has a
//! default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// 3D query count N.
    pub n_queries: usize,
    /// Embedding width C.
    pub embed_dim: usize,
    /// Camera count V.
    pub cameras: usize,
    /// 2D decoder layers per hybrid block.
    pub l_2d: usize,
    /// 3D decoder layers per hybrid block.
    pub l_3d: usize,
    /// Hybrid block count.
    pub l_hybrid: usize,
    /// Optional redundant total; must equal (l_2d + l_3d) * l_hybrid.
    pub l_total: Option<usize>,
    pub num_classes: usize,
    /// Observation-angle loss weight inside the 2D loss.
    pub lambda_alpha: f64,
    pub w_cls2d: f64,
    pub w_l1_2d: f64,
    pub w_giou: f64,
    pub w_cls3d: f64,
    pub w_center: f64,
    pub w_size: f64,
    pub w_yaw: f64,
    pub w_vel: f64,
    /// Weight of the auxiliary aggregation-tap 3D losses relative to the
    /// main 3D-layer losses.
    pub aux_weight: f64,
    /// Peak learning rate.
    pub lr: f64,
    /// Cosine-decay horizon in optimizer steps; 0 keeps the rate constant.
    pub lr_schedule_steps: u64,
    /// Global gradient-norm cap applied before the optimizer; 0 disables.
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub top_k_history: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of embed_dim.
    pub ffn_mult: usize,
    /// Deformable sample points per query.
    pub deform_points: usize,
    /// Radius (meters) for initial anchor placement.
    pub bev_range: f64,
    /// Reuse one set of temporal cross-attention parameters for the 2D and
    /// 3D stages instead of separate sets.
    pub temporal_shared_params: bool,
    /// Skip connection around the merge self-attention.
    pub merge_skip_connection: bool,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_queries: 32,
            embed_dim: 64,
            cameras: 3,
            l_2d: 1,
            l_3d: 1,
            l_hybrid: 3,
            l_total: None,
            num_classes: 2,
            lambda_alpha: 0.5,
            w_cls2d: 2.0,
            w_l1_2d: 5.0,
            w_giou: 2.0,
            w_cls3d: 2.0,
            w_center: 1.0,
            w_size: 0.5,
            w_yaw: 0.5,
            w_vel: 0.2,
            aux_weight: 1.0,
            lr: 2e-3,
            lr_schedule_steps: 3000,
            grad_clip: 25.0,
            weight_decay: 0.01,
            top_k_history: 8,
            heads: 4,
            ffn_mult: 4,
            deform_points: 4,
            bev_range: 25.0,
            temporal_shared_params: false,
            merge_skip_connection: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Total decoder layer count, (L_2d + L_3d) * L_hybrid.
    pub fn l_total(&self) -> usize {
        (self.l_2d + self.l_3d) * self.l_hybrid
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 || self.embed_dim == 0 || self.cameras == 0 || self.num_classes == 0
        {
            return Err(Error::Config(
                "n_queries, embed_dim, cameras, num_classes must be positive".into(),
            ));
        }
        if self.l_hybrid == 0 || self.l_2d + self.l_3d == 0 {
            return Err(Error::Config(
                "need l_hybrid >= 1 and at least one of l_2d, l_3d per block".into(),
            ));
        }
        if let Some(t) = self.l_total {
            if t != self.l_total() {
                return Err(Error::Config(format!(
                    "l_total {} != (l_2d {} + l_3d {}) * l_hybrid {}",
                    t, self.l_2d, self.l_3d, self.l_hybrid
                )));
            }
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.deform_points == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("deform_points and ffn_mult must be >= 1".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        if self.lambda_alpha < 0.0 {
            return Err(Error::Config("lambda_alpha must be >= 0".into()));
        }
        if !(self.bev_range > 0.0) {
            return Err(Error::Config("bev_range must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }
}
