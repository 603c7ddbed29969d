//! Decoupled-weight-decay Adam and the per-scene training step.

use crate::error::{Error, Result};
use crate::scene::{rasterize_features, RasterConfig, Scene};
use crate::tensor::Graph;

use super::config::ModelConfig;
use super::decoder::{decode_forward, TemporalMemory};
use super::losses::{compute_losses, LossBreakdown};
use super::params::{Binder, ParamStore};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self::new(cfg.lr, cfg.weight_decay)
    }

    /// Apply one update from accumulated gradients. Lazy: only entries that
    /// received a gradient this step are touched, and only trainable ones.
    /// Weight decay is decoupled from the moment estimates.
    pub fn step(&self, store: &mut ParamStore, grads: &[(usize, Vec<f64>)]) -> Result<()> {
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (idx, grad) in grads {
            let e = store
                .entries
                .get_mut(*idx)
                .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter {idx}")))?;
            if !e.trainable {
                continue;
            }
            if grad.len() != e.data.len() {
                return Err(Error::Usage(format!(
                    "gradient size {} for parameter {} of size {}",
                    grad.len(),
                    e.name,
                    e.data.len()
                )));
            }
            for i in 0..grad.len() {
                e.m[i] = BETA1 * e.m[i] + (1.0 - BETA1) * grad[i];
                e.v[i] = BETA2 * e.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                let mh = e.m[i] / bc1;
                let vh = e.v[i] / bc2;
                e.data[i] -= self.lr * (mh / (vh.sqrt() + ADAM_EPS) + self.weight_decay * e.data[i]);
            }
        }
        Ok(())
    }
}

/// Cosine-decayed learning rate at a given global step. Returns `base` for a
/// zero horizon; past the horizon the rate stays at its final value of zero.
pub fn cosine_lr(base: f64, step: u64, horizon: u64) -> f64 {
    if horizon == 0 {
        return base;
    }
    let k = step.min(horizon);
    base * 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / horizon as f64).cos())
}

/// Scale gradients down so their global l2 norm is at most `max_norm`
/// (0 disables). Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [(usize, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub memory: TemporalMemory,
}

/// One optimization step on one scene: rasterize, forward, loss, backward,
/// update. Returns the loss breakdown and the temporal memory for the next
/// frame. A non-finite loss aborts before any parameter is touched.
pub fn train_step(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    scene: &Scene,
    raster_cfg: &RasterConfig,
    opt: &AdamW,
    memory: Option<&TemporalMemory>,
) -> Result<StepReport> {
    let rasters: Vec<(Vec<f64>, [usize; 3])> = (0..scene.rig.len())
        .map(|v| rasterize_features(scene, v, cfg.num_classes, raster_cfg))
        .collect::<Result<_>>()?;
    let mut g = Graph::<f64>::new();
    let b = Binder::bind(store, &mut g)?;
    let fwd = decode_forward(
        &mut g,
        &b,
        cfg,
        &rasters,
        &scene.rig,
        raster_cfg.patch as f64,
        memory,
    )?;
    let (loss, breakdown) = compute_losses(&mut g, &fwd, scene, cfg)?;
    let loss_val = g.scalar(loss);
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss_val} on scene {}; parameters left untouched",
            scene.scene_id
        )));
    }
    g.backward(loss)?;
    let mut grads: Vec<(usize, Vec<f64>)> = g
        .param_grads()
        .map(|(i, gr)| (i, gr.to_vec()))
        .collect();
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    let memory = super::decoder::propagate_temporal(&g, &fwd, cfg.top_k_history, scene.ego_delta);
    opt.step(store, &grads)?;
    Ok(StepReport {
        loss: breakdown,
        grad_norm,
        memory,
    })
}
