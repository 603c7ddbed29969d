//! The full detector: configuration, learned parameters, the hybrid
//! decoder, bipartite matching, losses, and the training step.

pub mod config;
pub mod decoder;
pub mod heads;
pub mod hungarian;
pub mod losses;
pub mod params;
pub mod train;

pub use config::ModelConfig;
pub use decoder::{decode_forward, propagate_temporal, Forward, TemporalMemory};
pub use heads::decode_anchors;
pub use hungarian::{assignment_cost, hungarian_match};
pub use losses::{compute_losses, LossBreakdown};
pub use params::{init_params, Binder, ParamStore};
pub use train::{clip_grad_norm, cosine_lr, train_step, AdamW, StepReport};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{Det2D, Det3D, SceneDetections};
use crate::scene::{rasterize_features, GenConfig, RasterConfig, Scene};
use crate::tensor::Graph;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    /// Fresh model with anchors spread uniformly over the bird's-eye-view
    /// disc, sizes cycling through the per-class base extents, yaw zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gen_defaults = GenConfig::default();
        let mut anchors = Vec::with_capacity(config.n_queries * 9);
        for i in 0..config.n_queries {
            let r = config.bev_range * rng.gen_range(0.0f64..1.0).sqrt();
            let t = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let size = gen_defaults.class_size(i % config.num_classes.max(1));
            anchors.extend_from_slice(&[
                r * t.cos(),
                r * t.sin(),
                size[2] / 2.0,
                size[0],
                size[1],
                size[2],
                0.0,
                0.0,
                0.0,
            ]);
        }
        let store = init_params(&config, &anchors);
        Ok(Model { config, store })
    }

    /// Run the decoder on one scene; the returned graph keeps all values.
    pub fn forward(
        &self,
        scene: &Scene,
        raster_cfg: &RasterConfig,
        memory: Option<&TemporalMemory>,
    ) -> Result<(Graph<f64>, Forward)> {
        let rasters: Vec<(Vec<f64>, [usize; 3])> = (0..scene.rig.len())
            .map(|v| rasterize_features(scene, v, self.config.num_classes, raster_cfg))
            .collect::<Result<_>>()?;
        let mut g = Graph::<f64>::new();
        let b = Binder::bind(&self.store, &mut g)?;
        let fwd = decode_forward(
            &mut g,
            &b,
            &self.config,
            &rasters,
            &scene.rig,
            raster_cfg.patch as f64,
            memory,
        )?;
        Ok((g, fwd))
    }

    /// Decode final-layer predictions into thresholded detections. 2D boxes
    /// are emitted for every camera view owned by a kept 3D detection,
    /// carrying the 3D link the association metric consumes.
    pub fn infer(
        &self,
        scene: &Scene,
        raster_cfg: &RasterConfig,
        memory: Option<&TemporalMemory>,
        score_threshold: f64,
    ) -> Result<(SceneDetections, TemporalMemory)> {
        let (g, fwd) = self.forward(scene, raster_cfg, memory)?;
        let layer3d = fwd
            .layers3d
            .iter()
            .rev()
            .find(|l| !l.aux)
            .or_else(|| fwd.layers3d.last())
            .expect("decoder always produces a 3D prediction");
        let k_cls = self.config.num_classes;
        let cls = g.values(layer3d.pred.cls);
        let anchors = decode_anchors(g.values(layer3d.pred.state));
        let mut det3d = Vec::new();
        for (i, a) in anchors.iter().enumerate() {
            let (best_c, best_s) = (0..k_cls)
                .map(|c| (c, decoder::sigmoid(cls[i * k_cls + c])))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            if best_s >= score_threshold {
                det3d.push(Det3D {
                    id: i,
                    anchor: a.as_array(),
                    class_id: best_c,
                    score: best_s,
                });
            }
        }
        let kept: std::collections::HashSet<usize> = det3d.iter().map(|d| d.id).collect();
        let mut det2d = Vec::new();
        if let Some(layer2d) = fwd.layers2d.last() {
            let cls2 = g.values(layer2d.pred.cls);
            let boxes = g.values(layer2d.pred.boxes);
            let alphas = g.values(layer2d.pred.alpha);
            for (j, col) in layer2d.mapping.columns.iter().enumerate() {
                if !kept.contains(&col.owner) {
                    continue;
                }
                let (best_c, best_s) = (0..k_cls)
                    .map(|c| (c, decoder::sigmoid(cls2[j * k_cls + c])))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap();
                det2d.push(Det2D {
                    id: det2d.len(),
                    camera: col.camera,
                    cx: boxes[j * 4],
                    cy: boxes[j * 4 + 1],
                    w: boxes[j * 4 + 2],
                    h: boxes[j * 4 + 3],
                    class_id: best_c,
                    score: best_s,
                    alpha: Some(f64::atan2(alphas[j * 2], alphas[j * 2 + 1])),
                    linked_3d_id: Some(col.owner),
                });
            }
        }
        let mem = propagate_temporal(&g, &fwd, self.config.top_k_history, scene.ego_delta);
        Ok((
            SceneDetections {
                scene_id: scene.scene_id,
                det3d,
                det2d,
            },
            mem,
        ))
    }
}
