//! The cyclic hybrid decoder: per block, temporal cross-attention, dynamic
//! allocation into per-camera 2D queries, 2D layers with grouped attention,
//! adaptive aggregation back to 3D queries with an auxiliary head tap, and
//! 3D layers with deformable cross-attention over all cameras.

use serde::{Deserialize, Serialize};

use crate::aggregation::{fuse, gate_truncation, merge};
use crate::allocation::{allocate, MappingMatrix};
use crate::attention::{
    group_cross_attention, group_self_attention, mha, temporal_cross_attention, DeformParams,
    GroupMask, MhaParams,
};
use crate::error::{Error, Result};
use crate::geometry::{project_anchor, wrap_angle, Anchor3D, CameraRig};
use crate::tensor::{Graph, TensorId};

use super::config::ModelConfig;
use super::heads::{branch, decode_anchors, head_2d, head_3d, Pred2D, Pred3D};
use super::params::Binder;

/// Top-K queries and refined anchors carried to the next frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalMemory {
    /// Row-major `[k, dim]`.
    pub queries: Vec<f64>,
    pub dim: usize,
    pub anchors: Vec<Anchor3D>,
}

impl TemporalMemory {
    pub fn k(&self) -> usize {
        self.anchors.len()
    }
}

#[derive(Debug)]
pub struct Layer2D {
    pub block: usize,
    pub mapping: MappingMatrix,
    pub reference_points: Vec<(f64, f64)>,
    pub truncation: Vec<bool>,
    /// Per 2D query (image width, image height).
    pub dims: Vec<(f64, f64)>,
    pub pred: Pred2D,
}

#[derive(Debug)]
pub struct Layer3D {
    pub block: usize,
    /// Aggregation-tap prediction rather than a main 3D layer.
    pub aux: bool,
    pub pred: Pred3D,
    /// Anchors the deltas were applied to.
    pub anchors_in: Vec<Anchor3D>,
}

#[derive(Debug)]
pub struct Forward {
    pub layers2d: Vec<Layer2D>,
    pub layers3d: Vec<Layer3D>,
    pub q3d_final: TensorId,
    pub anchors_final: Vec<Anchor3D>,
}

struct FfnParams {
    ln_g: TensorId,
    ln_b: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
}

fn ffn_params(b: &Binder, prefix: &str) -> FfnParams {
    FfnParams {
        ln_g: b.id(&format!("{prefix}.ln_g")),
        ln_b: b.id(&format!("{prefix}.ln_b")),
        w1: b.id(&format!("{prefix}.w1")),
        b1: b.id(&format!("{prefix}.b1")),
        w2: b.id(&format!("{prefix}.w2")),
        b2: b.id(&format!("{prefix}.b2")),
    }
}

fn ffn(g: &mut Graph<f64>, x: TensorId, p: &FfnParams) -> Result<TensorId> {
    let h = g.layer_norm(x, p.ln_g, p.ln_b)?;
    let h = g.linear(h, p.w1, p.b1)?;
    let h = g.relu(h);
    let h = g.linear(h, p.w2, p.b2)?;
    g.add(x, h)
}

/// Embed one camera's rasterized features `[hf, wf, cin]` into `[hf, wf, C]`.
fn embed_features(
    g: &mut Graph<f64>,
    b: &Binder,
    data: &[f64],
    shape: [usize; 3],
) -> Result<TensorId> {
    let [hf, wf, cin] = shape;
    let x = g.leaf(&[hf * wf, cin], data.to_vec())?;
    let w = b.id("embed.w");
    let bb = b.id("embed.b");
    let e = g.linear(x, w, bb)?;
    let c = g.shape(e)[1];
    g.reshape(e, &[hf, wf, c])
}

/// Deformable cross-attention of 3D queries over every camera whose image
/// contains the query's projected anchor center; contributions are averaged
/// across cameras. Queries visible nowhere pass through on the residual.
#[allow(clippy::too_many_arguments)]
fn deform_cross_3d(
    g: &mut Graph<f64>,
    q3d: TensorId,
    anchors: &[Anchor3D],
    featmaps: &[TensorId],
    rig: &CameraRig,
    stride: f64,
    p: &DeformParams,
    points: usize,
) -> Result<TensorId> {
    let n = g.shape(q3d)[0];
    let h = g.layer_norm(q3d, p.ln_gamma, p.ln_beta)?;
    let offsets = g.linear(h, p.w_off, p.b_off)?;
    let wlogits = g.linear(h, p.w_wgt, p.b_wgt)?;
    let weights = g.masked_softmax(wlogits, None)?;

    let mut parts = Vec::new();
    let mut owners_all = Vec::new();
    for (v, cam) in rig.iter().enumerate() {
        let mut rows = Vec::new();
        let mut refs = Vec::new();
        for (j, a) in anchors.iter().enumerate() {
            let proj = project_anchor(&a.clamped(), cam);
            if proj.center_inside {
                rows.push(j);
                for _ in 0..points {
                    refs.push(proj.points[0].u);
                    refs.push(proj.points[0].v);
                }
            }
        }
        if rows.is_empty() {
            continue;
        }
        let sz = rows.len();
        let off = g.gather_rows(offsets, &rows)?;
        let off = g.reshape(off, &[sz * points, 2])?;
        let refs = g.leaf(&[sz * points, 2], refs)?;
        let px = g.add(off, refs)?;
        let cells = g.mul_scalar(px, 1.0 / stride);
        let cells = g.add_scalar(cells, -0.5);
        let sampled = g.bilinear_sample(featmaps[v], cells)?;
        let val = g.linear(sampled, p.w_val, p.b_val)?;
        let w = g.gather_rows(weights, &rows)?;
        let w = g.reshape(w, &[sz * points, 1])?;
        let weighted = g.scale_rows(val, w)?;
        let sample_owner: Vec<usize> = (0..sz * points).map(|i| i / points).collect();
        parts.push(g.group_sum_rows(weighted, &sample_owner, sz)?);
        owners_all.extend(rows);
    }
    if parts.is_empty() {
        return Ok(q3d);
    }
    let cat = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)?
    };
    let fused = g.group_mean_rows(cat, &owners_all, n)?;
    let out = g.linear(fused, p.w_out, p.b_out)?;
    g.add(q3d, out)
}

/// Unmasked pre-norm self-attention with residual.
fn self_attention(
    g: &mut Graph<f64>,
    x: TensorId,
    p: &MhaParams,
    heads: usize,
) -> Result<TensorId> {
    let h = g.layer_norm(x, p.ln_gamma, p.ln_beta)?;
    let a = mha(g, h, h, p, heads, None)?;
    g.add(x, a)
}

/// Run the full hybrid decoder over one frame's rasterized features.
/// `rasters[v]` is camera v's raster (`data`, `[hf, wf, cin]`); `stride` is
/// pixels per feature cell.
pub fn decode_forward(
    g: &mut Graph<f64>,
    b: &Binder,
    cfg: &ModelConfig,
    rasters: &[(Vec<f64>, [usize; 3])],
    rig: &CameraRig,
    stride: f64,
    memory: Option<&TemporalMemory>,
) -> Result<Forward> {
    cfg.validate()?;
    if rasters.len() != cfg.cameras || rig.len() != cfg.cameras {
        return Err(Error::Usage(format!(
            "{} rasters / {} cameras for config with V = {}",
            rasters.len(),
            rig.len(),
            cfg.cameras
        )));
    }
    let featmaps: Vec<TensorId> = rasters
        .iter()
        .map(|(d, s)| embed_features(g, b, d, *s))
        .collect::<Result<_>>()?;
    let mem = match memory {
        Some(m) if m.k() > 0 => Some(g.leaf(&[m.k(), m.dim], m.queries.clone())?),
        _ => None,
    };

    let mut q3d = b.id("q3d0");
    let mut anchors: Vec<Anchor3D> = g
        .values(b.id("anchors0"))
        .chunks(9)
        .map(|c| {
            Anchor3D::from_array([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7], c[8]])
        })
        .collect();

    let mut layers2d = Vec::new();
    let mut layers3d = Vec::new();
    let h2_cls = branch(b, "head2d.cls");
    let h2_alpha = branch(b, "head2d.alpha");
    let h2_box = branch(b, "head2d.box");
    let h3_cls = branch(b, "head3d.cls");
    let h3_delta = branch(b, "head3d.delta");

    for blk in 0..cfg.l_hybrid {
        let t2d = b.mha(&format!("blk{blk}.t2d"));
        q3d = temporal_cross_attention(g, q3d, mem, &t2d, cfg.heads)?;

        if cfg.l_2d > 0 {
            let alloc = allocate(g, q3d, &anchors, rig)?;
            if alloc.mapping.m() > 0 {
                let mask = GroupMask::from_group_sizes(&alloc.group_sizes);
                let dims: Vec<(f64, f64)> = alloc
                    .mapping
                    .columns
                    .iter()
                    .map(|c| (rig[c.camera].width as f64, rig[c.camera].height as f64))
                    .collect();
                let mut q2d = alloc.q2d;
                for l in 0..cfg.l_2d {
                    let p_self = b.mha(&format!("blk{blk}.l2d{l}.self"));
                    q2d = group_self_attention(g, q2d, &mask, &p_self, cfg.heads)?;
                    let p_cross = b.deform(&format!("blk{blk}.l2d{l}.cross"));
                    q2d = group_cross_attention(
                        g,
                        q2d,
                        &alloc.reference_points,
                        &featmaps,
                        &alloc.group_sizes,
                        stride,
                        &p_cross,
                        cfg.deform_points,
                    )?;
                    let p_ffn = ffn_params(b, &format!("blk{blk}.l2d{l}.ffn"));
                    q2d = ffn(g, q2d, &p_ffn)?;
                    let pred = head_2d(
                        g,
                        q2d,
                        &alloc.reference_points,
                        &dims,
                        &h2_cls,
                        &h2_alpha,
                        &h2_box,
                    )?;
                    layers2d.push(Layer2D {
                        block: blk,
                        mapping: alloc.mapping.clone(),
                        reference_points: alloc.reference_points.clone(),
                        truncation: alloc.truncation.clone(),
                        dims: dims.clone(),
                        pred,
                    });
                }
                // adaptive aggregation with the auxiliary head tap
                let gp = b.gate(&format!("blk{blk}.gate"));
                let gated = gate_truncation(g, q2d, &alloc.truncation, &gp)?;
                let fused = fuse(g, gated, &alloc.mapping)?;
                let mp = b.mha(&format!("blk{blk}.merge"));
                q3d = if cfg.merge_skip_connection {
                    merge(g, q3d, fused, &mp, cfg.heads)?
                } else {
                    let x = g.add(q3d, fused)?;
                    let h = g.layer_norm(x, mp.ln_gamma, mp.ln_beta)?;
                    mha(g, h, h, &mp, cfg.heads, None)?
                };
                let aux = head_3d(g, q3d, &anchors, &h3_cls, &h3_delta)?;
                if cfg.l_3d == 0 {
                    let next = decode_anchors(g.values(aux.state));
                    layers3d.push(Layer3D {
                        block: blk,
                        aux: true,
                        pred: aux,
                        anchors_in: std::mem::replace(&mut anchors, next),
                    });
                } else {
                    layers3d.push(Layer3D {
                        block: blk,
                        aux: true,
                        pred: aux,
                        anchors_in: anchors.clone(),
                    });
                }
            }
        }

        let t3d_prefix = if cfg.temporal_shared_params {
            format!("blk{blk}.t2d")
        } else {
            format!("blk{blk}.t3d")
        };
        let t3d = b.mha(&t3d_prefix);
        q3d = temporal_cross_attention(g, q3d, mem, &t3d, cfg.heads)?;
        for l in 0..cfg.l_3d {
            let p_self = b.mha(&format!("blk{blk}.l3d{l}.self"));
            q3d = self_attention(g, q3d, &p_self, cfg.heads)?;
            let p_cross = b.deform(&format!("blk{blk}.l3d{l}.cross"));
            q3d = deform_cross_3d(
                g,
                q3d,
                &anchors,
                &featmaps,
                rig,
                stride,
                &p_cross,
                cfg.deform_points,
            )?;
            let p_ffn = ffn_params(b, &format!("blk{blk}.l3d{l}.ffn"));
            q3d = ffn(g, q3d, &p_ffn)?;
            let pred = head_3d(g, q3d, &anchors, &h3_cls, &h3_delta)?;
            let next = decode_anchors(g.values(pred.state));
            layers3d.push(Layer3D {
                block: blk,
                aux: false,
                pred,
                anchors_in: std::mem::replace(&mut anchors, next),
            });
        }
    }

    Ok(Forward {
        layers2d,
        layers3d,
        q3d_final: q3d,
        anchors_final: anchors,
    })
}

/// Select the top-K queries by maximum class probability from the last 3D
/// prediction and carry them (with ego-compensated anchors) to the next
/// frame. `ego_delta` is (dx, dy, dyaw) of the ego between frames.
pub fn propagate_temporal(
    g: &Graph<f64>,
    fwd: &Forward,
    k: usize,
    ego_delta: [f64; 3],
) -> TemporalMemory {
    let last = fwd
        .layers3d
        .last()
        .expect("decoder always produces at least one 3D prediction");
    let cls = g.values(last.pred.cls);
    let q = g.values(fwd.q3d_final);
    let n = fwd.anchors_final.len();
    let dim = q.len() / n.max(1);
    let classes = cls.len() / n.max(1);
    let mut scored: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let best = (0..classes)
                .map(|c| sigmoid(cls[i * classes + c]))
                .fold(f64::MIN, f64::max);
            (best, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let k = k.min(n);
    let (dx, dy, dyaw) = (ego_delta[0], ego_delta[1], ego_delta[2]);
    let (s, c) = dyaw.sin_cos();
    let mut queries = Vec::with_capacity(k * dim);
    let mut anchors = Vec::with_capacity(k);
    for &(_, i) in scored.iter().take(k) {
        queries.extend_from_slice(&q[i * dim..(i + 1) * dim]);
        let a = fwd.anchors_final[i];
        // express the anchor in the new ego frame
        let (rx, ry) = (a.x - dx, a.y - dy);
        anchors.push(Anchor3D {
            x: c * rx + s * ry,
            y: -s * rx + c * ry,
            yaw: wrap_angle(a.yaw - dyaw),
            vx: c * a.vx + s * a.vy,
            vy: -s * a.vx + c * a.vy,
            ..a
        });
    }
    TemporalMemory {
        queries,
        dim,
        anchors,
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::scene::{generate_scene, rasterize_features, GenConfig, RasterConfig, Scene};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_queries: 8,
            embed_dim: 16,
            heads: 2,
            cameras: 2,
            deform_points: 2,
            l_hybrid: 2,
            ..ModelConfig::default()
        }
    }

    fn scene2() -> Scene {
        let gc = GenConfig {
            cameras: 2,
            yaw_spread_deg: 25.0,
            ..GenConfig::default()
        };
        generate_scene(11, &gc).unwrap()
    }

    fn run(cfg: &ModelConfig, scene: &Scene, memory: Option<&TemporalMemory>) -> (Graph<f64>, Forward) {
        let model = Model::new(cfg.clone()).unwrap();
        let rc = RasterConfig::default();
        let rasters: Vec<(Vec<f64>, [usize; 3])> = (0..scene.rig.len())
            .map(|v| rasterize_features(scene, v, cfg.num_classes, &rc).unwrap())
            .collect();
        let mut g = Graph::new();
        let b = Binder::bind(&model.store, &mut g).unwrap();
        let fwd =
            decode_forward(&mut g, &b, cfg, &rasters, &scene.rig, rc.patch as f64, memory).unwrap();
        (g, fwd)
    }

    #[test]
    fn layer_structure_matches_config() {
        let cfg = small_cfg();
        let scene = scene2();
        let (g, fwd) = run(&cfg, &scene, None);
        // each block with visible queries contributes l_2d 2D layers and an
        // aggregation tap; each block always contributes l_3d main layers
        let taps = fwd.layers3d.iter().filter(|l| l.aux).count();
        let mains = fwd.layers3d.iter().filter(|l| !l.aux).count();
        assert_eq!(fwd.layers2d.len(), taps * cfg.l_2d);
        assert_eq!(mains, cfg.l_hybrid * cfg.l_3d);
        assert!(taps > 0, "no block saw any query");
        assert!(!fwd.layers3d.last().unwrap().aux);
        assert_eq!(fwd.anchors_final.len(), cfg.n_queries);
        assert_eq!(g.shape(fwd.q3d_final), &[cfg.n_queries, cfg.embed_dim]);
        for l in &fwd.layers2d {
            let m = l.mapping.m();
            assert_eq!(g.shape(l.pred.boxes), &[m, 4]);
            assert_eq!(l.reference_points.len(), m);
        }
    }

    #[test]
    fn no_2d_layers_when_disabled() {
        let cfg = ModelConfig {
            l_2d: 0,
            l_3d: 1,
            ..small_cfg()
        };
        let (_, fwd) = run(&cfg, &scene2(), None);
        assert!(fwd.layers2d.is_empty());
        assert_eq!(fwd.layers3d.len(), cfg.l_hybrid);
        assert!(fwd.layers3d.iter().all(|l| !l.aux));
    }

    #[test]
    fn aggregation_tap_refines_anchors_when_no_3d_layers() {
        let cfg = ModelConfig {
            l_2d: 1,
            l_3d: 0,
            ..small_cfg()
        };
        let (_, fwd) = run(&cfg, &scene2(), None);
        assert!(!fwd.layers2d.is_empty());
        assert!(fwd.layers3d.iter().all(|l| l.aux));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_cfg();
        let scene = scene2();
        let (ga, fa) = run(&cfg, &scene, None);
        let (gb, fb) = run(&cfg, &scene, None);
        assert_eq!(ga.values(fa.q3d_final), gb.values(fb.q3d_final));
        assert_eq!(
            ga.values(fa.layers3d.last().unwrap().pred.state),
            gb.values(fb.layers3d.last().unwrap().pred.state)
        );
        assert_eq!(fa.anchors_final, fb.anchors_final);
    }

    #[test]
    fn empty_memory_is_identity_nonempty_is_not() {
        let cfg = small_cfg();
        let scene = scene2();
        let (ga, fa) = run(&cfg, &scene, None);
        let empty = TemporalMemory {
            queries: vec![],
            dim: cfg.embed_dim,
            anchors: vec![],
        };
        let (gb, fb) = run(&cfg, &scene, Some(&empty));
        assert_eq!(ga.values(fa.q3d_final), gb.values(fb.q3d_final));
        let mem = TemporalMemory {
            queries: (0..3 * cfg.embed_dim).map(|i| (i as f64).sin()).collect(),
            dim: cfg.embed_dim,
            anchors: vec![Anchor3D::from_array([0.0; 9]); 3],
        };
        let (gc, fc) = run(&cfg, &scene, Some(&mem));
        assert_ne!(ga.values(fa.q3d_final), gc.values(fc.q3d_final));
    }

    #[test]
    fn temporal_propagation_selects_by_score_and_compensates_ego() {
        let cfg = small_cfg();
        let scene = scene2();
        let (g, fwd) = run(&cfg, &scene, None);
        let ego = [1.5, -0.5, 0.3];
        let mem = propagate_temporal(&g, &fwd, 3, ego);
        assert_eq!(mem.k(), 3);
        assert_eq!(mem.queries.len(), 3 * cfg.embed_dim);
        // scores of the kept set dominate every dropped query
        let last = fwd.layers3d.last().unwrap();
        let cls = g.values(last.pred.cls);
        let score = |i: usize| {
            (0..cfg.num_classes)
                .map(|c| sigmoid(cls[i * cfg.num_classes + c]))
                .fold(f64::MIN, f64::max)
        };
        let kept: Vec<usize> = (0..cfg.n_queries)
            .filter(|&i| {
                mem.queries
                    .chunks(cfg.embed_dim)
                    .any(|q| q == g.values(fwd.q3d_final)[i * cfg.embed_dim..(i + 1) * cfg.embed_dim].to_vec())
            })
            .collect();
        let min_kept = kept.iter().map(|&i| score(i)).fold(f64::MAX, f64::min);
        let max_dropped = (0..cfg.n_queries)
            .filter(|i| !kept.contains(i))
            .map(score)
            .fold(f64::MIN, f64::max);
        assert!(min_kept >= max_dropped);
        // hand-check the rigid transform on the best anchor
        let mut order: Vec<usize> = (0..cfg.n_queries).collect();
        order.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap().then(a.cmp(&b)));
        let best = order[0];
        let a = fwd.anchors_final[best];
        let (s, c) = ego[2].sin_cos();
        let (rx, ry) = (a.x - ego[0], a.y - ego[1]);
        assert!((mem.anchors[0].x - (c * rx + s * ry)).abs() < 1e-12);
        assert!((mem.anchors[0].y - (-s * rx + c * ry)).abs() < 1e-12);
        assert!((mem.anchors[0].yaw - wrap_angle(a.yaw - ego[2])).abs() < 1e-12);
    }

    #[test]
    fn raster_camera_count_mismatch_rejected() {
        let cfg = small_cfg();
        let scene = scene2();
        let model = Model::new(cfg.clone()).unwrap();
        let mut g = Graph::new();
        let b = Binder::bind(&model.store, &mut g).unwrap();
        let err = decode_forward(&mut g, &b, &cfg, &[], &scene.rig, 4.0, None);
        assert!(err.is_err());
    }
}
