//! Set-prediction losses with Hungarian matching: focal classification,
//! L1 and generalized-IoU box terms plus the observation-angle term for the
//! 2D stream; focal plus component-weighted L1 for the 3D stream. Deep
//! supervision sums every decoder layer including the aggregation taps.

use crate::error::{Error, Result};
use crate::scene::{Gt2D, Scene};
use crate::tensor::{Graph, TensorId};

use super::config::ModelConfig;
use super::decoder::{sigmoid, Forward};
use super::hungarian::hungarian_match;

const FOCAL_ALPHA: f64 = 0.25;
const FOCAL_GAMMA: f64 = 2.0;
const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l2d: f64,
    pub l3d: f64,
    pub cls2d: f64,
    pub l1_2d: f64,
    pub giou2d: f64,
    pub alpha: f64,
    pub cls3d: f64,
    pub l1_3d: f64,
    pub matched2d: usize,
    pub matched3d: usize,
}

/// Focal loss over independent per-class logits against a one-hot target
/// grid, normalized by `norm`.
fn focal_loss(
    g: &mut Graph<f64>,
    logits: TensorId,
    targets: Vec<f64>,
    norm: f64,
) -> Result<TensorId> {
    let sh = g.shape(logits).to_vec();
    let p = g.sigmoid(logits);
    let lo = g.full(&sh, EPS);
    let hi = g.full(&sh, 1.0 - EPS);
    let pc = g.maximum(p, lo)?;
    let pc = g.minimum(pc, hi)?;
    let one = g.full(&sh, 1.0);
    let q = g.sub(one, pc)?;
    let lnp = g.ln(pc);
    let lnq = g.ln(q);
    let tneg: Vec<f64> = targets.iter().map(|t| 1.0 - t).collect();
    let t = g.leaf(&sh, targets)?;
    let tn = g.leaf(&sh, tneg)?;
    let w_pos = g.pow_const(q, FOCAL_GAMMA);
    let w_neg = g.pow_const(pc, FOCAL_GAMMA);
    let pos = g.mul(t, w_pos)?;
    let pos = g.mul(pos, lnp)?;
    let neg = g.mul(tn, w_neg)?;
    let neg = g.mul(neg, lnq)?;
    let pos = g.mul_scalar(pos, -FOCAL_ALPHA);
    let neg = g.mul_scalar(neg, -(1.0 - FOCAL_ALPHA));
    let s = g.add(pos, neg)?;
    let s = g.sum_all(s);
    Ok(g.mul_scalar(s, 1.0 / norm))
}

/// Sum of |pred - target|, optionally column-weighted, divided by `norm`.
fn l1_loss(
    g: &mut Graph<f64>,
    pred: TensorId,
    target: Vec<f64>,
    col_weights: Option<&[f64]>,
    norm: f64,
) -> Result<TensorId> {
    let sh = g.shape(pred).to_vec();
    let t = g.leaf(&sh, target)?;
    let d = g.sub(pred, t)?;
    let mut d = g.abs(d);
    if let Some(w) = col_weights {
        let rows = sh[0];
        let mut wv = Vec::with_capacity(rows * w.len());
        for _ in 0..rows {
            wv.extend_from_slice(w);
        }
        let wt = g.leaf(&sh, wv)?;
        d = g.mul(d, wt)?;
    }
    let s = g.sum_all(d);
    Ok(g.mul_scalar(s, 1.0 / norm))
}

/// Differentiable generalized IoU loss on (cx, cy, w, h) pixel boxes against
/// constant ground truth, sum(1 - GIoU) / norm.
fn giou_loss(
    g: &mut Graph<f64>,
    pred: TensorId,
    gt: &[[f64; 4]],
    norm: f64,
) -> Result<TensorId> {
    let k = g.shape(pred)[0];
    debug_assert_eq!(gt.len(), k);
    let cx = g.slice_cols(pred, 0, 1)?;
    let cy = g.slice_cols(pred, 1, 1)?;
    let w = g.slice_cols(pred, 2, 1)?;
    let h = g.slice_cols(pred, 3, 1)?;
    let hw = g.mul_scalar(w, 0.5);
    let hh = g.mul_scalar(h, 0.5);
    let px0 = g.sub(cx, hw)?;
    let px1 = g.add(cx, hw)?;
    let py0 = g.sub(cy, hh)?;
    let py1 = g.add(cy, hh)?;
    let col = |g: &mut Graph<f64>, f: Box<dyn Fn(&[f64; 4]) -> f64>| {
        let v: Vec<f64> = gt.iter().map(|b| f(b)).collect();
        g.leaf(&[k, 1], v)
    };
    let gx0 = col(g, Box::new(|b| b[0] - b[2] / 2.0))?;
    let gx1 = col(g, Box::new(|b| b[0] + b[2] / 2.0))?;
    let gy0 = col(g, Box::new(|b| b[1] - b[3] / 2.0))?;
    let gy1 = col(g, Box::new(|b| b[1] + b[3] / 2.0))?;
    let ix0 = g.maximum(px0, gx0)?;
    let ix1 = g.minimum(px1, gx1)?;
    let iy0 = g.maximum(py0, gy0)?;
    let iy1 = g.minimum(py1, gy1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let ap = g.mul(w, h)?;
    let ag: Vec<f64> = gt.iter().map(|b| b[2] * b[3]).collect();
    let ag = g.leaf(&[k, 1], ag)?;
    let union = g.add(ap, ag)?;
    let union = g.sub(union, inter)?;
    let union = g.add_scalar(union, EPS);
    let iou = g.div(inter, union)?;
    let ex0 = g.minimum(px0, gx0)?;
    let ex1 = g.maximum(px1, gx1)?;
    let ey0 = g.minimum(py0, gy0)?;
    let ey1 = g.maximum(py1, gy1)?;
    let ew = g.sub(ex1, ex0)?;
    let eh = g.sub(ey1, ey0)?;
    let earea = g.mul(ew, eh)?;
    let earea = g.add_scalar(earea, EPS);
    let gap = g.sub(earea, union)?;
    let gap = g.div(gap, earea)?;
    let giou = g.sub(iou, gap)?;
    let ones = g.full(&[k, 1], 1.0);
    let loss = g.sub(ones, giou)?;
    let s = g.sum_all(loss);
    Ok(g.mul_scalar(s, 1.0 / norm))
}

/// Scalar GIoU of two (cx, cy, w, h) boxes, for matching costs.
pub fn giou_scalar(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax0, ax1, ay0, ay1) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0, a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
    let (bx0, bx1, by0, by1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0, b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter + EPS;
    let iou = inter / union;
    let ew = ax1.max(bx1) - ax0.min(bx0);
    let eh = ay1.max(by1) - ay0.min(by0);
    let earea = ew * eh + EPS;
    iou - (earea - union) / earea
}

fn gt_state10(obj: &crate::scene::SceneObject) -> [f64; 10] {
    let a = &obj.anchor;
    [a.x, a.y, a.z, a.w, a.l, a.h, a.yaw.sin(), a.yaw.cos(), a.vx, a.vy]
}

/// Hungarian-matched loss over every decoder layer of one scene's forward.
pub fn compute_losses(
    g: &mut Graph<f64>,
    fwd: &Forward,
    scene: &Scene,
    cfg: &ModelConfig,
) -> Result<(TensorId, LossBreakdown)> {
    if scene.rig.len() != cfg.cameras {
        return Err(Error::Usage(format!(
            "scene has {} cameras, config {}",
            scene.rig.len(),
            cfg.cameras
        )));
    }
    let mut bd = LossBreakdown::default();
    let mut terms: Vec<TensorId> = Vec::new();
    let add_term = |g: &mut Graph<f64>,
                        terms: &mut Vec<TensorId>,
                        slot: &mut f64,
                        t: TensorId| {
        *slot += g.scalar(t);
        terms.push(t);
    };

    for layer in &fwd.layers2d {
        let cls_v = g.values(layer.pred.cls).to_vec();
        let box_v = g.values(layer.pred.boxes).to_vec();
        let k_cls = cfg.num_classes;
        let mut targets = vec![0.0; layer.mapping.m() * k_cls];
        let mut matched_rows: Vec<usize> = Vec::new();
        let mut matched_gt: Vec<&Gt2D> = Vec::new();
        for v in 0..cfg.cameras {
            let range = layer.mapping.group_range(v);
            let rows: Vec<usize> = range.collect();
            let gts: Vec<&Gt2D> = scene.gt2d.iter().filter(|gt| gt.camera == v).collect();
            if rows.is_empty() || gts.is_empty() {
                continue;
            }
            let (wpx, hpx) = (scene.rig[v].width as f64, scene.rig[v].height as f64);
            let mut cost = vec![0.0; rows.len() * gts.len()];
            for (ri, &j) in rows.iter().enumerate() {
                let pb = [
                    box_v[j * 4],
                    box_v[j * 4 + 1],
                    box_v[j * 4 + 2],
                    box_v[j * 4 + 3],
                ];
                for (ci, gt) in gts.iter().enumerate() {
                    let p = sigmoid(cls_v[j * k_cls + gt.boxx.class_id]);
                    let gb = [gt.boxx.cx, gt.boxx.cy, gt.boxx.w, gt.boxx.h];
                    let l1: f64 = (0..4)
                        .map(|d| {
                            let s = if d % 2 == 0 { wpx } else { hpx };
                            ((pb[d] - gb[d]) / s).abs()
                        })
                        .sum();
                    cost[ri * gts.len() + ci] = cfg.w_cls2d * (-p)
                        + cfg.w_l1_2d * l1
                        + cfg.w_giou * (1.0 - giou_scalar(pb, gb));
                }
            }
            for (ri, ci) in hungarian_match(&cost, rows.len(), gts.len())? {
                let j = rows[ri];
                targets[j * k_cls + gts[ci].boxx.class_id] = 1.0;
                matched_rows.push(j);
                matched_gt.push(gts[ci]);
            }
        }
        let n_match = matched_rows.len();
        bd.matched2d += n_match;
        let norm = n_match.max(1) as f64;
        let cls_loss = focal_loss(g, layer.pred.cls, targets, norm)?;
        let cls_loss = g.mul_scalar(cls_loss, cfg.w_cls2d);
        add_term(g, &mut terms, &mut bd.cls2d, cls_loss);
        if n_match > 0 {
            let pred_boxes = g.gather_rows(layer.pred.boxes, &matched_rows)?;
            // normalize pixel boxes by image dims for the L1 term
            let mut inv = Vec::with_capacity(n_match * 4);
            let mut gt_norm = Vec::with_capacity(n_match * 4);
            let mut gt_px = Vec::with_capacity(n_match);
            for (&j, gt) in matched_rows.iter().zip(&matched_gt) {
                let (wpx, hpx) = layer.dims[j];
                inv.extend_from_slice(&[1.0 / wpx, 1.0 / hpx, 1.0 / wpx, 1.0 / hpx]);
                gt_norm.extend_from_slice(&[
                    gt.boxx.cx / wpx,
                    gt.boxx.cy / hpx,
                    gt.boxx.w / wpx,
                    gt.boxx.h / hpx,
                ]);
                gt_px.push([gt.boxx.cx, gt.boxx.cy, gt.boxx.w, gt.boxx.h]);
            }
            let inv = g.leaf(&[n_match, 4], inv)?;
            let pred_norm = g.mul(pred_boxes, inv)?;
            let l1 = l1_loss(g, pred_norm, gt_norm, None, norm)?;
            let l1 = g.mul_scalar(l1, cfg.w_l1_2d);
            add_term(g, &mut terms, &mut bd.l1_2d, l1);
            let gl = giou_loss(g, pred_boxes, &gt_px, norm)?;
            let gl = g.mul_scalar(gl, cfg.w_giou);
            add_term(g, &mut terms, &mut bd.giou2d, gl);
            // observation angle on matches that carry one
            let mut arows = Vec::new();
            let mut atgt = Vec::new();
            for (&j, gt) in matched_rows.iter().zip(&matched_gt) {
                if let Some(alpha) = gt.alpha {
                    arows.push(j);
                    atgt.extend_from_slice(&[alpha.sin(), alpha.cos()]);
                }
            }
            if !arows.is_empty() && cfg.lambda_alpha > 0.0 {
                let pa = g.gather_rows(layer.pred.alpha, &arows)?;
                let la = l1_loss(g, pa, atgt, None, arows.len() as f64)?;
                let la = g.mul_scalar(la, cfg.lambda_alpha);
                add_term(g, &mut terms, &mut bd.alpha, la);
            }
        }
    }
    let split2d = terms.len();
    let l2d_sum = bd.cls2d + bd.l1_2d + bd.giou2d + bd.alpha;

    for layer in &fwd.layers3d {
        let scale = if layer.aux { cfg.aux_weight } else { 1.0 };
        if scale == 0.0 {
            continue;
        }
        let cls_v = g.values(layer.pred.cls).to_vec();
        let state_v = g.values(layer.pred.state).to_vec();
        let n = cfg.n_queries;
        let k_cls = cfg.num_classes;
        let objs = &scene.objects;
        let mut cost = vec![0.0; n * objs.len()];
        for j in 0..n {
            for (ci, obj) in objs.iter().enumerate() {
                let p = sigmoid(cls_v[j * k_cls + obj.class_id]);
                let d = (state_v[j * 10] - obj.anchor.x).abs()
                    + (state_v[j * 10 + 1] - obj.anchor.y).abs()
                    + (state_v[j * 10 + 2] - obj.anchor.z).abs();
                cost[j * objs.len() + ci] = cfg.w_cls3d * (-p) + cfg.w_center * d;
            }
        }
        let pairs = if objs.is_empty() {
            Vec::new()
        } else {
            hungarian_match(&cost, n, objs.len())?
        };
        let n_match = pairs.len();
        bd.matched3d += n_match;
        let norm = n_match.max(1) as f64;
        let mut targets = vec![0.0; n * k_cls];
        for &(j, ci) in &pairs {
            targets[j * k_cls + objs[ci].class_id] = 1.0;
        }
        let cls_loss = focal_loss(g, layer.pred.cls, targets, norm)?;
        let cls_loss = g.mul_scalar(cls_loss, cfg.w_cls3d * scale);
        add_term(g, &mut terms, &mut bd.cls3d, cls_loss);
        if n_match > 0 {
            let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred = g.gather_rows(layer.pred.state, &rows)?;
            let mut gt = Vec::with_capacity(n_match * 10);
            for &(_, ci) in &pairs {
                gt.extend_from_slice(&gt_state10(&objs[ci]));
            }
            let cw = [
                cfg.w_center,
                cfg.w_center,
                cfg.w_center,
                cfg.w_size,
                cfg.w_size,
                cfg.w_size,
                cfg.w_yaw,
                cfg.w_yaw,
                cfg.w_vel,
                cfg.w_vel,
            ];
            let l1 = l1_loss(g, pred, gt, Some(&cw), norm)?;
            let l1 = g.mul_scalar(l1, scale);
            add_term(g, &mut terms, &mut bd.l1_3d, l1);
        }
    }
    let _ = split2d;

    bd.l2d = l2d_sum;
    bd.l3d = bd.cls3d + bd.l1_3d;
    bd.total = bd.l2d + bd.l3d;
    let mut total = terms
        .first()
        .copied()
        .ok_or_else(|| Error::Usage("forward produced no supervisable layers".into()))?;
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::decoder::decode_forward;
    use crate::model::params::Binder;
    use crate::model::{Model, ModelConfig};
    use crate::scene::{generate_scene, rasterize_features, GenConfig, RasterConfig};
    use crate::tensor::finite_diff_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

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
        generate_scene(13, &gc).unwrap()
    }

    fn run_loss(cfg: &ModelConfig, scene: &Scene) -> (f64, LossBreakdown) {
        let model = Model::new(cfg.clone()).unwrap();
        let rc = RasterConfig::default();
        let rasters: Vec<(Vec<f64>, [usize; 3])> = (0..scene.rig.len())
            .map(|v| rasterize_features(scene, v, cfg.num_classes, &rc).unwrap())
            .collect();
        let mut g = Graph::new();
        let b = Binder::bind(&model.store, &mut g).unwrap();
        let fwd =
            decode_forward(&mut g, &b, cfg, &rasters, &scene.rig, rc.patch as f64, None).unwrap();
        let (loss, bd) = compute_losses(&mut g, &fwd, scene, cfg).unwrap();
        (g.scalar(loss), bd)
    }

    #[test]
    fn focal_matches_host_oracle() {
        let logits_v = [0.7, -1.2, 0.1, 2.3, -0.4, 0.9];
        let targets = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let mut g = Graph::new();
        let logits = g.leaf(&[3, 2], logits_v.to_vec()).unwrap();
        let loss = focal_loss(&mut g, logits, targets.clone(), 2.0).unwrap();
        let mut want = 0.0;
        for (i, &x) in logits_v.iter().enumerate() {
            let p: f64 = 1.0 / (1.0 + (-x).exp());
            let t = targets[i];
            want += -FOCAL_ALPHA * t * (1.0 - p).powi(2) * p.ln()
                - (1.0 - FOCAL_ALPHA) * (1.0 - t) * p.powi(2) * (1.0 - p).ln();
        }
        want /= 2.0;
        assert!((g.scalar(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn focal_gradient_passes_finite_differences() {
        let targets = vec![1.0, 0.0, 0.0, 1.0];
        let x0 = [0.3, -0.8, 1.1, -0.2];
        let rel = finite_diff_check(
            |g, x| focal_loss(g, x, targets.clone(), 1.0),
            &x0,
            &[2, 2],
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn giou_loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let k = rng.gen_range(1..5);
            let mut pv = Vec::new();
            let mut gt = Vec::new();
            for _ in 0..k {
                pv.extend_from_slice(&[
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(0.5..6.0),
                    rng.gen_range(0.5..6.0),
                ]);
                gt.push([
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(0.5..6.0),
                    rng.gen_range(0.5..6.0),
                ]);
            }
            let mut g = Graph::new();
            let p = g.leaf(&[k, 4], pv.clone()).unwrap();
            let loss = giou_loss(&mut g, p, &gt, k as f64).unwrap();
            let want: f64 = (0..k)
                .map(|i| {
                    let pb = [pv[i * 4], pv[i * 4 + 1], pv[i * 4 + 2], pv[i * 4 + 3]];
                    1.0 - giou_scalar(pb, gt[i])
                })
                .sum::<f64>()
                / k as f64;
            assert!((g.scalar(loss) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn giou_gradient_passes_finite_differences() {
        let gt = vec![[1.0, 2.0, 3.0, 2.0], [-2.0, 0.5, 1.5, 2.5]];
        // box coordinates chosen so no corner ties its counterpart (max and
        // min are non-smooth at ties)
        let x0 = [0.55, 1.45, 2.3, 3.2, -1.1, 0.1, 2.0, 1.05];
        let rel = finite_diff_check(
            |g, x| giou_loss(g, x, &gt, 2.0),
            &x0,
            &[2, 4],
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn loss_is_finite_and_positive_at_init() {
        let cfg = small_cfg();
        let (total, bd) = run_loss(&cfg, &scene2());
        assert!(total.is_finite() && total > 0.0);
        assert!(bd.matched3d > 0);
        assert!((bd.total - total).abs() < 1e-9);
        assert!((bd.l2d + bd.l3d - bd.total).abs() < 1e-12);
    }

    #[test]
    fn loss_invariant_to_ground_truth_permutation() {
        let cfg = small_cfg();
        let scene = scene2();
        let (base, _) = run_loss(&cfg, &scene);
        let mut shuffled = scene.clone();
        let n = shuffled.objects.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut objs = shuffled.objects.clone();
        for (new, &old) in perm.iter().enumerate() {
            objs[new] = shuffled.objects[old].clone();
        }
        shuffled.objects = objs;
        for gt in &mut shuffled.gt2d {
            gt.object_id = perm.iter().position(|&o| o == gt.object_id).unwrap();
        }
        shuffled.gt2d.reverse();
        let (permuted, _) = run_loss(&cfg, &shuffled);
        assert!((base - permuted).abs() < 1e-10, "{base} vs {permuted}");
    }

    #[test]
    fn empty_ground_truth_is_classification_only() {
        let cfg = small_cfg();
        let mut scene = scene2();
        scene.objects.clear();
        scene.gt2d.clear();
        let (total, bd) = run_loss(&cfg, &scene);
        assert!(total.is_finite() && total > 0.0);
        assert_eq!(bd.matched2d, 0);
        assert_eq!(bd.matched3d, 0);
        assert_eq!(bd.l1_2d, 0.0);
        assert_eq!(bd.giou2d, 0.0);
        assert_eq!(bd.alpha, 0.0);
        assert_eq!(bd.l1_3d, 0.0);
        assert!(bd.cls2d > 0.0 || bd.cls3d > 0.0);
    }

    #[test]
    fn camera_count_mismatch_rejected() {
        let cfg = ModelConfig {
            cameras: 3,
            ..small_cfg()
        };
        let scene = scene2();
        let model = Model::new(cfg.clone()).unwrap();
        let rc = RasterConfig::default();
        let gc3 = GenConfig::default();
        let scene3 = generate_scene(1, &gc3).unwrap();
        let rasters: Vec<(Vec<f64>, [usize; 3])> = (0..scene3.rig.len())
            .map(|v| rasterize_features(&scene3, v, cfg.num_classes, &rc).unwrap())
            .collect();
        let mut g = Graph::new();
        let b = Binder::bind(&model.store, &mut g).unwrap();
        let fwd =
            decode_forward(&mut g, &b, &cfg, &rasters, &scene3.rig, rc.patch as f64, None).unwrap();
        assert!(compute_losses(&mut g, &fwd, &scene, &cfg).is_err());
    }
}
