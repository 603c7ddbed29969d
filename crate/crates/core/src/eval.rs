//! Detection metrics: the 2D/3D association accuracy and recall curve, 2D
//! average precision, 3D center error, and the orientation-error summary,
//! plus the JSONL detection dump format they all consume.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    alpha_angle, center_dist3d, iou2d, project_anchor, validity, wrap_angle, Anchor3D, Box2D,
};
use crate::scene::Scene;

pub const DETECTION_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Det3D {
    pub id: usize,
    /// (x, y, z, w, l, h, yaw, vx, vy).
    pub anchor: [f64; 9],
    pub class_id: usize,
    pub score: f64,
}

impl Det3D {
    pub fn anchor3d(&self) -> Anchor3D {
        Anchor3D::from_array(self.anchor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Det2D {
    pub id: usize,
    pub camera: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    pub score: f64,
    pub alpha: Option<f64>,
    /// The 3D detection this box is the model's projection of, if any.
    pub linked_3d_id: Option<usize>,
}

impl Det2D {
    pub fn box2d(&self) -> Box2D {
        Box2D {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
            class_id: self.class_id,
            score: self.score,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDetections {
    pub scene_id: u64,
    pub det3d: Vec<Det3D>,
    pub det2d: Vec<Det2D>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchParams {
    /// 3D center-distance gate, meters.
    pub tau_dis: f64,
    /// 2D IoU threshold in (0, 1).
    pub tau_iou: f64,
}

impl MatchParams {
    pub fn new(tau_dis: f64, tau_iou: f64) -> Result<Self> {
        if !(tau_dis > 0.0) {
            return Err(Error::Config(format!("tau_dis {tau_dis} must be > 0")));
        }
        if !(tau_iou > 0.0 && tau_iou < 1.0) {
            return Err(Error::Config(format!("tau_iou {tau_iou} must be in (0, 1)")));
        }
        Ok(MatchParams { tau_dis, tau_iou })
    }
}

/// Candidate match: the 3D prediction hits this camera's 2D ground truth.
/// Requires the prediction to be visible in the camera, within `tau_dis` of
/// the ground-truth 3D center, with the projected bounding rectangle
/// overlapping the 2D ground truth at `tau_iou`, same class.
pub fn phi(p3d: &Det3D, scene: &Scene, gt2d_index: usize, params: &MatchParams) -> bool {
    let gt = &scene.gt2d[gt2d_index];
    let cam = &scene.rig[gt.camera];
    let obj = &scene.objects[gt.object_id];
    if p3d.class_id != obj.class_id {
        return false;
    }
    let pa = p3d.anchor3d();
    if center_dist3d(&pa, &obj.anchor) > params.tau_dis {
        return false;
    }
    let proj = project_anchor(&pa.clamped(), cam);
    if !validity(&proj, cam) {
        return false;
    }
    let rect = match &proj.rect {
        Some(r) => r.to_box2d(p3d.class_id, p3d.score),
        None => return false,
    };
    iou2d(&rect, &gt.boxx) >= params.tau_iou
}

/// Valid match: `phi` holds and the model's own linked 2D prediction in that
/// camera also overlaps the ground truth at `tau_iou` with the right class.
pub fn psi(
    p3d: &Det3D,
    linked: Option<&Det2D>,
    scene: &Scene,
    gt2d_index: usize,
    params: &MatchParams,
) -> bool {
    if !phi(p3d, scene, gt2d_index, params) {
        return false;
    }
    let Some(p2d) = linked else {
        return false;
    };
    let gt = &scene.gt2d[gt2d_index];
    p2d.class_id == gt.boxx.class_id && iou2d(&p2d.box2d(), &gt.boxx) >= params.tau_iou
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub tau_iou: f64,
    pub matching: usize,
    pub valid_matching: usize,
    /// Absent when no candidate match fired at this threshold.
    pub aar_percent: Option<f64>,
    pub recall_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssociationReport {
    pub tau_dis: f64,
    pub curve: Vec<CurvePoint>,
}

fn linked_2d<'a>(dets: &'a SceneDetections, id3d: usize, camera: usize) -> Option<&'a Det2D> {
    dets.det2d
        .iter()
        .find(|d| d.linked_3d_id == Some(id3d) && d.camera == camera)
}

/// Association accuracy (AAR = sum psi / sum phi * 100) and recall
/// (sum phi / #gt2d * 100) swept over `tau_ious`, at a fixed distance gate.
pub fn aar_recall(
    detections: &[SceneDetections],
    scenes: &[Scene],
    tau_dis: f64,
    tau_ious: &[f64],
) -> Result<AssociationReport> {
    let by_id: std::collections::HashMap<u64, &Scene> =
        scenes.iter().map(|s| (s.scene_id, s)).collect();
    let n_gt2d: usize = detections
        .iter()
        .map(|d| by_id.get(&d.scene_id).map_or(0, |s| s.gt2d.len()))
        .sum();
    let mut curve = Vec::with_capacity(tau_ious.len());
    for &tau_iou in tau_ious {
        let params = MatchParams::new(tau_dis, tau_iou)?;
        let mut matching = 0usize;
        let mut valid = 0usize;
        for dets in detections {
            let scene = by_id.get(&dets.scene_id).ok_or_else(|| {
                Error::Data(format!("detections reference unknown scene {}", dets.scene_id))
            })?;
            for p3d in &dets.det3d {
                for gi in 0..scene.gt2d.len() {
                    if phi(p3d, scene, gi, &params) {
                        matching += 1;
                        let link = linked_2d(dets, p3d.id, scene.gt2d[gi].camera);
                        if psi(p3d, link, scene, gi, &params) {
                            valid += 1;
                        }
                    }
                }
            }
        }
        curve.push(CurvePoint {
            tau_iou,
            matching,
            valid_matching: valid,
            aar_percent: (matching > 0).then(|| valid as f64 / matching as f64 * 100.0),
            recall_percent: if n_gt2d > 0 {
                matching as f64 / n_gt2d as f64 * 100.0
            } else {
                0.0
            },
        });
    }
    Ok(AssociationReport { tau_dis, curve })
}

/// Standard sweep of the appendix protocol, 0.1 to 0.9 in steps of 0.1.
pub fn default_tau_sweep() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// Per-class average precision of 2D detections at one IoU threshold with
/// all-point interpolation; classes with no ground truth are skipped in the
/// mean. Detections are pooled across scenes and cameras.
pub fn average_precision_2d(
    detections: &[SceneDetections],
    scenes: &[Scene],
    iou_threshold: f64,
    num_classes: usize,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    let by_id: std::collections::HashMap<u64, &Scene> =
        scenes.iter().map(|s| (s.scene_id, s)).collect();
    let mut per_class = Vec::with_capacity(num_classes);
    for cls in 0..num_classes {
        // (score, scene index, det index) pool for this class
        let mut pool: Vec<(f64, usize, usize)> = Vec::new();
        let mut n_gt = 0usize;
        for (si, dets) in detections.iter().enumerate() {
            let scene = by_id.get(&dets.scene_id).ok_or_else(|| {
                Error::Data(format!("detections reference unknown scene {}", dets.scene_id))
            })?;
            n_gt += scene.gt2d.iter().filter(|g| g.boxx.class_id == cls).count();
            for (di, d) in dets.det2d.iter().enumerate() {
                if d.class_id == cls {
                    pool.push((d.score, si, di));
                }
            }
        }
        if n_gt == 0 {
            per_class.push(None);
            continue;
        }
        pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut taken: std::collections::HashSet<(usize, usize)> = std::collections::HashSet::new();
        let mut tps = Vec::with_capacity(pool.len());
        for &(_, si, di) in &pool {
            let dets = &detections[si];
            let scene = by_id[&dets.scene_id];
            let d = &dets.det2d[di];
            let db = d.box2d();
            let mut best = (iou_threshold, None);
            for (gi, gt) in scene.gt2d.iter().enumerate() {
                if gt.camera != d.camera || gt.boxx.class_id != cls || taken.contains(&(si, gi)) {
                    continue;
                }
                let iou = iou2d(&db, &gt.boxx);
                if iou >= best.0 {
                    best = (iou, Some(gi));
                }
            }
            if let Some(gi) = best.1 {
                taken.insert((si, gi));
                tps.push(true);
            } else {
                tps.push(false);
            }
        }
        let mut tp = 0usize;
        let mut points = Vec::with_capacity(tps.len());
        for (k, &is_tp) in tps.iter().enumerate() {
            if is_tp {
                tp += 1;
            }
            points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
        }
        // all-point interpolation: integrate max precision to the right
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for i in 0..points.len() {
            let (r, _) = points[i];
            if r > prev_recall {
                let pmax = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
                ap += (r - prev_recall) * pmax;
                prev_recall = r;
            }
        }
        per_class.push(Some(ap));
    }
    let present: Vec<f64> = per_class.iter().filter_map(|a| *a).collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok((per_class, mean))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CenterErrorReport {
    pub mean: f64,
    pub median: f64,
    pub matched: usize,
    pub gt_total: usize,
}

/// Greedy score-ordered center-distance matching at a 2 m gate, same class.
pub fn center_error_3d(detections: &[SceneDetections], scenes: &[Scene]) -> Result<CenterErrorReport> {
    const GATE: f64 = 2.0;
    let by_id: std::collections::HashMap<u64, &Scene> =
        scenes.iter().map(|s| (s.scene_id, s)).collect();
    let mut errs = Vec::new();
    let mut gt_total = 0usize;
    for dets in detections {
        let scene = by_id.get(&dets.scene_id).ok_or_else(|| {
            Error::Data(format!("detections reference unknown scene {}", dets.scene_id))
        })?;
        gt_total += scene.objects.len();
        let mut order: Vec<&Det3D> = dets.det3d.iter().collect();
        order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
        let mut used = vec![false; scene.objects.len()];
        for d in order {
            let da = d.anchor3d();
            let mut best: Option<(f64, usize)> = None;
            for (oi, obj) in scene.objects.iter().enumerate() {
                if used[oi] || obj.class_id != d.class_id {
                    continue;
                }
                let dist = center_dist3d(&da, &obj.anchor);
                if dist <= GATE && best.map_or(true, |(bd, _)| dist < bd) {
                    best = Some((dist, oi));
                }
            }
            if let Some((dist, oi)) = best {
                used[oi] = true;
                errs.push(dist);
            }
        }
    }
    if errs.is_empty() {
        return Ok(CenterErrorReport {
            mean: f64::INFINITY,
            median: f64::INFINITY,
            matched: 0,
            gt_total,
        });
    }
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let median = if errs.len() % 2 == 1 {
        errs[errs.len() / 2]
    } else {
        0.5 * (errs[errs.len() / 2 - 1] + errs[errs.len() / 2])
    };
    Ok(CenterErrorReport {
        mean,
        median,
        matched: errs.len(),
        gt_total,
    })
}

/// Mean absolute wrapped observation-angle error over 2D detections matched
/// to ground truth at 0.5 IoU. None when nothing matches or no detection
/// carries an angle.
pub fn mean_alpha_error(detections: &[SceneDetections], scenes: &[Scene]) -> Result<Option<f64>> {
    let by_id: std::collections::HashMap<u64, &Scene> =
        scenes.iter().map(|s| (s.scene_id, s)).collect();
    let mut errs = Vec::new();
    for dets in detections {
        let scene = by_id.get(&dets.scene_id).ok_or_else(|| {
            Error::Data(format!("detections reference unknown scene {}", dets.scene_id))
        })?;
        for d in &dets.det2d {
            let Some(pa) = d.alpha else { continue };
            let db = d.box2d();
            let mut best: Option<(f64, f64)> = None;
            for gt in scene.gt2d.iter().filter(|g| g.camera == d.camera) {
                if gt.boxx.class_id != d.class_id {
                    continue;
                }
                let Some(ga) = gt.alpha else { continue };
                let iou = iou2d(&db, &gt.boxx);
                if iou >= 0.5 && best.map_or(true, |(bi, _)| iou > bi) {
                    best = Some((iou, ga));
                }
            }
            if let Some((_, ga)) = best {
                errs.push(wrap_angle(pa - ga).abs());
            }
        }
    }
    Ok((!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64))
}

/// Observation angle a 3D detection implies in one camera, when visible.
pub fn implied_alpha(det: &Det3D, scene: &Scene, camera: usize) -> Option<f64> {
    alpha_angle(&det.anchor3d(), &scene.rig[camera]).ok()
}

#[derive(Serialize, Deserialize)]
struct DetLine {
    version: u32,
    #[serde(flatten)]
    dets: SceneDetections,
}

pub fn save_detections(path: &Path, detections: &[SceneDetections]) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(f);
    for dets in detections {
        let line = serde_json::to_string(&DetLine {
            version: DETECTION_FORMAT_VERSION,
            dets: dets.clone(),
        })
        .map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn load_detections(path: &Path) -> Result<Vec<SceneDetections>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DetLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if parsed.version != DETECTION_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}:{}: detection format version {} (expected {})",
                path.display(),
                i + 1,
                parsed.version,
                DETECTION_FORMAT_VERSION
            )));
        }
        out.push(parsed.dets);
    }
    Ok(out)
}
