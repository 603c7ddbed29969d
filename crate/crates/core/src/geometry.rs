//! Pinhole multi-camera math: box corners, ego-to-pixel projection, the
//! per-camera validity predicate, bounding rectangles, observation angles,
//! and box overlap measures. Everything here is a pure function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Size clamp applied to anchors before projection: l, w <= 35 m, h <= 10 m.
pub const MAX_ANCHOR_LW: f64 = 35.0;
pub const MAX_ANCHOR_H: f64 = 10.0;

/// Behind-camera guard: a point counts as in front only if z_cam exceeds this.
pub const FRONT_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Serialize", deserialize = "R: serde::de::DeserializeOwned"))]
pub struct CameraParams<R: Real = f64> {
    /// Row-major 3x3 intrinsic (fx, 0, cx / 0, fy, cy / 0, 0, 1).
    pub intrinsic: [[R; 3]; 3],
    /// Row-major 4x4 extrinsic mapping ego-frame homogeneous points into the
    /// camera frame (x right, y down, z forward).
    pub extrinsic: [[R; 4]; 4],
    pub width: u32,
    pub height: u32,
}

pub type CameraRig<R = f64> = Vec<CameraParams<R>>;

impl<R: Real> CameraParams<R> {
    pub fn fx(&self) -> R {
        self.intrinsic[0][0]
    }
    pub fn fy(&self) -> R {
        self.intrinsic[1][1]
    }
    pub fn cx(&self) -> R {
        self.intrinsic[0][2]
    }
    pub fn cy(&self) -> R {
        self.intrinsic[1][2]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx() > R::zero() && self.fy() > R::zero()) {
            return Err(Error::Config("camera: fx and fy must be positive".into()));
        }
        let w = R::c(self.width as f64);
        let h = R::c(self.height as f64);
        if !(self.cx() > R::zero() && self.cx() < w && self.cy() > R::zero() && self.cy() < h) {
            return Err(Error::Config("camera: principal point outside image".into()));
        }
        // upper-left 3x3 must be a rotation: R^T R = I, det = +1
        let r = &self.extrinsic;
        let tol = R::c(1e-9);
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = R::zero();
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let expect = if i == j { R::one() } else { R::zero() };
                if (dot - expect).abs() > tol {
                    return Err(Error::Config("camera: extrinsic rotation not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - R::one()).abs() > R::c(1e-6) {
            return Err(Error::Config("camera: extrinsic rotation determinant != +1".into()));
        }
        Ok(())
    }

    /// Ego-frame point into the camera frame.
    pub fn to_camera(&self, p: [R; 3]) -> [R; 3] {
        let e = &self.extrinsic;
        let mut out = [R::zero(); 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3];
        }
        out
    }

    /// Pixel coordinates and depth of a pixel ray point, inverting the
    /// intrinsic and extrinsic chain.
    pub fn unproject(&self, u: R, v: R, depth: R) -> [R; 3] {
        let xc = (u - self.cx()) / self.fx() * depth;
        let yc = (v - self.cy()) / self.fy() * depth;
        let pc = [xc, yc, depth];
        // rigid inverse: x_ego = R^T (x_cam - t)
        let e = &self.extrinsic;
        let d = [pc[0] - e[0][3], pc[1] - e[1][3], pc[2] - e[2][3]];
        let mut out = [R::zero(); 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = e[0][i] * d[0] + e[1][i] * d[1] + e[2][i] * d[2];
        }
        out
    }
}

/// The 9-component 3D box state: center, extent, yaw, BEV velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Serialize", deserialize = "R: serde::de::DeserializeOwned"))]
pub struct Anchor3D<R: Real = f64> {
    pub x: R,
    pub y: R,
    pub z: R,
    pub w: R,
    pub l: R,
    pub h: R,
    pub yaw: R,
    pub vx: R,
    pub vy: R,
}

impl<R: Real> Anchor3D<R> {
    pub fn center(&self) -> [R; 3] {
        [self.x, self.y, self.z]
    }

    /// Projection-time copy with extents clamped; the stored state is untouched.
    pub fn clamped(&self) -> Self {
        let mut a = *self;
        a.l = a.l.min(R::c(MAX_ANCHOR_LW));
        a.w = a.w.min(R::c(MAX_ANCHOR_LW));
        a.h = a.h.min(R::c(MAX_ANCHOR_H));
        a
    }

    pub fn as_array(&self) -> [R; 9] {
        [self.x, self.y, self.z, self.w, self.l, self.h, self.yaw, self.vx, self.vy]
    }

    pub fn from_array(a: [R; 9]) -> Self {
        Anchor3D {
            x: a[0],
            y: a[1],
            z: a[2],
            w: a[3],
            l: a[4],
            h: a[5],
            yaw: a[6],
            vx: a[7],
            vy: a[8],
        }
    }
}

/// Axis-aligned image-plane box, center/extent parameterization, pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Serialize", deserialize = "R: serde::de::DeserializeOwned"))]
pub struct Box2D<R: Real = f64> {
    pub cx: R,
    pub cy: R,
    pub w: R,
    pub h: R,
    pub class_id: usize,
    pub score: R,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedPoint<R: Real = f64> {
    pub u: R,
    pub v: R,
    pub in_front: bool,
}

/// Clipped axis-aligned rectangle, corner parameterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect<R: Real = f64> {
    pub x0: R,
    pub y0: R,
    pub x1: R,
    pub y1: R,
}

impl<R: Real> Rect<R> {
    pub fn center(&self) -> (R, R) {
        let half = R::c(0.5);
        ((self.x0 + self.x1) * half, (self.y0 + self.y1) * half)
    }

    pub fn to_box2d(&self, class_id: usize, score: R) -> Box2D<R> {
        let (cx, cy) = self.center();
        Box2D {
            cx,
            cy,
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
            class_id,
            score,
        }
    }
}

/// Projection of one anchor into one camera.
#[derive(Clone, Debug)]
pub struct ProjectionResult<R: Real = f64> {
    /// Center followed by the 8 corners.
    pub points: Vec<ProjectedPoint<R>>,
    /// The validity predicate: some in-front point strictly inside the image.
    pub valid: bool,
    /// Bounding rectangle of in-front points, clipped to the image.
    pub rect: Option<Rect<R>>,
    /// Projected box center is in front and strictly inside the image.
    pub center_inside: bool,
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle<R: Real>(t: R) -> R {
    let pi = R::c(std::f64::consts::PI);
    let two_pi = pi + pi;
    let mut a = (t + pi) % two_pi;
    if a <= R::zero() {
        a += two_pi;
    }
    a - pi
}

/// Wrap-safe sin/cos encoding of an angle.
pub fn encode_angle<R: Real>(t: R) -> (R, R) {
    (t.sin(), t.cos())
}

/// Center plus the 8 yaw-rotated corners of the box.
///
/// Corner order: index k in 0..8, bit 0 selects +-l/2 along the heading axis,
/// bit 1 selects +-w/2 across it, bit 2 selects +-h/2 vertically; set bit
/// means the positive half-extent.
pub fn box_corners<R: Real>(a: &Anchor3D<R>) -> [[R; 3]; 9] {
    let (s, c) = (a.yaw.sin(), a.yaw.cos());
    let half = R::c(0.5);
    let mut out = [[R::zero(); 3]; 9];
    out[0] = a.center();
    for k in 0..8usize {
        let sx = if k & 1 != 0 { R::one() } else { -R::one() };
        let sy = if k & 2 != 0 { R::one() } else { -R::one() };
        let sz = if k & 4 != 0 { R::one() } else { -R::one() };
        let dx = sx * a.l * half;
        let dy = sy * a.w * half;
        let dz = sz * a.h * half;
        out[k + 1] = [a.x + c * dx - s * dy, a.y + s * dx + c * dy, a.z + dz];
    }
    out
}

/// Project ego-frame points through a camera. Behind-camera points still get
/// pixel coordinates (from the raw perspective divide) but are flagged.
pub fn project_points<R: Real>(pts: &[[R; 3]], cam: &CameraParams<R>) -> Vec<ProjectedPoint<R>> {
    let eps = R::c(FRONT_EPS);
    pts.iter()
        .map(|&p| {
            let pc = cam.to_camera(p);
            let in_front = pc[2] > eps;
            // keep the divide finite for near-zero depth
            let z = if pc[2].abs() < R::c(1e-12) {
                R::c(1e-12)
            } else {
                pc[2]
            };
            let u = cam.fx() * pc[0] / z + cam.cx();
            let v = cam.fy() * pc[1] / z + cam.cy();
            ProjectedPoint { u, v, in_front }
        })
        .collect()
}

/// Full projection of an anchor into one camera: 9 points, validity,
/// clipped bounding rectangle of in-front points, center-inside flag.
pub fn project_anchor<R: Real>(a: &Anchor3D<R>, cam: &CameraParams<R>) -> ProjectionResult<R> {
    let corners = box_corners(a);
    let points = project_points(&corners, cam);
    let w = R::c(cam.width as f64);
    let h = R::c(cam.height as f64);
    let inside = |p: &ProjectedPoint<R>| {
        p.in_front && p.u > R::zero() && p.u < w && p.v > R::zero() && p.v < h
    };
    let valid = points.iter().any(inside);
    let center_inside = inside(&points[0]);
    let front: Vec<&ProjectedPoint<R>> = points.iter().filter(|p| p.in_front).collect();
    let rect = if front.is_empty() {
        None
    } else {
        let mut x0 = R::infinity();
        let mut y0 = R::infinity();
        let mut x1 = R::neg_infinity();
        let mut y1 = R::neg_infinity();
        for p in front {
            x0 = x0.min(p.u);
            y0 = y0.min(p.v);
            x1 = x1.max(p.u);
            y1 = y1.max(p.v);
        }
        // clip to the image
        let rect = Rect {
            x0: x0.max(R::zero()).min(w),
            y0: y0.max(R::zero()).min(h),
            x1: x1.max(R::zero()).min(w),
            y1: y1.max(R::zero()).min(h),
        };
        Some(rect)
    };
    ProjectionResult {
        points,
        valid,
        rect,
        center_inside,
    }
}

/// The validity bit f(q, v), recomputed from a projection result.
pub fn validity<R: Real>(proj: &ProjectionResult<R>, cam: &CameraParams<R>) -> bool {
    let w = R::c(cam.width as f64);
    let h = R::c(cam.height as f64);
    proj.points
        .iter()
        .any(|p| p.in_front && p.u > R::zero() && p.u < w && p.v > R::zero() && p.v < h)
}

/// Observation angle of a box in a camera: heading relative to the viewing ray.
///
/// Uses the rotated heading vector, not Euler decomposition, so it stays
/// valid for arbitrary extrinsic rotations. Errors if the box center is not
/// in front of the camera.
pub fn alpha_angle<R: Real>(a: &Anchor3D<R>, cam: &CameraParams<R>) -> Result<R> {
    let pc = cam.to_camera(a.center());
    if pc[2] <= R::c(FRONT_EPS) {
        return Err(Error::Usage("alpha_angle: box center behind camera".into()));
    }
    let hv = [a.yaw.cos(), a.yaw.sin(), R::zero()];
    let e = &cam.extrinsic;
    let mut hc = [R::zero(); 3];
    for (i, o) in hc.iter_mut().enumerate() {
        *o = e[i][0] * hv[0] + e[i][1] * hv[1] + e[i][2] * hv[2];
    }
    let yaw_cam = hc[0].atan2(hc[2]);
    let ray = pc[0].atan2(pc[2]);
    Ok(wrap_angle(yaw_cam - ray))
}

/// Intersection over union of axis-aligned boxes; 0 when the union is empty.
pub fn iou2d<R: Real>(a: &Box2D<R>, b: &Box2D<R>) -> R {
    let half = R::c(0.5);
    let ax0 = a.cx - a.w * half;
    let ax1 = a.cx + a.w * half;
    let ay0 = a.cy - a.h * half;
    let ay1 = a.cy + a.h * half;
    let bx0 = b.cx - b.w * half;
    let bx1 = b.cx + b.w * half;
    let by0 = b.cy - b.h * half;
    let by1 = b.cy + b.h * half;
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(R::zero());
    let ih = (ay1.min(by1) - ay0.max(by0)).max(R::zero());
    let inter = iw * ih;
    // areas from the same corner values, so self-IoU is exactly 1
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= R::zero() {
        R::zero()
    } else {
        (inter / union).min(R::one())
    }
}

pub fn center_dist3d<R: Real>(a: &Anchor3D<R>, b: &Anchor3D<R>) -> R {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    (dx * dx + dy * dy + dz * dz).sqrt()
}
