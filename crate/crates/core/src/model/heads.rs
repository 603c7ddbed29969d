//! Shared prediction heads: the per-camera 2D head (class, observation
//! angle, sigmoid-bounded box around the reference point) and the 3D head
//! (class plus additive deltas on the anchor state with yaw as sin/cos).

use crate::error::Result;
use crate::geometry::{wrap_angle, Anchor3D};
use crate::tensor::{Graph, TensorId};

use super::params::Binder;

/// Smallest decoded box extent, meters.
const MIN_EXTENT: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct HeadBranch {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub fn branch(b: &Binder, prefix: &str) -> HeadBranch {
    HeadBranch {
        w1: b.id(&format!("{prefix}.w1")),
        b1: b.id(&format!("{prefix}.b1")),
        w2: b.id(&format!("{prefix}.w2")),
        b2: b.id(&format!("{prefix}.b2")),
    }
}

fn mlp2(g: &mut Graph<f64>, x: TensorId, br: &HeadBranch) -> Result<TensorId> {
    let h = g.linear(x, br.w1, br.b1)?;
    let h = g.relu(h);
    g.linear(h, br.w2, br.b2)
}

#[derive(Clone, Copy, Debug)]
pub struct Pred2D {
    /// `[M, num_classes]` logits.
    pub cls: TensorId,
    /// `[M, 2]` raw (sin, cos) observation-angle estimate.
    pub alpha: TensorId,
    /// `[M, 4]` decoded (cx, cy, w, h) in pixels.
    pub boxes: TensorId,
}

/// Decode 2D predictions for every 2D query. The box is parameterized
/// around the reference point: center = ref + (sigmoid - 0.5) * image dims,
/// extent = sigmoid * image dims, so zero-initialized outputs give a
/// reference-centered default box.
pub fn head_2d(
    g: &mut Graph<f64>,
    q2d: TensorId,
    reference_points: &[(f64, f64)],
    dims: &[(f64, f64)],
    cls: &HeadBranch,
    alpha: &HeadBranch,
    boxes: &HeadBranch,
) -> Result<Pred2D> {
    let m = g.shape(q2d)[0];
    debug_assert_eq!(reference_points.len(), m);
    debug_assert_eq!(dims.len(), m);
    let cls_t = mlp2(g, q2d, cls)?;
    let alpha_t = mlp2(g, q2d, alpha)?;
    let raw = mlp2(g, q2d, boxes)?;
    let s = g.sigmoid(raw);
    let mut shift = Vec::with_capacity(m * 4);
    let mut scale = Vec::with_capacity(m * 4);
    let mut refs = Vec::with_capacity(m * 4);
    for j in 0..m {
        shift.extend_from_slice(&[-0.5, -0.5, 0.0, 0.0]);
        scale.extend_from_slice(&[dims[j].0, dims[j].1, dims[j].0, dims[j].1]);
        refs.extend_from_slice(&[reference_points[j].0, reference_points[j].1, 0.0, 0.0]);
    }
    let shift = g.leaf(&[m, 4], shift)?;
    let scale = g.leaf(&[m, 4], scale)?;
    let refs = g.leaf(&[m, 4], refs)?;
    let t = g.add(s, shift)?;
    let t = g.mul(t, scale)?;
    let boxes_t = g.add(t, refs)?;
    Ok(Pred2D {
        cls: cls_t,
        alpha: alpha_t,
        boxes: boxes_t,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Pred3D {
    /// `[N, num_classes]` logits.
    pub cls: TensorId,
    /// `[N, 10]` refined state (x, y, z, w, l, h, sin, cos, vx, vy).
    pub state: TensorId,
}

/// Additive anchor refinement: state = anchor(sin/cos encoded) + deltas.
pub fn head_3d(
    g: &mut Graph<f64>,
    q3d: TensorId,
    anchors: &[Anchor3D],
    cls: &HeadBranch,
    delta: &HeadBranch,
) -> Result<Pred3D> {
    let n = g.shape(q3d)[0];
    debug_assert_eq!(anchors.len(), n);
    let cls_t = mlp2(g, q3d, cls)?;
    let deltas = mlp2(g, q3d, delta)?;
    let mut base = Vec::with_capacity(n * 10);
    for a in anchors {
        base.extend_from_slice(&[
            a.x,
            a.y,
            a.z,
            a.w,
            a.l,
            a.h,
            a.yaw.sin(),
            a.yaw.cos(),
            a.vx,
            a.vy,
        ]);
    }
    let base = g.leaf(&[n, 10], base)?;
    let state = g.add(base, deltas)?;
    Ok(Pred3D {
        cls: cls_t,
        state,
    })
}

/// Detached decode of refined states back into anchors for the next layer:
/// yaw recovered with atan2 and wrapped into (-pi, pi], extents floored.
pub fn decode_anchors(state_values: &[f64]) -> Vec<Anchor3D> {
    state_values
        .chunks(10)
        .map(|s| Anchor3D {
            x: s[0],
            y: s[1],
            z: s[2],
            w: s[3].max(MIN_EXTENT),
            l: s[4].max(MIN_EXTENT),
            h: s[5].max(MIN_EXTENT),
            yaw: wrap_angle(f64::atan2(s[6], s[7])),
            vx: s[8],
            vy: s[9],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::params::{init_params, Binder};
    use std::f64::consts::PI;

    fn setup() -> (Graph<f64>, Binder, ModelConfig) {
        let cfg = ModelConfig {
            n_queries: 4,
            embed_dim: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let anchors: Vec<f64> = (0..cfg.n_queries * 9).map(|i| i as f64 * 0.1).collect();
        let store = init_params(&cfg, &anchors);
        let mut g = Graph::<f64>::new();
        let b = Binder::bind(&store, &mut g).unwrap();
        (g, b, cfg)
    }

    #[test]
    fn zero_init_gives_reference_centered_default_box() {
        let (mut g, b, _) = setup();
        let q = g.leaf(&[2, 8], vec![0.3; 16]).unwrap();
        let rp = [(10.0, 12.0), (40.0, 20.0)];
        let dims = [(64.0, 48.0), (64.0, 48.0)];
        let p = head_2d(
            &mut g,
            q,
            &rp,
            &dims,
            &branch(&b, "head2d.cls"),
            &branch(&b, "head2d.alpha"),
            &branch(&b, "head2d.box"),
        )
        .unwrap();
        // output layer is zero-initialized: sigmoid(0) = 0.5
        let v = g.values(p.boxes);
        assert_eq!(&v[..4], &[10.0, 12.0, 32.0, 24.0]);
        assert_eq!(&v[4..], &[40.0, 20.0, 32.0, 24.0]);
    }

    #[test]
    fn zero_deltas_keep_anchor() {
        let (mut g, b, _) = setup();
        let q = g.leaf(&[1, 8], vec![0.2; 8]).unwrap();
        let a = Anchor3D {
            x: 1.0,
            y: 2.0,
            z: 0.5,
            w: 1.5,
            l: 4.0,
            h: 1.6,
            yaw: 0.7,
            vx: 0.1,
            vy: -0.2,
        };
        let p = head_3d(
            &mut g,
            q,
            &[a],
            &branch(&b, "head3d.cls"),
            &branch(&b, "head3d.delta"),
        )
        .unwrap();
        let out = decode_anchors(g.values(p.state));
        assert!((out[0].x - a.x).abs() < 1e-12);
        assert!((out[0].yaw - a.yaw).abs() < 1e-12);
        assert!((out[0].vy - a.vy).abs() < 1e-12);
    }

    #[test]
    fn yaw_decode_encode_round_trip() {
        for k in 0..16 {
            let yaw = -PI + (k as f64 + 0.5) * PI / 8.0;
            let state = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, yaw.sin(), yaw.cos(), 0.0, 0.0];
            let a = decode_anchors(&state);
            assert!((a[0].yaw - yaw).abs() < 1e-12);
            assert!(a[0].yaw > -PI && a[0].yaw <= PI);
        }
        // scaled sin/cos still recover the angle
        let state = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0 * 0.3f64.sin(), 2.0 * 0.3f64.cos(), 0.0, 0.0];
        assert!((decode_anchors(&state)[0].yaw - 0.3).abs() < 1e-12);
    }

    #[test]
    fn extent_floor_applies() {
        let state = [0.0, 0.0, 0.0, -3.0, 0.0, 0.02, 0.0, 1.0, 0.0, 0.0];
        let a = decode_anchors(&state);
        assert_eq!(a[0].w, 0.1);
        assert_eq!(a[0].l, 0.1);
        assert_eq!(a[0].h, 0.1);
    }
}
