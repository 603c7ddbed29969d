//! Adaptive aggregation of per-camera 2D queries back into 3D queries:
//! truncation-aware gating, ownership-normalized fusion, and a residual
//! self-attention merge that also feeds the auxiliary 3D supervision tap.

use crate::allocation::MappingMatrix;
use crate::attention::{mha, MhaParams};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Graph, TensorId};

/// Two-layer gate MLP over `Concat(q2d, truncation bit)`, final sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    /// `[C+1, C]`
    pub w1: TensorId,
    pub b1: TensorId,
    /// `[C, C]`
    pub w2: TensorId,
    pub b2: TensorId,
}

#[derive(Debug)]
pub struct AggregationOutput {
    /// Merged 3D queries, input to the next 3D decoder layer.
    pub q3d_agg: TensorId,
    /// Pre-merge fusion result; rows of unowned 3D queries are exactly zero.
    pub fused: TensorId,
    /// Tap for the auxiliary 3D head (same tensor as `q3d_agg`).
    pub aux_head_input: TensorId,
}

/// Element-wise gate on each 2D query from its own features plus the
/// truncation indicator.
pub fn gate_truncation<R: Real>(
    g: &mut Graph<R>,
    q2d: TensorId,
    trunc: &[bool],
    p: &GateParams,
) -> Result<TensorId> {
    let m = g.shape(q2d)[0];
    if trunc.len() != m {
        return Err(Error::Usage(format!(
            "{} truncation bits for {m} queries",
            trunc.len()
        )));
    }
    let bits: Vec<R> = trunc
        .iter()
        .map(|&t| if t { R::one() } else { R::zero() })
        .collect();
    let bits = g.leaf(&[m, 1], bits)?;
    let x = g.concat_cols(&[q2d, bits])?;
    let h = g.linear(x, p.w1, p.b1)?;
    let h = g.relu(h);
    let h = g.linear(h, p.w2, p.b2)?;
    let gate = g.sigmoid(h);
    g.mul(q2d, gate)
}

/// Ownership-normalized fusion: row i is the mean of the gated 2D queries
/// owned by 3D query i, or a zero row when it owns none.
pub fn fuse<R: Real>(
    g: &mut Graph<R>,
    q2d_gated: TensorId,
    mapping: &MappingMatrix,
) -> Result<TensorId> {
    if g.shape(q2d_gated)[0] != mapping.m() {
        return Err(Error::Usage(format!(
            "fuse: {} rows against mapping with {} columns",
            g.shape(q2d_gated)[0],
            mapping.m()
        )));
    }
    g.group_mean_rows(q2d_gated, &mapping.owners(), mapping.n)
}

/// Self-Attn(q3d + fused) over all N queries with a post-attention residual
/// and pre-norm, shared with the plain attention blocks.
pub fn merge<R: Real>(
    g: &mut Graph<R>,
    q3d: TensorId,
    fused: TensorId,
    p: &MhaParams,
    heads: usize,
) -> Result<TensorId> {
    let x = g.add(q3d, fused)?;
    let h = g.layer_norm(x, p.ln_gamma, p.ln_beta)?;
    let a = mha(g, h, h, p, heads, None)?;
    g.add(x, a)
}

/// Full aggregation pass: gate, fuse, merge, and expose the auxiliary tap.
pub fn aggregate<R: Real>(
    g: &mut Graph<R>,
    q3d: TensorId,
    q2d: TensorId,
    trunc: &[bool],
    mapping: &MappingMatrix,
    gate_params: &GateParams,
    merge_params: &MhaParams,
    heads: usize,
) -> Result<AggregationOutput> {
    let gated = gate_truncation(g, q2d, trunc, gate_params)?;
    let fused = fuse(g, gated, mapping)?;
    let q3d_agg = merge(g, q3d, fused, merge_params, heads)?;
    Ok(AggregationOutput {
        q3d_agg,
        fused,
        aux_head_input: q3d_agg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{allocate, ColumnEntry};
    use crate::tensor::finite_diff_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn gate_params(g: &mut Graph<f64>, c: usize, rng: &mut ChaCha8Rng) -> GateParams {
        GateParams {
            w1: g.leaf_grad(&[c + 1, c], randv(rng, (c + 1) * c)).unwrap(),
            b1: g.leaf_grad(&[c], randv(rng, c)).unwrap(),
            w2: g.leaf_grad(&[c, c], randv(rng, c * c)).unwrap(),
            b2: g.leaf_grad(&[c], randv(rng, c)).unwrap(),
        }
    }

    fn mha_params(g: &mut Graph<f64>, c: usize, rng: &mut ChaCha8Rng) -> MhaParams {
        MhaParams {
            ln_gamma: g.leaf_grad(&[c], vec![1.0; c]).unwrap(),
            ln_beta: g.leaf_grad(&[c], vec![0.0; c]).unwrap(),
            wq: g.leaf_grad(&[c, c], randv(rng, c * c)).unwrap(),
            bq: g.leaf_grad(&[c], randv(rng, c)).unwrap(),
            wk: g.leaf_grad(&[c, c], randv(rng, c * c)).unwrap(),
            bk: g.leaf_grad(&[c], randv(rng, c)).unwrap(),
            wv: g.leaf_grad(&[c, c], randv(rng, c * c)).unwrap(),
            bv: g.leaf_grad(&[c], randv(rng, c)).unwrap(),
            wo: g.leaf_grad(&[c, c], randv(rng, c * c)).unwrap(),
            bo: g.leaf_grad(&[c], randv(rng, c)).unwrap(),
        }
    }

    fn mapping(n: usize, cols: &[(usize, usize)]) -> MappingMatrix {
        // cols are (camera, owner), camera-major
        let cams = cols.iter().map(|c| c.0).max().map_or(0, |m| m + 1);
        let mut offsets = vec![0];
        for v in 0..cams {
            let end = cols.iter().filter(|c| c.0 <= v).count();
            offsets.push(end);
        }
        MappingMatrix {
            n,
            columns: cols
                .iter()
                .map(|&(camera, owner)| ColumnEntry { camera, owner })
                .collect(),
            group_offsets: offsets,
        }
    }

    #[test]
    fn saturated_gate_is_identity_or_zero() {
        let c = 4;
        let mut g = Graph::<f64>::new();
        let m = 3;
        let q = g.leaf(&[m, c], (0..m * c).map(|i| i as f64 * 0.1).collect()).unwrap();
        // zero hidden weights, huge positive output bias -> sigmoid ~= 1
        let mk = |g: &mut Graph<f64>, bias: f64| GateParams {
            w1: g.leaf(&[c + 1, c], vec![0.0; (c + 1) * c]).unwrap(),
            b1: g.leaf(&[c], vec![0.0; c]).unwrap(),
            w2: g.leaf(&[c, c], vec![0.0; c * c]).unwrap(),
            b2: g.leaf(&[c], vec![bias; c]).unwrap(),
        };
        let p1 = mk(&mut g, 60.0);
        let open = gate_truncation(&mut g, q, &[false; 3], &p1).unwrap();
        for (a, b) in g.values(open).iter().zip(g.values(q)) {
            assert!((a - b).abs() < 1e-12);
        }
        let p0 = mk(&mut g, -60.0);
        let closed = gate_truncation(&mut g, q, &[false; 3], &p0).unwrap();
        assert!(g.values(closed).iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn truncation_bit_reaches_the_gate() {
        // flipping the bit changes the output when the bit row of w1 is
        // nonzero; oracle recomputes the MLP by hand
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 4;
        let mut g = Graph::<f64>::new();
        let p = gate_params(&mut g, c, &mut rng);
        let qv = randv(&mut rng, c);
        let q = g.leaf(&[1, c], qv.clone()).unwrap();
        let a = gate_truncation(&mut g, q, &[false], &p).unwrap();
        let b = gate_truncation(&mut g, q, &[true], &p).unwrap();
        assert_ne!(g.values(a), g.values(b));
        // hand evaluation for bit = 1
        let w1 = g.values(p.w1).to_vec();
        let b1 = g.values(p.b1).to_vec();
        let w2 = g.values(p.w2).to_vec();
        let b2 = g.values(p.b2).to_vec();
        let mut h = b1.clone();
        for o in 0..c {
            for i in 0..c {
                h[o] += qv[i] * w1[i * c + o];
            }
            h[o] += 1.0 * w1[c * c + o];
            h[o] = h[o].max(0.0);
        }
        for o in 0..c {
            let mut z = b2[o];
            for i in 0..c {
                z += h[i] * w2[i * c + o];
            }
            let gate = 1.0 / (1.0 + (-z).exp());
            assert!((g.values(b)[o] - qv[o] * gate).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_means_owned_rows() {
        let c = 2;
        let mut g = Graph::<f64>::new();
        let q = g
            .leaf(&[3, c], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let m = mapping(2, &[(0, 0), (0, 1), (1, 0)]);
        let f = fuse(&mut g, q, &m).unwrap();
        // owner 0 averages rows 0 and 2, owner 1 gets row 1
        assert_eq!(g.values(f), &[3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn unowned_query_fuses_to_zero_row() {
        let c = 3;
        let mut g = Graph::<f64>::new();
        let q = g.leaf(&[1, c], vec![7.0, 8.0, 9.0]).unwrap();
        let m = mapping(3, &[(0, 1)]);
        let f = fuse(&mut g, q, &m).unwrap();
        assert_eq!(g.values(f), &[0.0, 0.0, 0.0, 7.0, 8.0, 9.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn fuse_matches_dense_oracle_and_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.gen_range(1..6);
            let cols: Vec<(usize, usize)> = {
                let mut v = Vec::new();
                for cam in 0..2 {
                    let mut owners: Vec<usize> =
                        (0..n).filter(|_| rng.gen_bool(0.6)).collect();
                    owners.dedup();
                    v.extend(owners.into_iter().map(|o| (cam, o)));
                }
                v
            };
            let m = mapping(n, &cols);
            let c = 3;
            let qv = randv(&mut rng, m.m() * c);
            let mut g = Graph::<f64>::new();
            let q = g.leaf(&[m.m().max(0), c], qv.clone()).unwrap();
            let f = fuse(&mut g, q, &m).unwrap();
            // dense oracle: T X / rowsum(T)
            let t: Vec<f64> = m.dense();
            for i in 0..n {
                let rowsum: f64 = (0..m.m()).map(|j| t[i * m.m() + j]).sum();
                for ch in 0..c {
                    let num: f64 = (0..m.m())
                        .map(|j| t[i * m.m() + j] * qv[j * c + ch])
                        .sum();
                    let expect = if rowsum == 0.0 { 0.0 } else { num / rowsum };
                    assert!((g.values(f)[i * c + ch] - expect).abs() < 1e-12);
                }
            }
            // linearity: scaling inputs scales the fusion
            let q2 = g.mul_scalar(q, 2.5);
            let f2 = fuse(&mut g, q2, &m).unwrap();
            for (a, b) in g.values(f2).iter().zip(g.values(f)) {
                assert!((a - 2.5 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_with_zero_fusion_is_plain_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 8;
        let mut g = Graph::<f64>::new();
        let p = mha_params(&mut g, c, &mut rng);
        let q = g.leaf(&[3, c], randv(&mut rng, 3 * c)).unwrap();
        let z = g.zeros(&[3, c]);
        let out = merge(&mut g, q, z, &p, 2).unwrap();
        let h = g.layer_norm(q, p.ln_gamma, p.ln_beta).unwrap();
        let a = mha(&mut g, h, h, &p, 2, None).unwrap();
        let expect = g.add(q, a).unwrap();
        assert_eq!(g.values(out), g.values(expect));
    }

    #[test]
    fn merge_single_query_compositional_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 8;
        let mut g = Graph::<f64>::new();
        let p = mha_params(&mut g, c, &mut rng);
        let q = g.leaf(&[1, c], randv(&mut rng, c)).unwrap();
        let f = g.leaf(&[1, c], randv(&mut rng, c)).unwrap();
        let out = merge(&mut g, q, f, &p, 2).unwrap();
        // weight 1 on the single query: out = x + Wo(Wv ln(x) + bv) + bo
        let x = g.add(q, f).unwrap();
        let h = g.layer_norm(x, p.ln_gamma, p.ln_beta).unwrap();
        let v = g.linear(h, p.wv, p.bv).unwrap();
        let o = g.linear(v, p.wo, p.bo).unwrap();
        let expect = g.add(x, o).unwrap();
        for (a, b) in g.values(out).iter().zip(g.values(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn forward_cam() -> crate::geometry::CameraParams {
        // forward-facing pinhole, 60 degree horizontal FOV
        let mut extr = [[0.0; 4]; 4];
        extr[0][1] = -1.0; // ego +y (left) -> camera -x
        extr[1][2] = -1.0; // ego +z (up) -> camera -y
        extr[2][0] = 1.0; // ego +x (forward) -> camera +z
        extr[3][3] = 1.0;
        let (w, h) = (64u32, 48u32);
        let fx = (w as f64 / 2.0) / 30.0f64.to_radians().tan();
        let mut intr = [[0.0; 3]; 3];
        intr[0][0] = fx;
        intr[1][1] = fx;
        intr[0][2] = w as f64 / 2.0;
        intr[1][2] = h as f64 / 2.0;
        intr[2][2] = 1.0;
        crate::geometry::CameraParams {
            intrinsic: intr,
            extrinsic: extr,
            width: w,
            height: h,
        }
    }

    #[test]
    fn allocation_fusion_round_trip_is_identity() {
        // identity gate + full visibility: fuse(allocate(q3d)) == q3d exactly
        let rig = vec![forward_cam()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let anchors: Vec<crate::geometry::Anchor3D> = (0..4)
                .map(|_| crate::geometry::Anchor3D {
                    x: rng.gen_range(8.0..20.0),
                    y: rng.gen_range(-2.0..2.0),
                    z: 0.0,
                    w: 1.0,
                    l: 1.0,
                    h: 1.0,
                    yaw: 0.0,
                    vx: 0.0,
                    vy: 0.0,
                })
                .collect();
            let mut g = Graph::<f64>::new();
            let c = 5;
            let q3d = g.leaf(&[4, c], randv(&mut rng, 4 * c)).unwrap();
            let alloc = allocate(&mut g, q3d, &anchors, &rig).unwrap();
            assert!(anchors
                .iter()
                .enumerate()
                .all(|(i, _)| alloc.mapping.owners().contains(&i)));
            let f = fuse(&mut g, alloc.q2d, &alloc.mapping).unwrap();
            assert_eq!(g.values(f), g.values(q3d));
        }
    }

    #[test]
    fn end_to_end_gradients_check_out() {
        // gradient flows through gate -> fuse -> merge
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = 4;
        let m = mapping(3, &[(0, 0), (0, 2), (1, 0)]);
        let x0 = randv(&mut rng, m.m() * c);
        let err = finite_diff_check(
            |g, q2d| {
                let mut prng = ChaCha8Rng::seed_from_u64(7);
                let gp = gate_params(g, c, &mut prng);
                let mp = mha_params(g, c, &mut prng);
                let q3d = g.leaf(&[3, c], vec![0.3; 3 * c])?;
                let out = aggregate(g, q3d, q2d, &[false, true, false], &m, &gp, &mp, 2)?;
                let sq = g.mul(out.q3d_agg, out.q3d_agg)?;
                Ok(g.mean_all(sq))
            },
            &x0,
            &[m.m(), c],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn aggregate_exposes_zero_fused_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = 4;
        let m = mapping(3, &[(0, 0), (1, 2)]);
        let mut g = Graph::<f64>::new();
        let gp = gate_params(&mut g, c, &mut rng);
        let mp = mha_params(&mut g, c, &mut rng);
        let q3d = g.leaf(&[3, c], randv(&mut rng, 3 * c)).unwrap();
        let q2d = g.leaf(&[2, c], randv(&mut rng, 2 * c)).unwrap();
        let out = aggregate(&mut g, q3d, q2d, &[false, false], &m, &gp, &mp, 2).unwrap();
        // 3D query 1 owns nothing: its fused row is exactly zero
        assert_eq!(&g.values(out.fused)[c..2 * c], &vec![0.0; c][..]);
        assert_eq!(out.aux_head_input, out.q3d_agg);
    }
}
