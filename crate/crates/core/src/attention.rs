//! Camera-grouped self-attention, per-camera deformable cross-attention over
//! feature maps, and cross-attention against propagated history queries.
//! Pre-norm layout throughout: out = x + Attn(LN(x)).

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Graph, TensorId};

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    /// Deformable sample points per query.
    pub points: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.points == 0 {
            return Err(Error::Config("deformable points must be >= 1".into()));
        }
        Ok(())
    }
}

/// M x M additive attention mask: 0 where two queries share a camera group,
/// -inf elsewhere.
#[derive(Clone, Debug)]
pub struct GroupMask<R: Real = f64> {
    pub m: usize,
    pub values: Vec<R>,
}

impl<R: Real> GroupMask<R> {
    pub fn from_group_sizes(group_sizes: &[usize]) -> Self {
        let m: usize = group_sizes.iter().sum();
        let mut values = vec![R::neg_infinity(); m * m];
        let mut start = 0;
        for &sz in group_sizes {
            for i in start..start + sz {
                for j in start..start + sz {
                    values[i * m + j] = R::zero();
                }
            }
            start += sz;
        }
        GroupMask { m, values }
    }
}

/// Shared parameter bundle for one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub ln_gamma: TensorId,
    pub ln_beta: TensorId,
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
}

/// Multi-head attention core (no norm, no residual). `mask`, when present,
/// is additive over the `[rows(q), rows(kv)]` logits and applied to every
/// head. Per-head logits are scaled by 1/sqrt(head_dim).
pub fn mha<R: Real>(
    g: &mut Graph<R>,
    q_in: TensorId,
    kv_in: TensorId,
    p: &MhaParams,
    heads: usize,
    mask: Option<&[R]>,
) -> Result<TensorId> {
    let c = g.shape(q_in)[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("dim {c} not divisible by {heads} heads")));
    }
    let dh = c / heads;
    let q = g.linear(q_in, p.wq, p.bq)?;
    let k = g.linear(kv_in, p.wk, p.bk)?;
    let v = g.linear(kv_in, p.wv, p.bv)?;
    let scale = R::one() / R::c(dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose2d(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.mul_scalar(logits, scale);
        let attn = g.masked_softmax(logits, mask)?;
        head_outs.push(g.matmul(attn, vh)?);
    }
    let x = g.concat_cols(&head_outs)?;
    g.linear(x, p.wo, p.bo)
}

/// Masked self-attention over the 2D queries: only queries in the same
/// camera group attend to each other.
pub fn group_self_attention<R: Real>(
    g: &mut Graph<R>,
    q2d: TensorId,
    mask: &GroupMask<R>,
    p: &MhaParams,
    heads: usize,
) -> Result<TensorId> {
    if g.shape(q2d)[0] != mask.m {
        return Err(Error::Usage(format!(
            "group mask for {} queries applied to {} rows",
            mask.m,
            g.shape(q2d)[0]
        )));
    }
    let h = g.layer_norm(q2d, p.ln_gamma, p.ln_beta)?;
    let a = mha(g, h, h, p, heads, Some(&mask.values))?;
    g.add(q2d, a)
}

/// Parameter bundle for one deformable cross-attention block. The offset
/// layer (`w_off`, `b_off`) is expected to be zero-initialized so sampling
/// starts at the reference points.
#[derive(Clone, Copy, Debug)]
pub struct DeformParams {
    pub ln_gamma: TensorId,
    pub ln_beta: TensorId,
    /// `[C, 2P]` pixel offsets per sample point.
    pub w_off: TensorId,
    pub b_off: TensorId,
    /// `[C, P]` sample-weight logits.
    pub w_wgt: TensorId,
    pub b_wgt: TensorId,
    pub w_val: TensorId,
    pub b_val: TensorId,
    pub w_out: TensorId,
    pub b_out: TensorId,
}

/// Single-scale deformable cross-attention. Each query predicts `points`
/// pixel offsets around its reference point, samples its own camera's
/// feature map bilinearly, and combines the value-projected samples by
/// softmaxed weights. `featmaps[v]` is `[H, W, C]`; `stride` converts pixel
/// coordinates to feature-map cells (pixel u maps to cell u/stride - 0.5).
/// Rows of `q2d` are camera-major per `group_sizes`.
pub fn group_cross_attention<R: Real>(
    g: &mut Graph<R>,
    q2d: TensorId,
    reference_points: &[(R, R)],
    featmaps: &[TensorId],
    group_sizes: &[usize],
    stride: R,
    p: &DeformParams,
    points: usize,
) -> Result<TensorId> {
    let m = g.shape(q2d)[0];
    if reference_points.len() != m || group_sizes.iter().sum::<usize>() != m {
        return Err(Error::Usage(format!(
            "{m} queries with {} reference points, group sizes {group_sizes:?}",
            reference_points.len()
        )));
    }
    if featmaps.len() < group_sizes.len() {
        return Err(Error::Usage(format!(
            "{} feature maps for {} camera groups",
            featmaps.len(),
            group_sizes.len()
        )));
    }
    let h = g.layer_norm(q2d, p.ln_gamma, p.ln_beta)?;
    let offsets = g.linear(h, p.w_off, p.b_off)?;
    let wlogits = g.linear(h, p.w_wgt, p.b_wgt)?;
    let weights = g.masked_softmax(wlogits, None)?;

    let mut cam_outs = Vec::with_capacity(group_sizes.len());
    let mut start = 0;
    for (v, &sz) in group_sizes.iter().enumerate() {
        if sz == 0 {
            start += sz;
            continue;
        }
        let rows: Vec<usize> = (start..start + sz).collect();
        // [sz, 2P] -> [sz*P, 2] pixel offsets, plus the constant references
        let off = g.gather_rows(offsets, &rows)?;
        let off = g.reshape(off, &[sz * points, 2])?;
        let mut refs = Vec::with_capacity(sz * points * 2);
        for &j in &rows {
            for _ in 0..points {
                refs.push(reference_points[j].0);
                refs.push(reference_points[j].1);
            }
        }
        let refs = g.leaf(&[sz * points, 2], refs)?;
        let px = g.add(off, refs)?;
        let cells = g.mul_scalar(px, R::one() / stride);
        let cells = g.add_scalar(cells, R::c(-0.5));
        let sampled = g.bilinear_sample(featmaps[v], cells)?;
        let val = g.linear(sampled, p.w_val, p.b_val)?;
        // weight each of the P samples, then sum them per query
        let w = g.gather_rows(weights, &rows)?;
        let w = g.reshape(w, &[sz * points, 1])?;
        let weighted = g.scale_rows(val, w)?;
        let owners: Vec<usize> = (0..sz * points).map(|i| i / points).collect();
        cam_outs.push(g.group_sum_rows(weighted, &owners, sz)?);
        start += sz;
    }
    let x = if cam_outs.len() == 1 {
        cam_outs[0]
    } else {
        g.concat_rows(&cam_outs)?
    };
    let out = g.linear(x, p.w_out, p.b_out)?;
    g.add(q2d, out)
}

/// Unmasked cross-attention of current queries over propagated history
/// queries. Empty memory (first frame) is the identity.
pub fn temporal_cross_attention<R: Real>(
    g: &mut Graph<R>,
    q: TensorId,
    memory: Option<TensorId>,
    p: &MhaParams,
    heads: usize,
) -> Result<TensorId> {
    let mem = match memory {
        Some(m) if g.shape(m)[0] > 0 => m,
        _ => return Ok(q),
    };
    let h = g.layer_norm(q, p.ln_gamma, p.ln_beta)?;
    let a = mha(g, h, mem, p, heads, None)?;
    g.add(q, a)
}
