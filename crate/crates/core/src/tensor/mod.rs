//! Dense tensors on a reverse-mode tape.
//!
//! A [`Graph`] records one forward pass. Every operation appends a node
//! holding the forward value and enough metadata to replay its vector-Jacobian
//! product during [`Graph::backward`], which walks the tape in exact reverse
//! recording order. Desk-scale sizes only: plain `Vec` storage, row-major,
//! no broadcasting beyond equal leading batch dimensions.

mod fd;

pub use fd::finite_diff_check;

use crate::error::{Error, Result};
use crate::real::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle into a [`Graph`]'s tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op<R: Real> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Maximum(TensorId, TensorId),
    Minimum(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, R),
    Abs(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Exp(TensorId),
    Ln(TensorId),
    PowConst(TensorId, R),
    Matmul(TensorId, TensorId),
    Transpose2d(TensorId),
    Reshape(TensorId),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: TensorId,
        idx: Vec<usize>,
    },
    GroupReduceRows {
        x: TensorId,
        owners: Vec<usize>,
        counts: Vec<usize>,
        mean: bool,
    },
    ScaleRows {
        x: TensorId,
        s: TensorId,
    },
    AddRow {
        x: TensorId,
        b: TensorId,
    },
    // the mask is folded into the stored outputs; backward only needs y
    MaskedSoftmax {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    BilinearSample {
        fmap: TensorId,
        points: TensorId,
    },
    SumAll(TensorId),
}

#[derive(Debug)]
struct Node<R: Real> {
    shape: Vec<usize>,
    values: Vec<R>,
    grad: Option<Vec<R>>,
    requires_grad: bool,
    op: Op<R>,
    /// Index into an external parameter store, for leaves that are parameters.
    param: Option<usize>,
}

/// One forward/backward tape. Single-threaded; build a fresh graph per pass.
#[derive(Debug, Default)]
pub struct Graph<R: Real = f64> {
    nodes: Vec<Node<R>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<R>, requires_grad: bool, op: Op<R>) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
            param: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: TensorId) -> &[R] {
        &self.nodes[t.0].values
    }

    pub fn grad(&self, t: TensorId) -> Option<&[R]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn scalar(&self, t: TensorId) -> R {
        debug_assert_eq!(self.nodes[t.0].values.len(), 1);
        self.nodes[t.0].values[0]
    }

    pub fn param_index(&self, t: TensorId) -> Option<usize> {
        self.nodes[t.0].param
    }

    /// Iterate over (param store index, gradient) pairs after backward.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[R])> {
        self.nodes
            .iter()
            .filter_map(|n| match (n.param, n.grad.as_deref()) {
                (Some(p), Some(g)) => Some((p, g)),
                _ => None,
            })
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, shape: &[usize], values: Vec<R>) -> Result<TensorId> {
        if numel(shape) != values.len() {
            return Err(Error::Usage(format!(
                "leaf: shape {:?} does not hold {} values",
                shape,
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values, false, Op::Leaf))
    }

    pub fn leaf_grad(&mut self, shape: &[usize], values: Vec<R>) -> Result<TensorId> {
        let t = self.leaf(shape, values)?;
        self.nodes[t.0].requires_grad = true;
        Ok(t)
    }

    /// Leaf tied to an external parameter store entry.
    pub fn param_leaf(&mut self, shape: &[usize], values: Vec<R>, store_index: usize) -> Result<TensorId> {
        let t = self.leaf_grad(shape, values)?;
        self.nodes[t.0].param = Some(store_index);
        Ok(t)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        self.push(shape.to_vec(), vec![R::zero(); numel(shape)], false, Op::Leaf)
    }

    pub fn full(&mut self, shape: &[usize], v: R) -> TensorId {
        self.push(shape.to_vec(), vec![v; numel(shape)], false, Op::Leaf)
    }

    // ---- elementwise --------------------------------------------------

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let vals: Vec<R> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let vals: Vec<R> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let vals: Vec<R> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("div", a, b)?;
        let vals: Vec<R> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x / y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::Div(a, b)))
    }

    /// Elementwise max; subgradient routes to `a` on ties.
    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("maximum", a, b)?;
        let vals: Vec<R> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::Maximum(a, b)))
    }

    /// Elementwise min; subgradient routes to `a` on ties.
    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("minimum", a, b)?;
        let vals: Vec<R> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::Minimum(a, b)))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: R) -> TensorId {
        let vals: Vec<R> = self.nodes[a.0].values.iter().map(|&x| x + c).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: R) -> TensorId {
        let vals: Vec<R> = self.nodes[a.0].values.iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.mul_scalar(a, -R::one())
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let vals: Vec<R> = self.nodes[a.0].values.iter().map(|&x| x.abs()).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::Abs(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let vals: Vec<R> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| if x > R::zero() { x } else { R::zero() })
            .collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let vals: Vec<R> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| R::one() / (R::one() + (-x).exp()))
            .collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let vals: Vec<R> = self.nodes[a.0].values.iter().map(|&x| x.exp()).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::Exp(a))
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let vals: Vec<R> = self.nodes[a.0].values.iter().map(|&x| x.ln()).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::Ln(a))
    }

    pub fn pow_const(&mut self, a: TensorId, p: R) -> TensorId {
        let vals: Vec<R> = self.nodes[a.0].values.iter().map(|&x| x.powf(p)).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), vals, rg, Op::PowConst(a, p))
    }

    // ---- structural ---------------------------------------------------

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.nodes[a.0].values.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let vals = self.nodes[a.0].values.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), vals, rg, Op::Reshape(a)))
    }

    pub fn transpose2d(&mut self, a: TensorId) -> Result<TensorId> {
        let sh = self.nodes[a.0].shape.clone();
        if sh.len() != 2 {
            return Err(Error::Usage(format!("transpose2d on shape {sh:?}")));
        }
        let (r, c) = (sh[0], sh[1]);
        let src = &self.nodes[a.0].values;
        let mut vals = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                vals[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], vals, rg, Op::Transpose2d(a)))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of zero tensors".into()));
        }
        let cols = self.nodes[parts[0].0].shape[1];
        let mut rows = 0;
        let mut vals = Vec::new();
        let mut rg = false;
        for &p in parts {
            let sh = &self.nodes[p.0].shape;
            if sh.len() != 2 || sh[1] != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: sh.clone(),
                });
            }
            rows += sh[0];
            vals.extend_from_slice(&self.nodes[p.0].values);
            rg |= self.rg(p);
        }
        Ok(self.push(vec![rows, cols], vals, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero tensors".into()));
        }
        let rows = self.nodes[parts[0].0].shape[0];
        let mut cols = 0;
        let mut rg = false;
        for &p in parts {
            let sh = &self.nodes[p.0].shape;
            if sh.len() != 2 || sh[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: sh.clone(),
                });
            }
            cols += sh[1];
            rg |= self.rg(p);
        }
        let mut vals = vec![R::zero(); rows * cols];
        let mut off = 0;
        for &p in parts {
            let w = self.nodes[p.0].shape[1];
            for i in 0..rows {
                for j in 0..w {
                    vals[i * cols + off + j] = self.nodes[p.0].values[i * w + j];
                }
            }
            off += w;
        }
        Ok(self.push(vec![rows, cols], vals, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sh = self.nodes[a.0].shape.clone();
        if sh.len() != 2 || start + len > sh[1] {
            return Err(Error::Usage(format!(
                "slice_cols [{start}, {start}+{len}) out of shape {sh:?}"
            )));
        }
        let (rows, cols) = (sh[0], sh[1]);
        let mut vals = Vec::with_capacity(rows * len);
        for i in 0..rows {
            vals.extend_from_slice(&self.nodes[a.0].values[i * cols + start..i * cols + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![rows, len], vals, rg, Op::SliceCols { x: a, start, len }))
    }

    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let sh = self.nodes[a.0].shape.clone();
        if sh.len() != 2 {
            return Err(Error::Usage(format!("gather_rows on shape {sh:?}")));
        }
        let (rows, cols) = (sh[0], sh[1]);
        let mut vals = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Usage(format!("gather_rows index {i} out of {rows} rows")));
            }
            vals.extend_from_slice(&self.nodes[a.0].values[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            vec![idx.len(), cols],
            vals,
            rg,
            Op::GatherRows { x: a, idx: idx.to_vec() },
        ))
    }

    fn group_reduce_rows(&mut self, a: TensorId, owners: &[usize], n: usize, mean: bool) -> Result<TensorId> {
        let sh = self.nodes[a.0].shape.clone();
        if sh.len() != 2 || sh[0] != owners.len() {
            return Err(Error::Usage(format!(
                "group reduce: {} owners for shape {sh:?}",
                owners.len()
            )));
        }
        let cols = sh[1];
        let mut counts = vec![0usize; n];
        for &o in owners {
            if o >= n {
                return Err(Error::Usage(format!("owner {o} out of {n} groups")));
            }
            counts[o] += 1;
        }
        let mut vals = vec![R::zero(); n * cols];
        for (j, &o) in owners.iter().enumerate() {
            for c in 0..cols {
                vals[o * cols + c] += self.nodes[a.0].values[j * cols + c];
            }
        }
        if mean {
            for (o, &cnt) in counts.iter().enumerate() {
                if cnt > 1 {
                    let inv = R::one() / R::c(cnt as f64);
                    for c in 0..cols {
                        vals[o * cols + c] *= inv;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            vec![n, cols],
            vals,
            rg,
            Op::GroupReduceRows {
                x: a,
                owners: owners.to_vec(),
                counts,
                mean,
            },
        ))
    }

    /// Row `i` of the result is the sum of rows `j` of `a` with `owners[j] == i`.
    pub fn group_sum_rows(&mut self, a: TensorId, owners: &[usize], n: usize) -> Result<TensorId> {
        self.group_reduce_rows(a, owners, n, false)
    }

    /// Row `i` of the result is the mean of rows `j` of `a` with `owners[j] == i`;
    /// groups with no members yield a zero row.
    pub fn group_mean_rows(&mut self, a: TensorId, owners: &[usize], n: usize) -> Result<TensorId> {
        self.group_reduce_rows(a, owners, n, true)
    }

    /// Multiply row `i` of `a` by scalar `s[i]`.
    pub fn scale_rows(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let sh = self.nodes[a.0].shape.clone();
        if sh.len() != 2 || self.nodes[s.0].values.len() != sh[0] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: sh,
                rhs: self.nodes[s.0].shape.clone(),
            });
        }
        let cols = sh[1];
        let mut vals = Vec::with_capacity(sh[0] * cols);
        for i in 0..sh[0] {
            let f = self.nodes[s.0].values[i];
            for c in 0..cols {
                vals.push(self.nodes[a.0].values[i * cols + c] * f);
            }
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(sh, vals, rg, Op::ScaleRows { x: a, s }))
    }

    /// Broadcast-add a `[d]` row vector to every row of `[.., d]`.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sh = self.nodes[a.0].shape.clone();
        let d = *sh.last().ok_or_else(|| Error::Usage("add_row on scalar".into()))?;
        if self.nodes[b.0].values.len() != d {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sh,
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let rows = self.nodes[a.0].values.len() / d;
        let mut vals = Vec::with_capacity(rows * d);
        for i in 0..rows {
            for c in 0..d {
                vals.push(self.nodes[a.0].values[i * d + c] + self.nodes[b.0].values[c]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sh, vals, rg, Op::AddRow { x: a, b }))
    }

    // ---- linear algebra -----------------------------------------------

    /// Matrix product. Supports `[p,q] x [q,r]` and equal-batch `[b,p,q] x [b,q,r]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let (batch, p, q, r) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
                }
                (1, sa[0], sa[1], sb[1])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
                }
                (sa[0], sa[1], sa[2], sb[2])
            }
            _ => return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb }),
        };
        let mut vals = vec![R::zero(); batch * p * r];
        for bi in 0..batch {
            let av = &self.nodes[a.0].values[bi * p * q..(bi + 1) * p * q];
            let bv = &self.nodes[b.0].values[bi * q * r..(bi + 1) * q * r];
            let cv = &mut vals[bi * p * r..(bi + 1) * p * r];
            matmul_into(av, bv, cv, p, q, r);
        }
        let out_shape = if sa.len() == 2 { vec![p, r] } else { vec![batch, p, r] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, vals, rg, Op::Matmul(a, b)))
    }

    /// `x W + b` with gradient support for all three inputs.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Softmax over the last dimension with an optional additive `{0, -inf}` mask.
    /// A fully masked row is a contract violation.
    pub fn masked_softmax(&mut self, a: TensorId, mask: Option<&[R]>) -> Result<TensorId> {
        let sh = self.nodes[a.0].shape.clone();
        let d = *sh.last().ok_or_else(|| Error::Usage("softmax on scalar".into()))?;
        let total = self.nodes[a.0].values.len();
        let mask_vec: Vec<R> = match mask {
            Some(m) => {
                if m.len() != total {
                    return Err(Error::ShapeMismatch {
                        op: "masked_softmax",
                        lhs: sh,
                        rhs: vec![m.len()],
                    });
                }
                m.to_vec()
            }
            None => Vec::new(),
        };
        let rows = total / d;
        let mut vals = vec![R::zero(); total];
        for i in 0..rows {
            let row = &self.nodes[a.0].values[i * d..(i + 1) * d];
            // max over unmasked entries for stabilization
            let mut mx = R::neg_infinity();
            for j in 0..d {
                let m = if mask_vec.is_empty() { R::zero() } else { mask_vec[i * d + j] };
                if m.is_finite() && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == R::neg_infinity() {
                return Err(Error::Config(format!("masked_softmax: fully masked row {i}")));
            }
            let mut sum = R::zero();
            for j in 0..d {
                let m = if mask_vec.is_empty() { R::zero() } else { mask_vec[i * d + j] };
                let e = if m.is_finite() { (row[j] - mx).exp() } else { R::zero() };
                vals[i * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                vals[i * d + j] /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(sh, vals, rg, Op::MaskedSoftmax { x: a }))
    }

    /// Layer normalization over the last dimension with learned scale and shift.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let sh = self.nodes[x.0].shape.clone();
        let d = *sh.last().ok_or_else(|| Error::Usage("layer_norm on scalar".into()))?;
        if self.nodes[gamma.0].values.len() != d || self.nodes[beta.0].values.len() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: sh,
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let eps = R::c(LAYER_NORM_EPS);
        let rows = self.nodes[x.0].values.len() / d;
        let mut vals = vec![R::zero(); rows * d];
        let inv_d = R::one() / R::c(d as f64);
        for i in 0..rows {
            let row = &self.nodes[x.0].values[i * d..(i + 1) * d];
            let mean: R = row.iter().copied().sum::<R>() * inv_d;
            let var: R = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
            let inv_std = R::one() / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                vals[i * d + j] = self.nodes[gamma.0].values[j] * xhat + self.nodes[beta.0].values[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(sh, vals, rg, Op::LayerNorm { x, gamma, beta }))
    }

    /// Bilinearly sample `fmap [H,W,C]` at `points [P,2]` (u along width, v along
    /// height, in cell units). Samples outside `[0,W-1] x [0,H-1]` read zeros.
    pub fn bilinear_sample(&mut self, fmap: TensorId, points: TensorId) -> Result<TensorId> {
        let fsh = self.nodes[fmap.0].shape.clone();
        let psh = self.nodes[points.0].shape.clone();
        if fsh.len() != 3 {
            return Err(Error::Usage(format!("bilinear_sample featmap shape {fsh:?}")));
        }
        if psh.len() != 2 || psh[1] != 2 {
            return Err(Error::Usage(format!("bilinear_sample points shape {psh:?}")));
        }
        let (h, w, c) = (fsh[0], fsh[1], fsh[2]);
        let np = psh[0];
        let mut vals = vec![R::zero(); np * c];
        for p in 0..np {
            let u = self.nodes[points.0].values[p * 2];
            let v = self.nodes[points.0].values[p * 2 + 1];
            if !u.is_finite() || !v.is_finite() {
                return Err(Error::Usage(format!("bilinear_sample: non-finite point {p}")));
            }
            for (xi, yi, wgt) in bilinear_corners(u, v, w, h) {
                let base = (yi * w + xi) * c;
                for ch in 0..c {
                    vals[p * c + ch] += self.nodes[fmap.0].values[base + ch] * wgt;
                }
            }
        }
        let rg = self.rg(fmap) || self.rg(points);
        Ok(self.push(vec![np, c], vals, rg, Op::BilinearSample { fmap, points }))
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: R = self.nodes[a.0].values.iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].values.len().max(1);
        let s = self.sum_all(a);
        self.mul_scalar(s, R::one() / R::c(n as f64))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor reachable from it.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].values[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<R>>], t: TensorId, add: impl FnOnce(&mut [R])) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        let slot = grads[t.0].get_or_insert_with(|| vec![R::zero(); self.nodes[t.0].values.len()]);
        add(slot);
    }

    fn backprop_node(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(grads, a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * self.nodes[b.0].values[k];
                    }
                });
                self.accum(grads, b, |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * self.nodes[a.0].values[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(grads, a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / self.nodes[b.0].values[k];
                    }
                });
                self.accum(grads, b, |gb| {
                    for k in 0..g.len() {
                        let bv = self.nodes[b.0].values[k];
                        gb[k] -= g[k] * self.nodes[a.0].values[k] / (bv * bv);
                    }
                });
            }
            Op::Maximum(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(grads, a, |ga| {
                    for k in 0..g.len() {
                        if self.nodes[a.0].values[k] >= self.nodes[b.0].values[k] {
                            ga[k] += g[k];
                        }
                    }
                });
                self.accum(grads, b, |gb| {
                    for k in 0..g.len() {
                        if self.nodes[a.0].values[k] < self.nodes[b.0].values[k] {
                            gb[k] += g[k];
                        }
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(grads, a, |ga| {
                    for k in 0..g.len() {
                        if self.nodes[a.0].values[k] <= self.nodes[b.0].values[k] {
                            ga[k] += g[k];
                        }
                    }
                });
                self.accum(grads, b, |gb| {
                    for k in 0..g.len() {
                        if self.nodes[a.0].values[k] > self.nodes[b.0].values[k] {
                            gb[k] += g[k];
                        }
                    }
                });
            }
            Op::AddScalar(a) => {
                self.accum(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accum(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y * c;
                    }
                });
            }
            Op::Abs(a) => {
                let a = *a;
                self.accum(grads, a, |ga| {
                    for k in 0..g.len() {
                        let x = self.nodes[a.0].values[k];
                        let s = if x > R::zero() {
                            R::one()
                        } else if x < R::zero() {
                            -R::one()
                        } else {
                            R::zero()
                        };
                        ga[k] += g[k] * s;
                    }
                });
            }
            Op::Relu(a) => {
                let a = *a;
                self.accum(grads, a, |ga| {
                    for k in 0..g.len() {
                        if self.nodes[a.0].values[k] > R::zero() {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accum(grads, *a, |ga| {
                    for k in 0..g.len() {
                        let y = node.values[k];
                        ga[k] += g[k] * y * (R::one() - y);
                    }
                });
            }
            Op::Exp(a) => {
                self.accum(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * node.values[k];
                    }
                });
            }
            Op::Ln(a) => {
                let a = *a;
                self.accum(grads, a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / self.nodes[a.0].values[k];
                    }
                });
            }
            Op::PowConst(a, p) => {
                let (a, p) = (*a, *p);
                self.accum(grads, a, |ga| {
                    for k in 0..g.len() {
                        let x = self.nodes[a.0].values[k];
                        ga[k] += g[k] * p * x.powf(p - R::one());
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = &self.nodes[a.0].shape;
                let (batch, p, q) = if sa.len() == 2 { (1, sa[0], sa[1]) } else { (sa[0], sa[1], sa[2]) };
                let r = *self.nodes[b.0].shape.last().unwrap();
                // dA = dC B^T, dB = A^T dC, per batch
                self.accum(grads, a, |ga| {
                    for bi in 0..batch {
                        let gc = &g[bi * p * r..(bi + 1) * p * r];
                        let bv = &self.nodes[b.0].values[bi * q * r..(bi + 1) * q * r];
                        let gout = &mut ga[bi * p * q..(bi + 1) * p * q];
                        for ii in 0..p {
                            for kk in 0..r {
                                let gv = gc[ii * r + kk];
                                if gv == R::zero() {
                                    continue;
                                }
                                for jj in 0..q {
                                    gout[ii * q + jj] += gv * bv[jj * r + kk];
                                }
                            }
                        }
                    }
                });
                self.accum(grads, b, |gb| {
                    for bi in 0..batch {
                        let gc = &g[bi * p * r..(bi + 1) * p * r];
                        let av = &self.nodes[a.0].values[bi * p * q..(bi + 1) * p * q];
                        let gout = &mut gb[bi * q * r..(bi + 1) * q * r];
                        for ii in 0..p {
                            for jj in 0..q {
                                let avv = av[ii * q + jj];
                                if avv == R::zero() {
                                    continue;
                                }
                                for kk in 0..r {
                                    gout[jj * r + kk] += avv * gc[ii * r + kk];
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose2d(a) => {
                let a = *a;
                let (c, r) = (node.shape[0], node.shape[1]); // output is [c, r]
                self.accum(grads, a, |ga| {
                    for i in 0..c {
                        for j in 0..r {
                            ga[j * c + i] += g[i * r + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].values.len();
                    self.accum(grads, p, |gp| {
                        for k in 0..len {
                            gp[k] += g[off + k];
                        }
                    });
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let cols = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    self.accum(grads, p, |gp| {
                        for i in 0..rows {
                            for j in 0..w {
                                gp[i * w + j] += g[i * cols + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let rows = node.shape[0];
                let src_cols = self.nodes[x.0].shape[1];
                self.accum(grads, x, |gx| {
                    for i in 0..rows {
                        for j in 0..len {
                            gx[i * src_cols + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let cols = node.shape[1];
                self.accum(grads, *x, |gx| {
                    for (j, &src) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gx[src * cols + c] += g[j * cols + c];
                        }
                    }
                });
            }
            Op::GroupReduceRows { x, owners, counts, mean } => {
                let cols = node.shape[1];
                self.accum(grads, *x, |gx| {
                    for (j, &o) in owners.iter().enumerate() {
                        let scale = if *mean {
                            R::one() / R::c(counts[o] as f64)
                        } else {
                            R::one()
                        };
                        for c in 0..cols {
                            gx[j * cols + c] += g[o * cols + c] * scale;
                        }
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let (x, s) = (*x, *s);
                let rows = node.shape[0];
                let cols = node.shape[1];
                self.accum(grads, x, |gx| {
                    for i in 0..rows {
                        let f = self.nodes[s.0].values[i];
                        for c in 0..cols {
                            gx[i * cols + c] += g[i * cols + c] * f;
                        }
                    }
                });
                self.accum(grads, s, |gs| {
                    for i in 0..rows {
                        let mut acc = R::zero();
                        for c in 0..cols {
                            acc += g[i * cols + c] * self.nodes[x.0].values[i * cols + c];
                        }
                        gs[i] += acc;
                    }
                });
            }
            Op::AddRow { x, b } => {
                let d = *node.shape.last().unwrap();
                let rows = node.values.len() / d;
                self.accum(grads, *x, |gx| {
                    for (xk, &gk) in gx.iter_mut().zip(g) {
                        *xk += gk;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for i in 0..rows {
                        for c in 0..d {
                            gb[c] += g[i * d + c];
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, .. } => {
                // dx_j = y_j (g_j - sum_k g_k y_k), per row; masked y are 0
                let d = *node.shape.last().unwrap();
                let rows = node.values.len() / d;
                self.accum(grads, *x, |gx| {
                    for i in 0..rows {
                        let y = &node.values[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let dot: R = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx[i * d + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = *node.shape.last().unwrap();
                let rows = node.values.len() / d;
                let eps = R::c(LAYER_NORM_EPS);
                let inv_d = R::one() / R::c(d as f64);
                // recompute per-row stats
                let mut xhat = vec![R::zero(); rows * d];
                let mut inv_std = vec![R::zero(); rows];
                for i in 0..rows {
                    let row = &self.nodes[x.0].values[i * d..(i + 1) * d];
                    let mean: R = row.iter().copied().sum::<R>() * inv_d;
                    let var: R = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
                    inv_std[i] = R::one() / (var + eps).sqrt();
                    for j in 0..d {
                        xhat[i * d + j] = (row[j] - mean) * inv_std[i];
                    }
                }
                self.accum(grads, x, |gx| {
                    for i in 0..rows {
                        let gr = &g[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut sum_dxhat = R::zero();
                        let mut sum_dxhat_xhat = R::zero();
                        for j in 0..d {
                            let dxh = gr[j] * self.nodes[gamma.0].values[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh[j];
                        }
                        for j in 0..d {
                            let dxh = gr[j] * self.nodes[gamma.0].values[j];
                            gx[i * d + j] +=
                                inv_std[i] * (dxh - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat);
                        }
                    }
                });
                self.accum(grads, gamma, |gg| {
                    for i in 0..rows {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                self.accum(grads, beta, |gb| {
                    for i in 0..rows {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::BilinearSample { fmap, points } => {
                let (fmap, points) = (*fmap, *points);
                let fsh = &self.nodes[fmap.0].shape;
                let (h, w, c) = (fsh[0], fsh[1], fsh[2]);
                let np = node.shape[0];
                self.accum(grads, fmap, |gf| {
                    for p in 0..np {
                        let u = self.nodes[points.0].values[p * 2];
                        let v = self.nodes[points.0].values[p * 2 + 1];
                        for (xi, yi, wgt) in bilinear_corners(u, v, w, h) {
                            let base = (yi * w + xi) * c;
                            for ch in 0..c {
                                gf[base + ch] += g[p * c + ch] * wgt;
                            }
                        }
                    }
                });
                self.accum(grads, points, |gp| {
                    for p in 0..np {
                        let u = self.nodes[points.0].values[p * 2];
                        let v = self.nodes[points.0].values[p * 2 + 1];
                        for (xi, yi, dwu, dwv) in bilinear_corner_derivs(u, v, w, h) {
                            let base = (yi * w + xi) * c;
                            let mut dot = R::zero();
                            for ch in 0..c {
                                dot += g[p * c + ch] * self.nodes[fmap.0].values[base + ch];
                            }
                            gp[p * 2] += dot * dwu;
                            gp[p * 2 + 1] += dot * dwv;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                self.accum(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                });
            }
        }
    }
}

fn matmul_into<R: Real>(a: &[R], b: &[R], c: &mut [R], p: usize, q: usize, r: usize) {
    for i in 0..p {
        for k in 0..q {
            let av = a[i * q + k];
            if av == R::zero() {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            let crow = &mut c[i * r..(i + 1) * r];
            for j in 0..r {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// The up-to-four in-bounds corners around `(u, v)` with their bilinear weights.
fn bilinear_corners<R: Real>(u: R, v: R, w: usize, h: usize) -> Vec<(usize, usize, R)> {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let mut out = Vec::with_capacity(4);
    for (dx, dy, wgt) in [
        (0i64, 0i64, (R::one() - fx) * (R::one() - fy)),
        (1, 0, fx * (R::one() - fy)),
        (0, 1, (R::one() - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let xi = x0.as_f64() as i64 + dx;
        let yi = y0.as_f64() as i64 + dy;
        if xi >= 0 && (xi as usize) < w && yi >= 0 && (yi as usize) < h {
            out.push((xi as usize, yi as usize, wgt));
        }
    }
    out
}

/// Corner weight derivatives with respect to `u` and `v`.
fn bilinear_corner_derivs<R: Real>(u: R, v: R, w: usize, h: usize) -> Vec<(usize, usize, R, R)> {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let one = R::one();
    let mut out = Vec::with_capacity(4);
    for (dx, dy, dwu, dwv) in [
        (0i64, 0i64, -(one - fy), -(one - fx)),
        (1, 0, one - fy, -fx),
        (0, 1, -fy, one - fx),
        (1, 1, fy, fx),
    ] {
        let xi = x0.as_f64() as i64 + dx;
        let yi = y0.as_f64() as i64 + dy;
        if xi >= 0 && (xi as usize) < w && yi >= 0 && (yi as usize) < h {
            out.push((xi as usize, yi as usize, dwu, dwv));
        }
    }
    out
}
