//! Operation tape for reverse-mode differentiation.
//!
//! Every forward op validates shapes, computes its value eagerly, and pushes
//! one node. [`Tape::backward`] walks the nodes in reverse, accumulating
//! vector-Jacobian products into per-node gradient buffers, and returns the
//! gradients of all `requires_grad` leaves. A tape can be backwarded once
//! per recording.
//!
//! Debug builds assert that every node value is finite; release builds only
//! check the final loss inside `backward`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::contract::ContractPlan;
use crate::tensor::kernels::conv::{self, SpatialShape, TemporalShape};
use crate::tensor::kernels::linear as lin;
use crate::tensor::kernels::norm::{self, GroupNormShape};
use crate::tensor::kernels::rnnt::{self, LatticeDims};
use crate::tensor::kernels::softmax as sm;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    SumAll(usize),
    Reshape(usize),
    ConcatLast(usize, usize),
    SliceLast { x: usize, start: usize },
    StackRows(Vec<usize>),
    Contract { a: usize, b: usize, plan: Box<ContractPlan> },
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Linear { x: usize, w: usize, b: Option<usize>, k: usize, n: usize },
    OuterSum { a: usize, b: usize },
    Embed { table: usize, ids: Vec<usize> },
    ConvSpatial { x: usize, w: usize, b: Option<usize>, shape: SpatialShape },
    ConvTemporal { x: usize, w: usize, b: Option<usize>, shape: TemporalShape },
    MaxPool2 { x: usize, arg: Vec<usize> },
    GroupNorm { x: usize, gamma: usize, beta: usize, shape: GroupNormShape, means: Vec<T>, invstds: Vec<T> },
    LayerNorm { x: usize, gamma: usize, beta: usize, d: usize, means: Vec<T>, invstds: Vec<T> },
    AsdLoss { alpha: usize, valid: Vec<usize>, denom: usize },
    RnntLoss { lattice: usize, targets: Vec<Vec<usize>>, t_valid: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    grad_leaf: bool,
}

/// Gradient map keyed by leaf identity, as returned by [`Tape::backward`].
pub struct Gradients<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v.0)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current node count, for later truncation.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop nodes recorded after `mark` and allow a fresh backward pass.
    /// Used to reuse bound parameter leaves across many no-grad forwards.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.consumed = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::from_f64(value)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, grad_leaf: bool) -> Var {
        #[cfg(debug_assertions)]
        {
            if !matches!(op, Op::Leaf) {
                debug_assert!(
                    value.all_finite(),
                    "non-finite value out of {} (node {})",
                    op_name(&op),
                    self.nodes.len()
                );
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, needs_grad, grad_leaf });
        Var(id)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a.0, b.0), needs, false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a.0, b.0), needs, false))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a.0, b.0), needs, false))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(t, Op::Scale(x.0, c), needs, false)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v + c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(t, Op::AddScalar(x.0), needs, false)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(t, Op::Relu(x.0), needs, false)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(t, Op::Tanh(x.0), needs, false)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(t, Op::Sigmoid(x.0), needs, false)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(acc), Op::SumAll(x.0), needs, false)
    }

    // ---- shape ops ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x.0), needs, false))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape(format!(
                "concat_last: leading dims of {sa:?} and {sb:?} must match"
            )));
        }
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = da + db;
        let rows = self.value(a).numel() / da;
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(&self.value(a).data()[r * da..(r + 1) * da]);
            data.extend_from_slice(&self.value(b).data()[r * db..(r + 1) * db]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::ConcatLast(a.0, b.0), needs, false))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::Shape("slice_last on rank-0 tensor".into()));
        }
        let d = s[s.len() - 1];
        if start + len > d {
            return Err(Error::Shape(format!(
                "slice_last [{start}, {}) exceeds last dim {d}",
                start + len
            )));
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let rows = self.value(x).numel() / d;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.value(x).data()[r * d + start..r * d + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::SliceLast { x: x.0, start }, needs, false))
    }

    /// Stack rank-2 parts, each [R, J], into [R, P, J] along a new middle axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("stack_rows of zero parts".into()));
        }
        let s0 = self.shape(parts[0]).to_vec();
        if s0.len() != 2 {
            return Err(Error::Shape(format!("stack_rows expects rank-2 parts, got {s0:?}")));
        }
        for &p in parts {
            if self.shape(p) != s0.as_slice() {
                return Err(Error::Shape(format!(
                    "stack_rows: part shape {:?} differs from {:?}",
                    self.shape(p),
                    s0
                )));
            }
        }
        let (r, j) = (s0[0], s0[1]);
        let np = parts.len();
        let mut data = vec![T::zero(); r * np * j];
        for (p, &part) in parts.iter().enumerate() {
            let src = self.value(part).data();
            for row in 0..r {
                let dst = (row * np + p) * j;
                data[dst..dst + j].copy_from_slice(&src[row * j..(row + 1) * j]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![r, np, j], data).unwrap(),
            Op::StackRows(parts.iter().map(|p| p.0).collect()),
            needs,
            false,
        ))
    }

    // ---- contraction & projections ---------------------------------------

    /// Generalized contraction, e.g. `contract("btq,qv->btv", q, w)`.
    pub fn contract(&mut self, spec: &str, a: Var, b: Var) -> Result<Var> {
        let plan = ContractPlan::build(spec, self.shape(a), self.shape(b))?;
        let data = plan.forward(self.value(a).data(), self.value(b).data());
        let t = Tensor::new(plan.out_shape.clone(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Contract { a: a.0, b: b.0, plan: Box::new(plan) }, needs, false))
    }

    /// x[..., k] @ w[k, n] (+ bias[n]).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.is_empty() || sw.len() != 2 {
            return Err(Error::Shape(format!("linear: x {sx:?}, w {sw:?}")));
        }
        let (k, n) = (sw[0], sw[1]);
        if sx[sx.len() - 1] != k {
            return Err(Error::Shape(format!(
                "linear: x last dim {} != w rows {k}",
                sx[sx.len() - 1]
            )));
        }
        if let Some(bv) = b {
            if self.shape(bv) != [n] {
                return Err(Error::Shape(format!("linear: bias shape {:?}, want [{n}]", self.shape(bv))));
            }
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = n;
        let data = lin::linear_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bv| self.value(bv).data()),
            k,
            n,
        );
        let needs = self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            Op::Linear { x: x.0, w: w.0, b: b.map(|v| v.0), k, n },
            needs,
            false,
        ))
    }

    /// out[b, t, u, :] = a[b, t, :] + c[b, u, :]
    pub fn outer_sum(&mut self, a: Var, c: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(c));
        if sa.len() != 3 || sc.len() != 3 || sa[0] != sc[0] || sa[2] != sc[2] {
            return Err(Error::Shape(format!("outer_sum: {sa:?} and {sc:?} must be [B,T,J]/[B,U,J]")));
        }
        let (bsz, t, u, j) = (sa[0], sa[1], sc[1], sa[2]);
        let data = lin::outer_sum_fwd(self.value(a).data(), self.value(c).data(), bsz, t, u, j);
        let needs = self.needs(a) || self.needs(c);
        Ok(self.push(
            Tensor::new(vec![bsz, t, u, j], data).unwrap(),
            Op::OuterSum { a: a.0, b: c.0 },
            needs,
            false,
        ))
    }

    /// Row gather from a [V, E] table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::Shape(format!("embed: table must be rank 2, got {st:?}")));
        }
        let (v, e) = (st[0], st[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocab { token: id, vocab_size: v });
            }
        }
        let data = lin::embed_fwd(self.value(table).data(), e, ids);
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), e], data).unwrap(),
            Op::Embed { table: table.0, ids: ids.to_vec() },
            needs,
            false,
        ))
    }

    // ---- softmax family ---------------------------------------------------

    fn last_dim(&self, x: Var, what: &str) -> Result<usize> {
        let s = self.shape(x);
        match s.last() {
            Some(&d) if d >= 1 => Ok(d),
            _ => Err(Error::Empty(format!("{what}: empty last dimension (shape {s:?})"))),
        }
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim(x, "softmax_lastdim")?;
        let data = sm::softmax_rows(self.value(x).data(), d);
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let needs = self.needs(x);
        Ok(self.push(t, Op::Softmax(x.0), needs, false))
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim(x, "log_softmax_lastdim")?;
        let data = sm::log_softmax_rows(self.value(x).data(), d);
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let needs = self.needs(x);
        Ok(self.push(t, Op::LogSoftmax(x.0), needs, false))
    }

    pub fn logsumexp_lastdim(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim(x, "logsumexp_lastdim")?;
        let data = sm::logsumexp_rows(self.value(x).data(), d);
        let shape = self.shape(x)[..self.shape(x).len() - 1].to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::LogSumExp(x.0), needs, false))
    }

    // ---- conv / pooling / norm ---------------------------------------------

    /// VALID spatial convolution with stride on [N,T,H,W,Ci]; w is [kh,kw,Ci,Co].
    pub fn conv_spatial(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.len() != 5 || sw.len() != 4 {
            return Err(Error::Shape(format!("conv_spatial: x {sx:?}, w {sw:?}")));
        }
        if sx[4] != sw[2] {
            return Err(Error::Shape(format!(
                "conv_spatial: input channels {} != kernel channels {}",
                sx[4], sw[2]
            )));
        }
        if sx[2] < sw[0] || sx[3] < sw[1] {
            return Err(Error::Shape(format!(
                "conv_spatial: spatial extent {}x{} smaller than kernel {}x{}",
                sx[2], sx[3], sw[0], sw[1]
            )));
        }
        let shape = SpatialShape {
            n: sx[0],
            t: sx[1],
            h: sx[2],
            w: sx[3],
            cin: sx[4],
            kh: sw[0],
            kw: sw[1],
            cout: sw[3],
            stride,
        };
        let data = conv::conv_spatial_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bv| self.value(bv).data()),
            &shape,
        );
        let out_shape = vec![shape.n, shape.t, shape.out_h(), shape.out_w(), shape.cout];
        let needs = self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(out_shape, data).unwrap(),
            Op::ConvSpatial { x: x.0, w: w.0, b: b.map(|v| v.0), shape },
            needs,
            false,
        ))
    }

    /// SAME temporal convolution on [N,T,H,W,Ci]; w is [kt,Ci,Co], kt odd.
    pub fn conv_temporal(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.len() != 5 || sw.len() != 3 {
            return Err(Error::Shape(format!("conv_temporal: x {sx:?}, w {sw:?}")));
        }
        if sw[0] % 2 == 0 {
            return Err(Error::Shape(format!("conv_temporal: kernel {} must be odd", sw[0])));
        }
        if sx[4] != sw[1] {
            return Err(Error::Shape(format!(
                "conv_temporal: input channels {} != kernel channels {}",
                sx[4], sw[1]
            )));
        }
        let shape = TemporalShape { n: sx[0], t: sx[1], hw: sx[2] * sx[3], cin: sx[4], kt: sw[0], cout: sw[2] };
        let data = conv::conv_temporal_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bv| self.value(bv).data()),
            &shape,
        );
        let out_shape = vec![sx[0], sx[1], sx[2], sx[3], shape.cout];
        let needs = self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(out_shape, data).unwrap(),
            Op::ConvTemporal { x: x.0, w: w.0, b: b.map(|v| v.0), shape },
            needs,
            false,
        ))
    }

    /// 2x2 VALID spatial max pooling on [N,T,H,W,C].
    pub fn maxpool2_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 5 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Shape(format!("maxpool2_spatial: bad input shape {s:?}")));
        }
        let (n, t, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
        let (data, arg) = conv::maxpool2_fwd(self.value(x).data(), n, t, h, w, c);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![n, t, h / 2, w / 2, c], data).unwrap(),
            Op::MaxPool2 { x: x.0, arg },
            needs,
            false,
        ))
    }

    /// Group normalization per (sample, time step) on [N,T,H,W,C].
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 5 {
            return Err(Error::Shape(format!("group_norm: expected [N,T,H,W,C], got {s:?}")));
        }
        let c = s[4];
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!("group_norm: {groups} groups do not divide {c} channels")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "group_norm: affine shapes {:?}/{:?}, want [{c}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let shape = GroupNormShape { n: s[0], t: s[1], hw: s[2] * s[3], c, groups };
        let (data, means, invstds) = norm::group_norm_fwd(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &shape,
            T::from_f64(eps),
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(s.to_vec(), data).unwrap(),
            Op::GroupNorm { x: x.0, gamma: gamma.0, beta: beta.0, shape, means, invstds },
            needs,
            false,
        ))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.last_dim(x, "layer_norm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: affine shapes {:?}/{:?}, want [{d}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (data, means, invstds) = norm::layer_norm_fwd(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            T::from_f64(eps),
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), data).unwrap(),
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, d, means, invstds },
            needs,
            false,
        ))
    }

    // ---- losses -----------------------------------------------------------

    /// Masked active-speaker cross entropy: mean of -log alpha[b, t, b] over
    /// valid (b, t). Requires the training layout M == B.
    pub fn asd_loss(&mut self, alpha: Var, valid: &[usize]) -> Result<Var> {
        let s = self.shape(alpha);
        if s.len() != 3 {
            return Err(Error::Shape(format!("asd_loss: alpha must be [B,T,M], got {s:?}")));
        }
        let (bsz, t, m) = (s[0], s[1], s[2]);
        if m != bsz {
            return Err(Error::Shape(format!(
                "asd_loss: track count {m} != batch size {bsz} (training layout requires M == B)"
            )));
        }
        if valid.len() != bsz {
            return Err(Error::Shape(format!("asd_loss: {} lengths for batch {bsz}", valid.len())));
        }
        let denom: usize = valid.iter().sum();
        if denom == 0 {
            return Err(Error::Empty("asd_loss: no valid frames".into()));
        }
        for (b, &len) in valid.iter().enumerate() {
            if len > t {
                return Err(Error::Shape(format!("asd_loss: valid[{b}] = {len} exceeds T = {t}")));
            }
        }
        let a = self.value(alpha).data();
        let mut acc = T::zero();
        for b in 0..bsz {
            for ti in 0..valid[b] {
                acc = acc - a[(b * t + ti) * m + b].ln();
            }
        }
        let loss = acc / T::from_f64(denom as f64);
        let needs = self.needs(alpha);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::AsdLoss { alpha: alpha.0, valid: valid.to_vec(), denom },
            needs,
            false,
        ))
    }

    /// RNN-T loss (batch mean) over a normalized log-prob lattice
    /// [B, T, U_max+1, V]. `targets[b]` holds labels in 1..V; `t_valid[b]`
    /// in 1..=T.
    pub fn rnnt_loss(&mut self, lattice: Var, targets: &[Vec<usize>], t_valid: &[usize]) -> Result<Var> {
        let s = self.shape(lattice);
        if s.len() != 4 {
            return Err(Error::Shape(format!("rnnt_loss: lattice must be [B,T,U+1,V], got {s:?}")));
        }
        let (bsz, t, u1, v) = (s[0], s[1], s[2], s[3]);
        if targets.len() != bsz || t_valid.len() != bsz {
            return Err(Error::Shape(format!(
                "rnnt_loss: got {} target rows and {} lengths for batch {bsz}",
                targets.len(),
                t_valid.len()
            )));
        }
        for b in 0..bsz {
            if t_valid[b] == 0 || t_valid[b] > t {
                return Err(Error::Shape(format!("rnnt_loss: t_valid[{b}] = {} out of 1..={t}", t_valid[b])));
            }
            if targets[b].len() >= u1 {
                return Err(Error::Shape(format!(
                    "rnnt_loss: {} labels exceed lattice U dimension {u1}",
                    targets[b].len()
                )));
            }
            for &tok in &targets[b] {
                if tok == 0 || tok >= v {
                    return Err(Error::OutOfVocab { token: tok, vocab_size: v });
                }
            }
        }
        let dims = LatticeDims { u_stride: u1, vocab: v };
        let data = self.value(lattice).data();
        #[cfg(debug_assertions)]
        {
            // Normalization check over the used region.
            for b in 0..bsz {
                let item = &data[b * t * u1 * v..(b + 1) * t * u1 * v];
                for ti in 0..t_valid[b] {
                    for u in 0..=targets[b].len() {
                        let row = &item[(ti * u1 + u) * v..(ti * u1 + u + 1) * v];
                        let lse = sm::logsumexp_rows(row, v)[0].to_f64_();
                        assert!(
                            lse.abs() < 1e-5,
                            "rnnt_loss: lattice row (b={b}, t={ti}, u={u}) not normalized (logsumexp {lse})"
                        );
                    }
                }
            }
        }
        let mut acc = T::zero();
        for b in 0..bsz {
            let item = &data[b * t * u1 * v..(b + 1) * t * u1 * v];
            let (_, log_prob) = rnnt::forward_alpha(item, &dims, &targets[b], t_valid[b]);
            acc = acc - log_prob;
        }
        let loss = acc / T::from_f64(bsz as f64);
        let needs = self.needs(lattice);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::RnntLoss { lattice: lattice.0, targets: targets.to_vec(), t_valid: t_valid.to_vec() },
            needs,
            false,
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// `requires_grad` leaf; leaves not reached by the loss get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.shape().is_empty() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.value.item().is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", loss_node.value.item())));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
        }

        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.grad_leaf {
                let data = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.insert(i, Tensor::new(node.value.shape().to_vec(), data).unwrap());
            }
        }
        Ok(Gradients { grads: out })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], target: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let numel = self.nodes[target].value.numel();
        let buf = grads[target].get_or_insert_with(|| vec![T::zero(); numel]);
        f(buf);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| {
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| {
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d = *d - gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |buf| {
                    for ((d, &gv), &x) in buf.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * x;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((d, &gv), &x) in buf.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, |buf| {
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d = *d + gv * c;
                    }
                });
            }
            Op::AddScalar(x) => {
                self.acc(grads, *x, |buf| {
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                self.acc(grads, *x, |buf| {
                    for ((d, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |buf| {
                    for ((d, &gv), &yv) in buf.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * (T::one() - yv * yv);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |buf| {
                    for ((d, &gv), &yv) in buf.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * yv * (T::one() - yv);
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                self.acc(grads, *x, |buf| {
                    for d in buf.iter_mut() {
                        *d = *d + gv;
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |buf| {
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let da = self.nodes[*a].value.shape().last().copied().unwrap();
                let db = self.nodes[*b].value.shape().last().copied().unwrap();
                let rows = self.nodes[*a].value.numel() / da;
                self.acc(grads, *a, |buf| {
                    for r in 0..rows {
                        let src = &g[r * (da + db)..r * (da + db) + da];
                        let dst = &mut buf[r * da..(r + 1) * da];
                        for (d, &gv) in dst.iter_mut().zip(src) {
                            *d = *d + gv;
                        }
                    }
                });
                self.acc(grads, *b, |buf| {
                    for r in 0..rows {
                        let src = &g[r * (da + db) + da..(r + 1) * (da + db)];
                        let dst = &mut buf[r * db..(r + 1) * db];
                        for (d, &gv) in dst.iter_mut().zip(src) {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::SliceLast { x, start } => {
                let d_in = self.nodes[*x].value.shape().last().copied().unwrap();
                let d_out = node.value.shape().last().copied().unwrap();
                let rows = node.value.numel() / d_out;
                let start = *start;
                self.acc(grads, *x, |buf| {
                    for r in 0..rows {
                        let src = &g[r * d_out..(r + 1) * d_out];
                        let dst = &mut buf[r * d_in + start..r * d_in + start + d_out];
                        for (d, &gv) in dst.iter_mut().zip(src) {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::StackRows(parts) => {
                let np = parts.len();
                let s = node.value.shape();
                let (r, j) = (s[0], s[2]);
                for (p, &part) in parts.iter().enumerate() {
                    self.acc(grads, part, |buf| {
                        for row in 0..r {
                            let src = &g[(row * np + p) * j..(row * np + p + 1) * j];
                            let dst = &mut buf[row * j..(row + 1) * j];
                            for (d, &gv) in dst.iter_mut().zip(src) {
                                *d = *d + gv;
                            }
                        }
                    });
                }
            }
            Op::Contract { a, b, plan } => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |buf| plan.grad_a(g, bv, buf));
                self.acc(grads, *b, |buf| plan.grad_b(g, av, buf));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.shape().last().copied().unwrap();
                self.acc(grads, *x, |buf| sm::softmax_vjp(y, g, d, buf));
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let d = node.value.shape().last().copied().unwrap();
                self.acc(grads, *x, |buf| sm::log_softmax_vjp(y, g, d, buf));
            }
            Op::LogSumExp(x) => {
                let xv = val(*x);
                let y = node.value.data();
                let d = self.nodes[*x].value.shape().last().copied().unwrap();
                self.acc(grads, *x, |buf| sm::logsumexp_vjp(xv, y, g, d, buf));
            }
            Op::Linear { x, w, b, k, n } => {
                let (xv, wv) = (val(*x), val(*w));
                let (k, n) = (*k, *n);
                self.acc(grads, *x, |buf| lin::linear_vjp(xv, wv, g, k, n, Some(buf), None, None));
                self.acc(grads, *w, |buf| lin::linear_vjp(xv, wv, g, k, n, None, Some(buf), None));
                if let Some(b) = b {
                    self.acc(grads, *b, |buf| lin::linear_vjp(xv, wv, g, k, n, None, None, Some(buf)));
                }
            }
            Op::OuterSum { a, b } => {
                let s = node.value.shape();
                let (bsz, t, u, j) = (s[0], s[1], s[2], s[3]);
                self.acc(grads, *a, |buf| lin::outer_sum_vjp(g, bsz, t, u, j, Some(buf), None));
                self.acc(grads, *b, |buf| lin::outer_sum_vjp(g, bsz, t, u, j, None, Some(buf)));
            }
            Op::Embed { table, ids } => {
                let e = self.nodes[*table].value.shape()[1];
                self.acc(grads, *table, |buf| lin::embed_vjp(g, e, ids, buf));
            }
            Op::ConvSpatial { x, w, b, shape } => {
                let (xv, wv) = (val(*x), val(*w));
                self.acc(grads, *x, |buf| conv::conv_spatial_vjp(xv, wv, g, shape, Some(buf), None, None));
                self.acc(grads, *w, |buf| conv::conv_spatial_vjp(xv, wv, g, shape, None, Some(buf), None));
                if let Some(b) = b {
                    self.acc(grads, *b, |buf| conv::conv_spatial_vjp(xv, wv, g, shape, None, None, Some(buf)));
                }
            }
            Op::ConvTemporal { x, w, b, shape } => {
                let (xv, wv) = (val(*x), val(*w));
                self.acc(grads, *x, |buf| conv::conv_temporal_vjp(xv, wv, g, shape, Some(buf), None, None));
                self.acc(grads, *w, |buf| conv::conv_temporal_vjp(xv, wv, g, shape, None, Some(buf), None));
                if let Some(b) = b {
                    self.acc(grads, *b, |buf| conv::conv_temporal_vjp(xv, wv, g, shape, None, None, Some(buf)));
                }
            }
            Op::MaxPool2 { x, arg } => {
                self.acc(grads, *x, |buf| conv::maxpool2_vjp(g, arg, buf));
            }
            Op::GroupNorm { x, gamma, beta, shape, means, invstds } => {
                let (xv, gv_) = (val(*x), val(*gamma));
                self.acc(grads, *x, |buf| {
                    norm::group_norm_vjp(xv, gv_, g, means, invstds, shape, Some(buf), None, None)
                });
                self.acc(grads, *gamma, |buf| {
                    norm::group_norm_vjp(xv, gv_, g, means, invstds, shape, None, Some(buf), None)
                });
                self.acc(grads, *beta, |buf| {
                    norm::group_norm_vjp(xv, gv_, g, means, invstds, shape, None, None, Some(buf))
                });
            }
            Op::LayerNorm { x, gamma, beta, d, means, invstds } => {
                let (xv, gv_) = (val(*x), val(*gamma));
                let d = *d;
                self.acc(grads, *x, |buf| {
                    norm::layer_norm_vjp(xv, gv_, g, means, invstds, d, Some(buf), None, None)
                });
                self.acc(grads, *gamma, |buf| {
                    norm::layer_norm_vjp(xv, gv_, g, means, invstds, d, None, Some(buf), None)
                });
                self.acc(grads, *beta, |buf| {
                    norm::layer_norm_vjp(xv, gv_, g, means, invstds, d, None, None, Some(buf))
                });
            }
            Op::AsdLoss { alpha, valid, denom } => {
                let a = val(*alpha);
                let s = self.nodes[*alpha].value.shape();
                let (t, m) = (s[1], s[2]);
                let gv = g[0];
                let denom = T::from_f64(*denom as f64);
                self.acc(grads, *alpha, |buf| {
                    for (b, &len) in valid.iter().enumerate() {
                        for ti in 0..len {
                            let idx = (b * t + ti) * m + b;
                            buf[idx] = buf[idx] - gv / (denom * a[idx]);
                        }
                    }
                });
            }
            Op::RnntLoss { lattice, targets, t_valid } => {
                let lat = val(*lattice);
                let s = self.nodes[*lattice].value.shape();
                let (bsz, t, u1, v) = (s[0], s[1], s[2], s[3]);
                let dims = LatticeDims { u_stride: u1, vocab: v };
                let scale = g[0] / T::from_f64(bsz as f64);
                self.acc(grads, *lattice, |buf| {
                    for b in 0..bsz {
                        let item = &lat[b * t * u1 * v..(b + 1) * t * u1 * v];
                        let ditem = &mut buf[b * t * u1 * v..(b + 1) * t * u1 * v];
                        rnnt::accumulate_grad(item, &dims, &targets[b], t_valid[b], scale, ditem);
                    }
                });
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::SumAll(..) => "sum_all",
        Op::Reshape(..) => "reshape",
        Op::ConcatLast(..) => "concat_last",
        Op::SliceLast { .. } => "slice_last",
        Op::StackRows(..) => "stack_rows",
        Op::Contract { .. } => "contract",
        Op::Softmax(..) => "softmax_lastdim",
        Op::LogSoftmax(..) => "log_softmax_lastdim",
        Op::LogSumExp(..) => "logsumexp_lastdim",
        Op::Linear { .. } => "linear",
        Op::OuterSum { .. } => "outer_sum",
        Op::Embed { .. } => "embed",
        Op::ConvSpatial { .. } => "conv_spatial",
        Op::ConvTemporal { .. } => "conv_temporal",
        Op::MaxPool2 { .. } => "maxpool2_spatial",
        Op::GroupNorm { .. } => "group_norm",
        Op::LayerNorm { .. } => "layer_norm",
        Op::AsdLoss { .. } => "asd_loss",
        Op::RnntLoss { .. } => "rnnt_loss",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let p = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap());
        let y1 = tape.softmax_lastdim(x).unwrap();
        let shifted = tape.add_scalar(x, 123.456);
        let y2 = tape.softmax_lastdim(shifted).unwrap();
        let d = tape.value(y1).max_abs_diff(tape.value(y2));
        assert!(d < 1e-12, "shift changed softmax by {d}");
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // y = x*x + x  => dy/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(5.0), true);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 11.0);
    }

    #[test]
    fn truncate_allows_reuse_of_leaves() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0), false);
        let mark = tape.mark();
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(y).item(), 4.0);
        tape.truncate(mark);
        let z = tape.add(x, x).unwrap();
        assert_eq!(tape.value(z).item(), 4.0);
        assert_eq!(tape.len(), mark + 1);
    }

    #[test]
    fn asd_loss_uniform_is_ln_m() {
        let mut tape = Tape::<f64>::new();
        let b = 4;
        let t = 3;
        let alpha = tape.constant(Tensor::full(&[b, t, b], 0.25));
        let loss = tape.asd_loss(alpha, &[3, 3, 3, 3]).unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn asd_loss_perfect_one_hot_is_zero() {
        let mut tape = Tape::<f64>::new();
        let b = 3;
        let t = 2;
        let alpha = Tensor::from_fn(&[b, t, b], |i| if i[0] == i[2] { 1.0 } else { 0.0 });
        let alpha = tape.constant(alpha);
        let loss = tape.asd_loss(alpha, &[2, 2, 2]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn asd_loss_rejects_m_not_equal_b() {
        let mut tape = Tape::<f64>::new();
        let alpha = tape.constant(Tensor::full(&[2, 3, 4], 0.25));
        assert!(tape.asd_loss(alpha, &[3, 3]).is_err());
    }

    #[test]
    fn asd_loss_masked_matches_direct_sum() {
        let mut tape = Tape::<f64>::new();
        let (b, t) = (3, 4);
        let mut vals = Vec::new();
        let mut seed = 0.123f64;
        for _ in 0..b * t * b {
            seed = (seed * 97.31).fract() * 0.9 + 0.05;
            vals.push(seed);
        }
        let alpha = Tensor::new(vec![b, t, b], vals.clone()).unwrap();
        let valid = [2usize, 4, 1];
        let av = tape.constant(alpha);
        let loss = tape.asd_loss(av, &valid).unwrap();
        let mut want = 0.0;
        for bb in 0..b {
            for tt in 0..valid[bb] {
                want -= vals[(bb * t + tt) * b + bb].ln();
            }
        }
        want /= valid.iter().sum::<usize>() as f64;
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn contract_through_backward_matches_manual() {
        // loss = sum(A @ v), dA = 1 v^T, dv = A^T 1
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let v = tape.leaf(Tensor::new(vec![2], vec![5.0, 7.0]).unwrap(), true);
        let av = tape.contract("ij,j->i", a, v).unwrap();
        let loss = tape.sum_all(av);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, 7.0, 5.0, 7.0]);
        assert_eq!(grads.get(v).unwrap().data(), &[4.0, 6.0]);
    }
}
