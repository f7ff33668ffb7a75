//! Wengert tape: operations recorded in forward order, replayed in reverse
//! for gradients.
//!
//! Each op stores its operand handles and enough forward state to run its
//! backward rule. The tape is single-shot: `backward` may run once, and a
//! second call is an error.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    idx: u32,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Batched matrix product; leading dims equal or broadcast from 1.
    MatMul { a: u32, b: u32 },
    Add { a: u32, b: u32 },
    Sub { a: u32, b: u32 },
    Mul { a: u32, b: u32 },
    Scale { a: u32, c: f64 },
    /// `a + bias` with `bias` broadcast over all but the last axis.
    AddBias { a: u32, bias: u32 },
    /// `a * gain` with `gain` broadcast over all but the last axis.
    MulBias { a: u32, gain: u32 },
    /// `[B,M,K] + [M,K]` broadcast over the batch axis.
    AddBcastRows { a: u32, b: u32 },
    Relu { a: u32 },
    Softmax { a: u32, axis: usize },
    /// Per last-axis slice: `(x - mean) / sqrt(var + eps)`, population var.
    LayerNorm { a: u32 },
    /// Mean over axis 1 of `[B,M,N]`, keeping the axis: `[B,1,N]`.
    MeanAxis1 { a: u32 },
    SubBcast1 { a: u32, b: u32 },
    MulBcast1 { a: u32, b: u32 },
    DivBcast1 { a: u32, b: u32 },
    AddBcast1 { a: u32, b: u32 },
    Sqrt { a: u32 },
    MaxScalar { a: u32, c: f64 },
    /// Swap axes 1 and 2 of a rank-3 tensor.
    Transpose12 { a: u32 },
    /// Reverse axis 1 of a rank-3 tensor.
    FlipAxis1 { a: u32 },
    SliceLast { a: u32, start: usize, len: usize },
    ConcatLast { parts: Vec<u32> },
    /// Centered moving average along axis 1 with replicate padding.
    MovingAvg { a: u32, kernel: usize },
    Mean { a: u32 },
    Sum { a: u32 },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Auxiliary forward state needed by the backward rule (layer-norm sigma).
    saved: Vec<f64>,
    needs_grad: bool,
    leaf_requires_grad: bool,
}

impl Node {
    fn numel(&self) -> usize {
        self.data.len()
    }
}

/// The recording tape. All model math goes through its methods.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, saved: Vec<f64>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => false, // set by leaf()
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::AddBias { a, bias: b }
            | Op::MulBias { a, gain: b }
            | Op::AddBcastRows { a, b }
            | Op::SubBcast1 { a, b }
            | Op::MulBcast1 { a, b }
            | Op::DivBcast1 { a, b }
            | Op::AddBcast1 { a, b } => {
                self.nodes[*a as usize].needs_grad || self.nodes[*b as usize].needs_grad
            }
            Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Softmax { a, .. }
            | Op::LayerNorm { a }
            | Op::MeanAxis1 { a }
            | Op::Sqrt { a }
            | Op::MaxScalar { a, .. }
            | Op::Transpose12 { a }
            | Op::FlipAxis1 { a }
            | Op::SliceLast { a, .. }
            | Op::MovingAvg { a, .. }
            | Op::Mean { a }
            | Op::Sum { a } => self.nodes[*a as usize].needs_grad,
            Op::ConcatLast { parts } => {
                parts.iter().any(|p| self.nodes[*p as usize].needs_grad)
            }
        };
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            op,
            shape,
            data,
            saved,
            needs_grad,
            leaf_requires_grad: false,
        });
        self.grads.push(None);
        NodeId { tape: self.id, idx }
    }

    /// Register a tensor as a leaf; its data is snapshotted.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let id = self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), Vec::new());
        let node = &mut self.nodes[id.idx as usize];
        node.needs_grad = t.is_grad_required();
        node.leaf_requires_grad = t.is_grad_required();
        id
    }

    /// Register a constant leaf (no gradient) directly from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id {
            return Err(Error::NotOnTape);
        }
        Ok(id.idx as usize)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.idx as usize].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.idx as usize].data
    }

    /// Gradient of the last `backward` target with respect to `id`, if any
    /// was materialized (absent for detached nodes).
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.idx as usize].as_deref()
    }

    // ── shape helpers ───────────────────────────────────────────────

    fn rank3_dims(&self, i: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.nodes[i].shape[..] {
            [b, m, n] => Ok((b, m, n)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[i].shape.clone(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: usize, b: usize, op: &'static str) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    // ── operations ──────────────────────────────────────────────────

    /// Matrix product `[.., p, q] x [.., q, r] -> [.., p, r]`; leading batch
    /// dims must agree or broadcast from 1 (rank-2 operands broadcast).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ba, p, qa) = mm_dims(&self.nodes[ai].shape).ok_or_else(|| shape_err(
            "matmul", &self.nodes[ai].shape, &self.nodes[bi].shape,
        ))?;
        let (bb, qb, r) = mm_dims(&self.nodes[bi].shape).ok_or_else(|| shape_err(
            "matmul", &self.nodes[ai].shape, &self.nodes[bi].shape,
        ))?;
        if qa != qb || (ba != bb && ba != 1 && bb != 1) {
            return Err(shape_err("matmul", &self.nodes[ai].shape, &self.nodes[bi].shape));
        }
        let nb = ba.max(bb);
        let a_stride = if ba == 1 { 0 } else { p * qa };
        let b_stride = if bb == 1 { 0 } else { qa * r };
        let mut out = vec![0.0; nb * p * r];
        kernels::matmul(
            &self.nodes[ai].data,
            &self.nodes[bi].data,
            &mut out,
            nb,
            p,
            qa,
            r,
            a_stride,
            b_stride,
        );
        let out_shape = if self.nodes[ai].shape.len() == 2 && self.nodes[bi].shape.len() == 2 {
            vec![p, r]
        } else {
            vec![nb, p, r]
        };
        Ok(self.push(Op::MatMul { a: a.idx, b: b.idx }, out_shape, out, Vec::new()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape(ai, bi, "add")?;
        let data = zip_map(&self.nodes[ai].data, &self.nodes[bi].data, |x, y| x + y);
        Ok(self.push(Op::Add { a: a.idx, b: b.idx }, self.nodes[ai].shape.clone(), data, Vec::new()))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape(ai, bi, "sub")?;
        let data = zip_map(&self.nodes[ai].data, &self.nodes[bi].data, |x, y| x - y);
        Ok(self.push(Op::Sub { a: a.idx, b: b.idx }, self.nodes[ai].shape.clone(), data, Vec::new()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape(ai, bi, "mul")?;
        let data = zip_map(&self.nodes[ai].data, &self.nodes[bi].data, |x, y| x * y);
        Ok(self.push(Op::Mul { a: a.idx, b: b.idx }, self.nodes[ai].shape.clone(), data, Vec::new()))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ai = self.check(a)?;
        let data = self.nodes[ai].data.iter().map(|x| x * c).collect();
        Ok(self.push(Op::Scale { a: a.idx, c }, self.nodes[ai].shape.clone(), data, Vec::new()))
    }

    /// `a + bias` where `bias` has the length of `a`'s last axis.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(bias)?);
        let k = *self.nodes[ai].shape.last().unwrap_or(&0);
        if self.nodes[bi].shape != [k] {
            return Err(shape_err("add_bias", &self.nodes[ai].shape, &self.nodes[bi].shape));
        }
        let bvals = &self.nodes[bi].data;
        let data = self.nodes[ai]
            .data
            .chunks(k)
            .flat_map(|row| row.iter().zip(bvals).map(|(x, b)| x + b))
            .collect();
        Ok(self.push(
            Op::AddBias { a: a.idx, bias: bias.idx },
            self.nodes[ai].shape.clone(),
            data,
            Vec::new(),
        ))
    }

    /// `a * gain` where `gain` has the length of `a`'s last axis.
    pub fn mul_bias(&mut self, a: NodeId, gain: NodeId) -> Result<NodeId> {
        let (ai, gi) = (self.check(a)?, self.check(gain)?);
        let k = *self.nodes[ai].shape.last().unwrap_or(&0);
        if self.nodes[gi].shape != [k] {
            return Err(shape_err("mul_bias", &self.nodes[ai].shape, &self.nodes[gi].shape));
        }
        let gvals = &self.nodes[gi].data;
        let data = self.nodes[ai]
            .data
            .chunks(k)
            .flat_map(|row| row.iter().zip(gvals).map(|(x, g)| x * g))
            .collect();
        Ok(self.push(
            Op::MulBias { a: a.idx, gain: gain.idx },
            self.nodes[ai].shape.clone(),
            data,
            Vec::new(),
        ))
    }

    /// `[B,M,K] + [M,K]`, the rank-2 operand broadcast over the batch axis.
    pub fn add_bcast_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (_, m, k) = self.rank3_dims(ai, "add_bcast_rows")?;
        if self.nodes[bi].shape != [m, k] {
            return Err(shape_err("add_bcast_rows", &self.nodes[ai].shape, &self.nodes[bi].shape));
        }
        let bvals = &self.nodes[bi].data;
        let data = self.nodes[ai]
            .data
            .chunks(m * k)
            .flat_map(|mat| mat.iter().zip(bvals).map(|(x, b)| x + b))
            .collect();
        Ok(self.push(
            Op::AddBcastRows { a: a.idx, b: b.idx },
            self.nodes[ai].shape.clone(),
            data,
            Vec::new(),
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.check(a)?;
        let data = self.nodes[ai].data.iter().map(|&x| x.max(0.0)).collect();
        Ok(self.push(Op::Relu { a: a.idx }, self.nodes[ai].shape.clone(), data, Vec::new()))
    }

    /// Numerically stable softmax along `axis`: `exp(x - max) / sum`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let ai = self.check(a)?;
        let shape = self.nodes[ai].shape.clone();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { op: "softmax", axis, shape });
        }
        let (outer, m, inner) = axis_split(&shape, axis);
        let mut data = self.nodes[ai].data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * m + t) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for t in 0..m {
                    mx = mx.max(data[at(t)]);
                }
                let mut sum = 0.0;
                for t in 0..m {
                    let e = (data[at(t)] - mx).exp();
                    data[at(t)] = e;
                    sum += e;
                }
                for t in 0..m {
                    data[at(t)] /= sum;
                }
            }
        }
        Ok(self.push(Op::Softmax { a: a.idx, axis }, shape, data, Vec::new()))
    }

    /// Per last-axis slice: `(x - mean) / sqrt(var + eps)` with population
    /// variance. Saves each slice's sigma for the backward rule.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let ai = self.check(a)?;
        let shape = self.nodes[ai].shape.clone();
        let k = *shape.last().ok_or(Error::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            shape: shape.clone(),
        })?;
        let rows = self.nodes[ai].numel() / k;
        let mut data = self.nodes[ai].data.clone();
        let mut sigmas = Vec::with_capacity(rows);
        for row in data.chunks_mut(k) {
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k as f64;
            let sigma = (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) / sigma;
            }
            sigmas.push(sigma);
        }
        Ok(self.push(Op::LayerNorm { a: a.idx }, shape, data, sigmas))
    }

    /// Mean over axis 1 of `[B,M,N]`, keeping the axis: result `[B,1,N]`.
    pub fn mean_axis1(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.check(a)?;
        let (b, m, n) = self.rank3_dims(ai, "mean_axis1")?;
        let x = &self.nodes[ai].data;
        let mut out = vec![0.0; b * n];
        for bb in 0..b {
            for t in 0..m {
                for j in 0..n {
                    out[bb * n + j] += x[(bb * m + t) * n + j];
                }
            }
        }
        for v in out.iter_mut() {
            *v /= m as f64;
        }
        Ok(self.push(Op::MeanAxis1 { a: a.idx }, vec![b, 1, n], out, Vec::new()))
    }

    pub fn sub_bcast1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bcast1_op(a, b, "sub_bcast1", |x, y| x - y, |a, b| Op::SubBcast1 { a, b })
    }

    pub fn mul_bcast1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bcast1_op(a, b, "mul_bcast1", |x, y| x * y, |a, b| Op::MulBcast1 { a, b })
    }

    pub fn div_bcast1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bcast1_op(a, b, "div_bcast1", |x, y| x / y, |a, b| Op::DivBcast1 { a, b })
    }

    pub fn add_bcast1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bcast1_op(a, b, "add_bcast1", |x, y| x + y, |a, b| Op::AddBcast1 { a, b })
    }

    /// Elementwise op between `[B,M,N]` and `[B,1,N]` (broadcast over axis 1).
    fn bcast1_op(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(u32, u32) -> Op,
    ) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ba, m, n) = self.rank3_dims(ai, name)?;
        let (bb, mb, nb) = self.rank3_dims(bi, name)?;
        if bb != ba || mb != 1 || nb != n {
            return Err(shape_err(name, &self.nodes[ai].shape, &self.nodes[bi].shape));
        }
        let xs = &self.nodes[ai].data;
        let ys = &self.nodes[bi].data;
        let mut out = Vec::with_capacity(xs.len());
        for bb in 0..ba {
            for t in 0..m {
                for j in 0..n {
                    out.push(f(xs[(bb * m + t) * n + j], ys[bb * n + j]));
                }
            }
        }
        Ok(self.push(make(a.idx, b.idx), self.nodes[ai].shape.clone(), out, Vec::new()))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.check(a)?;
        let data = self.nodes[ai].data.iter().map(|x| x.sqrt()).collect();
        Ok(self.push(Op::Sqrt { a: a.idx }, self.nodes[ai].shape.clone(), data, Vec::new()))
    }

    /// Elementwise `max(x, c)`; subgradient 0 where `x <= c`.
    pub fn max_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ai = self.check(a)?;
        let data = self.nodes[ai].data.iter().map(|x| x.max(c)).collect();
        Ok(self.push(Op::MaxScalar { a: a.idx, c }, self.nodes[ai].shape.clone(), data, Vec::new()))
    }

    /// Swap axes 1 and 2 of `[B,M,N]` -> `[B,N,M]`.
    pub fn transpose12(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.check(a)?;
        let (b, m, n) = self.rank3_dims(ai, "transpose12")?;
        let x = &self.nodes[ai].data;
        let mut out = vec![0.0; x.len()];
        for bb in 0..b {
            for t in 0..m {
                for j in 0..n {
                    out[(bb * n + j) * m + t] = x[(bb * m + t) * n + j];
                }
            }
        }
        Ok(self.push(Op::Transpose12 { a: a.idx }, vec![b, n, m], out, Vec::new()))
    }

    /// Reverse axis 1 of `[B,M,N]` (time flip).
    pub fn flip_axis1(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.check(a)?;
        let (b, m, n) = self.rank3_dims(ai, "flip_axis1")?;
        let x = &self.nodes[ai].data;
        let mut out = vec![0.0; x.len()];
        for bb in 0..b {
            for t in 0..m {
                let src = &x[(bb * m + t) * n..(bb * m + t + 1) * n];
                out[(bb * m + (m - 1 - t)) * n..(bb * m + (m - t)) * n].copy_from_slice(src);
            }
        }
        Ok(self.push(Op::FlipAxis1 { a: a.idx }, self.nodes[ai].shape.clone(), out, Vec::new()))
    }

    /// Slice `[.., start..start+len]` of the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ai = self.check(a)?;
        let shape = self.nodes[ai].shape.clone();
        let k = *shape.last().unwrap_or(&0);
        if start + len > k {
            return Err(Error::InvalidAxis { op: "slice_last", axis: start + len, shape });
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let data = self.nodes[ai]
            .data
            .chunks(k)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Op::SliceLast { a: a.idx, start, len }, out_shape, data, Vec::new()))
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let idxs: Vec<usize> = parts.iter().map(|p| self.check(*p)).collect::<Result<_>>()?;
        let first = *idxs.first().ok_or(Error::EmptySeries)?;
        let lead = &self.nodes[first].shape[..self.nodes[first].shape.len() - 1];
        let mut total_k = 0;
        for &i in &idxs {
            let s = &self.nodes[i].shape;
            if &s[..s.len() - 1] != lead {
                return Err(shape_err("concat_last", &self.nodes[first].shape, s));
            }
            total_k += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total_k);
        for row in 0..rows {
            for &i in &idxs {
                let k = *self.nodes[i].shape.last().unwrap();
                data.extend_from_slice(&self.nodes[i].data[row * k..(row + 1) * k]);
            }
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(total_k);
        Ok(self.push(
            Op::ConcatLast { parts: parts.iter().map(|p| p.idx).collect() },
            out_shape,
            data,
            Vec::new(),
        ))
    }

    /// Centered moving average of odd width `kernel` along axis 1 of
    /// `[B,L,N]`, replicate-padded so the length is preserved.
    pub fn moving_avg(&mut self, a: NodeId, kernel: usize) -> Result<NodeId> {
        let ai = self.check(a)?;
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::EvenKernel { kernel });
        }
        let (b, l, n) = self.rank3_dims(ai, "moving_avg")?;
        let mut out = vec![0.0; b * l * n];
        kernels::moving_avg_seq(&self.nodes[ai].data, &mut out, b, l, n, kernel);
        Ok(self.push(Op::MovingAvg { a: a.idx, kernel }, vec![b, l, n], out, Vec::new()))
    }

    /// Mean of all elements -> scalar `[1]`.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.check(a)?;
        let n = self.nodes[ai].numel() as f64;
        let v = self.nodes[ai].data.iter().sum::<f64>() / n;
        Ok(self.push(Op::Mean { a: a.idx }, vec![1], vec![v], Vec::new()))
    }

    /// Sum of all elements -> scalar `[1]`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.check(a)?;
        let v = self.nodes[ai].data.iter().sum::<f64>();
        Ok(self.push(Op::Sum { a: a.idx }, vec![1], vec![v], Vec::new()))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Single-shot: the second call on the
    /// same tape is an error. Gradients of detached leaves stay absent.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let li = self.check(loss)?;
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[li].numel() != 1 {
            return Err(Error::LossNotScalar {
                shape: self.nodes[li].shape.clone(),
            });
        }
        self.consumed = true;
        self.grads[li] = Some(vec![1.0]);
        run_backward(&self.nodes, &mut self.grads, li);
        Ok(())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Interpret a shape as batched matrices: rank 2 -> batch 1.
fn mm_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape[..] {
        [p, q] => Some((1, p, q)),
        [b, p, q] => Some((b, p, q)),
        _ => None,
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let m = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, m, inner)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// Accumulate `contrib` into the gradient slot of `idx` if that node wants a
/// gradient.
fn acc_with(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    idx: usize,
    write: impl FnOnce(&mut [f64]),
) {
    if !nodes[idx].needs_grad {
        return;
    }
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].numel()]);
    write(slot);
}

fn run_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], loss_idx: usize) {
    for idx in (0..=loss_idx).rev() {
        if !nodes[idx].needs_grad {
            grads[idx] = None;
            continue;
        }
        if matches!(nodes[idx].op, Op::Leaf) {
            continue; // keep the accumulated gradient for the caller
        }
        let g = match grads[idx].take() {
            Some(g) => g,
            None => continue, // no gradient flowed to this node
        };
        backward_op(nodes, grads, idx, &g);
    }
}

fn backward_op(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &nodes[idx].op {
        Op::Leaf => unreachable!("leaves are skipped in the reverse sweep"),

        Op::MatMul { a, b } => {
            let (ai, bi) = (*a as usize, *b as usize);
            let (ba, p, q) = mm_dims(&nodes[ai].shape).unwrap();
            let (bb, _, r) = mm_dims(&nodes[bi].shape).unwrap();
            let nb = ba.max(bb);
            let a_stride = if ba == 1 { 0 } else { p * q };
            let b_stride = if bb == 1 { 0 } else { q * r };
            // dA = g . B^T, summed over the batch when A is broadcast
            acc_with(nodes, grads, ai, |da| {
                let bdat = &nodes[bi].data;
                for batch in 0..nb {
                    let gb = &g[batch * p * r..(batch + 1) * p * r];
                    let bm = &bdat[batch * b_stride..batch * b_stride + q * r];
                    let dam = &mut da[batch * a_stride..batch * a_stride + p * q];
                    for i in 0..p {
                        for k in 0..q {
                            let mut s = 0.0;
                            for j in 0..r {
                                s += gb[i * r + j] * bm[k * r + j];
                            }
                            dam[i * q + k] += s;
                        }
                    }
                }
            });
            // dB = A^T . g, summed over the batch when B is broadcast
            acc_with(nodes, grads, bi, |db| {
                let adat = &nodes[ai].data;
                for batch in 0..nb {
                    let gb = &g[batch * p * r..(batch + 1) * p * r];
                    let am = &adat[batch * a_stride..batch * a_stride + p * q];
                    let dbm = &mut db[batch * b_stride..batch * b_stride + q * r];
                    for k in 0..q {
                        for i in 0..p {
                            let aik = am[i * q + k];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..r {
                                dbm[k * r + j] += aik * gb[i * r + j];
                            }
                        }
                    }
                }
            });
        }

        Op::Add { a, b } => {
            acc_with(nodes, grads, *a as usize, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            acc_with(nodes, grads, *b as usize, |db| {
                for (d, gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
            });
        }

        Op::Sub { a, b } => {
            acc_with(nodes, grads, *a as usize, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            acc_with(nodes, grads, *b as usize, |db| {
                for (d, gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            });
        }

        Op::Mul { a, b } => {
            let (ai, bi) = (*a as usize, *b as usize);
            acc_with(nodes, grads, ai, |da| {
                for ((d, gv), y) in da.iter_mut().zip(g).zip(&nodes[bi].data) {
                    *d += gv * y;
                }
            });
            acc_with(nodes, grads, bi, |db| {
                for ((d, gv), x) in db.iter_mut().zip(g).zip(&nodes[ai].data) {
                    *d += gv * x;
                }
            });
        }

        Op::Scale { a, c } => {
            acc_with(nodes, grads, *a as usize, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv * c;
                }
            });
        }

        Op::AddBias { a, bias } => {
            let k = *nodes[*a as usize].shape.last().unwrap();
            acc_with(nodes, grads, *a as usize, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            acc_with(nodes, grads, *bias as usize, |db| {
                for row in g.chunks(k) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            });
        }

        Op::MulBias { a, gain } => {
            let (ai, gi) = (*a as usize, *gain as usize);
            let k = *nodes[ai].shape.last().unwrap();
            acc_with(nodes, grads, ai, |da| {
                let gains = &nodes[gi].data;
                for (row, (drow, grow)) in da.chunks_mut(k).zip(g.chunks(k)).enumerate() {
                    let _ = row;
                    for ((d, gv), gn) in drow.iter_mut().zip(grow).zip(gains) {
                        *d += gv * gn;
                    }
                }
            });
            acc_with(nodes, grads, gi, |dg| {
                let xs = &nodes[ai].data;
                for (xrow, grow) in xs.chunks(k).zip(g.chunks(k)) {
                    for ((d, gv), x) in dg.iter_mut().zip(grow).zip(xrow) {
                        *d += gv * x;
                    }
                }
            });
        }

        Op::AddBcastRows { a, b } => {
            let (ai, bi) = (*a as usize, *b as usize);
            let mk = nodes[bi].numel();
            acc_with(nodes, grads, ai, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            acc_with(nodes, grads, bi, |db| {
                for gmat in g.chunks(mk) {
                    for (d, gv) in db.iter_mut().zip(gmat) {
                        *d += gv;
                    }
                }
            });
        }

        Op::Relu { a } => {
            let ai = *a as usize;
            acc_with(nodes, grads, ai, |da| {
                for ((d, gv), x) in da.iter_mut().zip(g).zip(&nodes[ai].data) {
                    if *x > 0.0 {
                        *d += gv;
                    }
                }
            });
        }

        Op::Softmax { a, axis } => {
            let ai = *a as usize;
            let y = &nodes[idx].data;
            let (outer, m, inner) = axis_split(&nodes[idx].shape, *axis);
            acc_with(nodes, grads, ai, |da| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * m + t) * inner + i;
                        let mut dot = 0.0;
                        for t in 0..m {
                            dot += g[at(t)] * y[at(t)];
                        }
                        for t in 0..m {
                            da[at(t)] += y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
            });
        }

        Op::LayerNorm { a } => {
            let ai = *a as usize;
            let y = &nodes[idx].data;
            let sigmas = &nodes[idx].saved;
            let k = *nodes[idx].shape.last().unwrap();
            acc_with(nodes, grads, ai, |da| {
                for (row, sigma) in sigmas.iter().enumerate() {
                    let o = row * k;
                    let grow = &g[o..o + k];
                    let yrow = &y[o..o + k];
                    let gmean = grow.iter().sum::<f64>() / k as f64;
                    let gydot = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum::<f64>() / k as f64;
                    for t in 0..k {
                        da[o + t] += (grow[t] - gmean - yrow[t] * gydot) / sigma;
                    }
                }
            });
        }

        Op::MeanAxis1 { a } => {
            let ai = *a as usize;
            let (b, m, n) = match nodes[ai].shape[..] {
                [b, m, n] => (b, m, n),
                _ => unreachable!(),
            };
            acc_with(nodes, grads, ai, |da| {
                let inv_m = 1.0 / m as f64;
                for bb in 0..b {
                    for t in 0..m {
                        for j in 0..n {
                            da[(bb * m + t) * n + j] += g[bb * n + j] * inv_m;
                        }
                    }
                }
            });
        }

        Op::SubBcast1 { a, b } | Op::AddBcast1 { a, b } => {
            let sign = if matches!(nodes[idx].op, Op::SubBcast1 { .. }) { -1.0 } else { 1.0 };
            let (ai, bi) = (*a as usize, *b as usize);
            let (bsz, m, n) = match nodes[ai].shape[..] {
                [b, m, n] => (b, m, n),
                _ => unreachable!(),
            };
            acc_with(nodes, grads, ai, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            acc_with(nodes, grads, bi, |db| {
                for bb in 0..bsz {
                    for t in 0..m {
                        for j in 0..n {
                            db[bb * n + j] += sign * g[(bb * m + t) * n + j];
                        }
                    }
                }
            });
        }

        Op::MulBcast1 { a, b } => {
            let (ai, bi) = (*a as usize, *b as usize);
            let (bsz, m, n) = match nodes[ai].shape[..] {
                [b, m, n] => (b, m, n),
                _ => unreachable!(),
            };
            acc_with(nodes, grads, ai, |da| {
                let ys = &nodes[bi].data;
                for bb in 0..bsz {
                    for t in 0..m {
                        for j in 0..n {
                            let o = (bb * m + t) * n + j;
                            da[o] += g[o] * ys[bb * n + j];
                        }
                    }
                }
            });
            acc_with(nodes, grads, bi, |db| {
                let xs = &nodes[ai].data;
                for bb in 0..bsz {
                    for t in 0..m {
                        for j in 0..n {
                            let o = (bb * m + t) * n + j;
                            db[bb * n + j] += g[o] * xs[o];
                        }
                    }
                }
            });
        }

        Op::DivBcast1 { a, b } => {
            let (ai, bi) = (*a as usize, *b as usize);
            let (bsz, m, n) = match nodes[ai].shape[..] {
                [b, m, n] => (b, m, n),
                _ => unreachable!(),
            };
            acc_with(nodes, grads, ai, |da| {
                let ys = &nodes[bi].data;
                for bb in 0..bsz {
                    for t in 0..m {
                        for j in 0..n {
                            let o = (bb * m + t) * n + j;
                            da[o] += g[o] / ys[bb * n + j];
                        }
                    }
                }
            });
            acc_with(nodes, grads, bi, |db| {
                let xs = &nodes[ai].data;
                let ys = &nodes[bi].data;
                for bb in 0..bsz {
                    for t in 0..m {
                        for j in 0..n {
                            let o = (bb * m + t) * n + j;
                            let y = ys[bb * n + j];
                            db[bb * n + j] -= g[o] * xs[o] / (y * y);
                        }
                    }
                }
            });
        }

        Op::Sqrt { a } => {
            let y = &nodes[idx].data;
            acc_with(nodes, grads, *a as usize, |da| {
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(y) {
                    // A hard zero upstream contributes nothing even at y == 0,
                    // where the derivative itself is unbounded.
                    if *gv != 0.0 {
                        *d += gv / (2.0 * yv);
                    }
                }
            });
        }

        Op::MaxScalar { a, c } => {
            let ai = *a as usize;
            acc_with(nodes, grads, ai, |da| {
                for ((d, gv), x) in da.iter_mut().zip(g).zip(&nodes[ai].data) {
                    if *x > *c {
                        *d += gv;
                    }
                }
            });
        }

        Op::Transpose12 { a } => {
            let ai = *a as usize;
            let (b, m, n) = match nodes[ai].shape[..] {
                [b, m, n] => (b, m, n),
                _ => unreachable!(),
            };
            // output is [b, n, m]; transpose g back
            acc_with(nodes, grads, ai, |da| {
                for bb in 0..b {
                    for j in 0..n {
                        for t in 0..m {
                            da[(bb * m + t) * n + j] += g[(bb * n + j) * m + t];
                        }
                    }
                }
            });
        }

        Op::FlipAxis1 { a } => {
            let ai = *a as usize;
            let (b, m, n) = match nodes[ai].shape[..] {
                [b, m, n] => (b, m, n),
                _ => unreachable!(),
            };
            acc_with(nodes, grads, ai, |da| {
                for bb in 0..b {
                    for t in 0..m {
                        for j in 0..n {
                            da[(bb * m + t) * n + j] += g[(bb * m + (m - 1 - t)) * n + j];
                        }
                    }
                }
            });
        }

        Op::SliceLast { a, start, len } => {
            let ai = *a as usize;
            let k = *nodes[ai].shape.last().unwrap();
            acc_with(nodes, grads, ai, |da| {
                for (row, grow) in g.chunks(*len).enumerate() {
                    let o = row * k + start;
                    for (d, gv) in da[o..o + len].iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
            });
        }

        Op::ConcatLast { parts } => {
            let total_k = *nodes[idx].shape.last().unwrap();
            let rows = nodes[idx].numel() / total_k;
            let mut offset = 0;
            for p in parts {
                let pi = *p as usize;
                let k = *nodes[pi].shape.last().unwrap();
                acc_with(nodes, grads, pi, |dp| {
                    for row in 0..rows {
                        let src = &g[row * total_k + offset..row * total_k + offset + k];
                        for (d, gv) in dp[row * k..(row + 1) * k].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                });
                offset += k;
            }
        }

        Op::MovingAvg { a, kernel } => {
            let ai = *a as usize;
            let (b, l, n) = match nodes[ai].shape[..] {
                [b, l, n] => (b, l, n),
                _ => unreachable!(),
            };
            acc_with(nodes, grads, ai, |da| {
                kernels::moving_avg_transpose_seq(g, da, b, l, n, *kernel);
            });
        }

        Op::Mean { a } => {
            let ai = *a as usize;
            let inv_n = 1.0 / nodes[ai].numel() as f64;
            acc_with(nodes, grads, ai, |da| {
                let gv = g[0] * inv_n;
                for d in da.iter_mut() {
                    *d += gv;
                }
            });
        }

        Op::Sum { a } => {
            acc_with(nodes, grads, *a as usize, |da| {
                let gv = g[0];
                for d in da.iter_mut() {
                    *d += gv;
                }
            });
        }
    }
}
