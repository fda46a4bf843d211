//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records each differentiable op applied to tracked values. Ops
//! whose inputs are all untracked (or that run on a graph created with
//! [`Graph::no_grad`]) record nothing, so inference keeps no intermediates
//! alive. Nodes are appended in evaluation order, which makes the tape a
//! topological order: backward is a single reverse sweep.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::kernels::{self, pool, resize, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// A value produced by (or fed into) a graph.
///
/// `node` is set when the value participates in gradient tracking.
#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Tensor<T>,
    node: Option<NodeId>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Option<NodeId>,
        w: Option<NodeId>,
        b: Option<NodeId>,
        geom: ConvGeom,
        x_val: Tensor<T>,
        w_val: Tensor<T>,
    },
    BatchNorm {
        x: Option<NodeId>,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        gamma_val: Vec<T>,
        batch_stats: bool,
        dims: (usize, usize, usize),
    },
    Relu {
        x: NodeId,
        out: Tensor<T>,
    },
    Sigmoid {
        x: NodeId,
        out: Tensor<T>,
    },
    Resize {
        x: NodeId,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    AdaptiveAvg {
        x: NodeId,
        planes: usize,
        from: (usize, usize),
        bins: (usize, usize),
    },
    ChannelMean {
        x: NodeId,
        n: usize,
        c: usize,
        hw: usize,
    },
    ChannelMax {
        x: NodeId,
        c: usize,
        hw: usize,
        arg: Vec<u32>,
    },
    SpatialMean {
        x: NodeId,
        len: usize,
    },
    SpatialMax {
        x: NodeId,
        len: usize,
        arg: Vec<usize>,
    },
    Concat {
        parts: Vec<(Option<NodeId>, usize)>,
        outer: usize,
        inner: usize,
        total: usize,
    },
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Mul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        a_val: Tensor<T>,
        b_val: Tensor<T>,
    },
    Affine {
        x: NodeId,
        scale: T,
    },
    Blend {
        up: Option<NodeId>,
        low: Option<NodeId>,
        alpha: Option<NodeId>,
        up_val: Tensor<T>,
        low_val: Tensor<T>,
        alpha_val: Tensor<T>,
    },
    Sum {
        x: NodeId,
        len: usize,
    },
    Mean {
        x: NodeId,
        len: usize,
    },
    SoftmaxCe {
        logits: NodeId,
        coeff: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    op: Op<T>,
}

struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

/// Gradient tape. Single-writer: one graph drives one training step.
pub struct Graph<T> {
    tape: RefCell<Tape<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output shape of a broadcasting binary op. Operands must have equal rank
/// with each axis equal or 1, or one operand must be a single element.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(a.to_vec());
    }
    if nb == 1 && (b.len() <= a.len()) {
        return Ok(a.to_vec());
    }
    if na == 1 && (a.len() <= b.len()) {
        return Ok(b.to_vec());
    }
    if a.len() != b.len() {
        return Err(Error::dims(op, a, b));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::Broadcast { op, axis, lhs: x, rhs: y }),
        })
        .collect()
}

/// Element strides of `shape` when read as `out` (0 on broadcast axes).
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    if shape.iter().product::<usize>() == 1 {
        return vec![0; out.len()];
    }
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for axis in (0..out.len()).rev() {
        strides[axis] = if shape[axis] == 1 { 0 } else { acc };
        acc *= shape[axis];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element in order.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    loop {
        let base_a: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let base_b: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for j in 0..last {
            f(o, base_a + j * la, base_b + j * lb);
            o += 1;
        }
        if o == total {
            break;
        }
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

fn reduce_to<T: Scalar>(grad: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    if out == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    let mut red = vec![T::zero(); n];
    let st = bcast_strides(target, out);
    let zero = vec![0; out.len()];
    for_each_bcast(out, &st, &zero, |o, t, _| red[t] += grad[o]);
    red
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: Option<NodeId>, contrib: Vec<T>) {
    let Some(id) = id else { return };
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], id: Option<NodeId>, len: usize, f: impl FnOnce(&mut [T])) {
    let Some(id) = id else { return };
    let g = grads[id].get_or_insert_with(|| vec![T::zero(); len]);
    f(g);
}

/// Batch statistics source for [`Graph::batch_norm`].
pub enum NormStats<'a, T> {
    /// Normalize by the statistics of this batch.
    Batch,
    /// Normalize by stored running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics measured on a training batch.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (biased when only one element per channel).
    pub var: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    /// A graph that records ops for backward.
    pub fn new() -> Self {
        Graph { tape: RefCell::new(Tape { nodes: Vec::new(), leaf_grads: Vec::new() }), recording: true }
    }

    /// A graph that never records; every result is untracked.
    pub fn no_grad() -> Self {
        Graph { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: &[usize], op: Op<T>) -> NodeId {
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node { shape: shape.to_vec(), op });
        tape.leaf_grads.push(None);
        tape.nodes.len() - 1
    }

    fn tracked(&self, ids: &[Option<NodeId>]) -> bool {
        self.recording && ids.iter().any(Option::is_some)
    }

    fn finish(&self, op: &'static str, value: Tensor<T>, node: Option<Op<T>>) -> Result<Var<T>> {
        check_finite(op, value.data())?;
        let node = node.map(|o| self.push(value.shape(), o));
        Ok(Var { value, node })
    }

    /// Wraps a tensor as an input. Tracked when `requires_grad` and recording.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        let node = (requires_grad && self.recording).then(|| self.push(value.shape(), Op::Leaf));
        Var { value, node }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { value, node: None }
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: &Var<T>) -> Option<Tensor<T>> {
        let id = v.node?;
        let tape = self.tape.borrow();
        tape.leaf_grads[id].as_ref().map(|g| Tensor::from_parts(tape.nodes[id].shape.clone(), g.clone()))
    }

    pub fn zero_grad(&self) {
        for g in self.tape.borrow_mut().leaf_grads.iter_mut() {
            *g = None;
        }
    }

    pub fn conv2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        let geom = ConvGeom::new(x.shape(), weight.shape(), stride, padding)?;
        if let Some(b) = bias {
            if b.value.numel() != geom.out_channels {
                return Err(Error::dims("conv2d bias", b.shape(), &[geom.out_channels]));
            }
        }
        let out = kernels::conv2d_forward(&geom, x.value.data(), weight.value.data(), bias.map(|b| b.value.data()));
        let ids = [x.node, weight.node, bias.and_then(|b| b.node)];
        let op = self.tracked(&ids).then(|| Op::Conv {
            x: x.node,
            w: weight.node,
            b: ids[2],
            geom,
            x_val: x.value.clone(),
            w_val: weight.value.clone(),
        });
        self.finish("conv2d", Tensor::from_parts(geom.output_shape(), out), op)
    }

    /// Batch normalization over `[N,C,H,W]`. With [`NormStats::Batch`] the
    /// measured batch statistics are returned for running-average updates.
    pub fn batch_norm(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var<T>, Option<BatchStats<T>>)> {
        let (n, c, h, w) = x.value.dims4()?;
        if gamma.value.numel() != c || beta.value.numel() != c {
            return Err(Error::dims("batch_norm", x.shape(), gamma.shape()));
        }
        let hw = h * w;
        let m = n * hw;
        let xd = x.value.data();
        let (mean, var_biased, measured) = match stats {
            NormStats::Batch => {
                if m == 0 {
                    return Err(Error::invalid("batch_norm", "empty batch in training mode"));
                }
                let mf = T::from_usize(m).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let mu = s / mf;
                    let mut q = T::zero();
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            q += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / mf;
                }
                let unbiased = if m > 1 {
                    let corr = mf / T::from_usize(m - 1).unwrap();
                    var.iter().map(|&v| v * corr).collect()
                } else {
                    var.clone()
                };
                let measured = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(measured))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dims("batch_norm running stats", &[mean.len()], &[c]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = gamma.value.data();
        let bt = beta.value.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in r {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let batch_stats = measured.is_some();
        let op = self.tracked(&[x.node, gamma.node, beta.node]).then(|| Op::BatchNorm {
            x: x.node,
            gamma: gamma.node,
            beta: beta.node,
            xhat,
            inv_std,
            gamma_val: g.to_vec(),
            batch_stats,
            dims: (n, c, hw),
        });
        let v = self.finish("batch_norm", Tensor::from_parts(x.shape().to_vec(), out), op)?;
        Ok((v, measured))
    }

    pub fn relu(&self, x: &Var<T>) -> Result<Var<T>> {
        let out = x.value.map(|v| if v > T::zero() { v } else { T::zero() });
        let op = x.node.filter(|_| self.recording).map(|id| Op::Relu { x: id, out: out.clone() });
        self.finish("relu", out, op)
    }

    /// Logistic sigmoid, clamped so every output lies strictly inside (0, 1).
    pub fn sigmoid(&self, x: &Var<T>) -> Result<Var<T>> {
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon() / T::from_f64_lossy(2.0);
        let out = x.value.map(|v| {
            let s = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            s.max(lo).min(hi)
        });
        let op = x.node.filter(|_| self.recording).map(|id| Op::Sigmoid { x: id, out: out.clone() });
        self.finish("sigmoid", out, op)
    }

    /// Bilinear resampling to any positive target size (half-pixel centers).
    pub fn resize_bilinear(&self, x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
        let (n, c, h, w) = x.value.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize", "target size must be positive"));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("resize", "source size must be positive"));
        }
        let out = resize::bilinear_forward(x.value.data(), n * c, h, w, out_h, out_w);
        let op = x.node.filter(|_| self.recording).map(|id| Op::Resize {
            x: id,
            planes: n * c,
            from: (h, w),
            to: (out_h, out_w),
        });
        self.finish("resize", Tensor::from_parts(vec![n, c, out_h, out_w], out), op)
    }

    /// Bilinear upsampling; the target must be at least the source size.
    pub fn bilinear_upsample(&self, x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
        let (_, _, h, w) = x.value.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_upsample", "target size must be positive"));
        }
        if out_h < h || out_w < w {
            return Err(Error::invalid(
                "bilinear_upsample",
                format!("target {out_h}x{out_w} is smaller than source {h}x{w}"),
            ));
        }
        self.resize_bilinear(x, out_h, out_w)
    }

    /// Mean over floor/ceil-partitioned regions, producing `[N,C,bins_h,bins_w]`.
    pub fn adaptive_avg_pool(&self, x: &Var<T>, bins_h: usize, bins_w: usize) -> Result<Var<T>> {
        let (n, c, h, w) = x.value.dims4()?;
        if bins_h == 0 || bins_w == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("adaptive_avg_pool", "bins and input extents must be positive"));
        }
        let out = pool::adaptive_avg_forward(x.value.data(), n * c, h, w, bins_h, bins_w);
        let op = x.node.filter(|_| self.recording).map(|id| Op::AdaptiveAvg {
            x: id,
            planes: n * c,
            from: (h, w),
            bins: (bins_h, bins_w),
        });
        self.finish("adaptive_avg_pool", Tensor::from_parts(vec![n, c, bins_h, bins_w], out), op)
    }

    /// Per-pixel mean and max over channels, each `[N,1,H,W]`.
    pub fn channel_mean_max(&self, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let (n, c, h, w) = x.value.dims4()?;
        if c == 0 {
            return Err(Error::invalid("channel_mean_max", "need at least one channel"));
        }
        let hw = h * w;
        let (mean, max, arg) = pool::channel_mean_max(x.value.data(), n, c, hw);
        let shape = vec![n, 1, h, w];
        let rec = x.node.filter(|_| self.recording);
        let mean = self.finish(
            "channel_mean",
            Tensor::from_parts(shape.clone(), mean),
            rec.map(|id| Op::ChannelMean { x: id, n, c, hw }),
        )?;
        let max = self.finish(
            "channel_max",
            Tensor::from_parts(shape, max),
            rec.map(|id| Op::ChannelMax { x: id, c, hw, arg }),
        )?;
        Ok((mean, max))
    }

    /// Per-pixel channel mean only.
    pub fn channel_mean(&self, x: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = x.value.dims4()?;
        if c == 0 {
            return Err(Error::invalid("channel_mean", "need at least one channel"));
        }
        let hw = h * w;
        let (mean, _, _) = pool::channel_mean_max(x.value.data(), n, c, hw);
        let rec = x.node.filter(|_| self.recording);
        self.finish(
            "channel_mean",
            Tensor::from_parts(vec![n, 1, h, w], mean),
            rec.map(|id| Op::ChannelMean { x: id, n, c, hw }),
        )
    }

    /// Global average and max pooling per channel, each `[N,C,1,1]`.
    pub fn spatial_avg_max(&self, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let (n, c, h, w) = x.value.dims4()?;
        let len = h * w;
        if len == 0 {
            return Err(Error::invalid("spatial_avg_max", "empty spatial extent"));
        }
        let (avg, max, arg) = pool::plane_mean_max(x.value.data(), n * c, len);
        let shape = vec![n, c, 1, 1];
        let rec = x.node.filter(|_| self.recording);
        let avg = self.finish(
            "spatial_avg",
            Tensor::from_parts(shape.clone(), avg),
            rec.map(|id| Op::SpatialMean { x: id, len }),
        )?;
        let max = self.finish(
            "spatial_max",
            Tensor::from_parts(shape, max),
            rec.map(|id| Op::SpatialMax { x: id, len, arg }),
        )?;
        Ok((avg, max))
    }

    pub fn concat(&self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::dims("concat", first.shape(), p.shape()));
            }
            for (ax, (&a, &b)) in first.shape().iter().zip(p.shape()).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::Broadcast { op: "concat", axis: ax, lhs: a, rhs: b });
                }
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let ext = p.shape()[axis] * inner;
                out.extend_from_slice(&p.value.data()[o * ext..(o + 1) * ext]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let ids: Vec<Option<NodeId>> = parts.iter().map(|p| p.node).collect();
        let op = self.tracked(&ids).then(|| Op::Concat {
            parts: parts.iter().map(|p| (p.node, p.shape()[axis])).collect(),
            outer,
            inner,
            total,
        });
        self.finish("concat", Tensor::from_parts(shape, out), op)
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let shape = broadcast_shape("add", a.shape(), b.shape())?;
        let out = if a.shape() == b.shape() {
            a.value.data().iter().zip(b.value.data()).map(|(&x, &y)| x + y).collect()
        } else {
            let (sa, sb) = (bcast_strides(a.shape(), &shape), bcast_strides(b.shape(), &shape));
            let mut out = vec![T::zero(); shape.iter().product()];
            let (ad, bd) = (a.value.data(), b.value.data());
            for_each_bcast(&shape, &sa, &sb, |o, i, j| out[o] = ad[i] + bd[j]);
            out
        };
        let op = self.tracked(&[a.node, b.node]).then(|| Op::Add {
            a: a.node,
            b: b.node,
            a_shape: a.shape().to_vec(),
            b_shape: b.shape().to_vec(),
        });
        self.finish("add", Tensor::from_parts(shape, out), op)
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let shape = broadcast_shape("mul", a.shape(), b.shape())?;
        let (sa, sb) = (bcast_strides(a.shape(), &shape), bcast_strides(b.shape(), &shape));
        let mut out = vec![T::zero(); shape.iter().product()];
        let (ad, bd) = (a.value.data(), b.value.data());
        for_each_bcast(&shape, &sa, &sb, |o, i, j| out[o] = ad[i] * bd[j]);
        let op = self.tracked(&[a.node, b.node]).then(|| Op::Mul {
            a: a.node,
            b: b.node,
            a_val: a.value.clone(),
            b_val: b.value.clone(),
        });
        self.finish("mul", Tensor::from_parts(shape, out), op)
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: &Var<T>, scale: T, shift: T) -> Result<Var<T>> {
        let out = x.value.map(|v| scale * v + shift);
        let op = x.node.filter(|_| self.recording).map(|id| Op::Affine { x: id, scale });
        self.finish("affine", out, op)
    }

    pub fn scale(&self, x: &Var<T>, s: T) -> Result<Var<T>> {
        self.affine(x, s, T::zero())
    }

    /// Convex blend `up * alpha + low * (1 - alpha)` with `alpha`
    /// broadcast against the two equally shaped features.
    ///
    /// Evaluated as `low + alpha*(up - low)` for `alpha < 1/2` and
    /// `up - (1 - alpha)*(up - low)` otherwise, which returns `up` exactly at
    /// `alpha = 1`, `low` exactly at `alpha = 0`, reproduces equal inputs
    /// exactly, and never leaves `[min(up, low), max(up, low)]`.
    pub fn blend(&self, up: &Var<T>, low: &Var<T>, alpha: &Var<T>) -> Result<Var<T>> {
        if up.shape() != low.shape() {
            return Err(Error::dims("blend", up.shape(), low.shape()));
        }
        let shape = broadcast_shape("blend", up.shape(), alpha.shape())?;
        if shape != up.shape() {
            return Err(Error::dims("blend", up.shape(), alpha.shape()));
        }
        let sa = bcast_strides(alpha.shape(), &shape);
        let same = (0..shape.len()).map(|_| 0).collect::<Vec<_>>();
        let (u, l, a) = (up.value.data(), low.value.data(), alpha.value.data());
        let half = T::from_f64_lossy(0.5);
        let mut out = vec![T::zero(); u.len()];
        for_each_bcast(&shape, &same, &sa, |o, _, j| {
            let al = a[j];
            let d = u[o] - l[o];
            out[o] = if al < half { l[o] + al * d } else { u[o] - (T::one() - al) * d };
        });
        let op = self.tracked(&[up.node, low.node, alpha.node]).then(|| Op::Blend {
            up: up.node,
            low: low.node,
            alpha: alpha.node,
            up_val: up.value.clone(),
            low_val: low.value.clone(),
            alpha_val: alpha.value.clone(),
        });
        self.finish("blend", Tensor::from_parts(shape, out), op)
    }

    pub fn sum(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.value.sum();
        let op = x.node.filter(|_| self.recording).map(|id| Op::Sum { x: id, len: x.value.numel() });
        self.finish("sum", Tensor::scalar(s), op)
    }

    pub fn mean(&self, x: &Var<T>) -> Result<Var<T>> {
        if x.value.numel() == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s = x.value.sum() / T::from_usize(x.value.numel()).unwrap();
        let op = x.node.filter(|_| self.recording).map(|id| Op::Mean { x: id, len: x.value.numel() });
        self.finish("mean", Tensor::scalar(s), op)
    }

    /// Weighted softmax cross-entropy over `[N,K,H,W]` logits:
    /// `sum_p weight[p] * -log softmax(logits[p])[label[p]]`.
    ///
    /// `labels` and `weights` are indexed by pixel in `[N,H,W]` order; pixels
    /// with zero weight contribute nothing and their label is not read.
    pub fn softmax_cross_entropy(&self, logits: &Var<T>, labels: &[u8], weights: &[T]) -> Result<Var<T>> {
        let (n, k, h, w) = logits.value.dims4()?;
        let hw = h * w;
        if labels.len() != n * hw || weights.len() != n * hw {
            return Err(Error::dims("softmax_cross_entropy", &[n, h, w], &[labels.len()]));
        }
        let pixels = per_pixel_softmax(logits.value.data(), n, k, hw);
        let mut loss = T::zero();
        let mut coeff = vec![T::zero(); n * k * hw];
        for (p, (&lab, &wt)) in labels.iter().zip(weights).enumerate() {
            if wt == T::zero() {
                continue;
            }
            let lab = lab as usize;
            if lab >= k {
                return Err(Error::invalid(
                    "softmax_cross_entropy",
                    format!("label {lab} out of range for {k} classes"),
                ));
            }
            let (b, i) = (p / hw, p % hw);
            let probs = &pixels.probs[p * k..(p + 1) * k];
            loss += wt * pixels.nll(p, lab, k);
            for (c, &pr) in probs.iter().enumerate() {
                let onehot = if c == lab { T::one() } else { T::zero() };
                coeff[(b * k + c) * hw + i] = wt * (pr - onehot);
            }
        }
        let op = logits.node.filter(|_| self.recording).map(|id| Op::SoftmaxCe { logits: id, coeff });
        self.finish("softmax_cross_entropy", Tensor::scalar(loss), op)
    }

    /// Propagates d`loss`/d(node) through the tape and adds the result into
    /// the gradient of every tracked leaf. Calling it again without
    /// [`Graph::zero_grad`] accumulates.
    pub fn backward(&self, loss: &Var<T>) -> Result<()> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = loss.node.ok_or(Error::Untracked)?;
        let mut tape = self.tape.borrow_mut();
        let Tape { nodes, leaf_grads } = &mut *tape;
        let mut grads: Vec<Option<Vec<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&node.op, &node.shape, g, &mut grads, &mut leaf_grads[id]);
        }
        Ok(())
    }
}

struct PixelSoftmax<T> {
    probs: Vec<T>,
    /// `logit[label] - logsumexp` pieces needed for a stable NLL.
    max: Vec<T>,
    lse: Vec<T>,
    logits: Vec<T>,
}

impl<T: Scalar> PixelSoftmax<T> {
    fn nll(&self, p: usize, label: usize, k: usize) -> T {
        -(self.logits[p * k + label] - self.max[p] - self.lse[p])
    }
}

/// Softmax per pixel, returned pixel-major (`[N*H*W, K]`).
fn per_pixel_softmax<T: Scalar>(x: &[T], n: usize, k: usize, hw: usize) -> PixelSoftmax<T> {
    let mut probs = vec![T::zero(); n * hw * k];
    let mut logits = vec![T::zero(); n * hw * k];
    let mut max = vec![T::zero(); n * hw];
    let mut lse = vec![T::zero(); n * hw];
    for b in 0..n {
        for i in 0..hw {
            let p = b * hw + i;
            let row = &mut logits[p * k..(p + 1) * k];
            for c in 0..k {
                row[c] = x[(b * k + c) * hw + i];
            }
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            for c in 0..k {
                probs[p * k + c] = (row[c] - m).exp() / s;
            }
            max[p] = m;
            lse[p] = s.ln();
        }
    }
    PixelSoftmax { probs, max, lse, logits }
}

/// Softmax probabilities and per-pixel negative log-likelihood, without
/// touching a graph. Pixels whose label is `>= k` (ignore) get NLL 0.
pub fn softmax_nll<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(Vec<T>, Vec<T>)> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::dims("softmax_nll", &[n, h, w], &[labels.len()]));
    }
    let s = per_pixel_softmax(logits.data(), n, k, hw);
    let nll = labels
        .iter()
        .enumerate()
        .map(|(p, &l)| if (l as usize) < k { s.nll(p, l as usize, k) } else { T::zero() })
        .collect();
    Ok((s.probs, nll))
}

fn backprop<T: Scalar>(
    op: &Op<T>,
    shape: &[usize],
    g: Vec<T>,
    grads: &mut [Option<Vec<T>>],
    leaf: &mut Option<Vec<T>>,
) {
    match op {
        Op::Leaf => match leaf {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *leaf = Some(g),
        },
        Op::Conv { x, w, b, geom, x_val, w_val } => {
            let r =
                kernels::conv2d_backward(geom, x_val.data(), w_val.data(), &g, x.is_some(), w.is_some(), b.is_some());
            if let Some(dx) = r.input {
                accumulate(grads, *x, dx);
            }
            if let Some(dw) = r.weight {
                accumulate(grads, *w, dw);
            }
            if let Some(db) = r.bias {
                accumulate(grads, *b, db);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, gamma_val, batch_stats, dims: (n, c, hw) } => {
            let (n, c, hw) = (*n, *c, *hw);
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            if x.is_some() {
                let mut dx = vec![T::zero(); g.len()];
                let m = T::from_usize(n * hw).unwrap();
                for b in 0..n {
                    for ch in 0..c {
                        let k = gamma_val[ch] * inv_std[ch];
                        for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dx[i] = if *batch_stats {
                                k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            accumulate(grads, *gamma, sum_gx);
            accumulate(grads, *beta, sum_g);
        }
        Op::Relu { x, out } => {
            let dx = g.iter().zip(out.data()).map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() }).collect();
            accumulate(grads, Some(*x), dx);
        }
        Op::Sigmoid { x, out } => {
            let dx = g.iter().zip(out.data()).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
            accumulate(grads, Some(*x), dx);
        }
        Op::Resize { x, planes, from, to } => {
            let dx = resize::bilinear_backward(&g, *planes, from.0, from.1, to.0, to.1);
            accumulate(grads, Some(*x), dx);
        }
        Op::AdaptiveAvg { x, planes, from, bins } => {
            let dx = pool::adaptive_avg_backward(&g, *planes, from.0, from.1, bins.0, bins.1);
            accumulate(grads, Some(*x), dx);
        }
        Op::ChannelMean { x, n, c, hw } => {
            let cf = T::from_usize(*c).unwrap();
            add_into(grads, Some(*x), n * c * hw, |dx| {
                for b in 0..*n {
                    for ch in 0..*c {
                        let base = (b * c + ch) * hw;
                        for i in 0..*hw {
                            dx[base + i] += g[b * hw + i] / cf;
                        }
                    }
                }
            });
        }
        Op::ChannelMax { x, c, hw, arg } => {
            let n = g.len() / hw;
            add_into(grads, Some(*x), n * c * hw, |dx| {
                for (p, (&gv, &a)) in g.iter().zip(arg).enumerate() {
                    let (b, i) = (p / hw, p % hw);
                    dx[(b * c + a as usize) * hw + i] += gv;
                }
            });
        }
        Op::SpatialMean { x, len } => {
            let lf = T::from_usize(*len).unwrap();
            let planes = g.len();
            add_into(grads, Some(*x), planes * len, |dx| {
                for (p, &gv) in g.iter().enumerate() {
                    for v in &mut dx[p * len..(p + 1) * len] {
                        *v += gv / lf;
                    }
                }
            });
        }
        Op::SpatialMax { x, len, arg } => {
            add_into(grads, Some(*x), g.len() * len, |dx| {
                for (p, (&gv, &a)) in g.iter().zip(arg).enumerate() {
                    dx[p * len + a] += gv;
                }
            });
        }
        Op::Concat { parts, outer, inner, total } => {
            let mut offset = 0;
            for &(id, ext) in parts {
                if id.is_some() {
                    let mut part = Vec::with_capacity(outer * ext * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        part.extend_from_slice(&g[start..start + ext * inner]);
                    }
                    accumulate(grads, id, part);
                }
                offset += ext;
            }
        }
        Op::Add { a, b, a_shape, b_shape } => {
            if a.is_some() {
                accumulate(grads, *a, reduce_to(&g, shape, a_shape));
            }
            if b.is_some() {
                accumulate(grads, *b, reduce_to(&g, shape, b_shape));
            }
        }
        Op::Mul { a, b, a_val, b_val } => {
            let (sa, sb) = (bcast_strides(a_val.shape(), shape), bcast_strides(b_val.shape(), shape));
            let (ad, bd) = (a_val.data(), b_val.data());
            if a.is_some() {
                let mut da = vec![T::zero(); ad.len()];
                for_each_bcast(shape, &sa, &sb, |o, i, j| da[i] += g[o] * bd[j]);
                accumulate(grads, *a, da);
            }
            if b.is_some() {
                let mut db = vec![T::zero(); bd.len()];
                for_each_bcast(shape, &sa, &sb, |o, i, j| db[j] += g[o] * ad[i]);
                accumulate(grads, *b, db);
            }
        }
        Op::Affine { x, scale } => {
            accumulate(grads, Some(*x), g.into_iter().map(|v| v * *scale).collect());
        }
        Op::Blend { up, low, alpha, up_val, low_val, alpha_val } => {
            let sa = bcast_strides(alpha_val.shape(), shape);
            let same = vec![0; shape.len()];
            let (u, l, a) = (up_val.data(), low_val.data(), alpha_val.data());
            let mut du = up.map(|_| vec![T::zero(); u.len()]);
            let mut dl = low.map(|_| vec![T::zero(); l.len()]);
            let mut da = alpha.map(|_| vec![T::zero(); a.len()]);
            for_each_bcast(shape, &same, &sa, |o, _, j| {
                let gv = g[o];
                if let Some(du) = du.as_mut() {
                    du[o] = gv * a[j];
                }
                if let Some(dl) = dl.as_mut() {
                    dl[o] = gv * (T::one() - a[j]);
                }
                if let Some(da) = da.as_mut() {
                    da[j] += gv * (u[o] - l[o]);
                }
            });
            if let Some(du) = du {
                accumulate(grads, *up, du);
            }
            if let Some(dl) = dl {
                accumulate(grads, *low, dl);
            }
            if let Some(da) = da {
                accumulate(grads, *alpha, da);
            }
        }
        Op::Sum { x, len } => {
            let gv = g[0];
            add_into(grads, Some(*x), *len, |dx| dx.iter_mut().for_each(|v| *v += gv));
        }
        Op::Mean { x, len } => {
            let gv = g[0] / T::from_usize(*len).unwrap();
            add_into(grads, Some(*x), *len, |dx| dx.iter_mut().for_each(|v| *v += gv));
        }
        Op::SoftmaxCe { logits, coeff } => {
            let gv = g[0];
            accumulate(grads, Some(*logits), coeff.iter().map(|&c| c * gv).collect());
        }
    }
}
