//! The op tape: records forward computation, replays the chain rule.
//!
//! Every op validates its inputs, computes eagerly, checks the output for
//! non-finite values and appends one node. Node ids are handed out in
//! insertion order, so every input id precedes its consumer and backward
//! is a single reverse sweep.
//!
//! A graph in [`GraphMode::Inference`] lets callers [`release`](Graph::release)
//! intermediate buffers once they are dead (backward and replay are then
//! unavailable); training graphs keep everything.

use super::kernels;
use super::{check_finite, numel, Padding, Result, Tensor, TensorError};

/// Handle to one value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphMode {
    Train,
    Inference,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { stride: usize, pad: [usize; 2] },
    Conv3d { stride: usize, pad: [usize; 3] },
    Interp3d,
    Softmax { axis: usize },
    Concat { axis: usize },
    BroadcastAdd,
    Expand,
    Permute { perm: Vec<usize> },
    Reshape,
    Narrow { axis: usize, start: usize, len: usize },
    Relu,
    Mul,
    Sum,
    Scale { factor: f64 },
    MaskedNll { labels: Vec<u8>, mask: Vec<bool>, count: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv3d { .. } => "conv3d",
            Op::Interp3d => "interp3d",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::BroadcastAdd => "broadcast_add",
            Op::Expand => "expand",
            Op::Permute { .. } => "permute",
            Op::Reshape => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Relu => "relu",
            Op::Mul => "mul",
            Op::Sum => "sum",
            Op::Scale { .. } => "scale",
            Op::MaskedNll { .. } => "masked_nll",
        }
    }
}

struct Slot {
    shape: Vec<usize>,
    data: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    inputs: Vec<Var>,
}

pub struct Graph {
    slots: Vec<Slot>,
    grads: Vec<Option<Vec<f64>>>,
    mode: GraphMode,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            slots: Vec::new(),
            grads: Vec::new(),
            mode: GraphMode::Train,
        }
    }

    pub fn inference() -> Self {
        Graph {
            slots: Vec::new(),
            grads: Vec::new(),
            mode: GraphMode::Inference,
        }
    }

    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    pub fn num_nodes(&self) -> usize {
        self.slots.len()
    }

    /// Registers a tensor as a graph input, copying its values.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
            Vec::new(),
        )
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.slots[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.slots[v.0]
            .data
            .as_deref()
            .expect("value buffer was released")
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("graph slot holds a valid tensor")
    }

    /// Drops a value buffer in inference mode; no-op on training graphs.
    pub fn release(&mut self, v: Var) {
        if self.mode == GraphMode::Inference {
            self.slots[v.0].data = None;
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
        inputs: Vec<Var>,
    ) -> Var {
        self.slots.push(Slot {
            shape,
            data: Some(data),
            requires_grad,
            op,
            inputs,
        });
        Var(self.slots.len() - 1)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.slots[v.0].requires_grad)
    }

    fn record(
        &mut self,
        shape: Vec<usize>,
        op: Op,
        inputs: Vec<Var>,
    ) -> Result<Var> {
        let data = self.eval(&op, &inputs, &shape)?;
        check_finite(op.name(), &data)?;
        let rg = self.any_grad(&inputs);
        Ok(self.push(shape, data, rg, op, inputs))
    }

    // ---- op recording -----------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "conv2d",
                expected: 4,
                got: xs,
            });
        }
        if ws.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "conv2d",
                expected: 4,
                got: ws,
            });
        }
        if xs[1] != ws[1] {
            return Err(TensorError::ChannelMismatch {
                op: "conv2d",
                expected: ws[1],
                got: xs[1],
            });
        }
        if bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                a: bs,
                b: vec![ws[0]],
            });
        }
        let (oh, ph) = kernels::conv_axis("conv2d", xs[2], ws[2], stride, padding)?;
        let (ow, pw) = kernels::conv_axis("conv2d", xs[3], ws[3], stride, padding)?;
        self.record(
            vec![xs[0], ws[0], oh, ow],
            Op::Conv2d {
                stride,
                pad: [ph, pw],
            },
            vec![input, weight, bias],
        )
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 5 {
            return Err(TensorError::RankMismatch {
                op: "conv3d",
                expected: 5,
                got: xs,
            });
        }
        if ws.len() != 5 {
            return Err(TensorError::RankMismatch {
                op: "conv3d",
                expected: 5,
                got: ws,
            });
        }
        if xs[1] != ws[1] {
            return Err(TensorError::ChannelMismatch {
                op: "conv3d",
                expected: ws[1],
                got: xs[1],
            });
        }
        if bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                a: bs,
                b: vec![ws[0]],
            });
        }
        let (od, pd) = kernels::conv_axis("conv3d", xs[2], ws[2], stride, padding)?;
        let (oh, ph) = kernels::conv_axis("conv3d", xs[3], ws[3], stride, padding)?;
        let (ow, pw) = kernels::conv_axis("conv3d", xs[4], ws[4], stride, padding)?;
        self.record(
            vec![xs[0], ws[0], od, oh, ow],
            Op::Conv3d {
                stride,
                pad: [pd, ph, pw],
            },
            vec![input, weight, bias],
        )
    }

    /// Trilinear resample by a uniform scale; output dims are
    /// `round(dim * scale)`.
    pub fn interp3d(&mut self, input: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(TensorError::NonPositiveScale {
                op: "interp3d",
                scale,
            });
        }
        let xs = self.shape(input).to_vec();
        if xs.len() != 5 {
            return Err(TensorError::RankMismatch {
                op: "interp3d",
                expected: 5,
                got: xs,
            });
        }
        let target = [
            (xs[2] as f64 * scale).round() as usize,
            (xs[3] as f64 * scale).round() as usize,
            (xs[4] as f64 * scale).round() as usize,
        ];
        self.interp3d_to(input, target)
    }

    /// Trilinear resample to explicit spatial dims.
    pub fn interp3d_to(&mut self, input: Var, target: [usize; 3]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 5 {
            return Err(TensorError::RankMismatch {
                op: "interp3d",
                expected: 5,
                got: xs,
            });
        }
        if target.contains(&0) {
            return Err(TensorError::DegenerateOutput {
                op: "interp3d",
                input: xs,
            });
        }
        // Unit scale is the identity; keep it bit-exact and cheap.
        if target == [xs[2], xs[3], xs[4]] {
            let data = self.value(input).to_vec();
            let rg = self.any_grad(&[input]);
            return Ok(self.push(xs, data, rg, Op::Interp3d, vec![input]));
        }
        self.record(
            vec![xs[0], xs[1], target[0], target[1], target[2]],
            Op::Interp3d,
            vec![input],
        )
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() {
            return Err(TensorError::AxisOutOfBounds {
                op: "softmax",
                axis,
                shape: xs,
            });
        }
        self.record(xs, Op::Softmax { axis }, vec![input])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfBounds {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut out_shape = first.clone();
        for v in &inputs[1..] {
            let s = self.shape(*v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    a: first,
                    b: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        self.record(out_shape, Op::Concat { axis }, inputs.to_vec())
    }

    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: "broadcast_add",
            a: sa,
            b: sb,
        })?;
        self.record(out, Op::BroadcastAdd, vec![a, b])
    }

    /// Broadcasts a tensor up to `target` (trailing-axis alignment with
    /// size-1 expansion); backward sums over the expanded axes.
    pub fn expand(&mut self, input: Var, target: &[usize]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ok = broadcast_shape(&xs, target).map(|s| s == target) == Some(true);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                a: xs,
                b: target.to_vec(),
            });
        }
        self.record(target.to_vec(), Op::Expand, vec![input])
    }

    pub fn permute(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                a: xs,
                b: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        self.record(out_shape, Op::Permute { perm: perm.to_vec() }, vec![input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if numel(&xs) != numel(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                a: xs,
                b: shape.to_vec(),
            });
        }
        self.record(shape.to_vec(), Op::Reshape, vec![input])
    }

    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() {
            return Err(TensorError::AxisOutOfBounds {
                op: "narrow",
                axis,
                shape: xs,
            });
        }
        if len == 0 || start + len > xs[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "narrow",
                a: xs,
                b: vec![start, len],
            });
        }
        let mut out = xs.clone();
        out[axis] = len;
        self.record(out, Op::Narrow { axis, start, len }, vec![input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        self.record(xs, Op::Relu, vec![input])
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                a: sa,
                b: sb,
            });
        }
        self.record(sa, Op::Mul, vec![a, b])
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.record(vec![1], Op::Sum, vec![input])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        self.record(xs, Op::Scale { factor }, vec![input])
    }

    /// Mean negative log-likelihood over labeled voxels.
    ///
    /// `probs` is `[B,N,D,H,W]`, `labels` is `[B,D,H,W]` with 255 marking
    /// unlabeled voxels, `mask` is `[B,H,W]`. Voxels outside the mask (or
    /// labeled 255) contribute neither loss nor gradient. Probabilities
    /// are clamped to 1e-12 before the log.
    pub fn masked_nll(&mut self, probs: Var, labels: &[u8], mask: &[bool]) -> Result<Var> {
        let ps = self.shape(probs).to_vec();
        if ps.len() != 5 {
            return Err(TensorError::RankMismatch {
                op: "masked_nll",
                expected: 5,
                got: ps,
            });
        }
        let (b, n, d, h, w) = (ps[0], ps[1], ps[2], ps[3], ps[4]);
        if labels.len() != b * d * h * w || mask.len() != b * h * w {
            return Err(TensorError::ShapeMismatch {
                op: "masked_nll",
                a: vec![labels.len(), mask.len()],
                b: vec![b * d * h * w, b * h * w],
            });
        }
        let mut count = 0usize;
        for bi in 0..b {
            for di in 0..d {
                for pi in 0..h * w {
                    let l = labels[(bi * d + di) * h * w + pi];
                    if mask[bi * h * w + pi] && l != 255 {
                        if l as usize >= n {
                            return Err(TensorError::InvalidLabel {
                                label: l,
                                classes: n,
                            });
                        }
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        self.record(
            vec![1],
            Op::MaskedNll {
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            vec![probs],
        )
    }

    // ---- forward evaluation ------------------------------------------------

    fn eval(&self, op: &Op, inputs: &[Var], out_shape: &[usize]) -> Result<Vec<f64>> {
        let val = |v: &Var| self.value(*v);
        Ok(match op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::Conv2d { stride, pad } => {
                let xs = self.shape(inputs[0]);
                let ws = self.shape(inputs[1]);
                kernels::conv2d_forward(
                    val(&inputs[0]),
                    val(&inputs[1]),
                    val(&inputs[2]),
                    xs[0],
                    xs[1],
                    xs[2],
                    xs[3],
                    ws[0],
                    ws[2],
                    ws[3],
                    *stride,
                    pad[0],
                    pad[1],
                    out_shape[2],
                    out_shape[3],
                )
            }
            Op::Conv3d { stride, pad } => {
                let xs = self.shape(inputs[0]);
                let ws = self.shape(inputs[1]);
                kernels::conv3d_forward(
                    val(&inputs[0]),
                    val(&inputs[1]),
                    val(&inputs[2]),
                    xs[0],
                    xs[1],
                    xs[2],
                    xs[3],
                    xs[4],
                    ws[0],
                    ws[2],
                    ws[3],
                    ws[4],
                    *stride,
                    *pad,
                    out_shape[2],
                    out_shape[3],
                    out_shape[4],
                )
            }
            Op::Interp3d => {
                let xs = self.shape(inputs[0]);
                kernels::interp3d_forward(
                    val(&inputs[0]),
                    xs[0] * xs[1],
                    xs[2],
                    xs[3],
                    xs[4],
                    out_shape[2],
                    out_shape[3],
                    out_shape[4],
                )
            }
            Op::Softmax { axis } => {
                let xs = self.shape(inputs[0]);
                let (outer, n, inner) = split_axis(xs, *axis);
                kernels::softmax_forward(val(&inputs[0]), outer, n, inner)
            }
            Op::Concat { axis } => {
                let mut out = vec![0.0; numel(out_shape)];
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0usize;
                for v in inputs {
                    let s = self.shape(*v);
                    let ai = s[*axis];
                    let src = val(v);
                    for o in 0..outer {
                        let dst_base = (o * total_axis + offset) * inner;
                        let src_base = o * ai * inner;
                        out[dst_base..dst_base + ai * inner]
                            .copy_from_slice(&src[src_base..src_base + ai * inner]);
                    }
                    offset += ai;
                }
                out
            }
            Op::BroadcastAdd => {
                let sa = self.shape(inputs[0]);
                let sb = self.shape(inputs[1]);
                broadcast_binary(val(&inputs[0]), sa, val(&inputs[1]), sb, out_shape)
            }
            Op::Expand => {
                let xs = self.shape(inputs[0]);
                let zeros_shape = out_shape.to_vec();
                // expansion = broadcast of x against an implicit zero tensor
                let strides = broadcast_strides(xs, &zeros_shape);
                copy_broadcast(val(&inputs[0]), &strides, &zeros_shape)
            }
            Op::Permute { perm } => {
                let xs = self.shape(inputs[0]);
                permute_copy(val(&inputs[0]), xs, perm)
            }
            Op::Reshape => val(&inputs[0]).to_vec(),
            Op::Narrow { axis, start, len } => {
                let xs = self.shape(inputs[0]);
                let inner: usize = xs[axis + 1..].iter().product();
                let outer: usize = xs[..*axis].iter().product();
                let src = val(&inputs[0]);
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src_base = (o * xs[*axis] + start) * inner;
                    out[o * len * inner..(o + 1) * len * inner]
                        .copy_from_slice(&src[src_base..src_base + len * inner]);
                }
                out
            }
            Op::Relu => val(&inputs[0]).iter().map(|&x| x.max(0.0)).collect(),
            Op::Mul => val(&inputs[0])
                .iter()
                .zip(val(&inputs[1]).iter())
                .map(|(a, b)| a * b)
                .collect(),
            Op::Sum => {
                let mut acc = 0.0;
                for x in val(&inputs[0]) {
                    acc += x;
                }
                vec![acc]
            }
            Op::Scale { factor } => val(&inputs[0]).iter().map(|&x| factor * x).collect(),
            Op::MaskedNll {
                labels,
                mask,
                count,
            } => {
                let ps = self.shape(inputs[0]);
                let (b, n, d, hw) = (ps[0], ps[1], ps[2], ps[3] * ps[4]);
                let probs = val(&inputs[0]);
                let mut acc = 0.0;
                for bi in 0..b {
                    for di in 0..d {
                        for pi in 0..hw {
                            let l = labels[(bi * d + di) * hw + pi];
                            if mask[bi * hw + pi] && l != 255 {
                                let p = probs[((bi * n + l as usize) * d + di) * hw + pi];
                                acc -= p.max(1e-12).ln();
                            }
                        }
                    }
                }
                vec![acc / *count as f64]
            }
        })
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Gradients of leaf values are
    /// retained and can be read with [`grad`](Graph::grad); intermediate
    /// gradients are dropped as soon as they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.mode == GraphMode::Inference {
            return Err(TensorError::InferenceGraph { op: "backward" });
        }
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::LossNotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.slots.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.slots[i].requires_grad && !matches!(self.slots[i].op, Op::Leaf) {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let keep_leaf = matches!(self.slots[i].op, Op::Leaf);
            self.propagate(i, &g, &mut grads)?;
            if keep_leaf {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let slot = &self.slots[i];
        let inputs = &slot.inputs;
        let needs: Vec<bool> = inputs
            .iter()
            .map(|v| self.slots[v.0].requires_grad)
            .collect();
        let val = |v: &Var| self.value(*v);
        match &slot.op {
            Op::Leaf => {}
            Op::Conv2d { stride, pad } => {
                let xs = self.shape(inputs[0]);
                let ws = self.shape(inputs[1]);
                let os = &slot.shape;
                let (gi, gw, gb) = kernels::conv2d_backward(
                    val(&inputs[0]),
                    val(&inputs[1]),
                    g,
                    xs[0],
                    xs[1],
                    xs[2],
                    xs[3],
                    ws[0],
                    ws[2],
                    ws[3],
                    *stride,
                    pad[0],
                    pad[1],
                    os[2],
                    os[3],
                    needs[0],
                );
                if let Some(gi) = gi {
                    accum(&mut grads[inputs[0].0], gi);
                }
                if needs[1] {
                    accum(&mut grads[inputs[1].0], gw);
                }
                if needs[2] {
                    accum(&mut grads[inputs[2].0], gb);
                }
            }
            Op::Conv3d { stride, pad } => {
                let xs = self.shape(inputs[0]);
                let ws = self.shape(inputs[1]);
                let os = &slot.shape;
                let (gi, gw, gb) = kernels::conv3d_backward(
                    val(&inputs[0]),
                    val(&inputs[1]),
                    g,
                    xs[0],
                    xs[1],
                    xs[2],
                    xs[3],
                    xs[4],
                    ws[0],
                    ws[2],
                    ws[3],
                    ws[4],
                    *stride,
                    *pad,
                    os[2],
                    os[3],
                    os[4],
                    needs[0],
                );
                if let Some(gi) = gi {
                    accum(&mut grads[inputs[0].0], gi);
                }
                if needs[1] {
                    accum(&mut grads[inputs[1].0], gw);
                }
                if needs[2] {
                    accum(&mut grads[inputs[2].0], gb);
                }
            }
            Op::Interp3d => {
                if needs[0] {
                    let xs = self.shape(inputs[0]);
                    let os = &slot.shape;
                    let gi = if os[2..] == xs[2..] {
                        g.to_vec()
                    } else {
                        kernels::interp3d_backward(
                            g,
                            xs[0] * xs[1],
                            xs[2],
                            xs[3],
                            xs[4],
                            os[2],
                            os[3],
                            os[4],
                        )
                    };
                    accum(&mut grads[inputs[0].0], gi);
                }
            }
            Op::Softmax { axis } => {
                if needs[0] {
                    let (outer, n, inner) = split_axis(&slot.shape, *axis);
                    let out = slot.data.as_deref().expect("train graph keeps data");
                    let gi = kernels::softmax_backward(out, g, outer, n, inner);
                    accum(&mut grads[inputs[0].0], gi);
                }
            }
            Op::Concat { axis } => {
                let inner: usize = slot.shape[axis + 1..].iter().product();
                let outer: usize = slot.shape[..*axis].iter().product();
                let total_axis = slot.shape[*axis];
                let mut offset = 0usize;
                for (k, v) in inputs.iter().enumerate() {
                    let ai = self.shape(*v)[*axis];
                    if needs[k] {
                        let mut gi = vec![0.0; outer * ai * inner];
                        for o in 0..outer {
                            let src_base = (o * total_axis + offset) * inner;
                            gi[o * ai * inner..(o + 1) * ai * inner]
                                .copy_from_slice(&g[src_base..src_base + ai * inner]);
                        }
                        accum(&mut grads[v.0], gi);
                    }
                    offset += ai;
                }
            }
            Op::BroadcastAdd => {
                for (k, v) in inputs.iter().enumerate() {
                    if needs[k] {
                        let vs = self.shape(*v);
                        let gi = reduce_broadcast(g, &slot.shape, vs);
                        accum(&mut grads[v.0], gi);
                    }
                }
            }
            Op::Expand => {
                if needs[0] {
                    let vs = self.shape(inputs[0]);
                    let gi = reduce_broadcast(g, &slot.shape, vs);
                    accum(&mut grads[inputs[0].0], gi);
                }
            }
            Op::Permute { perm } => {
                if needs[0] {
                    let mut inv = vec![0usize; perm.len()];
                    for (k, &p) in perm.iter().enumerate() {
                        inv[p] = k;
                    }
                    let gi = permute_copy(g, &slot.shape, &inv);
                    accum(&mut grads[inputs[0].0], gi);
                }
            }
            Op::Reshape => {
                if needs[0] {
                    accum(&mut grads[inputs[0].0], g.to_vec());
                }
            }
            Op::Narrow { axis, start, len } => {
                if needs[0] {
                    let xs = self.shape(inputs[0]);
                    let inner: usize = xs[axis + 1..].iter().product();
                    let outer: usize = xs[..*axis].iter().product();
                    let mut gi = vec![0.0; numel(xs)];
                    for o in 0..outer {
                        let dst_base = (o * xs[*axis] + start) * inner;
                        gi[dst_base..dst_base + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    accum(&mut grads[inputs[0].0], gi);
                }
            }
            Op::Relu => {
                if needs[0] {
                    let x = val(&inputs[0]);
                    let gi = x
                        .iter()
                        .zip(g.iter())
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    accum(&mut grads[inputs[0].0], gi);
                }
            }
            Op::Mul => {
                let a = val(&inputs[0]);
                let b = val(&inputs[1]);
                if needs[0] {
                    let gi = b.iter().zip(g.iter()).map(|(&b, &g)| b * g).collect();
                    accum(&mut grads[inputs[0].0], gi);
                }
                if needs[1] {
                    let gi = a.iter().zip(g.iter()).map(|(&a, &g)| a * g).collect();
                    accum(&mut grads[inputs[1].0], gi);
                }
            }
            Op::Sum => {
                if needs[0] {
                    let n = numel(self.shape(inputs[0]));
                    accum(&mut grads[inputs[0].0], vec![g[0]; n]);
                }
            }
            Op::Scale { factor } => {
                if needs[0] {
                    let gi = g.iter().map(|&g| factor * g).collect();
                    accum(&mut grads[inputs[0].0], gi);
                }
            }
            Op::MaskedNll {
                labels,
                mask,
                count,
            } => {
                if needs[0] {
                    let ps = self.shape(inputs[0]);
                    let (b, n, d, hw) = (ps[0], ps[1], ps[2], ps[3] * ps[4]);
                    let probs = val(&inputs[0]);
                    let mut gi = vec![0.0; probs.len()];
                    let scale = g[0] / *count as f64;
                    for bi in 0..b {
                        for di in 0..d {
                            for pi in 0..hw {
                                let l = labels[(bi * d + di) * hw + pi];
                                if mask[bi * hw + pi] && l != 255 {
                                    let idx = ((bi * n + l as usize) * d + di) * hw + pi;
                                    let p = probs[idx];
                                    if p >= 1e-12 {
                                        gi[idx] = -scale / p;
                                    }
                                }
                            }
                        }
                    }
                    accum(&mut grads[inputs[0].0], gi);
                }
            }
        }
        Ok(())
    }

    /// Gradient of a leaf after [`backward`](Graph::backward); `None` for
    /// values that did not receive one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient buffer of a leaf, zero-filled when the value is
    /// disconnected from the loss.
    pub fn grad_vec(&self, v: Var) -> Vec<f64> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel(self.shape(v))],
        }
    }

    /// Recomputes every recorded op from its stored inputs and checks the
    /// result is bitwise identical to what was recorded.
    pub fn replay_matches(&self) -> Result<bool> {
        if self.mode == GraphMode::Inference {
            return Err(TensorError::InferenceGraph { op: "replay" });
        }
        for slot in &self.slots {
            if matches!(slot.op, Op::Leaf) {
                continue;
            }
            let recomputed = self.eval(&slot.op, &slot.inputs, &slot.shape)?;
            let stored = slot.data.as_deref().expect("train graph keeps data");
            if recomputed.len() != stored.len()
                || recomputed
                    .iter()
                    .zip(stored.iter())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn accum(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        None => *dst = Some(src),
        Some(d) => {
            for (d, s) in d.iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Trailing-axis broadcast of two shapes; `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Element strides of `shape` viewed inside broadcast shape `out`
/// (0 where the axis is expanded).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn broadcast_binary(a: &[f64], sa: &[usize], b: &[f64], sb: &[usize], out: &[usize]) -> Vec<f64> {
    let stra = broadcast_strides(sa, out);
    let strb = broadcast_strides(sb, out);
    let last = *out.last().unwrap_or(&1);
    let rows: usize = out[..out.len().saturating_sub(1)].iter().product();
    let (la, lb) = (
        *stra.last().unwrap_or(&0),
        *strb.last().unwrap_or(&0),
    );
    let mut result = vec![0.0; numel(out)];
    let lead = out.len().saturating_sub(1);
    for r in 0..rows {
        let (mut off_a, mut off_b) = (0usize, 0usize);
        let mut rem = r;
        for i in (0..lead).rev() {
            let idx = rem % out[i];
            rem /= out[i];
            off_a += idx * stra[i];
            off_b += idx * strb[i];
        }
        let dst = &mut result[r * last..(r + 1) * last];
        match (la, lb) {
            (1, 1) => {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = a[off_a + k] + b[off_b + k];
                }
            }
            (1, 0) => {
                let bv = b[off_b];
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = a[off_a + k] + bv;
                }
            }
            (0, 1) => {
                let av = a[off_a];
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = av + b[off_b + k];
                }
            }
            _ => {
                for d in dst.iter_mut() {
                    *d = a[off_a] + b[off_b];
                }
            }
        }
    }
    result
}

fn copy_broadcast(src: &[f64], strides: &[usize], out: &[usize]) -> Vec<f64> {
    let last = *out.last().unwrap_or(&1);
    let rows: usize = out[..out.len().saturating_sub(1)].iter().product();
    let ls = *strides.last().unwrap_or(&0);
    let lead = out.len().saturating_sub(1);
    let mut result = vec![0.0; numel(out)];
    for r in 0..rows {
        let mut off = 0usize;
        let mut rem = r;
        for i in (0..lead).rev() {
            let idx = rem % out[i];
            rem /= out[i];
            off += idx * strides[i];
        }
        let dst = &mut result[r * last..(r + 1) * last];
        if ls == 1 {
            dst.copy_from_slice(&src[off..off + last]);
        } else {
            dst.fill(src[off]);
        }
    }
    result
}

/// Sums `grad` (shaped `out`) over the axes on which `target_shape` was
/// broadcast, producing a gradient of `target_shape`'s size.
fn reduce_broadcast(grad: &[f64], out: &[usize], target_shape: &[usize]) -> Vec<f64> {
    let strides = broadcast_strides(target_shape, out);
    let last = *out.last().unwrap_or(&1);
    let rows: usize = out[..out.len().saturating_sub(1)].iter().product();
    let ls = *strides.last().unwrap_or(&0);
    let lead = out.len().saturating_sub(1);
    let mut result = vec![0.0; numel(target_shape)];
    for r in 0..rows {
        let mut off = 0usize;
        let mut rem = r;
        for i in (0..lead).rev() {
            let idx = rem % out[i];
            rem /= out[i];
            off += idx * strides[i];
        }
        let src = &grad[r * last..(r + 1) * last];
        if ls == 1 {
            for (k, s) in src.iter().enumerate() {
                result[off + k] += s;
            }
        } else {
            let mut acc = 0.0;
            for s in src {
                acc += s;
            }
            result[off] += acc;
        }
    }
    result
}

fn permute_copy(src: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut off = 0usize;
        for (i, &ix) in idx.iter().enumerate() {
            off += ix * src_strides[i];
        }
        *slot = src[off];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}
