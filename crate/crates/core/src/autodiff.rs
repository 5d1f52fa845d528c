//! Reverse-mode automatic differentiation over the operation set the two
//! networks need.
//!
//! A [`Tape`] is an append-only graph: every operation pushes one node whose
//! inputs have strictly smaller ids, so the construction order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep that
//! visits each node exactly once.
//!
//! Gradients accumulate by addition and persist on the tape: calling
//! `backward` twice without [`Tape::zero_grads`] doubles them.

use crate::error::CoreError;
use crate::kernels::{self, PadMode};
use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;
use crate::Result;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        pad: PadMode,
    },
    Conv3d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        pad: PadMode,
    },
    Relu {
        input: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
    /// features [C,H,W] * gate [1,H,W]; the gate gradient sums over channels.
    MulGate {
        features: NodeId,
        gate: NodeId,
    },
    ScalarMul {
        input: NodeId,
        factor: T,
    },
    ConcatChannels {
        parts: Vec<NodeId>,
    },
    Reshape {
        input: NodeId,
    },
    ClampUnit {
        input: NodeId,
    },
    Sum {
        input: NodeId,
    },
    L1Loss {
        pred: NodeId,
        target: NodeId,
    },
    Unfold {
        input: NodeId,
        patch: usize,
    },
    FoldMean {
        patches: NodeId,
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
    },
    Relevance {
        queries: NodeId,
        keys: NodeId,
    },
    /// Per-row maximum; gradient routes to the recorded (first) argmax entry.
    RowMax {
        matrix: NodeId,
        argmax: Vec<usize>,
    },
    /// Row select; backward scatter-adds, so repeated indices accumulate.
    GatherRows {
        source: NodeId,
        indices: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only reverse-mode graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers a differentiable input (parameters use `requires_grad = true`).
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, present after `backward` for nodes on a
    /// differentiable path.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // -- operations ---------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        pad: PadMode,
    ) -> Result<NodeId> {
        let (xs, ks, bs) = (
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 3 || ks.len() != 4 {
            return Err(CoreError::shape(
                "conv2d",
                format!("input rank {} (want 3), kernel rank {} (want 4)", xs.len(), ks.len()),
            ));
        }
        if ks[1] != xs[0] {
            return Err(CoreError::shape(
                "conv2d",
                format!("input channels (axis 0) = {}, kernel expects Cin (axis 1) = {}", xs[0], ks[1]),
            ));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(CoreError::contract(format!(
                "conv2d kernel extents must be odd, got {}x{}",
                ks[2], ks[3]
            )));
        }
        if bs != [ks[0]] {
            return Err(CoreError::shape(
                "conv2d",
                format!("bias shape {:?}, want [{}]", bs, ks[0]),
            ));
        }
        let value = kernels::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), pad);
        let rg = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, pad }, rg))
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        pad: PadMode,
    ) -> Result<NodeId> {
        let (xs, ks, bs) = (
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 4 || ks.len() != 5 {
            return Err(CoreError::shape(
                "conv3d",
                format!("input rank {} (want 4), kernel rank {} (want 5)", xs.len(), ks.len()),
            ));
        }
        if ks[1] != xs[0] {
            return Err(CoreError::shape(
                "conv3d",
                format!("input channels (axis 0) = {}, kernel expects Cin (axis 1) = {}", xs[0], ks[1]),
            ));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 || ks[4] % 2 == 0 {
            return Err(CoreError::contract(format!(
                "conv3d kernel extents must be odd, got {}x{}x{}",
                ks[2], ks[3], ks[4]
            )));
        }
        if bs != [ks[0]] {
            return Err(CoreError::shape(
                "conv3d",
                format!("bias shape {:?}, want [{}]", bs, ks[0]),
            ));
        }
        let value = kernels::conv3d_forward(self.value(input), self.value(kernel), self.value(bias), pad);
        let rg = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(value, Op::Conv3d { input, kernel, bias, pad }, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.requires(input);
        self.push(value, Op::Relu { input }, rg)
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(CoreError::shape(
                "add",
                format!("{:?} vs {:?}", self.value(lhs).shape(), self.value(rhs).shape()),
            ));
        }
        let value = self.value(lhs).zip_map(self.value(rhs), |a, b| a + b);
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(value, Op::Add { lhs, rhs }, rg))
    }

    /// Element-wise product. Equal shapes, or a single-channel [1,H,W] gate
    /// broadcast across the channels of a [C,H,W] tensor (either order).
    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (a, b) = (self.value(lhs).shape().to_vec(), self.value(rhs).shape().to_vec());
        if a == b {
            let value = self.value(lhs).zip_map(self.value(rhs), |x, y| x * y);
            let rg = self.requires(lhs) || self.requires(rhs);
            return Ok(self.push(value, Op::Mul { lhs, rhs }, rg));
        }
        let gate_like = |f: &[usize], g: &[usize]| {
            f.len() == 3 && g.len() == 3 && g[0] == 1 && f[0] > 1 && f[1] == g[1] && f[2] == g[2]
        };
        let (features, gate) = if gate_like(&a, &b) {
            (lhs, rhs)
        } else if gate_like(&b, &a) {
            (rhs, lhs)
        } else {
            return Err(CoreError::shape(
                "elementwise_mul",
                format!("{:?} vs {:?}: equal shapes or [C,H,W] with [1,H,W] gate", a, b),
            ));
        };
        let fs = self.value(features).shape().to_vec();
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let f = self.value(features).data();
        let g = self.value(gate).data();
        let mut data = vec![T::zero(); c * h * w];
        for ci in 0..c {
            for n in 0..h * w {
                data[ci * h * w + n] = f[ci * h * w + n] * g[n];
            }
        }
        let value = Tensor::new(&[c, h, w], data)?;
        let rg = self.requires(features) || self.requires(gate);
        Ok(self.push(value, Op::MulGate { features, gate }, rg))
    }

    pub fn scalar_mul(&mut self, input: NodeId, factor: T) -> NodeId {
        let value = self.value(input).map(|x| x * factor);
        let rg = self.requires(input);
        self.push(value, Op::ScalarMul { input, factor }, rg)
    }

    /// Concatenates rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::contract("concat_channels of zero tensors"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let (h, w) = (first[1], first[2]);
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(CoreError::shape(
                    "concat_channels",
                    format!("part shape {:?} incompatible with [_,{},{}]", s, h, w),
                ));
            }
            channels += s[0];
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[channels, h, w], data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(value, Op::ConcatChannels { parts: parts.to_vec() }, rg))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).reshaped(shape)?;
        let rg = self.requires(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Clamps to [0,1]; the subgradient passes inside the range and is zero
    /// outside.
    pub fn clamp_unit(&mut self, input: NodeId) -> NodeId {
        let one = T::one();
        let value = self.value(input).map(|x| x.max(T::zero()).min(one));
        let rg = self.requires(input);
        self.push(value, Op::ClampUnit { input }, rg)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total = self.value(input).data().iter().copied().sum();
        let rg = self.requires(input);
        self.push(Tensor::scalar(total), Op::Sum { input }, rg)
    }

    /// Mean absolute difference; the subgradient at zero difference is 0.
    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(CoreError::shape(
                "l1_loss",
                format!("{:?} vs {:?}", self.value(pred).shape(), self.value(target).shape()),
            ));
        }
        let n = fl::<T>(self.value(pred).numel() as f64);
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        let rg = self.requires(pred) || self.requires(target);
        Ok(self.push(Tensor::scalar(total / n), Op::L1Loss { pred, target }, rg))
    }

    /// One p*p patch per pixel with reflect padding; patches [H*W, C*p*p].
    pub fn unfold(&mut self, input: NodeId, patch: usize) -> Result<NodeId> {
        let s = self.value(input).shape();
        if s.len() != 3 {
            return Err(CoreError::shape("unfold", format!("input rank {} (want 3)", s.len())));
        }
        if patch % 2 == 0 || patch == 0 {
            return Err(CoreError::contract(format!("unfold patch size {} must be odd", patch)));
        }
        let value = kernels::unfold_forward(self.value(input), patch);
        let rg = self.requires(input);
        Ok(self.push(value, Op::Unfold { input, patch }, rg))
    }

    /// Folds [H*W, C*p*p] patches back to [C,H,W], averaging overlaps.
    pub fn fold_mean(
        &mut self,
        patches: NodeId,
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
    ) -> Result<NodeId> {
        let s = self.value(patches).shape();
        if s.len() != 2 || s[0] != height * width || s[1] != channels * patch * patch {
            return Err(CoreError::shape(
                "fold_mean",
                format!(
                    "patches {:?}, want [{}, {}] for [{},{},{}] p={}",
                    s,
                    height * width,
                    channels * patch * patch,
                    channels,
                    height,
                    width,
                    patch
                ),
            ));
        }
        let value = kernels::fold_mean_forward(self.value(patches), channels, height, width, patch);
        let rg = self.requires(patches);
        Ok(self.push(
            value,
            Op::FoldMean { patches, channels, height, width, patch },
            rg,
        ))
    }

    /// Normalized inner products between all query and key patch pairs.
    pub fn relevance(&mut self, queries: NodeId, keys: NodeId) -> Result<NodeId> {
        let (qs, ks) = (self.value(queries).shape(), self.value(keys).shape());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
            return Err(CoreError::shape(
                "relevance",
                format!("queries {:?} vs keys {:?}: patch dimensionality must match", qs, ks),
            ));
        }
        let value = kernels::relevance_forward(self.value(queries), self.value(keys));
        let rg = self.requires(queries) || self.requires(keys);
        Ok(self.push(value, Op::Relevance { queries, keys }, rg))
    }

    /// Per-row maximum of a matrix. Returns the value node and the argmax
    /// column per row (ties -> smallest index); the gradient routes to that
    /// entry only.
    pub fn row_max(&mut self, matrix: NodeId) -> Result<(NodeId, Vec<usize>)> {
        let s = self.value(matrix).shape();
        if s.len() != 2 {
            return Err(CoreError::shape("row_max", format!("matrix rank {} (want 2)", s.len())));
        }
        let argmax = kernels::row_argmax(self.value(matrix));
        let value = kernels::row_max_values(self.value(matrix), &argmax);
        let rg = self.requires(matrix);
        let id = self.push(value, Op::RowMax { matrix, argmax: argmax.clone() }, rg);
        Ok((id, argmax))
    }

    /// Row select by index; no gradient flows through the indices themselves.
    pub fn gather_rows(&mut self, source: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let s = self.value(source).shape();
        if s.len() != 2 {
            return Err(CoreError::shape("gather_rows", format!("source rank {} (want 2)", s.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(CoreError::contract(format!(
                "gather_rows index {} out of range for {} rows",
                bad, s[0]
            )));
        }
        let value = kernels::gather_rows(self.value(source), &indices);
        let rg = self.requires(source);
        Ok(self.push(value, Op::GatherRows { source, indices }, rg))
    }

    // -- reverse sweep ------------------------------------------------------

    /// Reverse topological sweep from a scalar loss. Gradients add into any
    /// previously accumulated ones.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CoreError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut scratch: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        scratch.resize_with(n, || None);
        scratch[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..n).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut scratch);
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn add_into(scratch: &mut [Option<Tensor<T>>], id: NodeId, contribution: Tensor<T>) {
        match &mut scratch[id.0] {
            Some(acc) => acc.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, scratch: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, pad } => {
                let grads = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *pad,
                );
                if self.requires(*input) {
                    Self::add_into(scratch, *input, grads.input);
                }
                if self.requires(*kernel) {
                    Self::add_into(scratch, *kernel, grads.kernel);
                }
                if self.requires(*bias) {
                    Self::add_into(scratch, *bias, grads.bias);
                }
            }
            Op::Conv3d { input, kernel, bias, pad } => {
                let grads = kernels::conv3d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *pad,
                );
                if self.requires(*input) {
                    Self::add_into(scratch, *input, grads.input);
                }
                if self.requires(*kernel) {
                    Self::add_into(scratch, *kernel, grads.kernel);
                }
                if self.requires(*bias) {
                    Self::add_into(scratch, *bias, grads.bias);
                }
            }
            Op::Relu { input } => {
                if self.requires(*input) {
                    let gx = self.value(*input).zip_map(g, |x, gv| {
                        if x > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    });
                    Self::add_into(scratch, *input, gx);
                }
            }
            Op::Add { lhs, rhs } => {
                if self.requires(*lhs) {
                    Self::add_into(scratch, *lhs, g.clone());
                }
                if self.requires(*rhs) {
                    Self::add_into(scratch, *rhs, g.clone());
                }
            }
            Op::Mul { lhs, rhs } => {
                if self.requires(*lhs) {
                    Self::add_into(scratch, *lhs, g.zip_map(self.value(*rhs), |gv, b| gv * b));
                }
                if self.requires(*rhs) {
                    Self::add_into(scratch, *rhs, g.zip_map(self.value(*lhs), |gv, a| gv * a));
                }
            }
            Op::MulGate { features, gate } => {
                let fs = self.value(*features).shape();
                let (c, h, w) = (fs[0], fs[1], fs[2]);
                if self.requires(*features) {
                    let gate_data = self.value(*gate).data();
                    let mut gf = Tensor::zeros(&[c, h, w]);
                    let gfd = gf.data_mut();
                    for ci in 0..c {
                        for n in 0..h * w {
                            gfd[ci * h * w + n] = g.data()[ci * h * w + n] * gate_data[n];
                        }
                    }
                    Self::add_into(scratch, *features, gf);
                }
                if self.requires(*gate) {
                    let f = self.value(*features).data();
                    let mut gg = Tensor::zeros(&[1, h, w]);
                    let ggd = gg.data_mut();
                    for ci in 0..c {
                        for n in 0..h * w {
                            ggd[n] += g.data()[ci * h * w + n] * f[ci * h * w + n];
                        }
                    }
                    Self::add_into(scratch, *gate, gg);
                }
            }
            Op::ScalarMul { input, factor } => {
                if self.requires(*input) {
                    let f = *factor;
                    Self::add_into(scratch, *input, g.map(|gv| gv * f));
                }
            }
            Op::ConcatChannels { parts } => {
                let shape = self.value(NodeId(i)).shape();
                let (h, w) = (shape[1], shape[2]);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[0];
                    let span = pc * h * w;
                    if self.requires(p) {
                        let slice = g.data()[offset..offset + span].to_vec();
                        Self::add_into(
                            scratch,
                            p,
                            Tensor::new(&[pc, h, w], slice).expect("concat split"),
                        );
                    }
                    offset += span;
                }
            }
            Op::Reshape { input } => {
                if self.requires(*input) {
                    let back = g
                        .reshaped(self.value(*input).shape())
                        .expect("reshape backward");
                    Self::add_into(scratch, *input, back);
                }
            }
            Op::ClampUnit { input } => {
                if self.requires(*input) {
                    let gx = self.value(*input).zip_map(g, |x, gv| {
                        if x >= T::zero() && x <= T::one() {
                            gv
                        } else {
                            T::zero()
                        }
                    });
                    Self::add_into(scratch, *input, gx);
                }
            }
            Op::Sum { input } => {
                if self.requires(*input) {
                    let gv = g.item();
                    Self::add_into(scratch, *input, Tensor::filled(self.value(*input).shape(), gv));
                }
            }
            Op::L1Loss { pred, target } => {
                let scale = g.item() / fl::<T>(self.value(*pred).numel() as f64);
                let signed = |a: T, b: T| {
                    if a > b {
                        scale
                    } else if a < b {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                if self.requires(*pred) {
                    let gp = self.value(*pred).zip_map(self.value(*target), signed);
                    Self::add_into(scratch, *pred, gp);
                }
                if self.requires(*target) {
                    let gt = self.value(*target).zip_map(self.value(*pred), signed);
                    Self::add_into(scratch, *target, gt);
                }
            }
            Op::Unfold { input, patch } => {
                if self.requires(*input) {
                    let s = self.value(*input).shape();
                    let back = kernels::unfold_backward(g, s[0], s[1], s[2], *patch);
                    Self::add_into(scratch, *input, back);
                }
            }
            Op::FoldMean { patches, channels, height, width, patch } => {
                if self.requires(*patches) {
                    let back = kernels::fold_mean_backward(g, *channels, *height, *width, *patch);
                    Self::add_into(scratch, *patches, back);
                }
            }
            Op::Relevance { queries, keys } => {
                let (gq, gk) = kernels::relevance_backward(
                    self.value(*queries),
                    self.value(*keys),
                    self.value(NodeId(i)),
                    g,
                );
                if self.requires(*queries) {
                    Self::add_into(scratch, *queries, gq);
                }
                if self.requires(*keys) {
                    Self::add_into(scratch, *keys, gk);
                }
            }
            Op::RowMax { matrix, argmax } => {
                if self.requires(*matrix) {
                    let cols = self.value(*matrix).shape()[1];
                    let mut gm = Tensor::zeros(self.value(*matrix).shape());
                    let gd = gm.data_mut();
                    for (row, &col) in argmax.iter().enumerate() {
                        gd[row * cols + col] += g.data()[row];
                    }
                    Self::add_into(scratch, *matrix, gm);
                }
            }
            Op::GatherRows { source, indices } => {
                if self.requires(*source) {
                    let d = self.value(*source).shape()[1];
                    let mut gs = Tensor::zeros(self.value(*source).shape());
                    let gd = gs.data_mut();
                    for (row, &src_row) in indices.iter().enumerate() {
                        for t in 0..d {
                            gd[src_row * d + t] += g.data()[row * d + t];
                        }
                    }
                    Self::add_into(scratch, *source, gs);
                }
            }
        }
    }
}
