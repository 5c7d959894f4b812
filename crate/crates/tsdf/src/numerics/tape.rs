//! Eager Wengert tape. Ops compute their value immediately and record
//! enough to replay a vector-Jacobian product in reverse.

use super::kernels;
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f32),
    Exp(usize),
    Sigmoid(usize),
    Abs(usize),
    Relu(usize),
    Recip(usize),
    Clamp(usize, f32, f32),
    Matmul(usize, usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        k: usize,
        pad: usize,
    },
    AvgPool {
        input: usize,
        k: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    SpaceToDepth {
        input: usize,
        factor: usize,
    },
    ResizeBilinear {
        input: usize,
    },
    SpatialSoftmax(usize),
    MeanAll(usize),
    SumAll(usize),
    MeanChannels(usize),
    StdChannels(usize),
    BroadcastChannel {
        input: usize,
        h: usize,
        w: usize,
    },
    L1Norm(usize),
    L2Norm(usize),
    Gather {
        input: usize,
        indices: Vec<usize>,
    },
    Concat(Vec<usize>),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradient graph. Leaves are added with [`Tape::leaf`] (differentiated) or
/// [`Tape::constant`]; every op method appends a node and returns its id.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, needs_grad: bool) -> Result<NodeId, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite {
                op: name,
                node: self.nodes.len(),
            });
        }
        Ok(self.push_unchecked(op, value, needs_grad))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn rank3(&self, op: &'static str, a: NodeId) -> Result<(usize, usize, usize), NumericsError> {
        let s = self.value(a).shape();
        if s.len() != 3 {
            return Err(NumericsError::BadRank {
                op,
                expected: 3,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    // ── elementwise ──

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.push("add", Op::Add(a.0, b.0), value, self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.push("sub", Op::Sub(a.0, b.0), value, self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.push("mul", Op::Mul(a.0, b.0), value, self.needs(a) || self.needs(b))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> Result<NodeId, NumericsError> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.push("add_scalar", Op::AddScalar(a.0), value, self.needs(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f32) -> Result<NodeId, NumericsError> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.push("mul_scalar", Op::MulScalar(a.0, c), value, self.needs(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.push("exp", Op::Exp(a.0), value, self.needs(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.push("sigmoid", Op::Sigmoid(a.0), value, self.needs(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let data = self.value(a).data().iter().map(|x| x.abs()).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.push("abs", Op::Abs(a.0), value, self.needs(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.push("relu", Op::Relu(a.0), value, self.needs(a))
    }

    /// Elementwise reciprocal; inputs must be bounded away from zero.
    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let data = self.value(a).data().iter().map(|x| 1.0 / x).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.push("recip", Op::Recip(a.0), value, self.needs(a))
    }

    /// Gradient passes through where lo <= x <= hi and is zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f32, hi: f32) -> Result<NodeId, NumericsError> {
        if !(lo <= hi) {
            return Err(NumericsError::InvalidArg {
                op: "clamp",
                what: format!("empty range [{lo}, {hi}]"),
            });
        }
        let data = self.value(a).data().iter().map(|x| x.clamp(lo, hi)).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.push("clamp", Op::Clamp(a.0, lo, hi), value, self.needs(a))
    }

    // ── linear algebra ──

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::from_vec(vec![m, n], out)?;
        self.push("matmul", Op::Matmul(a.0, b.0), value, self.needs(a) || self.needs(b))
    }

    // ── structured image ops ──

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        pad: usize,
    ) -> Result<NodeId, NumericsError> {
        let (ci, h, w) = self.rank3("conv2d", input)?;
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 4 || ws[1] != ci || ws[2] != ws[3] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                lhs: vec![ci, h, w],
                rhs: ws,
            });
        }
        let (co, k) = (ws[0], ws[2]);
        if self.value(bias).shape() != [co] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                lhs: vec![co],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        if h + 2 * pad + 1 <= k || w + 2 * pad + 1 <= k {
            return Err(NumericsError::InvalidArg {
                op: "conv2d",
                what: format!("kernel {k} does not fit {h}x{w} input with pad {pad}"),
            });
        }
        let oh = h + 2 * pad + 1 - k;
        let ow = w + 2 * pad + 1 - k;
        let mut out = vec![0.0f32; co * oh * ow];
        kernels::conv2d(
            self.value(input).data(),
            (ci, h, w),
            self.value(weight).data(),
            self.value(bias).data(),
            co,
            k,
            pad,
            &mut out,
        );
        let value = Tensor::from_vec(vec![co, oh, ow], out)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            "conv2d",
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                k,
                pad,
            },
            value,
            needs,
        )
    }

    pub fn avg_pool(&mut self, input: NodeId, k: usize) -> Result<NodeId, NumericsError> {
        let (c, h, w) = self.rank3("avg_pool", input)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(NumericsError::InvalidArg {
                op: "avg_pool",
                what: format!("window {k} must divide {h}x{w}"),
            });
        }
        let mut out = vec![0.0f32; c * (h / k) * (w / k)];
        kernels::avg_pool(self.value(input).data(), (c, h, w), k, &mut out);
        let value = Tensor::from_vec(vec![c, h / k, w / k], out)?;
        self.push("avg_pool", Op::AvgPool { input: input.0, k }, value, self.needs(input))
    }

    pub fn max_pool(&mut self, input: NodeId, k: usize) -> Result<NodeId, NumericsError> {
        let (c, h, w) = self.rank3("max_pool", input)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(NumericsError::InvalidArg {
                op: "max_pool",
                what: format!("window {k} must divide {h}x{w}"),
            });
        }
        let mut out = vec![0.0f32; c * (h / k) * (w / k)];
        let mut argmax = vec![0usize; out.len()];
        kernels::max_pool(self.value(input).data(), (c, h, w), k, &mut out, &mut argmax);
        let value = Tensor::from_vec(vec![c, h / k, w / k], out)?;
        self.push(
            "max_pool",
            Op::MaxPool {
                input: input.0,
                argmax,
            },
            value,
            self.needs(input),
        )
    }

    pub fn upsample_nearest(&mut self, input: NodeId, factor: usize) -> Result<NodeId, NumericsError> {
        let (c, h, w) = self.rank3("upsample_nearest", input)?;
        if factor == 0 {
            return Err(NumericsError::InvalidArg {
                op: "upsample_nearest",
                what: "factor must be >= 1".into(),
            });
        }
        let mut out = vec![0.0f32; c * h * factor * w * factor];
        kernels::upsample_nearest(self.value(input).data(), (c, h, w), factor, &mut out);
        let value = Tensor::from_vec(vec![c, h * factor, w * factor], out)?;
        self.push(
            "upsample_nearest",
            Op::Upsample {
                input: input.0,
                factor,
            },
            value,
            self.needs(input),
        )
    }

    pub fn space_to_depth(&mut self, input: NodeId, factor: usize) -> Result<NodeId, NumericsError> {
        let (c, h, w) = self.rank3("space_to_depth", input)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(NumericsError::InvalidArg {
                op: "space_to_depth",
                what: format!("factor {factor} must divide {h}x{w}"),
            });
        }
        let mut out = vec![0.0f32; c * h * w];
        kernels::space_to_depth(self.value(input).data(), (c, h, w), factor, &mut out);
        let value =
            Tensor::from_vec(vec![c * factor * factor, h / factor, w / factor], out)?;
        self.push(
            "space_to_depth",
            Op::SpaceToDepth {
                input: input.0,
                factor,
            },
            value,
            self.needs(input),
        )
    }

    pub fn resize_bilinear(&mut self, input: NodeId, oh: usize, ow: usize) -> Result<NodeId, NumericsError> {
        let (c, h, w) = self.rank3("resize_bilinear", input)?;
        if oh == 0 || ow == 0 {
            return Err(NumericsError::InvalidArg {
                op: "resize_bilinear",
                what: "output dims must be >= 1".into(),
            });
        }
        let mut out = vec![0.0f32; c * oh * ow];
        kernels::resize_bilinear(self.value(input).data(), (c, h, w), (oh, ow), &mut out);
        let value = Tensor::from_vec(vec![c, oh, ow], out)?;
        self.push(
            "resize_bilinear",
            Op::ResizeBilinear { input: input.0 },
            value,
            self.needs(input),
        )
    }

    /// Softmax over the spatial positions of each channel.
    pub fn spatial_softmax(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        let (c, h, w) = self.rank3("spatial_softmax", input)?;
        let hw = h * w;
        let data = self.value(input).data();
        let mut out = vec![0.0f32; c * hw];
        for ch in 0..c {
            let row = &data[ch * hw..(ch + 1) * hw];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut denom = 0.0f32;
            for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                denom += e;
            }
            for o in &mut out[ch * hw..(ch + 1) * hw] {
                *o /= denom;
            }
        }
        let value = Tensor::from_vec(vec![c, h, w], out)?;
        self.push("spatial_softmax", Op::SpatialSoftmax(input.0), value, self.needs(input))
    }

    // ── reductions ──

    pub fn mean_all(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        let value = Tensor::scalar(self.value(input).mean());
        self.push("mean_all", Op::MeanAll(input.0), value, self.needs(input))
    }

    pub fn sum_all(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        let value = Tensor::scalar(self.value(input).sum());
        self.push("sum_all", Op::SumAll(input.0), value, self.needs(input))
    }

    /// Per-channel spatial mean: (C, H, W) -> (C).
    pub fn mean_channels(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        let (c, h, w) = self.rank3("mean_channels", input)?;
        let hw = (h * w) as f32;
        let data = self.value(input).data();
        let out = (0..c)
            .map(|ch| data[ch * h * w..(ch + 1) * h * w].iter().fold(0.0, |a, &v| a + v) / hw)
            .collect();
        let value = Tensor::from_vec(vec![c], out)?;
        self.push("mean_channels", Op::MeanChannels(input.0), value, self.needs(input))
    }

    /// Per-channel spatial population standard deviation: (C, H, W) -> (C).
    /// Subgradient 0 where the deviation is exactly zero.
    pub fn std_channels(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        let (c, h, w) = self.rank3("std_channels", input)?;
        let hw = h * w;
        let data = self.value(input).data();
        let out = (0..c)
            .map(|ch| {
                let row = &data[ch * hw..(ch + 1) * hw];
                let mean = row.iter().fold(0.0f32, |a, &v| a + v) / hw as f32;
                let var = row.iter().fold(0.0f32, |a, &v| a + (v - mean) * (v - mean)) / hw as f32;
                var.sqrt()
            })
            .collect();
        let value = Tensor::from_vec(vec![c], out)?;
        self.push("std_channels", Op::StdChannels(input.0), value, self.needs(input))
    }

    /// (C) -> (C, H, W) by repeating each channel value over positions.
    pub fn broadcast_channel(&mut self, input: NodeId, h: usize, w: usize) -> Result<NodeId, NumericsError> {
        let s = self.value(input).shape();
        if s.len() != 1 {
            return Err(NumericsError::BadRank {
                op: "broadcast_channel",
                expected: 1,
                shape: s.to_vec(),
            });
        }
        let c = s[0];
        let data = self.value(input).data();
        let mut out = vec![0.0f32; c * h * w];
        for ch in 0..c {
            out[ch * h * w..(ch + 1) * h * w].fill(data[ch]);
        }
        let value = Tensor::from_vec(vec![c, h, w], out)?;
        self.push(
            "broadcast_channel",
            Op::BroadcastChannel {
                input: input.0,
                h,
                w,
            },
            value,
            self.needs(input),
        )
    }

    pub fn l1_norm(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(input).data().iter().fold(0.0f32, |a, &x| a + x.abs());
        self.push("l1_norm", Op::L1Norm(input.0), Tensor::scalar(v), self.needs(input))
    }

    pub fn l2_norm(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        let v = self
            .value(input)
            .data()
            .iter()
            .fold(0.0f32, |a, &x| a + x * x)
            .sqrt();
        self.push("l2_norm", Op::L2Norm(input.0), Tensor::scalar(v), self.needs(input))
    }

    /// Gather flat indices into a vector; indices may repeat.
    pub fn gather(&mut self, input: NodeId, indices: Vec<usize>) -> Result<NodeId, NumericsError> {
        let data = self.value(input).data();
        for &i in &indices {
            if i >= data.len() {
                return Err(NumericsError::InvalidArg {
                    op: "gather",
                    what: format!("index {i} out of range for {} elements", data.len()),
                });
            }
        }
        let out: Vec<f32> = indices.iter().map(|&i| data[i]).collect();
        let value = Tensor::from_vec(vec![out.len()], out)?;
        self.push(
            "gather",
            Op::Gather {
                input: input.0,
                indices,
            },
            value,
            self.needs(input),
        )
    }

    /// Concatenate flattened inputs into one vector.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId, NumericsError> {
        if inputs.is_empty() {
            return Err(NumericsError::InvalidArg {
                op: "concat",
                what: "needs at least one input".into(),
            });
        }
        let mut out = Vec::new();
        for &id in inputs {
            out.extend_from_slice(self.value(id).data());
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        let value = Tensor::from_vec(vec![out.len()], out)?;
        self.push(
            "concat",
            Op::Concat(inputs.iter().map(|id| id.0).collect()),
            value,
            needs,
        )
    }

    // ── composites ──

    /// Mean squared error between same-shaped tensors, as a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ── reverse sweep ──

    /// Gradients of a scalar `loss` node with respect to every grad-requiring
    /// node. Entry i is None for nodes the loss does not depend on.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<Option<Tensor>>, NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::InvalidArg {
                op: "backward",
                what: format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            match g {
                Some(data) if node.needs_grad => {
                    let t = Tensor::from_vec(node.value.shape().to_vec(), data)?;
                    if !t.all_finite() {
                        return Err(NumericsError::NonFinite {
                            op: "backward",
                            node: out.len(),
                        });
                    }
                    out.push(Some(t));
                }
                _ => out.push(None),
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], target: usize, update: impl FnOnce(&mut [f32])) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let slot = grads[target].get_or_insert_with(|| vec![0.0; self.nodes[target].value.numel()]);
        update(slot);
    }

    fn propagate(
        &self,
        at: usize,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<(), NumericsError> {
        match &self.nodes[at].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &bv) in d.iter_mut().zip(g).zip(vb) {
                        *d += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &gv), &av) in d.iter_mut().zip(g).zip(va) {
                        *d += gv * av;
                    }
                });
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }
            Op::Exp(a) => {
                let y = self.nodes[at].value.data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d += gv * yv;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[at].value.data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(x) {
                        *d += gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Recip(a) => {
                let y = self.nodes[at].value.data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d -= gv * yv * yv;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let x = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(x) {
                        if xv >= lo && xv <= hi {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                // d_A = g @ B^T, d_B = A^T @ g
                self.accumulate(grads, *a, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0f32;
                            for j in 0..n {
                                acc += g[i * n + j] * vb[p * n + j];
                            }
                            d[i * k + p] += acc;
                        }
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0f32;
                            for i in 0..m {
                                acc += va[i * k + p] * g[i * n + j];
                            }
                            d[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                k,
                pad,
            } => {
                let (ci, h, w) = self.nodes[*input].value.chw();
                let co = self.nodes[*weight].value.shape()[0];
                let mut d_input = vec![0.0f32; self.nodes[*input].value.numel()];
                let mut d_weight = vec![0.0f32; self.nodes[*weight].value.numel()];
                let mut d_bias = vec![0.0f32; co];
                kernels::conv2d_backward(
                    self.nodes[*input].value.data(),
                    (ci, h, w),
                    self.nodes[*weight].value.data(),
                    co,
                    *k,
                    *pad,
                    g,
                    &mut d_input,
                    &mut d_weight,
                    &mut d_bias,
                );
                self.accumulate(grads, *input, |d| {
                    for (d, v) in d.iter_mut().zip(d_input) {
                        *d += v;
                    }
                });
                self.accumulate(grads, *weight, |d| {
                    for (d, v) in d.iter_mut().zip(d_weight) {
                        *d += v;
                    }
                });
                self.accumulate(grads, *bias, |d| {
                    for (d, v) in d.iter_mut().zip(d_bias) {
                        *d += v;
                    }
                });
            }
            Op::AvgPool { input, k } => {
                let chw = self.nodes[*input].value.chw();
                let mut d_input = vec![0.0f32; self.nodes[*input].value.numel()];
                kernels::avg_pool_backward(chw, *k, g, &mut d_input);
                self.accumulate(grads, *input, |d| {
                    for (d, v) in d.iter_mut().zip(d_input) {
                        *d += v;
                    }
                });
            }
            Op::MaxPool { input, argmax } => {
                let mut d_input = vec![0.0f32; self.nodes[*input].value.numel()];
                kernels::max_pool_backward(g, argmax, &mut d_input);
                self.accumulate(grads, *input, |d| {
                    for (d, v) in d.iter_mut().zip(d_input) {
                        *d += v;
                    }
                });
            }
            Op::Upsample { input, factor } => {
                let chw = self.nodes[*input].value.chw();
                let mut d_input = vec![0.0f32; self.nodes[*input].value.numel()];
                kernels::upsample_nearest_backward(chw, *factor, g, &mut d_input);
                self.accumulate(grads, *input, |d| {
                    for (d, v) in d.iter_mut().zip(d_input) {
                        *d += v;
                    }
                });
            }
            Op::SpaceToDepth { input, factor } => {
                let chw = self.nodes[*input].value.chw();
                let mut d_input = vec![0.0f32; self.nodes[*input].value.numel()];
                kernels::space_to_depth_backward(chw, *factor, g, &mut d_input);
                self.accumulate(grads, *input, |d| {
                    for (d, v) in d.iter_mut().zip(d_input) {
                        *d += v;
                    }
                });
            }
            Op::ResizeBilinear { input } => {
                let chw = self.nodes[*input].value.chw();
                let (_, oh, ow) = self.nodes[at].value.chw();
                let mut d_input = vec![0.0f32; self.nodes[*input].value.numel()];
                kernels::resize_bilinear_backward(chw, (oh, ow), g, &mut d_input);
                self.accumulate(grads, *input, |d| {
                    for (d, v) in d.iter_mut().zip(d_input) {
                        *d += v;
                    }
                });
            }
            Op::SpatialSoftmax(a) => {
                let (c, h, w) = self.nodes[at].value.chw();
                let hw = h * w;
                let y = self.nodes[at].value.data();
                self.accumulate(grads, *a, |d| {
                    for ch in 0..c {
                        let ys = &y[ch * hw..(ch + 1) * hw];
                        let gs = &g[ch * hw..(ch + 1) * hw];
                        let dot: f32 = ys.iter().zip(gs).fold(0.0, |acc, (&yv, &gv)| acc + yv * gv);
                        for ((d, &yv), &gv) in d[ch * hw..(ch + 1) * hw].iter_mut().zip(ys).zip(gs) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.numel() as f32;
                let gv = g[0] / n;
                self.accumulate(grads, *a, |d| {
                    for d in d.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                self.accumulate(grads, *a, |d| {
                    for d in d.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::MeanChannels(a) => {
                let (c, h, w) = self.nodes[*a].value.chw();
                let hw = h * w;
                let inv = 1.0 / hw as f32;
                self.accumulate(grads, *a, |d| {
                    for ch in 0..c {
                        let gv = g[ch] * inv;
                        for d in &mut d[ch * hw..(ch + 1) * hw] {
                            *d += gv;
                        }
                    }
                });
            }
            Op::StdChannels(a) => {
                let (c, h, w) = self.nodes[*a].value.chw();
                let hw = h * w;
                let x = self.nodes[*a].value.data();
                let sigma = self.nodes[at].value.data();
                self.accumulate(grads, *a, |d| {
                    for ch in 0..c {
                        if sigma[ch] == 0.0 {
                            continue;
                        }
                        let row = &x[ch * hw..(ch + 1) * hw];
                        let mean = row.iter().fold(0.0f32, |acc, &v| acc + v) / hw as f32;
                        let scale = g[ch] / (hw as f32 * sigma[ch]);
                        for (d, &xv) in d[ch * hw..(ch + 1) * hw].iter_mut().zip(row) {
                            *d += scale * (xv - mean);
                        }
                    }
                });
            }
            Op::BroadcastChannel { input, h, w } => {
                let hw = h * w;
                let c = self.nodes[*input].value.numel();
                self.accumulate(grads, *input, |d| {
                    for (ch, d) in d.iter_mut().enumerate().take(c) {
                        *d += g[ch * hw..(ch + 1) * hw].iter().fold(0.0, |acc, &v| acc + v);
                    }
                });
            }
            Op::L1Norm(a) => {
                let x = self.nodes[*a].value.data();
                let gv = g[0];
                self.accumulate(grads, *a, |d| {
                    for (d, &xv) in d.iter_mut().zip(x) {
                        *d += gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::L2Norm(a) => {
                let norm = self.nodes[at].value.data()[0];
                if norm > 0.0 {
                    let x = self.nodes[*a].value.data();
                    let scale = g[0] / norm;
                    self.accumulate(grads, *a, |d| {
                        for (d, &xv) in d.iter_mut().zip(x) {
                            *d += scale * xv;
                        }
                    });
                }
            }
            Op::Gather { input, indices } => {
                self.accumulate(grads, *input, |d| {
                    for (&i, &gv) in indices.iter().zip(g) {
                        d[i] += gv;
                    }
                });
            }
            Op::Concat(inputs) => {
                let mut offset = 0;
                for &a in inputs {
                    let n = self.nodes[a].value.numel();
                    let slice = &g[offset..offset + n];
                    self.accumulate(grads, a, |d| {
                        for (d, &gv) in d.iter_mut().zip(slice) {
                            *d += gv;
                        }
                    });
                    offset += n;
                }
            }
        }
        Ok(())
    }
}

/// Build a graph with `build`, returning the scalar loss value and the
/// gradient for each node id the builder hands back.
pub fn evaluate_with_gradients<F>(build: F) -> Result<(f32, Vec<Tensor>), NumericsError>
where
    F: FnOnce(&mut Tape) -> Result<(NodeId, Vec<NodeId>), NumericsError>,
{
    let mut tape = Tape::new();
    let (loss, wrt) = build(&mut tape)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item();
    let out = wrt
        .into_iter()
        .map(|id| {
            grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()))
        })
        .collect();
    Ok((value, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of<F>(build: F) -> (f32, Vec<Tensor>)
    where
        F: FnOnce(&mut Tape) -> Result<(NodeId, Vec<NodeId>), NumericsError>,
    {
        evaluate_with_gradients(build).expect("graph evaluation")
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let (v, g) = grad_of(|t| {
            let x = t.leaf(Tensor::scalar(3.0));
            let y = t.mul(x, x)?;
            Ok((y, vec![x]))
        });
        assert_eq!(v, 9.0);
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let (v, g) = grad_of(|t| {
            let x = t.leaf(Tensor::from_vec(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
            let s = t.sigmoid(x)?;
            let sum = t.sum_all(s)?;
            Ok((sum, vec![x]))
        });
        assert_eq!(v, 1.5);
        for &d in g[0].data() {
            assert!((d - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn l1_gradient_is_sign() {
        let (v, g) = grad_of(|t| {
            let x = t.leaf(Tensor::from_vec(vec![2], vec![2.0, -2.0]).unwrap());
            let n = t.l1_norm(x)?;
            Ok((n, vec![x]))
        });
        assert_eq!(v, 4.0);
        assert_eq!(g[0].data(), &[1.0, -1.0]);
    }

    #[test]
    fn chain_rule_through_exp() {
        // d/dx exp(2x) at x=0.5 is 2e.
        let (v, g) = grad_of(|t| {
            let x = t.leaf(Tensor::scalar(0.5));
            let two_x = t.mul_scalar(x, 2.0)?;
            let y = t.exp(two_x)?;
            Ok((y, vec![x]))
        });
        assert!((v - std::f32::consts::E).abs() < 1e-6);
        assert!((g[0].item() - 2.0 * std::f32::consts::E).abs() < 1e-5);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x has gradient 2x + 1.
        let (_, g) = grad_of(|t| {
            let x = t.leaf(Tensor::scalar(4.0));
            let sq = t.mul(x, x)?;
            let y = t.add(sq, x)?;
            Ok((y, vec![x]))
        });
        assert_eq!(g[0].item(), 9.0);
    }

    #[test]
    fn matmul_gradients_match_hand_computation() {
        let (_, g) = grad_of(|t| {
            let a = t.leaf(Tensor::from_vec(vec![1, 2], vec![2.0, 3.0]).unwrap());
            let b = t.leaf(Tensor::from_vec(vec![2, 1], vec![5.0, 7.0]).unwrap());
            let y = t.matmul(a, b)?;
            let s = t.sum_all(y)?;
            Ok((s, vec![a, b]))
        });
        assert_eq!(g[0].data(), &[5.0, 7.0]);
        assert_eq!(g[1].data(), &[2.0, 3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads[x.0].is_none());
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let (_, g) = grad_of(|t| {
            let x = t.leaf(Tensor::from_vec(vec![3], vec![-2.0, 0.5, 2.0]).unwrap());
            let c = t.clamp(x, -1.0, 1.0)?;
            let s = t.sum_all(c)?;
            Ok((s, vec![x]))
        });
        assert_eq!(g[0].data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn spatial_softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(vec![2, 2, 2], (0..8).map(|v| v as f32 * 0.3).collect()).unwrap());
        let s = tape.spatial_softmax(x).unwrap();
        let v = tape.value(s);
        let first: f32 = v.data()[0..4].iter().sum();
        let second: f32 = v.data()[4..8].iter().sum();
        assert!((first - 1.0).abs() < 1e-6);
        assert!((second - 1.0).abs() < 1e-6);
    }

    #[test]
    fn std_channels_matches_population_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.std_channels(x).unwrap();
        // Population std of {1,2,3,4} is sqrt(1.25).
        assert!((tape.value(s).item() - 1.25f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![3, 2]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "got: {msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "got: {msg}");
    }

    #[test]
    fn non_finite_output_is_an_error_with_node_id() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(200.0));
        let err = tape.exp(x).unwrap_err();
        match err {
            NumericsError::NonFinite { op, node } => {
                assert_eq!(op, "exp");
                assert_eq!(node, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape
                .leaf(Tensor::from_vec(vec![1, 4, 4], (0..16).map(|v| (v as f32).sin()).collect()).unwrap());
            let w = tape.leaf(Tensor::from_vec(vec![2, 1, 3, 3], (0..18).map(|v| (v as f32).cos() * 0.1).collect()).unwrap());
            let b = tape.leaf(Tensor::from_vec(vec![2], vec![0.1, -0.1]).unwrap());
            let c = tape.conv2d(x, w, b, 1).unwrap();
            let r = tape.relu(c).unwrap();
            let p = tape.avg_pool(r, 2).unwrap();
            let s = tape.mean_all(p).unwrap();
            let grads = tape.backward(s).unwrap();
            (
                tape.value(s).item().to_bits(),
                grads[w.0].as_ref().unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gather_scatter_accumulates_repeats() {
        let (_, g) = grad_of(|t| {
            let x = t.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
            let picked = t.gather(x, vec![0, 0, 2])?;
            let s = t.sum_all(picked)?;
            Ok((s, vec![x]))
        });
        assert_eq!(g[0].data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_routes_gradient_slices() {
        let (_, g) = grad_of(|t| {
            let a = t.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
            let b = t.leaf(Tensor::from_vec(vec![1], vec![3.0]).unwrap());
            let cat = t.concat(&[a, b])?;
            let doubled = t.mul_scalar(cat, 2.0)?;
            let s = t.sum_all(doubled)?;
            Ok((s, vec![a, b]))
        });
        assert_eq!(g[0].data(), &[2.0, 2.0]);
        assert_eq!(g[1].data(), &[2.0]);
    }

    #[test]
    fn mse_of_equal_tensors_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(vec![4], 0.3));
        let b = tape.constant(Tensor::full(vec![4], 0.3));
        let m = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(m).item(), 0.0);
    }
}
