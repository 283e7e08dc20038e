//! Reverse-mode autodiff over a per-batch computation graph.
//!
//! A `Graph` owns every node created during one forward pass; `backward`
//! sweeps it in reverse, accumulating gradients into the leaves that were
//! registered with `requires_grad`. Graphs are single-threaded by contract
//! (primitives may parallelize internally), cheap to build, and dropped
//! after each optimization step.

use super::conv::{
    conv2d_backward, conv2d_forward, conv_t2d_backward, conv_t2d_forward, Conv2dDims, ConvT2dDims,
    CONV_T_STRIDE,
};
use super::{shape_err, Scalar, Tensor, TensorError};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Handle to a node inside one [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<E> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        dims: Conv2dDims,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        dims: ConvT2dDims,
    },
    BilinearUpsample2x {
        input: NodeId,
    },
    MaxPool2x2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Relu {
        input: NodeId,
    },
    LeakyRelu {
        input: NodeId,
    },
    InstanceNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
    ConcatChannels {
        lhs: NodeId,
        rhs: NodeId,
    },
    LinComb {
        terms: Vec<(E, NodeId)>,
    },
    SoftmaxChannels {
        input: NodeId,
    },
    Log {
        input: NodeId,
    },
    Exp {
        input: NodeId,
    },
    SumAll {
        input: NodeId,
    },
    MeanAll {
        input: NodeId,
    },
    SumChannels {
        input: NodeId,
    },
    SumSpatial {
        input: NodeId,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<E>>,
}

pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_all_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> NodeId {
        let needs_grad = requires_grad
            || match &op {
                Op::Leaf => false,
                _ => self.op_inputs(&op).iter().any(|id| self.nodes[id.0].needs_grad),
            };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            needs_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op<E>) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::BilinearUpsample2x { input }
            | Op::MaxPool2x2 { input, .. }
            | Op::Relu { input }
            | Op::LeakyRelu { input }
            | Op::SoftmaxChannels { input }
            | Op::Log { input }
            | Op::Exp { input }
            | Op::SumAll { input }
            | Op::MeanAll { input }
            | Op::SumChannels { input }
            | Op::SumSpatial { input } => vec![*input],
            Op::InstanceNorm { input, gamma, beta } => vec![*input, *gamma, *beta],
            Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } | Op::ConcatChannels { lhs, rhs } => {
                vec![*lhs, *rhs]
            }
            Op::LinComb { terms } => terms.iter().map(|(_, id)| *id).collect(),
        }
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[E] {
        self.nodes[id.0].value.data()
    }

    // ---- primitives -------------------------------------------------------

    /// Stride-1 2D convolution with zero padding. `weight` is
    /// `[c_out, c_in, kh, kw]`, optional `bias` is `[c_out]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expects 4-D input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        let (b, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, wc_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc_in != c_in {
            return Err(shape_err(
                "conv2d",
                format!("input has {c_in} channels but weight expects {wc_in}"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        if let Some(bid) = bias {
            let bs = self.shape(bid);
            if bs != [c_out] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {bs:?} does not match {c_out} output channels"),
                ));
            }
        }
        let dims = Conv2dDims {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        };
        let mut out = Tensor::zeros(vec![b, c_out, dims.oh, dims.ow]);
        conv2d_forward(
            &dims,
            self.data(input),
            self.data(weight),
            bias.map(|bid| self.data(bid)),
            out.data_mut(),
        );
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
            false,
        ))
    }

    /// Stride-2 transposed convolution. `weight` is `[c_in, c_out, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(
                "transposed_conv2d",
                format!("expects 4-D input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        let (b, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (wc_in, c_out, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc_in != c_in {
            return Err(shape_err(
                "transposed_conv2d",
                format!("input has {c_in} channels but weight expects {wc_in}"),
            ));
        }
        if let Some(bid) = bias {
            let bs = self.shape(bid);
            if bs != [c_out] {
                return Err(shape_err(
                    "transposed_conv2d",
                    format!("bias shape {bs:?} does not match {c_out} output channels"),
                ));
            }
        }
        let dims = ConvT2dDims {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh: (h - 1) * CONV_T_STRIDE + kh,
            ow: (w - 1) * CONV_T_STRIDE + kw,
        };
        let mut out = Tensor::zeros(vec![b, c_out, dims.oh, dims.ow]);
        conv_t2d_forward(
            &dims,
            self.data(input),
            self.data(weight),
            bias.map(|bid| self.data(bid)),
            out.data_mut(),
        );
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                dims,
            },
            false,
        ))
    }

    /// Scale-2 bilinear upsampling, align-corners false.
    pub fn bilinear_upsample2x(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(shape_err(
                "bilinear_upsample",
                format!("expects 4-D input, got {xs:?}"),
            ));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let ys = upsample_taps(h, oh);
        let xt = upsample_taps(w, ow);
        let mut out = vec![E::zero(); b * c * oh * ow];
        let data = self.data(input);
        for bc in 0..b * c {
            let src = &data[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                    let fy = E::from_f64(fy);
                    let fx = E::from_f64(fx);
                    let one = E::one();
                    let v = (one - fy) * (one - fx) * src[y0 * w + x0]
                        + (one - fy) * fx * src[y0 * w + x1]
                        + fy * (one - fx) * src[y1 * w + x0]
                        + fy * fx * src[y1 * w + x1];
                    dst[oy * ow + ox] = v;
                }
            }
        }
        let out = Tensor::new(vec![b, c, oh, ow], out).expect("constructed shape");
        Ok(self.push(out, Op::BilinearUpsample2x { input }, false))
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2x2(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(input);
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(shape_err(
                "max_pool2d",
                format!("expects 4-D input with even spatial dims, got {xs:?}"),
            ));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let data = self.data(input);
        let mut out = vec![E::zero(); b * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for bc in 0..b * c {
            let src_base = bc * h * w;
            let dst_base = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = src_base + (2 * oy) * w + 2 * ox;
                    let mut best = data[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = src_base + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    out[dst_base + oy * ow + ox] = best;
                    argmax[dst_base + oy * ow + ox] = best_idx as u32;
                }
            }
        }
        let out = Tensor::new(vec![b, c, oh, ow], out).expect("constructed shape");
        Ok(self.push(out, Op::MaxPool2x2 { input, argmax }, false))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = Tensor::new(
            self.shape(input).to_vec(),
            self.data(input)
                .iter()
                .map(|&x| if x > E::zero() { x } else { E::zero() })
                .collect(),
        )
        .expect("same shape");
        self.push(out, Op::Relu { input }, false)
    }

    pub fn leaky_relu(&mut self, input: NodeId) -> NodeId {
        let slope = E::from_f64(LEAKY_RELU_SLOPE);
        let out = Tensor::new(
            self.shape(input).to_vec(),
            self.data(input)
                .iter()
                .map(|&x| if x > E::zero() { x } else { slope * x })
                .collect(),
        )
        .expect("same shape");
        self.push(out, Op::LeakyRelu { input }, false)
    }

    /// Per-channel, per-sample normalization with learnable affine.
    pub fn instance_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(shape_err(
                "instance_norm",
                format!("expects 4-D input, got {xs:?}"),
            ));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "instance_norm",
                format!(
                    "affine params must have shape [{c}], got {:?} and {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (b, h, w) = (xs[0], xs[2], xs[3]);
        let plane = h * w;
        let eps = E::from_f64(INSTANCE_NORM_EPS);
        let data = self.data(input);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let inv_n = E::one() / E::from_f64(plane as f64);
        let mut out = vec![E::zero(); data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let src = &data[base..base + plane];
                let mut mean = E::zero();
                for &v in src {
                    mean += v;
                }
                mean *= inv_n;
                let mut var = E::zero();
                for &v in src {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_n;
                let inv_std = E::one() / (var + eps).sqrt();
                let (gc, bc) = (g[ci], bt[ci]);
                for (o, &v) in out[base..base + plane].iter_mut().zip(src) {
                    *o = gc * (v - mean) * inv_std + bc;
                }
            }
        }
        let out = Tensor::new(xs.to_vec(), out).expect("same shape");
        Ok(self.push(out, Op::InstanceNorm { input, gamma, beta }, false))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(shape_err(
                "add",
                format!("shapes differ: {:?} vs {:?}", self.shape(lhs), self.shape(rhs)),
            ));
        }
        let out = Tensor::new(
            self.shape(lhs).to_vec(),
            self.data(lhs)
                .iter()
                .zip(self.data(rhs))
                .map(|(&a, &b)| a + b)
                .collect(),
        )
        .expect("same shape");
        Ok(self.push(out, Op::Add { lhs, rhs }, false))
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(shape_err(
                "multiply",
                format!("shapes differ: {:?} vs {:?}", self.shape(lhs), self.shape(rhs)),
            ));
        }
        let out = Tensor::new(
            self.shape(lhs).to_vec(),
            self.data(lhs)
                .iter()
                .zip(self.data(rhs))
                .map(|(&a, &b)| a * b)
                .collect(),
        )
        .expect("same shape");
        Ok(self.push(out, Op::Mul { lhs, rhs }, false))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat_channels(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        let ls = self.shape(lhs).to_vec();
        let rs = self.shape(rhs).to_vec();
        let compatible = ls.len() == rs.len()
            && ls.len() >= 2
            && ls[0] == rs[0]
            && ls[2..] == rs[2..];
        if !compatible {
            return Err(shape_err(
                "concat",
                format!("cannot concatenate {ls:?} and {rs:?} along channel axis"),
            ));
        }
        let inner: usize = ls[2..].iter().product();
        let (b, c1, c2) = (ls[0], ls[1], rs[1]);
        let mut out = Vec::with_capacity((c1 + c2) * b * inner);
        let ld = self.data(lhs);
        let rd = self.data(rhs);
        for bi in 0..b {
            out.extend_from_slice(&ld[bi * c1 * inner..(bi + 1) * c1 * inner]);
            out.extend_from_slice(&rd[bi * c2 * inner..(bi + 1) * c2 * inner]);
        }
        let mut shape = ls.clone();
        shape[1] = c1 + c2;
        let out = Tensor::new(shape, out).expect("constructed shape");
        Ok(self.push(out, Op::ConcatChannels { lhs, rhs }, false))
    }

    /// Elementwise weighted sum of same-shaped tensors.
    pub fn lincomb(&mut self, terms: &[(E, NodeId)]) -> Result<NodeId, TensorError> {
        let Some(&(_, first)) = terms.first() else {
            return Err(shape_err("linear_combination", "needs at least one term"));
        };
        let shape = self.shape(first).to_vec();
        for &(_, id) in terms {
            if self.shape(id) != shape {
                return Err(shape_err(
                    "linear_combination",
                    format!("shapes differ: {:?} vs {:?}", shape, self.shape(id)),
                ));
            }
        }
        let mut out = vec![E::zero(); shape.iter().product()];
        for &(coef, id) in terms {
            for (o, &v) in out.iter_mut().zip(self.data(id)) {
                *o += coef * v;
            }
        }
        let out = Tensor::new(shape, out).expect("same shape");
        Ok(self.push(
            out,
            Op::LinComb {
                terms: terms.to_vec(),
            },
            false,
        ))
    }

    pub fn scale(&mut self, coef: E, input: NodeId) -> NodeId {
        self.lincomb(&[(coef, input)]).expect("single term")
    }

    /// Softmax along the channel axis (axis 1).
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(input);
        if xs.len() < 2 {
            return Err(shape_err(
                "softmax",
                format!("expects rank >= 2 with channel axis 1, got {xs:?}"),
            ));
        }
        let outer = xs[0];
        let channels = xs[1];
        let inner: usize = xs[2..].iter().product();
        let data = self.data(input);
        let mut out = vec![E::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |c: usize| (o * channels + c) * inner + i;
                let mut max = data[idx(0)];
                for c in 1..channels {
                    if data[idx(c)] > max {
                        max = data[idx(c)];
                    }
                }
                let mut sum = E::zero();
                for c in 0..channels {
                    let e = (data[idx(c)] - max).exp();
                    out[idx(c)] = e;
                    sum += e;
                }
                let inv = E::one() / sum;
                for c in 0..channels {
                    out[idx(c)] *= inv;
                }
            }
        }
        let out = Tensor::new(xs.to_vec(), out).expect("same shape");
        Ok(self.push(out, Op::SoftmaxChannels { input }, false))
    }

    pub fn log(&mut self, input: NodeId) -> NodeId {
        let out = Tensor::new(
            self.shape(input).to_vec(),
            self.data(input).iter().map(|&x| x.ln()).collect(),
        )
        .expect("same shape");
        self.push(out, Op::Log { input }, false)
    }

    pub fn exp(&mut self, input: NodeId) -> NodeId {
        let out = Tensor::new(
            self.shape(input).to_vec(),
            self.data(input).iter().map(|&x| x.exp()).collect(),
        )
        .expect("same shape");
        self.push(out, Op::Exp { input }, false)
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let mut s = E::zero();
        for &v in self.data(input) {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::SumAll { input }, false)
    }

    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let n = self.data(input).len();
        let mut s = E::zero();
        for &v in self.data(input) {
            s += v;
        }
        s /= E::from_f64(n as f64);
        self.push(Tensor::scalar(s), Op::MeanAll { input }, false)
    }

    /// Sums over the channel axis, keeping it: `[B,C,..] -> [B,1,..]`.
    pub fn sum_channels(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(input);
        if xs.len() < 2 {
            return Err(shape_err(
                "sum_channels",
                format!("expects rank >= 2, got {xs:?}"),
            ));
        }
        let (outer, channels) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let data = self.data(input);
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        let mut shape = xs.to_vec();
        shape[1] = 1;
        let out = Tensor::new(shape, out).expect("constructed shape");
        Ok(self.push(out, Op::SumChannels { input }, false))
    }

    /// Sums over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn sum_spatial(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(shape_err(
                "sum_spatial",
                format!("expects 4-D input, got {xs:?}"),
            ));
        }
        let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let data = self.data(input);
        let mut out = vec![E::zero(); b * c];
        for (bc, o) in out.iter_mut().enumerate() {
            let mut s = E::zero();
            for &v in &data[bc * plane..(bc + 1) * plane] {
                s += v;
            }
            *o = s;
        }
        let out = Tensor::new(vec![b, c], out).expect("constructed shape");
        Ok(self.push(out, Op::SumSpatial { input }, false))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every `requires_grad` leaf. Repeated
    /// calls without zeroing add up.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            if adjoints[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // consumed after the sweep
            }
            let g = adjoints[i].take().expect("checked above");
            self.propagate(i, &g, &mut adjoints);
        }

        for (i, adj) in adjoints.into_iter().enumerate() {
            if let (Some(a), true) = (adj, self.nodes[i].requires_grad) {
                match &mut self.nodes[i].grad {
                    Some(gr) => {
                        for (dst, src) in gr.iter_mut().zip(&a) {
                            *dst += *src;
                        }
                    }
                    slot => *slot = Some(a),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[E], adjoints: &mut [Option<Vec<E>>]) {
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        macro_rules! adj {
            ($id:expr) => {
                adjoints[$id.0]
                    .get_or_insert_with(|| vec![E::zero(); self.nodes[$id.0].value.numel()])
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                let grads = conv2d_backward(
                    dims,
                    self.data(*input),
                    self.data(*weight),
                    g,
                    needs(*input),
                    needs(*weight),
                    bias.map(needs).unwrap_or(false),
                );
                if let Some(gi) = grads.input {
                    add_assign(adj!(*input), &gi);
                }
                if let Some(gw) = grads.weight {
                    add_assign(adj!(*weight), &gw);
                }
                if let (Some(gb), Some(bid)) = (grads.bias, bias) {
                    add_assign(adj!(*bid), &gb);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                dims,
            } => {
                let grads = conv_t2d_backward(
                    dims,
                    self.data(*input),
                    self.data(*weight),
                    g,
                    needs(*input),
                    needs(*weight),
                    bias.map(needs).unwrap_or(false),
                );
                if let Some(gi) = grads.input {
                    add_assign(adj!(*input), &gi);
                }
                if let Some(gw) = grads.weight {
                    add_assign(adj!(*weight), &gw);
                }
                if let (Some(gb), Some(bid)) = (grads.bias, bias) {
                    add_assign(adj!(*bid), &gb);
                }
            }
            Op::BilinearUpsample2x { input } => {
                if !needs(*input) {
                    return;
                }
                let xs = self.shape(*input);
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let ys = upsample_taps(h, oh);
                let xt = upsample_taps(w, ow);
                let gi = adj!(*input);
                for bc in 0..b * c {
                    let src = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let dst = &mut gi[bc * h * w..(bc + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                            let gv = src[oy * ow + ox];
                            let fy = E::from_f64(fy);
                            let fx = E::from_f64(fx);
                            let one = E::one();
                            dst[y0 * w + x0] += (one - fy) * (one - fx) * gv;
                            dst[y0 * w + x1] += (one - fy) * fx * gv;
                            dst[y1 * w + x0] += fy * (one - fx) * gv;
                            dst[y1 * w + x1] += fy * fx * gv;
                        }
                    }
                }
            }
            Op::MaxPool2x2 { input, argmax } => {
                if !needs(*input) {
                    return;
                }
                let gi = adj!(*input);
                for (out_idx, &src_idx) in argmax.iter().enumerate() {
                    gi[src_idx as usize] += g[out_idx];
                }
            }
            Op::Relu { input } => {
                if !needs(*input) {
                    return;
                }
                let x = self.data(*input);
                let gi = adj!(*input);
                for (j, gv) in g.iter().enumerate() {
                    if x[j] > E::zero() {
                        gi[j] += *gv;
                    }
                }
            }
            Op::LeakyRelu { input } => {
                if !needs(*input) {
                    return;
                }
                let slope = E::from_f64(LEAKY_RELU_SLOPE);
                let x = self.data(*input);
                let gi = adj!(*input);
                for (j, gv) in g.iter().enumerate() {
                    gi[j] += if x[j] > E::zero() { *gv } else { slope * *gv };
                }
            }
            Op::InstanceNorm { input, gamma, beta } => {
                let xs = self.shape(*input);
                let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let eps = E::from_f64(INSTANCE_NORM_EPS);
                let inv_n = E::one() / E::from_f64(plane as f64);
                let x = self.data(*input);
                let gm = self.data(*gamma);
                let mut gx = if needs(*input) {
                    Some(vec![E::zero(); x.len()])
                } else {
                    None
                };
                let mut gg = if needs(*gamma) {
                    Some(vec![E::zero(); c])
                } else {
                    None
                };
                let mut gb = if needs(*beta) {
                    Some(vec![E::zero(); c])
                } else {
                    None
                };
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        let src = &x[base..base + plane];
                        let gout = &g[base..base + plane];
                        let mut mean = E::zero();
                        for &v in src {
                            mean += v;
                        }
                        mean *= inv_n;
                        let mut var = E::zero();
                        for &v in src {
                            let d = v - mean;
                            var += d * d;
                        }
                        var *= inv_n;
                        let inv_std = E::one() / (var + eps).sqrt();
                        if let Some(gbv) = gb.as_deref_mut() {
                            let mut s = E::zero();
                            for &v in gout {
                                s += v;
                            }
                            gbv[ci] += s;
                        }
                        if let Some(ggv) = gg.as_deref_mut() {
                            let mut s = E::zero();
                            for (j, &v) in gout.iter().enumerate() {
                                s += v * (src[j] - mean) * inv_std;
                            }
                            ggv[ci] += s;
                        }
                        if let Some(gxv) = gx.as_deref_mut() {
                            // dxhat = g * gamma; dx = inv_std * (dxhat
                            //   - mean(dxhat) - xhat * mean(dxhat * xhat))
                            let gc = gm[ci];
                            let mut sum_dxh = E::zero();
                            let mut sum_dxh_xh = E::zero();
                            for (j, &v) in gout.iter().enumerate() {
                                let dxh = v * gc;
                                let xh = (src[j] - mean) * inv_std;
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                            let mean_dxh = sum_dxh * inv_n;
                            let mean_dxh_xh = sum_dxh_xh * inv_n;
                            for j in 0..plane {
                                let dxh = gout[j] * gc;
                                let xh = (src[j] - mean) * inv_std;
                                gxv[base + j] += inv_std * (dxh - mean_dxh - xh * mean_dxh_xh);
                            }
                        }
                    }
                }
                if let Some(v) = gx {
                    add_assign(adj!(*input), &v);
                }
                if let Some(v) = gg {
                    add_assign(adj!(*gamma), &v);
                }
                if let Some(v) = gb {
                    add_assign(adj!(*beta), &v);
                }
            }
            Op::Add { lhs, rhs } => {
                if needs(*lhs) {
                    add_assign(adj!(*lhs), g);
                }
                if needs(*rhs) {
                    add_assign(adj!(*rhs), g);
                }
            }
            Op::Mul { lhs, rhs } => {
                if needs(*lhs) {
                    let rv = self.data(*rhs);
                    let gl = adj!(*lhs);
                    for (j, gv) in g.iter().enumerate() {
                        gl[j] += *gv * rv[j];
                    }
                }
                if needs(*rhs) {
                    let lv = self.data(*lhs);
                    let gr = adj!(*rhs);
                    for (j, gv) in g.iter().enumerate() {
                        gr[j] += *gv * lv[j];
                    }
                }
            }
            Op::ConcatChannels { lhs, rhs } => {
                let ls = self.shape(*lhs);
                let rs = self.shape(*rhs);
                let inner: usize = ls[2..].iter().product();
                let (b, c1, c2) = (ls[0], ls[1], rs[1]);
                let row = (c1 + c2) * inner;
                if needs(*lhs) {
                    let gl = adj!(*lhs);
                    for bi in 0..b {
                        let src = &g[bi * row..bi * row + c1 * inner];
                        add_assign(&mut gl[bi * c1 * inner..(bi + 1) * c1 * inner], src);
                    }
                }
                if needs(*rhs) {
                    let gr = adj!(*rhs);
                    for bi in 0..b {
                        let src = &g[bi * row + c1 * inner..(bi + 1) * row];
                        add_assign(&mut gr[bi * c2 * inner..(bi + 1) * c2 * inner], src);
                    }
                }
            }
            Op::LinComb { terms } => {
                for &(coef, id) in terms {
                    if !needs(id) {
                        continue;
                    }
                    let gi = adj!(id);
                    for (j, gv) in g.iter().enumerate() {
                        gi[j] += coef * *gv;
                    }
                }
            }
            Op::SoftmaxChannels { input } => {
                if !needs(*input) {
                    return;
                }
                let s = self.data(i_id(i));
                let xs = self.shape(*input);
                let (outer, channels) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let gi = adj!(*input);
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |c: usize| (o * channels + c) * inner + ii;
                        let mut dot = E::zero();
                        for c in 0..channels {
                            dot += g[idx(c)] * s[idx(c)];
                        }
                        for c in 0..channels {
                            gi[idx(c)] += s[idx(c)] * (g[idx(c)] - dot);
                        }
                    }
                }
            }
            Op::Log { input } => {
                if !needs(*input) {
                    return;
                }
                let x = self.data(*input);
                let gi = adj!(*input);
                for (j, gv) in g.iter().enumerate() {
                    gi[j] += *gv / x[j];
                }
            }
            Op::Exp { input } => {
                if !needs(*input) {
                    return;
                }
                let out = self.data(i_id(i));
                let gi = adj!(*input);
                for (j, gv) in g.iter().enumerate() {
                    gi[j] += *gv * out[j];
                }
            }
            Op::SumAll { input } => {
                if !needs(*input) {
                    return;
                }
                let gv = g[0];
                for v in adj!(*input).iter_mut() {
                    *v += gv;
                }
            }
            Op::MeanAll { input } => {
                if !needs(*input) {
                    return;
                }
                let n = self.nodes[input.0].value.numel();
                let gv = g[0] / E::from_f64(n as f64);
                for v in adj!(*input).iter_mut() {
                    *v += gv;
                }
            }
            Op::SumChannels { input } => {
                if !needs(*input) {
                    return;
                }
                let xs = self.shape(*input);
                let (outer, channels) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let gi = adj!(*input);
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        for ii in 0..inner {
                            gi[base + ii] += g[o * inner + ii];
                        }
                    }
                }
            }
            Op::SumSpatial { input } => {
                if !needs(*input) {
                    return;
                }
                let xs = self.shape(*input);
                let plane = xs[2] * xs[3];
                let gi = adj!(*input);
                for (bc, gv) in g.iter().enumerate() {
                    for v in &mut gi[bc * plane..(bc + 1) * plane] {
                        *v += *gv;
                    }
                }
            }
        }
    }
}

fn i_id(i: usize) -> NodeId {
    NodeId(i)
}

fn add_assign<E: Scalar>(dst: &mut [E], src: &[E]) {
    debug_assert_eq!(dst.len(), src.len());
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

/// Source taps for scale-2 bilinear interpolation without corner alignment:
/// for each output index, the two clamped source indices and the blend
/// fraction toward the second one.
fn upsample_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = (floor as isize).clamp(0, in_len as isize - 1) as usize;
            let i1 = (floor as isize + 1).clamp(0, in_len as isize - 1) as usize;
            (i0, i1, frac)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_shape_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 8, 8]));
        let w = g.constant(Tensor::zeros(vec![4, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 4, 8, 8]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 8, 8]));
        let w = g.constant(Tensor::zeros(vec![4, 1, 3, 3]));
        let err = g.conv2d(x, w, None, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d") && msg.contains('3') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn conv2d_known_values() {
        // 2x2 input, 2x2 kernel, no padding: plain dot product.
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 2, 2], &[0.5, -1.0, 0.25, 2.0]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv2d(x, w, Some(b), 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5 - 2.0 + 0.75 + 8.0 + 0.5]);
    }

    #[test]
    fn softmax_uniform_on_zero_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 2, 2]));
        let y = g.softmax_channels(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_positive() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4, 1, 2], &[3.0, -2.0, 0.5, 9.0, -1.0, 0.0, 2.0, -7.0]));
        let y = g.softmax_channels(x).unwrap();
        let d = g.value(y).data();
        for i in 0..2 {
            let s: f64 = (0..4).map(|c| d[c * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(d.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn bilinear_preserves_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![1, 1, 2, 2], 3.25));
        let y = g.bilinear_upsample2x(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
        for &v in g.value(y).data() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, 9.0]), true);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_mean_square_half() {
        // loss = mean(x^2) / 2 with x = [3, -1] -> grad [1.5, -0.5]
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[3.0, -1.0]), true);
        let sq = g.mul(x, x).unwrap();
        let m = g.mean_all(sq);
        let loss = g.scale(0.5, m);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert!((grad[0] - 1.5).abs() < 1e-12);
        assert!((grad[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_unused_leaf_stays_untouched() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let p = g.leaf(t(&[2], &[5.0, 6.0]), true);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(g.grad(p).is_none());
    }

    #[test]
    fn backward_accumulates_twice() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        let once: Vec<f64> = g.grad(x).unwrap().to_vec();
        g.backward(loss).unwrap();
        let twice: Vec<f64> = g.grad(x).unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.relu(x);
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn max_pool_takes_first_on_ties() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 5.0]), true);
        let y = g.max_pool2x2(x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[1, 1, 1, 2], &[1.0, 2.0]), true);
        let b = g.leaf(t(&[1, 2, 1, 2], &[3.0, 4.0, 5.0, 6.0]), true);
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 3, 1, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = g.constant(t(&[1, 3, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let prod = g.mul(c, w).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 2.0]);
        assert_eq!(g.grad(b).unwrap(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn instance_norm_normalizes_per_channel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let gamma = g.constant(t(&[1], &[1.0]));
        let beta = g.constant(t(&[1], &[0.0]));
        let y = g.instance_norm(x, gamma, beta).unwrap();
        let d = g.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / 4.0;
        let var: f64 = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 2e-5); // eps shifts variance slightly
    }

    #[test]
    fn forward_is_pure() {
        let x = Tensor::from_fn(vec![1, 2, 4, 4], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(vec![3, 2, 3, 3], |i| (i as f64 * 0.11).cos());
        let run = || {
            let mut g = Graph::<f64>::new();
            let xi = g.constant(x.clone());
            let wi = g.constant(w.clone());
            let y = g.conv2d(xi, wi, None, 1).unwrap();
            let s = g.softmax_channels(y).unwrap();
            g.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
