//! Append-only computation tape and reverse-mode sweep.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, MatRef};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Backward rule for a primitive defined outside this crate.
///
/// Returns one optional gradient per input, each the size of that input.
pub trait CustomOp {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64])
        -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    InstanceNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    LogSoftmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    KlDiv {
        p: NodeId,
        q: NodeId,
    },
    Sum(NodeId),
    Mean(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    L2Normalize {
        x: NodeId,
        eps: f64,
        norms: Vec<f64>,
    },
    GatherLocations {
        x: NodeId,
        locs: Vec<(usize, usize)>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    FramesToRows(NodeId),
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A single forward pass. Nodes are only ever appended, so inputs always
/// precede the nodes that consume them.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite output from primitive");
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant copy of `id`'s value; gradients stop here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.input(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `id`, zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<f64> {
        self.grad(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; self.value(id).len()])
    }

    /// Which side of its kink every piecewise-linear node's input sits on.
    /// Two evaluations with different signatures straddle a kink.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    sig.extend(self.nodes[x.0].value.data().iter().map(|v| *v > 0.0))
                }
                Op::L2Normalize { eps, norms, .. } => sig.extend(norms.iter().map(|n| n > eps)),
                _ => {}
            }
        }
        sig
    }

    fn check_same_dims(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return shape_err(
                op,
                format!("operands {:?} and {:?} differ", self.dims(a), self.dims(b)),
            );
        }
        Ok(())
    }

    fn map_unary(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.dims().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("same size")
    }

    // ---- convolution family ----

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<NodeId> {
        let (n, geom, cout) = self.conv_geom("conv2d", x, w, b, stride, padding)?;
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let p = ho * wo;
        let k = geom.col_rows();
        let mut out = vec![0.0; n * cout * p];
        let mut cols = vec![0.0; k * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..n {
                kernels::im2col(&xv[s * geom.image_len()..(s + 1) * geom.image_len()], &geom, &mut cols);
                let dst = &mut out[s * cout * p..(s + 1) * cout * p];
                kernels::gemm(MatRef::new(wv, cout, k), MatRef::new(&cols, k, p), 0.0, dst);
                for (c, row) in dst.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &[x, w, b],
        ))
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<(usize, ConvGeom, usize)> {
        let xd = self.dims(x);
        let wd = self.dims(w);
        if xd.len() != 4 || wd.len() != 4 {
            return shape_err(op, format!("input {:?}, kernel {:?} must be rank 4", xd, wd));
        }
        if wd[1] != xd[1] {
            return shape_err(op, format!("kernel {:?} does not take {} channels", wd, xd[1]));
        }
        if self.dims(b) != [wd[0]] {
            return shape_err(op, format!("bias {:?} vs {} out channels", self.dims(b), wd[0]));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return shape_err(op, "zero stride");
        }
        if xd[2] + 2 * padding.0 < wd[2] || xd[3] + 2 * padding.1 < wd[3] {
            return shape_err(op, format!("input {:?} smaller than kernel {:?}", xd, wd));
        }
        let geom = ConvGeom {
            channels: xd[1],
            height: xd[2],
            width: xd[3],
            kernel: (wd[2], wd[3]),
            stride,
            padding,
        };
        Ok((xd[0], geom, wd[0]))
    }

    /// Transposed convolution; `w` is `[cin, cout, kh, kw]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
        output_padding: (usize, usize),
    ) -> Result<NodeId> {
        const OP: &str = "conv_transpose2d";
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if xd.len() != 4 || wd.len() != 4 || wd[0] != xd[1] {
            return shape_err(OP, format!("input {:?} vs kernel {:?}", xd, wd));
        }
        if self.dims(b) != [wd[1]] {
            return shape_err(OP, format!("bias {:?} vs {} out channels", self.dims(b), wd[1]));
        }
        if stride.0 == 0 || stride.1 == 0 || output_padding.0 >= stride.0 || output_padding.1 >= stride.1 {
            return shape_err(OP, "output_padding must be smaller than a nonzero stride");
        }
        let (n, cin, h, wdt) = (xd[0], xd[1], xd[2], xd[3]);
        let (cout, kh, kw) = (wd[1], wd[2], wd[3]);
        let full_h = (h - 1) * stride.0 + kh + output_padding.0;
        let full_w = (wdt - 1) * stride.1 + kw + output_padding.1;
        if full_h < 2 * padding.0 + 1 || full_w < 2 * padding.1 + 1 || h == 0 || wdt == 0 {
            return shape_err(OP, "padding consumes the whole output");
        }
        let geom = ConvGeom {
            channels: cout,
            height: full_h - 2 * padding.0,
            width: full_w - 2 * padding.1,
            kernel: (kh, kw),
            stride,
            padding,
        };
        debug_assert_eq!((geom.out_height(), geom.out_width()), (h, wdt));
        let p = h * wdt;
        let k = geom.col_rows();
        let mut out = vec![0.0; n * geom.image_len()];
        let mut cols = vec![0.0; k * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..n {
                let xs = &xv[s * cin * p..(s + 1) * cin * p];
                kernels::gemm(MatRef::new(wv, cin, k).t(), MatRef::new(xs, cin, p), 0.0, &mut cols);
                let dst = &mut out[s * geom.image_len()..(s + 1) * geom.image_len()];
                kernels::col2im(&cols, &geom, dst);
                let plane = geom.height * geom.width;
                for (c, chunk) in dst.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        let value = Tensor::new(vec![n, cout, geom.height, geom.width], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &[x, w, b],
        ))
    }

    /// `x · wᵀ + b` with `x: [n, din]`, `w: [dout, din]`, `b: [dout]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xd = self.dims(x);
        let wd = self.dims(w);
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[1] || self.dims(b) != [wd[0]] {
            return shape_err(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", xd, wd, self.dims(b)),
            );
        }
        let (n, din, dout) = (xd[0], xd[1], wd[0]);
        let mut out = vec![0.0; n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::gemm(
            MatRef::new(self.value(x).data(), n, din),
            MatRef::new(self.value(w).data(), dout, din).t(),
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    // ---- elementwise ----

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.map_unary(x, |a| if a > 0.0 { a } else { 0.0 });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.map_unary(x, |a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.map_unary(x, f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.map_unary(x, kernels::softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.map_unary(x, f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.map_unary(x, f64::ln);
        self.push(v, Op::Log(x), &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.map_unary(x, |a| a * factor);
        self.push(v, Op::Scale(x, factor), &[x])
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    fn zip_values(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(va.dims().to_vec(), data).expect("same size")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_dims("add", a, b)?;
        let v = self.zip_values(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_dims("sub", a, b)?;
        let v = self.zip_values(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_dims("mul", a, b)?;
        let v = self.zip_values(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    // ---- normalization and regularization ----

    /// Per-(sample, channel) plane standardization followed by a channel affine.
    pub fn instance_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let xd = self.dims(x).to_vec();
        if xd.len() != 4 || self.dims(gain) != [xd[1]] || self.dims(shift) != [xd[1]] {
            return shape_err(
                "instance_norm",
                format!("input {:?}, gain {:?}, shift {:?}", xd, self.dims(gain), self.dims(shift)),
            );
        }
        let c = xd[1];
        let m = xd[2] * xd[3];
        if m < 2 {
            return shape_err("instance_norm", "planes need at least two elements");
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let sv = self.value(shift).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xd[0] * c);
        for (plane_idx, plane) in xv.chunks(m).enumerate() {
            let ch = plane_idx % c;
            let mean = plane.iter().sum::<f64>() / m as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let base = plane_idx * m;
            for (i, v) in plane.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat[base + i] = h;
                out[base + i] = gv[ch] * h + sv[ch];
            }
        }
        let value = Tensor::new(xd, out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            &[x, gain, shift],
        ))
    }

    /// Inverted dropout. The sampled mask is kept for the backward pass.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.dims().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    // ---- distributions ----

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let k = *xv.dims().last().ok_or_else(|| Error::Shape {
            op: "log_softmax",
            detail: "scalar input".into(),
        })?;
        if k == 0 {
            return shape_err("log_softmax", "empty class axis");
        }
        let mut out = vec![0.0; xv.len()];
        kernels::log_softmax_rows(xv.data(), k, &mut out);
        let value = Tensor::new(xv.dims().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    /// Mean over rows of `-log_softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let ld = self.dims(logits);
        if ld.len() != 2 || ld[0] != targets.len() || ld[0] == 0 {
            return shape_err(
                "cross_entropy",
                format!("logits {:?} with {} targets", ld, targets.len()),
            );
        }
        let k = ld[1];
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return shape_err("cross_entropy", format!("target {t} out of {k} classes"));
        }
        let lv = self.value(logits).data();
        let mut logp = vec![0.0; lv.len()];
        kernels::log_softmax_rows(lv, k, &mut logp);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -logp[r * k + t])
            .sum();
        let value = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// `KL(p || q)` from log-probabilities over the trailing axis, averaged
    /// over all leading positions.
    pub fn kl_div(&mut self, p_log: NodeId, q_log: NodeId) -> Result<NodeId> {
        self.check_same_dims("kl_div", p_log, q_log)?;
        let k = self.dims(p_log).last().copied().unwrap_or(1).max(1);
        let pv = self.value(p_log).data();
        let qv = self.value(q_log).data();
        let rows = pv.len() / k;
        let total: f64 = pv
            .iter()
            .zip(qv)
            .map(|(&p, &q)| p.exp() * (p - q))
            .sum();
        let value = Tensor::scalar(total / rows.max(1) as f64);
        Ok(self.push(value, Op::KlDiv { p: p_log, q: q_log }, &[p_log, q_log]))
    }

    // ---- reductions and shape ----

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            op: "concat",
            detail: "no operands".into(),
        })?;
        let tail = self.dims(*first).get(1..).unwrap_or(&[]).to_vec();
        if self.dims(*first).is_empty() {
            return shape_err("concat", "scalar operand");
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let d = self.dims(p);
            if d.is_empty() || d[1..] != tail[..] {
                return shape_err("concat", format!("{:?} does not stack with {:?}", d, tail));
            }
            lead += d[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut dims = vec![lead];
        dims.extend(tail);
        let value = Tensor::new(dims, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(dims)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return shape_err("matmul", format!("{:?} · {:?}", ad, bd));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.dims(x);
        if d.len() != 2 {
            return shape_err("transpose", format!("{:?} is not a matrix", d));
        }
        let (r, c) = (d[0], d[1]);
        let v = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Divide each row of a `[rows, d]` matrix by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.dims(x);
        if d.len() != 2 {
            return shape_err("l2_normalize", format!("{:?} is not a matrix", d));
        }
        let cols = d[1].max(1);
        let v = self.value(x).data();
        let mut norms = Vec::with_capacity(d[0]);
        let mut out = vec![0.0; v.len()];
        for (row, dst) in v.chunks(cols).zip(out.chunks_mut(cols)) {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            norms.push(norm);
            for (o, a) in dst.iter_mut().zip(row) {
                *o = a / denom;
            }
        }
        let value = Tensor::new(d.to_vec(), out)?;
        Ok(self.push(value, Op::L2Normalize { x, eps, norms }, &[x]))
    }

    /// Channel vectors of a `[n, c, h, w]` map at `(sample, h*w + w)` locations,
    /// stacked into `[locs.len(), c]`.
    pub fn gather_locations(&mut self, x: NodeId, locs: &[(usize, usize)]) -> Result<NodeId> {
        let d = self.dims(x).to_vec();
        if d.len() != 4 {
            return shape_err("gather_locations", format!("{:?} is not a feature map", d));
        }
        let (n, c, plane) = (d[0], d[1], d[2] * d[3]);
        if let Some(bad) = locs.iter().find(|(s, p)| *s >= n || *p >= plane) {
            return shape_err("gather_locations", format!("location {:?} outside {:?}", bad, d));
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(locs.len() * c);
        for &(s, p) in locs {
            out.extend((0..c).map(|ch| v[(s * c + ch) * plane + p]));
        }
        let value = Tensor::new(vec![locs.len(), c], out)?;
        Ok(self.push(
            value,
            Op::GatherLocations {
                x,
                locs: locs.to_vec(),
            },
            &[x],
        ))
    }

    /// Select rows of a `[r, d]` matrix.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let d = self.dims(x).to_vec();
        if d.len() != 2 || rows.iter().any(|&r| r >= d[0]) {
            return shape_err("gather_rows", format!("rows {:?} of {:?}", rows, d));
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d[1]);
        for &r in rows {
            out.extend_from_slice(&v[r * d[1]..(r + 1) * d[1]]);
        }
        let value = Tensor::new(vec![rows.len(), d[1]], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// `[n, c, f, t]` → `[n*t, c*f]`: one row per time frame.
    pub fn frames_to_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.dims(x).to_vec();
        if d.len() != 4 {
            return shape_err("frames_to_rows", format!("{:?} is not a feature map", d));
        }
        let (n, c, f, t) = (d[0], d[1], d[2], d[3]);
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        for s in 0..n {
            for ch in 0..c {
                for fi in 0..f {
                    for ti in 0..t {
                        out[(s * t + ti) * c * f + ch * f + fi] = v[((s * c + ch) * f + fi) * t + ti];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n * t, c * f], out)?;
        Ok(self.push(value, Op::FramesToRows(x), &[x]))
    }

    /// Record a node whose value was computed elsewhere, with a caller-supplied
    /// backward rule.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }
}
