use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::kernels::{self, ConvGeom, MatRef};

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
    match &mut grads[id.index()] {
        Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

impl Graph {
    /// Reverse sweep from a scalar `loss`. Gradients from every use of a node
    /// are summed; afterwards [`Graph::grad`] reads them back.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(vec![1.0]);
        for i in (0..=loss.index()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut push = |id: NodeId, g: Vec<f64>| {
            if self.wants(id) {
                accumulate(grads, id, g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let xd = self.dims(*x);
                let wd = self.dims(*w);
                let geom = ConvGeom {
                    channels: xd[1],
                    height: xd[2],
                    width: xd[3],
                    kernel: (wd[2], wd[3]),
                    stride: *stride,
                    padding: *padding,
                };
                let (n, cout) = (xd[0], wd[0]);
                let (k, p) = (geom.col_rows(), geom.col_cols());
                let img = geom.image_len();
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                let mut cols = vec![0.0; k * p];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * img];
                    for s in 0..n {
                        let go = &gout[s * cout * p..(s + 1) * cout * p];
                        kernels::gemm(MatRef::new(wv, cout, k).t(), MatRef::new(go, cout, p), 0.0, &mut cols);
                        kernels::col2im(&cols, &geom, &mut dx[s * img..(s + 1) * img]);
                    }
                    push(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; cout * k];
                    for s in 0..n {
                        let go = &gout[s * cout * p..(s + 1) * cout * p];
                        kernels::im2col(&xv[s * img..(s + 1) * img], &geom, &mut cols);
                        kernels::gemm(MatRef::new(go, cout, p), MatRef::new(&cols, k, p).t(), 1.0, &mut dw);
                    }
                    push(*w, dw);
                }
                if self.wants(*b) {
                    push(*b, channel_sums(gout, n, cout, p));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let xd = self.dims(*x);
                let wd = self.dims(*w);
                let od = out.dims();
                let geom = ConvGeom {
                    channels: wd[1],
                    height: od[2],
                    width: od[3],
                    kernel: (wd[2], wd[3]),
                    stride: *stride,
                    padding: *padding,
                };
                let (n, cin, cout) = (xd[0], xd[1], wd[1]);
                let p = xd[2] * xd[3];
                let k = geom.col_rows();
                let img = geom.image_len();
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                let mut cols = vec![0.0; k * p];
                let mut dx = self.wants(*x).then(|| vec![0.0; n * cin * p]);
                let mut dw = self.wants(*w).then(|| vec![0.0; cin * k]);
                if dx.is_some() || dw.is_some() {
                    for s in 0..n {
                        kernels::im2col(&gout[s * img..(s + 1) * img], &geom, &mut cols);
                        if let Some(dx) = dx.as_mut() {
                            kernels::gemm(
                                MatRef::new(wv, cin, k),
                                MatRef::new(&cols, k, p),
                                0.0,
                                &mut dx[s * cin * p..(s + 1) * cin * p],
                            );
                        }
                        if let Some(dw) = dw.as_mut() {
                            let xs = &xv[s * cin * p..(s + 1) * cin * p];
                            kernels::gemm(MatRef::new(xs, cin, p), MatRef::new(&cols, k, p).t(), 1.0, dw);
                        }
                    }
                }
                if let Some(dx) = dx {
                    push(*x, dx);
                }
                if let Some(dw) = dw {
                    push(*w, dw);
                }
                if self.wants(*b) {
                    push(*b, channel_sums(gout, n, cout, od[2] * od[3]));
                }
            }
            Op::Linear { x, w, b } => {
                let xd = self.dims(*x);
                let (n, din) = (xd[0], xd[1]);
                let dout = self.dims(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * din];
                    kernels::gemm(
                        MatRef::new(gout, n, dout),
                        MatRef::new(self.value(*w).data(), dout, din),
                        0.0,
                        &mut dx,
                    );
                    push(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm(
                        MatRef::new(gout, n, dout).t(),
                        MatRef::new(self.value(*x).data(), n, din),
                        0.0,
                        &mut dw,
                    );
                    push(*w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; dout];
                    for row in gout.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    push(*b, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                push(*x, xv.iter().zip(gout).map(|(&a, &g)| if a > 0.0 { g } else { 0.0 }).collect());
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                push(
                    *x,
                    xv.iter()
                        .zip(gout)
                        .map(|(&a, &g)| if a > 0.0 { g } else { slope * g })
                        .collect(),
                );
            }
            Op::Tanh(x) => {
                push(*x, out.data().iter().zip(gout).map(|(&y, &g)| g * (1.0 - y * y)).collect());
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                push(*x, xv.iter().zip(gout).map(|(&a, &g)| g * kernels::sigmoid(a)).collect());
            }
            Op::Exp(x) => {
                push(*x, out.data().iter().zip(gout).map(|(&y, &g)| g * y).collect());
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                push(*x, xv.iter().zip(gout).map(|(&a, &g)| g / a).collect());
            }
            Op::Scale(x, f) => push(*x, gout.iter().map(|g| g * f).collect()),
            Op::InstanceNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let xd = self.dims(*x);
                let c = xd[1];
                let m = xd[2] * xd[3];
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (plane, inv) in inv_std.iter().enumerate() {
                        let ch = plane % c;
                        let range = plane * m..(plane + 1) * m;
                        let go = &gout[range.clone()];
                        let xh = &xhat[range.clone()];
                        let sum_g: f64 = go.iter().sum::<f64>() * gv[ch];
                        let sum_gx: f64 = go.iter().zip(xh).map(|(g, h)| g * h).sum::<f64>() * gv[ch];
                        let scale = inv / m as f64;
                        for ((d, g), h) in dx[range].iter_mut().zip(go).zip(xh) {
                            *d = scale * (m as f64 * g * gv[ch] - sum_g - h * sum_gx);
                        }
                    }
                    push(*x, dx);
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0; c];
                    for (plane, (go, xh)) in gout.chunks(m).zip(xhat.chunks(m)).enumerate() {
                        dg[plane % c] += go.iter().zip(xh).map(|(g, h)| g * h).sum::<f64>();
                    }
                    push(*gain, dg);
                }
                if self.wants(*shift) {
                    push(*shift, channel_sums(gout, xd[0], c, m));
                }
            }
            Op::Dropout { x, mask } => push(*x, gout.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::LogSoftmax(x) => {
                let k = *out.dims().last().unwrap();
                let mut dx = vec![0.0; gout.len()];
                for ((d, g), y) in dx.chunks_mut(k).zip(gout.chunks(k)).zip(out.data().chunks(k)) {
                    let s: f64 = g.iter().sum();
                    for ((di, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *di = gi - yi.exp() * s;
                    }
                }
                push(*x, dx);
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits).data();
                let k = self.dims(*logits)[1];
                let mut dx = vec![0.0; lv.len()];
                kernels::log_softmax_rows(lv, k, &mut dx);
                let scale = gout[0] / targets.len() as f64;
                for (r, row) in dx.chunks_mut(k).enumerate() {
                    row.iter_mut().for_each(|v| *v = v.exp());
                    row[targets[r]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                push(*logits, dx);
            }
            Op::KlDiv { p, q } => {
                let pv = self.value(*p).data();
                let qv = self.value(*q).data();
                let k = self.dims(*p).last().copied().unwrap_or(1).max(1);
                let scale = gout[0] / (pv.len() / k).max(1) as f64;
                if self.wants(*p) {
                    push(
                        *p,
                        pv.iter()
                            .zip(qv)
                            .map(|(&a, &b)| scale * a.exp() * (a - b + 1.0))
                            .collect(),
                    );
                }
                if self.wants(*q) {
                    push(*q, pv.iter().map(|&a| -scale * a.exp()).collect());
                }
            }
            Op::Sum(x) => push(*x, vec![gout[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                push(*x, vec![gout[0] / n.max(1) as f64; n]);
            }
            Op::Add(a, b) => {
                push(*a, gout.to_vec());
                push(*b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                push(*a, gout.to_vec());
                push(*b, gout.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                push(*a, gout.iter().zip(bv).map(|(g, y)| g * y).collect());
                push(*b, gout.iter().zip(av).map(|(g, y)| g * y).collect());
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &part in parts {
                    let n = self.value(part).len();
                    push(part, gout[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Reshape(x) => push(*x, gout.to_vec()),
            Op::MatMul(a, b) => {
                let (ad, bd) = (self.dims(*a), self.dims(*b));
                let (m, k, n) = (ad[0], ad[1], bd[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(
                        MatRef::new(gout, m, n),
                        MatRef::new(self.value(*b).data(), k, n).t(),
                        0.0,
                        &mut da,
                    );
                    push(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(
                        MatRef::new(self.value(*a).data(), m, k).t(),
                        MatRef::new(gout, m, n),
                        0.0,
                        &mut db,
                    );
                    push(*b, db);
                }
            }
            Op::Transpose(x) => {
                let d = self.dims(*x);
                let (r, c) = (d[0], d[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = gout[j * r + i];
                    }
                }
                push(*x, dx);
            }
            Op::L2Normalize { x, eps, norms } => {
                let cols = self.dims(*x)[1].max(1);
                let mut dx = vec![0.0; gout.len()];
                for (((d, g), y), &norm) in dx
                    .chunks_mut(cols)
                    .zip(gout.chunks(cols))
                    .zip(out.data().chunks(cols))
                    .zip(norms)
                {
                    if norm > *eps {
                        let proj: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((di, gi), yi) in d.iter_mut().zip(g).zip(y) {
                            *di = (gi - yi * proj) / norm;
                        }
                    } else {
                        for (di, gi) in d.iter_mut().zip(g) {
                            *di = gi / eps;
                        }
                    }
                }
                push(*x, dx);
            }
            Op::GatherLocations { x, locs } => {
                let d = self.dims(*x);
                let (c, plane) = (d[1], d[2] * d[3]);
                let mut dx = vec![0.0; self.value(*x).len()];
                for (row, &(s, p)) in gout.chunks(c).zip(locs) {
                    for (ch, g) in row.iter().enumerate() {
                        dx[(s * c + ch) * plane + p] += g;
                    }
                }
                push(*x, dx);
            }
            Op::GatherRows { x, rows } => {
                let d = self.dims(*x);
                let mut dx = vec![0.0; d[0] * d[1]];
                for (row, &r) in gout.chunks(d[1]).zip(rows) {
                    dx[r * d[1]..(r + 1) * d[1]]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, g)| *a += g);
                }
                push(*x, dx);
            }
            Op::FramesToRows(x) => {
                let d = self.dims(*x);
                let (n, c, f, t) = (d[0], d[1], d[2], d[3]);
                let mut dx = vec![0.0; gout.len()];
                for s in 0..n {
                    for ch in 0..c {
                        for fi in 0..f {
                            for ti in 0..t {
                                dx[((s * c + ch) * f + fi) * t + ti] = gout[(s * t + ti) * c * f + ch * f + fi];
                            }
                        }
                    }
                }
                push(*x, dx);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<_> = inputs.iter().map(|id| self.value(*id)).collect();
                let contribs = op.backward(&values, out, gout);
                for (id, g) in inputs.iter().zip(contribs) {
                    if let Some(g) = g {
                        push(*id, g);
                    }
                }
            }
        }
    }
}

fn channel_sums(gout: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (s * c + ch) * plane;
            *o += gout[base..base + plane].iter().sum::<f64>();
        }
    }
    out
}
