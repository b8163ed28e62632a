//! Reverse-mode differentiation over a tape of recorded operations.
//!
//! Operations append nodes to a [`Graph`]; [`Graph::backward`] consumes the
//! tape, visiting nodes once in reverse topological (creation) order and
//! accumulating gradients additively across fan-out. Convolution is direct
//! im2col + gemm; no FFT.

use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    },
    Pool2d {
        x: NodeId,
        window: usize,
        stride: usize,
        mode: PoolMode,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    SumAll {
        x: NodeId,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SqDist {
        a: NodeId,
        b: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation plus the values at every node.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients for every grad-requiring node, produced by [`Graph::backward`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a trainable input whose gradient will be materialized.
    pub fn leaf_grad(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// 2D cross-correlation with zero padding.
    ///
    /// `x`: N×C×H×W, `w`: K×C×kh×kw, `b`: K.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (n, c, h, wd) = self.value(x).dims4("conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let (k, wc, kh, kw) = match ws[..] {
            [k, wc, kh, kw] => (k, wc, kh, kw),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("weight must be K×C×kh×kw, got {ws:?}"),
                })
            }
        };
        if wc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {c} channels, weight expects {wc}"),
            });
        }
        if self.value(b).shape() != [k] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias must have shape [{k}], got {:?}", self.value(b).shape()),
            });
        }
        if stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let (oh, ow) = conv_out_dims(h, wd, kh, kw, stride, padding).ok_or_else(|| TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel {kh}×{kw} stride {stride} pad {padding} does not fit {h}×{wd} input"),
        })?;

        let cols = im2col(self.value(x), kh, kw, stride, padding, oh, ow);
        let ckk = c * kh * kw;
        let spatial = n * oh * ow;
        // out2 = W(K×CKK) · cols(CKK×spatial)
        let mut out2 = vec![T::ZERO; k * spatial];
        T::gemm(k, ckk, spatial, T::ONE, self.value(w).data(), &cols, T::ZERO, &mut out2);

        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        {
            let bias = self.value(b).data().to_vec();
            let od = out.data_mut();
            let ohw = oh * ow;
            for kk in 0..k {
                let bv = bias[kk];
                for nn in 0..n {
                    let src = &out2[kk * spatial + nn * ohw..kk * spatial + (nn + 1) * ohw];
                    let dst = &mut od[nn * k * ohw + kk * ohw..nn * k * ohw + (kk + 1) * ohw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *s + bv;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Windowed max/avg reduction without padding.
    pub fn pool2d(&mut self, x: NodeId, window: usize, stride: usize, mode: PoolMode) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("pool2d")?;
        if window == 0 || stride == 0 || h < window || w < window {
            return Err(TensorError::ShapeMismatch {
                op: "pool2d",
                detail: format!("window {window} stride {stride} does not fit {h}×{w} input"),
            });
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0u32; n * c * oh * ow];
        }
        let xd = self.value(x).data();
        let od = out.data_mut();
        let inv = T::from_f64(1.0 / (window * window) as f64);
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * h * w;
                for y in 0..oh {
                    for xo in 0..ow {
                        let oidx = ((nn * c + cc) * oh + y) * ow + xo;
                        match mode {
                            PoolMode::Max => {
                                let mut best = xd[base + (y * stride) * w + xo * stride];
                                let mut best_at = base + (y * stride) * w + xo * stride;
                                for i in 0..window {
                                    for j in 0..window {
                                        let idx = base + (y * stride + i) * w + (xo * stride + j);
                                        // strict > keeps the first row-major argmax on ties
                                        if xd[idx] > best {
                                            best = xd[idx];
                                            best_at = idx;
                                        }
                                    }
                                }
                                od[oidx] = best;
                                argmax[oidx] = best_at as u32;
                            }
                            PoolMode::Avg => {
                                let mut acc = T::ZERO;
                                for i in 0..window {
                                    for j in 0..window {
                                        let idx = base + (y * stride + i) * w + (xo * stride + j);
                                        acc = acc_add(acc, xd[idx]);
                                    }
                                }
                                od[oidx] = mul(acc, inv);
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::Pool2d {
                x,
                window,
                stride,
                mode,
                argmax,
            },
            needs,
        ))
    }

    /// Spatial mean per channel: N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let mut out = Tensor::zeros(&[n, c]);
        let xd = self.value(x).data();
        let od = out.data_mut();
        let inv = T::from_f64(1.0 / (h * w) as f64);
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * h * w;
                let mut acc = T::ZERO;
                for i in 0..h * w {
                    acc = acc_add(acc, xd[base + i]);
                }
                od[nn * c + cc] = mul(acc, inv);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::GlobalAvgPool { x }, needs))
    }

    /// Affine map: `x`(N×F) · `w`(O×F)ᵀ + `b`(O).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, f) = self.value(x).dims2("linear")?;
        let (o, wf) = self.value(w).dims2("linear")?;
        if wf != f {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("input features {f}, weight expects {wf}"),
            });
        }
        if self.value(b).shape() != [o] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("bias must have shape [{o}], got {:?}", self.value(b).shape()),
            });
        }
        let mut out = Tensor::zeros(&[n, o]);
        T::gemm_strided(
            n,
            f,
            o,
            T::ONE,
            self.value(x).data(),
            f as isize,
            1,
            self.value(w).data(),
            1,
            f as isize,
            T::ZERO,
            out.data_mut(),
            o as isize,
            1,
        );
        {
            let bias = self.value(b).data().to_vec();
            let od = out.data_mut();
            for row in od.chunks_mut(o) {
                for (v, bv) in row.iter_mut().zip(&bias) {
                    *v = acc_add(*v, *bv);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.maximum(T::ZERO));
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    /// Normalize over the channel/feature axis with learned gain and bias.
    ///
    /// For N×F inputs statistics run over F; for N×C×H×W inputs they run over
    /// C independently at each spatial position. `gain`/`bias` are sized to
    /// the normalized axis.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let (groups, axis_len, stride) = match xs[..] {
            [n, f] => (n, f, 1usize),
            [n, c, h, w] => (n * h * w, c, h * w),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("expected rank-2 or rank-4 input, got {xs:?}"),
                })
            }
        };
        if self.value(gain).shape() != [axis_len] || self.value(bias).shape() != [axis_len] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain/bias must have shape [{axis_len}], got {:?}/{:?}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            });
        }
        if !self.value(x).all_finite() {
            return Err(TensorError::NonFiniteInput { op: "layer_norm" });
        }

        let mut out = Tensor::zeros(&xs);
        let mut means = vec![T::ZERO; groups];
        let mut rstds = vec![T::ZERO; groups];
        let inv_len = 1.0 / axis_len as f64;
        {
            let xd = self.value(x).data();
            let gd = self.value(gain).data().to_vec();
            let bd = self.value(bias).data().to_vec();
            let od = out.data_mut();
            for g in 0..groups {
                let base = group_base(g, axis_len, stride);
                let mut sum = 0.0f64;
                for i in 0..axis_len {
                    sum += xd[base + i * stride].to_f64();
                }
                let mean = sum * inv_len;
                let mut var = 0.0f64;
                for i in 0..axis_len {
                    let d = xd[base + i * stride].to_f64() - mean;
                    var += d * d;
                }
                var *= inv_len;
                let rstd = 1.0 / (var + eps).sqrt();
                means[g] = T::from_f64(mean);
                rstds[g] = T::from_f64(rstd);
                for i in 0..axis_len {
                    let xhat = (xd[base + i * stride].to_f64() - mean) * rstd;
                    od[base + i * stride] = T::from_f64(xhat * gd[i].to_f64() + bd[i].to_f64());
                }
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let out = Tensor::from_fn(self.value(a).shape(), |i| {
            acc_add(self.value(a).data()[i], self.value(b).data()[i])
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let out = Tensor::from_fn(self.value(a).shape(), |i| {
            mul(self.value(a).data()[i], self.value(b).data()[i])
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.value(x).map(|v| mul(v, c));
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    /// Sum of all elements, as a shape-[1] tensor.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc = acc_add(acc, v);
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(acc), Op::SumAll { x }, needs)
    }

    /// Rows `start..start+len` of a 2D tensor.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, f) = self.value(x).dims2("slice_rows")?;
        if start + len > n {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of bounds for {n} rows", start + len),
            });
        }
        let data = self.value(x).data()[start * f..(start + len) * f].to_vec();
        let out = Tensor::from_vec(&[len, f], data).expect("slice length");
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start }, needs))
    }

    /// Pairwise squared Euclidean distances: `a`(A×D), `b`(B×D) → A×B.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ad) = self.value(a).dims2("sq_dist")?;
        let (br, bd) = self.value(b).dims2("sq_dist")?;
        if ad != bd {
            return Err(TensorError::ShapeMismatch {
                op: "sq_dist",
                detail: format!("feature dims differ: {ad} vs {bd}"),
            });
        }
        let mut out = Tensor::zeros(&[ar, br]);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let od = out.data_mut();
            for i in 0..ar {
                for j in 0..br {
                    let mut acc = T::ZERO;
                    for d in 0..ad {
                        let diff = sub(av[i * ad + d], bv[j * ad + d]);
                        acc = acc_add(acc, mul(diff, diff));
                    }
                    od[i * br + j] = acc;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::SqDist { a, b }, needs))
    }

    /// Mean softmax cross-entropy of `logits`(N×C) against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, c) = self.value(logits).dims2("softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{} targets for {n} rows", targets.len()),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("target {t} out of range for {c} classes"),
            });
        }
        if !self.value(logits).all_finite() {
            return Err(TensorError::NonFiniteInput {
                op: "softmax_cross_entropy",
            });
        }
        let mut probs = Tensor::zeros(&[n, c]);
        let mut loss = 0.0f64;
        {
            let ld = self.value(logits).data();
            let pd = probs.data_mut();
            for i in 0..n {
                let row = &ld[i * c..(i + 1) * c];
                let mut mx = row[0].to_f64();
                for v in row {
                    mx = mx.max(v.to_f64());
                }
                let mut denom = 0.0f64;
                for v in row {
                    denom += (v.to_f64() - mx).exp();
                }
                let log_denom = denom.ln();
                for (j, v) in row.iter().enumerate() {
                    pd[i * c + j] = T::from_f64(((v.to_f64() - mx) - log_denom).exp());
                }
                loss += log_denom - (row[targets[i]].to_f64() - mx);
            }
            loss /= n as f64;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    /// Run reverse-mode accumulation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue, // node did not contribute to the loss
            };
            self.accumulate(idx, &g, &mut grads);
            // keep gradients only for leaves; interior grads are scratch
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Distribute `g` (gradient at node `idx`) into the node's inputs.
    fn accumulate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => self.conv2d_backward(*x, *w, *b, *stride, *padding, g, grads),
            Op::Pool2d {
                x,
                window,
                stride,
                mode,
                argmax,
            } => {
                if self.needs(*x) {
                    let gx = grads[x.0].get_or_insert_with(|| Tensor::zeros(self.value(*x).shape()));
                    let gxd = gx.data_mut();
                    match mode {
                        PoolMode::Max => {
                            for (o, &src) in argmax.iter().enumerate() {
                                gxd[src as usize] = acc_add(gxd[src as usize], g.data()[o]);
                            }
                        }
                        PoolMode::Avg => {
                            let (n, c, h, wd) = self.value(*x).dims4("pool2d").expect("checked in forward");
                            let (_, _, oh, ow) = node.value.dims4("pool2d").expect("pool output rank");
                            let inv = T::from_f64(1.0 / (window * window) as f64);
                            for nn in 0..n {
                                for cc in 0..c {
                                    let base = (nn * c + cc) * h * wd;
                                    for y in 0..oh {
                                        for xo in 0..ow {
                                            let go = mul(g.data()[((nn * c + cc) * oh + y) * ow + xo], inv);
                                            for i in 0..*window {
                                                for j in 0..*window {
                                                    let tgt = base + (y * stride + i) * wd + (xo * stride + j);
                                                    gxd[tgt] = acc_add(gxd[tgt], go);
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.needs(*x) {
                    let (n, c, h, w) = self.value(*x).dims4("global_avg_pool").expect("checked in forward");
                    let inv = T::from_f64(1.0 / (h * w) as f64);
                    let gx = grads[x.0].get_or_insert_with(|| Tensor::zeros(self.value(*x).shape()));
                    let gxd = gx.data_mut();
                    for nn in 0..n {
                        for cc in 0..c {
                            let go = mul(g.data()[nn * c + cc], inv);
                            let base = (nn * c + cc) * h * w;
                            for i in 0..h * w {
                                gxd[base + i] = acc_add(gxd[base + i], go);
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, f) = self.value(*x).dims2("linear").expect("checked in forward");
                let (o, _) = self.value(*w).dims2("linear").expect("checked in forward");
                if self.needs(*x) {
                    // gx = g(N×O) · w(O×F)
                    let gx = grads[x.0].get_or_insert_with(|| Tensor::zeros(&[n, f]));
                    T::gemm(n, o, f, T::ONE, g.data(), self.value(*w).data(), T::ONE, gx.data_mut());
                }
                if self.needs(*w) {
                    // gw = gᵀ(O×N) · x(N×F)
                    let gw = grads[w.0].get_or_insert_with(|| Tensor::zeros(&[o, f]));
                    T::gemm_strided(
                        o,
                        n,
                        f,
                        T::ONE,
                        g.data(),
                        1,
                        o as isize,
                        self.value(*x).data(),
                        f as isize,
                        1,
                        T::ONE,
                        gw.data_mut(),
                        f as isize,
                        1,
                    );
                }
                if self.needs(*b) {
                    let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(&[o]));
                    let gbd = gb.data_mut();
                    for row in g.data().chunks(o) {
                        for (acc, &v) in gbd.iter_mut().zip(row) {
                            *acc = acc_add(*acc, v);
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let gx = grads[x.0].get_or_insert_with(|| Tensor::zeros(self.value(*x).shape()));
                    let gxd = gx.data_mut();
                    let xd = self.value(*x).data();
                    for i in 0..gxd.len() {
                        if xd[i] > T::ZERO {
                            gxd[i] = acc_add(gxd[i], g.data()[i]);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xs = self.value(*x).shape().to_vec();
                let (groups, axis_len, stride) = match xs[..] {
                    [n, f] => (n, f, 1usize),
                    [n, c, h, w] => (n * h * w, c, h * w),
                    _ => unreachable!("validated in forward"),
                };
                let xd = self.value(*x).data();
                let gaind = self.value(*gain).data();
                let need_x = self.needs(*x);
                let need_gain = self.needs(*gain);
                let need_bias = self.needs(*bias);

                let mut gx = if need_x { Some(Tensor::zeros(&xs)) } else { None };
                let mut ggain = vec![T::ZERO; axis_len];
                let mut gbias = vec![T::ZERO; axis_len];

                for gi in 0..groups {
                    let base = group_base(gi, axis_len, stride);
                    let m = mean[gi].to_f64();
                    let r = rstd[gi].to_f64();
                    let mut m1 = 0.0f64; // mean of dxhat
                    let mut m2 = 0.0f64; // mean of dxhat * xhat
                    for i in 0..axis_len {
                        let go = g.data()[base + i * stride].to_f64();
                        let xhat = (xd[base + i * stride].to_f64() - m) * r;
                        let dxhat = go * gaind[i].to_f64();
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                        if need_gain {
                            ggain[i] = T::from_f64(ggain[i].to_f64() + go * xhat);
                        }
                        if need_bias {
                            gbias[i] = T::from_f64(gbias[i].to_f64() + go);
                        }
                    }
                    m1 /= axis_len as f64;
                    m2 /= axis_len as f64;
                    if let Some(gx) = gx.as_mut() {
                        let gxd = gx.data_mut();
                        for i in 0..axis_len {
                            let go = g.data()[base + i * stride].to_f64();
                            let xhat = (xd[base + i * stride].to_f64() - m) * r;
                            let dxhat = go * gaind[i].to_f64();
                            let dx = r * (dxhat - m1 - xhat * m2);
                            gxd[base + i * stride] = T::from_f64(gxd[base + i * stride].to_f64() + dx);
                        }
                    }
                }
                if let Some(gx) = gx {
                    merge_grad(&mut grads[x.0], gx);
                }
                if need_gain {
                    merge_grad(&mut grads[gain.0], Tensor::from_vec(&[axis_len], ggain).expect("gain length"));
                }
                if need_bias {
                    merge_grad(&mut grads[bias.0], Tensor::from_vec(&[axis_len], gbias).expect("bias length"));
                }
            }
            Op::Add { a, b } => {
                for &n in &[a, b] {
                    if self.needs(*n) {
                        let gn = grads[n.0].get_or_insert_with(|| Tensor::zeros(self.value(*n).shape()));
                        for (acc, &v) in gn.data_mut().iter_mut().zip(g.data()) {
                            *acc = acc_add(*acc, v);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let other = self.value(*b).data();
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(self.value(*a).shape()));
                    for (i, acc) in ga.data_mut().iter_mut().enumerate() {
                        *acc = acc_add(*acc, mul(g.data()[i], other[i]));
                    }
                }
                if self.needs(*b) {
                    let other = self.value(*a).data();
                    let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(self.value(*b).shape()));
                    for (i, acc) in gb.data_mut().iter_mut().enumerate() {
                        *acc = acc_add(*acc, mul(g.data()[i], other[i]));
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let gx = grads[x.0].get_or_insert_with(|| Tensor::zeros(self.value(*x).shape()));
                    for (i, acc) in gx.data_mut().iter_mut().enumerate() {
                        *acc = acc_add(*acc, mul(g.data()[i], *c));
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let gv = g.item();
                    let gx = grads[x.0].get_or_insert_with(|| Tensor::zeros(self.value(*x).shape()));
                    for acc in gx.data_mut() {
                        *acc = acc_add(*acc, gv);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let (_, f) = self.value(*x).dims2("slice_rows").expect("checked in forward");
                    let gx = grads[x.0].get_or_insert_with(|| Tensor::zeros(self.value(*x).shape()));
                    let gxd = gx.data_mut();
                    for (i, &v) in g.data().iter().enumerate() {
                        let tgt = start * f + i;
                        gxd[tgt] = acc_add(gxd[tgt], v);
                    }
                }
            }
            Op::SqDist { a, b } => {
                let (ar, d) = self.value(*a).dims2("sq_dist").expect("checked in forward");
                let (br, _) = self.value(*b).dims2("sq_dist").expect("checked in forward");
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let two = T::from_f64(2.0);
                if self.needs(*a) {
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(&[ar, d]));
                    let gad = ga.data_mut();
                    for i in 0..ar {
                        for j in 0..br {
                            let go = mul(g.data()[i * br + j], two);
                            for k in 0..d {
                                let diff = sub(av[i * d + k], bv[j * d + k]);
                                gad[i * d + k] = acc_add(gad[i * d + k], mul(go, diff));
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(&[br, d]));
                    let gbd = gb.data_mut();
                    for i in 0..ar {
                        for j in 0..br {
                            let go = mul(g.data()[i * br + j], two);
                            for k in 0..d {
                                let diff = sub(av[i * d + k], bv[j * d + k]);
                                gbd[j * d + k] = sub(gbd[j * d + k], mul(go, diff));
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.needs(*logits) {
                    let (n, c) = probs.dims2("softmax_cross_entropy").expect("probs rank");
                    let scale = mul(g.item(), T::from_f64(1.0 / n as f64));
                    let gl = grads[logits.0].get_or_insert_with(|| Tensor::zeros(&[n, c]));
                    let gld = gl.data_mut();
                    for i in 0..n {
                        for j in 0..c {
                            let mut p = probs.data()[i * c + j];
                            if j == targets[i] {
                                p = sub(p, T::ONE);
                            }
                            gld[i * c + j] = acc_add(gld[i * c + j], mul(scale, p));
                        }
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, c, h, wd) = self.value(x).dims4("conv2d").expect("checked in forward");
        let ws = self.value(w).shape();
        let (k, kh, kw) = (ws[0], ws[2], ws[3]);
        let (_, _, oh, ow) = g.dims4("conv2d").expect("grad rank");
        let ckk = c * kh * kw;
        let spatial = n * oh * ow;
        let ohw = oh * ow;

        // gather grad into K×(N·OH·OW), the gemm layout used in forward
        let mut gmat = vec![T::ZERO; k * spatial];
        for nn in 0..n {
            for kk in 0..k {
                let src = &g.data()[(nn * k + kk) * ohw..(nn * k + kk + 1) * ohw];
                gmat[kk * spatial + nn * ohw..kk * spatial + (nn + 1) * ohw].copy_from_slice(src);
            }
        }

        if self.needs(b) {
            let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(&[k]));
            let gbd = gb.data_mut();
            for kk in 0..k {
                let mut acc = T::ZERO;
                for &v in &gmat[kk * spatial..(kk + 1) * spatial] {
                    acc = acc_add(acc, v);
                }
                gbd[kk] = acc_add(gbd[kk], acc);
            }
        }

        if self.needs(w) {
            // im2col is recomputed rather than cached; graphs stay small
            let cols = im2col(self.value(x), kh, kw, stride, padding, oh, ow);
            let gw = grads[w.0].get_or_insert_with(|| Tensor::zeros(self.value(w).shape()));
            // gw(K×CKK) += gmat(K×spatial) · colsᵀ(spatial×CKK)
            T::gemm_strided(
                k,
                spatial,
                ckk,
                T::ONE,
                &gmat,
                spatial as isize,
                1,
                &cols,
                1,
                spatial as isize,
                T::ONE,
                gw.data_mut(),
                ckk as isize,
                1,
            );
        }

        if self.needs(x) {
            // dcols(CKK×spatial) = wᵀ(CKK×K) · gmat(K×spatial)
            let mut dcols = vec![T::ZERO; ckk * spatial];
            T::gemm_strided(
                ckk,
                k,
                spatial,
                T::ONE,
                self.value(w).data(),
                1,
                ckk as isize,
                &gmat,
                spatial as isize,
                1,
                T::ZERO,
                &mut dcols,
                spatial as isize,
                1,
            );
            let gx = grads[x.0].get_or_insert_with(|| Tensor::zeros(&[n, c, h, wd]));
            col2im_add(&dcols, gx.data_mut(), n, c, h, wd, kh, kw, stride, padding, oh, ow);
        }
    }
}

fn merge_grad<T: Scalar>(slot: &mut Option<Tensor<T>>, add: Tensor<T>) {
    match slot {
        None => *slot = Some(add),
        Some(existing) => {
            for (acc, &v) in existing.data_mut().iter_mut().zip(add.data()) {
                *acc = acc_add(*acc, v);
            }
        }
    }
}

#[inline]
fn acc_add<T: Scalar>(a: T, b: T) -> T {
    T::from_f64(a.to_f64() + b.to_f64())
}

#[inline]
fn sub<T: Scalar>(a: T, b: T) -> T {
    T::from_f64(a.to_f64() - b.to_f64())
}

#[inline]
fn mul<T: Scalar>(a: T, b: T) -> T {
    T::from_f64(a.to_f64() * b.to_f64())
}

#[inline]
fn group_base(group: usize, axis_len: usize, stride: usize) -> usize {
    if stride == 1 {
        group * axis_len
    } else {
        // 4D layout: group = n·(H·W) + s, elements at n·C·H·W + c·H·W + s
        let n = group / stride;
        let s = group % stride;
        n * axis_len * stride + s
    }
}

pub(crate) fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> Option<(usize, usize)> {
    let eh = h + 2 * padding;
    let ew = w + 2 * padding;
    if eh < kh || ew < kw {
        return None;
    }
    Some(((eh - kh) / stride + 1, (ew - kw) / stride + 1))
}

/// Expand `x`(N×C×H×W) into a (C·kh·kw)×(N·OH·OW) patch matrix with zero padding.
fn im2col<T: Scalar>(x: &Tensor<T>, kh: usize, kw: usize, stride: usize, padding: usize, oh: usize, ow: usize) -> Vec<T> {
    let (n, c, h, w) = x.dims4("im2col").expect("validated by caller");
    let spatial = n * oh * ow;
    let mut cols = vec![T::ZERO; c * kh * kw * spatial];
    let xd = x.data();
    for cc in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (cc * kh + i) * kw + j;
                let out_row = &mut cols[row * spatial..(row + 1) * spatial];
                for nn in 0..n {
                    let in_base = (nn * c + cc) * h * w;
                    for y in 0..oh {
                        let iy = (y * stride + i) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = nn * oh * ow + y * ow;
                        let src_row = in_base + iy as usize * w;
                        for xo in 0..ow {
                            let ix = (xo * stride + j) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out_row[dst + xo] = xd[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch matrix back onto the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    out: &mut [T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let spatial = n * oh * ow;
    for cc in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (cc * kh + i) * kw + j;
                let col_row = &cols[row * spatial..(row + 1) * spatial];
                for nn in 0..n {
                    let out_base = (nn * c + cc) * h * w;
                    for y in 0..oh {
                        let iy = (y * stride + i) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = nn * oh * ow + y * ow;
                        let dst_row = out_base + iy as usize * w;
                        for xo in 0..ow {
                            let ix = (xo * stride + j) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[dst_row + ix as usize] = acc_add(out[dst_row + ix as usize], col_row[src + xo]);
                        }
                    }
                }
            }
        }
    }
}
