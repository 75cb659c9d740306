//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node with
//! its forward value, `backward` walks the tape in reverse and accumulates
//! gradients into the nodes that asked for them. The op set is exactly what
//! the networks in this crate need; each backward rule is covered by the
//! finite-difference tests at the bottom of the module.

use crate::tensor::{self, ConvConf, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `a [m,k] · b [k,n]`, or `a [m,k] · b^T` when `trans_b`.
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBiasRows { x: Var, b: Var },
    AddBiasChannels { x: Var, b: Var },
    Conv2d { x: Var, w: Var, conf: ConvConf },
    Upsample2x(Var),
    BilinearResize { x: Var, in_h: usize, in_w: usize },
    GlobalAvgPool(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var, f64),
    Recip(Var),
    MeanAll(Var),
    SumAll(Var),
    /// `x [n,c,h,w] * s [n,c]`, broadcast over the spatial dims.
    ChannelScale { x: Var, s: Var },
    RowL2Normalize(Var, f64),
    RowRmsNorm(Var, f64),
    /// Batch mean of `|mean(row)| + |1 - std(row)|`.
    RowDistLoss(Var),
    SliceCols { x: Var, from: usize, to: usize },
    Reshape(Var),
    /// Repeat a `[d]` vector as `n` rows.
    BroadcastRows(Var),
    /// Per-(out,in) channel sum of squared kernel weights: `[oc, ic*k*k] -> [oc, ic]`.
    SumSqKernel { w: Var, ksq: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run autodiff tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Insert an input tensor. `needs_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Insert a tensor that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- op constructors -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_elementwise(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_elementwise(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_elementwise(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary_elementwise(a, |x| c * x);
        self.push(v, Op::Scale(a, c), self.needs(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary_elementwise(a, |x| x + c);
        self.push(v, Op::AddScalar(a), self.needs(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (br, bc) = (bv.shape()[0], bv.shape()[1]);
        let n = if trans_b { br } else { bc };
        let mut out = Tensor::zeros(&[m, n]);
        tensor::gemm(
            av.data(),
            m,
            k,
            false,
            bv.data(),
            br,
            bc,
            trans_b,
            0.0,
            out.data_mut(),
        );
        self.push(
            out,
            Op::MatMul { a, b, trans_b },
            self.needs(a) || self.needs(b),
        )
    }

    pub fn add_bias_rows(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(bv.numel(), d);
        let mut out = xv.clone();
        for r in 0..n {
            for c in 0..d {
                out.data_mut()[r * d + c] += bv.data()[c];
            }
        }
        self.push(out, Op::AddBiasRows { x, b }, self.needs(x) || self.needs(b))
    }

    pub fn add_bias_channels(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let s = xv.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        assert_eq!(bv.numel(), c);
        let mut out = xv.clone();
        for i in 0..n {
            for ci in 0..c {
                let add = bv.data()[ci];
                for v in &mut out.data_mut()[(i * c + ci) * hw..(i * c + ci + 1) * hw] {
                    *v += add;
                }
            }
        }
        self.push(
            out,
            Op::AddBiasChannels { x, b },
            self.needs(x) || self.needs(b),
        )
    }

    /// Conv over NCHW input; weight layout `[oc, ic*k*k]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let out_ch = self.value(w).shape()[0];
        let conf = ConvConf {
            in_ch: xs[1],
            out_ch,
            kernel,
            stride,
            pad,
            in_h: xs[2],
            in_w: xs[3],
        };
        assert_eq!(self.value(w).shape()[1], conf.col_rows());
        let y = tensor::conv2d_forward(self.value(x), self.value(w), None, &conf);
        self.push(
            y,
            Op::Conv2d { x, w, conf },
            self.needs(x) || self.needs(w),
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let y = tensor::upsample2x_forward(self.value(x));
        self.push(y, Op::Upsample2x(x), self.needs(x))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        let y = tensor::bilinear_resize_forward(self.value(x), out_h, out_w);
        self.push(
            y,
            Op::BilinearResize {
                x,
                in_h: s[2],
                in_w: s[3],
            },
            self.needs(x),
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            for ci in 0..c {
                out.data_mut()[i * c + ci] = xv.data()
                    [(i * c + ci) * hw..(i * c + ci + 1) * hw]
                    .iter()
                    .sum::<f64>()
                    / hw as f64;
            }
        }
        self.push(out, Op::GlobalAvgPool(x), self.needs(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.unary_elementwise(x, |a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(x, slope), self.needs(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.unary_elementwise(x, sigmoid);
        self.push(v, Op::Sigmoid(x), self.needs(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.unary_elementwise(x, |a| a.max(0.0) + (-a.abs()).exp().ln_1p());
        self.push(v, Op::Softplus(x), self.needs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.unary_elementwise(x, |a| a * a);
        self.push(v, Op::Square(x), self.needs(x))
    }

    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Var {
        let v = self.unary_elementwise(x, |a| (a + eps).sqrt());
        self.push(v, Op::Sqrt(x, eps), self.needs(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.unary_elementwise(x, |a| 1.0 / a);
        self.push(v, Op::Recip(x), self.needs(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(x), self.needs(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::SumAll(x), self.needs(x))
    }

    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        let sh = xv.shape().to_vec();
        let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
        assert_eq!(sv.shape(), &[n, c]);
        let mut out = xv.clone();
        for i in 0..n {
            for ci in 0..c {
                let f = sv.data()[i * c + ci];
                for v in &mut out.data_mut()[(i * c + ci) * hw..(i * c + ci + 1) * hw] {
                    *v *= f;
                }
            }
        }
        self.push(out, Op::ChannelScale { x, s }, self.needs(x) || self.needs(s))
    }

    pub fn row_l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = xv.clone();
        for r in 0..n {
            let row = &mut out.data_mut()[r * d..(r + 1) * d];
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        self.push(out, Op::RowL2Normalize(x, eps), self.needs(x))
    }

    pub fn row_rms_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = xv.clone();
        for r in 0..n {
            let row = &mut out.data_mut()[r * d..(r + 1) * d];
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps).sqrt();
            for v in row.iter_mut() {
                *v /= rms;
            }
        }
        self.push(out, Op::RowRmsNorm(x, eps), self.needs(x))
    }

    /// Batch mean of the latent-statistics penalty `|mean(v)| + |1 - std(v)|`
    /// per row, population standard deviation.
    pub fn row_dist_loss(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut total = 0.0;
        for r in 0..n {
            let row = &xv.data()[r * d..(r + 1) * d];
            let (mu, sigma) = row_stats(row);
            total += mu.abs() + (1.0 - sigma).abs();
        }
        self.push(
            Tensor::scalar(total / n as f64),
            Op::RowDistLoss(x),
            self.needs(x),
        )
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        assert!(from < to && to <= d);
        let w = to - from;
        let mut out = Tensor::zeros(&[n, w]);
        for r in 0..n {
            out.data_mut()[r * w..(r + 1) * w]
                .copy_from_slice(&xv.data()[r * d + from..r * d + to]);
        }
        self.push(out, Op::SliceCols { x, from, to }, self.needs(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).reshaped(shape);
        self.push(v, Op::Reshape(x), self.needs(x))
    }

    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let d = xv.numel();
        let mut out = Tensor::zeros(&[n, d]);
        for r in 0..n {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(xv.data());
        }
        self.push(out, Op::BroadcastRows(x), self.needs(x))
    }

    pub fn sum_sq_kernel(&mut self, w: Var, ksq: usize) -> Var {
        let wv = self.value(w);
        let (oc, cols) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(cols % ksq, 0);
        let ic = cols / ksq;
        let mut out = Tensor::zeros(&[oc, ic]);
        for o in 0..oc {
            for i in 0..ic {
                out.data_mut()[o * ic + i] = wv.data()
                    [o * cols + i * ksq..o * cols + (i + 1) * ksq]
                    .iter()
                    .map(|v| v * v)
                    .sum();
            }
        }
        self.push(out, Op::SumSqKernel { w, ksq }, self.needs(w))
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagate from a scalar root. Gradients of leaves marked
    /// `needs_grad` are retained and readable via [`Graph::grad`].
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        self.grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.distribute(i, g);
        }
    }

    fn accum(&mut self, v: Var, delta: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.numel(), delta.numel());
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn distribute(&mut self, node: usize, g: Tensor) {
        // Ops are matched by value to end the borrow of self.nodes early.
        let (op_a, op_b, op_kind) = match &self.nodes[node].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => (*a, Some(*b), Kind::Add),
            Op::Sub(a, b) => (*a, Some(*b), Kind::Sub),
            Op::Mul(a, b) => (*a, Some(*b), Kind::Mul),
            Op::Scale(a, c) => (*a, None, Kind::Scale(*c)),
            Op::AddScalar(a) => (*a, None, Kind::PassThrough),
            Op::MatMul { a, b, trans_b } => (*a, Some(*b), Kind::MatMul { trans_b: *trans_b }),
            Op::AddBiasRows { x, b } => (*x, Some(*b), Kind::AddBiasRows),
            Op::AddBiasChannels { x, b } => (*x, Some(*b), Kind::AddBiasChannels),
            Op::Conv2d { x, w, conf } => (*x, Some(*w), Kind::Conv2d(*conf)),
            Op::Upsample2x(x) => (*x, None, Kind::Upsample2x),
            Op::BilinearResize { x, in_h, in_w } => (*x, None, Kind::Bilinear(*in_h, *in_w)),
            Op::GlobalAvgPool(x) => (*x, None, Kind::GlobalAvgPool),
            Op::LeakyRelu(x, s) => (*x, None, Kind::LeakyRelu(*s)),
            Op::Sigmoid(x) => (*x, None, Kind::Sigmoid),
            Op::Softplus(x) => (*x, None, Kind::Softplus),
            Op::Square(x) => (*x, None, Kind::Square),
            Op::Sqrt(x, e) => (*x, None, Kind::Sqrt(*e)),
            Op::Recip(x) => (*x, None, Kind::Recip),
            Op::MeanAll(x) => (*x, None, Kind::MeanAll),
            Op::SumAll(x) => (*x, None, Kind::SumAll),
            Op::ChannelScale { x, s } => (*x, Some(*s), Kind::ChannelScale),
            Op::RowL2Normalize(x, e) => (*x, None, Kind::RowL2(*e)),
            Op::RowRmsNorm(x, e) => (*x, None, Kind::RowRms(*e)),
            Op::RowDistLoss(x) => (*x, None, Kind::RowDistLoss),
            Op::SliceCols { x, from, to } => (*x, None, Kind::SliceCols(*from, *to)),
            Op::Reshape(x) => (*x, None, Kind::Reshape),
            Op::BroadcastRows(x) => (*x, None, Kind::BroadcastRows),
            Op::SumSqKernel { w, ksq } => (*w, Some(*w), Kind::SumSqKernel(*ksq)),
        };

        match op_kind {
            Kind::Add => {
                self.accum(op_a, g.clone());
                self.accum(op_b.unwrap(), g);
            }
            Kind::Sub => {
                let b = op_b.unwrap();
                self.accum(op_a, g.clone());
                let neg = Tensor::from_vec(g.shape(), g.data().iter().map(|v| -v).collect());
                self.accum(b, neg);
            }
            Kind::Mul => {
                let b = op_b.unwrap();
                let da = self.elementwise_prod(&g, self.value(b));
                let db = self.elementwise_prod(&g, self.value(op_a));
                self.accum(op_a, da);
                self.accum(b, db);
            }
            Kind::Scale(c) => {
                let da = Tensor::from_vec(g.shape(), g.data().iter().map(|v| c * v).collect());
                self.accum(op_a, da);
            }
            Kind::PassThrough => self.accum(op_a, g),
            Kind::MatMul { trans_b } => {
                let b = op_b.unwrap();
                let (da, db) = {
                    let (av, bv) = (self.value(op_a), self.value(b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                    let n = if trans_b { br } else { bc };
                    let da = if self.needs(op_a) {
                        // da = g · b (trans_b) or g · b^T
                        let mut da = Tensor::zeros(&[m, k]);
                        tensor::gemm(
                            g.data(),
                            m,
                            n,
                            false,
                            bv.data(),
                            br,
                            bc,
                            !trans_b,
                            0.0,
                            da.data_mut(),
                        );
                        Some(da)
                    } else {
                        None
                    };
                    let db = if self.needs(b) {
                        let mut db = Tensor::zeros(&[br, bc]);
                        if trans_b {
                            // y = a·b^T, db = g^T·a
                            tensor::gemm(
                                g.data(),
                                m,
                                n,
                                true,
                                av.data(),
                                m,
                                k,
                                false,
                                0.0,
                                db.data_mut(),
                            );
                        } else {
                            // db = a^T·g
                            tensor::gemm(
                                av.data(),
                                m,
                                k,
                                true,
                                g.data(),
                                m,
                                n,
                                false,
                                0.0,
                                db.data_mut(),
                            );
                        }
                        Some(db)
                    } else {
                        None
                    };
                    (da, db)
                };
                if let Some(da) = da {
                    self.accum(op_a, da);
                }
                if let Some(db) = db {
                    self.accum(b, db);
                }
            }
            Kind::AddBiasRows => {
                let b = op_b.unwrap();
                if self.needs(b) {
                    let (n, d) = (g.shape()[0], g.shape()[1]);
                    let mut db = Tensor::zeros(&[d]);
                    for r in 0..n {
                        for c in 0..d {
                            db.data_mut()[c] += g.data()[r * d + c];
                        }
                    }
                    self.accum(b, db);
                }
                self.accum(op_a, g);
            }
            Kind::AddBiasChannels => {
                let b = op_b.unwrap();
                if self.needs(b) {
                    let s = self.value(op_a).shape().to_vec();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut db = Tensor::zeros(&[c]);
                    for i in 0..n {
                        for ci in 0..c {
                            db.data_mut()[ci] += g.data()
                                [(i * c + ci) * hw..(i * c + ci + 1) * hw]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    self.accum(b, db);
                }
                self.accum(op_a, g);
            }
            Kind::Conv2d(conf) => {
                let w = op_b.unwrap();
                let want_dx = self.needs(op_a);
                let (dx, dw, _db) =
                    tensor::conv2d_backward(self.value(op_a), self.value(w), &g, &conf, want_dx);
                if let Some(dx) = dx {
                    self.accum(op_a, dx);
                }
                self.accum(w, dw);
            }
            Kind::Upsample2x => {
                let dx = tensor::upsample2x_backward(&g);
                self.accum(op_a, dx);
            }
            Kind::Bilinear(in_h, in_w) => {
                let dx = tensor::bilinear_resize_backward(&g, in_h, in_w);
                self.accum(op_a, dx);
            }
            Kind::GlobalAvgPool => {
                let s = self.value(op_a).shape().to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dx = Tensor::zeros(&s);
                for i in 0..n {
                    for ci in 0..c {
                        let gv = g.data()[i * c + ci] / hw as f64;
                        dx.data_mut()[(i * c + ci) * hw..(i * c + ci + 1) * hw].fill(gv);
                    }
                }
                self.accum(op_a, dx);
            }
            Kind::LeakyRelu(slope) => {
                let xv = self.value(op_a);
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { slope * gv })
                        .collect(),
                );
                self.accum(op_a, dx);
            }
            Kind::Sigmoid => {
                let yv = self.nodes[node].value.clone();
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(yv.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect(),
                );
                self.accum(op_a, dx);
            }
            Kind::Softplus => {
                let xv = self.value(op_a);
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, x)| gv * sigmoid(*x))
                        .collect(),
                );
                self.accum(op_a, dx);
            }
            Kind::Square => {
                let xv = self.value(op_a);
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, x)| 2.0 * gv * x)
                        .collect(),
                );
                self.accum(op_a, dx);
            }
            Kind::Sqrt(_eps) => {
                let yv = self.nodes[node].value.clone();
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(yv.data())
                        .map(|(gv, y)| 0.5 * gv / y)
                        .collect(),
                );
                self.accum(op_a, dx);
            }
            Kind::Recip => {
                let yv = self.nodes[node].value.clone();
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(yv.data())
                        .map(|(gv, y)| -gv * y * y)
                        .collect(),
                );
                self.accum(op_a, dx);
            }
            Kind::MeanAll => {
                let xv = self.value(op_a);
                let gv = g.item() / xv.numel() as f64;
                let dx = Tensor::from_vec(xv.shape(), vec![gv; xv.numel()]);
                self.accum(op_a, dx);
            }
            Kind::SumAll => {
                let xv = self.value(op_a);
                let dx = Tensor::from_vec(xv.shape(), vec![g.item(); xv.numel()]);
                self.accum(op_a, dx);
            }
            Kind::ChannelScale => {
                let s = op_b.unwrap();
                let xv = self.value(op_a).clone();
                let sv = self.value(s).clone();
                let sh = xv.shape().to_vec();
                let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
                if self.needs(op_a) {
                    let mut dx = g.clone();
                    for i in 0..n {
                        for ci in 0..c {
                            let f = sv.data()[i * c + ci];
                            for v in &mut dx.data_mut()[(i * c + ci) * hw..(i * c + ci + 1) * hw] {
                                *v *= f;
                            }
                        }
                    }
                    self.accum(op_a, dx);
                }
                if self.needs(s) {
                    let mut ds = Tensor::zeros(&[n, c]);
                    for i in 0..n {
                        for ci in 0..c {
                            let lo = (i * c + ci) * hw;
                            ds.data_mut()[i * c + ci] = g.data()[lo..lo + hw]
                                .iter()
                                .zip(&xv.data()[lo..lo + hw])
                                .map(|(gv, x)| gv * x)
                                .sum();
                        }
                    }
                    self.accum(s, ds);
                }
            }
            Kind::RowL2(eps) => {
                let xv = self.value(op_a);
                let yv = &self.nodes[node].value;
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    let x = &xv.data()[r * d..(r + 1) * d];
                    let y = &yv.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let norm = (x.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx.data_mut()[r * d + j] = (gr[j] - dot * y[j]) / norm;
                    }
                }
                self.accum(op_a, dx);
            }
            Kind::RowRms(eps) => {
                let xv = self.value(op_a);
                let yv = &self.nodes[node].value;
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    let x = &xv.data()[r * d..(r + 1) * d];
                    let y = &yv.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let rms = (x.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps).sqrt();
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx.data_mut()[r * d + j] = (gr[j] - y[j] * dot / d as f64) / rms;
                    }
                }
                self.accum(op_a, dx);
            }
            Kind::RowDistLoss => {
                let xv = self.value(op_a);
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let scale = g.item() / n as f64;
                let mut dx = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    let row = &xv.data()[r * d..(r + 1) * d];
                    let (mu, sigma) = row_stats(row);
                    let sgn_mu = signum0(mu);
                    let sgn_std = -signum0(1.0 - sigma);
                    for j in 0..d {
                        let mut gv = sgn_mu / d as f64;
                        if sigma > 1e-12 {
                            gv += sgn_std * (row[j] - mu) / (d as f64 * sigma);
                        }
                        dx.data_mut()[r * d + j] = scale * gv;
                    }
                }
                self.accum(op_a, dx);
            }
            Kind::SliceCols(from, to) => {
                let xv = self.value(op_a);
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let w = to - from;
                let mut dx = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    dx.data_mut()[r * d + from..r * d + to]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accum(op_a, dx);
            }
            Kind::Reshape => {
                let dx = g.reshaped(self.value(op_a).shape());
                self.accum(op_a, dx);
            }
            Kind::BroadcastRows => {
                let xv = self.value(op_a);
                let d = xv.numel();
                let n = g.numel() / d;
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..n {
                    for j in 0..d {
                        dx.data_mut()[j] += g.data()[r * d + j];
                    }
                }
                self.accum(op_a, dx);
            }
            Kind::SumSqKernel(ksq) => {
                let wv = self.value(op_a);
                let (oc, cols) = (wv.shape()[0], wv.shape()[1]);
                let ic = cols / ksq;
                let mut dw = Tensor::zeros(&[oc, cols]);
                for o in 0..oc {
                    for i in 0..ic {
                        let gv = g.data()[o * ic + i];
                        for m in 0..ksq {
                            let idx = o * cols + i * ksq + m;
                            dw.data_mut()[idx] = 2.0 * gv * wv.data()[idx];
                        }
                    }
                }
                self.accum(op_a, dw);
            }
        }
    }

    // ---- helpers -----------------------------------------------------------

    fn unary_elementwise(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::from_vec(xv.shape(), xv.data().iter().map(|v| f(*v)).collect())
    }

    fn binary_elementwise(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        Tensor::from_vec(
            av.shape(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| f(*x, *y))
                .collect(),
        )
    }

    fn elementwise_prod(&self, a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::from_vec(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
        )
    }
}

enum Kind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    PassThrough,
    MatMul { trans_b: bool },
    AddBiasRows,
    AddBiasChannels,
    Conv2d(ConvConf),
    Upsample2x,
    Bilinear(usize, usize),
    GlobalAvgPool,
    LeakyRelu(f64),
    Sigmoid,
    Softplus,
    Square,
    Sqrt(f64),
    Recip,
    MeanAll,
    SumAll,
    ChannelScale,
    RowL2(f64),
    RowRms(f64),
    RowDistLoss,
    SliceCols(usize, usize),
    Reshape,
    BroadcastRows,
    SumSqKernel(usize),
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean and population standard deviation of a slice.
pub fn row_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, var.max(0.0).sqrt())
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_for, Stream};

    /// Central finite differences against analytic leaf gradients.
    fn check_grad(build: impl Fn(&mut Graph, Var) -> Var, x0: Tensor, tol: f64) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let loss = build(&mut g, x);
        g.backward(loss);
        let analytic = g.grad(x).unwrap().clone();

        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let x = g.leaf(t.clone(), false);
            let loss = build(&mut g, x);
            g.value(loss).item()
        };
        let eps = 1e-5;
        for i in 0..x0.numel() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = fd.abs().max(a.abs()).max(1e-4);
            assert!(
                (fd - a).abs() / denom < tol,
                "index {i}: fd={fd} analytic={a}"
            );
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_for(seed, Stream::Eval);
        Tensor::from_vec(shape, normal_vec(&mut rng, shape.iter().product()))
    }

    #[test]
    fn grad_elementwise_chain() {
        check_grad(
            |g, x| {
                let a = g.leaky_relu(x, 0.2);
                let b = g.square(a);
                let c = g.sigmoid(b);
                let d = g.softplus(c);
                g.mean_all(d)
            },
            rand_t(&[3, 4], 1),
            1e-5,
        );
    }

    #[test]
    fn grad_matmul_both_orients() {
        let b = rand_t(&[4, 5], 2);
        let bt = rand_t(&[5, 4], 3);
        check_grad(
            |g, x| {
                let bv = g.leaf(b.clone(), false);
                let y = g.matmul(x, bv);
                g.sum_all(y)
            },
            rand_t(&[3, 4], 4),
            1e-5,
        );
        check_grad(
            |g, x| {
                let bv = g.leaf(bt.clone(), false);
                let y = g.matmul_nt(x, bv);
                let y2 = g.square(y);
                g.mean_all(y2)
            },
            rand_t(&[3, 4], 5),
            1e-5,
        );
        // gradient w.r.t. the second operand
        let a = rand_t(&[3, 4], 6);
        check_grad(
            |g, x| {
                let av = g.leaf(a.clone(), false);
                let y = g.matmul_nt(av, x);
                let y2 = g.square(y);
                g.sum_all(y2)
            },
            rand_t(&[5, 4], 7),
            1e-5,
        );
    }

    #[test]
    fn grad_conv_and_spatial_ops() {
        check_grad(
            |g, x| {
                let w = g.leaf(rand_t(&[2, 3 * 9], 8), false);
                let b = g.leaf(rand_t(&[2], 9), false);
                let up = g.upsample2x(x);
                let y = g.conv2d(up, w, 3, 2, 1);
                let y = g.add_bias_channels(y, b);
                let y = g.leaky_relu(y, 0.2);
                let p = g.global_avg_pool(y);
                let p2 = g.square(p);
                g.mean_all(p2)
            },
            rand_t(&[2, 3, 4, 4], 10),
            1e-4,
        );
        // conv weight gradient
        let x0 = rand_t(&[2, 3, 6, 6], 11);
        check_grad(
            |g, w| {
                let x = g.leaf(x0.clone(), false);
                let y = g.conv2d(x, w, 3, 1, 1);
                let y2 = g.square(y);
                g.mean_all(y2)
            },
            rand_t(&[4, 27], 12),
            1e-4,
        );
    }

    #[test]
    fn grad_bilinear_resize() {
        check_grad(
            |g, x| {
                let y = g.bilinear_resize(x, 5, 7);
                let y2 = g.square(y);
                g.sum_all(y2)
            },
            rand_t(&[1, 2, 3, 4], 13),
            1e-5,
        );
    }

    #[test]
    fn grad_row_normalizers() {
        check_grad(
            |g, x| {
                let y = g.row_l2_normalize(x, 1e-12);
                let t = g.leaf(rand_t(&[3, 5], 14), false);
                let d = g.sub(y, t);
                let d2 = g.square(d);
                g.sum_all(d2)
            },
            rand_t(&[3, 5], 15),
            1e-5,
        );
        check_grad(
            |g, x| {
                let y = g.row_rms_norm(x, 1e-8);
                let y2 = g.square(y);
                g.mean_all(y2)
            },
            rand_t(&[4, 6], 16),
            1e-5,
        );
    }

    #[test]
    fn grad_dist_loss_and_slices() {
        check_grad(
            |g, x| g.row_dist_loss(x),
            rand_t(&[3, 8], 17),
            1e-4,
        );
        check_grad(
            |g, x| {
                let s = g.slice_cols(x, 2, 5);
                let s2 = g.square(s);
                g.sum_all(s2)
            },
            rand_t(&[3, 8], 18),
            1e-5,
        );
    }

    #[test]
    fn grad_style_modulation_path() {
        // channel scale + demodulation pieces: the modulated-conv composite.
        let x0 = rand_t(&[2, 3, 4, 4], 19);
        check_grad(
            |g, s| {
                let x = g.leaf(x0.clone(), false);
                let w = g.leaf(rand_t(&[4, 27], 20), false);
                let xs = g.channel_scale(x, s);
                let y = g.conv2d(xs, w, 3, 1, 1);
                let s2 = g.square(s);
                let w2 = g.sum_sq_kernel(w, 9);
                let sig2 = g.matmul_nt(s2, w2);
                let sig = g.sqrt_eps(sig2, 1e-8);
                let dem = g.recip(sig);
                let y = g.channel_scale(y, dem);
                let y2 = g.square(y);
                g.mean_all(y2)
            },
            rand_t(&[2, 3], 21),
            1e-4,
        );
        // gradient w.r.t. the modulated weight itself
        check_grad(
            |g, w| {
                let x = g.leaf(x0.clone(), false);
                let s = g.leaf(rand_t(&[2, 3], 22), false);
                let xs = g.channel_scale(x, s);
                let y = g.conv2d(xs, w, 3, 1, 1);
                let s2 = g.square(s);
                let w2 = g.sum_sq_kernel(w, 9);
                let sig2 = g.matmul_nt(s2, w2);
                let sig = g.sqrt_eps(sig2, 1e-8);
                let dem = g.recip(sig);
                let y = g.channel_scale(y, dem);
                let y2 = g.square(y);
                g.mean_all(y2)
            },
            rand_t(&[4, 27], 23),
            1e-4,
        );
    }

    #[test]
    fn grad_broadcast_rows() {
        check_grad(
            |g, x| {
                let b = g.broadcast_rows(x, 5);
                let b2 = g.square(b);
                g.sum_all(b2)
            },
            rand_t(&[6], 24),
            1e-5,
        );
    }

    #[test]
    fn dist_loss_values() {
        let mut g = Graph::new();
        let standardized = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, -1.0]));
        let l = g.row_dist_loss(standardized);
        assert_eq!(g.value(l).item(), 0.0);

        let ones = g.constant(Tensor::from_vec(&[1, 4], vec![1.0; 4]));
        let l = g.row_dist_loss(ones);
        assert_eq!(g.value(l).item(), 2.0);
    }
}
