//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each operation appends a node holding its output tensor and whatever
//! saved state its backward pass needs, so backpropagation never reaches
//! outside the graph. Gradients flow only into nodes whose `needs_grad`
//! flag is set; constant subgraphs (teacher forward passes, detached
//! targets) are skipped entirely during the backward sweep.
//!
//! Shape conventions: feature maps are `[C, H, W]` for a single sample,
//! token matrices are `[rows, cols]`, reductions produce `[1]`.

use crate::tensor::{matmul, matmul_acc, matmul_nt, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Gelu(Var),
    LogClamped {
        x: Var,
        floor: f64,
    },
    Sum(Var),
    Mean(Var),
    SumChannels(Var),
    SoftmaxChannels(Var),
    Reshape(Var),
    Detach,
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ConcatChannels(Var, Var),
    ConcatCols(Var, Var),
    GatherFlat {
        x: Var,
        index: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul(Var, Var),
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window: usize,
        attn: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation tape. Built per forward pass and dropped after
/// the backward sweep; nodes are never mutated once pushed.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-trainable leaf: inputs, targets, precomputed masks.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, "add", |x, y| x + y);
        self.push(Op::Add(a, b), value, self.either_grad(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, "sub", |x, y| x - y);
        self.push(Op::Sub(a, b), value, self.either_grad(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, "mul", |x, y| x * y);
        self.push(Op::Mul(a, b), value, self.either_grad(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, "div", |x, y| x / y);
        self.push(Op::Div(a, b), value, self.either_grad(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(Op::Scale(x, s), value, self.needs_grad(x))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(Op::AddConst(x), value, self.needs_grad(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value, self.needs_grad(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_tanh);
        self.push(Op::Gelu(x), value, self.needs_grad(x))
    }

    /// `ln(max(x, floor))`; the floor keeps log of vanishing probabilities finite.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        assert!(floor > 0.0, "log floor must be positive");
        let value = self.value(x).map(|v| v.max(floor).ln());
        self.push(Op::LogClamped { x, floor }, value, self.needs_grad(x))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum(x), value, self.needs_grad(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        assert!(n > 0, "mean of empty tensor");
        let value = Tensor::scalar(self.value(x).data().iter().sum::<f64>() / n as f64);
        self.push(Op::Mean(x), value, self.needs_grad(x))
    }

    /// `[C, H, W] -> [C]`, summing each channel plane.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.value(x));
        let data = self.value(x).data();
        let mut out = vec![0.0; c];
        for (ci, o) in out.iter_mut().enumerate() {
            *o = data[ci * h * w..(ci + 1) * h * w].iter().sum();
        }
        self.push(
            Op::SumChannels(x),
            Tensor::new(vec![c], out),
            self.needs_grad(x),
        )
    }

    // ---- softmax ----

    /// `[C, H, W]` softmax across channels at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.value(x));
        let hw = h * w;
        let data = self.value(x).data();
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(data[ci * hw + p]);
            }
            let mut total = 0.0;
            for ci in 0..c {
                let e = (data[ci * hw + p] - max).exp();
                out[ci * hw + p] = e;
                total += e;
            }
            for ci in 0..c {
                out[ci * hw + p] /= total;
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            Op::SoftmaxChannels(x),
            Tensor::new(shape, out),
            self.needs_grad(x),
        )
    }

    // ---- structure ----

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.value(x).clone().reshape(shape);
        self.push(Op::Reshape(x), value, self.needs_grad(x))
    }

    /// Copies the value and severs gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::Detach, value, false)
    }

    /// Elementwise multiply by a precomputed mask (zeros and keep-scales).
    /// The caller draws the mask so randomness stays outside the graph.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        assert_eq!(mask.len(), self.value(x).numel(), "dropout mask length");
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(v, m)| v * m)
                .collect(),
        );
        self.push(Op::Dropout { x, mask }, value, self.needs_grad(x))
    }

    /// `[Ca, H, W] ++ [Cb, H, W] -> [Ca+Cb, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ca, ha, wa) = chw(self.value(a));
        let (cb, hb, wb) = chw(self.value(b));
        assert_eq!((ha, wa), (hb, wb), "concat_channels spatial mismatch");
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        self.push(
            Op::ConcatChannels(a, b),
            Tensor::new(vec![ca + cb, ha, wa], data),
            self.either_grad(a, b),
        )
    }

    /// `[N, Da] ++ [N, Db] -> [N, Da+Db]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (na, da) = rows_cols(self.value(a));
        let (nb, db) = rows_cols(self.value(b));
        assert_eq!(na, nb, "concat_cols row mismatch");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(na * (da + db));
        for r in 0..na {
            data.extend_from_slice(&av[r * da..(r + 1) * da]);
            data.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        self.push(
            Op::ConcatCols(a, b),
            Tensor::new(vec![na, da + db], data),
            self.either_grad(a, b),
        )
    }

    /// `out.data[i] = x.data[index[i]]`; covers patchify, window partition
    /// and their inverses with precomputed permutations.
    pub fn gather_flat(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Var {
        assert_eq!(
            index.len(),
            shape.iter().product::<usize>(),
            "gather index length must match output shape"
        );
        let src = self.value(x).data();
        let n = src.len();
        let data = index
            .iter()
            .map(|&i| {
                assert!(i < n, "gather index {i} out of range {n}");
                src[i]
            })
            .collect();
        self.push(
            Op::GatherFlat { x, index },
            Tensor::new(shape, data),
            self.needs_grad(x),
        )
    }

    // ---- convolutional ----

    /// 2D convolution, stride 1. `x [Cin, H, W]`, `w [Cout, Cin, k, k]`,
    /// `b [Cout]`, zero padding of `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let (cin, h, wd) = chw(self.value(x));
        let ws = self.value(w).shape();
        assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin, k, k]");
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ws[3], k, "conv kernel must be square");
        assert_eq!(wcin, cin, "conv channel mismatch");
        assert_eq!(self.value(b).shape(), &[cout], "conv bias shape");
        let oh = h + 2 * pad - k + 1;
        let ow = wd + 2 * pad - k + 1;
        let mut cols = vec![0.0; cin * k * k * oh * ow];
        im2col(self.value(x).data(), cin, h, wd, k, pad, &mut cols);
        let mut out = vec![0.0; cout * oh * ow];
        matmul(
            self.value(w).data(),
            &cols,
            cout,
            cin * k * k,
            oh * ow,
            &mut out,
        );
        let bias = self.value(b).data();
        for co in 0..cout {
            let bv = bias[co];
            for o in &mut out[co * oh * ow..(co + 1) * oh * ow] {
                *o += bv;
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        self.push(
            Op::Conv2d { x, w, b, pad },
            Tensor::new(vec![cout, oh, ow], out),
            ng,
        )
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first maximum in
    /// scan order, so pooling is deterministic.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.value(x));
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let data = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (ci * h + oy * 2 + dy) * w + ox * 2 + dx;
                            if data[i] > best {
                                best = data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (ci * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        self.push(
            Op::MaxPool2 { x, argmax },
            Tensor::new(vec![c, oh, ow], out),
            self.needs_grad(x),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.value(x));
        let data = self.value(x).data();
        let mut out = vec![0.0; c * 4 * h * w];
        let (oh, ow) = (h * 2, w * 2);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(ci * oh + oy) * ow + ox] = data[(ci * h + oy / 2) * w + ox / 2];
                }
            }
        }
        self.push(
            Op::Upsample2(x),
            Tensor::new(vec![c, oh, ow], out),
            self.needs_grad(x),
        )
    }

    // ---- normalization ----

    /// Group normalization over `[C, H, W]`; `gamma`/`beta` are per-channel.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (c, h, w) = chw(self.value(x));
        assert!(groups > 0 && c % groups == 0, "groups must divide channels");
        assert_eq!(self.value(gamma).shape(), &[c], "group_norm gamma shape");
        assert_eq!(self.value(beta).shape(), &[c], "group_norm beta shape");
        let cpg = c / groups;
        let gsize = cpg * h * w;
        let data = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut mean = vec![0.0; groups];
        let mut inv_std = vec![0.0; groups];
        let mut out = vec![0.0; c * h * w];
        for g in 0..groups {
            let chunk = &data[g * gsize..(g + 1) * gsize];
            let m = chunk.iter().sum::<f64>() / gsize as f64;
            let var = chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / gsize as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean[g] = m;
            inv_std[g] = is;
            for (i, v) in chunk.iter().enumerate() {
                let flat = g * gsize + i;
                let ch = flat / (h * w);
                out[flat] = gv[ch] * ((v - m) * is) + bv[ch];
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let shape = self.value(x).shape().to_vec();
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
            },
            Tensor::new(shape, out),
            ng,
        )
    }

    /// Layer normalization over the last axis of `[N, D]`; `gamma`/`beta`
    /// are per-feature.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, d) = rows_cols(self.value(x));
        assert_eq!(self.value(gamma).shape(), &[d], "layer_norm gamma shape");
        assert_eq!(self.value(beta).shape(), &[d], "layer_norm beta shape");
        let data = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut mean = vec![0.0; n];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &data[r * d..(r + 1) * d];
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean[r] = m;
            inv_std[r] = is;
            for (j, v) in row.iter().enumerate() {
                out[r * d + j] = gv[j] * ((v - m) * is) + bv[j];
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            Tensor::new(vec![n, d], out),
            ng,
        )
    }

    // ---- dense ----

    /// `x [N, Din] @ w [Dout, Din]^T + b [Dout] -> [N, Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, din) = rows_cols(self.value(x));
        let (dout, wdin) = rows_cols(self.value(w));
        assert_eq!(din, wdin, "linear input width mismatch");
        assert_eq!(self.value(b).shape(), &[dout], "linear bias shape");
        let mut out = vec![0.0; n * dout];
        matmul_nt(self.value(x).data(), self.value(w).data(), n, din, dout, &mut out);
        let bias = self.value(b).data();
        for r in 0..n {
            for j in 0..dout {
                out[r * dout + j] += bias[j];
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        self.push(Op::Linear { x, w, b }, Tensor::new(vec![n, dout], out), ng)
    }

    /// Plain `[M, K] @ [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = rows_cols(self.value(a));
        let (kb, n) = rows_cols(self.value(b));
        assert_eq!(ka, kb, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        matmul(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        self.push(
            Op::MatMul(a, b),
            Tensor::new(vec![m, n], out),
            self.either_grad(a, b),
        )
    }

    // ---- attention ----

    /// Multi-head scaled dot-product attention over non-overlapping windows.
    /// `q`, `k`, `v` are `[N, D]` with rows pre-arranged so each consecutive
    /// run of `window*window` rows is one window. Heads split `D` evenly.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, window: usize) -> Var {
        let (n, d) = rows_cols(self.value(q));
        assert_eq!(self.value(k).shape(), &[n, d], "attention k shape");
        assert_eq!(self.value(v).shape(), &[n, d], "attention v shape");
        assert!(d % heads == 0, "heads must divide embedding dim");
        let w2 = window * window;
        assert!(n % w2 == 0, "token count must be a multiple of window area");
        let groups = n / w2;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; n * d];
        let mut attn = vec![0.0; groups * heads * w2 * w2];
        let mut scores = vec![0.0; w2 * w2];
        for g in 0..groups {
            let base = g * w2;
            for hd in 0..heads {
                let c0 = hd * dh;
                for i in 0..w2 {
                    for j in 0..w2 {
                        let mut s = 0.0;
                        for t in 0..dh {
                            s += qd[(base + i) * d + c0 + t] * kd[(base + j) * d + c0 + t];
                        }
                        scores[i * w2 + j] = s * scale;
                    }
                }
                let a = &mut attn[(g * heads + hd) * w2 * w2..(g * heads + hd + 1) * w2 * w2];
                for i in 0..w2 {
                    let row = &scores[i * w2..(i + 1) * w2];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..w2 {
                        let e = (row[j] - max).exp();
                        a[i * w2 + j] = e;
                        total += e;
                    }
                    for j in 0..w2 {
                        a[i * w2 + j] /= total;
                    }
                }
                for i in 0..w2 {
                    for t in 0..dh {
                        let mut o = 0.0;
                        for j in 0..w2 {
                            o += a[i * w2 + j] * vd[(base + j) * d + c0 + t];
                        }
                        out[(base + i) * d + c0 + t] = o;
                    }
                }
            }
        }
        let ng = self.needs_grad(q) || self.needs_grad(k) || self.needs_grad(v);
        self.push(
            Op::WindowAttention {
                q,
                k,
                v,
                heads,
                window,
                attn,
            },
            Tensor::new(vec![n, d], out),
            ng,
        )
    }

    // ---- backward ----

    /// Backpropagate from a scalar loss. Intermediate gradients are freed
    /// as soon as they have been consumed; leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                if let Some(ga) = grad_buf(grads, nodes, *a) {
                    axpy(ga.data_mut(), g.data(), 1.0);
                }
                if let Some(gb) = grad_buf(grads, nodes, *b) {
                    axpy(gb.data_mut(), g.data(), 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = grad_buf(grads, nodes, *a) {
                    axpy(ga.data_mut(), g.data(), 1.0);
                }
                if let Some(gb) = grad_buf(grads, nodes, *b) {
                    axpy(gb.data_mut(), g.data(), -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = grad_buf(grads, nodes, *a) {
                    for ((d, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = grad_buf(grads, nodes, *b) {
                    for ((d, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = grad_buf(grads, nodes, *a) {
                    for ((d, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *d += gi / bi;
                    }
                }
                if let Some(gb) = grad_buf(grads, nodes, *b) {
                    for (i, d) in gb.data_mut().iter_mut().enumerate() {
                        *d -= g.data()[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    axpy(gx.data_mut(), g.data(), *s);
                }
            }
            Op::AddConst(x) => {
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    axpy(gx.data_mut(), g.data(), 1.0);
                }
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    for (i, d) in gx.data_mut().iter_mut().enumerate() {
                        if xv[i] > 0.0 {
                            *d += g.data()[i];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    for (i, d) in gx.data_mut().iter_mut().enumerate() {
                        *d += g.data()[i] * gelu_tanh_grad(xv[i]);
                    }
                }
            }
            Op::LogClamped { x, floor } => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    for (i, d) in gx.data_mut().iter_mut().enumerate() {
                        if xv[i] > *floor {
                            *d += g.data()[i] / xv[i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g.item();
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    for d in gx.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Mean(x) => {
                let gv = g.item() / nodes[x.0].value.numel() as f64;
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    for d in gx.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::SumChannels(x) => {
                let (c, h, w) = chw(&nodes[x.0].value);
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    for ci in 0..c {
                        let gv = g.data()[ci];
                        for d in &mut gx.data_mut()[ci * h * w..(ci + 1) * h * w] {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SoftmaxChannels(x) => {
                let y = nodes[id].value.data();
                let (c, h, w) = chw(&nodes[x.0].value);
                let hw = h * w;
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    let gx = gx.data_mut();
                    for p in 0..hw {
                        let mut dot = 0.0;
                        for ci in 0..c {
                            dot += g.data()[ci * hw + p] * y[ci * hw + p];
                        }
                        for ci in 0..c {
                            let i = ci * hw + p;
                            gx[i] += y[i] * (g.data()[i] - dot);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    axpy(gx.data_mut(), g.data(), 1.0);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    for ((d, gi), m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let na = nodes[a.0].value.numel();
                if let Some(ga) = grad_buf(grads, nodes, *a) {
                    axpy(ga.data_mut(), &g.data()[..na], 1.0);
                }
                if let Some(gb) = grad_buf(grads, nodes, *b) {
                    axpy(gb.data_mut(), &g.data()[na..], 1.0);
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, da) = rows_cols(&nodes[a.0].value);
                let (_, db) = rows_cols(&nodes[b.0].value);
                let dt = da + db;
                if let Some(ga) = grad_buf(grads, nodes, *a) {
                    let ga = ga.data_mut();
                    for r in 0..n {
                        axpy(&mut ga[r * da..(r + 1) * da], &g.data()[r * dt..r * dt + da], 1.0);
                    }
                }
                if let Some(gb) = grad_buf(grads, nodes, *b) {
                    let gb = gb.data_mut();
                    for r in 0..n {
                        axpy(
                            &mut gb[r * db..(r + 1) * db],
                            &g.data()[r * dt + da..(r + 1) * dt],
                            1.0,
                        );
                    }
                }
            }
            Op::GatherFlat { x, index } => {
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    let gx = gx.data_mut();
                    for (i, &src) in index.iter().enumerate() {
                        gx[src] += g.data()[i];
                    }
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let (cin, h, wd) = chw(&nodes[x.0].value);
                let ws = nodes[w.0].value.shape();
                let (cout, k) = (ws[0], ws[2]);
                let oh = h + 2 * pad - k + 1;
                let ow = wd + 2 * pad - k + 1;
                let ck = cin * k * k;
                if let Some(gb) = grad_buf(grads, nodes, *b) {
                    let gb = gb.data_mut();
                    for co in 0..cout {
                        gb[co] += g.data()[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
                    }
                }
                if nodes[w.0].needs_grad {
                    // Recompute the column matrix rather than saving it; the
                    // memory for every conv's columns dwarfs the rebuild cost.
                    let mut cols = vec![0.0; ck * oh * ow];
                    im2col(nodes[x.0].value.data(), cin, h, wd, k, *pad, &mut cols);
                    let gw = grad_buf(grads, nodes, *w).expect("conv weight grad buffer");
                    matmul_nt_acc(g.data(), &cols, cout, oh * ow, ck, gw.data_mut());
                }
                if nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0; ck * oh * ow];
                    matmul_tn_acc(
                        nodes[w.0].value.data(),
                        g.data(),
                        ck,
                        cout,
                        oh * ow,
                        &mut dcols,
                    );
                    let gx = grad_buf(grads, nodes, *x).expect("conv input grad buffer");
                    col2im_acc(&dcols, cin, h, wd, k, *pad, gx.data_mut());
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    let gx = gx.data_mut();
                    for (o, &i) in argmax.iter().enumerate() {
                        gx[i] += g.data()[o];
                    }
                }
            }
            Op::Upsample2(x) => {
                let (c, h, w) = chw(&nodes[x.0].value);
                let (oh, ow) = (h * 2, w * 2);
                if let Some(gx) = grad_buf(grads, nodes, *x) {
                    let gx = gx.data_mut();
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                gx[(ci * h + oy / 2) * w + ox / 2] +=
                                    g.data()[(ci * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
            } => {
                let (c, h, w) = chw(&nodes[x.0].value);
                let cpg = c / groups;
                let gsize = cpg * h * w;
                let xv = nodes[x.0].value.data();
                let gv = nodes[gamma.0].value.data();
                if nodes[gamma.0].needs_grad || nodes[beta.0].needs_grad {
                    for gi in 0..*groups {
                        let (m, is) = (mean[gi], inv_std[gi]);
                        for ci in gi * cpg..(gi + 1) * cpg {
                            let mut dg = 0.0;
                            let mut db = 0.0;
                            for p in 0..h * w {
                                let i = ci * h * w + p;
                                dg += g.data()[i] * (xv[i] - m) * is;
                                db += g.data()[i];
                            }
                            if let Some(ggamma) = grad_buf(grads, nodes, *gamma) {
                                ggamma.data_mut()[ci] += dg;
                            }
                            if let Some(gbeta) = grad_buf(grads, nodes, *beta) {
                                gbeta.data_mut()[ci] += db;
                            }
                        }
                    }
                }
                if nodes[x.0].needs_grad {
                    let gx = grad_buf(grads, nodes, *x).expect("group_norm input grad buffer");
                    let gx = gx.data_mut();
                    for gi in 0..*groups {
                        let (m, is) = (mean[gi], inv_std[gi]);
                        let mut sum_gh = 0.0;
                        let mut sum_ghx = 0.0;
                        for i in gi * gsize..(gi + 1) * gsize {
                            let ch = i / (h * w);
                            let gh = g.data()[i] * gv[ch];
                            let xh = (xv[i] - m) * is;
                            sum_gh += gh;
                            sum_ghx += gh * xh;
                        }
                        let m1 = sum_gh / gsize as f64;
                        let m2 = sum_ghx / gsize as f64;
                        for i in gi * gsize..(gi + 1) * gsize {
                            let ch = i / (h * w);
                            let gh = g.data()[i] * gv[ch];
                            let xh = (xv[i] - m) * is;
                            gx[i] += is * (gh - m1 - xh * m2);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, d) = rows_cols(&nodes[x.0].value);
                let xv = nodes[x.0].value.data();
                let gv = nodes[gamma.0].value.data();
                if nodes[gamma.0].needs_grad || nodes[beta.0].needs_grad {
                    for j in 0..d {
                        let mut dg = 0.0;
                        let mut db = 0.0;
                        for r in 0..n {
                            let i = r * d + j;
                            dg += g.data()[i] * (xv[i] - mean[r]) * inv_std[r];
                            db += g.data()[i];
                        }
                        if let Some(ggamma) = grad_buf(grads, nodes, *gamma) {
                            ggamma.data_mut()[j] += dg;
                        }
                        if let Some(gbeta) = grad_buf(grads, nodes, *beta) {
                            gbeta.data_mut()[j] += db;
                        }
                    }
                }
                if nodes[x.0].needs_grad {
                    let gx = grad_buf(grads, nodes, *x).expect("layer_norm input grad buffer");
                    let gx = gx.data_mut();
                    for r in 0..n {
                        let (m, is) = (mean[r], inv_std[r]);
                        let mut sum_gh = 0.0;
                        let mut sum_ghx = 0.0;
                        for j in 0..d {
                            let i = r * d + j;
                            let gh = g.data()[i] * gv[j];
                            let xh = (xv[i] - m) * is;
                            sum_gh += gh;
                            sum_ghx += gh * xh;
                        }
                        let m1 = sum_gh / d as f64;
                        let m2 = sum_ghx / d as f64;
                        for j in 0..d {
                            let i = r * d + j;
                            let gh = g.data()[i] * gv[j];
                            let xh = (xv[i] - m) * is;
                            gx[i] += is * (gh - m1 - xh * m2);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = rows_cols(&nodes[x.0].value);
                let (dout, _) = rows_cols(&nodes[w.0].value);
                if let Some(gb) = grad_buf(grads, nodes, *b) {
                    let gb = gb.data_mut();
                    for r in 0..n {
                        for j in 0..dout {
                            gb[j] += g.data()[r * dout + j];
                        }
                    }
                }
                if nodes[w.0].needs_grad {
                    let gw = grad_buf(grads, nodes, *w).expect("linear weight grad buffer");
                    matmul_tn_acc(
                        g.data(),
                        nodes[x.0].value.data(),
                        dout,
                        n,
                        din,
                        gw.data_mut(),
                    );
                }
                if nodes[x.0].needs_grad {
                    let gx = grad_buf(grads, nodes, *x).expect("linear input grad buffer");
                    matmul_acc(
                        g.data(),
                        nodes[w.0].value.data(),
                        n,
                        dout,
                        din,
                        gx.data_mut(),
                    );
                }
            }
            Op::MatMul(a, b) => {
                let (m, ka) = rows_cols(&nodes[a.0].value);
                let (_, n) = rows_cols(&nodes[b.0].value);
                if nodes[a.0].needs_grad {
                    let ga = grad_buf(grads, nodes, *a).expect("matmul lhs grad buffer");
                    matmul_nt_acc(g.data(), nodes[b.0].value.data(), m, n, ka, ga.data_mut());
                }
                if nodes[b.0].needs_grad {
                    let gb = grad_buf(grads, nodes, *b).expect("matmul rhs grad buffer");
                    matmul_tn_acc(nodes[a.0].value.data(), g.data(), ka, m, n, gb.data_mut());
                }
            }
            Op::WindowAttention {
                q,
                k,
                v,
                heads,
                window,
                attn,
            } => {
                let (n, d) = rows_cols(&nodes[q.0].value);
                let w2 = window * window;
                let groups = n / w2;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qd = nodes[q.0].value.data();
                let kd = nodes[k.0].value.data();
                let vd = nodes[v.0].value.data();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut da = vec![0.0; w2 * w2];
                let mut ds = vec![0.0; w2 * w2];
                for gi in 0..groups {
                    let base = gi * w2;
                    for hd in 0..*heads {
                        let c0 = hd * dh;
                        let a = &attn[(gi * heads + hd) * w2 * w2..(gi * heads + hd + 1) * w2 * w2];
                        for i in 0..w2 {
                            for j in 0..w2 {
                                let mut s = 0.0;
                                for t in 0..dh {
                                    s += g.data()[(base + i) * d + c0 + t]
                                        * vd[(base + j) * d + c0 + t];
                                }
                                da[i * w2 + j] = s;
                            }
                        }
                        for j in 0..w2 {
                            for t in 0..dh {
                                let mut s = 0.0;
                                for i in 0..w2 {
                                    s += a[i * w2 + j] * g.data()[(base + i) * d + c0 + t];
                                }
                                dv[(base + j) * d + c0 + t] += s;
                            }
                        }
                        for i in 0..w2 {
                            let mut dot = 0.0;
                            for j in 0..w2 {
                                dot += da[i * w2 + j] * a[i * w2 + j];
                            }
                            for j in 0..w2 {
                                ds[i * w2 + j] = a[i * w2 + j] * (da[i * w2 + j] - dot);
                            }
                        }
                        for i in 0..w2 {
                            for t in 0..dh {
                                let mut s = 0.0;
                                for j in 0..w2 {
                                    s += ds[i * w2 + j] * kd[(base + j) * d + c0 + t];
                                }
                                dq[(base + i) * d + c0 + t] += s * scale;
                            }
                        }
                        for j in 0..w2 {
                            for t in 0..dh {
                                let mut s = 0.0;
                                for i in 0..w2 {
                                    s += ds[i * w2 + j] * qd[(base + i) * d + c0 + t];
                                }
                                dk[(base + j) * d + c0 + t] += s * scale;
                            }
                        }
                    }
                }
                if let Some(gq) = grad_buf(grads, nodes, *q) {
                    axpy(gq.data_mut(), &dq, 1.0);
                }
                if let Some(gk) = grad_buf(grads, nodes, *k) {
                    axpy(gk.data_mut(), &dk, 1.0);
                }
                if let Some(gv) = grad_buf(grads, nodes, *v) {
                    axpy(gv.data_mut(), &dv, 1.0);
                }
            }
        }
    }

    fn zip(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "{what} shape mismatch");
        Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    fn either_grad(&self, a: Var, b: Var) -> bool {
        self.needs_grad(a) || self.needs_grad(b)
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> Option<&'a mut Tensor> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape().to_vec())))
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected [C, H, W], got {s:?}");
    (s[0], s[1], s[2])
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected 2D tensor, got {s:?}");
    (s[0], s[1])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Unfold `x [Cin, H, W]` into columns `[Cin*k*k, OH*OW]` for stride-1
/// convolution with zero padding.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, pad: usize, out: &mut [f64]) {
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    debug_assert_eq!(out.len(), cin * k * k * oh * ow);
    let mut r = 0;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut out[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

/// Scatter-add of column gradients back onto the input image.
fn col2im_acc(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, pad: usize, out: &mut [f64]) {
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    debug_assert_eq!(out.len(), cin * h * w);
    let mut r = 0;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[(ci * h + iy as usize) * w + ix as usize] += row[oy * ow + ox];
                    }
                }
                r += 1;
            }
        }
    }
}

#[cfg(test)]
pub(crate) fn gradcheck(params: &[Tensor], tol: f64, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    gradcheck_with_step(params, tol, 1e-4, build);
}

/// Central-difference gradient check with an explicit step. Deep composed
/// graphs want a smaller step than single ops: a relu or max-pool kink
/// inside the +/-h window corrupts the numeric estimate by up to the slope
/// change across the kink.
#[cfg(test)]
pub(crate) fn gradcheck_with_step(
    params: &[Tensor],
    tol: f64,
    h: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) {
    let eval = |ps: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .unwrap_or_else(|| panic!("param {pi} received no gradient"));
        for i in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[i] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let got = analytic.data()[i];
            let err = (got - numeric).abs();
            assert!(
                err <= tol * (1.0 + numeric.abs()),
                "param {pi} entry {i}: analytic {got} vs numeric {numeric} (err {err:.3e})"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Deterministic pseudo-random values in [-1, 1], kept away from zero so
    /// kinked ops (relu, max pool) see no ties at the probe points.
    fn tvec(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
                let mut z = s;
                z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
                z ^= z >> 31;
                let u = (z >> 11) as f64 / (1u64 << 53) as f64;
                let v = u * 2.0 - 1.0;
                if v.abs() < 0.05 {
                    v + 0.1
                } else {
                    v
                }
            })
            .collect()
    }

    fn t(seed: u64, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, tvec(seed, n))
    }

    #[test]
    fn softmax_channels_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![3, 2, 2], 1.7));
        let y = g.softmax_channels(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_channels_known_two_class() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]));
        let y = g.softmax_channels(x);
        let e = 1.0_f64.exp();
        assert!((g.value(y).data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn conv2d_known_value() {
        // 1x1 input channel, 3x3 image, 3x3 kernel of ones, pad 1:
        // centre output is the sum of all nine inputs.
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(
            vec![1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        ));
        let w = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::new(vec![1], vec![0.5]));
        let y = g.conv2d(x, w, b, 1);
        assert_eq!(g.value(y).shape(), &[1, 3, 3]);
        assert!((g.value(y).data()[4] - 45.5).abs() < 1e-12);
        // Top-left output sees only the 2x2 in-bounds corner.
        assert!((g.value(y).data()[0] - (1.0 + 2.0 + 4.0 + 5.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn max_pool_and_upsample_known() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(
            vec![1, 2, 2],
            vec![1.0, 4.0, 3.0, 2.0],
        ));
        let p = g.max_pool2(x);
        assert_eq!(g.value(p).data(), &[4.0]);
        let u = g.upsample2(x);
        assert_eq!(g.value(u).shape(), &[1, 4, 4]);
        assert_eq!(g.value(u).data()[0], 1.0);
        assert_eq!(g.value(u).data()[1], 1.0);
        assert_eq!(g.value(u).data()[2], 4.0);
        assert_eq!(g.value(u).data()[5], 1.0);
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let mut g = Graph::new();
        let x = g.constant(t(7, vec![4, 3, 3]));
        let gamma = g.constant(Tensor::full(vec![4], 1.0));
        let beta = g.constant(Tensor::zeros(vec![4]));
        let y = g.group_norm(x, gamma, beta, 2, 1e-5);
        let d = g.value(y).data();
        for grp in 0..2 {
            let chunk = &d[grp * 18..(grp + 1) * 18];
            let m: f64 = chunk.iter().sum::<f64>() / 18.0;
            let v: f64 = chunk.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn window_attention_uniform_when_queries_vanish() {
        // Zero queries give uniform attention, so each output row is the
        // per-head column mean of v over its window.
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(vec![4, 4]));
        let k = g.constant(t(3, vec![4, 4]));
        let v = g.constant(t(4, vec![4, 4]));
        let y = g.window_attention(q, k, v, 2, 2);
        let vd = g.value(v).data();
        for col in 0..4 {
            let mean: f64 = (0..4).map(|r| vd[r * 4 + col]).sum::<f64>() / 4.0;
            for row in 0..4 {
                assert!((g.value(y).data()[row * 4 + col] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gather_flat_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()));
        let perm = vec![5, 4, 3, 2, 1, 0];
        let y = g.gather_flat(x, perm.clone(), vec![6]);
        let mut inv = vec![0; 6];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let z = g.gather_flat(y, inv, vec![2, 3]);
        assert_eq!(g.value(z).data(), g.value(x).data());
    }

    #[test]
    fn detach_blocks_gradient() {
        // loss = mean(x * detach(x)): gradient must be x, not 2x.
        let mut g = Graph::new();
        let x = g.param(t(11, vec![5]));
        let d = g.detach(x);
        let prod = g.mul(x, d);
        let loss = g.mean(prod);
        let grads = g.backward(loss);
        let gx = grads.get(x).unwrap();
        for (gv, xv) in gx.data().iter().zip(g.value(x).data()) {
            assert!((gv - xv / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_only_loss_produces_no_gradients() {
        let mut g = Graph::new();
        let x = g.constant(t(13, vec![4]));
        let loss = g.mean(x);
        let grads = g.backward(loss);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn grad_elementwise_chain() {
        gradcheck(&[t(1, vec![6]), t(2, vec![6])], 1e-6, |g, vs| {
            let a = g.add(vs[0], vs[1]);
            let m = g.mul(a, vs[0]);
            let d = g.div(m, vs[1]);
            let s = g.scale(d, 0.7);
            let c = g.add_const(s, 0.3);
            let sb = g.sub(c, vs[1]);
            g.mean(sb)
        });
    }

    #[test]
    fn grad_relu_gelu_log() {
        gradcheck(&[t(3, vec![8])], 1e-6, |g, vs| {
            let r = g.relu(vs[0]);
            let q = g.gelu(vs[0]);
            let sum = g.add(r, q);
            g.mean(sum)
        });
        let pos = Tensor::new(vec![5], vec![0.3, 0.9, 0.2, 0.55, 0.71]);
        gradcheck(&[pos], 1e-6, |g, vs| {
            let l = g.log_clamped(vs[0], 1e-12);
            g.mean(l)
        });
    }

    #[test]
    fn grad_softmax_cross_entropy_shape() {
        gradcheck(&[t(5, vec![3, 2, 2])], 1e-6, |g, vs| {
            let p = g.softmax_channels(vs[0]);
            let lp = g.log_clamped(p, 1e-12);
            // Weight the log-probabilities by a fixed mask, as a hard-label
            // cross entropy would.
            let mask = g.constant(Tensor::new(
                vec![3, 2, 2],
                vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            ));
            let picked = g.mul(lp, mask);
            let s = g.sum(picked);
            g.scale(s, -0.25)
        });
    }

    #[test]
    fn grad_reductions() {
        gradcheck(&[t(6, vec![2, 2, 2])], 1e-6, |g, vs| {
            let sc = g.sum_channels(vs[0]);
            let m = g.mean(sc);
            let s = g.sum(vs[0]);
            let both = g.add(m, s);
            g.scale(both, 0.5)
        });
    }

    #[test]
    fn grad_conv2d_pad0_and_pad1() {
        for pad in [0, 1] {
            gradcheck(
                &[t(7, vec![2, 4, 4]), t(8, vec![3, 2, 3, 3]), t(9, vec![3])],
                1e-5,
                move |g, vs| {
                    let y = g.conv2d(vs[0], vs[1], vs[2], pad);
                    let sq = g.mul(y, y);
                    g.mean(sq)
                },
            );
        }
    }

    #[test]
    fn grad_pool_upsample_concat() {
        gradcheck(&[t(10, vec![2, 4, 4]), t(11, vec![1, 4, 4])], 1e-6, |g, vs| {
            let p = g.max_pool2(vs[0]);
            let u = g.upsample2(p);
            let c = g.concat_channels(u, vs[1]);
            let sq = g.mul(c, c);
            g.mean(sq)
        });
    }

    #[test]
    fn grad_concat_cols_and_gather() {
        gradcheck(&[t(12, vec![3, 2]), t(13, vec![3, 2])], 1e-6, |g, vs| {
            let c = g.concat_cols(vs[0], vs[1]);
            let perm: Vec<usize> = (0..12).rev().collect();
            let sh = g.gather_flat(c, perm, vec![3, 4]);
            let sq = g.mul(sh, sh);
            g.mean(sq)
        });
    }

    #[test]
    fn grad_group_norm() {
        gradcheck(
            &[t(14, vec![4, 3, 3]), t(15, vec![4]), t(16, vec![4])],
            1e-5,
            |g, vs| {
                let y = g.group_norm(vs[0], vs[1], vs[2], 2, 1e-5);
                let sq = g.mul(y, y);
                g.mean(sq)
            },
        );
    }

    #[test]
    fn grad_layer_norm() {
        gradcheck(
            &[t(17, vec![3, 4]), t(18, vec![4]), t(19, vec![4])],
            1e-5,
            |g, vs| {
                let y = g.layer_norm(vs[0], vs[1], vs[2], 1e-5);
                let sq = g.mul(y, y);
                g.mean(sq)
            },
        );
    }

    #[test]
    fn grad_linear_and_matmul() {
        gradcheck(
            &[t(20, vec![3, 4]), t(21, vec![2, 4]), t(22, vec![2]), t(23, vec![4, 3])],
            1e-6,
            |g, vs| {
                let y = g.linear(vs[0], vs[1], vs[2]);
                let z = g.matmul(vs[3], vs[0]);
                let zsum = g.mean(z);
                let ysum = g.mean(y);
                g.add(ysum, zsum)
            },
        );
    }

    #[test]
    fn grad_window_attention() {
        gradcheck(
            &[t(24, vec![8, 4]), t(25, vec![8, 4]), t(26, vec![8, 4])],
            1e-5,
            |g, vs| {
                let y = g.window_attention(vs[0], vs[1], vs[2], 2, 2);
                let sq = g.mul(y, y);
                g.mean(sq)
            },
        );
    }

    #[test]
    fn grad_dropout_fixed_mask() {
        let mask = vec![0.0, 2.0, 2.0, 0.0, 2.0, 2.0];
        gradcheck(&[t(27, vec![6])], 1e-6, move |g, vs| {
            let d = g.dropout(vs[0], mask.clone());
            let sq = g.mul(d, d);
            g.mean(sq)
        });
    }

    #[test]
    fn grad_reshape_roundtrip() {
        gradcheck(&[t(28, vec![2, 3])], 1e-6, |g, vs| {
            let r = g.reshape(vs[0], vec![3, 2]);
            let sq = g.mul(r, r);
            g.mean(sq)
        });
    }

    #[test]
    fn grad_shared_input_used_twice() {
        // The same var feeding two consumers must receive both contributions.
        gradcheck(&[t(29, vec![4])], 1e-6, |g, vs| {
            let a = g.scale(vs[0], 2.0);
            let b = g.mul(vs[0], vs[0]);
            let s = g.add(a, b);
            g.sum(s)
        });
    }
}
