//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass;
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every parameter that took part. Nodes that depend only on inputs skip
//! gradient work entirely.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, f64),
    GlobalAvgPool(Var),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    ResizeNearest(Var),
    L2Normalize {
        x: Var,
        eps: f64,
    },
    PairProduct {
        v: Var,
        cands: Tensor,
    },
    BatchedDot {
        v: Var,
        cands: Tensor,
    },
    RclLoss {
        scores: Var,
        per_anchor: usize,
    },
    SoftmaxCeFirst(Var),
    Perceptual {
        image: Var,
        patches: Var,
        per_image: usize,
    },
    PixelCe {
        logits: Var,
        targets: Vec<u8>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        invstd: Vec<f64>,
        normalized: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchNormUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    bn_updates: Vec<BatchNormUpdate>,
}

/// Gradients indexed by [`ParamId`]; `None` for parameters not reached.
pub struct Gradients {
    pub params: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, training: bool) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Graph leaf for a stored parameter; repeated calls share one node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store;
        let v = self.push(store.get(id).clone(), Op::Param(id), store.is_trainable(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn take_bn_updates(&mut self) -> Vec<BatchNormUpdate> {
        core::mem::take(&mut self.bn_updates)
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(wv).to_vec());
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let p = ho * wo;
        let ckk = c * k * k;
        let cols = im2col(self.value(x).data(), n, c, h, wd, k, stride, pad, ho, wo);
        let mut out_t = vec![0.0; o * n * p];
        gemm(
            o,
            ckk,
            n * p,
            self.value(wv).data(),
            false,
            &cols,
            false,
            &mut out_t,
            0.0,
        );
        let mut out = vec![0.0; n * o * p];
        let bias = bv.map(|b| self.value(b).data().to_vec());
        for oc in 0..o {
            let bias_v = bias.as_ref().map_or(0.0, |b| b[oc]);
            for ni in 0..n {
                let src = &out_t[oc * n * p + ni * p..oc * n * p + (ni + 1) * p];
                let dst = &mut out[(ni * o + oc) * p..(ni * o + oc + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias_v;
                }
            }
        }
        let needs = self.ng(x) || self.ng(wv) || bv.is_some_and(|b| self.ng(b));
        let value = Tensor::new(vec![n, o, ho, wo], out).expect("conv shape");
        let cols = if needs { cols } else { Vec::new() };
        self.push(
            value,
            Op::Conv2d {
                x,
                w: wv,
                b: bv,
                stride,
                pad,
                cols,
            },
            needs,
        )
    }

    /// `x: [N, In]`, `w: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(wv).to_vec());
        assert_eq!(xs.len(), 2, "linear input must be [N, In]");
        assert_eq!(xs[1], ws[1], "linear width mismatch: {xs:?} vs {ws:?}");
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * o];
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(wv).data(),
            true,
            &mut out,
            0.0,
        );
        if let Some(b) = bv {
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        let needs = self.ng(x) || self.ng(wv) || bv.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new(vec![n, o], out).expect("linear shape"),
            Op::Linear { x, w: wv, b: bv },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        let needs = self.ng(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        let needs = self.ng(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let value =
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect()).unwrap();
        let needs = self.ng(x);
        self.push(value, Op::Scale(x, s), needs)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let needs = self.ng(x);
        self.push(
            Tensor::new(vec![n, c], data).unwrap(),
            Op::GlobalAvgPool(x),
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape);
        let needs = self.ng(x);
        self.push(value, Op::Reshape(x), needs)
    }

    /// Concatenates `[N, C_i, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let first = self.shape(xs[0]).to_vec();
        let (n, h, w) = (first[0], first[2], first[3]);
        let total_c: usize = xs.iter().map(|&x| self.shape(x)[1]).sum();
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for ni in 0..n {
            for &x in xs {
                let s = self.shape(x);
                assert!(s[0] == n && s[2] == h && s[3] == w, "concat shape mismatch");
                let block = s[1] * h * w;
                out.extend_from_slice(&self.value(x).data()[ni * block..(ni + 1) * block]);
            }
        }
        let needs = xs.iter().any(|&x| self.ng(x));
        self.push(
            Tensor::new(vec![n, total_c, h, w], out).unwrap(),
            Op::ConcatChannels(xs.to_vec()),
            needs,
        )
    }

    /// Nearest-neighbour resize of the spatial dims to `(h, w)`.
    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (nc, sh, sw) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(nc * h * w);
        for plane in 0..nc {
            for y in 0..h {
                let sy = y * sh / h;
                for xx in 0..w {
                    out.push(src[(plane * sh + sy) * sw + xx * sw / w]);
                }
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::new(vec![s[0], s[1], h, w], out).unwrap(),
            Op::ResizeNearest(x),
            needs,
        )
    }

    /// Row-wise `x / (||x|| + eps)` for `[N, D]`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let d = s[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()) + eps;
            for v in row {
                *v /= norm;
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::new(s, out).unwrap(),
            Op::L2Normalize { x, eps },
            needs,
        )
    }

    /// `v: [B, D]`, constant `cands: [B, M, D]` -> `[B * M, D]` of
    /// element-wise products `v[b] * cands[b, m]`.
    pub fn pair_product(&mut self, v: Var, cands: Tensor) -> Var {
        let (b, d) = (self.shape(v)[0], self.shape(v)[1]);
        let cs = cands.shape().to_vec();
        assert!(
            cs.len() == 3 && cs[0] == b && cs[2] == d,
            "pair_product shape mismatch"
        );
        let m = cs[1];
        let vd = self.value(v).data();
        let mut out = Vec::with_capacity(b * m * d);
        for bi in 0..b {
            let row = &vd[bi * d..(bi + 1) * d];
            for mi in 0..m {
                let c = &cands.data()[(bi * m + mi) * d..(bi * m + mi + 1) * d];
                out.extend(row.iter().zip(c).map(|(x, y)| x * y));
            }
        }
        let needs = self.ng(v);
        self.push(
            Tensor::new(vec![b * m, d], out).unwrap(),
            Op::PairProduct { v, cands },
            needs,
        )
    }

    /// `v: [B, D]`, constant `cands: [B, M, D]` -> `[B, M]` dot products.
    pub fn batched_dot(&mut self, v: Var, cands: Tensor) -> Var {
        let (b, d) = (self.shape(v)[0], self.shape(v)[1]);
        let cs = cands.shape().to_vec();
        assert!(
            cs.len() == 3 && cs[0] == b && cs[2] == d,
            "batched_dot shape mismatch"
        );
        let m = cs[1];
        let vd = self.value(v).data();
        let mut out = Vec::with_capacity(b * m);
        for bi in 0..b {
            let row = &vd[bi * d..(bi + 1) * d];
            for mi in 0..m {
                let c = &cands.data()[(bi * m + mi) * d..(bi * m + mi + 1) * d];
                out.push(row.iter().zip(c).map(|(x, y)| x * y).sum());
            }
        }
        let needs = self.ng(v);
        self.push(
            Tensor::new(vec![b, m], out).unwrap(),
            Op::BatchedDot { v, cands },
            needs,
        )
    }

    /// Relation contrastive loss over scores laid out as `per_anchor`
    /// consecutive entries per anchor: one positive, then the negatives.
    pub fn rcl_loss(&mut self, scores: Var, per_anchor: usize) -> Var {
        assert!(per_anchor >= 2, "need a positive and at least one negative");
        let s = self.value(scores).data();
        assert_eq!(s.len() % per_anchor, 0);
        let value = rcl_from_rows(s, per_anchor);
        let needs = self.ng(scores);
        self.push(
            Tensor::scalar(value),
            Op::RclLoss { scores, per_anchor },
            needs,
        )
    }

    /// Mean over rows of `-log softmax(row)[0]`.
    pub fn softmax_ce_first(&mut self, logits: Var) -> Var {
        let s = self.shape(logits).to_vec();
        let (b, m) = (s[0], s[1]);
        let total: f64 = self
            .value(logits)
            .data()
            .chunks(m)
            .map(|row| logsumexp(row) - row[0])
            .sum();
        let needs = self.ng(logits);
        self.push(
            Tensor::scalar(total / b as f64),
            Op::SoftmaxCeFirst(logits),
            needs,
        )
    }

    /// `image: [B, D]`, `patches: [B * per_image, D]`; mean squared
    /// difference averaged over every patch feature in the batch.
    pub fn perceptual(&mut self, image: Var, patches: Var, per_image: usize) -> Var {
        let (b, d) = (self.shape(image)[0], self.shape(image)[1]);
        assert_eq!(
            self.shape(patches),
            &[b * per_image, d],
            "perceptual shape mismatch"
        );
        let (iv, pv) = (self.value(image).data(), self.value(patches).data());
        let mut total = 0.0;
        for bi in 0..b {
            let img = &iv[bi * d..(bi + 1) * d];
            for j in 0..per_image {
                let p = &pv[(bi * per_image + j) * d..(bi * per_image + j + 1) * d];
                total += img
                    .iter()
                    .zip(p)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
        }
        let value = total / (b * per_image * d) as f64;
        let needs = self.ng(image) || self.ng(patches);
        self.push(
            Tensor::scalar(value),
            Op::Perceptual {
                image,
                patches,
                per_image,
            },
            needs,
        )
    }

    /// Pixel-wise cross-entropy, `logits: [N, C, H, W]`, targets `[N * H * W]`.
    pub fn pixel_cross_entropy(&mut self, logits: Var, targets: Vec<u8>) -> Var {
        let s = self.shape(logits).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        assert_eq!(targets.len(), n * hw);
        let l = self.value(logits).data();
        let mut total = 0.0;
        let mut row = vec![0.0; c];
        for ni in 0..n {
            for p in 0..hw {
                for ci in 0..c {
                    row[ci] = l[(ni * c + ci) * hw + p];
                }
                total += logsumexp(&row) - row[targets[ni * hw + p] as usize];
            }
        }
        let needs = self.ng(logits);
        self.push(
            Tensor::scalar(total / (n * hw) as f64),
            Op::PixelCe { logits, targets },
            needs,
        )
    }

    /// Batch norm over `[N, C, H, W]`. In training graphs batch statistics
    /// are used and a running-stat update is queued; otherwise the stored
    /// running statistics are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
    ) -> Var {
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = self.value(x).data().to_vec();
        let count = (n * hw) as f64;
        let (mean, var) = if self.training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    mean[ci] += xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                        .iter()
                        .sum::<f64>();
                }
            }
            for m in &mut mean {
                *m /= count;
            }
            for ni in 0..n {
                for ci in 0..c {
                    var[ci] += xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                        .iter()
                        .map(|v| (v - mean[ci]) * (v - mean[ci]))
                        .sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= count;
            }
            let unbiased = var
                .iter()
                .map(|v| {
                    if count > 1.0 {
                        v * count / (count - 1.0)
                    } else {
                        *v
                    }
                })
                .collect();
            self.bn_updates.push(BatchNormUpdate {
                running_mean,
                running_var,
                batch_mean: mean.clone(),
                batch_var_unbiased: unbiased,
            });
            (mean, var)
        } else {
            (
                self.store.get(running_mean).data().to_vec(),
                self.store.get(running_var).data().to_vec(),
            )
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let (g, b) = (
            self.value(gv).data().to_vec(),
            self.value(bv).data().to_vec(),
        );
        let mut normalized = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    let xh = (xd[base + p] - mean[ci]) * invstd[ci];
                    normalized[base + p] = xh;
                    out[base + p] = g[ci] * xh + b[ci];
                }
            }
        }
        let needs = self.ng(x) || self.ng(gv) || self.ng(bv);
        let batch_stats = self.training;
        self.push(
            Tensor::new(s, out).unwrap(),
            Op::BatchNorm {
                x,
                gamma: gv,
                beta: bv,
                invstd,
                normalized,
                batch_stats,
            },
            needs,
        )
    }

    /// Max pooling with a square window.
    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(nc * ho * wo);
        let mut argmax = Vec::with_capacity(nc * ho * wo);
        for plane in 0..nc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = (plane * h + iy as usize) * w + ix as usize;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::new(vec![s[0], s[1], ho, wo], out).unwrap(),
            Op::MaxPool { x, argmax },
            needs,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut params);
        }
        Gradients { params }
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut [Option<Tensor>],
    ) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => match &mut params[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let os = node.value.shape();
                let p = os[2] * os[3];
                let ckk = c * k * k;
                let mut g_t = vec![0.0; o * n * p];
                for ni in 0..n {
                    for oc in 0..o {
                        g_t[oc * n * p + ni * p..oc * n * p + (ni + 1) * p]
                            .copy_from_slice(&gd[(ni * o + oc) * p..(ni * o + oc + 1) * p]);
                    }
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; o * ckk];
                    gemm(o, n * p, ckk, &g_t, false, cols, true, &mut dw, 0.0);
                    acc(*w, Tensor::new(ws.to_vec(), dw).unwrap());
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let db = g_t.chunks(n * p).map(|r| r.iter().sum()).collect();
                        acc(*b, Tensor::new(vec![o], db).unwrap());
                    }
                }
                if self.ng(*x) {
                    let mut dcols = vec![0.0; ckk * n * p];
                    gemm(
                        ckk,
                        o,
                        n * p,
                        self.value(*w).data(),
                        true,
                        &g_t,
                        false,
                        &mut dcols,
                        0.0,
                    );
                    let dx = col2im(&dcols, n, c, h, wd, k, *stride, *pad, os[2], os[3]);
                    acc(*x, Tensor::new(xs.to_vec(), dx).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, i, o) = (xs[0], xs[1], ws[0]);
                if self.ng(*w) {
                    let mut dw = vec![0.0; o * i];
                    gemm(
                        o,
                        n,
                        i,
                        gd,
                        true,
                        self.value(*x).data(),
                        false,
                        &mut dw,
                        0.0,
                    );
                    acc(*w, Tensor::new(ws.to_vec(), dw).unwrap());
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = vec![0.0; o];
                        for row in gd.chunks(o) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(*b, Tensor::new(vec![o], db).unwrap());
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * i];
                    gemm(
                        n,
                        o,
                        i,
                        gd,
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        0.0,
                    );
                    acc(*x, Tensor::new(xs.to_vec(), dx).unwrap());
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Scale(x, s) => {
                let d = gd.iter().map(|v| v * s).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let mut d = Vec::with_capacity(xs.iter().product());
                for v in gd {
                    d.extend(core::iter::repeat_n(v / hw as f64, hw));
                }
                acc(*x, Tensor::new(xs.to_vec(), d).unwrap());
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x).to_vec();
                acc(*x, g.reshaped(&xs));
            }
            Op::ConcatChannels(xs) => {
                let s = node.value.shape();
                let (n, hw) = (s[0], s[2] * s[3]);
                let total = s[1] * hw;
                let mut offset = 0;
                for &x in xs {
                    let block = self.shape(x)[1] * hw;
                    if self.ng(x) {
                        let mut d = Vec::with_capacity(n * block);
                        for ni in 0..n {
                            d.extend_from_slice(
                                &gd[ni * total + offset..ni * total + offset + block],
                            );
                        }
                        acc(x, Tensor::new(self.shape(x).to_vec(), d).unwrap());
                    }
                    offset += block;
                }
            }
            Op::ResizeNearest(x) => {
                let xs = self.shape(*x);
                let (nc, sh, sw) = (xs[0] * xs[1], xs[2], xs[3]);
                let os = node.value.shape();
                let (h, w) = (os[2], os[3]);
                let mut d = vec![0.0; nc * sh * sw];
                for plane in 0..nc {
                    for y in 0..h {
                        let sy = y * sh / h;
                        for xx in 0..w {
                            d[(plane * sh + sy) * sw + xx * sw / w] += gd[(plane * h + y) * w + xx];
                        }
                    }
                }
                acc(*x, Tensor::new(xs.to_vec(), d).unwrap());
            }
            Op::L2Normalize { x, eps } => {
                let xs = self.shape(*x);
                let dim = xs[1];
                let xv = self.value(*x).data();
                let mut d = vec![0.0; xv.len()];
                for r in 0..xs[0] {
                    let row = &xv[r * dim..(r + 1) * dim];
                    let gr = &gd[r * dim..(r + 1) * dim];
                    let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                    let denom = norm + eps;
                    let dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..dim {
                        let radial = if norm > 0.0 {
                            row[j] * dot / (denom * denom * norm)
                        } else {
                            0.0
                        };
                        d[r * dim + j] = gr[j] / denom - radial;
                    }
                }
                acc(*x, Tensor::new(xs.to_vec(), d).unwrap());
            }
            Op::PairProduct { v, cands } => {
                let (b, dim) = (self.shape(*v)[0], self.shape(*v)[1]);
                let m = cands.shape()[1];
                let mut d = vec![0.0; b * dim];
                for bi in 0..b {
                    for mi in 0..m {
                        let row = (bi * m + mi) * dim;
                        for j in 0..dim {
                            d[bi * dim + j] += gd[row + j] * cands.data()[row + j];
                        }
                    }
                }
                acc(*v, Tensor::new(vec![b, dim], d).unwrap());
            }
            Op::BatchedDot { v, cands } => {
                let (b, dim) = (self.shape(*v)[0], self.shape(*v)[1]);
                let m = cands.shape()[1];
                let mut d = vec![0.0; b * dim];
                for bi in 0..b {
                    for mi in 0..m {
                        let gv = gd[bi * m + mi];
                        let row = (bi * m + mi) * dim;
                        for j in 0..dim {
                            d[bi * dim + j] += gv * cands.data()[row + j];
                        }
                    }
                }
                acc(*v, Tensor::new(vec![b, dim], d).unwrap());
            }
            Op::RclLoss { scores, per_anchor } => {
                let s = self.value(*scores).data();
                let anchors = s.len() / per_anchor;
                let k = (per_anchor - 1) as f64;
                let scale = gd[0] / anchors as f64;
                let d = s
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        if i % per_anchor == 0 {
                            scale * 2.0 * (v - 1.0)
                        } else {
                            scale * 2.0 * v / k
                        }
                    })
                    .collect();
                acc(
                    *scores,
                    Tensor::new(self.shape(*scores).to_vec(), d).unwrap(),
                );
            }
            Op::SoftmaxCeFirst(logits) => {
                let s = self.shape(*logits);
                let (b, m) = (s[0], s[1]);
                let scale = gd[0] / b as f64;
                let mut d = Vec::with_capacity(b * m);
                for row in self.value(*logits).data().chunks(m) {
                    let lse = logsumexp(row);
                    for (j, v) in row.iter().enumerate() {
                        let p = libm::exp(v - lse);
                        d.push(scale * (p - if j == 0 { 1.0 } else { 0.0 }));
                    }
                }
                acc(*logits, Tensor::new(s.to_vec(), d).unwrap());
            }
            Op::Perceptual {
                image,
                patches,
                per_image,
            } => {
                let (b, dim) = (self.shape(*image)[0], self.shape(*image)[1]);
                let (iv, pv) = (self.value(*image).data(), self.value(*patches).data());
                let scale = gd[0] * 2.0 / (b * per_image * dim) as f64;
                let mut di = vec![0.0; b * dim];
                let mut dp = vec![0.0; b * per_image * dim];
                for bi in 0..b {
                    for j in 0..*per_image {
                        let prow = (bi * per_image + j) * dim;
                        for a in 0..dim {
                            let diff = scale * (iv[bi * dim + a] - pv[prow + a]);
                            di[bi * dim + a] += diff;
                            dp[prow + a] = -diff;
                        }
                    }
                }
                acc(*image, Tensor::new(vec![b, dim], di).unwrap());
                acc(*patches, Tensor::new(vec![b * per_image, dim], dp).unwrap());
            }
            Op::PixelCe { logits, targets } => {
                let s = self.shape(*logits);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let l = self.value(*logits).data();
                let scale = gd[0] / (n * hw) as f64;
                let mut d = vec![0.0; l.len()];
                let mut row = vec![0.0; c];
                for ni in 0..n {
                    for p in 0..hw {
                        for ci in 0..c {
                            row[ci] = l[(ni * c + ci) * hw + p];
                        }
                        let lse = logsumexp(&row);
                        let t = targets[ni * hw + p] as usize;
                        for ci in 0..c {
                            let pr = libm::exp(row[ci] - lse);
                            d[(ni * c + ci) * hw + p] =
                                scale * (pr - if ci == t { 1.0 } else { 0.0 });
                        }
                    }
                }
                acc(*logits, Tensor::new(s.to_vec(), d).unwrap());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                invstd,
                normalized,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gamma_v = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for p in 0..hw {
                            dgamma[ci] += gd[base + p] * normalized[base + p];
                            dbeta[ci] += gd[base + p];
                        }
                    }
                }
                if self.ng(*x) {
                    let count = (n * hw) as f64;
                    let mut dx = vec![0.0; n * c * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                dx[base + p] = if *batch_stats {
                                    gamma_v[ci] * invstd[ci] / count
                                        * (count * gd[base + p]
                                            - dbeta[ci]
                                            - normalized[base + p] * dgamma[ci])
                                } else {
                                    gamma_v[ci] * invstd[ci] * gd[base + p]
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::new(s.to_vec(), dx).unwrap());
                }
                acc(*gamma, Tensor::new(vec![c], dgamma).unwrap());
                acc(*beta, Tensor::new(vec![c], dbeta).unwrap());
            }
            Op::MaxPool { x, argmax } => {
                let xs = self.shape(*x);
                let mut d = vec![0.0; xs.iter().product()];
                for (gv, &i) in gd.iter().zip(argmax) {
                    d[i] += gv;
                }
                acc(*x, Tensor::new(xs.to_vec(), d).unwrap());
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

pub(crate) fn rcl_from_rows(scores: &[f64], per_anchor: usize) -> f64 {
    let anchors = scores.len() / per_anchor;
    let k = (per_anchor - 1) as f64;
    let total: f64 = scores
        .chunks(per_anchor)
        .map(|row| {
            let pos = (row[0] - 1.0) * (row[0] - 1.0);
            let neg = row[1..].iter().map(|s| s * s).sum::<f64>() / k;
            pos + neg
        })
        .sum();
    total / anchors as f64
}

/// Unfolds `[N, C, H, W]` into `[C*k*k, N*Ho*Wo]` columns.
fn im2col(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let np = n * p;
    let mut cols = vec![0.0; c * k * k * np];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for ni in 0..n {
                    let plane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let out_row = &mut dst[ni * p + oy * wo..ni * p + (oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(
    cols: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let np = n * p;
    let mut x = vec![0.0; n * c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * np..(row + 1) * np];
                for ni in 0..n {
                    let plane = &mut x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &src[ni * p + oy * wo..ni * p + (oy + 1) * wo];
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in in_row.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| r.random::<f64>() - 0.5).collect(),
        )
        .unwrap()
    }

    /// Central-difference check of every parameter coordinate.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let grads = {
            let mut g = Graph::new(store, true);
            let loss = f(&mut g);
            g.backward(loss)
        };
        let ids: Vec<ParamId> = store.ids().collect();
        let h = 1e-6;
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            for i in 0..store.get(id).len() {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + h;
                let up = {
                    let mut g = Graph::new(store, true);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                store.get_mut(id).data_mut()[i] = orig - h;
                let down = {
                    let mut g = Graph::new(store, true);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                store.get_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
                let scale = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / scale < 1e-5,
                    "{} [{i}]: numeric {numeric} analytic {analytic}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[2, 3, 3, 3], 1), true);
        let b = store.add("b", rand_tensor(&[2], 2), true);
        let x = rand_tensor(&[2, 3, 5, 6], 3);
        let mut g = Graph::new(&store, false);
        let xi = g.input(x.clone());
        let y = g.conv2d(xi, w, Some(b), 2, 1);
        assert_eq!(g.shape(y), &[2, 2, 3, 3]);
        let (wd, bd, xd) = (store.get(w).data(), store.get(b).data(), x.data());
        for n in 0..2 {
            for o in 0..2 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut s = bd[o];
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                        s += wd[((o * 3 + c) * 3 + ky) * 3 + kx]
                                            * xd[((n * 3 + c) * 5 + iy as usize) * 6 + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = g.value(y).data()[((n * 2 + o) * 3 + oy) * 3 + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_pool_linear_gradients() {
        let mut store = ParamStore::new();
        let w1 = store.add("w1", rand_tensor(&[3, 2, 3, 3], 4), true);
        let b1 = store.add("b1", rand_tensor(&[3], 5), true);
        let w2 = store.add("w2", rand_tensor(&[4, 3, 1, 1], 6), true);
        let lw = store.add("lw", rand_tensor(&[2, 4], 7), true);
        let lb = store.add("lb", rand_tensor(&[2], 8), true);
        let x = rand_tensor(&[2, 2, 6, 5], 9);
        check(&mut store, |g| {
            let xi = g.input(x.clone());
            let h = g.conv2d(xi, w1, Some(b1), 2, 1);
            let h = g.sigmoid(h);
            let h2 = g.conv2d(h, w2, None, 1, 0);
            let up = g.resize_nearest(h2, 6, 5);
            let p = g.global_avg_pool(up);
            let y = g.linear(p, lw, Some(lb));
            let y = g.l2_normalize(y, 1e-12);
            let cands = rand_tensor(&[2, 3, 2], 10);
            let logits = g.batched_dot(y, cands);
            g.softmax_ce_first(logits)
        });
    }

    #[test]
    fn concat_pair_rcl_perceptual_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&[1, 2, 2, 2], 11), true);
        let b = store.add("b", rand_tensor(&[1, 1, 2, 2], 12), true);
        let lw = store.add("lw", rand_tensor(&[4, 3], 13), true);
        let img = store.add("img", rand_tensor(&[2, 3], 14), true);
        let pat = store.add("pat", rand_tensor(&[6, 3], 15), true);
        check(&mut store, |g| {
            let av = g.param(a);
            let bv = g.param(b);
            let c = g.concat_channels(&[av, bv]);
            let pooled = g.global_avg_pool(c);
            let emb = g.reshape(pooled, &[1, 3]);
            let e = g.linear(emb, lw, None);
            let e = g.reshape(e, &[2, 2]);
            let pairs = g.pair_product(e, rand_tensor(&[2, 3, 2], 16));
            let pairs = g.relu(pairs);
            let r = g.reshape(pairs, &[6, 1, 2, 1]);
            let summed = g.global_avg_pool(r);
            let scores = g.reshape(summed, &[6, 1]);
            let scores = g.sigmoid(scores);
            let rcl = g.rcl_loss(scores, 3);
            let iv = g.param(img);
            let pv = g.param(pat);
            let perc = g.perceptual(iv, pv, 3);
            let perc = g.scale(perc, 0.3);
            g.add(rcl, perc)
        });
    }

    #[test]
    fn batch_norm_maxpool_pixel_ce_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[2, 2, 3, 3], 17), true);
        let gamma = store.add("gamma", Tensor::full(&[2], 1.3), true);
        let beta = store.add("beta", rand_tensor(&[2], 18), true);
        let rm = store.add("rm", Tensor::zeros(&[2]), false);
        let rv = store.add("rv", Tensor::full(&[2], 1.0), false);
        let x = rand_tensor(&[2, 2, 6, 6], 19);
        let targets: Vec<u8> = (0..2 * 6 * 6).map(|i| (i % 3 == 0) as u8).collect();
        check(&mut store, |g| {
            let xi = g.input(x.clone());
            let h = g.conv2d(xi, w, None, 1, 1);
            let h = g.batch_norm(h, gamma, beta, rm, rv, 1e-5);
            let p = g.max_pool(h, 3, 2, 1);
            let up = g.resize_nearest(p, 6, 6);
            g.pixel_cross_entropy(up, targets.clone())
        });
    }

    #[test]
    fn untouched_inputs_get_no_gradient_work() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[1, 1, 1, 1], 20), true);
        let mut g = Graph::new(&store, true);
        let x = g.input(rand_tensor(&[1, 1, 2, 2], 21));
        let y = g.conv2d(x, w, None, 1, 0);
        let p = g.global_avg_pool(y);
        let p = g.reshape(p, &[1]);
        let grads = g.backward(p);
        assert!(grads.get(w).is_some());
    }
}
