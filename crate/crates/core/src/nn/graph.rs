//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] owns one forward pass: ops compute eagerly, append a node, and
//! return a [`NodeId`]. [`Graph::backward`] produces per-node gradients by a
//! single reverse sweep. Graphs are cheap to build and are dropped after each
//! step; parameters live outside the graph and are re-inserted as leaves every
//! pass.

use super::gemm::{dgemm_full, dgemm_rm, dgemm_rm_at, dgemm_rm_bt};
use super::tensor::Tensor;

const GN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-6;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Gelu(NodeId),
    MeanAll(NodeId),
    /// y[R,N] = x[R,K] . w[K,N]
    Matmul { x: NodeId, w: NodeId },
    AddRowBias { x: NodeId, b: NodeId },
    /// y[B,M,N] = a[B,M,K] . b[B,K,N]
    BmmNn { a: NodeId, b: NodeId },
    /// y[B,M,N] = a[B,M,K] . b[B,N,K]^T
    BmmNt { a: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    /// 2x2 stride-2 transposed convolution, w[Ci,Co,2,2]
    ConvT2x2 { x: NodeId, w: NodeId, b: Option<NodeId> },
    /// Saved reciprocal stddev per (n, group).
    GroupNorm { x: NodeId, groups: usize, invstd: Vec<f64> },
    /// Normalization over the last axis; saved reciprocal stddev per row.
    LayerNorm { x: NodeId, invstd: Vec<f64> },
    SoftmaxLast(NodeId),
    Reshape(NodeId),
    /// [N,C,H,W] -> [N, (H/p)(W/p), C*p*p]
    Patchify { x: NodeId, p: usize },
    /// [N, T, C*p*p] -> [N,C,H,W]
    Unpatchify { x: NodeId, p: usize },
    /// [N,T,M] -> [N*h, T, M/h]
    SplitHeads { x: NodeId, heads: usize },
    /// [N*h, T, d] -> [N, T, h*d]
    MergeHeads { x: NodeId, heads: usize },
    ConcatLast { a: NodeId, b: NodeId },
    SliceLast { x: NodeId, start: usize },
    ConcatChannels { a: NodeId, b: NodeId },
    /// x[N,T,M] + v[N,M] broadcast over T
    AddBcastNm { x: NodeId, v: NodeId },
    /// x[N,T,M] * v[N,M] broadcast over T
    MulBcastNm { x: NodeId, v: NodeId },
    /// x[N,C,H,W] + v[N,C] broadcast over H,W
    AddBcastNc { x: NodeId, v: NodeId },
    /// x[N, rest..] + p[rest..] broadcast over the batch axis
    AddBcastBatch { x: NodeId, p: NodeId },
    /// x[N,C,H,W] + b[C]
    AddChannelBias { x: NodeId, b: NodeId },
    /// x[N,C,H,W] * g[C]
    MulChannel { x: NodeId, g: NodeId },
    /// [N,C,H,W] -> [N,C] spatial mean
    MeanSpatial { x: NodeId },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// One forward pass worth of tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Insert a differentiable leaf (parameter).
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, Op::Leaf)
    }

    /// Insert a non-differentiable leaf (input / constant).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, g, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, g, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, g, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.val(a).map(|v| v * c);
        let g = self.ng(a);
        self.push(t, g, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.val(a).map(|v| v + c);
        let g = self.ng(a);
        self.push(t, g, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let t = self.val(a).map(gelu_fwd);
        let g = self.ng(a);
        self.push(t, g, Op::Gelu(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let ta = self.val(a);
        let m = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let g = self.ng(a);
        self.push(Tensor::scalar(m), g, Op::MeanAll(a))
    }

    /// Mean squared difference, as a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (tx, tw) = (self.val(x), self.val(w));
        assert_eq!(tx.shape().len(), 2, "matmul x must be 2-d");
        assert_eq!(tw.shape().len(), 2, "matmul w must be 2-d");
        let (r, k) = (tx.shape()[0], tx.shape()[1]);
        let (k2, n) = (tw.shape()[0], tw.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut y = vec![0.0; r * n];
        dgemm_rm(r, k, n, tx.data(), tw.data(), &mut y, false);
        let g = self.ng(x) || self.ng(w);
        self.push(Tensor::from_vec(&[r, n], y), g, Op::Matmul { x, w })
    }

    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (tx, tb) = (self.val(x), self.val(b));
        let n = *tx.shape().last().expect("add_row_bias on 0-d");
        assert_eq!(tb.shape(), &[n], "bias shape");
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let t = Tensor::from_vec(tx.shape(), data);
        let g = self.ng(x) || self.ng(b);
        self.push(t, g, Op::AddRowBias { x, b })
    }

    pub fn bmm_nn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.val(a), self.val(b));
        let (bs, m, k) = dims3(ta);
        let (bs2, k2, n) = dims3(tb);
        assert_eq!((bs, k), (bs2, k2), "bmm_nn dims");
        let mut y = vec![0.0; bs * m * n];
        for i in 0..bs {
            dgemm_rm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut y[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let g = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[bs, m, n], y), g, Op::BmmNn { a, b })
    }

    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.val(a), self.val(b));
        let (bs, m, k) = dims3(ta);
        let (bs2, n, k2) = dims3(tb);
        assert_eq!((bs, k), (bs2, k2), "bmm_nt dims");
        let mut y = vec![0.0; bs * m * n];
        for i in 0..bs {
            dgemm_rm_bt(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * n * k..(i + 1) * n * k],
                &mut y[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let g = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[bs, m, n], y), g, Op::BmmNt { a, b })
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let (tx, tw) = (self.val(x), self.val(w));
        let [n, ci, h, wd] = dims4(tx);
        let ws = tw.shape();
        assert_eq!(ws.len(), 4, "conv weight must be 4-d");
        let (co, ci2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ci, ci2, "conv in-channels");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let kk = ci * kh * kw;
        let ll = ho * wo;
        let mut y = vec![0.0; n * co * ll];
        let xs = tx.data();
        let wf = tw.data();
        par_batch(n, &mut y, co * ll, |i, y_i| {
            let col = im2col(&xs[i * ci * h * wd..], ci, h, wd, kh, kw, stride, pad, ho, wo);
            dgemm_rm(co, kk, ll, wf, &col, y_i, false);
        });
        if let Some(bid) = b {
            let tb = self.val(bid);
            assert_eq!(tb.shape(), &[co], "conv bias shape");
            for ni in 0..n {
                for c in 0..co {
                    let off = (ni * co + c) * ll;
                    let bv = tb.data()[c];
                    for v in &mut y[off..off + ll] {
                        *v += bv;
                    }
                }
            }
        }
        let g = self.ng(x) || self.ng(w) || b.map_or(false, |bid| self.ng(bid));
        self.push(
            Tensor::from_vec(&[n, co, ho, wo], y),
            g,
            Op::Conv2d { x, w, b, stride, pad },
        )
    }

    pub fn conv_transpose2x2(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (tx, tw) = (self.val(x), self.val(w));
        let [n, ci, h, wd] = dims4(tx);
        let ws = tw.shape();
        assert_eq!(ws.len(), 4, "convT weight must be 4-d");
        assert_eq!(ws[0], ci, "convT in-channels");
        assert_eq!((ws[2], ws[3]), (2, 2), "convT kernel must be 2x2");
        let co = ws[1];
        let (ho, wo) = (2 * h, 2 * wd);
        let ll = h * wd;
        let mut y = vec![0.0; n * co * ho * wo];
        let xs = tx.data();
        let wf = tw.data();
        par_batch(n, &mut y, co * ho * wo, |i, y_i| {
            let x_i = &xs[i * ci * ll..(i + 1) * ci * ll];
            let mut tmp = vec![0.0; co * ll];
            for a in 0..2usize {
                for bb in 0..2usize {
                    // tmp[co, l] = W[:, :, a, bb]^T . x (A as [k=ci, m=co])
                    tmp.fill(0.0);
                    dgemm_full(
                        co,
                        ci,
                        ll,
                        &wf[a * 2 + bb..],
                        [4, (co * 4) as isize],
                        x_i,
                        [ll as isize, 1],
                        &mut tmp,
                        [ll as isize, 1],
                        false,
                    );
                    for c in 0..co {
                        for ii in 0..h {
                            let dst = c * ho * wo + (2 * ii + a) * wo + bb;
                            let src = c * ll + ii * wd;
                            for jj in 0..wd {
                                y_i[dst + 2 * jj] = tmp[src + jj];
                            }
                        }
                    }
                }
            }
        });
        if let Some(bid) = b {
            let tb = self.val(bid);
            assert_eq!(tb.shape(), &[co], "convT bias shape");
            for ni in 0..n {
                for c in 0..co {
                    let off = (ni * co + c) * ho * wo;
                    let bv = tb.data()[c];
                    for v in &mut y[off..off + ho * wo] {
                        *v += bv;
                    }
                }
            }
        }
        let g = self.ng(x) || self.ng(w) || b.map_or(false, |bid| self.ng(bid));
        self.push(
            Tensor::from_vec(&[n, co, ho, wo], y),
            g,
            Op::ConvT2x2 { x, w, b },
        )
    }

    pub fn group_norm(&mut self, x: NodeId, groups: usize) -> NodeId {
        let tx = self.val(x);
        let [n, c, h, w] = dims4(tx);
        assert!(groups >= 1 && c % groups == 0, "groups {groups} must divide channels {c}");
        let gs = c / groups * h * w;
        let mut y = vec![0.0; tx.numel()];
        let mut invstd = vec![0.0; n * groups];
        for i in 0..n {
            for g in 0..groups {
                let off = i * c * h * w + g * gs;
                let xs = &tx.data()[off..off + gs];
                let mean = xs.iter().sum::<f64>() / gs as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gs as f64;
                let inv = 1.0 / (var + GN_EPS).sqrt();
                invstd[i * groups + g] = inv;
                for (o, v) in y[off..off + gs].iter_mut().zip(xs) {
                    *o = (v - mean) * inv;
                }
            }
        }
        let g = self.ng(x);
        self.push(
            Tensor::from_vec(tx.shape(), y),
            g,
            Op::GroupNorm { x, groups, invstd },
        )
    }

    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let tx = self.val(x);
        let m = *tx.shape().last().expect("layer_norm on 0-d");
        let rows = tx.numel() / m;
        let mut y = vec![0.0; tx.numel()];
        let mut invstd = vec![0.0; rows];
        for r in 0..rows {
            let xs = &tx.data()[r * m..(r + 1) * m];
            let mean = xs.iter().sum::<f64>() / m as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            invstd[r] = inv;
            for (o, v) in y[r * m..(r + 1) * m].iter_mut().zip(xs) {
                *o = (v - mean) * inv;
            }
        }
        let g = self.ng(x);
        self.push(Tensor::from_vec(tx.shape(), y), g, Op::LayerNorm { x, invstd })
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let tx = self.val(x);
        let m = *tx.shape().last().expect("softmax on 0-d");
        let mut y = tx.data().to_vec();
        for row in y.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let g = self.ng(x);
        self.push(Tensor::from_vec(tx.shape(), y), g, Op::SoftmaxLast(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let t = self.val(x).reshaped(shape);
        let g = self.ng(x);
        self.push(t, g, Op::Reshape(x))
    }

    pub fn patchify(&mut self, x: NodeId, p: usize) -> NodeId {
        let tx = self.val(x);
        let [n, c, h, w] = dims4(tx);
        assert!(h % p == 0 && w % p == 0, "patch size {p} must divide {h}x{w}");
        let (hp, wp) = (h / p, w / p);
        let tokens = hp * wp;
        let dim = c * p * p;
        let mut y = vec![0.0; n * tokens * dim];
        let xs = tx.data();
        for i in 0..n {
            for ti in 0..hp {
                for tj in 0..wp {
                    let t = ti * wp + tj;
                    for ch in 0..c {
                        for pi in 0..p {
                            for pj in 0..p {
                                let src = ((i * c + ch) * h + ti * p + pi) * w + tj * p + pj;
                                let dst = (i * tokens + t) * dim + (ch * p + pi) * p + pj;
                                y[dst] = xs[src];
                            }
                        }
                    }
                }
            }
        }
        let g = self.ng(x);
        self.push(Tensor::from_vec(&[n, tokens, dim], y), g, Op::Patchify { x, p })
    }

    pub fn unpatchify(&mut self, x: NodeId, p: usize, c: usize, h: usize, w: usize) -> NodeId {
        let tx = self.val(x);
        let (n, tokens, dim) = dims3(tx);
        assert_eq!(dim, c * p * p, "unpatchify feature dim");
        assert_eq!(tokens, (h / p) * (w / p), "unpatchify token count");
        let (hp, wp) = (h / p, w / p);
        let mut y = vec![0.0; n * c * h * w];
        let xs = tx.data();
        for i in 0..n {
            for ti in 0..hp {
                for tj in 0..wp {
                    let t = ti * wp + tj;
                    for ch in 0..c {
                        for pi in 0..p {
                            for pj in 0..p {
                                let dst = ((i * c + ch) * h + ti * p + pi) * w + tj * p + pj;
                                let src = (i * tokens + t) * dim + (ch * p + pi) * p + pj;
                                y[dst] = xs[src];
                            }
                        }
                    }
                }
            }
        }
        let g = self.ng(x);
        self.push(Tensor::from_vec(&[n, c, h, w], y), g, Op::Unpatchify { x, p })
    }

    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let tx = self.val(x);
        let (n, t, m) = dims3(tx);
        assert_eq!(m % heads, 0, "heads {heads} must divide dim {m}");
        let d = m / heads;
        let mut y = vec![0.0; tx.numel()];
        let xs = tx.data();
        for i in 0..n {
            for hh in 0..heads {
                for tt in 0..t {
                    let src = (i * t + tt) * m + hh * d;
                    let dst = ((i * heads + hh) * t + tt) * d;
                    y[dst..dst + d].copy_from_slice(&xs[src..src + d]);
                }
            }
        }
        let g = self.ng(x);
        self.push(
            Tensor::from_vec(&[n * heads, t, d], y),
            g,
            Op::SplitHeads { x, heads },
        )
    }

    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let tx = self.val(x);
        let (nh, t, d) = dims3(tx);
        assert_eq!(nh % heads, 0, "batch {nh} not divisible by heads {heads}");
        let n = nh / heads;
        let m = heads * d;
        let mut y = vec![0.0; tx.numel()];
        let xs = tx.data();
        for i in 0..n {
            for hh in 0..heads {
                for tt in 0..t {
                    let src = ((i * heads + hh) * t + tt) * d;
                    let dst = (i * t + tt) * m + hh * d;
                    y[dst..dst + d].copy_from_slice(&xs[src..src + d]);
                }
            }
        }
        let g = self.ng(x);
        self.push(Tensor::from_vec(&[n, t, m], y), g, Op::MergeHeads { x, heads })
    }

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.val(a), self.val(b));
        let ma = *ta.shape().last().expect("concat_last 0-d");
        let mb = *tb.shape().last().expect("concat_last 0-d");
        assert_eq!(
            ta.shape()[..ta.shape().len() - 1],
            tb.shape()[..tb.shape().len() - 1],
            "concat_last leading dims"
        );
        let rows = ta.numel() / ma;
        let mut y = vec![0.0; rows * (ma + mb)];
        for r in 0..rows {
            y[r * (ma + mb)..r * (ma + mb) + ma].copy_from_slice(&ta.data()[r * ma..(r + 1) * ma]);
            y[r * (ma + mb) + ma..(r + 1) * (ma + mb)]
                .copy_from_slice(&tb.data()[r * mb..(r + 1) * mb]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = ma + mb;
        let g = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&shape, y), g, Op::ConcatLast { a, b })
    }

    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let tx = self.val(x);
        let m = *tx.shape().last().expect("slice_last 0-d");
        assert!(start + len <= m, "slice {start}+{len} > {m}");
        let rows = tx.numel() / m;
        let mut y = vec![0.0; rows * len];
        for r in 0..rows {
            y[r * len..(r + 1) * len].copy_from_slice(&tx.data()[r * m + start..r * m + start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let g = self.ng(x);
        self.push(Tensor::from_vec(&shape, y), g, Op::SliceLast { x, start })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.val(a), self.val(b));
        let [n, c1, h, w] = dims4(ta);
        let [n2, c2, h2, w2] = dims4(tb);
        assert_eq!((n, h, w), (n2, h2, w2), "concat_channels dims");
        let mut y = vec![0.0; (c1 + c2) * n * h * w];
        let plane = h * w;
        for i in 0..n {
            let dst = i * (c1 + c2) * plane;
            y[dst..dst + c1 * plane].copy_from_slice(&ta.data()[i * c1 * plane..(i + 1) * c1 * plane]);
            y[dst + c1 * plane..dst + (c1 + c2) * plane]
                .copy_from_slice(&tb.data()[i * c2 * plane..(i + 1) * c2 * plane]);
        }
        let g = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_vec(&[n, c1 + c2, h, w], y),
            g,
            Op::ConcatChannels { a, b },
        )
    }

    pub fn add_bcast_nm(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (tx, tv) = (self.val(x), self.val(v));
        let (n, t, m) = dims3(tx);
        assert_eq!(tv.shape(), &[n, m], "broadcast vector shape");
        let mut y = tx.data().to_vec();
        for i in 0..n {
            let vv = &tv.data()[i * m..(i + 1) * m];
            for tt in 0..t {
                let off = (i * t + tt) * m;
                for (o, b) in y[off..off + m].iter_mut().zip(vv) {
                    *o += b;
                }
            }
        }
        let g = self.ng(x) || self.ng(v);
        self.push(Tensor::from_vec(tx.shape(), y), g, Op::AddBcastNm { x, v })
    }

    pub fn mul_bcast_nm(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (tx, tv) = (self.val(x), self.val(v));
        let (n, t, m) = dims3(tx);
        assert_eq!(tv.shape(), &[n, m], "broadcast vector shape");
        let mut y = tx.data().to_vec();
        for i in 0..n {
            let vv = &tv.data()[i * m..(i + 1) * m];
            for tt in 0..t {
                let off = (i * t + tt) * m;
                for (o, b) in y[off..off + m].iter_mut().zip(vv) {
                    *o *= b;
                }
            }
        }
        let g = self.ng(x) || self.ng(v);
        self.push(Tensor::from_vec(tx.shape(), y), g, Op::MulBcastNm { x, v })
    }

    pub fn add_bcast_nc(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (tx, tv) = (self.val(x), self.val(v));
        let [n, c, h, w] = dims4(tx);
        assert_eq!(tv.shape(), &[n, c], "broadcast vector shape");
        let mut y = tx.data().to_vec();
        let plane = h * w;
        for i in 0..n {
            for ch in 0..c {
                let bv = tv.data()[i * c + ch];
                let off = (i * c + ch) * plane;
                for o in &mut y[off..off + plane] {
                    *o += bv;
                }
            }
        }
        let g = self.ng(x) || self.ng(v);
        self.push(Tensor::from_vec(tx.shape(), y), g, Op::AddBcastNc { x, v })
    }

    pub fn add_bcast_batch(&mut self, x: NodeId, p: NodeId) -> NodeId {
        let (tx, tp) = (self.val(x), self.val(p));
        assert_eq!(&tx.shape()[1..], tp.shape(), "batch-broadcast shape");
        let rest = tp.numel();
        let mut y = tx.data().to_vec();
        for chunk in y.chunks_mut(rest) {
            for (o, b) in chunk.iter_mut().zip(tp.data()) {
                *o += b;
            }
        }
        let g = self.ng(x) || self.ng(p);
        self.push(Tensor::from_vec(tx.shape(), y), g, Op::AddBcastBatch { x, p })
    }

    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (tx, tb) = (self.val(x), self.val(b));
        let [n, c, h, w] = dims4(tx);
        assert_eq!(tb.shape(), &[c], "channel bias shape");
        let mut y = tx.data().to_vec();
        let plane = h * w;
        for i in 0..n {
            for ch in 0..c {
                let bv = tb.data()[ch];
                let off = (i * c + ch) * plane;
                for o in &mut y[off..off + plane] {
                    *o += bv;
                }
            }
        }
        let g = self.ng(x) || self.ng(b);
        self.push(Tensor::from_vec(tx.shape(), y), g, Op::AddChannelBias { x, b })
    }

    pub fn mul_channel(&mut self, x: NodeId, gch: NodeId) -> NodeId {
        let (tx, tg) = (self.val(x), self.val(gch));
        let [n, c, h, w] = dims4(tx);
        assert_eq!(tg.shape(), &[c], "channel gain shape");
        let mut y = tx.data().to_vec();
        let plane = h * w;
        for i in 0..n {
            for ch in 0..c {
                let gv = tg.data()[ch];
                let off = (i * c + ch) * plane;
                for o in &mut y[off..off + plane] {
                    *o *= gv;
                }
            }
        }
        let g = self.ng(x) || self.ng(gch);
        self.push(Tensor::from_vec(tx.shape(), y), g, Op::MulChannel { x, g: gch })
    }

    pub fn mean_spatial(&mut self, x: NodeId) -> NodeId {
        let tx = self.val(x);
        let [n, c, h, w] = dims4(tx);
        let plane = (h * w) as f64;
        let mut y = vec![0.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * h * w;
                y[i * c + ch] = tx.data()[off..off + h * w].iter().sum::<f64>() / plane;
            }
        }
        let g = self.ng(x);
        self.push(Tensor::from_vec(&[n, c], y), g, Op::MeanSpatial { x })
    }

    /// Reverse sweep from `output`, which must be a scalar node.
    pub fn backward(&self, output: NodeId) -> Gradients {
        assert_eq!(self.val(output).numel(), 1, "backward seed must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_into(*a, grads, |dst| add_assign(dst, g.data(), 1.0));
                self.acc_into(*b, grads, |dst| add_assign(dst, g.data(), 1.0));
            }
            Op::Sub(a, b) => {
                self.acc_into(*a, grads, |dst| add_assign(dst, g.data(), 1.0));
                self.acc_into(*b, grads, |dst| add_assign(dst, g.data(), -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a).data(), self.val(*b).data());
                self.acc_into(*a, grads, |dst| {
                    for ((d, gv), bv) in dst.iter_mut().zip(g.data()).zip(tb) {
                        *d += gv * bv;
                    }
                });
                self.acc_into(*b, grads, |dst| {
                    for ((d, gv), av) in dst.iter_mut().zip(g.data()).zip(ta) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc_into(*a, grads, |dst| add_assign(dst, g.data(), c));
            }
            Op::AddScalar(a) => {
                self.acc_into(*a, grads, |dst| add_assign(dst, g.data(), 1.0));
            }
            Op::Gelu(a) => {
                let xs = self.val(*a).data();
                self.acc_into(*a, grads, |dst| {
                    for ((d, gv), xv) in dst.iter_mut().zip(g.data()).zip(xs) {
                        *d += gv * gelu_bwd(*xv);
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.val(*a).numel() as f64;
                let gv = g.item() / n;
                self.acc_into(*a, grads, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Matmul { x, w } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (r, k) = (tx.shape()[0], tx.shape()[1]);
                let n = tw.shape()[1];
                if self.ng(*x) {
                    self.acc_into(*x, grads, |dst| {
                        dgemm_rm_bt(r, n, k, g.data(), tw.data(), dst, true);
                    });
                }
                if self.ng(*w) {
                    self.acc_into(*w, grads, |dst| {
                        dgemm_rm_at(k, r, n, tx.data(), g.data(), dst, true);
                    });
                }
            }
            Op::AddRowBias { x, b } => {
                let n = *self.val(*x).shape().last().unwrap();
                self.acc_into(*x, grads, |dst| add_assign(dst, g.data(), 1.0));
                self.acc_into(*b, grads, |dst| {
                    for row in g.data().chunks(n) {
                        for (d, gv) in dst.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::BmmNn { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (bs, m, k) = dims3(ta);
                let n = tb.shape()[2];
                if self.ng(*a) {
                    self.acc_into(*a, grads, |dst| {
                        for i in 0..bs {
                            dgemm_rm_bt(
                                m,
                                n,
                                k,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &tb.data()[i * k * n..(i + 1) * k * n],
                                &mut dst[i * m * k..(i + 1) * m * k],
                                true,
                            );
                        }
                    });
                }
                if self.ng(*b) {
                    self.acc_into(*b, grads, |dst| {
                        for i in 0..bs {
                            dgemm_rm_at(
                                k,
                                m,
                                n,
                                &ta.data()[i * m * k..(i + 1) * m * k],
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &mut dst[i * k * n..(i + 1) * k * n],
                                true,
                            );
                        }
                    });
                }
            }
            Op::BmmNt { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (bs, m, k) = dims3(ta);
                let n = tb.shape()[1];
                if self.ng(*a) {
                    self.acc_into(*a, grads, |dst| {
                        for i in 0..bs {
                            dgemm_rm(
                                m,
                                n,
                                k,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &tb.data()[i * n * k..(i + 1) * n * k],
                                &mut dst[i * m * k..(i + 1) * m * k],
                                true,
                            );
                        }
                    });
                }
                if self.ng(*b) {
                    self.acc_into(*b, grads, |dst| {
                        for i in 0..bs {
                            dgemm_rm_at(
                                n,
                                m,
                                k,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &ta.data()[i * m * k..(i + 1) * m * k],
                                &mut dst[i * n * k..(i + 1) * n * k],
                                true,
                            );
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, g, grads);
            }
            Op::ConvT2x2 { x, w, b } => {
                self.convt_backward(*x, *w, *b, g, grads);
            }
            Op::GroupNorm { x, groups, invstd } => {
                let y = node.value.data();
                let tx = self.val(*x);
                let [n, c, h, w] = dims4(tx);
                let gs = c / groups * h * w;
                self.acc_into(*x, grads, |dst| {
                    for i in 0..n {
                        for gi in 0..*groups {
                            let off = i * c * h * w + gi * gs;
                            let inv = invstd[i * groups + gi];
                            norm_backward(
                                &g.data()[off..off + gs],
                                &y[off..off + gs],
                                inv,
                                &mut dst[off..off + gs],
                            );
                        }
                    }
                });
            }
            Op::LayerNorm { x, invstd } => {
                let y = node.value.data();
                let m = *self.val(*x).shape().last().unwrap();
                self.acc_into(*x, grads, |dst| {
                    for (r, inv) in invstd.iter().enumerate() {
                        let off = r * m;
                        norm_backward(
                            &g.data()[off..off + m],
                            &y[off..off + m],
                            *inv,
                            &mut dst[off..off + m],
                        );
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let y = node.value.data();
                let m = *node.value.shape().last().unwrap();
                self.acc_into(*x, grads, |dst| {
                    for r in 0..y.len() / m {
                        let off = r * m;
                        let yr = &y[off..off + m];
                        let gr = &g.data()[off..off + m];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dst[off..off + m].iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc_into(*x, grads, |dst| add_assign(dst, g.data(), 1.0));
            }
            Op::Patchify { x, p } => {
                let tx = self.val(*x);
                let [n, c, h, w] = dims4(tx);
                let (hp, wp) = (h / p, w / p);
                let (tokens, dim) = (hp * wp, c * p * p);
                self.acc_into(*x, grads, |dst| {
                    for i in 0..n {
                        for ti in 0..hp {
                            for tj in 0..wp {
                                let t = ti * wp + tj;
                                for ch in 0..c {
                                    for pi in 0..*p {
                                        for pj in 0..*p {
                                            let xi = ((i * c + ch) * h + ti * p + pi) * w + tj * p + pj;
                                            let yi =
                                                (i * tokens + t) * dim + (ch * p + pi) * p + pj;
                                            dst[xi] += g.data()[yi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Unpatchify { x, p } => {
                let tx = self.val(*x);
                let (n, tokens, dim) = dims3(tx);
                let [_, c, h, w] = dims4(&node.value);
                let (hp, wp) = (h / p, w / p);
                let _ = tokens;
                self.acc_into(*x, grads, |dst| {
                    for i in 0..n {
                        for ti in 0..hp {
                            for tj in 0..wp {
                                let t = ti * wp + tj;
                                for ch in 0..c {
                                    for pi in 0..*p {
                                        for pj in 0..*p {
                                            let yi = ((i * c + ch) * h + ti * p + pi) * w + tj * p + pj;
                                            let xi =
                                                (i * (hp * wp) + t) * dim + (ch * p + pi) * p + pj;
                                            dst[xi] += g.data()[yi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let tx = self.val(*x);
                let (n, t, m) = dims3(tx);
                let d = m / heads;
                self.acc_into(*x, grads, |dst| {
                    for i in 0..n {
                        for hh in 0..*heads {
                            for tt in 0..t {
                                let xi = (i * t + tt) * m + hh * d;
                                let yi = ((i * heads + hh) * t + tt) * d;
                                for j in 0..d {
                                    dst[xi + j] += g.data()[yi + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let tx = self.val(*x);
                let (nh, t, d) = dims3(tx);
                let n = nh / heads;
                let m = heads * d;
                self.acc_into(*x, grads, |dst| {
                    for i in 0..n {
                        for hh in 0..*heads {
                            for tt in 0..t {
                                let xi = ((i * heads + hh) * t + tt) * d;
                                let yi = (i * t + tt) * m + hh * d;
                                for j in 0..d {
                                    dst[xi + j] += g.data()[yi + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::ConcatLast { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let ma = *ta.shape().last().unwrap();
                let mb = *tb.shape().last().unwrap();
                let rows = ta.numel() / ma;
                self.acc_into(*a, grads, |dst| {
                    for r in 0..rows {
                        for j in 0..ma {
                            dst[r * ma + j] += g.data()[r * (ma + mb) + j];
                        }
                    }
                });
                self.acc_into(*b, grads, |dst| {
                    for r in 0..rows {
                        for j in 0..mb {
                            dst[r * mb + j] += g.data()[r * (ma + mb) + ma + j];
                        }
                    }
                });
            }
            Op::SliceLast { x, start } => {
                let tx = self.val(*x);
                let m = *tx.shape().last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let rows = tx.numel() / m;
                self.acc_into(*x, grads, |dst| {
                    for r in 0..rows {
                        for j in 0..len {
                            dst[r * m + start + j] += g.data()[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatChannels { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let [n, c1, h, w] = dims4(ta);
                let c2 = tb.shape()[1];
                let plane = h * w;
                self.acc_into(*a, grads, |dst| {
                    for i in 0..n {
                        let src = i * (c1 + c2) * plane;
                        for j in 0..c1 * plane {
                            dst[i * c1 * plane + j] += g.data()[src + j];
                        }
                    }
                });
                self.acc_into(*b, grads, |dst| {
                    for i in 0..n {
                        let src = i * (c1 + c2) * plane + c1 * plane;
                        for j in 0..c2 * plane {
                            dst[i * c2 * plane + j] += g.data()[src + j];
                        }
                    }
                });
            }
            Op::AddBcastNm { x, v } => {
                let (n, t, m) = dims3(self.val(*x));
                self.acc_into(*x, grads, |dst| add_assign(dst, g.data(), 1.0));
                self.acc_into(*v, grads, |dst| {
                    for i in 0..n {
                        for tt in 0..t {
                            let off = (i * t + tt) * m;
                            for j in 0..m {
                                dst[i * m + j] += g.data()[off + j];
                            }
                        }
                    }
                });
            }
            Op::MulBcastNm { x, v } => {
                let (tx, tv) = (self.val(*x), self.val(*v));
                let (n, t, m) = dims3(tx);
                self.acc_into(*x, grads, |dst| {
                    for i in 0..n {
                        let vv = &tv.data()[i * m..(i + 1) * m];
                        for tt in 0..t {
                            let off = (i * t + tt) * m;
                            for j in 0..m {
                                dst[off + j] += g.data()[off + j] * vv[j];
                            }
                        }
                    }
                });
                self.acc_into(*v, grads, |dst| {
                    for i in 0..n {
                        for tt in 0..t {
                            let off = (i * t + tt) * m;
                            for j in 0..m {
                                dst[i * m + j] += g.data()[off + j] * tx.data()[off + j];
                            }
                        }
                    }
                });
            }
            Op::AddBcastNc { x, v } => {
                let [n, c, h, w] = dims4(self.val(*x));
                let plane = h * w;
                self.acc_into(*x, grads, |dst| add_assign(dst, g.data(), 1.0));
                self.acc_into(*v, grads, |dst| {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * plane;
                            dst[i * c + ch] += g.data()[off..off + plane].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::AddBcastBatch { x, p } => {
                let rest = self.val(*p).numel();
                self.acc_into(*x, grads, |dst| add_assign(dst, g.data(), 1.0));
                self.acc_into(*p, grads, |dst| {
                    for chunk in g.data().chunks(rest) {
                        for (d, gv) in dst.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::AddChannelBias { x, b } => {
                let [n, c, h, w] = dims4(self.val(*x));
                let plane = h * w;
                self.acc_into(*x, grads, |dst| add_assign(dst, g.data(), 1.0));
                self.acc_into(*b, grads, |dst| {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * plane;
                            dst[ch] += g.data()[off..off + plane].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::MulChannel { x, g: gch } => {
                let (tx, tg) = (self.val(*x), self.val(*gch));
                let [n, c, h, w] = dims4(tx);
                let plane = h * w;
                self.acc_into(*x, grads, |dst| {
                    for i in 0..n {
                        for ch in 0..c {
                            let gv = tg.data()[ch];
                            let off = (i * c + ch) * plane;
                            for j in 0..plane {
                                dst[off + j] += g.data()[off + j] * gv;
                            }
                        }
                    }
                });
                self.acc_into(*gch, grads, |dst| {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * plane;
                            dst[ch] += g.data()[off..off + plane]
                                .iter()
                                .zip(&tx.data()[off..off + plane])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                });
            }
            Op::MeanSpatial { x } => {
                let [n, c, h, w] = dims4(self.val(*x));
                let plane = h * w;
                let scale = 1.0 / plane as f64;
                self.acc_into(*x, grads, |dst| {
                    for i in 0..n {
                        for ch in 0..c {
                            let gv = g.data()[i * c + ch] * scale;
                            let off = (i * c + ch) * plane;
                            for d in &mut dst[off..off + plane] {
                                *d += gv;
                            }
                        }
                    }
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (tx, tw) = (self.val(x), self.val(w));
        let [n, ci, h, wd] = dims4(tx);
        let ws = tw.shape();
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let [_, _, ho, wo] = dims4(g);
        let kk = ci * kh * kw;
        let ll = ho * wo;
        if self.ng(w) {
            self.acc_into(w, grads, |dw| {
                for i in 0..n {
                    let col = im2col(
                        &tx.data()[i * ci * h * wd..],
                        ci,
                        h,
                        wd,
                        kh,
                        kw,
                        stride,
                        pad,
                        ho,
                        wo,
                    );
                    dgemm_rm_bt(co, ll, kk, &g.data()[i * co * ll..(i + 1) * co * ll], &col, dw, true);
                }
            });
        }
        if self.ng(x) {
            self.acc_into(x, grads, |dx| {
                let chunk = ci * h * wd;
                par_batch(n, dx, chunk, |i, dx_i| {
                    let mut dcol = vec![0.0; kk * ll];
                    dgemm_rm_at(
                        kk,
                        co,
                        ll,
                        tw.data(),
                        &g.data()[i * co * ll..(i + 1) * co * ll],
                        &mut dcol,
                        false,
                    );
                    col2im_add(&dcol, ci, h, wd, kh, kw, stride, pad, ho, wo, dx_i);
                });
            });
        }
        if let Some(bid) = b {
            if self.ng(bid) {
                self.acc_into(bid, grads, |db| {
                    for i in 0..n {
                        for c in 0..co {
                            let off = (i * co + c) * ll;
                            db[c] += g.data()[off..off + ll].iter().sum::<f64>();
                        }
                    }
                });
            }
        }
    }

    fn convt_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (tx, tw) = (self.val(x), self.val(w));
        let [n, ci, h, wd] = dims4(tx);
        let co = tw.shape()[1];
        let (ho, wo) = (2 * h, 2 * wd);
        let ll = h * wd;
        // gathered upstream grad per kernel offset: gab[co, l]
        let gather = |i: usize, a: usize, bb: usize, out: &mut [f64]| {
            for c in 0..co {
                for ii in 0..h {
                    let src = ((i * co + c) * ho + 2 * ii + a) * wo + bb;
                    let dst = c * ll + ii * wd;
                    for jj in 0..wd {
                        out[dst + jj] = g.data()[src + 2 * jj];
                    }
                }
            }
        };
        if self.ng(x) {
            self.acc_into(x, grads, |dx| {
                let chunk = ci * ll;
                par_batch(n, dx, chunk, |i, dx_i| {
                    let mut gab = vec![0.0; co * ll];
                    for a in 0..2usize {
                        for bb in 0..2usize {
                            gather(i, a, bb, &mut gab);
                            // dx[ci, l] += W_ab[ci, co] . gab[co, l]
                            dgemm_full(
                                ci,
                                co,
                                ll,
                                &tw.data()[a * 2 + bb..],
                                [(co * 4) as isize, 4],
                                &gab,
                                [ll as isize, 1],
                                dx_i,
                                [ll as isize, 1],
                                true,
                            );
                        }
                    }
                });
            });
        }
        if self.ng(w) {
            self.acc_into(w, grads, |dw| {
                let mut gab = vec![0.0; co * ll];
                for i in 0..n {
                    let x_i = &tx.data()[i * ci * ll..(i + 1) * ci * ll];
                    for a in 0..2usize {
                        for bb in 0..2usize {
                            gather(i, a, bb, &mut gab);
                            // dW_ab[ci, co] += X[ci, l] . gab[co, l]^T
                            dgemm_full(
                                ci,
                                ll,
                                co,
                                x_i,
                                [ll as isize, 1],
                                &gab,
                                [1, ll as isize],
                                &mut dw[a * 2 + bb..],
                                [(co * 4) as isize, 4],
                                true,
                            );
                        }
                    }
                }
            });
        }
        if let Some(bid) = b {
            if self.ng(bid) {
                self.acc_into(bid, grads, |db| {
                    for i in 0..n {
                        for c in 0..co {
                            let off = (i * co + c) * ho * wo;
                            db[c] += g.data()[off..off + ho * wo].iter().sum::<f64>();
                        }
                    }
                });
            }
        }
    }

    /// Accumulate into a parent's gradient buffer, allocating it on demand.
    /// Skips parents that do not require gradients.
    fn acc_into(&self, parent: NodeId, grads: &mut [Option<Tensor>], f: impl FnOnce(&mut [f64])) {
        if !self.ng(parent) {
            return;
        }
        let slot = &mut grads[parent.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[parent.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(t.shape().len(), 3, "expected 3-d tensor, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

fn dims4(t: &Tensor) -> [usize; 4] {
    assert_eq!(t.shape().len(), 4, "expected 4-d tensor, got {:?}", t.shape());
    [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]]
}

fn add_assign(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * x * x)
}

/// Shared backward for layer/group norm without affine params:
/// dx = inv * (g - mean(g) - y * mean(g .* y)).
fn norm_backward(g: &[f64], y: &[f64], inv: f64, dst: &mut [f64]) {
    let m = g.len() as f64;
    let gmean = g.iter().sum::<f64>() / m;
    let gymean = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / m;
    for ((d, gv), yv) in dst.iter_mut().zip(g).zip(y) {
        *d += inv * (gv - gmean - yv * gymean);
    }
}

/// Patch matrix layout: row = (ci, ki, kj), column = output position.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let ll = ho * wo;
    let mut col = vec![0.0; ci * kh * kw * ll];
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * ll;
                for oi in 0..ho {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = (c * h + si as usize) * w;
                    let dst = row + oi * wo;
                    for oj in 0..wo {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj >= 0 && sj < w as isize {
                            col[dst + oj] = x[src + sj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dst: &mut [f64],
) {
    let ll = ho * wo;
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * ll;
                for oi in 0..ho {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let base = (c * h + si as usize) * w;
                    let src = row + oi * wo;
                    for oj in 0..wo {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj >= 0 && sj < w as isize {
                            dst[base + sj as usize] += col[src + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Run `f(i, chunk_i)` for each batch element over disjoint output chunks.
/// Chunk boundaries are fixed, so the result is independent of scheduling.
fn par_batch(n: usize, out: &mut [f64], chunk: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    debug_assert_eq!(out.len(), n * chunk);
    if n <= 1 || rayon::current_num_threads() <= 1 {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    } else {
        rayon::scope(|s| {
            for (i, c) in out.chunks_mut(chunk).enumerate() {
                let f = &f;
                s.spawn(move |_| f(i, c));
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Finite-difference check of d(scalar output)/d(each input).
    fn fd_check(build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId, inputs: &[Tensor], tol: f64) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids);
        let grads = g.backward(out);
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(ids[k]).expect("missing grad").clone();
            for j in 0..input.numel() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let ids2: Vec<NodeId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == k {
                                t.data_mut()[j] += delta;
                            }
                            g2.param(t)
                        })
                        .collect();
                    let o = build(&mut g2, &ids2);
                    g2.value(o).item()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = analytic.data()[j];
                let denom = ana.abs().max(num.abs()).max(1.0);
                assert!(
                    (ana - num).abs() / denom < tol,
                    "input {k} coord {j}: analytic {ana} vs numeric {num}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = randt(&[3, 4], &mut rng);
        let b = randt(&[3, 4], &mut rng);
        fd_check(
            &|g, ids| {
                let s = g.add(ids[0], ids[1]);
                let m = g.mul(s, ids[0]);
                let sc = g.scale(m, 0.7);
                let sh = g.add_scalar(sc, 0.3);
                let gl = g.gelu(sh);
                g.mean_all(gl)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randt(&[4, 3], &mut rng);
        let w = randt(&[3, 5], &mut rng);
        let b = randt(&[5], &mut rng);
        fd_check(
            &|g, ids| {
                let y = g.matmul(ids[0], ids[1]);
                let y = g.add_row_bias(y, ids[2]);
                let y = g.gelu(y);
                g.mean_all(y)
            },
            &[x, w, b],
            1e-6,
        );
    }

    #[test]
    fn grad_bmm_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = randt(&[2, 3, 4], &mut rng);
        let k = randt(&[2, 3, 4], &mut rng);
        let v = randt(&[2, 3, 4], &mut rng);
        fd_check(
            &|g, ids| {
                let s = g.bmm_nt(ids[0], ids[1]);
                let s = g.scale(s, 0.5);
                let p = g.softmax_last(s);
                let o = g.bmm_nn(p, ids[2]);
                g.mean_all(o)
            },
            &[q, k, v],
            1e-6,
        );
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randt(&[2, 3, 5, 5], &mut rng);
        let w = randt(&[4, 3, 3, 3], &mut rng);
        let b = randt(&[4], &mut rng);
        fd_check(
            &|g, ids| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1);
                let y = g.gelu(y);
                g.mean_all(y)
            },
            &[x, w, b],
            1e-6,
        );
        // strided, no padding (downsample shape)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randt(&[1, 2, 6, 6], &mut rng);
        let w = randt(&[3, 2, 2, 2], &mut rng);
        fd_check(
            &|g, ids| {
                let y = g.conv2d(ids[0], ids[1], None, 2, 0);
                g.mean_all(y)
            },
            &[x, w],
            1e-6,
        );
    }

    #[test]
    fn grad_conv_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randt(&[2, 3, 4, 4], &mut rng);
        let w = randt(&[3, 2, 2, 2], &mut rng);
        let b = randt(&[2], &mut rng);
        fd_check(
            &|g, ids| {
                let y = g.conv_transpose2x2(ids[0], ids[1], Some(ids[2]));
                let y = g.gelu(y);
                g.mean_all(y)
            },
            &[x, w, b],
            1e-6,
        );
    }

    #[test]
    fn conv_transpose_matches_manual() {
        // 1x1x2x2 input, 1->1 channels: each input pixel paints a 2x2 block
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]));
        let y = g.conv_transpose2x2(x, w, None);
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
        let want = vec![
            10.0, 20.0, 20.0, 40.0, //
            30.0, 40.0, 60.0, 80.0, //
            30.0, 60.0, 40.0, 80.0, //
            90.0, 120.0, 120.0, 160.0,
        ];
        assert_eq!(g.value(y).data(), &want[..]);
    }

    #[test]
    fn grad_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randt(&[2, 4, 3, 3], &mut rng);
        fd_check(
            &|g, ids| {
                let y = g.group_norm(ids[0], 2);
                let y = g.gelu(y);
                g.mean_all(y)
            },
            &[x],
            1e-5,
        );
        let x = randt(&[3, 5], &mut rng);
        fd_check(
            &|g, ids| {
                let y = g.layer_norm(ids[0]);
                let y = g.gelu(y);
                g.mean_all(y)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn grad_shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randt(&[2, 4, 4, 4], &mut rng);
        fd_check(
            &|g, ids| {
                let t = g.patchify(ids[0], 2);
                let t = g.gelu(t);
                let back = g.unpatchify(t, 2, 4, 4, 4);
                g.mean_all(back)
            },
            &[x.clone()],
            1e-6,
        );
        let tok = randt(&[2, 3, 6], &mut rng);
        fd_check(
            &|g, ids| {
                let s = g.split_heads(ids[0], 3);
                let s = g.gelu(s);
                let m = g.merge_heads(s, 3);
                g.mean_all(m)
            },
            &[tok],
            1e-6,
        );
        let a = randt(&[2, 3, 4], &mut rng);
        let b = randt(&[2, 3, 2], &mut rng);
        fd_check(
            &|g, ids| {
                let c = g.concat_last(ids[0], ids[1]);
                let s = g.slice_last(c, 1, 4);
                let s = g.gelu(s);
                g.mean_all(s)
            },
            &[a, b],
            1e-6,
        );
        let a = randt(&[2, 2, 3, 3], &mut rng);
        let b = randt(&[2, 1, 3, 3], &mut rng);
        fd_check(
            &|g, ids| {
                let c = g.concat_channels(ids[0], ids[1]);
                let c = g.gelu(c);
                g.mean_all(c)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn grad_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randt(&[2, 3, 4], &mut rng);
        let v = randt(&[2, 4], &mut rng);
        fd_check(
            &|g, ids| {
                let y = g.mul_bcast_nm(ids[0], ids[1]);
                let y = g.add_bcast_nm(y, ids[1]);
                let y = g.gelu(y);
                g.mean_all(y)
            },
            &[x, v],
            1e-6,
        );
        let x = randt(&[2, 3, 2, 2], &mut rng);
        let v = randt(&[2, 3], &mut rng);
        fd_check(
            &|g, ids| {
                let y = g.add_bcast_nc(ids[0], ids[1]);
                let p = g.mean_spatial(y);
                let p = g.gelu(p);
                g.mean_all(p)
            },
            &[x, v],
            1e-6,
        );
        let x = randt(&[3, 2, 2, 2], &mut rng);
        let p = randt(&[2, 2, 2], &mut rng);
        let cb = randt(&[2], &mut rng);
        fd_check(
            &|g, ids| {
                let y = g.add_bcast_batch(ids[0], ids[1]);
                let y = g.mul_channel(y, ids[2]);
                let y = g.add_channel_bias(y, ids[2]);
                let y = g.gelu(y);
                g.mean_all(y)
            },
            &[x, p, cb],
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randt(&[4, 7], &mut rng);
        let mut g = Graph::new();
        let id = g.constant(x);
        let p = g.softmax_last(id);
        for row in g.value(p).data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let c = g.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let y = g.mul(a, c);
        let out = g.mean_all(y);
        let grads = g.backward(out);
        assert!(grads.get(c).is_none());
        let ga = grads.get(a).unwrap();
        assert!((ga.data()[0] - 1.5).abs() < 1e-12);
        assert!((ga.data()[1] - 2.0).abs() < 1e-12);
    }
}
