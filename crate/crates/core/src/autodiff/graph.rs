use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Softmax,
    LogSoftmax,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param {
        id: ParamId,
        extents: Vec<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Act {
        x: usize,
        kind: Activation,
        d: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        c: usize,
        hw: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        d: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
        k: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBroadcast {
        x: usize,
        y: usize,
    },
    Scale {
        x: usize,
        s: T,
    },
    MeanSpatial {
        x: usize,
        hw: usize,
    },
    Reshape {
        x: usize,
    },
    SplitHeads {
        x: usize,
        n: usize,
        t: usize,
        h: usize,
        d: usize,
    },
    MergeHeads {
        x: usize,
        n: usize,
        t: usize,
        h: usize,
        d: usize,
    },
    Prepend {
        x: usize,
        token: usize,
        n: usize,
        t: usize,
        d: usize,
    },
    SelectFirst {
        x: usize,
        t: usize,
        d: usize,
    },
    Sum {
        x: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Pending overwrite of a running-statistics buffer, produced by a
/// train-mode batch norm and applied by the owner of the store.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub id: ParamId,
    pub values: Vec<T>,
}

/// Tape of executed ops. Nodes are appended in execution order, which is a
/// topological order; `backward` walks it in reverse.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    multiplies: u64,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            multiplies: 0,
            stat_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Scalar multiplications performed by the matmul-like ops recorded so far.
    pub fn multiplies(&self) -> u64 {
        self.multiplies
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<NodeId> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is retained and readable through [`Graph::grad`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<NodeId> {
        let extents = store.get(id).shape().to_vec();
        self.param_prefix(store, id, &extents)
    }

    /// Leaf holding the leading block `extents` of a stored parameter.
    /// Backward adds the block's gradient into the same block of the store.
    pub fn param_prefix(
        &mut self,
        store: &ParamStore<T>,
        id: ParamId,
        extents: &[usize],
    ) -> Result<NodeId> {
        let src = store.get(id);
        let value = src.prefix(extents)?;
        let needs = src.requires_grad();
        self.push(
            value,
            Op::Param {
                id,
                extents: extents.to_vec(),
            },
            needs,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.val(a).data(), self.val(b).data(), &mut out);
        self.multiplies += (m * k * n) as u64;
        let needs = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            needs,
        )
    }

    /// Batched product of `[B×m×k]` with `[B×k×n]`, or with `[B×n×k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = sa.len() != 3
            || sb.len() != 3
            || sa[0] != sb[0]
            || if trans_b { sa[2] != sb[2] } else { sa[2] != sb[1] };
        if bad {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.val(a).data(), self.val(b).data());
            for i in 0..batch {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                let oi = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt(m, k, n, ai, bi, oi);
                } else {
                    gemm_nn(m, k, n, ai, bi, oi);
                }
            }
        }
        self.multiplies += (batch * m * k * n) as u64;
        let needs = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            needs,
        )
    }

    /// `x[..., din] · wᵀ + b` with `w` shaped `[dout×din]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (dout, din) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear bias", self.shape(b), &[dout]));
            }
        }
        let rows = self.val(x).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.val(b).data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv);
            }
        }
        gemm_nt(rows, din, dout, self.val(x).data(), self.val(w).data(), &mut out);
        self.multiplies += (rows * din * dout) as u64;
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = dout;
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new(&shape, out)?,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                rows,
                din,
                dout,
            },
            needs,
        )
    }

    /// Valid (unpadded) 2-d cross-correlation over `[N×Cin×H×W]` inputs.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
    ) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config(format!("conv2d stride must be >= 1, got {stride:?}")));
        }
        let (kh, kw) = (sw[2], sw[3]);
        if kh > sx[2] || kw > sx[3] {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} larger than input {}x{}",
                sx[2], sx[3]
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[sw[0]]));
            }
        }
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            oh: (sx[2] - kh) / stride.0 + 1,
            ow: (sx[3] - kw) / stride.1 + 1,
        };
        let (k, p) = (geom.k(), geom.p());
        let cols = im2col(&geom, self.val(x).data());
        let mut out = vec![T::zero(); geom.n * geom.cout * p];
        {
            let wv = self.val(w).data();
            let bv = b.map(|b| self.val(b).data());
            for s in 0..geom.n {
                let os = &mut out[s * geom.cout * p..(s + 1) * geom.cout * p];
                if let Some(bv) = bv {
                    for (co, &bias) in bv.iter().enumerate() {
                        os[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = bias);
                    }
                }
                gemm_nn(geom.cout, k, p, wv, &cols[s * k * p..(s + 1) * k * p], os);
            }
        }
        self.multiplies += (geom.n * geom.cout * k * p) as u64;
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new(&[geom.n, geom.cout, geom.oh, geom.ow], out)?,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
                cols,
            },
            needs,
        )
    }

    /// Non-overlapping max pooling; trailing rows/columns that do not fill a
    /// window are dropped. Ties resolve to the lowest flat index.
    pub fn max_pool2d(&mut self, x: NodeId, pool: (usize, usize)) -> Result<NodeId> {
        let (ph, pw) = pool;
        if ph == 0 || pw == 0 {
            return Err(Error::Config(format!("pool extents must be >= 1, got {pool:?}")));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("max_pool2d", &s, &[0, 0, 0, 0]));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if ph > h || pw > w {
            return Err(Error::Config(format!(
                "pool {ph}x{pw} larger than input {h}x{w}"
            )));
        }
        let (oh, ow) = (h / ph, w / pw);
        let xv = self.val(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * ph * w + j * pw;
                    for di in 0..ph {
                        for dj in 0..pw {
                            let idx = base + (i * ph + di) * w + j * pw + dj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::new(&[n, c, oh, ow], out)?,
            Op::MaxPool { x: x.0, argmax },
            needs,
        )
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let xt = self.val(x);
        let d = *xt.shape().last().unwrap();
        let xv = xt.data();
        let out: Vec<T> = match kind {
            Activation::Relu => xv.iter().map(|&v| v.max(T::zero())).collect(),
            Activation::Gelu => xv.iter().map(|&v| gelu(v)).collect(),
            Activation::Softmax | Activation::LogSoftmax => {
                let mut out = vec![T::zero(); xv.len()];
                for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for (ov, &v) in o.iter_mut().zip(row) {
                        *ov = (v - mx).exp();
                        z += *ov;
                    }
                    if kind == Activation::Softmax {
                        o.iter_mut().for_each(|v| *v = *v / z);
                    } else {
                        let lz = z.ln();
                        for (ov, &v) in o.iter_mut().zip(row) {
                            *ov = v - mx - lz;
                        }
                    }
                }
                out
            }
        };
        let shape = xt.shape().to_vec();
        let needs = self.ng(x);
        self.push(Tensor::new(&shape, out)?, Op::Act { x: x.0, kind, d }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Gelu)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Softmax)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::LogSoftmax)
    }

    /// Per-channel batch normalization over `[N×C×H×W]` (or `[N×C]`).
    ///
    /// Train mode normalizes with batch statistics and queues an
    /// exponential-moving-average update of `running` (see
    /// [`Graph::take_stat_updates`]); eval mode reads `running` directly.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        store: &ParamStore<T>,
        running: (ParamId, ParamId),
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", &s, &[0, 0]));
        }
        let (n, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        for (what, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [c] {
                return Err(Error::shape(format!("batch_norm {what}"), self.shape(id), &[c]));
            }
        }
        let (rm_id, rv_id) = running;
        let (rm, rv) = (store.get(rm_id).data(), store.get(rv_id).data());
        if rm.len() != c || rv.len() != c {
            return Err(Error::shape("batch_norm running stats", &[rm.len()], &[c]));
        }
        let xv = self.val(x).data();
        let (gv, bv) = (self.val(gamma).data(), self.val(beta).data());
        let eps_t = T::of(eps);
        let m = (n * hw) as f64;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let train = mode == Mode::Train;
        let mut pending = Vec::new();
        if train {
            for s in 0..n {
                for (ch, acc) in mean.iter_mut().enumerate() {
                    let off = (s * c + ch) * hw;
                    for &v in &xv[off..off + hw] {
                        *acc += v;
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v = *v / T::of(m));
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    for &v in &xv[off..off + hw] {
                        let d = v - mean[ch];
                        var[ch] += d * d;
                    }
                }
            }
            var.iter_mut().for_each(|v| *v = *v / T::of(m));
            let mom = T::of(momentum);
            let keep = T::one() - mom;
            let unbias = if m > 1.0 { T::of(m / (m - 1.0)) } else { T::one() };
            pending.push(StatUpdate {
                id: rm_id,
                values: rm.iter().zip(&mean).map(|(&r, &b)| keep * r + mom * b).collect(),
            });
            pending.push(StatUpdate {
                id: rv_id,
                values: rv
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| keep * r + mom * b * unbias)
                    .collect(),
            });
        } else {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        self.stat_updates.extend(pending);
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(&s, out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                train,
                c,
                hw,
            },
            needs,
        )
    }

    /// Normalization over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        for (what, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [d] {
                return Err(Error::shape(format!("layer_norm {what}"), self.shape(id), &[d]));
            }
        }
        let xv = self.val(x).data();
        let (gv, bv) = (self.val(gamma).data(), self.val(beta).data());
        let rows = xv.len() / d;
        let dt = T::of(d as f64);
        let eps_t = T::of(eps);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps_t).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let i = r * d + j;
                xhat[i] = (row[j] - mean) * is;
                out[i] = gv[j] * xhat[i] + bv[j];
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(&s, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                d,
            },
            needs,
        )
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.val(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p = *p / z);
            total += -(row[label] - mx - z.ln());
        }
        let loss = total / T::of(n as f64);
        let needs = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
                k,
            },
            needs,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out)?, Op::Add { a: a.0, b: b.0 }, needs)
    }

    /// `x + y` where `y`'s shape equals the trailing dims of `x`.
    pub fn add_broadcast(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::shape("add_broadcast", sx, sy));
        }
        let yv = self.val(y).data();
        let out: Vec<T> = self
            .val(x)
            .data()
            .chunks(yv.len())
            .flat_map(|c| c.iter().zip(yv).map(|(&a, &b)| a + b))
            .collect();
        let shape = sx.to_vec();
        let needs = self.ng(x) || self.ng(y);
        self.push(Tensor::new(&shape, out)?, Op::AddBroadcast { x: x.0, y: y.0 }, needs)
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> Result<NodeId> {
        let out: Vec<T> = self.val(x).data().iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x);
        self.push(Tensor::new(&shape, out)?, Op::Scale { x: x.0, s }, needs)
    }

    /// Global average pool `[N×C×...] -> [N×C]`.
    pub fn mean_spatial(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape("mean_spatial", &s, &[0, 0, 0]));
        }
        let hw: usize = s[2..].iter().product();
        let inv = T::of(1.0 / hw as f64);
        let out: Vec<T> = self
            .val(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let needs = self.ng(x);
        self.push(Tensor::new(&s[..2], out)?, Op::MeanSpatial { x: x.0, hw }, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.val(x).reshape(shape)?;
        let needs = self.ng(x);
        self.push(t, Op::Reshape { x: x.0 }, needs)
    }

    /// `[N×T×(H·D)] -> [(N·H)×T×D]`
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", &s, &[heads]));
        }
        let (n, t, d) = (s[0], s[1], s[2] / heads);
        let xv = self.val(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for h in 0..heads {
                for ti in 0..t {
                    let src = (b * t + ti) * heads * d + h * d;
                    let dst = ((b * heads + h) * t + ti) * d;
                    out[dst..dst + d].copy_from_slice(&xv[src..src + d]);
                }
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::new(&[n * heads, t, d], out)?,
            Op::SplitHeads {
                x: x.0,
                n,
                t,
                h: heads,
                d,
            },
            needs,
        )
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", &s, &[heads]));
        }
        let (n, t, d) = (s[0] / heads, s[1], s[2]);
        let xv = self.val(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for h in 0..heads {
                for ti in 0..t {
                    let dst = (b * t + ti) * heads * d + h * d;
                    let src = ((b * heads + h) * t + ti) * d;
                    out[dst..dst + d].copy_from_slice(&xv[src..src + d]);
                }
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::new(&[n, t, heads * d], out)?,
            Op::MergeHeads {
                x: x.0,
                n,
                t,
                h: heads,
                d,
            },
            needs,
        )
    }

    /// Prepends `token` (`[D]`) to every sequence of `x` (`[N×T×D]`).
    pub fn prepend_token(&mut self, x: NodeId, token: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(token) != [s[2]] {
            return Err(Error::shape("prepend_token", &s, self.shape(token)));
        }
        let (n, t, d) = (s[0], s[1], s[2]);
        let (xv, tv) = (self.val(x).data(), self.val(token).data());
        let mut out = Vec::with_capacity(n * (t + 1) * d);
        for b in 0..n {
            out.extend_from_slice(tv);
            out.extend_from_slice(&xv[b * t * d..(b + 1) * t * d]);
        }
        let needs = self.ng(x) || self.ng(token);
        self.push(
            Tensor::new(&[n, t + 1, d], out)?,
            Op::Prepend {
                x: x.0,
                token: token.0,
                n,
                t,
                d,
            },
            needs,
        )
    }

    /// `[N×T×D] -> [N×D]`, taking position 0 of each sequence.
    pub fn select_first(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("select_first", &s, &[0, 0, 0]));
        }
        let (n, t, d) = (s[0], s[1], s[2]);
        let xv = self.val(x).data();
        let mut out = Vec::with_capacity(n * d);
        for b in 0..n {
            out.extend_from_slice(&xv[b * t * d..b * t * d + d]);
        }
        let needs = self.ng(x);
        self.push(Tensor::new(&[n, d], out)?, Op::SelectFirst { x: x.0, t, d }, needs)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.val(x).data().iter().copied().sum::<T>();
        let needs = self.ng(x);
        self.push(Tensor::scalar(total), Op::Sum { x: x.0 }, needs)
    }

    /// Reverse pass from a scalar `root`. Gradients of parameters are added
    /// into `store`; calling this repeatedly without zeroing sums them.
    pub fn backward(&mut self, root: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        if !self.val(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backward_node(i, &g, &mut grads, store)?;
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].needs_grad;
        let val = |j: usize| nodes[j].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Param { id, extents } => store.accumulate_grad(*id, extents, g)?,
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    gemm_nt(m, n, k, g, val(b), acc(grads, nodes, a));
                }
                if needs(b) {
                    gemm_tn(k, m, n, val(a), g, acc(grads, nodes, b));
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (val(a), val(b));
                if needs(a) {
                    let da = acc(grads, nodes, a);
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &bv[s * k * n..(s + 1) * k * n];
                        let das = &mut da[s * m * k..(s + 1) * m * k];
                        if trans_b {
                            gemm_nn(m, n, k, gs, bs, das);
                        } else {
                            gemm_nt(m, n, k, gs, bs, das);
                        }
                    }
                }
                if needs(b) {
                    let db = acc(grads, nodes, b);
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let dbs = &mut db[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            gemm_tn(n, m, k, gs, as_, dbs);
                        } else {
                            gemm_tn(k, m, n, as_, gs, dbs);
                        }
                    }
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                if needs(x) {
                    gemm_nn(rows, dout, din, g, val(w), acc(grads, nodes, x));
                }
                if needs(w) {
                    gemm_tn(dout, rows, din, g, val(x), acc(grads, nodes, w));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let db = acc(grads, nodes, b);
                    for r in 0..rows {
                        for (d, &gv) in db.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (k, p, cout) = (geom.k(), geom.p(), geom.cout);
                if needs(*w) {
                    let dw = acc(grads, nodes, *w);
                    for s in 0..geom.n {
                        gemm_nt(
                            cout,
                            p,
                            k,
                            &g[s * cout * p..(s + 1) * cout * p],
                            &cols[s * k * p..(s + 1) * k * p],
                            dw,
                        );
                    }
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let db = acc(grads, nodes, b);
                    for s in 0..geom.n {
                        for (co, d) in db.iter_mut().enumerate() {
                            let off = (s * cout + co) * p;
                            *d += g[off..off + p].iter().copied().sum::<T>();
                        }
                    }
                }
                if needs(*x) {
                    let wv = val(*w);
                    let mut dcols = vec![T::zero(); k * p];
                    let dx = acc(grads, nodes, *x);
                    for s in 0..geom.n {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(k, cout, p, wv, &g[s * cout * p..(s + 1) * cout * p], &mut dcols);
                        col2im(geom, &dcols, &mut dx[s * geom.cin * geom.h * geom.w..]);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let dx = acc(grads, nodes, *x);
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
            }
            &Op::Act { x, kind, d } => {
                let xv = val(x);
                let y = nodes[i].value.data();
                let dx = acc(grads, nodes, x);
                match kind {
                    Activation::Relu => {
                        for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                            if v > T::zero() {
                                *d += gv;
                            }
                        }
                    }
                    Activation::Gelu => {
                        for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                            *d += gv * gelu_grad(v);
                        }
                    }
                    Activation::Softmax => {
                        for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                                *dv += yv * (gv - dot);
                            }
                        }
                    }
                    Activation::LogSoftmax => {
                        for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                            let total: T = gr.iter().copied().sum();
                            for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                                *dv += gv - yv.exp() * total;
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                c,
                hw,
            } => {
                let (c, hw) = (*c, *hw);
                let n = xhat.len() / (c * hw);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for j in off..off + hw {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if needs(*x) {
                    let gv = val(*gamma);
                    let dx = acc(grads, nodes, *x);
                    let m = T::of((n * hw) as f64);
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch];
                        for s in 0..n {
                            let off = (s * c + ch) * hw;
                            for j in off..off + hw {
                                dx[j] += if *train {
                                    scale / m * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                }
                if needs(*gamma) {
                    add_into(acc(grads, nodes, *gamma), &dgamma);
                }
                if needs(*beta) {
                    add_into(acc(grads, nodes, *beta), &dbeta);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                d,
            } => {
                let d = *d;
                let gv = val(*gamma).to_vec();
                if needs(*x) {
                    let dx = acc(grads, nodes, *x);
                    let dt = T::of(d as f64);
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (gr, xr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xr[j];
                        }
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dx[r * d + j] += is / dt * (dt * dxh - s1 - xr[j] * s2);
                        }
                    }
                }
                if needs(*gamma) {
                    let dg = acc(grads, nodes, *gamma);
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if needs(*beta) {
                    let db = acc(grads, nodes, *beta);
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                k,
            } => {
                let k = *k;
                let scale = g[0] / T::of(labels.len() as f64);
                let dl = acc(grads, nodes, *logits);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        dl[r * k + j] += (probs[r * k + j] - onehot) * scale;
                    }
                }
            }
            &Op::Add { a, b } => {
                if needs(a) {
                    add_into(acc(grads, nodes, a), g);
                }
                if needs(b) {
                    add_into(acc(grads, nodes, b), g);
                }
            }
            &Op::AddBroadcast { x, y } => {
                if needs(x) {
                    add_into(acc(grads, nodes, x), g);
                }
                if needs(y) {
                    let dy = acc(grads, nodes, y);
                    let len = dy.len();
                    for c in g.chunks(len) {
                        add_into(dy, c);
                    }
                }
            }
            &Op::Scale { x, s } => {
                for (d, &gv) in acc(grads, nodes, x).iter_mut().zip(g) {
                    *d += gv * s;
                }
            }
            &Op::MeanSpatial { x, hw } => {
                let inv = T::of(1.0 / hw as f64);
                let dx = acc(grads, nodes, x);
                for (chunk, &gv) in dx.chunks_mut(hw).zip(g) {
                    chunk.iter_mut().for_each(|d| *d += gv * inv);
                }
            }
            &Op::Reshape { x } => add_into(acc(grads, nodes, x), g),
            &Op::Sum { x } => {
                let gv = g[0];
                acc(grads, nodes, x).iter_mut().for_each(|d| *d += gv);
            }
            &Op::SplitHeads { x, n, t, h, d } => {
                let dx = acc(grads, nodes, x);
                for b in 0..n {
                    for hh in 0..h {
                        for ti in 0..t {
                            let dst = (b * t + ti) * h * d + hh * d;
                            let src = ((b * h + hh) * t + ti) * d;
                            add_into(&mut dx[dst..dst + d], &g[src..src + d]);
                        }
                    }
                }
            }
            &Op::MergeHeads { x, n, t, h, d } => {
                let dx = acc(grads, nodes, x);
                for b in 0..n {
                    for hh in 0..h {
                        for ti in 0..t {
                            let src = (b * t + ti) * h * d + hh * d;
                            let dst = ((b * h + hh) * t + ti) * d;
                            add_into(&mut dx[dst..dst + d], &g[src..src + d]);
                        }
                    }
                }
            }
            &Op::Prepend { x, token, n, t, d } => {
                if needs(token) {
                    let dt = acc(grads, nodes, token);
                    for b in 0..n {
                        let off = b * (t + 1) * d;
                        add_into(dt, &g[off..off + d]);
                    }
                }
                if needs(x) {
                    let dx = acc(grads, nodes, x);
                    for b in 0..n {
                        let off = b * (t + 1) * d + d;
                        add_into(&mut dx[b * t * d..(b + 1) * t * d], &g[off..off + t * d]);
                    }
                }
            }
            &Op::SelectFirst { x, t, d } => {
                let dx = acc(grads, nodes, x);
                for (b, gr) in g.chunks(d).enumerate() {
                    add_into(&mut dx[b * t * d..b * t * d + d], gr);
                }
            }
        }
        Ok(())
    }
}

fn acc<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], j: usize) -> &'a mut [T] {
    grads[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.len()])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col<T: Scalar>(geom: &ConvGeom, x: &[T]) -> Vec<T> {
    let (k, p) = (geom.k(), geom.p());
    let mut cols = vec![T::zero(); geom.n * k * p];
    for s in 0..geom.n {
        let xs = &x[s * geom.cin * geom.h * geom.w..];
        let cs = &mut cols[s * k * p..(s + 1) * k * p];
        for c in 0..geom.cin {
            for ki in 0..geom.kh {
                for kj in 0..geom.kw {
                    let row = (c * geom.kh + ki) * geom.kw + kj;
                    let dst = &mut cs[row * p..(row + 1) * p];
                    for oh in 0..geom.oh {
                        let src = (c * geom.h + oh * geom.sh + ki) * geom.w + kj;
                        for ow in 0..geom.ow {
                            dst[oh * geom.ow + ow] = xs[src + ow * geom.sw];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(geom: &ConvGeom, dcols: &[T], dx: &mut [T]) {
    let p = geom.p();
    for c in 0..geom.cin {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let src = &dcols[row * p..(row + 1) * p];
                for oh in 0..geom.oh {
                    let dst = (c * geom.h + oh * geom.sh + ki) * geom.w + kj;
                    for ow in 0..geom.ow {
                        dx[dst + ow * geom.sw] += src[oh * geom.ow + ow];
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(debug_assertions)]
fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "input",
        Op::Param { .. } => "param",
        Op::MatMul { .. } => "matmul",
        Op::BatchMatMul { .. } => "bmm",
        Op::Linear { .. } => "linear",
        Op::Conv2d { .. } => "conv2d",
        Op::MaxPool { .. } => "max_pool2d",
        Op::Act { kind, .. } => match kind {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Softmax => "softmax",
            Activation::LogSoftmax => "log_softmax",
        },
        Op::BatchNorm { .. } => "batch_norm",
        Op::LayerNorm { .. } => "layer_norm",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Add { .. } => "add",
        Op::AddBroadcast { .. } => "add_broadcast",
        Op::Scale { .. } => "scale",
        Op::MeanSpatial { .. } => "mean_spatial",
        Op::Reshape { .. } => "reshape",
        Op::SplitHeads { .. } => "split_heads",
        Op::MergeHeads { .. } => "merge_heads",
        Op::Prepend { .. } => "prepend_token",
        Op::SelectFirst { .. } => "select_first",
        Op::Sum { .. } => "sum",
    }
}
