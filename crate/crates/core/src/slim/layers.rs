use rand::Rng;

use crate::autodiff::{Graph, Mode, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

use super::width::{ac, SlimContext, WidthList};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A stored tensor together with the leading block a width reads from it.
pub type Slice = (ParamId, Vec<usize>);

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

fn extent(max: usize, slimmed: bool, ctx: &SlimContext) -> usize {
    if slimmed {
        ctx.extent(max)
    } else {
        max
    }
}

/// Fully connected layer over the last axis whose leading `[out×in]` block
/// is active at a given width.
#[derive(Clone, Debug)]
pub struct SlimDense {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
    pub slim_input: bool,
    pub slim_output: bool,
}

impl SlimDense {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        slim_input: bool,
        slim_output: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        let weight = store.add_param(&format!("{name}.weight"), uniform(rng, &[dout, din], bound)?)?;
        let bias = if bias {
            Some(store.add_param(&format!("{name}.bias"), uniform(rng, &[dout], bound)?)?)
        } else {
            None
        };
        Ok(SlimDense {
            name: name.to_string(),
            weight,
            bias,
            din,
            dout,
            slim_input,
            slim_output,
        })
    }

    pub fn active_in(&self, ctx: &SlimContext) -> usize {
        extent(self.din, self.slim_input, ctx)
    }

    pub fn active_out(&self, ctx: &SlimContext) -> usize {
        extent(self.dout, self.slim_output, ctx)
    }

    pub fn slices(&self, ctx: &SlimContext) -> Vec<Slice> {
        let (o, i) = (self.active_out(ctx), self.active_in(ctx));
        let mut v = vec![(self.weight, vec![o, i])];
        v.extend(self.bias.map(|b| (b, vec![o])));
        v
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        ctx: &SlimContext,
    ) -> Result<NodeId> {
        let (o, i) = (self.active_out(ctx), self.active_in(ctx));
        if g.shape(x).last() != Some(&i) {
            return Err(Error::shape(format!("{} input", self.name), g.shape(x), &[i]));
        }
        let w = g.param_prefix(store, self.weight, &[o, i])?;
        let b = match self.bias {
            Some(b) => Some(g.param_prefix(store, b, &[o])?),
            None => None,
        };
        g.linear(x, w, b)
    }
}

/// Valid 2-d convolution whose leading `[out×in]` channel block is active.
#[derive(Clone, Debug)]
pub struct SlimConv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub slim_input: bool,
    pub slim_output: bool,
}

impl SlimConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        bias: bool,
        slim_input: bool,
        slim_output: bool,
    ) -> Result<Self> {
        let fan_in = cin * kernel.0 * kernel.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add_param(
            &format!("{name}.weight"),
            uniform(rng, &[cout, cin, kernel.0, kernel.1], bound)?,
        )?;
        let bias = if bias {
            Some(store.add_param(&format!("{name}.bias"), uniform(rng, &[cout], bound)?)?)
        } else {
            None
        };
        Ok(SlimConv2d {
            name: name.to_string(),
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            slim_input,
            slim_output,
        })
    }

    pub fn active_in(&self, ctx: &SlimContext) -> usize {
        extent(self.cin, self.slim_input, ctx)
    }

    pub fn active_out(&self, ctx: &SlimContext) -> usize {
        extent(self.cout, self.slim_output, ctx)
    }

    pub fn slices(&self, ctx: &SlimContext) -> Vec<Slice> {
        let (o, i) = (self.active_out(ctx), self.active_in(ctx));
        let mut v = vec![(self.weight, vec![o, i, self.kernel.0, self.kernel.1])];
        v.extend(self.bias.map(|b| (b, vec![o])));
        v
    }

    /// Output spatial extents for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if kh > h || kw > w {
            return None;
        }
        Some(((h - kh) / self.stride.0 + 1, (w - kw) / self.stride.1 + 1))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        ctx: &SlimContext,
    ) -> Result<NodeId> {
        let (o, i) = (self.active_out(ctx), self.active_in(ctx));
        let s = g.shape(x);
        if s.len() != 4 || s[1] != i {
            return Err(Error::shape(format!("{} input", self.name), s, &[i]));
        }
        let w = g.param_prefix(store, self.weight, &[o, i, self.kernel.0, self.kernel.1])?;
        let b = match self.bias {
            Some(b) => Some(g.param_prefix(store, b, &[o])?),
            None => None,
        };
        g.conv2d(x, w, b, self.stride)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Over (N, H, W) per channel, axis 1.
    Batch,
    /// Over the last axis.
    Layer,
}

#[derive(Clone, Debug)]
pub struct NormSet {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: Option<(ParamId, ParamId)>,
    pub extent: usize,
}

/// One private normalization layer per configured width.
#[derive(Clone, Debug)]
pub struct SwitchableNorm {
    pub name: String,
    pub kind: NormKind,
    pub sets: Vec<NormSet>,
}

impl SwitchableNorm {
    /// Set `i` is sized `ac(max_extent, widths[i])`, or `max_extent` when the
    /// normalized axis is not slimmed.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: NormKind,
        max_extent: usize,
        slimmed: bool,
        widths: &WidthList,
    ) -> Result<Self> {
        let mut sets = Vec::with_capacity(widths.len());
        for (i, w) in widths.iter().enumerate() {
            let c = if slimmed { ac(max_extent, w) } else { max_extent };
            let p = format!("{name}.w{i}");
            let gamma = store.add_param(&format!("{p}.gamma"), Tensor::ones(&[c])?)?;
            let beta = store.add_param(&format!("{p}.beta"), Tensor::zeros(&[c])?)?;
            let running = match kind {
                NormKind::Batch => Some((
                    store.add_buffer(&format!("{p}.running_mean"), Tensor::zeros(&[c])?)?,
                    store.add_buffer(&format!("{p}.running_var"), Tensor::ones(&[c])?)?,
                )),
                NormKind::Layer => None,
            };
            sets.push(NormSet {
                gamma,
                beta,
                running,
                extent: c,
            });
        }
        Ok(SwitchableNorm {
            name: name.to_string(),
            kind,
            sets,
        })
    }

    pub fn set(&self, ctx: &SlimContext) -> Result<&NormSet> {
        self.sets.get(ctx.width_index).ok_or_else(|| {
            Error::Config(format!(
                "{}: no parameter set for width index {}",
                self.name, ctx.width_index
            ))
        })
    }

    pub fn slices(&self, ctx: &SlimContext) -> Result<Vec<Slice>> {
        let s = self.set(ctx)?;
        let mut v = vec![(s.gamma, vec![s.extent]), (s.beta, vec![s.extent])];
        if let Some((m, r)) = s.running {
            v.push((m, vec![s.extent]));
            v.push((r, vec![s.extent]));
        }
        Ok(v)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        ctx: &SlimContext,
        mode: Mode,
    ) -> Result<NodeId> {
        let set = self.set(ctx)?;
        let shape = g.shape(x);
        let axis = match self.kind {
            NormKind::Batch => shape.get(1),
            NormKind::Layer => shape.last(),
        };
        if axis != Some(&set.extent) {
            return Err(Error::Config(format!(
                "{}: input {:?} does not match the width-{} set of extent {}",
                self.name, shape, ctx.active_width, set.extent
            )));
        }
        let gamma = g.param(store, set.gamma)?;
        let beta = g.param(store, set.beta)?;
        match (self.kind, set.running) {
            (NormKind::Batch, Some(running)) => {
                g.batch_norm(x, gamma, beta, store, running, mode, NORM_EPS, BN_MOMENTUM)
            }
            _ => g.layer_norm(x, gamma, beta, NORM_EPS),
        }
    }
}

/// Self-attention whose Q/K/V/output projections are slimmed on both sides.
/// The active model dimension is split equally among a fixed head count.
#[derive(Clone, Debug)]
pub struct SlimAttention {
    pub name: String,
    pub wq: SlimDense,
    pub wk: SlimDense,
    pub wv: SlimDense,
    pub wo: SlimDense,
    pub dim: usize,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: NodeId,
    /// `[(N·heads)×T×T]` attention weights.
    pub probs: NodeId,
}

impl SlimAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        widths: &WidthList,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config(format!("{name}: heads must be >= 1")));
        }
        for w in widths.iter() {
            let d = ac(dim, w);
            if !d.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "{name}: {heads} heads do not divide active dim {d} at width {w}"
                )));
            }
        }
        let mut proj = |p: &str| SlimDense::new(store, rng, &format!("{name}.{p}"), dim, dim, true, true, true);
        Ok(SlimAttention {
            name: name.to_string(),
            wq: proj("wq")?,
            wk: proj("wk")?,
            wv: proj("wv")?,
            wo: proj("wo")?,
            dim,
            heads,
        })
    }

    /// Per-head feature dimension at the active width.
    pub fn head_dim(&self, ctx: &SlimContext) -> usize {
        ctx.extent(self.dim) / self.heads
    }

    pub fn slices(&self, ctx: &SlimContext) -> Vec<Slice> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .flat_map(|d| d.slices(ctx))
            .collect()
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        ctx: &SlimContext,
    ) -> Result<AttentionOutput> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::Contract(format!(
                "{}: expected a non-empty [N×T×D] sequence, got {s:?}",
                self.name
            )));
        }
        let q = self.wq.forward(g, store, x, ctx)?;
        let k = self.wk.forward(g, store, x, ctx)?;
        let v = self.wv.forward(g, store, x, ctx)?;
        let (q, k, v) = (
            g.split_heads(q, self.heads)?,
            g.split_heads(k, self.heads)?,
            g.split_heads(v, self.heads)?,
        );
        let scores = g.bmm(q, k, true)?;
        let scaled = g.scale(scores, T::of(1.0 / (self.head_dim(ctx) as f64).sqrt()))?;
        let probs = g.softmax(scaled)?;
        let context = g.bmm(probs, v, false)?;
        let merged = g.merge_heads(context, self.heads)?;
        let out = self.wo.forward(g, store, merged, ctx)?;
        Ok(AttentionOutput { out, probs })
    }
}

/// Pre-norm transformer block with a leading input projection so both
/// residual operands carry the active dimension.
#[derive(Clone, Debug)]
pub struct SlimTransformerBlock {
    pub name: String,
    pub input_proj: SlimDense,
    pub norm1: SwitchableNorm,
    pub attention: SlimAttention,
    pub norm2: SwitchableNorm,
    pub fc1: SlimDense,
    pub fc2: SlimDense,
}

impl SlimTransformerBlock {
    /// `in_dim` is the block input extent; `slim_in` marks whether that
    /// input is itself slimmed.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        slim_in: bool,
        dim: usize,
        mlp_dim: usize,
        heads: usize,
        widths: &WidthList,
    ) -> Result<Self> {
        let input_proj = SlimDense::new(store, rng, &format!("{name}.input_proj"), in_dim, dim, true, slim_in, true)?;
        let norm1 = SwitchableNorm::new(store, &format!("{name}.norm1"), NormKind::Layer, dim, true, widths)?;
        let attention = SlimAttention::new(store, rng, &format!("{name}.attn"), dim, heads, widths)?;
        let norm2 = SwitchableNorm::new(store, &format!("{name}.norm2"), NormKind::Layer, dim, true, widths)?;
        let fc1 = SlimDense::new(store, rng, &format!("{name}.fc1"), dim, mlp_dim, true, true, true)?;
        let fc2 = SlimDense::new(store, rng, &format!("{name}.fc2"), mlp_dim, dim, true, true, true)?;
        Ok(SlimTransformerBlock {
            name: name.to_string(),
            input_proj,
            norm1,
            attention,
            norm2,
            fc1,
            fc2,
        })
    }

    pub fn slices(&self, ctx: &SlimContext) -> Result<Vec<Slice>> {
        let mut v = self.input_proj.slices(ctx);
        v.extend(self.norm1.slices(ctx)?);
        v.extend(self.attention.slices(ctx));
        v.extend(self.norm2.slices(ctx)?);
        v.extend(self.fc1.slices(ctx));
        v.extend(self.fc2.slices(ctx));
        Ok(v)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        ctx: &SlimContext,
    ) -> Result<NodeId> {
        let x = self.input_proj.forward(g, store, x, ctx)?;
        let h = self.norm1.forward(g, store, x, ctx, Mode::Eval)?;
        let a = self.attention.forward(g, store, h, ctx)?.out;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x, ctx, Mode::Eval)?;
        let h = self.fc1.forward(g, store, h, ctx)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h, ctx)?;
        g.add(x, h)
    }
}
