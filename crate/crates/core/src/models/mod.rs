//! CNN and transformer super-networks built from slimmable layers.

mod spec;

pub use spec::{
    cnn_geometry, Architecture, ConvGeometry, ConvRow, ModelSpec, TransformerSpec, DESK_CNN_ROWS,
    PRESETS, BASELINE_CNN_ROWS,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Mode, NodeId, StatUpdate};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::slim::{
    NormKind, Slice, SlimContext, SlimConv2d, SlimDense, SlimTransformerBlock, SwitchableNorm,
};
use crate::tensor::{Scalar, Tensor};

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug)]
struct CnnNet {
    convs: Vec<SlimConv2d>,
    norms: Vec<SwitchableNorm>,
    pools: Vec<(usize, usize)>,
    head: SlimDense,
}

#[derive(Clone, Debug)]
struct TransformerNet {
    embed: SlimDense,
    pos: ParamId,
    cls: ParamId,
    blocks: Vec<SlimTransformerBlock>,
    norm: Option<SwitchableNorm>,
    head: SlimDense,
}

#[derive(Clone, Debug)]
enum Net {
    Cnn(CnnNet),
    Transformer(TransformerNet),
}

/// A super-network: its spec, the store holding every weight at full width,
/// and the currently active width.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    store: ParamStore<T>,
    ctx: SlimContext,
    net: Net,
}

/// Normal(0, std) truncated to two standard deviations by resampling.
fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<Tensor<T>> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::of(v);
        }
    })
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes the super-network; identical spec and seed
    /// give identical weights.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = &spec.widths;
        let net = match &spec.arch {
            Architecture::Cnn {
                rows,
                slim_last_output,
            } => {
                let last = rows.len() - 1;
                let mut convs = Vec::new();
                let mut norms = Vec::new();
                let mut cin = 1;
                for (i, r) in rows.iter().enumerate() {
                    let name = format!("conv{}", i + 1);
                    let slim_out = i < last || *slim_last_output;
                    convs.push(SlimConv2d::new(
                        &mut store, &mut rng, &name, cin, r.channels, r.kernel, r.stride, true, i > 0, slim_out,
                    )?);
                    norms.push(SwitchableNorm::new(
                        &mut store,
                        &format!("{name}.norm"),
                        NormKind::Batch,
                        r.channels,
                        slim_out,
                        widths,
                    )?);
                    cin = r.channels;
                }
                let head = SlimDense::new(
                    &mut store,
                    &mut rng,
                    "classifier",
                    cin,
                    spec.num_classes,
                    true,
                    *slim_last_output,
                    false,
                )?;
                Net::Cnn(CnnNet {
                    convs,
                    norms,
                    pools: rows.iter().map(|r| r.pool).collect(),
                    head,
                })
            }
            Architecture::Transformer(t) => {
                let e = t.embed_dim;
                let embed = SlimDense::new(&mut store, &mut rng, "embed", spec.mel_bins, e, true, false, false)?;
                let pos = store.add_param("pos_embedding", trunc_normal(&mut rng, &[spec.frames + 1, e], EMBED_STD)?)?;
                let cls = store.add_param("class_token", trunc_normal(&mut rng, &[e], EMBED_STD)?)?;
                let mut blocks = Vec::new();
                for i in 0..t.layers {
                    let (in_dim, slim_in) = if i == 0 { (e, false) } else { (t.dim, true) };
                    blocks.push(SlimTransformerBlock::new(
                        &mut store,
                        &mut rng,
                        &format!("block{}", i + 1),
                        in_dim,
                        slim_in,
                        t.dim,
                        t.mlp_dim,
                        t.heads,
                        widths,
                    )?);
                }
                let (norm, readout, slim_readout) = if t.layers > 0 {
                    let n = SwitchableNorm::new(&mut store, "final_norm", NormKind::Layer, t.dim, true, widths)?;
                    (Some(n), t.dim, true)
                } else {
                    (None, e, false)
                };
                let head = SlimDense::new(
                    &mut store,
                    &mut rng,
                    "classifier",
                    readout,
                    spec.num_classes,
                    true,
                    slim_readout,
                    false,
                )?;
                Net::Transformer(TransformerNet {
                    embed,
                    pos,
                    cls,
                    blocks,
                    norm,
                    head,
                })
            }
        };
        Ok(Model {
            spec: spec.clone(),
            store,
            ctx: SlimContext::full(),
            net,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn ctx(&self) -> SlimContext {
        self.ctx
    }

    pub fn active_width(&self) -> f64 {
        self.ctx.active_width
    }

    /// Routes subsequent forwards through `width`'s slices and norm sets.
    pub fn set_active_width(&mut self, width: f64) -> Result<SlimContext> {
        self.ctx = SlimContext::new(&self.spec.widths, width)?;
        Ok(self.ctx)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.spec.input_shape();
        if shape.len() != 3 || shape[1..] != want {
            return Err(Error::shape("model input [N×frames×mels]", shape, &want));
        }
        Ok(())
    }

    /// Records the forward pass at the active width; `x` is `[N×frames×mels]`.
    /// Train mode queues running-stat updates on `g`.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        self.forward_graph_at(g, x, mode, &self.ctx)
    }

    /// As [`Model::forward_graph`] at an explicit width context.
    pub fn forward_graph_at(&self, g: &mut Graph<T>, x: NodeId, mode: Mode, ctx: &SlimContext) -> Result<NodeId> {
        self.check_input(g.shape(x))?;
        let store = &self.store;
        match &self.net {
            Net::Cnn(net) => {
                let s = g.shape(x).to_vec();
                let mut h = g.reshape(x, &[s[0], 1, s[1], s[2]])?;
                for ((conv, norm), &pool) in net.convs.iter().zip(&net.norms).zip(&net.pools) {
                    h = conv.forward(g, store, h, ctx)?;
                    h = norm.forward(g, store, h, ctx, mode)?;
                    h = g.relu(h)?;
                    if pool != (1, 1) {
                        h = g.max_pool2d(h, pool)?;
                    }
                }
                let pooled = g.mean_spatial(h)?;
                net.head.forward(g, store, pooled, ctx)
            }
            Net::Transformer(net) => {
                let tokens = net.embed.forward(g, store, x, ctx)?;
                let cls = g.param(store, net.cls)?;
                let mut h = g.prepend_token(tokens, cls)?;
                let pos = g.param(store, net.pos)?;
                h = g.add_broadcast(h, pos)?;
                for block in &net.blocks {
                    h = block.forward(g, store, h, ctx)?;
                }
                if let Some(norm) = &net.norm {
                    h = norm.forward(g, store, h, ctx, mode)?;
                }
                let readout = g.select_first(h)?;
                net.head.forward(g, store, readout, ctx)
            }
        }
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        for u in updates {
            self.store.get_mut(u.id).data_mut().copy_from_slice(&u.values);
        }
    }

    /// Forward at the active width. Train mode also applies the running-stat
    /// updates of the active width's norm sets.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(batch.clone())?;
        let y = self.forward_graph(&mut g, x, mode)?;
        let updates = g.take_stat_updates();
        if mode == Mode::Train {
            self.apply_stat_updates(updates);
        }
        Ok(g.value(y).clone())
    }

    /// Eval-mode logits at the active width; never mutates the model.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(batch.clone())?;
        let y = self.forward_graph(&mut g, x, Mode::Eval)?;
        Ok(g.value(y).clone())
    }

    /// Eval-mode logits at `width` without changing the active width.
    pub fn infer_at(&self, batch: &Tensor<T>, width: f64) -> Result<Tensor<T>> {
        let ctx = SlimContext::new(&self.spec.widths, width)?;
        let mut g = Graph::new();
        let x = g.input(batch.clone())?;
        let y = self.forward_graph_at(&mut g, x, Mode::Eval, &ctx)?;
        Ok(g.value(y).clone())
    }

    /// Every stored tensor block read at the active width, in a fixed
    /// layer order shared by all models of the same architecture.
    pub fn slices(&self) -> Result<Vec<Slice>> {
        self.slices_at(&self.ctx)
    }

    pub fn slices_at(&self, ctx: &SlimContext) -> Result<Vec<Slice>> {
        let mut v = Vec::new();
        match &self.net {
            Net::Cnn(net) => {
                for (conv, norm) in net.convs.iter().zip(&net.norms) {
                    v.extend(conv.slices(ctx));
                    v.extend(norm.slices(ctx)?);
                }
                v.extend(net.head.slices(ctx));
            }
            Net::Transformer(net) => {
                v.extend(net.embed.slices(ctx));
                v.push((net.pos, self.store.get(net.pos).shape().to_vec()));
                v.push((net.cls, self.store.get(net.cls).shape().to_vec()));
                for block in &net.blocks {
                    v.extend(block.slices(ctx)?);
                }
                if let Some(norm) = &net.norm {
                    v.extend(norm.slices(ctx)?);
                }
                v.extend(net.head.slices(ctx));
            }
        }
        Ok(v)
    }

    /// Trainable scalars read at the active width (running statistics
    /// excluded).
    pub fn active_param_count(&self) -> Result<usize> {
        Ok(self
            .slices()?
            .iter()
            .filter(|(id, _)| self.store.get(*id).requires_grad())
            .map(|(_, e)| e.iter().product::<usize>())
            .sum())
    }

    /// Standalone single-width model holding copies of the slices and norm
    /// set used at `width`.
    pub fn extract_subnetwork(&self, width: f64) -> Result<Model<T>> {
        let sub_spec = self.spec.sub_spec(width)?;
        let ctx = SlimContext::new(&self.spec.widths, width)?;
        let mut sub = Model::<T>::build(&sub_spec, 0)?;
        let src = self.slices_at(&ctx)?;
        let dst = sub.slices()?;
        if src.len() != dst.len() {
            return Err(Error::Contract(format!(
                "sub-network layout has {} tensors, expected {}",
                dst.len(),
                src.len()
            )));
        }
        for ((sid, sext), (did, dext)) in src.iter().zip(&dst) {
            if sext != dext || sub.store.get(*did).shape() != dext.as_slice() {
                return Err(Error::Contract(format!(
                    "slice of '{}' {:?} does not fit '{}' {:?}",
                    self.store.name(*sid),
                    sext,
                    sub.store.name(*did),
                    dext
                )));
            }
            let block = self.store.get(*sid).prefix(sext)?;
            sub.store.set_values(*did, &block)?;
        }
        Ok(sub)
    }

    /// Same model with every tensor converted to `U`.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            store: self.store.cast(),
            ctx: self.ctx,
            net: self.net.clone(),
        }
    }

    /// Replaces the store, e.g. after loading a checkpoint. Names and shapes
    /// must match the built layout exactly.
    pub fn load_store(&mut self, other: ParamStore<T>) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                other.len(),
                self.store.len()
            )));
        }
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.name(id).to_string();
            let src = other
                .by_name(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing '{name}'")))?;
            self.store.set_values(id, src).map_err(|_| {
                Error::Format(format!(
                    "'{name}' has shape {:?} in the checkpoint, model expects {:?}",
                    src.shape(),
                    self.store.get(id).shape()
                ))
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
