use serde::Serialize;

use crate::autodiff::{Graph, Mode};
use crate::error::Result;
use crate::models::{cnn_geometry, Architecture, Model, ModelSpec};
use crate::slim::{ac, SlimContext};
use crate::tensor::{Scalar, Tensor};

/// Which per-width norm sets enter a parameter count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum NormSets {
    /// Only the set used at the counted width, as in an extracted
    /// sub-network.
    #[default]
    Active,
    /// Every width's set, as stored in the super-network.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    Conv,
    Dense,
    Norm,
    Embedding,
    /// Query-key scores or probability-weighted values.
    AttentionProducts,
}

/// One row of the per-layer cost breakdown at a given width.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    /// Active input and output extents (features or channels).
    pub active_in: usize,
    pub active_out: usize,
    pub full_in: usize,
    pub full_out: usize,
    pub slim_in: bool,
    pub slim_out: bool,
    /// Output positions per example: conv output pixels, or tokens.
    pub positions: usize,
    /// Conv output height and width.
    pub output_hw: Option<(usize, usize)>,
    pub params: usize,
    pub multiplies: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub width: f64,
    pub layers: Vec<LayerCost>,
}

impl CostBreakdown {
    pub fn params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn multiplies(&self) -> u64 {
        self.layers.iter().map(|l| l.multiplies).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }
}

struct Builder<'a> {
    spec: &'a ModelSpec,
    width: f64,
    norms: NormSets,
    layers: Vec<LayerCost>,
}

impl Builder<'_> {
    fn ext(&self, full: usize, slim: bool) -> usize {
        if slim {
            ac(full, self.width)
        } else {
            full
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn weighted(
        &mut self,
        name: String,
        kind: LayerKind,
        (din, dout): (usize, usize),
        (slim_in, slim_out): (bool, bool),
        taps: usize,
        positions: usize,
        output_hw: Option<(usize, usize)>,
    ) {
        let (ai, ao) = (self.ext(din, slim_in), self.ext(dout, slim_out));
        self.layers.push(LayerCost {
            name,
            kind,
            active_in: ai,
            active_out: ao,
            full_in: din,
            full_out: dout,
            slim_in,
            slim_out,
            positions,
            output_hw,
            params: taps * ai * ao + ao,
            multiplies: (positions * taps * ai * ao) as u64,
        });
    }

    fn dense(&mut self, name: String, dims: (usize, usize), slim: (bool, bool), tokens: usize) {
        self.weighted(name, LayerKind::Dense, dims, slim, 1, tokens, None);
    }

    fn norm(&mut self, name: String, extent: usize, slim: bool) {
        let a = self.ext(extent, slim);
        let params = match self.norms {
            NormSets::Active => 2 * a,
            NormSets::All => 2 * self.spec.widths.iter().map(|w| if slim { ac(extent, w) } else { extent }).sum::<usize>(),
        };
        self.layers.push(LayerCost {
            name,
            kind: LayerKind::Norm,
            active_in: a,
            active_out: a,
            full_in: extent,
            full_out: extent,
            slim_in: slim,
            slim_out: slim,
            positions: 0,
            output_hw: None,
            params,
            multiplies: 0,
        });
    }

    fn table(&mut self, name: &str, rows: usize, cols: usize) {
        self.layers.push(LayerCost {
            name: name.to_string(),
            kind: LayerKind::Embedding,
            active_in: rows,
            active_out: cols,
            full_in: rows,
            full_out: cols,
            slim_in: false,
            slim_out: false,
            positions: 0,
            output_hw: None,
            params: rows * cols,
            multiplies: 0,
        });
    }

    fn products(&mut self, name: String, tokens: usize, dim: usize) {
        let a = self.ext(dim, true);
        self.layers.push(LayerCost {
            name,
            kind: LayerKind::AttentionProducts,
            active_in: a,
            active_out: tokens,
            full_in: dim,
            full_out: tokens,
            slim_in: true,
            slim_out: false,
            positions: tokens,
            output_hw: None,
            params: 0,
            multiplies: (tokens * tokens * a) as u64,
        });
    }
}

/// Analytic per-layer parameters and per-example multiplies at `width`,
/// derived from the spec alone. Norm, softmax, activation and pooling
/// arithmetic is not counted as multiplies.
pub fn cost_breakdown(spec: &ModelSpec, width: f64, norms: NormSets) -> Result<CostBreakdown> {
    spec.validate()?;
    spec.widths.index_of(width)?;
    let mut b = Builder {
        spec,
        width,
        norms,
        layers: Vec::new(),
    };
    match &spec.arch {
        Architecture::Cnn {
            rows,
            slim_last_output,
        } => {
            let geom = cnn_geometry(rows, spec.frames, spec.mel_bins)?;
            let last = rows.len() - 1;
            let mut cin = 1;
            for (i, (r, gm)) in rows.iter().zip(&geom).enumerate() {
                let name = format!("conv{}", i + 1);
                let slim_out = i < last || *slim_last_output;
                let (h, w) = gm.conv_hw;
                b.weighted(
                    name.clone(),
                    LayerKind::Conv,
                    (cin, r.channels),
                    (i > 0, slim_out),
                    r.kernel.0 * r.kernel.1,
                    h * w,
                    Some((h, w)),
                );
                b.norm(format!("{name}.norm"), r.channels, slim_out);
                cin = r.channels;
            }
            b.dense("classifier".into(), (cin, spec.num_classes), (*slim_last_output, false), 1);
        }
        Architecture::Transformer(t) => {
            let tokens = spec.frames + 1;
            b.dense("embed".into(), (spec.mel_bins, t.embed_dim), (false, false), spec.frames);
            b.table("pos_embedding", tokens, t.embed_dim);
            b.table("class_token", 1, t.embed_dim);
            for i in 0..t.layers {
                let name = format!("block{}", i + 1);
                let (din, slim_in) = if i == 0 { (t.embed_dim, false) } else { (t.dim, true) };
                b.dense(format!("{name}.input_proj"), (din, t.dim), (slim_in, true), tokens);
                b.norm(format!("{name}.norm1"), t.dim, true);
                for p in ["wq", "wk", "wv"] {
                    b.dense(format!("{name}.attn.{p}"), (t.dim, t.dim), (true, true), tokens);
                }
                b.products(format!("{name}.attn.scores"), tokens, t.dim);
                b.products(format!("{name}.attn.context"), tokens, t.dim);
                b.dense(format!("{name}.attn.wo"), (t.dim, t.dim), (true, true), tokens);
                b.norm(format!("{name}.norm2"), t.dim, true);
                b.dense(format!("{name}.fc1"), (t.dim, t.mlp_dim), (true, true), tokens);
                b.dense(format!("{name}.fc2"), (t.mlp_dim, t.dim), (true, true), tokens);
            }
            if t.layers > 0 {
                b.norm("final_norm".into(), t.dim, true);
                b.dense("classifier".into(), (t.dim, spec.num_classes), (true, false), 1);
            } else {
                b.dense("classifier".into(), (t.embed_dim, spec.num_classes), (false, false), 1);
            }
        }
    }
    Ok(CostBreakdown {
        width,
        layers: b.layers,
    })
}

/// Trainable parameters used at `width`; running statistics excluded.
pub fn count_params(spec: &ModelSpec, width: f64, norms: NormSets) -> Result<usize> {
    Ok(cost_breakdown(spec, width, norms)?.params())
}

/// Multiplies in one forward pass of a single example at `width`.
pub fn count_multiplies(spec: &ModelSpec, width: f64) -> Result<u64> {
    Ok(cost_breakdown(spec, width, NormSets::Active)?.multiplies())
}

/// Multiplies recorded by the autodiff graph while running one example
/// through the model at `width`.
pub fn instrumented_multiplies<T: Scalar>(model: &Model<T>, width: f64) -> Result<u64> {
    let spec = model.spec();
    let ctx = SlimContext::new(&spec.widths, width)?;
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, spec.frames, spec.mel_bins])?)?;
    model.forward_graph_at(&mut g, x, Mode::Eval, &ctx)?;
    Ok(g.multiplies())
}
