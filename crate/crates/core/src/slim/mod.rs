//! Slimmable layers: every weight is stored at full width and a forward pass
//! at width `w` reads only the leading block of each slimmed axis, so all
//! widths share one set of weights. Normalization layers are the exception
//! and keep a private parameter set per width.

mod layers;
mod width;

pub use layers::{
    AttentionOutput, NormKind, NormSet, Slice, SlimAttention, SlimConv2d, SlimDense,
    SlimTransformerBlock, SwitchableNorm, BN_MOMENTUM, NORM_EPS,
};
pub use width::{ac, SlimContext, WidthList};
