//! Minimal tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op executed during a forward pass together with
//! whatever it needs for its vector-Jacobian product. Parameters enter the
//! graph as (possibly prefix-sliced) copies of tensors in a
//! [`ParamStore`](crate::params::ParamStore), and `backward` scatters their
//! gradients back into the matching block of the store.

mod graph;
pub mod gradcheck;
pub mod kernels;

pub use graph::{Activation, Graph, Mode, NodeId, StatUpdate};
