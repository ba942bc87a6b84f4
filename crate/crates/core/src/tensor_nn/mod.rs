//! Small dense networks with hand-written reverse-mode gradients, AdamW and
//! global-norm clipping.

mod checkpoint;
mod net;
mod optim;

pub use checkpoint::{net_to_bytes, read_net, write_net, NET_MAGIC, NET_VERSION};
pub use net::{param_count, Activations, DenseNet, Gradients};
pub use optim::{adamw_step, clip_global_norm, global_norm, AdamWConfig, OptimizerState};

pub(crate) use checkpoint::read_u32;
