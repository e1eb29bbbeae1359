//! Whitened feature-map distillation for small ViT-style encoders.
//!
//! The crate bundles a small reverse-mode tensor engine ([`autograd`]),
//! the encoder ([`model`]), the distillation trainer ([`distill`]),
//! downstream evaluation ([`finetune`]), attention and loss-landscape
//! diagnostics ([`diagnostics`]) and the file formats used by the `fd`
//! command-line tool ([`io`]).

pub mod augment;
pub mod autograd;
pub mod diagnostics;
pub mod distill;
pub mod finetune;
pub mod io;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use autograd::{Graph, Gradients, Var};
pub use error::{Error, Result};
pub use ops::Mode;
pub use params::Params;
pub use tensor::Tensor;
