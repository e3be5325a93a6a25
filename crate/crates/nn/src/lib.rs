//! Differentiable reconstruction networks for the tomography toolkit:
//! a reverse-mode tape with tomography-aware operators, U-net style
//! architectures, Wasserstein training, and checkpointing.

pub mod ckpt;
pub mod graph;
pub mod objectives;
pub mod opt;
pub mod spectral;
pub mod store;
pub mod train;
pub mod zoo;

pub use graph::{Graph, Var};
pub use store::{Bindings, Init, ParamStore};
