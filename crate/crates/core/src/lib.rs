//! 3-D convolutional residual networks for clip-based video classification.
//!
//! The crate covers the whole path from raw frames to a results table:
//! dense tensors and hand-written layer kernels ([`ops`]), residual block
//! genres and named architectures ([`blocks`]), clip sampling and
//! augmentation ([`datapipe`]), SGD training with a plateau schedule
//! ([`trainer`]) and sliding-window evaluation ([`evaluator`]).

pub mod blocks;
pub mod datapipe;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use blocks::{assemble_network, ArchitectureSpec, Genre, Network};
pub use error::{Error, Result};
pub use graph::{Graph, GraphBuilder, Mode, Role};
pub use tensor::{Element, Tensor};
