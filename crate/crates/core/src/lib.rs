//! Typed relational graphs over multi-hop QA instances, and gated relational
//! GCN models trained on them with a self-contained f64 autodiff core.
//!
//! The crate is organized as:
//! - [`num`]: tensors, gradient tape, Adam, BiLSTM;
//! - [`graph`]: instances, mention finding, reasoning paths, graph building;
//! - [`embed`]: pluggable embedding sources combined by concatenation;
//! - [`rgcn`]: per-relation message passing with gated, query-aware updates;
//! - [`models`]: the three architectures and their scoring head;
//! - [`harness`]: datasets, synthetic data, training, evaluation, grids.

pub mod embed;
pub mod error;
pub mod graph;
pub mod harness;
pub mod models;
pub mod num;
pub mod rgcn;
pub mod util;
pub mod verify;

pub use embed::{EmbedSourceSpec, Embedder};
pub use error::{DataError, EmbedError, Error, GraphError, NumError, Result};
pub use graph::{build_graph, GraphConfig, Instance, RelGraph, Relation};
pub use harness::{
    gen_synthetic, load_dataset, run_grid, run_training, GridSpec, RunConfig, SyntheticSpec,
    TrainOutcome,
};
pub use models::{Arch, Model, ModelConfig, NodeScores};
pub use num::{AdamConfig, BiLstm, Gradients, Param, ParamStore, Registry, Tape, Tensor, Var};
pub use rgcn::{NeighborIndex, RgcnLayer, RgcnStack};
