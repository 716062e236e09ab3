//! Recurrent encoder-decoder translation models with attention, built on a
//! small tape-based autodiff engine, plus the tooling around them: BPE
//! subwords, beam search, corpus BLEU, Adam training with checkpoint
//! selection and a seeded replica sweep harness.

pub mod beam;
pub mod bleu;
pub mod bpe;
pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use real::{DType, Real};
pub use tensor::{seeded_rng, Init, SeededRng, Tensor};
