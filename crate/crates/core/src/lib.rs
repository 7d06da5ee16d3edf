//! Empirical kernel causal states and causal diffusion components for
//! multivariate heterogeneous time series.

pub mod cli;
pub mod diffmap;
pub mod embed;
pub mod error;
pub mod gapfill;
pub mod kernels;
pub mod pipeline;
pub mod scalar;
pub mod series;
pub mod systems;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Series = series::MultiSeries<f64>;
pub type Library<'a> = series::SequenceLibrary<'a, f64>;
pub type Gram = kernels::GramPair<f64>;
pub type Embedding = diffmap::DiffusionEmbedding<f64>;
pub type Run<'a> = pipeline::EmbeddingRun<'a, f64>;

pub type Series32 = series::MultiSeries<f32>;
pub type Library32<'a> = series::SequenceLibrary<'a, f32>;
pub type Gram32 = kernels::GramPair<f32>;
pub type Embedding32 = diffmap::DiffusionEmbedding<f32>;
pub type Run32<'a> = pipeline::EmbeddingRun<'a, f32>;
