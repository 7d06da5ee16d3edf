//! End-to-end runs: library, Gram matrices, coefficients, state Gram and
//! diffusion embedding.

use crate::diffmap::{diffusion_operator, spectral_decompose, DiffusionConfig, DiffusionEmbedding, DiffusionOperator};
use crate::embed::{coefficients, state_gram, CoefficientMatrix, EmbeddingConfig, StateGram};
use crate::error::{Error, Result};
use crate::kernels::{gram_pair, GramPair, KernelSpec, SequenceKernel};
use crate::scalar::Real;
use crate::series::{build_library, LibraryConfig, MultiSeries, SequenceLibrary};

pub struct EmbeddingRun<'a, T: Real> {
    pub library: SequenceLibrary<'a, T>,
    pub kernel: SequenceKernel<T>,
    pub gram: GramPair<T>,
    pub coefficients: CoefficientMatrix<T>,
    pub state_gram: StateGram<T>,
    pub operator: DiffusionOperator<T>,
    pub embedding: DiffusionEmbedding<T>,
}

/// Minimum library size for a meaningful embedding.
pub const MIN_ANCHORS: usize = 3;

pub fn embed_series<'a, T: Real>(
    series: &'a MultiSeries<T>,
    library: &LibraryConfig,
    kernel: &KernelSpec,
    embedding: &EmbeddingConfig,
    diffusion: &DiffusionConfig,
    stride: usize,
) -> Result<EmbeddingRun<'a, T>> {
    embedding.validate()?;
    diffusion.validate()?;
    let library = build_library(series, library)?.subsample(stride)?;
    if library.len() < MIN_ANCHORS {
        return Err(Error::InsufficientData(format!(
            "the sequence library has {} anchors, at least {MIN_ANCHORS} are needed",
            library.len()
        )));
    }
    let kernel = kernel.resolve(series)?;
    let gram = gram_pair(&library, &kernel)?;
    let coefficients = coefficients(&gram, embedding)?;
    let state_gram = state_gram(&coefficients, &gram)?;
    let operator = diffusion_operator(&state_gram)?;
    let embedding = spectral_decompose(&operator, diffusion)?;
    Ok(EmbeddingRun {
        library,
        kernel,
        gram,
        coefficients,
        state_gram,
        operator,
        embedding,
    })
}
