//! Conditional-embedding coefficients and the causal-state proximity matrix.
//!
//! Each past `x⁻` is mapped to the weights `α(x⁻) = (Gˣ + λN·I)⁻¹ k(x⁻)` over
//! the library futures, so that its empirical kernel causal state is
//! `Σ_i α_i k⁺(x⁺_i, ·)`. Inner products between two such states reduce to
//! `αᵀ Gʸ α'`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{GramPair, SequenceKernel};
use crate::scalar::Real;
use crate::series::{SequenceLibrary, Window};

fn default_regularization() -> f64 {
    1e-6
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Regularization `λ ≥ 0`; the ridge added to `Gˣ` is `λ·N`.
    #[serde(default = "default_regularization")]
    pub regularization: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            regularization: default_regularization(),
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return Err(Error::Config(format!(
                "regularization must be a nonnegative number, got {}",
                self.regularization
            )));
        }
        Ok(())
    }
}

/// Cached Cholesky factorization of `Gˣ + λN·I`, shared by in-sample and
/// out-of-sample coefficient solves.
#[derive(Clone, Debug)]
pub struct CoefficientSolver<T: Real> {
    chol: Cholesky<T, Dyn>,
    ridge: T,
}

impl<T: Real> CoefficientSolver<T> {
    pub fn factor(gx: &DMatrix<T>, config: &EmbeddingConfig) -> Result<Self> {
        config.validate()?;
        let n = gx.nrows();
        if n == 0 || gx.ncols() != n {
            return Err(Error::Config(format!(
                "past Gram matrix must be square and nonempty, got {}×{}",
                n,
                gx.ncols()
            )));
        }
        let ridge = T::lit(config.regularization * n as f64);
        let mut m = gx.clone();
        for i in 0..n {
            m[(i, i)] += ridge;
        }
        let chol = Cholesky::new(m).ok_or_else(|| {
            Error::IllConditioned(format!(
                "Gˣ + λN·I is not numerically positive definite (λ = {})",
                config.regularization
            ))
        })?;
        // The squared ratio of extreme Cholesky pivots bounds the condition
        // number from below.
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (T::max_value().unwrap(), T::zero());
        for i in 0..n {
            let d = l[(i, i)];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let ratio = (lo / hi) * (lo / hi);
        if !(ratio > T::lit(n as f64) * T::eps()) {
            return Err(Error::IllConditioned(format!(
                "pivot ratio {:e} of Gˣ + λN·I is below machine precision (λ = {})",
                ratio.as_f64(),
                config.regularization
            )));
        }
        Ok(CoefficientSolver { chol, ridge })
    }

    pub fn len(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The ridge `λN` actually added to the diagonal.
    pub fn ridge(&self) -> T {
        self.ridge
    }

    /// Solves `(Gˣ + λN·I) α = k`.
    pub fn solve(&self, k: &DVector<T>) -> DVector<T> {
        self.chol.solve(k)
    }

    pub fn solve_matrix(&self, k: &DMatrix<T>) -> DMatrix<T> {
        self.chol.solve(k)
    }

    /// Weights of an arbitrary past window against the library pasts.
    pub fn coefficients_for(
        &self,
        library: &SequenceLibrary<'_, T>,
        kernel: &SequenceKernel<T>,
        query: &Window<'_, T>,
    ) -> Result<DVector<T>> {
        if library.len() != self.len() {
            return Err(Error::Window(format!(
                "library has {} anchors, factorization {}",
                library.len(),
                self.len()
            )));
        }
        let mut k = DVector::zeros(library.len());
        for i in 0..library.len() {
            k[i] = kernel.eval(query, &library.past(i))?;
        }
        Ok(self.solve(&k))
    }
}

/// Column `i` holds `α(x⁻_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMatrix<T: Real> {
    pub a: DMatrix<T>,
}

impl<T: Real> CoefficientMatrix<T> {
    /// Largest deviation of a column sum from 1.
    pub fn max_column_sum_deviation(&self) -> T {
        self.a
            .column_iter()
            .map(|c| (c.sum() - T::one()).abs())
            .fold(T::zero(), |m, v| m.max(v))
    }
}

/// In-sample coefficients `A = (Gˣ + λN·I)⁻¹ Gˣ`.
pub fn coefficients<T: Real>(gram: &GramPair<T>, config: &EmbeddingConfig) -> Result<CoefficientMatrix<T>> {
    let solver = CoefficientSolver::factor(&gram.gx, config)?;
    coefficients_with(&solver, gram)
}

pub fn coefficients_with<T: Real>(solver: &CoefficientSolver<T>, gram: &GramPair<T>) -> Result<CoefficientMatrix<T>> {
    let a = solver.solve_matrix(&gram.gx);
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::IllConditioned("non-finite embedding coefficients".into()));
    }
    let out = CoefficientMatrix { a };
    let dev = out.max_column_sum_deviation();
    if dev > T::lit(0.5) {
        log::warn!(
            "embedding coefficient column sums deviate from 1 by up to {:.3e}; \
             the past Gram matrix may be poorly conditioned for this regularization",
            dev.as_f64()
        );
    }
    Ok(out)
}

/// Out-of-sample weights for one query past; factors `Gˣ` on every call, so
/// prefer [`CoefficientSolver::coefficients_for`] for repeated queries.
pub fn coefficients_for<T: Real>(
    gram: &GramPair<T>,
    library: &SequenceLibrary<'_, T>,
    kernel: &SequenceKernel<T>,
    query: &Window<'_, T>,
    config: &EmbeddingConfig,
) -> Result<DVector<T>> {
    CoefficientSolver::factor(&gram.gx, config)?.coefficients_for(library, kernel, query)
}

/// Inner products between empirical kernel causal states.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGram<T: Real> {
    pub gcs: DMatrix<T>,
}

impl<T: Real> StateGram<T> {
    pub fn len(&self) -> usize {
        self.gcs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gcs.nrows() == 0
    }
}

/// `Aᵀ Gʸ A`, symmetrized.
pub fn state_gram<T: Real>(coefficients: &CoefficientMatrix<T>, gram: &GramPair<T>) -> Result<StateGram<T>> {
    congruence(&coefficients.a, &gram.gy).map(|gcs| StateGram { gcs })
}

/// `Bᵀ G B`, symmetrized.
pub(crate) fn congruence<T: Real>(b: &DMatrix<T>, g: &DMatrix<T>) -> Result<DMatrix<T>> {
    if b.nrows() != g.nrows() || g.nrows() != g.ncols() {
        return Err(Error::Config(format!(
            "shape mismatch: coefficients {}×{}, Gram {}×{}",
            b.nrows(),
            b.ncols(),
            g.nrows(),
            g.ncols()
        )));
    }
    let m = b.transpose() * (g * b);
    let half = T::lit(0.5);
    Ok((&m + m.transpose()) * half)
}
