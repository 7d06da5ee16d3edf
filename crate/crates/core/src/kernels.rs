//! Reproducing kernels over past and future sequences.
//!
//! A sequence kernel is assembled in three layers:
//!
//! 1. a site-wise kernel per source, comparing two samples through a metric
//!    (euclidean for real vectors, discrete for symbols) scaled by a bandwidth;
//! 2. aggregation over the lags of a window, either geometric
//!    (`Π_τ k(a_τ, b_τ)^ω(τ)`) or arithmetic (`Σ_τ ω(τ) k(a_τ, b_τ)`), where
//!    `ω` is the decay profile and `τ = 1` is the sample adjacent to the present;
//! 3. aggregation over sources, again geometric or arithmetic, with per-source
//!    weights.
//!
//! Geometric layers are accumulated in the log domain so that long windows do
//! not underflow. For the gaussian/euclidean/geometric combination this is
//! exactly `exp(-Σ_τ ω(τ) ‖a_τ - b_τ‖² / 2ξ²)`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::series::{
    build_library, Block, LibraryConfig, MultiSeries, Sample, SequenceLibrary, Side, SourceData, SourceKind,
    SourceMeta, Window,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    Discrete,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelShape {
    #[default]
    Gaussian,
    Laplacian,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Geometric,
    Arithmetic,
}

/// Site-wise kernel of one source. A missing bandwidth defaults to the
/// source's standard deviation over valid samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceKernelSpec {
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub shape: KernelShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
}

impl SourceKernelSpec {
    pub fn gaussian(bandwidth: f64) -> Self {
        SourceKernelSpec {
            metric: Metric::Euclidean,
            shape: KernelShape::Gaussian,
            bandwidth: Some(bandwidth),
        }
    }
}

/// Temporal decay profile `ω(τ)`, with `ω(1) = 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecayProfile {
    #[default]
    Uniform,
    /// `ω(τ) = exp(-rate (τ - 1))`
    Exponential { rate: f64 },
    /// `ω(τ) = τ^(-exponent)`
    Power { exponent: f64 },
}

impl DecayProfile {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecayProfile::Uniform => Ok(()),
            DecayProfile::Exponential { rate } if rate > 0.0 && rate.is_finite() => Ok(()),
            DecayProfile::Power { exponent } if exponent > 0.0 && exponent.is_finite() => Ok(()),
            other => Err(Error::Config(format!("decay parameter must be positive: {other:?}"))),
        }
    }

    pub fn weight(&self, tau: usize) -> f64 {
        let t = tau as f64;
        match *self {
            DecayProfile::Uniform => 1.0,
            DecayProfile::Exponential { rate } => (-rate * (t - 1.0)).exp(),
            DecayProfile::Power { exponent } => t.powf(-exponent),
        }
    }

    /// Weights for `τ = 1..=len`.
    pub fn weights(&self, len: usize) -> Vec<f64> {
        (1..=len).map(|tau| self.weight(tau)).collect()
    }
}

fn default_true() -> bool {
    true
}

/// Full kernel configuration, shared by the past and future kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    /// One entry per source, a single entry broadcast to all sources, or empty
    /// for defaults (gaussian; euclidean or discrete by source kind).
    #[serde(default)]
    pub sources: Vec<SourceKernelSpec>,
    #[serde(default)]
    pub temporal_aggregation: Aggregation,
    #[serde(default)]
    pub decay: DecayProfile,
    #[serde(default)]
    pub source_aggregation: Aggregation,
    /// Source weights `w(d)`; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_weights: Option<Vec<f64>>,
    /// Scale kernels to unit self-similarity.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            sources: Vec::new(),
            temporal_aggregation: Aggregation::Geometric,
            decay: DecayProfile::Uniform,
            source_aggregation: Aggregation::Geometric,
            source_weights: None,
            normalize: true,
        }
    }
}

impl KernelSpec {
    /// Gaussian product kernel with one bandwidth for every source.
    pub fn gaussian(bandwidth: f64) -> Self {
        KernelSpec {
            sources: vec![SourceKernelSpec::gaussian(bandwidth)],
            ..Default::default()
        }
    }

    /// Per-source site kernels after broadcasting and kind-based defaults.
    pub fn site_specs(&self, sources: &[SourceMeta]) -> Result<Vec<SourceKernelSpec>> {
        let specs = match self.sources.len() {
            0 => sources
                .iter()
                .map(|s| SourceKernelSpec {
                    metric: if s.kind.is_real() {
                        Metric::Euclidean
                    } else {
                        Metric::Discrete
                    },
                    ..Default::default()
                })
                .collect(),
            1 => vec![self.sources[0]; sources.len()],
            n if n == sources.len() => self.sources.clone(),
            n => {
                return Err(Error::Config(format!(
                    "{n} site kernels given for {} sources",
                    sources.len()
                )))
            }
        };
        Ok(specs)
    }

    /// Source weights, uniform when unset.
    pub fn weights(&self, n_sources: usize) -> Result<Vec<f64>> {
        match &self.source_weights {
            None => Ok(vec![1.0; n_sources]),
            Some(w) if w.len() != n_sources => Err(Error::Config(format!(
                "{} source weights for {n_sources} sources",
                w.len()
            ))),
            Some(w) if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) => {
                Err(Error::Config("source weights must be positive".into()))
            }
            Some(w) => Ok(w.clone()),
        }
    }

    /// Binds the specification to a series: validates metric/kind pairs and
    /// fills in default bandwidths from the data.
    pub fn resolve<T: Real>(&self, series: &MultiSeries<T>) -> Result<SequenceKernel<T>> {
        self.decay.validate()?;
        let specs = self.site_specs(series.sources())?;
        let weights = self.weights(series.n_sources())?;
        let mut sites = Vec::with_capacity(specs.len());
        for (d, (spec, meta)) in specs.iter().zip(series.sources()).enumerate() {
            match (&meta.kind, spec.metric) {
                (SourceKind::Real { .. }, Metric::Euclidean) | (SourceKind::Symbol { .. }, Metric::Discrete) => {}
                (_, metric) => {
                    return Err(Error::SourceKind {
                        source_name: meta.name.clone(),
                        msg: format!("{metric:?} metric does not apply to this source kind"),
                    })
                }
            }
            let bandwidth = match spec.bandwidth {
                Some(b) => T::lit(b),
                None => match meta.kind {
                    SourceKind::Real { .. } => series.source_std(d).ok_or_else(|| {
                        Error::InsufficientData(format!(
                            "cannot derive a bandwidth for `{}` from fewer than two samples",
                            meta.name
                        ))
                    })?,
                    SourceKind::Symbol { .. } => T::one(),
                },
            };
            sites.push(
                SiteKernel::new(spec.metric, spec.shape, bandwidth).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("source `{}`: {msg}", meta.name)),
                    e => e,
                })?,
            );
        }
        Ok(SequenceKernel {
            sites,
            temporal: self.temporal_aggregation,
            sources: self.source_aggregation,
            decay: self.decay,
            weights: weights.into_iter().map(T::lit).collect(),
            normalize: self.normalize,
        })
    }
}

/// Site-wise kernel with a resolved bandwidth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiteKernel<T> {
    pub metric: Metric,
    pub shape: KernelShape,
    pub bandwidth: T,
}

impl<T: Real> SiteKernel<T> {
    pub fn new(metric: Metric, shape: KernelShape, bandwidth: T) -> Result<Self> {
        if !(bandwidth > T::zero() && bandwidth.is_finite()) {
            return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(SiteKernel {
            metric,
            shape,
            bandwidth,
        })
    }

    /// `ln k(a, b)`.
    pub fn log_eval(&self, a: Sample<'_, T>, b: Sample<'_, T>) -> Result<T> {
        let sq = match (self.metric, a, b) {
            (Metric::Euclidean, Sample::Real(x), Sample::Real(y)) => {
                if x.len() != y.len() {
                    return Err(Error::Window(format!(
                        "sample dimensions differ ({} vs {})",
                        x.len(),
                        y.len()
                    )));
                }
                x.iter().zip(y).fold(T::zero(), |acc, (&p, &q)| {
                    let d = p - q;
                    acc + d * d
                })
            }
            (Metric::Discrete, Sample::Symbol(x), Sample::Symbol(y)) => {
                if x == y {
                    T::zero()
                } else {
                    T::one()
                }
            }
            (metric, _, _) => {
                return Err(Error::SourceKind {
                    source_name: String::new(),
                    msg: format!("{metric:?} metric applied to a sample of the wrong kind"),
                })
            }
        };
        Ok(match self.shape {
            KernelShape::Gaussian => -sq / (T::lit(2.0) * self.bandwidth * self.bandwidth),
            KernelShape::Laplacian => -sq.sqrt() / self.bandwidth,
        })
    }
}

/// Site-wise kernel value in `(0, 1]`.
pub fn sitewise_eval<T: Real>(kernel: &SiteKernel<T>, a: Sample<'_, T>, b: Sample<'_, T>) -> Result<T> {
    Ok(kernel.log_eval(a, b)?.exp())
}

/// Kernel over whole windows (all sources, all lags), bound to a series.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceKernel<T> {
    pub sites: Vec<SiteKernel<T>>,
    pub temporal: Aggregation,
    pub sources: Aggregation,
    pub decay: DecayProfile,
    pub weights: Vec<T>,
    pub normalize: bool,
}

impl<T: Real> SequenceKernel<T> {
    fn check_windows(&self, a: &Window<'_, T>, b: &Window<'_, T>) -> Result<()> {
        if a.side() != b.side() {
            return Err(Error::Window("cannot compare a past with a future".into()));
        }
        if a.lens() != b.lens() || a.n_sources() != self.sites.len() {
            return Err(Error::Window(format!(
                "window lengths {:?} and {:?} do not match the {} configured sources",
                a.lens(),
                b.lens(),
                self.sites.len()
            )));
        }
        Ok(())
    }

    /// Kernel of one source over one window pair: returned as a log value for
    /// geometric temporal aggregation, as a plain value otherwise.
    fn source_term(&self, d: usize, a: &Window<'_, T>, b: &Window<'_, T>) -> Result<T> {
        let site = &self.sites[d];
        let len = a.len(d);
        match self.temporal {
            Aggregation::Geometric => {
                let mut acc = T::zero();
                for tau in 1..=len {
                    let w = T::lit(self.decay.weight(tau));
                    acc += w * site.log_eval(a.sample(d, tau)?, b.sample(d, tau)?)?;
                }
                Ok(acc)
            }
            Aggregation::Arithmetic => {
                let mut acc = T::zero();
                let mut total = T::zero();
                for tau in 1..=len {
                    let w = T::lit(self.decay.weight(tau));
                    acc += w * site.log_eval(a.sample(d, tau)?, b.sample(d, tau)?)?.exp();
                    total += w;
                }
                Ok(if self.normalize { acc / total } else { acc })
            }
        }
    }

    /// Evaluates the kernel between two windows on the same side.
    pub fn eval(&self, a: &Window<'_, T>, b: &Window<'_, T>) -> Result<T> {
        self.check_windows(a, b)?;
        let geometric_time = self.temporal == Aggregation::Geometric;
        match self.sources {
            Aggregation::Geometric => {
                let mut log_k = T::zero();
                for d in 0..self.sites.len() {
                    let term = self.source_term(d, a, b)?;
                    let log_term = if geometric_time { term } else { term.ln() };
                    log_k += self.weights[d] * log_term;
                }
                Ok(log_k.exp())
            }
            Aggregation::Arithmetic => {
                let mut k = T::zero();
                let mut total = T::zero();
                for d in 0..self.sites.len() {
                    let term = self.source_term(d, a, b)?;
                    let value = if geometric_time { term.exp() } else { term };
                    k += self.weights[d] * value;
                    total += self.weights[d];
                }
                Ok(if self.normalize { k / total } else { k })
            }
        }
    }
}

/// Kernel between two windows; both must be on `side`.
pub fn sequence_kernel<T: Real>(
    kernel: &SequenceKernel<T>,
    a: &Window<'_, T>,
    b: &Window<'_, T>,
    side: Side,
) -> Result<T> {
    if a.side() != side || b.side() != side {
        return Err(Error::Window(format!("expected two {side:?} windows")));
    }
    kernel.eval(a, b)
}

/// Gram matrices over the library pasts (`gx`) and futures (`gy`).
#[derive(Clone, Debug, PartialEq)]
pub struct GramPair<T: Real> {
    pub gx: DMatrix<T>,
    pub gy: DMatrix<T>,
}

impl<T: Real> GramPair<T> {
    pub fn len(&self) -> usize {
        self.gx.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gx.nrows() == 0
    }
}

fn gram_side<T: Real>(library: &SequenceLibrary<'_, T>, kernel: &SequenceKernel<T>, side: Side) -> Result<DMatrix<T>> {
    let n = library.len();
    // Each entry is an independent evaluation, so the result does not depend on
    // how rows are scheduled across threads.
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let wi = library.window(i, side);
            (i..n)
                .map(|j| kernel.eval(&wi, &library.window(j, side)))
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<_>>()?;
    let mut g = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            g[(i, i + off)] = v;
            g[(i + off, i)] = v;
        }
    }
    Ok(g)
}

/// Computes both Gram matrices, evaluating only the upper triangles.
/// Runs on the current rayon pool.
pub fn gram_pair<T: Real>(library: &SequenceLibrary<'_, T>, kernel: &SequenceKernel<T>) -> Result<GramPair<T>> {
    if library.is_empty() {
        return Err(Error::EmptyLibrary("no anchors to build Gram matrices from".into()));
    }
    Ok(GramPair {
        gx: gram_side(library, kernel, Side::Past)?,
        gy: gram_side(library, kernel, Side::Future)?,
    })
}

/// First property violated by a kernel in [`check_kernel_properties`].
#[derive(Clone, Debug, PartialEq)]
pub enum KernelViolation {
    Asymmetric { i: usize, j: usize, difference: f64 },
    NonUnitDiagonal { i: usize, value: f64 },
    NotPositiveSemidefinite { min_eigenvalue: f64, tolerance: f64 },
}

impl std::fmt::Display for KernelViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelViolation::Asymmetric { i, j, difference } => {
                write!(f, "k({i},{j}) and k({j},{i}) differ by {difference:e}")
            }
            KernelViolation::NonUnitDiagonal { i, value } => {
                write!(f, "normalized self-similarity of item {i} is {value}")
            }
            KernelViolation::NotPositiveSemidefinite {
                min_eigenvalue,
                tolerance,
            } => write!(f, "Gram matrix has eigenvalue {min_eigenvalue:e} below -{tolerance:e}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgebraReport {
    pub n_items: usize,
    pub max_asymmetry: f64,
    pub min_eigenvalue: f64,
}

/// Checks symmetry, unit diagonal (when `normalized`) and positive
/// semidefiniteness of a kernel evaluated on `n` items.
pub fn check_kernel_properties<T: Real>(
    n: usize,
    normalized: bool,
    kernel: impl Fn(usize, usize) -> Result<T>,
) -> Result<std::result::Result<AlgebraReport, KernelViolation>> {
    let mut g = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] = kernel(i, j)?.as_f64();
        }
    }
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = (g[(i, j)] - g[(j, i)]).abs();
            let scale = g[(i, j)].abs().max(g[(j, i)].abs()).max(f64::MIN_POSITIVE);
            if diff > 1e-12 * scale {
                return Ok(Err(KernelViolation::Asymmetric { i, j, difference: diff }));
            }
            max_asym = max_asym.max(diff);
        }
    }
    if normalized {
        for i in 0..n {
            if (g[(i, i)] - 1.0).abs() > 1e-12 {
                return Ok(Err(KernelViolation::NonUnitDiagonal { i, value: g[(i, i)] }));
            }
        }
    }
    let trace = g.trace();
    let min_eig = g.symmetric_eigenvalues().min();
    let tolerance = 1e-8 * trace.abs().max(1.0) / n.max(1) as f64;
    if min_eig < -tolerance {
        return Ok(Err(KernelViolation::NotPositiveSemidefinite {
            min_eigenvalue: min_eig,
            tolerance,
        }));
    }
    Ok(Ok(AlgebraReport {
        n_items: n,
        max_asymmetry: max_asym,
        min_eigenvalue: min_eig,
    }))
}

/// Random series with the given source layout, long enough for `n_windows` anchors.
pub(crate) fn random_series<T: Real>(sources: &[SourceMeta], len: usize, rng: &mut impl Rng) -> Result<MultiSeries<T>> {
    let mut metas = sources.to_vec();
    let mut data = Vec::with_capacity(sources.len());
    for meta in &mut metas {
        match &mut meta.kind {
            SourceKind::Real { dim } => {
                let v = (0..len * *dim)
                    .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                data.push(SourceData::Real(v));
            }
            SourceKind::Symbol { alphabet } => {
                if alphabet.len() < 2 {
                    *alphabet = vec!["a".into(), "b".into(), "c".into()];
                }
                let k = alphabet.len() as u32;
                data.push(SourceData::Symbol((0..len).map(|_| rng.random_range(0..k)).collect()));
            }
        }
    }
    let valid = vec![vec![true; len]; sources.len()];
    MultiSeries::new(metas, vec![Block::new(data, valid)?])
}

/// Runtime self-test of a kernel configuration: on a random library of
/// `n_windows` anchors with the given source layout, the composed past and
/// future kernels must be symmetric, unit on the diagonal when normalized, and
/// yield positive semidefinite Gram matrices.
pub fn kernel_algebra_check(
    spec: &KernelSpec,
    sources: &[SourceMeta],
    lengths: &LibraryConfig,
    n_windows: usize,
    seed: u64,
) -> Result<std::result::Result<AlgebraReport, KernelViolation>> {
    let (past, future) = lengths.resolve(sources.len())?;
    let span = past.iter().max().unwrap_or(&1) + future.iter().max().unwrap_or(&1) - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = random_series::<f64>(sources, n_windows + span, &mut rng)?;
    let kernel = spec.resolve(&series)?;
    let library = build_library(&series, lengths)?;
    let normalized = spec.normalize
        || (spec.temporal_aggregation == Aggregation::Geometric && spec.source_aggregation == Aggregation::Geometric);
    let mut report: Option<AlgebraReport> = None;
    for side in [Side::Past, Side::Future] {
        let r = check_kernel_properties(library.len(), normalized, |i, j| {
            kernel.eval(&library.window(i, side), &library.window(j, side))
        })?;
        match r {
            Ok(r) => {
                report = Some(match report {
                    None => r,
                    Some(prev) => AlgebraReport {
                        n_items: r.n_items,
                        max_asymmetry: r.max_asymmetry.max(prev.max_asymmetry),
                        min_eigenvalue: r.min_eigenvalue.min(prev.min_eigenvalue),
                    },
                })
            }
            Err(v) => return Ok(Err(v)),
        }
    }
    Ok(Ok(report.expect("two sides checked")))
}
