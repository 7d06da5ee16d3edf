//! Density-normalized diffusion operator on the state Gram matrix and its
//! spectral decomposition into causal diffusion components.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::embed::StateGram;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// How many nontrivial components to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComponentCount {
    Fixed(usize),
    Rule(SelectionRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionRule {
    /// Smallest M whose truncation residual is below the threshold.
    Auto,
    /// M just before the largest drop in eigenvalue magnitude.
    Gap,
}

fn default_components() -> ComponentCount {
    ComponentCount::Rule(SelectionRule::Auto)
}

fn default_threshold() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    #[serde(default = "default_components")]
    pub n_components: ComponentCount,
    #[serde(default = "default_threshold")]
    pub residual_threshold: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            n_components: default_components(),
            residual_threshold: default_threshold(),
        }
    }
}

impl DiffusionConfig {
    pub fn fixed(m: usize) -> Self {
        DiffusionConfig {
            n_components: ComponentCount::Fixed(m),
            ..Default::default()
        }
    }

    pub fn gap() -> Self {
        DiffusionConfig {
            n_components: ComponentCount::Rule(SelectionRule::Gap),
            ..Default::default()
        }
    }

    pub fn residual(threshold: f64) -> Self {
        DiffusionConfig {
            n_components: ComponentCount::Rule(SelectionRule::Auto),
            residual_threshold: threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.residual_threshold >= 0.0) {
            return Err(Error::Config(format!(
                "residual_threshold must be nonnegative, got {}",
                self.residual_threshold
            )));
        }
        if self.n_components == ComponentCount::Fixed(0) {
            return Err(Error::Config("n_components must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClampStats {
    pub n_clamped: usize,
    /// Largest magnitude of a negative entry set to zero.
    pub max_clamped: f64,
    /// `max_clamped` relative to the mean diagonal of the state Gram.
    pub relative: f64,
}

/// `P = R⁻¹ K̃` with `K̃ = Q⁻¹ G Q⁻¹`; `K̃` and `r` are kept for the symmetric
/// eigensolve.
#[derive(Clone, Debug)]
pub struct DiffusionOperator<T: Real> {
    pub p: DMatrix<T>,
    pub k_tilde: DMatrix<T>,
    pub row_sums: DVector<T>,
    pub clamp: ClampStats,
}

impl<T: Real> DiffusionOperator<T> {
    pub fn len(&self) -> usize {
        self.p.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.nrows() == 0
    }
}

pub fn diffusion_operator<T: Real>(gram: &StateGram<T>) -> Result<DiffusionOperator<T>> {
    let n = gram.len();
    if n == 0 || gram.gcs.ncols() != n {
        return Err(Error::Config("state Gram matrix must be square and nonempty".into()));
    }
    let mut g = gram.gcs.clone();
    let mut clamp = ClampStats::default();
    for v in g.iter_mut() {
        if *v < T::zero() {
            clamp.n_clamped += 1;
            clamp.max_clamped = clamp.max_clamped.max(-v.as_f64());
            *v = T::zero();
        }
    }
    let diag = (0..n).map(|i| g[(i, i)].as_f64()).sum::<f64>() / n as f64;
    if clamp.n_clamped > 0 {
        clamp.relative = if diag > 0.0 {
            clamp.max_clamped / diag
        } else {
            f64::INFINITY
        };
        log::debug!(
            "clamped {} negative state-Gram entries (largest {:.3e})",
            clamp.n_clamped,
            clamp.max_clamped
        );
        if clamp.relative > 1e-3 {
            log::warn!(
                "clamped negative state similarities up to {:.3e} of the diagonal scale; \
                 consider a larger regularization or different bandwidths",
                clamp.relative
            );
        }
    }

    let q: Vec<T> = g.row_iter().map(|r| r.sum()).collect();
    if let Some(anchor) = q.iter().position(|&s| !(s > T::zero())) {
        return Err(Error::IsolatedState { anchor });
    }
    let k_tilde = DMatrix::from_fn(n, n, |i, j| g[(i, j)] / (q[i] * q[j]));
    let row_sums = DVector::from_iterator(n, k_tilde.row_iter().map(|r| r.sum()));
    if let Some(anchor) = row_sums.iter().position(|&s| !(s > T::zero()) || !s.is_finite()) {
        return Err(Error::IsolatedState { anchor });
    }
    let p = DMatrix::from_fn(n, n, |i, j| k_tilde[(i, j)] / row_sums[i]);
    Ok(DiffusionOperator {
        p,
        k_tilde,
        row_sums,
        clamp,
    })
}

/// Full spectral decomposition of a diffusion operator plus the selected
/// number of retained components.
#[derive(Clone, Debug)]
pub struct DiffusionEmbedding<T: Real> {
    /// All N eigenvalues, by decreasing magnitude.
    pub eigenvalues: DVector<T>,
    /// Right eigenvectors; column 0 is the constant vector.
    pub psi: DMatrix<T>,
    /// Stationary density, summing to one.
    pub density: DVector<T>,
    pub row_sums: DVector<T>,
    pub n_components: usize,
    /// Index j such that the largest magnitude drop is between λ_{j−1} and λ_j.
    pub gap_index: Option<usize>,
    /// Mean truncation residual at `n_components`.
    pub residual: T,
    /// More than one eigenvalue equals one: the operator is reducible.
    pub degenerate: bool,
}

impl<T: Real> DiffusionEmbedding<T> {
    pub fn len(&self) -> usize {
        self.psi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.nrows() == 0
    }

    /// Retained components ψ_1..ψ_M as an N×M matrix.
    pub fn components(&self) -> DMatrix<T> {
        self.psi.columns(1, self.n_components).into_owned()
    }

    /// Left eigenvectors `φ_j = R ψ_j / Σr`, with `φ_0` the density.
    pub fn left_eigenvectors(&self) -> DMatrix<T> {
        let total = self.row_sums.sum();
        let mut phi = self.psi.clone();
        for (i, mut row) in phi.row_iter_mut().enumerate() {
            row *= self.row_sums[i] / total;
        }
        phi
    }

    /// Rebuilds `P = Σ_j λ_j ψ_j φ_jᵀ` from the full spectrum.
    pub fn reconstruct(&self) -> DMatrix<T> {
        let phi = self.left_eigenvectors();
        let mut scaled = self.psi.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.eigenvalues[j];
        }
        scaled * phi.transpose()
    }

    /// Changes the retained component count and refreshes the residual.
    pub fn set_components(&mut self, m: usize) -> Result<()> {
        let n = self.len();
        if m > n.saturating_sub(1) {
            return Err(Error::Config(format!("cannot retain {m} components from {n} states")));
        }
        self.n_components = m;
        self.residual = truncation_residuals(self)[m];
        Ok(())
    }
}

fn lexicographic<T: Real>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

pub fn spectral_decompose<T: Real>(
    op: &DiffusionOperator<T>,
    config: &DiffusionConfig,
) -> Result<DiffusionEmbedding<T>> {
    config.validate()?;
    let n = op.len();
    let sqrt_r: Vec<T> = op.row_sums.iter().map(|r| r.sqrt()).collect();
    let s = DMatrix::from_fn(n, n, |i, j| op.k_tilde[(i, j)] / (sqrt_r[i] * sqrt_r[j]));
    let s = (&s + s.transpose()) * T::lit(0.5);
    let eig = SymmetricEigen::try_new(s, T::eps(), 1000 * n.max(10))
        .ok_or_else(|| Error::Eigen(format!("symmetric eigensolve did not converge for N = {n}")))?;

    let mut vectors: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut v: Vec<T> = eig.eigenvectors.column(j).iter().copied().collect();
            let mut k = 0;
            for i in 1..n {
                if v[i].abs() > v[k].abs() {
                    k = i;
                }
            }
            if v[k] < T::zero() {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (la, lb) = (eig.eigenvalues[a], eig.eigenvalues[b]);
        lb.abs()
            .partial_cmp(&la.abs())
            .unwrap_or(Ordering::Equal)
            .then(lb.partial_cmp(&la).unwrap_or(Ordering::Equal))
            .then_with(|| lexicographic(&vectors[b], &vectors[a]))
    });

    let mut eigenvalues = DVector::from_iterator(n, order.iter().map(|&j| eig.eigenvalues[j]));
    let mut sorted: Vec<Vec<T>> = order.iter().map(|&j| std::mem::take(&mut vectors[j])).collect();

    let ones = eigenvalues.iter().filter(|&&l| l >= T::one() - T::lit(1e-10)).count();
    let degenerate = ones > 1;
    if degenerate {
        log::warn!(
            "{ones} eigenvalues equal one: the diffusion operator is reducible and its components are not meaningful"
        );
    }
    // the stationary pair is known exactly: S √r = √r with eigenvalue 1. It
    // replaces the solver vector of the unit cluster most aligned with it.
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    let norm = dot(&sqrt_r, &sqrt_r).sqrt();
    let u: Vec<T> = sqrt_r.iter().map(|&x| x / norm).collect();
    let cluster = ones.max(1);
    let aligned = (0..cluster)
        .max_by(|&a, &b| {
            dot(&sorted[a], &u)
                .abs()
                .partial_cmp(&dot(&sorted[b], &u).abs())
                .unwrap_or(Ordering::Equal)
        })
        .unwrap_or(0);
    sorted.remove(aligned);
    sorted.insert(0, u);
    for col in 1..n {
        let (done, rest) = sorted.split_at_mut(col);
        let v = &mut rest[0];
        for prev in done.iter().take(if col < cluster { col } else { 1 }) {
            let c = dot(v, prev);
            v.iter_mut().zip(prev).for_each(|(a, &b)| *a -= c * b);
        }
        let len = dot(v, v).sqrt();
        v.iter_mut().for_each(|a| *a /= len);
        let k = (0..n).fold(0, |k, i| if v[i].abs() > v[k].abs() { i } else { k });
        if v[k] < T::zero() {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    eigenvalues[0] = T::one();

    let total: T = op.row_sums.sum();
    let scale = total.sqrt();
    let mut psi = DMatrix::zeros(n, n);
    for (col, v) in sorted.iter().enumerate() {
        for i in 0..n {
            psi[(i, col)] = scale * v[i] / sqrt_r[i];
        }
    }
    psi.column_mut(0).fill(T::one());
    let density = op.row_sums.map(|r| r / total);

    let mut emb = DiffusionEmbedding {
        eigenvalues,
        psi,
        density,
        row_sums: op.row_sums.clone(),
        n_components: 0,
        gap_index: None,
        residual: T::zero(),
        degenerate,
    };
    let choice = select_components(&emb, config)?;
    emb.n_components = choice.m;
    emb.gap_index = choice.gap_index;
    emb.residual = choice.residual;
    Ok(emb)
}

/// Diffusion distance between states `i` and `l` using components 1..=m_used.
pub fn diffusion_distance<T: Real>(emb: &DiffusionEmbedding<T>, i: usize, l: usize, m_used: usize) -> Result<T> {
    let n = emb.len();
    if i >= n || l >= n {
        return Err(Error::Index(format!(
            "state index ({i}, {l}) out of range for {n} states"
        )));
    }
    if m_used > n.saturating_sub(1) {
        return Err(Error::Index(format!(
            "{m_used} components requested, only {} available",
            n.saturating_sub(1)
        )));
    }
    let mut d2 = T::zero();
    for j in 1..=m_used {
        let lam = emb.eigenvalues[j];
        let diff = emb.psi[(i, j)] - emb.psi[(l, j)];
        d2 += lam * lam * diff * diff;
    }
    Ok(d2.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentChoice<T> {
    pub m: usize,
    pub gap_index: Option<usize>,
    pub residual: T,
}

/// Mean over states of the distance between the full and the M-truncated
/// coordinates, for every M in 0..N.
pub fn truncation_residuals<T: Real>(emb: &DiffusionEmbedding<T>) -> Vec<T> {
    let n = emb.len();
    let mut tail = vec![T::zero(); n];
    let mut out = vec![T::zero(); n.max(1)];
    for m in (0..n.saturating_sub(1)).rev() {
        let j = m + 1;
        let lam2 = emb.eigenvalues[j] * emb.eigenvalues[j];
        let mut acc = T::zero();
        for (i, t) in tail.iter_mut().enumerate() {
            let v = emb.psi[(i, j)];
            *t += lam2 * v * v;
            acc += t.sqrt();
        }
        out[m] = acc / T::lit(n as f64);
    }
    out
}

/// Index of the largest drop in eigenvalue magnitude after the trivial
/// eigenvalue.
pub fn spectral_gap_index<T: Real>(eigenvalues: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for j in 1..eigenvalues.len().saturating_sub(1) {
        let drop = eigenvalues[j].abs() - eigenvalues[j + 1].abs();
        if best.is_none_or(|(_, d)| drop > d) {
            best = Some((j + 1, drop));
        }
    }
    best.map(|(k, _)| k)
}

pub fn select_components<T: Real>(emb: &DiffusionEmbedding<T>, config: &DiffusionConfig) -> Result<ComponentChoice<T>> {
    config.validate()?;
    let n = emb.len();
    let residuals = truncation_residuals(emb);
    let lambdas: Vec<T> = emb.eigenvalues.iter().copied().collect();
    let gap_index = spectral_gap_index(&lambdas);
    let max_m = n.saturating_sub(1);
    let m = match config.n_components {
        ComponentCount::Fixed(m) => {
            if m >= n {
                return Err(Error::Config(format!(
                    "n_components = {m} must be smaller than the number of states {n}"
                )));
            }
            m
        }
        ComponentCount::Rule(SelectionRule::Gap) => match gap_index {
            Some(k) => k - 1,
            None => max_m,
        },
        ComponentCount::Rule(SelectionRule::Auto) => {
            let threshold = T::lit(config.residual_threshold);
            match (1..max_m).find(|&m| residuals[m] <= threshold) {
                Some(m) => m,
                None => {
                    if max_m > 0 && residuals[max_m - 1] > threshold && config.residual_threshold > 0.0 {
                        log::warn!(
                            "residual threshold {} not reached before the full set; keeping all {} components",
                            config.residual_threshold,
                            max_m
                        );
                    }
                    max_m
                }
            }
        }
    };
    Ok(ComponentChoice {
        m,
        gap_index,
        residual: residuals[m],
    })
}

/// Diffusion embedding of a state Gram matrix in one call.
pub fn diffusion_embedding<T: Real>(
    gram: &StateGram<T>,
    config: &DiffusionConfig,
) -> Result<(DiffusionOperator<T>, DiffusionEmbedding<T>)> {
    let op = diffusion_operator(gram)?;
    let emb = spectral_decompose(&op, config)?;
    Ok((op, emb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gram(m: DMatrix<f64>) -> StateGram<f64> {
        StateGram { gcs: m }
    }

    fn random_positive(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
        &b * b.transpose()
    }

    fn embed(m: DMatrix<f64>, cfg: DiffusionConfig) -> (DiffusionOperator<f64>, DiffusionEmbedding<f64>) {
        diffusion_embedding(&gram(m), &cfg).unwrap()
    }

    fn two_clusters() -> DMatrix<f64> {
        DMatrix::from_fn(6, 6, |i, j| {
            if i == j {
                1.0
            } else if (i < 3) == (j < 3) {
                0.9
            } else {
                0.01
            }
        })
    }

    #[test]
    fn identity_operator() {
        let op = diffusion_operator(&gram(DMatrix::identity(3, 3))).unwrap();
        assert_eq!(op.p, DMatrix::identity(3, 3));
        let emb = spectral_decompose(&op, &DiffusionConfig::fixed(1)).unwrap();
        assert!(emb.degenerate);
        assert!(emb.eigenvalues.iter().all(|&l| (l - 1.0).abs() < 1e-12));
    }

    #[test]
    fn uniform_operator() {
        let (op, emb) = embed(DMatrix::from_element(3, 3, 1.0), DiffusionConfig::fixed(1));
        assert!((op.p.clone() - DMatrix::from_element(3, 3, 1.0 / 3.0)).amax() < 1e-15);
        assert!((emb.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!(emb.eigenvalues[1].abs() < 1e-12 && emb.eigenvalues[2].abs() < 1e-12);
        assert!(emb.density.iter().all(|&d| (d - 1.0 / 3.0).abs() < 1e-14));
        assert!(!emb.degenerate);
    }

    #[test]
    fn two_stage_normalization_oracle() {
        let g = random_positive(5, 1);
        let op = diffusion_operator(&gram(g.clone())).unwrap();
        let mut k = g.clone();
        for i in 0..5 {
            let qi: f64 = g.row(i).iter().sum();
            for j in 0..5 {
                let qj: f64 = g.row(j).iter().sum();
                k[(i, j)] = g[(i, j)] / (qi * qj);
            }
        }
        for i in 0..5 {
            let r: f64 = k.row(i).iter().sum();
            let row_sum: f64 = op.p.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-14);
            for j in 0..5 {
                assert!((op.p[(i, j)] - k[(i, j)] / r).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn isolated_state_is_named() {
        let mut g = DMatrix::<f64>::from_element(4, 4, 1.0);
        for j in 0..4 {
            g[(2, j)] = 0.0;
            g[(j, 2)] = 0.0;
        }
        match diffusion_operator(&gram(g)) {
            Err(Error::IsolatedState { anchor }) => assert_eq!(anchor, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negatives_are_clamped() {
        let mut g = random_positive(4, 2);
        g[(0, 1)] = -1e-14;
        g[(1, 0)] = -1e-14;
        let op = diffusion_operator(&gram(g)).unwrap();
        assert_eq!(op.clamp.n_clamped, 2);
        assert_eq!(op.clamp.max_clamped, 1e-14);
        assert!(op.p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn two_clusters_split_by_first_component() {
        let (op, emb) = embed(two_clusters(), DiffusionConfig::fixed(1));
        // dense nonsymmetric oracle
        let mut oracle: Vec<f64> = op.p.complex_eigenvalues().iter().map(|c| c.re).collect();
        oracle.sort_by(|a, b| b.abs().partial_cmp(&a.abs()).unwrap());
        assert!(emb.eigenvalues[1] > 0.9);
        assert!((emb.eigenvalues[1] - oracle[1]).abs() < 1e-10);
        let psi1 = emb.psi.column(1);
        assert!(psi1.iter().take(3).all(|&v| v * psi1[0] > 0.0));
        assert!(psi1.iter().skip(3).all(|&v| v * psi1[0] < 0.0));
    }

    #[test]
    fn distance_examples() {
        let emb: DiffusionEmbedding<f64> = DiffusionEmbedding {
            eigenvalues: DVector::from_vec(vec![1.0, 0.5]),
            psi: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]),
            density: DVector::from_vec(vec![0.5, 0.5]),
            row_sums: DVector::from_vec(vec![1.0, 1.0]),
            n_components: 1,
            gap_index: None,
            residual: 0.0,
            degenerate: false,
        };
        assert_eq!(diffusion_distance(&emb, 0, 0, 1).unwrap(), 0.0);
        assert!((diffusion_distance(&emb, 0, 1, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!(diffusion_distance(&emb, 0, 2, 1).is_err());
        assert!(diffusion_distance(&emb, 0, 1, 2).is_err());
    }

    #[test]
    fn gap_index_example() {
        assert_eq!(spectral_gap_index(&[1.0, 0.9, 0.89, 0.1]), Some(3));
        assert_eq!(spectral_gap_index(&[1.0, -0.9, 0.89, 0.1, 0.05]), Some(3));
        assert_eq!(spectral_gap_index(&[1.0, 0.5]), None);
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let (_, emb) = embed(random_positive(7, 3), DiffusionConfig::residual(0.0));
        assert_eq!(emb.n_components, 6);
        assert_eq!(emb.residual, 0.0);
    }

    #[test]
    fn explicit_count_must_be_below_n() {
        let op = diffusion_operator(&gram(random_positive(4, 4))).unwrap();
        assert!(matches!(
            spectral_decompose(&op, &DiffusionConfig::fixed(4)),
            Err(Error::Config(_))
        ));
        assert_eq!(
            spectral_decompose(&op, &DiffusionConfig::fixed(3))
                .unwrap()
                .n_components,
            3
        );
    }

    #[test]
    fn single_state() {
        let (op, emb) = embed(DMatrix::from_element(1, 1, 2.0), DiffusionConfig::default());
        assert_eq!(op.p[(0, 0)], 1.0);
        assert_eq!(emb.n_components, 0);
        assert_eq!(emb.components().ncols(), 0);
    }

    #[test]
    fn config_serde() {
        let c: DiffusionConfig = serde_json::from_str(r#"{"n_components": 3}"#).unwrap();
        assert_eq!(c.n_components, ComponentCount::Fixed(3));
        let c: DiffusionConfig = serde_json::from_str(r#"{"n_components": "gap"}"#).unwrap();
        assert_eq!(c.n_components, ComponentCount::Rule(SelectionRule::Gap));
        let c: DiffusionConfig =
            serde_json::from_str(r#"{"n_components": "auto", "residual_threshold": 0.2}"#).unwrap();
        assert_eq!(c, DiffusionConfig::residual(0.2));
    }

    #[test]
    fn repeated_runs_are_identical() {
        let g = random_positive(8, 9);
        let (_, a) = embed(g.clone(), DiffusionConfig::gap());
        let (_, b) = embed(g, DiffusionConfig::gap());
        assert_eq!(a.psi, b.psi);
        assert_eq!(a.eigenvalues, b.eigenvalues);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn operator_and_spectrum_invariants(seed in 0u64..100_000, n in 2usize..9) {
            let (op, emb) = embed(random_positive(n, seed), DiffusionConfig::fixed(n - 1));
            for i in 0..n {
                let s: f64 = op.p.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            prop_assert!(op.p.iter().all(|&v| v >= 0.0));
            prop_assert!((emb.eigenvalues[0] - 1.0).abs() < 1e-10);
            prop_assert!(emb.psi.column(0).iter().all(|&v| (v - 1.0).abs() < 1e-8));
            prop_assert!(emb.density.iter().all(|&v| v >= 0.0));
            prop_assert!((emb.density.sum() - 1.0).abs() < 1e-10);
            for j in 0..n {
                let v = emb.psi.column(j);
                let r = &op.p * v - v * emb.eigenvalues[j];
                prop_assert!(r.amax() <= 1e-8 * v.amax());
            }
            prop_assert!((emb.reconstruct() - &op.p).amax() < 1e-6);
            let mut oracle: Vec<f64> = op.p.complex_eigenvalues().iter().map(|c| c.re).collect();
            oracle.sort_by(|a, b| b.abs().partial_cmp(&a.abs()).unwrap().then(b.partial_cmp(a).unwrap()));
            for j in 0..n {
                prop_assert!((emb.eigenvalues[j] - oracle[j]).abs() < 1e-8);
            }
            for i in 0..n {
                for l in 0..n {
                    let d = diffusion_distance(&emb, i, l, n - 1).unwrap();
                    prop_assert!(d == diffusion_distance(&emb, l, i, n - 1).unwrap());
                    if n > 2 {
                        prop_assert!(d >= diffusion_distance(&emb, i, l, n - 2).unwrap());
                    }
                }
            }
            let res = truncation_residuals(&emb);
            for m in 1..res.len() {
                prop_assert!(res[m] <= res[m - 1] + 1e-15);
            }
        }
    }
}
