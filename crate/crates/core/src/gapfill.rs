//! Gap filling in diffusion coordinates: a linear one-step transition
//! operator, forward/backward interpolation across missing states,
//! observation-constrained refinement, and the two-pass refill.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmap::{diffusion_operator, spectral_decompose, DiffusionConfig, DiffusionEmbedding};
use crate::embed::{congruence, StateGram};
use crate::error::{Error, Result};
use crate::pipeline::EmbeddingRun;
use crate::scalar::Real;
use crate::series::{MultiSeries, Sample};

fn default_epsilon() -> f64 {
    0.1
}

fn default_passes() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapfillConfig {
    /// Relative trust radius of the observation refinement.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// 2 runs the edge pass, a recompute, then the gap pass; 1 fills
    /// everything against the original embedding.
    #[serde(default = "default_passes")]
    pub max_passes: usize,
    /// Per-source weights of the refinement; the kernel source weights when
    /// absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl Default for GapfillConfig {
    fn default() -> Self {
        GapfillConfig {
            epsilon: default_epsilon(),
            max_passes: default_passes(),
            weights: None,
        }
    }
}

impl GapfillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(1..=2).contains(&self.max_passes) {
            return Err(Error::Config(format!(
                "max_passes must be 1 or 2, got {}",
                self.max_passes
            )));
        }
        if let Some(w) = &self.weights {
            if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return Err(Error::Config("gapfill weights must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

const TRANSITION_RIDGE: f64 = 1e-10;
const BACKWARD_CONDITION_LIMIT: f64 = 1e8;

/// One-step linear dynamics `ψ(t+1) ≈ Γ ψ(t)`.
#[derive(Clone, Debug)]
pub struct TransitionOperator<T: Real> {
    pub gamma: DMatrix<T>,
    pub n_pairs: usize,
    /// Root mean squared one-step prediction error over the fitted pairs.
    pub residual_rms: T,
    /// Root mean squared norm of the target coordinates.
    pub coordinate_rms: T,
    backward: Option<DMatrix<T>>,
}

impl<T: Real> TransitionOperator<T> {
    pub fn from_matrix(gamma: DMatrix<T>) -> Self {
        let backward = backward_map(&gamma);
        TransitionOperator {
            gamma,
            n_pairs: 0,
            residual_rms: T::zero(),
            coordinate_rms: T::zero(),
            backward,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn forward(&self, s: &DVector<T>) -> DVector<T> {
        &self.gamma * s
    }

    /// One backward step, or `None` when `Γ` is identically zero.
    pub fn backward(&self, s: &DVector<T>) -> Option<DVector<T>> {
        self.backward.as_ref().map(|b| b * s)
    }
}

/// `Γ⁻¹`, or a truncated-SVD pseudo-inverse when `Γ` is poorly conditioned.
fn backward_map<T: Real>(gamma: &DMatrix<T>) -> Option<DMatrix<T>> {
    let svd = gamma.clone().svd(true, true);
    let s_max = svd.singular_values.iter().fold(T::zero(), |m, &v| m.max(v));
    if !(s_max > T::zero()) {
        return None;
    }
    let s_min = svd.singular_values.iter().fold(s_max, |m, &v| m.min(v));
    let cutoff = if s_max / s_min > T::lit(BACKWARD_CONDITION_LIMIT) {
        log::warn!(
            "transition operator has condition number {:.3e}; backward steps use a truncated pseudo-inverse",
            (s_max / s_min).as_f64()
        );
        s_max / T::lit(BACKWARD_CONDITION_LIMIT)
    } else {
        T::zero()
    };
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut inv_s = DMatrix::zeros(vt.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > T::zero() {
            inv_s[(i, i)] = T::one() / s;
        }
    }
    Some(vt.transpose() * inv_s * u.transpose())
}

/// Least-squares `Γ` from state pairs `(i, j)` meaning state `j` follows
/// state `i` by one time step. `coords` holds one state per row.
pub fn fit_transition<T: Real>(coords: &DMatrix<T>, pairs: &[(usize, usize)]) -> Result<TransitionOperator<T>> {
    let m = coords.ncols();
    if m == 0 {
        return Err(Error::InsufficientData(
            "no diffusion coordinates to fit a transition operator".into(),
        ));
    }
    if pairs.len() < m {
        return Err(Error::InsufficientData(format!(
            "{} consecutive state pairs for a {m}-dimensional transition operator",
            pairs.len()
        )));
    }
    let mut sxx = DMatrix::<T>::identity(m, m) * T::lit(TRANSITION_RIDGE);
    let mut sxy = DMatrix::<T>::zeros(m, m);
    for &(i, j) in pairs {
        let x = coords.row(i).transpose();
        let y = coords.row(j).transpose();
        sxx += &x * x.transpose();
        sxy += &x * y.transpose();
    }
    let chol = sxx
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("transition normal equations are not positive definite".into()))?;
    let gamma = chol.solve(&sxy).transpose();
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned("non-finite transition operator".into()));
    }
    let (mut err, mut norm) = (T::zero(), T::zero());
    for &(i, j) in pairs {
        let x = coords.row(i).transpose();
        let y = coords.row(j).transpose();
        err += (&y - &gamma * x).norm_squared();
        norm += y.norm_squared();
    }
    let count = T::lit(pairs.len() as f64);
    let backward = backward_map(&gamma);
    Ok(TransitionOperator {
        gamma,
        n_pairs: pairs.len(),
        residual_rms: (err / count).sqrt(),
        coordinate_rms: (norm / count).sqrt(),
        backward,
    })
}

/// Affine map from diffusion coordinates to one real source.
#[derive(Clone, Debug)]
pub struct ObservationMap<T: Real> {
    /// `dim × M`.
    pub o: DMatrix<T>,
    pub intercept: DVector<T>,
    pub residual_rms: T,
    /// Coefficient of determination pooled over the source components.
    pub r_squared: T,
    pub n_samples: usize,
}

impl<T: Real> ObservationMap<T> {
    pub fn predict(&self, s: &DVector<T>) -> DVector<T> {
        &self.o * s + &self.intercept
    }
}

/// One map per source; symbol sources have none.
#[derive(Clone, Debug)]
pub struct ObservationMaps<T: Real> {
    pub maps: Vec<Option<ObservationMap<T>>>,
}

/// Fits `m_t ≈ O ψ(t) + b` for every real source over the states whose time
/// index holds a valid sample. `states[i] = (block, time)` locates row `i`.
pub fn fit_observation_maps<T: Real>(
    coords: &DMatrix<T>,
    states: &[(usize, usize)],
    series: &MultiSeries<T>,
) -> Result<ObservationMaps<T>> {
    let m = coords.ncols();
    let mut maps = Vec::with_capacity(series.n_sources());
    for (d, meta) in series.sources().iter().enumerate() {
        if !meta.kind.is_real() {
            maps.push(None);
            continue;
        }
        let dim = meta.kind.dim();
        let rows: Vec<usize> = (0..states.len())
            .filter(|&i| {
                let (k, t) = states[i];
                series.block(k).is_valid(d, t)
            })
            .collect();
        if rows.len() < m + 1 {
            return Err(Error::InsufficientData(format!(
                "source `{}` has {} valid samples at known states, {} are needed for an observation map",
                meta.name,
                rows.len(),
                m + 1
            )));
        }
        let x = DMatrix::from_fn(
            rows.len(),
            m + 1,
            |r, c| if c < m { coords[(rows[r], c)] } else { T::one() },
        );
        let y = DMatrix::from_fn(rows.len(), dim, |r, c| {
            let (k, t) = states[rows[r]];
            match series.block(k).sample(d, t) {
                Sample::Real(v) => v[c],
                Sample::Symbol(_) => unreachable!(),
            }
        });
        let coef = x
            .clone()
            .svd(true, true)
            .solve(&y, T::eps())
            .map_err(|e| Error::IllConditioned(format!("observation map of `{}`: {e}", meta.name)))?;
        let o = coef.rows(0, m).transpose();
        let intercept = coef.row(m).transpose();
        let resid = &y - &x * &coef;
        let ss_res = resid.norm_squared();
        let mean = y.row_mean();
        let ss_tot = y
            .row_iter()
            .map(|r| (r - &mean).norm_squared())
            .fold(T::zero(), |a, b| a + b);
        let r_squared = if ss_tot > T::zero() {
            T::one() - ss_res / ss_tot
        } else if ss_res <= T::eps() {
            T::one()
        } else {
            T::zero()
        };
        maps.push(Some(ObservationMap {
            o,
            intercept,
            residual_rms: (ss_res / T::lit((rows.len() * dim) as f64)).sqrt(),
            r_squared,
            n_samples: rows.len(),
        }));
    }
    Ok(ObservationMaps { maps })
}

/// A run of consecutive time indices without a state estimate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GapDescriptor {
    pub block: usize,
    /// First time index of the run.
    pub start: usize,
    /// Number of missing states `G ≥ 1`.
    pub len: usize,
    /// Sources with an invalid sample somewhere in the run.
    pub sources: Vec<usize>,
    /// State row just before the run, if the run does not touch the block start.
    pub before: Option<usize>,
    /// State row just after the run, if the run does not touch the block end.
    pub after: Option<usize>,
}

/// Blend of forward and backward predictions at offset `g` of a gap of
/// length `len`.
pub fn blend<T: Real>(g: usize, len: usize, forward: &DVector<T>, backward: &DVector<T>) -> DVector<T> {
    let w = T::lit(g as f64) / T::lit((len + 1) as f64);
    forward * (T::one() - w) + backward * w
}

/// Predicts states across a gap. The result has `len + 2` entries indexed by
/// the offset `g`: entry 0 and entry `len + 1` are the boundary positions,
/// entries `1..=len` the gap. `refine(g, ŝ)` adjusts each propagated state
/// before it feeds the next step. With one open side the prediction is the
/// single-direction pass from the known side.
pub fn interpolate_gap<T: Real>(
    len: usize,
    transition: &TransitionOperator<T>,
    before: Option<&DVector<T>>,
    after: Option<&DVector<T>>,
    mut refine: impl FnMut(usize, DVector<T>) -> DVector<T>,
) -> Result<Vec<DVector<T>>> {
    if len == 0 {
        return Err(Error::Config("gap length must be at least 1".into()));
    }
    let forward = before.map(|s0| {
        let mut out = Vec::with_capacity(len + 2);
        out.push(s0.clone());
        for g in 1..=len + 1 {
            let next = transition.forward(&out[g - 1]);
            out.push(if g <= len { refine(g, next) } else { next });
        }
        out
    });
    let backward = match after {
        Some(s_end) if transition.backward.is_some() => {
            let mut out = vec![DVector::zeros(0); len + 2];
            out[len + 1] = s_end.clone();
            for g in (0..=len).rev() {
                let prev = transition.backward(&out[g + 1]).unwrap();
                out[g] = if g >= 1 { refine(g, prev) } else { prev };
            }
            Some(out)
        }
        Some(_) => {
            log::warn!("transition operator is singular; using forward propagation only");
            None
        }
        None => None,
    };
    match (forward, backward) {
        (Some(f), Some(b)) => Ok((0..len + 2).map(|g| blend(g, len, &f[g], &b[g])).collect()),
        (Some(f), None) => Ok(f),
        (None, Some(b)) => Ok(b),
        (None, None) => Err(Error::InsufficientData(
            "gap has no usable boundary state on either side".into(),
        )),
    }
}

/// One weighted term `w ‖O s + b − m‖²` of the refinement objective.
#[derive(Clone, Debug)]
pub struct Observation<'a, T: Real> {
    pub map: &'a ObservationMap<T>,
    pub value: DVector<T>,
    pub weight: T,
}

/// Minimizes `Σ w ‖O s + b − m‖²` over the ball `‖s − ŝ‖ ≤ ε‖ŝ‖`.
pub fn constrain_to_observations<T: Real>(
    predicted: &DVector<T>,
    observations: &[Observation<'_, T>],
    epsilon: T,
) -> DVector<T> {
    let m = predicted.len();
    let radius = epsilon * predicted.norm();
    if observations.is_empty() || !(radius > T::zero()) {
        return predicted.clone();
    }
    let mut h = DMatrix::<T>::zeros(m, m);
    let mut grad = DVector::<T>::zeros(m);
    for obs in observations {
        let ot = obs.map.o.transpose();
        h += &ot * &obs.map.o * obs.weight;
        grad += &ot * (obs.map.predict(predicted) - &obs.value) * obs.weight;
    }
    trust_region_step(&h, &grad, radius).map_or_else(|| predicted.clone(), |p| predicted + p)
}

/// Minimizer of `pᵀHp + 2gᵀp` over `‖p‖ ≤ Δ` for symmetric positive
/// semidefinite `H`.
fn trust_region_step<T: Real>(h: &DMatrix<T>, g: &DVector<T>, radius: T) -> Option<DVector<T>> {
    let eig = SymmetricEigen::try_new(h.clone(), T::eps(), 0)?;
    let q = &eig.eigenvectors;
    let c = q.transpose() * g;
    let lam: Vec<T> = eig.eigenvalues.iter().map(|&l| l.max(T::zero())).collect();
    let lam_max = lam.iter().fold(T::zero(), |a, &b| a.max(b));
    let tol = lam_max * T::eps() * T::lit(lam.len() as f64 * 10.0);
    let step = |mu: T| -> DVector<T> {
        let coeffs = DVector::from_fn(lam.len(), |i, _| {
            let denom = lam[i] + mu;
            if denom > tol {
                -c[i] / denom
            } else {
                T::zero()
            }
        });
        q * coeffs
    };
    let free = step(T::zero());
    if free.norm() <= radius {
        return Some(free);
    }
    let mut lo = T::zero();
    let mut hi = g.norm() / radius;
    while step(hi).norm() > radius {
        hi *= T::lit(2.0);
    }
    for _ in 0..200 {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if step(mid).norm() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = step(hi);
    // land exactly on the sphere
    let norm = p.norm();
    Some(if norm > T::zero() { p * (radius / norm) } else { p })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StateOrigin {
    Library,
    EdgePass,
    GapPass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StateRecord {
    pub block: usize,
    pub time: usize,
    pub origin: StateOrigin,
}

pub struct RefillOutput<T: Real> {
    pub series: MultiSeries<T>,
    /// Row `i` of the final embedding belongs to `states[i]`.
    pub states: Vec<StateRecord>,
    pub embedding: DiffusionEmbedding<T>,
    pub state_gram: StateGram<T>,
    pub transition: TransitionOperator<T>,
    pub observations: ObservationMaps<T>,
    /// `(block, time, source)` of every written value.
    pub imputed: Vec<(usize, usize, usize)>,
    pub skipped_blocks: Vec<usize>,
}

impl<T: Real> RefillOutput<T> {
    pub fn coordinates(&self) -> DMatrix<T> {
        self.embedding.components()
    }
}

struct Stage<T: Real> {
    states: Vec<StateRecord>,
    alphas: DMatrix<T>,
    coords: DMatrix<T>,
    embedding: DiffusionEmbedding<T>,
    gram: StateGram<T>,
}

impl<T: Real> Stage<T> {
    fn locations(&self) -> Vec<(usize, usize)> {
        self.states.iter().map(|s| (s.block, s.time)).collect()
    }

    /// `known[k][t]` is the state row at time `t` of block `k`.
    fn known(&self, series: &MultiSeries<T>) -> Vec<Vec<Option<usize>>> {
        let mut known: Vec<Vec<Option<usize>>> = series.blocks().iter().map(|b| vec![None; b.len()]).collect();
        for (i, s) in self.states.iter().enumerate() {
            known[s.block][s.time] = Some(i);
        }
        known
    }

    fn consecutive_pairs(&self, known: &[Vec<Option<usize>>]) -> Vec<(usize, usize)> {
        known
            .iter()
            .flat_map(|row| row.windows(2).filter_map(|w| Some((w[0]?, w[1]?))))
            .collect()
    }

    /// Appends predicted states, lifting them into coefficient space through
    /// a least-squares map from `[ψ, 1]` to the embedding coefficients, and
    /// recomputes the diffusion embedding on the enlarged state Gram.
    fn extend(&mut self, new: Vec<(StateRecord, DVector<T>)>, gy: &DMatrix<T>, m: usize) -> Result<()> {
        if new.is_empty() {
            return Ok(());
        }
        let n_old = self.states.len();
        let design = DMatrix::from_fn(n_old, m + 1, |r, c| if c < m { self.coords[(r, c)] } else { T::one() });
        let lift = design
            .svd(true, true)
            .solve(&self.alphas.transpose(), T::eps())
            .map_err(|e| Error::IllConditioned(format!("state lift: {e}")))?
            .transpose();
        let n_lib = self.alphas.nrows();
        let mut alphas = DMatrix::zeros(n_lib, n_old + new.len());
        alphas.columns_mut(0, n_old).copy_from(&self.alphas);
        for (j, (record, s)) in new.into_iter().enumerate() {
            let mut aug = DVector::from_element(m + 1, T::one());
            aug.rows_mut(0, m).copy_from(&s);
            alphas.set_column(n_old + j, &(&lift * aug));
            self.states.push(record);
        }
        let gram = StateGram {
            gcs: congruence(&alphas, gy)?,
        };
        let op = diffusion_operator(&gram)?;
        let embedding = spectral_decompose(&op, &DiffusionConfig::fixed(m))?;
        self.coords = embedding.components();
        self.alphas = alphas;
        self.embedding = embedding;
        self.gram = gram;
        Ok(())
    }
}

struct Filler<'a, T: Real> {
    series: &'a MultiSeries<T>,
    transition: &'a TransitionOperator<T>,
    observations: &'a ObservationMaps<T>,
    weights: &'a [T],
    epsilon: T,
}

impl<T: Real> Filler<'_, T> {
    fn observed(&self, block: usize, t: usize) -> Vec<Observation<'_, T>> {
        let b = self.series.block(block);
        self.observations
            .maps
            .iter()
            .enumerate()
            .filter_map(|(d, map)| {
                let map = map.as_ref()?;
                if !b.is_valid(d, t) || !(self.weights[d] > T::zero()) {
                    return None;
                }
                let Sample::Real(v) = b.sample(d, t) else { return None };
                Some(Observation {
                    map,
                    value: DVector::from_column_slice(v),
                    weight: self.weights[d],
                })
            })
            .collect()
    }

    fn refine(&self, block: usize, t: usize, s: DVector<T>) -> DVector<T> {
        constrain_to_observations(&s, &self.observed(block, t), self.epsilon)
    }

    fn fill(&self, gap: &GapDescriptor, coords: &DMatrix<T>) -> Result<Vec<(usize, DVector<T>)>> {
        let before = gap.before.map(|i| coords.row(i).transpose());
        let after = gap.after.map(|i| coords.row(i).transpose());
        let path = interpolate_gap(gap.len, self.transition, before.as_ref(), after.as_ref(), |g, s| {
            self.refine(gap.block, gap.start + g - 1, s)
        })?;
        Ok((1..=gap.len)
            .map(|g| {
                let t = gap.start + g - 1;
                let s = if gap.before.is_some() && gap.after.is_some() {
                    self.refine(gap.block, t, path[g].clone())
                } else {
                    path[g].clone()
                };
                (t, s)
            })
            .collect())
    }
}

/// Maximal runs of unknown states in each block that contain a target time.
fn find_gaps<T: Real>(
    series: &MultiSeries<T>,
    known: &[Vec<Option<usize>>],
    skipped: &mut Vec<usize>,
) -> Vec<GapDescriptor> {
    let mut gaps = Vec::new();
    for (k, row) in known.iter().enumerate() {
        if row.iter().all(Option::is_none) {
            if !row.is_empty() && !skipped.contains(&k) {
                log::warn!("block {k} has no library anchors; its states cannot be filled");
                skipped.push(k);
            }
            continue;
        }
        let block = series.block(k);
        let mut t = 0;
        while t < row.len() {
            if row[t].is_some() {
                t += 1;
                continue;
            }
            let start = t;
            while t < row.len() && row[t].is_none() {
                t += 1;
            }
            let sources = (0..series.n_sources())
                .filter(|&d| (start..t).any(|u| !block.is_valid(d, u)))
                .collect();
            gaps.push(GapDescriptor {
                block: k,
                start,
                len: t - start,
                sources,
                before: start.checked_sub(1).and_then(|u| row[u]),
                after: row.get(t).copied().flatten(),
            });
        }
    }
    gaps
}

/// Fills states for every time index of every block that has library
/// anchors, and imputes invalid real samples from the filled states.
///
/// The first pass predicts states at indices whose samples are complete but
/// whose windows are not (block edges, neighbours of gaps); those states are
/// added to the state Gram and the diffusion map is recomputed. The second
/// pass predicts the remaining states, writes `O s + b` into the invalid
/// samples, and a final recompute produces the embedding over all states.
pub fn two_pass_refill<T: Real>(run: &EmbeddingRun<'_, T>, config: &GapfillConfig) -> Result<RefillOutput<T>> {
    config.validate()?;
    let original = run.library.series();
    let m = run.embedding.n_components;
    if m == 0 {
        return Err(Error::InsufficientData(
            "gap filling needs at least one diffusion component".into(),
        ));
    }
    let weights: Vec<T> = match &config.weights {
        Some(w) if w.len() == original.n_sources() => w.iter().map(|&x| T::lit(x)).collect(),
        Some(w) => {
            return Err(Error::Config(format!(
                "{} gapfill weights for {} sources",
                w.len(),
                original.n_sources()
            )))
        }
        None => run.kernel.weights.clone(),
    };
    let epsilon = T::lit(config.epsilon);
    let gy = &run.gram.gy;

    let mut stage = Stage {
        states: run
            .library
            .anchors()
            .iter()
            .map(|a| StateRecord {
                block: a.block,
                time: a.time,
                origin: StateOrigin::Library,
            })
            .collect(),
        alphas: run.coefficients.a.clone(),
        coords: run.embedding.components(),
        embedding: run.embedding.clone(),
        gram: run.state_gram.clone(),
    };
    let mut filled = original.clone();
    let mut imputed = Vec::new();
    let mut skipped = Vec::new();
    let mut transition = None;
    let mut observations = None;

    for pass in 0..config.max_passes {
        let last = pass + 1 == config.max_passes;
        let known = stage.known(original);
        let gaps = find_gaps(original, &known, &mut skipped);
        let fit_t = fit_transition(&stage.coords, &stage.consecutive_pairs(&known))?;
        let fit_o = fit_observation_maps(&stage.coords, &stage.locations(), original)?;
        let filler = Filler {
            series: original,
            transition: &fit_t,
            observations: &fit_o,
            weights: &weights,
            epsilon,
        };
        let results: Vec<Vec<(usize, DVector<T>)>> = gaps
            .par_iter()
            .map(|gap| filler.fill(gap, &stage.coords))
            .collect::<Result<_>>()?;

        let mut new = Vec::new();
        for (gap, predictions) in gaps.iter().zip(results) {
            let block = original.block(gap.block);
            for (t, s) in predictions {
                let complete = block.all_valid_at(t);
                if !last && !complete {
                    continue;
                }
                let origin = if complete {
                    StateOrigin::EdgePass
                } else {
                    StateOrigin::GapPass
                };
                if !complete {
                    for (d, map) in fit_o.maps.iter().enumerate() {
                        if let Some(map) = map {
                            if !block.is_valid(d, t) {
                                let value = map.predict(&s);
                                filled.block_mut(gap.block).impute_real(d, t, value.as_slice());
                                imputed.push((gap.block, t, d));
                            }
                        }
                    }
                }
                new.push((
                    StateRecord {
                        block: gap.block,
                        time: t,
                        origin,
                    },
                    s,
                ));
            }
        }
        stage.extend(new, gy, m)?;
        transition = Some(fit_t);
        observations = Some(fit_o);
    }
    imputed.sort_unstable();

    let mut order: Vec<usize> = (0..stage.states.len()).collect();
    order.sort_by_key(|&i| (stage.states[i].block, stage.states[i].time));
    let n = order.len();
    let Stage {
        states: unordered,
        mut embedding,
        gram,
        ..
    } = stage;
    let states = order.iter().map(|&i| unordered[i]).collect();
    embedding.psi = DMatrix::from_fn(n, embedding.psi.ncols(), |r, c| embedding.psi[(order[r], c)]);
    embedding.density = DVector::from_fn(n, |r, _| embedding.density[order[r]]);
    embedding.row_sums = DVector::from_fn(n, |r, _| embedding.row_sums[order[r]]);
    let gcs = DMatrix::from_fn(n, n, |r, c| gram.gcs[(order[r], order[c])]);

    Ok(RefillOutput {
        series: filled,
        states,
        embedding,
        state_gram: StateGram { gcs },
        transition: transition.unwrap(),
        observations: observations.unwrap(),
        imputed,
        skipped_blocks: skipped,
    })
}
