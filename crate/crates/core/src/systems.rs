//! Built-in generators and transforms for the example systems: the simple
//! and damped pendulum, a three-well Langevin surrogate for conformational
//! dynamics, molecular local frames, and solar-cycle phase.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{fmt_float, Block, MultiSeries, SourceData, SourceMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumConfig {
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
    pub drag: f64,
    pub theta0: f64,
    pub omega0: f64,
    /// Sampling interval of the output.
    pub dt: f64,
    pub n_steps: usize,
    /// Integrator steps per output sample.
    pub substeps: usize,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        PendulumConfig {
            gravity: 9.81,
            length: 1.0,
            mass: 1.0,
            drag: 0.0,
            theta0: 1.0,
            omega0: 0.0,
            dt: 0.1,
            n_steps: 2000,
            substeps: 10,
        }
    }
}

impl PendulumConfig {
    /// The damped example: `m = 1`, `b = 0.1`, released at rest from `−π/2`.
    pub fn damped() -> Self {
        PendulumConfig {
            drag: 0.1,
            theta0: -PI / 2.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length),
            ("mass", self.mass),
            ("dt", self.dt),
            ("gravity", self.gravity),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("pendulum {name} must be positive, got {v}")));
            }
        }
        if !(self.drag >= 0.0) {
            return Err(Error::Config(format!(
                "pendulum drag must be nonnegative, got {}",
                self.drag
            )));
        }
        if self.substeps == 0 || self.n_steps == 0 {
            return Err(Error::Config("pendulum n_steps and substeps must be positive".into()));
        }
        Ok(())
    }

    pub fn energy(&self, theta: f64, omega: f64) -> f64 {
        0.5 * self.mass * self.length * self.length * omega * omega
            + self.mass * self.gravity * self.length * (1.0 - theta.cos())
    }

    /// Energy of the unstable upright equilibrium.
    pub fn separatrix_energy(&self) -> f64 {
        2.0 * self.mass * self.gravity * self.length
    }

    /// Small-angle angular frequency `√(g/L)`.
    pub fn natural_frequency(&self) -> f64 {
        (self.gravity / self.length).sqrt()
    }

    fn accel(&self, theta: f64, omega: f64) -> f64 {
        -self.drag / self.mass * omega - self.gravity / self.length * theta.sin()
    }

    /// One classic fourth-order Runge–Kutta step.
    pub fn rk4_step(&self, theta: f64, omega: f64, h: f64) -> (f64, f64) {
        let (k1t, k1w) = (omega, self.accel(theta, omega));
        let (k2t, k2w) = (
            omega + 0.5 * h * k1w,
            self.accel(theta + 0.5 * h * k1t, omega + 0.5 * h * k1w),
        );
        let (k3t, k3w) = (
            omega + 0.5 * h * k2w,
            self.accel(theta + 0.5 * h * k2t, omega + 0.5 * h * k2w),
        );
        let (k4t, k4w) = (omega + h * k3w, self.accel(theta + h * k3t, omega + h * k3w));
        (
            theta + h / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t),
            omega + h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w),
        )
    }
}

#[derive(Clone, Debug)]
pub struct PendulumTrajectory {
    pub config: PendulumConfig,
    /// Unwrapped angle.
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    /// Mean period (oscillation or rotation) in time units, or the average
    /// quasi-period of a damped run.
    pub period: Option<f64>,
}

impl PendulumTrajectory {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn energy(&self) -> Vec<f64> {
        self.theta
            .iter()
            .zip(&self.omega)
            .map(|(&t, &w)| self.config.energy(t, w))
            .collect()
    }

    /// The period in samples, rounded.
    pub fn period_samples(&self) -> Option<usize> {
        self.period.map(|p| (p / self.config.dt).round().max(1.0) as usize)
    }

    pub fn rotating(&self) -> bool {
        self.config.energy(self.theta[0], self.omega[0]) > self.config.separatrix_energy()
    }

    /// Phase label of each sample on the closed orbit: the polar angle in the
    /// `(θ, θ̇/ω₀)` plane below the separatrix, `θ mod 2π` above it.
    pub fn phase(&self) -> Vec<f64> {
        let w0 = self.config.natural_frequency();
        if self.rotating() {
            self.theta.iter().map(|t| t.rem_euclid(TAU)).collect()
        } else {
            self.theta
                .iter()
                .zip(&self.omega)
                .map(|(&t, &w)| (w / w0).atan2(t).rem_euclid(TAU))
                .collect()
        }
    }

    /// Generalized coordinates `q1, q2` as a one-block series.
    pub fn to_series(&self) -> Result<MultiSeries<f64>> {
        MultiSeries::from_scalar_columns(&["q1", "q2"], vec![self.q1.clone(), self.q2.clone()])
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let time: Vec<String> = (0..self.len()).map(|i| fmt_float(i as f64 * self.config.dt)).collect();
        write_columns(path, &["time", "q1", "q2"], &[time, floats(&self.q1), floats(&self.q2)])
    }
}

fn mean_spacing(times: &[f64]) -> Option<f64> {
    (times.len() >= 2).then(|| (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64)
}

/// Times at which `f` crosses `level` upward, linearly interpolated.
fn upward_crossings(f: &[f64], dt: f64, level: impl Fn(f64) -> Option<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 1..f.len() {
        if let Some(c) = level(f[i - 1]) {
            if f[i - 1] < c && f[i] >= c {
                out.push(dt * ((i - 1) as f64 + (c - f[i - 1]) / (f[i] - f[i - 1])));
            }
        }
    }
    out
}

pub fn simulate_pendulum(config: &PendulumConfig) -> Result<PendulumTrajectory> {
    config.validate()?;
    let n = config.n_steps;
    let h = config.dt / config.substeps as f64;
    let (mut theta, mut omega) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut t, mut w) = (config.theta0, config.omega0);
    for _ in 0..n {
        theta.push(t);
        omega.push(w);
        for _ in 0..config.substeps {
            (t, w) = config.rk4_step(t, w, h);
        }
    }
    let rotating = config.energy(config.theta0, config.omega0) > config.separatrix_energy();
    let crossings = if rotating {
        let sign = if omega[0] >= 0.0 { 1.0 } else { -1.0 };
        let directed: Vec<f64> = theta.iter().map(|x| sign * x).collect();
        upward_crossings(&directed, config.dt, |x| Some(TAU * (x / TAU).floor() + TAU))
    } else {
        upward_crossings(&theta, config.dt, |_| Some(0.0))
    };
    let period = mean_spacing(&crossings);
    let q1 = theta.iter().map(|t| config.length * t.sin()).collect();
    let q2 = theta.iter().map(|t| config.length * (1.0 - t.cos())).collect();
    Ok(PendulumTrajectory {
        config: config.clone(),
        theta,
        omega,
        q1,
        q2,
        period,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThreeWellConfig {
    /// Angle of the first well; the others follow at 2π/3 spacing.
    pub offset: f64,
    /// Barrier height `h` of `V(φ) = (h/2)(1 − cos 3(φ − offset))`.
    pub barrier: f64,
    pub temperature: f64,
    pub dt: f64,
    /// Integrator steps per output sample.
    pub substeps: usize,
    pub n_steps: usize,
    pub start_well: usize,
    pub seed: u64,
}

impl Default for ThreeWellConfig {
    fn default() -> Self {
        ThreeWellConfig {
            offset: 0.0,
            barrier: 4.0,
            temperature: 1.0,
            dt: 0.01,
            substeps: 20,
            n_steps: 1500,
            start_well: 0,
            seed: 7,
        }
    }
}

impl ThreeWellConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!(
                "three-well dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "three-well temperature must be nonnegative, got {}",
                self.temperature
            )));
        }
        if !(self.barrier >= 0.0) || self.substeps == 0 || self.n_steps == 0 || self.start_well > 2 {
            return Err(Error::Config(
                "three-well barrier must be nonnegative, substeps and n_steps positive, start_well in 0..3".into(),
            ));
        }
        Ok(())
    }

    pub fn well_center(&self, k: usize) -> f64 {
        self.offset + TAU * k as f64 / 3.0
    }

    pub fn potential(&self, phi: f64) -> f64 {
        0.5 * self.barrier * (1.0 - (3.0 * (phi - self.offset)).cos())
    }

    fn force(&self, phi: f64) -> f64 {
        -1.5 * self.barrier * (3.0 * (phi - self.offset)).sin()
    }

    /// Index of the well nearest to `phi`.
    pub fn well_of(&self, phi: f64) -> usize {
        ((3.0 * (phi - self.offset) / TAU).round() as i64).rem_euclid(3) as usize
    }
}

#[derive(Clone, Debug)]
pub struct ThreeWellTrajectory {
    pub config: ThreeWellConfig,
    /// Unwrapped angle.
    pub phi: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ThreeWellTrajectory {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    /// The angle as a `(cos φ, sin φ)` source named `x`.
    pub fn to_series(&self) -> Result<MultiSeries<f64>> {
        let values = self.phi.iter().flat_map(|p| [p.cos(), p.sin()]).collect();
        let block = Block::new(vec![SourceData::Real(values)], vec![vec![true; self.len()]])?;
        MultiSeries::new(vec![SourceMeta::real("x", 2)], vec![block])
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let dt = self.config.dt * self.config.substeps as f64;
        let time = (0..self.len()).map(|i| fmt_float(i as f64 * dt)).collect();
        let cos = self.phi.iter().map(|p| fmt_float(p.cos())).collect();
        let sin = self.phi.iter().map(|p| fmt_float(p.sin())).collect();
        let labels = self.labels.iter().map(|l| l.to_string()).collect();
        write_columns(path, &["time", "x.0", "x.1", "label"], &[time, cos, sin, labels])
    }

    /// Lengths of the maximal runs of constant label.
    pub fn dwell_times(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut run = 0;
        for (i, l) in self.labels.iter().enumerate() {
            if i > 0 && *l != self.labels[i - 1] {
                out.push(run);
                run = 0;
            }
            run += 1;
        }
        if run > 0 {
            out.push(run);
        }
        out
    }
}

/// Overdamped Langevin dynamics `dφ = −V′(φ) dt + √(2T dt) ξ` by
/// Euler–Maruyama.
pub fn simulate_three_well(config: &ThreeWellConfig) -> Result<ThreeWellTrajectory> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = (2.0 * config.temperature * config.dt).sqrt();
    let mut phi = config.well_center(config.start_well);
    let mut path = Vec::with_capacity(config.n_steps);
    for _ in 0..config.n_steps {
        path.push(phi);
        for _ in 0..config.substeps {
            let xi: f64 = StandardNormal.sample(&mut rng);
            phi += config.force(phi) * config.dt + noise * xi;
        }
    }
    let labels = path.iter().map(|&p| config.well_of(p)).collect();
    Ok(ThreeWellTrajectory {
        config: config.clone(),
        phi: path,
        labels,
    })
}

/// Atoms defining a local frame: `e1` along `a → b`, `e2` along
/// `e1 × (d − c)`, `e3 = e1 × e2`, origin at `a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BondSpec {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
}

/// Orthonormal basis (columns) of one frame.
pub fn local_basis(atoms: &[Vector3<f64>], bonds: &BondSpec, frame: usize) -> Result<Matrix3<f64>> {
    let n = atoms.len();
    for i in [bonds.a, bonds.b, bonds.c, bonds.d] {
        if i >= n {
            return Err(Error::Index(format!("bond atom {i} out of range for {n} atoms")));
        }
    }
    let first = atoms[bonds.b] - atoms[bonds.a];
    let second = atoms[bonds.d] - atoms[bonds.c];
    let scale = first.norm() * second.norm();
    let cross = first.cross(&second);
    if !(first.norm() > 0.0) || !(cross.norm() > 1e-12 * scale) {
        return Err(Error::DegenerateFrame { frame });
    }
    let e1 = first.normalize();
    let e2 = e1.cross(&second).normalize();
    let e3 = e1.cross(&e2);
    Ok(Matrix3::from_columns(&[e1, e2, e3]))
}

/// Expresses every atom of every frame in the frame's local basis.
pub fn local_frame_transform(frames: &[Vec<Vector3<f64>>], bonds: &BondSpec) -> Result<Vec<Vec<Vector3<f64>>>> {
    frames
        .iter()
        .enumerate()
        .map(|(f, atoms)| {
            let basis = local_basis(atoms, bonds, f)?;
            let origin = atoms[bonds.a];
            Ok(atoms.iter().map(|x| basis.transpose() * (x - origin)).collect())
        })
        .collect()
}

/// Centered moving average; windows are truncated at the ends.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CyclePhase {
    /// Phase in `[0, 1)` per sample.
    pub phase: Vec<f64>,
    pub minima: Vec<usize>,
    pub maxima: Vec<usize>,
    pub smoothed: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Extremum {
    Min(usize),
    Max(usize),
}

impl Extremum {
    fn index(self) -> usize {
        match self {
            Extremum::Min(i) | Extremum::Max(i) => i,
        }
    }

    fn phase(self) -> f64 {
        match self {
            Extremum::Min(_) => 0.0,
            Extremum::Max(_) => 0.5,
        }
    }
}

/// Alternating minima and maxima of the smoothed series. A sample is an
/// extremum when it is the strict extreme of the full window around it.
fn extrema(s: &[f64], window: usize) -> Vec<Extremum> {
    let half = (window / 2).max(1);
    let mut found: Vec<Extremum> = Vec::new();
    if s.len() < 2 * half + 1 {
        return found;
    }
    for i in half..s.len() - half {
        let around = (i - half..=i + half).filter(|&j| j != i);
        let cand = if around.clone().all(|j| s[j] > s[i]) {
            Extremum::Min(i)
        } else if around.clone().all(|j| s[j] < s[i]) {
            Extremum::Max(i)
        } else {
            continue;
        };
        match (found.last().copied(), cand) {
            (Some(Extremum::Min(p)), Extremum::Min(i)) => {
                if s[i] < s[p] {
                    *found.last_mut().unwrap() = cand;
                }
            }
            (Some(Extremum::Max(p)), Extremum::Max(i)) => {
                if s[i] > s[p] {
                    *found.last_mut().unwrap() = cand;
                }
            }
            _ => found.push(cand),
        }
    }
    found
}

/// Cycle phase by linear interpolation between minima (phase 0) and maxima
/// (phase 0.5) of the moving-average-smoothed series; samples outside the
/// first and last extremum extrapolate with the neighbouring half cycle.
pub fn cycle_phase(series: &[f64], window: usize) -> Result<CyclePhase> {
    if window == 0 {
        return Err(Error::Config("smoothing window must be positive".into()));
    }
    let smoothed = moving_average(series, window);
    let ext = extrema(&smoothed, window);
    if ext.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "found {} extrema after smoothing, at least 2 are needed",
            ext.len()
        )));
    }
    let mut phase = vec![0.0; series.len()];
    let segment = |a: Extremum, b: Extremum, t: f64| -> f64 {
        let (ia, ib) = (a.index() as f64, b.index() as f64);
        a.phase() + 0.5 * (t - ia) / (ib - ia)
    };
    for (t, p) in phase.iter_mut().enumerate() {
        let k = ext.partition_point(|e| e.index() <= t);
        let (a, b) = match k {
            0 => (ext[0], ext[1]),
            k if k >= ext.len() => (ext[ext.len() - 2], ext[ext.len() - 1]),
            k => (ext[k - 1], ext[k]),
        };
        *p = segment(a, b, t as f64).rem_euclid(1.0);
    }
    let minima = ext
        .iter()
        .filter(|e| matches!(e, Extremum::Min(_)))
        .map(|e| e.index())
        .collect();
    let maxima = ext
        .iter()
        .filter(|e| matches!(e, Extremum::Max(_)))
        .map(|e| e.index())
        .collect();
    Ok(CyclePhase {
        phase,
        minima,
        maxima,
        smoothed,
    })
}

/// Mean peak-to-trough height between consecutive extrema of the smoothed
/// series.
pub fn mean_cycle_amplitude(series: &[f64], window: usize) -> Result<f64> {
    let cp = cycle_phase(series, window)?;
    let ext = extrema(&cp.smoothed, window);
    let diffs: Vec<f64> = ext
        .windows(2)
        .map(|w| (cp.smoothed[w[1].index()] - cp.smoothed[w[0].index()]).abs())
        .collect();
    Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
}

fn floats(x: &[f64]) -> Vec<String> {
    x.iter().map(|&v| fmt_float(v)).collect()
}

fn write_columns(path: impl AsRef<Path>, headers: &[&str], columns: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(headers)?;
    let n = columns.first().map_or(0, Vec::len);
    for i in 0..n {
        w.write_record(columns.iter().map(|c| c[i].as_str()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    #[test]
    fn small_angle_period() {
        let cfg = PendulumConfig {
            theta0: 0.01,
            dt: 0.01,
            n_steps: 3000,
            substeps: 1,
            ..Default::default()
        };
        let traj = simulate_pendulum(&cfg).unwrap();
        let harmonic = TAU * (cfg.length / cfg.gravity).sqrt();
        assert!((traj.period.unwrap() - harmonic).abs() < 0.01 * harmonic);
    }

    #[test]
    fn conservative_energy_drift() {
        let cfg = PendulumConfig {
            theta0: 2.0,
            dt: 0.005,
            n_steps: 100_000,
            substeps: 1,
            ..Default::default()
        };
        let traj = simulate_pendulum(&cfg).unwrap();
        let e = traj.energy();
        let drift = e.iter().map(|x| (x - e[0]).abs()).fold(0.0, f64::max) / e[0];
        assert!(drift <= 1e-6, "drift {drift}");
    }

    #[test]
    fn damped_energy_decays() {
        let cfg = PendulumConfig {
            n_steps: 600,
            ..PendulumConfig::damped()
        };
        let traj = simulate_pendulum(&cfg).unwrap();
        let e = traj.energy();
        assert!(e.windows(2).all(|w| w[1] < w[0]));
        // successive swing amplitudes shrink
        let peaks: Vec<f64> = (1..traj.len() - 1)
            .filter(|&i| {
                traj.theta[i].abs() > traj.theta[i - 1].abs() && traj.theta[i].abs() >= traj.theta[i + 1].abs()
            })
            .map(|i| traj.theta[i].abs())
            .collect();
        assert!(peaks.len() > 5);
        assert!(peaks.windows(2).all(|w| w[1] < w[0]));
        assert!(traj.period.is_some());
    }

    #[test]
    fn rk4_is_fourth_order() {
        let base = PendulumConfig {
            theta0: 1.0,
            substeps: 1,
            ..Default::default()
        };
        let period = 2.0;
        let state = |dt: f64| {
            let mut cfg = base.clone();
            cfg.dt = dt;
            let steps = (period / dt).round() as usize;
            let (mut t, mut w) = (cfg.theta0, cfg.omega0);
            for _ in 0..steps {
                (t, w) = cfg.rk4_step(t, w, dt);
            }
            (t, w)
        };
        let reference = state(1e-4);
        let err = |dt: f64| {
            let (t, w) = state(dt);
            ((t - reference.0).powi(2) + (w - reference.1).powi(2)).sqrt()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio / 16.0 - 1.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn separatrix_classification() {
        for (omega0, rotating) in [(5.0, false), (7.0, true)] {
            let cfg = PendulumConfig {
                theta0: 0.0,
                omega0,
                dt: 0.02,
                n_steps: 2000,
                substeps: 4,
                ..Default::default()
            };
            let traj = simulate_pendulum(&cfg).unwrap();
            assert_eq!(traj.rotating(), rotating);
            if rotating {
                assert!(traj.theta.windows(2).all(|w| w[1] > w[0]));
            } else {
                assert!(traj.theta.iter().all(|t| t.abs() < PI));
            }
            assert!(traj.period.is_some());
            let phase = traj.phase();
            assert!(phase.iter().all(|p| (0.0..TAU).contains(p)));
        }
    }

    #[test]
    fn pendulum_config_rejects_bad_values() {
        let cfg = PendulumConfig {
            length: 0.0,
            ..Default::default()
        };
        assert!(simulate_pendulum(&cfg).is_err());
    }

    #[test]
    fn zero_temperature_stays_in_well() {
        let cfg = ThreeWellConfig {
            temperature: 0.0,
            start_well: 1,
            ..Default::default()
        };
        let traj = simulate_three_well(&cfg).unwrap();
        assert!(traj.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn three_well_is_seeded() {
        let cfg = ThreeWellConfig::default();
        assert_eq!(
            simulate_three_well(&cfg).unwrap().phi,
            simulate_three_well(&cfg).unwrap().phi
        );
    }

    #[test]
    fn symmetric_wells_are_equally_occupied() {
        let cfg = ThreeWellConfig {
            barrier: 1.0,
            temperature: 0.5,
            substeps: 5,
            n_steps: 200_000,
            seed: 3,
            ..Default::default()
        };
        let traj = simulate_three_well(&cfg).unwrap();
        let mut counts = [0usize; 3];
        for &l in &traj.labels {
            counts[l] += 1;
        }
        let mean = traj.len() as f64 / 3.0;
        for c in counts {
            assert!((c as f64 - mean).abs() < 0.1 * mean, "{counts:?}");
        }
    }

    #[test]
    fn high_barrier_separates_timescales() {
        let traj = simulate_three_well(&ThreeWellConfig {
            temperature: 0.5,
            substeps: 5,
            n_steps: 20_000,
            ..Default::default()
        })
        .unwrap();
        let dwell = traj.dwell_times();
        let mean_dwell = dwell.iter().sum::<usize>() as f64 / dwell.len() as f64;
        // autocorrelation time of the in-well fluctuation
        let centred: Vec<f64> = traj
            .phi
            .iter()
            .zip(&traj.labels)
            .map(|(p, &l)| {
                let c = traj.config.well_center(l);
                (p - c + PI).rem_euclid(TAU) - PI
            })
            .collect();
        let var = centred.iter().map(|x| x * x).sum::<f64>() / centred.len() as f64;
        let lag = (1..100)
            .find(|&k| {
                let c: f64 = centred.windows(k + 1).map(|w| w[0] * w[k]).sum::<f64>() / (centred.len() - k) as f64;
                c < var / std::f64::consts::E
            })
            .unwrap();
        assert!(dwell.len() > 3);
        assert!(mean_dwell > 10.0 * lag as f64, "dwell {mean_dwell}, correlation {lag}");
    }

    fn conformation() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.5, 0.0, 0.0),
            Vector3::new(-0.5, 1.4, 0.1),
            Vector3::new(2.0, -0.3, 1.4),
            Vector3::new(0.3, 0.7, -0.9),
        ]
    }

    const BONDS: BondSpec = BondSpec { a: 0, b: 1, c: 2, d: 0 };

    #[test]
    fn axis_aligned_frame_is_identity() {
        let atoms = vec![
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(2.0, 2.0, 3.0),
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(1.0, 2.0, 2.0),
            Vector3::new(4.0, 5.0, 6.0),
        ];
        let bonds = BondSpec { a: 0, b: 1, c: 2, d: 3 };
        let basis = local_basis(&atoms, &bonds, 0).unwrap();
        assert!((basis - Matrix3::identity()).amax() < 1e-15);
        let out = local_frame_transform(std::slice::from_ref(&atoms), &bonds).unwrap();
        for (x, y) in atoms.iter().zip(&out[0]) {
            assert!((x - atoms[0] - y).amax() < 1e-15);
        }
    }

    #[test]
    fn collinear_bonds_are_reported() {
        let mut atoms = conformation();
        atoms[2] = Vector3::new(-3.0, 0.0, 0.0);
        let frames = vec![conformation(), atoms];
        match local_frame_transform(&frames, &BONDS) {
            Err(Error::DegenerateFrame { frame }) => assert_eq!(frame, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rigid_motion_invariance(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = conformation();
            let reference = local_frame_transform(std::slice::from_ref(&base), &BONDS).unwrap().remove(0);
            let frames: Vec<Vec<Vector3<f64>>> = (0..5).map(|_| {
                let axis = Unit::new_normalize(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)));
                let rot = Rotation3::from_axis_angle(&axis, rng.random_range(0.0..TAU));
                let shift = Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0));
                base.iter().map(|x| rot * x + shift).collect()
            }).collect();
            for (f, frame) in local_frame_transform(&frames, &BONDS).unwrap().iter().enumerate() {
                let basis = local_basis(&frames[f], &BONDS, f).unwrap();
                prop_assert!((basis.transpose() * basis - Matrix3::identity()).amax() < 1e-12);
                prop_assert!((basis.determinant() - 1.0).abs() < 1e-12);
                for (x, y) in frame.iter().zip(&reference) {
                    prop_assert!((x - y).amax() < 1e-10);
                }
            }
        }
    }

    fn sine(n: usize, period: f64) -> Vec<f64> {
        (0..n).map(|t| (TAU * t as f64 / period).sin()).collect()
    }

    fn true_phase(t: usize, period: f64) -> f64 {
        (t as f64 / period - 0.75).rem_euclid(1.0)
    }

    fn circular_error(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(1.0);
        d.min(1.0 - d)
    }

    #[test]
    fn sinusoid_phase_ramps() {
        let period = 100.0;
        let cp = cycle_phase(&sine(1000, period), 11).unwrap();
        for &m in &cp.minima {
            assert_eq!(cp.phase[m], 0.0);
        }
        for &m in &cp.maxima {
            assert_eq!(cp.phase[m], 0.5);
        }
        let spacing: Vec<usize> = cp.minima.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(spacing.iter().all(|&s| s == 100));
        for t in 0..1000 {
            assert!(circular_error(cp.phase[t], true_phase(t, period)) < 0.011);
        }
    }

    #[test]
    fn noisy_sinusoid_phase() {
        let period = 100.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = sine(2000, period)
            .into_iter()
            .map(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let cp = cycle_phase(&x, 21).unwrap();
        let mse = (0..x.len())
            .map(|t| circular_error(cp.phase[t], true_phase(t, period)).powi(2))
            .sum::<f64>()
            / x.len() as f64;
        assert!(mse.sqrt() <= 0.02, "rmse {}", mse.sqrt());
        assert_eq!(cp.minima.len(), 20);
    }

    #[test]
    fn too_few_extrema() {
        let x: Vec<f64> = (0..50).map(|t| t as f64).collect();
        assert!(matches!(cycle_phase(&x, 5), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn cycle_amplitude_of_sinusoid() {
        let amp = mean_cycle_amplitude(&sine(1000, 100.0), 5).unwrap();
        assert!((amp - 2.0).abs() < 0.02, "{amp}");
    }

    #[test]
    fn fixtures_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let traj = simulate_pendulum(&PendulumConfig {
            n_steps: 50,
            ..Default::default()
        })
        .unwrap();
        let path = dir.path().join("p.csv");
        traj.write_csv(&path).unwrap();
        let series: MultiSeries<f64> = crate::series::load_csv(&path, &Default::default()).unwrap();
        assert_eq!(series, traj.to_series().unwrap());

        let tw = simulate_three_well(&ThreeWellConfig {
            n_steps: 50,
            ..Default::default()
        })
        .unwrap();
        let path = dir.path().join("w.csv");
        tw.write_csv(&path).unwrap();
        let series: MultiSeries<f64> = crate::series::load_csv(&path, &Default::default()).unwrap();
        assert_eq!(series, tw.to_series().unwrap());
    }
}
