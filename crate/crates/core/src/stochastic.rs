//! The isotropic-noise version of the flow and the Markov chain it induces
//! on the `n!` diagonal states.
//!
//! One step conjugates by `e^S` with
//! `S = -h[H, π(H)] + (ε/√2) Σ_{i<j} Ω_ij ξ_ij √h`, `ξ_ij ~ N(0, 1)`.
//! The generators `Ω_ij/√2` are orthonormal in the normal metric, so the
//! stationary density is `exp(2Ψ/ε²)` relative to the invariant measure.

use nalgebra::allocator::Allocator;
use nalgebra::{DefaultAllocator, Dim};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{IsoflowError, Result};
use crate::kernel::{with_dim, Kernel};
use crate::manifold::{random_state_with, SymState};
use crate::perm::{factorial, Permutation};
use crate::spectra::Spectrum;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub epsilon: f64,
    pub h: f64,
    pub horizon: f64,
    pub seed: u64,
    /// A visit to `s_σ` starts when `‖H - s_σ‖_F` drops below this.
    pub state_radius: f64,
    /// Fraction of the horizon discarded before sampling `Ψ`.
    pub burn_in: f64,
    /// Keep `Ψ` every this many steps after burn-in; 0 keeps none.
    pub sample_stride: usize,
}

/// Smallest Frobenius distance between two distinct diagonal states.
pub fn stable_separation(spectrum: &Spectrum) -> f64 {
    std::f64::consts::SQRT_2 * spectrum.min_gap()
}

pub fn default_state_radius(spectrum: &Spectrum) -> f64 {
    0.2 * stable_separation(spectrum)
}

impl SdeConfig {
    pub fn new(spectrum: &Spectrum, epsilon: f64, h: f64, horizon: f64, seed: u64) -> Self {
        Self {
            epsilon,
            h,
            horizon,
            seed,
            state_radius: default_state_radius(spectrum),
            burn_in: 0.1,
            sample_stride: 0,
        }
    }

    pub fn validate(&self, spectrum: &Spectrum) -> Result<()> {
        let bad = |msg: String| Err(IsoflowError::InvalidConfig(msg));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            ));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad(format!("step size must be positive, got {}", self.h));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return bad(format!(
                "burn-in fraction must lie in [0, 1), got {}",
                self.burn_in
            ));
        }
        let half = 0.5 * stable_separation(spectrum);
        if !(self.state_radius > 0.0 && self.state_radius < half) {
            return bad(format!(
                "state radius {} must lie in (0, {half}) so visit balls never overlap",
                self.state_radius
            ));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.h).round().max(1.0) as usize
    }

    fn rng_for(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// One step of the noisy flow. With `ε = 0` this is exactly [`crate::flow::step`].
pub fn sde_step<R: Rng + ?Sized>(state: &SymState, cfg: &SdeConfig, rng: &mut R) -> SymState {
    let m = with_dim!(state.n(), |D| {
        let mut k = Kernel::<D>::new(state.matrix());
        k.sde_step(cfg.h, cfg.epsilon, rng);
        k.to_dmatrix()
    });
    SymState::from_conjugation(state.spectrum().clone(), m)
}

/// The diagonal state nearest to `state` and its squared distance, using
/// `‖H - s_σ‖² = 2Σλ² - 2Σ_k d_k λ_{σ(k)}`.
pub fn nearest_stable(state: &SymState) -> (Permutation, f64) {
    let d: Vec<f64> = state.project_diagonal().iter().copied().collect();
    nearest_from_diagonal(state.spectrum(), &d)
}

fn nearest_from_diagonal(spectrum: &Spectrum, d: &[f64]) -> (Permutation, f64) {
    let sigma = Permutation::ranking(d);
    let values = spectrum.values();
    let cross: f64 = d
        .iter()
        .zip(sigma.ranks())
        .map(|(dk, &r)| dk * values[r])
        .sum();
    let dist2 = (2.0 * spectrum.sum_of_squares() - 2.0 * cross).max(0.0);
    (sigma, dist2)
}

/// Squared distance to the nearest diagonal state without building the
/// permutation; `None` when outside `radius2`.
fn visit_check<D: Dim>(
    k: &Kernel<D>,
    spectrum: &Spectrum,
    radius2: f64,
    buf: &mut [f64],
) -> Option<Permutation>
where
    DefaultAllocator: Allocator<D, D>,
{
    for (i, v) in buf.iter_mut().enumerate() {
        *v = k.diag(i);
    }
    let (sigma, dist2) = nearest_from_diagonal(spectrum, buf);
    (dist2 < radius2).then_some(sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: Permutation,
    pub to: Permutation,
    /// Step at which the new visit began.
    pub step: usize,
    pub time: f64,
    /// Time since the visit to `from` began.
    pub sojourn: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathRecord {
    pub path_index: u64,
    /// States in order of visit.
    pub chain: Vec<Permutation>,
    pub transitions: Vec<Transition>,
    /// Time attributed to each state (lexicographic order), from the start
    /// of a visit until the next visit begins or the path ends.
    pub dwell_times: Vec<f64>,
    pub psi_samples: Vec<f64>,
    pub terminal_state: SymState,
    pub steps: usize,
}

/// Runs one path; `path_index` selects the random stream.
pub fn simulate_path(start: &SymState, cfg: &SdeConfig, path_index: u64) -> Result<PathRecord> {
    cfg.validate(start.spectrum())?;
    Ok(with_dim!(start.n(), |D| simulate_in::<D>(
        start, cfg, path_index
    )))
}

fn simulate_in<D: Dim>(start: &SymState, cfg: &SdeConfig, path_index: u64) -> PathRecord
where
    DefaultAllocator: Allocator<D, D>,
{
    let spectrum = start.spectrum();
    let mut rng = cfg.rng_for(path_index);
    let steps = cfg.steps();
    let radius2 = cfg.state_radius * cfg.state_radius;
    let burn = (cfg.burn_in * steps as f64).ceil() as usize;
    let mut buf = vec![0.0; start.n()];

    let mut dwell_times = vec![0.0; factorial(start.n()) as usize];
    let mut chain = Vec::new();
    let mut transitions = Vec::new();
    let mut psi_samples = Vec::new();
    let mut current: Option<(Permutation, f64)> = None;
    let mut k = Kernel::<D>::new(start.matrix());

    for step in 0..=steps {
        let t = step as f64 * cfg.h;
        if let Some(sigma) = visit_check(&k, spectrum, radius2, &mut buf) {
            if current.as_ref().is_none_or(|(c, _)| *c != sigma) {
                if let Some((prev, since)) = current.take() {
                    dwell_times[prev.lexicographic_index()] += t - since;
                    transitions.push(Transition {
                        from: prev,
                        to: sigma.clone(),
                        step,
                        time: t,
                        sojourn: t - since,
                    });
                }
                chain.push(sigma.clone());
                current = Some((sigma, t));
            }
        }
        if cfg.sample_stride > 0 && step >= burn && (step - burn).is_multiple_of(cfg.sample_stride)
        {
            psi_samples.push(k.potential());
        }
        if step < steps {
            k.sde_step(cfg.h, cfg.epsilon, &mut rng);
        }
    }
    if let Some((last, since)) = current {
        dwell_times[last.lexicographic_index()] += steps as f64 * cfg.h - since;
    }
    PathRecord {
        path_index,
        chain,
        transitions,
        dwell_times,
        psi_samples,
        terminal_state: SymState::from_conjugation(spectrum.clone(), k.to_dmatrix()),
        steps,
    }
}

const START_STREAMS: u64 = 1 << 63;

/// Haar-random starting states, one per path, each from its own stream.
pub fn random_starts(spectrum: &Spectrum, count: usize, seed: u64) -> Vec<SymState> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Upper half of the stream space, so a shared seed never reuses
            // a path's noise stream.
            rng.set_stream(START_STREAMS | i as u64);
            random_state_with(spectrum, &mut rng)
        })
        .collect()
}

/// Runs the paths in parallel; path `i` uses stream `i`, so results do not
/// depend on scheduling.
pub fn simulate_paths(starts: &[SymState], cfg: &SdeConfig) -> Result<Vec<PathRecord>> {
    starts
        .par_iter()
        .enumerate()
        .map(|(i, s)| simulate_path(s, cfg, i as u64))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovEstimate {
    pub states: Vec<Permutation>,
    /// `counts[a][b]`: transitions from state `a` to state `b`.
    pub counts: Vec<Vec<u64>>,
    pub dwell_times: Vec<f64>,
    pub transitions: u64,
    /// Fraction of transitions between graph-adjacent states.
    pub adjacency_dominance: f64,
}

impl MarkovEstimate {
    pub fn departures(&self, state: usize) -> u64 {
        self.counts[state].iter().sum()
    }

    /// Row-normalized counts; rows without departures are zero.
    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| {
                        if total == 0 {
                            0.0
                        } else {
                            c as f64 / total as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Departure rate per unit dwell time for each state.
    pub fn exit_rates(&self) -> Vec<f64> {
        (0..self.states.len())
            .map(|a| {
                if self.dwell_times[a] > 0.0 {
                    self.departures(a) as f64 / self.dwell_times[a]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

pub fn estimate_markov(paths: &[PathRecord]) -> Result<MarkovEstimate> {
    let n = paths
        .first()
        .map(|p| p.terminal_state.n())
        .ok_or_else(|| IsoflowError::InsufficientData("no paths".into()))?;
    let states = Permutation::all(n);
    let m = states.len();
    let mut counts = vec![vec![0u64; m]; m];
    let mut dwell_times = vec![0.0; m];
    let mut adjacent = 0u64;
    let mut total = 0u64;
    for path in paths {
        for (a, d) in path.dwell_times.iter().enumerate() {
            dwell_times[a] += d;
        }
        for t in &path.transitions {
            counts[t.from.lexicographic_index()][t.to.lexicographic_index()] += 1;
            total += 1;
            if t.from.is_adjacent_to(&t.to) {
                adjacent += 1;
            }
        }
    }
    if total == 0 {
        return Err(IsoflowError::InsufficientData(
            "no transitions between stable states were recorded".into(),
        ));
    }
    Ok(MarkovEstimate {
        states,
        counts,
        dwell_times,
        transitions: total,
        adjacency_dominance: adjacent as f64 / total as f64,
    })
}

/// Equal-width histogram of `samples` over `[lo, hi]`, as fractions.
pub fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    let mut kept = 0.0;
    for &x in samples {
        if x < lo || x > hi {
            continue;
        }
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1.0;
        kept += 1.0;
    }
    if kept > 0.0 {
        for c in &mut counts {
            *c /= kept;
        }
    }
    counts
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfConsistency {
    pub bins: usize,
    pub range: (f64, f64),
    pub histogram_a: Vec<f64>,
    pub histogram_b: Vec<f64>,
    pub total_variation: f64,
}

/// Compares the `Ψ` histograms of two independent runs.
pub fn stationary_check(
    a: &[f64],
    b: &[f64],
    bins: usize,
    min_per_bin: usize,
) -> Result<SelfConsistency> {
    if bins == 0 || a.len().min(b.len()) < bins * min_per_bin.max(1) {
        return Err(IsoflowError::InsufficientData(format!(
            "need at least {} samples per run for {bins} bins",
            bins * min_per_bin.max(1)
        )));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let ha = histogram(a, lo, hi, bins);
    let hb = histogram(b, lo, hi, bins);
    Ok(SelfConsistency {
        bins,
        range: (lo, hi),
        total_variation: total_variation(&ha, &hb),
        histogram_a: ha,
        histogram_b: hb,
    })
}

/// `ln(#{Ψ ∈ a} / #{Ψ ∈ b})` for two closed bands.
pub fn occupancy_log_ratio(samples: &[f64], a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    let count = |(lo, hi): (f64, f64)| samples.iter().filter(|&&x| x >= lo && x <= hi).count();
    let (ca, cb) = (count(a), count(b));
    if ca == 0 || cb == 0 {
        return Err(IsoflowError::InsufficientData(format!(
            "empty occupancy band ({ca} and {cb} samples)"
        )));
    }
    Ok((ca as f64 / cb as f64).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(IsoflowError::InsufficientData(
            "need two or more points".into(),
        ));
    }
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(IsoflowError::InsufficientData(
            "x values are all equal".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Chart angle of a 2×2 state: `θ = 0` at `diag(λ₁, λ₂)`, `θ = π` at the
/// swapped state, `Ψ(θ) = c + ⅛(λ₁-λ₂)²(1 + cos 2θ)`.
pub fn theta_chart(state: &SymState) -> Result<f64> {
    if state.n() != 2 {
        return Err(IsoflowError::DimensionMismatch {
            expected: 2,
            got: state.n(),
        });
    }
    let v = state.spectrum().values();
    let delta = v[0] - v[1];
    let m = state.matrix();
    Ok((2.0 * m[(0, 1)] / delta).atan2((m[(0, 0)] - m[(1, 1)]) / delta))
}

/// Chart drift `θ̇ = -½(λ₁-λ₂)² sin 2θ`.
pub fn chart_drift(spectrum: &Spectrum, theta: f64) -> f64 {
    let v = spectrum.values();
    -0.5 * (v[0] - v[1]).powi(2) * (2.0 * theta).sin()
}

/// `Ψ(θ)` up to its additive constant.
pub fn chart_potential(spectrum: &Spectrum, theta: f64) -> f64 {
    let v = spectrum.values();
    0.125 * (v[0] - v[1]).powi(2) * (1.0 + (2.0 * theta).cos())
}

/// Probability of each of `bins` equal arcs of `(-π, π]` under the density
/// `∝ exp(2Ψ(θ)/ε²)`.
pub fn chart_bin_masses(spectrum: &Spectrum, epsilon: f64, bins: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let top = chart_potential(spectrum, 0.0);
    let density = |t: f64| (2.0 * (chart_potential(spectrum, t) - top) / (epsilon * epsilon)).exp();
    let width = 2.0 * PI / bins as f64;
    const PANELS: usize = 64;
    let masses: Vec<f64> = (0..bins)
        .map(|b| {
            let a = -PI + b as f64 * width;
            let dx = width / PANELS as f64;
            let mut sum = density(a) + density(a + width);
            for k in 1..PANELS {
                sum += density(a + k as f64 * dx) * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            sum * dx / 3.0
        })
        .collect();
    let total: f64 = masses.iter().sum();
    masses.into_iter().map(|m| m / total).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChiSquareReport {
    pub observed: Vec<u64>,
    pub expected: Vec<f64>,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square of chart angles against `exp(2Ψ(θ)/ε²)`.
pub fn chi_square_chart(
    thetas: &[f64],
    spectrum: &Spectrum,
    epsilon: f64,
    bins: usize,
) -> Result<ChiSquareReport> {
    use std::f64::consts::PI;
    if bins < 2 {
        return Err(IsoflowError::InvalidConfig("need at least two bins".into()));
    }
    let masses = chart_bin_masses(spectrum, epsilon, bins);
    let total = thetas.len() as f64;
    let expected: Vec<f64> = masses.iter().map(|m| m * total).collect();
    if let Some(e) = expected.iter().find(|&&e| e < 5.0) {
        return Err(IsoflowError::InsufficientData(format!(
            "expected bin count {e:.2} is below 5"
        )));
    }
    let mut observed = vec![0u64; bins];
    let width = 2.0 * PI / bins as f64;
    for &t in thetas {
        let b = (((t + PI) / width) as usize).min(bins - 1);
        observed[b] += 1;
    }
    let statistic = observed
        .iter()
        .zip(&expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let dof = bins - 1;
    let p_value = ChiSquared::new(dof as f64)
        .map_err(|e| IsoflowError::InvalidConfig(e.to_string()))?
        .sf(statistic);
    Ok(ChiSquareReport {
        observed,
        expected,
        statistic,
        dof,
        p_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum HittingSample {
    Hit {
        target: Permutation,
        time: f64,
    },
    /// Reached a state outside the target set first.
    Diverted {
        state: Permutation,
        time: f64,
    },
    Censored,
}

/// Starts at `s_from` and runs each sample until it first visits a state
/// other than `from`.
pub fn first_hitting(
    spectrum: &Spectrum,
    from: &Permutation,
    targets: &[Permutation],
    cfg: &SdeConfig,
    samples: usize,
) -> Result<Vec<HittingSample>> {
    cfg.validate(spectrum)?;
    if targets.is_empty() || targets.contains(from) {
        return Err(IsoflowError::InvalidConfig(
            "target set must be nonempty and exclude the starting state".into(),
        ));
    }
    let start = SymState::diagonal(spectrum.clone(), from);
    Ok((0..samples as u64)
        .into_par_iter()
        .map(|i| with_dim!(start.n(), |D| hit_once::<D>(&start, from, targets, cfg, i)))
        .collect())
}

fn hit_once<D: Dim>(
    start: &SymState,
    from: &Permutation,
    targets: &[Permutation],
    cfg: &SdeConfig,
    sample: u64,
) -> HittingSample
where
    DefaultAllocator: Allocator<D, D>,
{
    let mut rng = cfg.rng_for(sample);
    let radius2 = cfg.state_radius * cfg.state_radius;
    let mut buf = vec![0.0; start.n()];
    let mut k = Kernel::<D>::new(start.matrix());
    for step in 1..=cfg.steps() {
        k.sde_step(cfg.h, cfg.epsilon, &mut rng);
        if let Some(sigma) = visit_check(&k, start.spectrum(), radius2, &mut buf) {
            if sigma != *from {
                let time = step as f64 * cfg.h;
                return if targets.contains(&sigma) {
                    HittingSample::Hit {
                        target: sigma,
                        time,
                    }
                } else {
                    HittingSample::Diverted { state: sigma, time }
                };
            }
        }
    }
    HittingSample::Censored
}
