//! Energy-minimizing paths between adjacent diagonal states.
//!
//! The matrix problem steers `Ḣ = [H,[H,π(H)]] + ε[H,U]` between two
//! diagonal states at minimal `½∫tr(UᵀU)`. Between adjacent states it
//! reduces to the scalar problem
//!
//! `θ̇ = -½(λᵢ - λᵢ₊₁)² sin 2θ + 2εu`, `θ(0) = 0`, `θ(T) = π`, minimize `∫u²`,
//!
//! solved here by trapezoidal collocation with a Newton iteration, and
//! independently by dynamic programming on a `(θ, t)` grid. `E` is the
//! nonnegative minimal cost, so `exp(-E)` falls with the barrier.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IsoflowError, Result};
use crate::linalg::{commutator, diag_part};
use crate::manifold::SymState;
use crate::perm::Permutation;
use crate::spectra::Spectrum;
use crate::stochastic::MarkovEstimate;

/// Right-hand side of the Euler–Lagrange system:
/// `Ḣ = [H, Ω]`, `Ω̇ = [H,[π(H),[H,π(H)]]] + [H, π([H,[H,π(H)]])]`.
pub fn el_rhs(h: &DMatrix<f64>, omega: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = diag_part(h);
    let c = commutator(h, &d);
    let first = commutator(h, &commutator(&d, &c));
    let second = commutator(h, &diag_part(&commutator(h, &c)));
    (commutator(h, omega), first + second)
}

#[derive(Debug, Clone)]
pub struct ElTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DMatrix<f64>>,
    pub generators: Vec<DMatrix<f64>>,
}

/// Classical RK4 on `(H, Ω)` from `(h0, omega0)` over `[0, horizon]`.
pub fn el_shoot(
    h0: &DMatrix<f64>,
    omega0: &DMatrix<f64>,
    horizon: f64,
    steps: usize,
) -> Result<ElTrajectory> {
    if h0.shape() != omega0.shape() || !h0.is_square() {
        return Err(IsoflowError::DimensionMismatch {
            expected: h0.nrows(),
            got: omega0.nrows(),
        });
    }
    if !(horizon > 0.0) || steps == 0 {
        return Err(IsoflowError::InvalidConfig(
            "need a positive horizon and at least one step".into(),
        ));
    }
    let dt = horizon / steps as f64;
    let mut h = h0.clone();
    let mut w = omega0.clone();
    let mut out = ElTrajectory {
        times: vec![0.0],
        states: vec![h.clone()],
        generators: vec![w.clone()],
    };
    for k in 1..=steps {
        let (k1h, k1w) = el_rhs(&h, &w);
        let (k2h, k2w) = el_rhs(&(&h + &k1h * (0.5 * dt)), &(&w + &k1w * (0.5 * dt)));
        let (k3h, k3w) = el_rhs(&(&h + &k2h * (0.5 * dt)), &(&w + &k2w * (0.5 * dt)));
        let (k4h, k4w) = el_rhs(&(&h + &k3h * dt), &(&w + &k3w * dt));
        h += (k1h + k2h * 2.0 + k3h * 2.0 + k4h) * (dt / 6.0);
        w += (k1w + k2w * 2.0 + k3w * 2.0 + k4w) * (dt / 6.0);
        out.times.push(k as f64 * dt);
        out.states.push(h.clone());
        out.generators.push(w.clone());
    }
    Ok(out)
}

/// Rate of the chart angle of a 2×2 state moving with velocity `dh`.
pub fn chart_velocity(state: &SymState, dh: &DMatrix<f64>) -> Result<f64> {
    if state.n() != 2 || dh.shape() != (2, 2) {
        return Err(IsoflowError::DimensionMismatch {
            expected: 2,
            got: state.n(),
        });
    }
    let v = state.spectrum().values();
    let delta = v[0] - v[1];
    let m = state.matrix();
    let (x, y) = ((m[(0, 0)] - m[(1, 1)]) / delta, 2.0 * m[(0, 1)] / delta);
    let (dx, dy) = ((dh[(0, 0)] - dh[(1, 1)]) / delta, 2.0 * dh[(0, 1)] / delta);
    Ok((x * dy - y * dx) / (x * x + y * y))
}

/// Euler–Lagrange equation of the scalar problem, `θ̈ = b(θ) b′(θ)`, as a
/// first-order system in `(θ, θ̇)`. Along solutions `½θ̇² - ½b²` is
/// conserved; the zero level holds the optimal paths for `T → ∞`.
pub fn scalar_el_rhs(gap: f64, theta: f64, rate: f64) -> (f64, f64) {
    let g = gap * gap;
    (rate, drift(g, theta) * drift_d1(g, theta))
}

/// `½θ̇² - ½b(θ)²`.
pub fn scalar_el_energy(gap: f64, theta: f64, rate: f64) -> f64 {
    0.5 * rate * rate - 0.5 * drift(gap * gap, theta).powi(2)
}

/// RK4 shooting of [`scalar_el_rhs`]; returns `(t, θ, θ̇)` samples.
pub fn scalar_el_shoot(
    gap: f64,
    theta0: f64,
    rate0: f64,
    horizon: f64,
    steps: usize,
) -> Vec<(f64, f64, f64)> {
    let dt = horizon / steps.max(1) as f64;
    let f = |t: f64, r: f64| scalar_el_rhs(gap, t, r);
    let (mut th, mut r) = (theta0, rate0);
    let mut out = Vec::with_capacity(steps + 1);
    out.push((0.0, th, r));
    for k in 1..=steps {
        let (a1, b1) = f(th, r);
        let (a2, b2) = f(th + 0.5 * dt * a1, r + 0.5 * dt * b1);
        let (a3, b3) = f(th + 0.5 * dt * a2, r + 0.5 * dt * b2);
        let (a4, b4) = f(th + dt * a3, r + dt * b3);
        th += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        r += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        out.push((k as f64 * dt, th, r));
    }
    out
}

/// `∫ u² dt` along sampled `(t, θ, θ̇)` with `u = (θ̇ - b)/(2ε)`, by the
/// trapezoidal rule.
pub fn scalar_path_cost(gap: f64, epsilon: f64, samples: &[(f64, f64, f64)]) -> f64 {
    let g = gap * gap;
    let u2 = |&(_, th, r): &(f64, f64, f64)| ((r - drift(g, th)) / (2.0 * epsilon)).powi(2);
    samples
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (u2(&w[0]) + u2(&w[1])))
        .sum()
}

/// Drift of the scalar model, `b(θ) = -½ g sin 2θ` with `g` the squared gap.
fn drift(g: f64, theta: f64) -> f64 {
    -0.5 * g * (2.0 * theta).sin()
}

fn drift_d1(g: f64, theta: f64) -> f64 {
    -g * (2.0 * theta).cos()
}

fn drift_d2(g: f64, theta: f64) -> f64 {
    2.0 * g * (2.0 * theta).sin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpConfig {
    /// Collocation intervals over the horizon.
    pub intervals: usize,
    pub terminal_weight: f64,
    /// Largest accepted `|θ(T) - π|`.
    pub terminal_tol: f64,
    pub max_iterations: usize,
}

impl Default for EmpConfig {
    fn default() -> Self {
        Self {
            intervals: 400,
            terminal_weight: 1e6,
            terminal_tol: 1e-3,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalarEmp {
    pub times: Vec<f64>,
    pub theta: Vec<f64>,
    /// Control on each interval.
    pub control: Vec<f64>,
    pub energy: f64,
    pub terminal_error: f64,
    pub iterations: usize,
}

/// Collocation cost `Σ h u_k² + W(θ_N - π)²` with `θ_0 = 0`, and the
/// per-interval controls
/// `u_k = ((θ_{k+1} - θ_k)/h - ½(b_k + b_{k+1})) / (2ε)`.
pub fn collocation_objective(
    theta: &[f64],
    g: f64,
    epsilon: f64,
    dt: f64,
    weight: f64,
) -> (f64, f64) {
    let energy: f64 = theta
        .windows(2)
        .map(|w| {
            let u =
                ((w[1] - w[0]) / dt - 0.5 * (drift(g, w[0]) + drift(g, w[1]))) / (2.0 * epsilon);
            dt * u * u
        })
        .sum();
    let end = theta[theta.len() - 1] - PI;
    (energy + weight * end * end, energy)
}

/// Solves the scalar problem for the gap `λᵢ₊₁ - λᵢ`.
pub fn scalar_emp(gap: f64, epsilon: f64, horizon: f64, cfg: &EmpConfig) -> Result<ScalarEmp> {
    if !(gap.is_finite()
        && epsilon > 0.0
        && epsilon.is_finite()
        && horizon > 0.0
        && horizon.is_finite())
    {
        return Err(IsoflowError::InvalidConfig(format!(
            "need finite gap, epsilon > 0 and horizon > 0 (got {gap}, {epsilon}, {horizon})"
        )));
    }
    if cfg.intervals < 2 {
        return Err(IsoflowError::InvalidConfig(
            "need at least two intervals".into(),
        ));
    }
    let g = gap * gap;
    let n = cfg.intervals;
    let dt = horizon / n as f64;
    let c = 1.0 / (2.0 * epsilon);
    let w = cfg.terminal_weight;
    let mut theta: Vec<f64> = (0..=n).map(|k| PI * k as f64 / n as f64).collect();
    let mut f = collocation_objective(&theta, g, epsilon, dt, w).0;
    let mut mu = 1e-6;
    let mut iterations = 0;

    // Newton on θ_1..θ_N; the Hessian is tridiagonal.
    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut grad = vec![0.0; n + 1];
        let mut diag = vec![0.0; n + 1];
        let mut off = vec![0.0; n + 1];
        for k in 0..n {
            let (a, b) = (theta[k], theta[k + 1]);
            let u = ((b - a) / dt - 0.5 * (drift(g, a) + drift(g, b))) * c;
            let du_a = (-1.0 / dt - 0.5 * drift_d1(g, a)) * c;
            let du_b = (1.0 / dt - 0.5 * drift_d1(g, b)) * c;
            let d2u_a = -0.5 * drift_d2(g, a) * c;
            let d2u_b = -0.5 * drift_d2(g, b) * c;
            grad[k] += 2.0 * dt * u * du_a;
            grad[k + 1] += 2.0 * dt * u * du_b;
            diag[k] += 2.0 * dt * (du_a * du_a + u * d2u_a);
            diag[k + 1] += 2.0 * dt * (du_b * du_b + u * d2u_b);
            off[k] += 2.0 * dt * du_a * du_b;
        }
        grad[n] += 2.0 * w * (theta[n] - PI);
        diag[n] += 2.0 * w;

        let gnorm = grad[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
        if gnorm < 1e-10 * (1.0 + f.abs()) {
            break;
        }
        let mut accepted = false;
        while mu < 1e12 {
            let d: Vec<f64> = diag[1..].iter().map(|x| x + mu).collect();
            if let Some(step) = solve_tridiagonal(&d, &off[1..n], &grad[1..]) {
                let trial: Vec<f64> = std::iter::once(0.0)
                    .chain(theta[1..].iter().zip(&step).map(|(t, s)| t - s))
                    .collect();
                let ft = collocation_objective(&trial, g, epsilon, dt, w).0;
                if ft <= f {
                    let small = step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-13;
                    theta = trial;
                    f = ft;
                    mu = (mu * 0.3).max(1e-12);
                    accepted = true;
                    if small {
                        iterations = cfg.max_iterations;
                    }
                    break;
                }
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }

    let (_, energy) = collocation_objective(&theta, g, epsilon, dt, w);
    let terminal_error = (theta[n] - PI).abs();
    if terminal_error > cfg.terminal_tol {
        return Err(IsoflowError::InfeasibleHorizon {
            terminal_error,
            energy,
        });
    }
    let control = theta
        .windows(2)
        .map(|p| ((p[1] - p[0]) / dt - 0.5 * (drift(g, p[0]) + drift(g, p[1]))) * c)
        .collect();
    Ok(ScalarEmp {
        times: (0..=n).map(|k| k as f64 * dt).collect(),
        theta,
        control,
        energy,
        terminal_error,
        iterations,
    })
}

/// Symmetric tridiagonal solve by `LDLᵀ`; `None` if a pivot is not
/// positive.
fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let m = diag.len();
    let mut d = vec![0.0; m];
    let mut l = vec![0.0; m];
    d[0] = diag[0];
    if !(d[0] > 0.0) {
        return None;
    }
    for i in 1..m {
        l[i] = off[i - 1] / d[i - 1];
        d[i] = diag[i] - l[i] * off[i - 1];
        if !(d[i] > 0.0) {
            return None;
        }
    }
    let mut y = rhs.to_vec();
    for i in 1..m {
        y[i] -= l[i] * y[i - 1];
    }
    for i in 0..m {
        y[i] /= d[i];
    }
    for i in (0..m - 1).rev() {
        y[i] -= l[i + 1] * y[i + 1];
    }
    Some(y)
}

/// Longest transition, in time steps, considered by [`dp_oracle`].
pub const DP_MAX_SPAN: usize = 8;

/// Dynamic programming over `theta_points` equally spaced angles in
/// `[0, π]` and `time_steps` steps. A transition joins two grid angles by a
/// straight segment lasting 1 to [`DP_MAX_SPAN`] steps and is charged the
/// exact control cost of that segment, so every candidate is an admissible
/// path and the result is an upper bound on the minimal energy.
pub fn dp_oracle(
    gap: f64,
    epsilon: f64,
    horizon: f64,
    theta_points: usize,
    time_steps: usize,
) -> Result<f64> {
    if theta_points < 2 || time_steps == 0 || !(epsilon > 0.0) || !(horizon > 0.0) {
        return Err(IsoflowError::InvalidConfig(
            "degenerate grid or parameters".into(),
        ));
    }
    let g = gap * gap;
    let dt = horizon / time_steps as f64;
    let m = theta_points;
    let grid: Vec<f64> = (0..m).map(|i| PI * i as f64 / (m - 1) as f64).collect();
    // Antiderivatives in θ of b and b².
    let int_b: Vec<f64> = grid.iter().map(|&t| 0.25 * g * (2.0 * t).cos()).collect();
    let int_b2: Vec<f64> = grid
        .iter()
        .map(|&t| 0.25 * g * g * (0.5 * t - (4.0 * t).sin() / 8.0))
        .collect();
    let b2: Vec<f64> = grid.iter().map(|&t| drift(g, t).powi(2)).collect();
    let scale = 1.0 / (4.0 * epsilon * epsilon);
    // ∫ (θ̇ - b)² dt along θ(t) linear from grid[i] to grid[j] over `d`.
    let segment = |i: usize, j: usize, d: f64| {
        if i == j {
            return d * b2[i];
        }
        let v = (grid[j] - grid[i]) / d;
        v * v * d - 2.0 * (int_b[j] - int_b[i]) + (int_b2[j] - int_b2[i]) / v
    };
    let mut levels = vec![vec![f64::INFINITY; m]; time_steps + 1];
    levels[time_steps][m - 1] = 0.0;
    for k in (0..time_steps).rev() {
        let row: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|i| {
                let mut best = f64::INFINITY;
                for span in 1..=DP_MAX_SPAN.min(time_steps - k) {
                    let d = dt * span as f64;
                    for (j, &later) in levels[k + span].iter().enumerate() {
                        if later.is_finite() {
                            best = best.min(segment(i, j, d) * scale + later);
                        }
                    }
                }
                best
            })
            .collect();
        levels[k] = row;
    }
    Ok(levels[0][0])
}

/// `(λᵢ₊₁ - λᵢ)² / (2ε²)`: the cost of the zero-energy path up the
/// reversed flow to the saddle and down the flow, reached as `T → ∞`.
pub fn infinite_horizon_energy(gap: f64, epsilon: f64) -> f64 {
    gap * gap / (2.0 * epsilon * epsilon)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlProblem {
    pub from: Permutation,
    pub to: Permutation,
    pub epsilon: f64,
    pub horizon: f64,
    pub lambda_pair: (f64, f64),
}

impl ControlProblem {
    pub fn new(
        spectrum: &Spectrum,
        from: &Permutation,
        to: &Permutation,
        epsilon: f64,
        horizon: f64,
    ) -> Result<Self> {
        let swap = from
            .simple_swap_to(to)
            .ok_or_else(|| IsoflowError::NotAdjacent(from.to_string(), to.to_string()))?;
        if !(horizon > 0.0) {
            return Err(IsoflowError::InvalidConfig(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let v = spectrum.values();
        Ok(Self {
            from: from.clone(),
            to: to.clone(),
            epsilon,
            horizon,
            lambda_pair: (v[swap.rank], v[swap.rank + 1]),
        })
    }

    pub fn gap(&self) -> f64 {
        self.lambda_pair.1 - self.lambda_pair.0
    }

    pub fn solve(&self, cfg: &EmpConfig) -> Result<ScalarEmp> {
        scalar_emp(self.gap(), self.epsilon, self.horizon, cfg)
    }
}

/// `exp(-E)` for the edge.
pub fn transition_weight(problem: &ControlProblem, cfg: &EmpConfig) -> Result<f64> {
    Ok((-problem.solve(cfg)?.energy).exp())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeEmp {
    pub from: Permutation,
    pub to: Permutation,
    pub energy: f64,
    pub weight: f64,
    pub terminal_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictedTransitions {
    pub states: Vec<Permutation>,
    /// Row-stochastic over the `n - 1` neighbours of each state.
    pub matrix: Vec<Vec<f64>>,
    pub edges: Vec<EdgeEmp>,
}

/// Solves every edge problem and normalizes `exp(-E)` over each state's
/// neighbours.
pub fn predicted_transitions(
    spectrum: &Spectrum,
    epsilon: f64,
    horizon: f64,
    cfg: &EmpConfig,
) -> Result<PredictedTransitions> {
    let n = spectrum.n();
    let states = Permutation::all(n);
    let gaps: Vec<f64> = spectrum.values().windows(2).map(|w| w[1] - w[0]).collect();
    let solved: Vec<ScalarEmp> = gaps
        .par_iter()
        .map(|&gap| scalar_emp(gap, epsilon, horizon, cfg))
        .collect::<Result<_>>()?;

    let m = states.len();
    let mut matrix = vec![vec![0.0; m]; m];
    let mut edges = Vec::new();
    for from in &states {
        let a = from.lexicographic_index();
        let neighbours: Vec<(Permutation, &ScalarEmp)> = (0..n - 1)
            .map(|r| (from.swap_values(r), &solved[r]))
            .collect();
        let lowest = neighbours
            .iter()
            .map(|(_, s)| s.energy)
            .fold(f64::INFINITY, f64::min);
        let total: f64 = neighbours
            .iter()
            .map(|(_, s)| (lowest - s.energy).exp())
            .sum();
        for (to, sol) in &neighbours {
            matrix[a][to.lexicographic_index()] = (lowest - sol.energy).exp() / total;
            if from.lexicographic_index() < to.lexicographic_index() {
                edges.push(EdgeEmp {
                    from: from.clone(),
                    to: to.clone(),
                    energy: sol.energy,
                    weight: (-sol.energy).exp(),
                    terminal_error: sol.terminal_error,
                });
            }
        }
    }
    Ok(PredictedTransitions {
        states,
        matrix,
        edges,
    })
}

/// Kendall τ-a between two equally long score lists; `None` with fewer
/// than two items.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    let m = x.len().min(y.len());
    if m < 2 {
        return None;
    }
    let mut s = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let a = (x[i] - x[j])
                .partial_cmp(&0.0)
                .map_or(0.0, |o| o as i32 as f64);
            let b = (y[i] - y[j])
                .partial_cmp(&0.0)
                .map_or(0.0, |o| o as i32 as f64);
            s += a * b;
        }
    }
    Some(s / (m * (m - 1) / 2) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateComparison {
    pub state: Permutation,
    pub neighbours: Vec<Permutation>,
    pub predicted: Vec<f64>,
    pub empirical: Vec<f64>,
    pub departures: u64,
    pub tau: Option<f64>,
    /// All predicted weights were equal; `tau` is reported as 0.
    pub tie: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub per_state: Vec<StateComparison>,
    /// Mean `τ` over states with departures; `None` when no state has
    /// two or more neighbours.
    pub aggregate_tau: Option<f64>,
    pub skipped: bool,
}

/// Ranks predicted neighbour weights against observed transition counts.
pub fn compare(
    predicted: &PredictedTransitions,
    empirical: &MarkovEstimate,
) -> Result<ComparisonReport> {
    if empirical.transitions == 0 {
        return Err(IsoflowError::InsufficientData(
            "no empirical transitions".into(),
        ));
    }
    let n = predicted.states.first().map_or(0, |s| s.len());
    let mut per_state = Vec::new();
    for from in &predicted.states {
        let a = from.lexicographic_index();
        let neighbours: Vec<Permutation> = (0..n.saturating_sub(1))
            .map(|r| from.swap_values(r))
            .collect();
        let p: Vec<f64> = neighbours
            .iter()
            .map(|t| predicted.matrix[a][t.lexicographic_index()])
            .collect();
        let e: Vec<f64> = neighbours
            .iter()
            .map(|t| empirical.counts[a][t.lexicographic_index()] as f64)
            .collect();
        let departures = empirical.departures(a);
        let tie = p.len() >= 2
            && p.iter()
                .all(|x| (x - p[0]).abs() <= 1e-12 * p[0].abs().max(1e-300));
        let tau = if tie { Some(0.0) } else { kendall_tau(&p, &e) };
        per_state.push(StateComparison {
            state: from.clone(),
            neighbours,
            predicted: p,
            empirical: e,
            departures,
            tau,
            tie,
        });
    }
    let taus: Vec<f64> = per_state
        .iter()
        .filter(|s| s.departures > 0)
        .filter_map(|s| s.tau)
        .collect();
    let aggregate_tau = (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64);
    Ok(ComparisonReport {
        skipped: n < 3,
        per_state,
        aggregate_tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{random_state, SkewGenerator};
    use crate::stochastic::{chart_drift, theta_chart};
    use rand::SeedableRng;

    #[test]
    fn rest_point() {
        let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 4.0]));
        let (dh, dw) = el_rhs(&h, &DMatrix::zeros(3, 3));
        assert_eq!(dh.norm(), 0.0);
        assert_eq!(dw.norm(), 0.0);
    }

    #[test]
    fn generator_rate_is_skew() {
        let s = Spectrum::certified(vec![1.0, 2.0, 4.0, 8.0]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for seed in 0..5 {
            let h = random_state(&s, seed);
            let w = SkewGenerator::random(4, &mut rng);
            let (dh, dw) = el_rhs(h.matrix(), w.matrix());
            assert!((&dw + dw.transpose()).norm() < 1e-12 * (1.0 + dw.norm()));
            assert!((&dh - dh.transpose()).norm() < 1e-12 * (1.0 + dh.norm()));
        }
    }

    #[test]
    fn displayed_system_in_the_two_by_two_chart() {
        // In the chart the displayed system gives θ̈ = g·b(θ), g the
        // squared gap, which differs from the scalar θ̈ = b·b′.
        let s = Spectrum::certified(vec![1.0, 3.0]).unwrap();
        let g = 4.0;
        let e = crate::linalg::pair_generator(2, 0, 1);
        for theta in [0.3_f64, 0.7, 1.2, 2.0] {
            let (c, sn) = ((0.5 * theta).cos(), (0.5 * theta).sin());
            let state =
                SymState::from_frame(s.clone(), &DMatrix::from_row_slice(2, 2, &[c, sn, -sn, c]));
            let unit = chart_velocity(&state, &commutator(state.matrix(), &e)).unwrap();
            let (_, dw) = el_rhs(state.matrix(), &DMatrix::zeros(2, 2));
            let accel = unit * dw[(0, 1)];
            assert!((accel - g * chart_drift(&s, theta)).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_shooting_conserves_the_chart_energy() {
        // Conserved quantity of θ̈ = -½g² sin 2θ: ½θ̇² - ¼g² cos 2θ.
        let s = Spectrum::certified(vec![1.0, 2.0]).unwrap();
        let start = random_state(&s, 4);
        let omega = crate::linalg::pair_generator(2, 0, 1) * 0.3;
        let traj = el_shoot(start.matrix(), &omega, 5.0, 5000).unwrap();
        let energy = |h: &DMatrix<f64>, w: &DMatrix<f64>| {
            let st = SymState::new(s.clone(), h.clone()).unwrap();
            let v = chart_velocity(&st, &commutator(h, w)).unwrap();
            0.5 * v * v - 0.25 * (2.0 * theta_chart(&st).unwrap()).cos()
        };
        let e0 = energy(&traj.states[0], &traj.generators[0]);
        for (h, w) in traj.states.iter().zip(&traj.generators) {
            assert!((energy(h, w) - e0).abs() < 1e-9);
        }
    }

    #[test]
    fn scalar_heteroclinic_matches_the_oracle() {
        let (gap, eps) = (1.0, 0.5);
        let g = gap * gap;
        // Up the reversed flow from 0⁺ towards the saddle at π/2 ...
        let t0 = 1e-4;
        let up = scalar_el_shoot(gap, t0, -drift(g, t0), 20.0, 40_000);
        // ... and down the flow from just past it to π.
        let t1 = PI / 2.0 + 1e-4;
        let down = scalar_el_shoot(gap, t1, drift(g, t1), 20.0, 40_000);
        for path in [&up, &down] {
            let e0 = scalar_el_energy(gap, path[0].1, path[0].2);
            let worst = path
                .iter()
                .map(|&(_, th, r)| (scalar_el_energy(gap, th, r) - e0).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-6, "energy drift {worst:e}");
        }
        assert!(up.last().unwrap().1 > PI / 2.0 - 1e-3);
        assert!(down.last().unwrap().1 > PI - 1e-3);
        let cost = scalar_path_cost(gap, eps, &up) + scalar_path_cost(gap, eps, &down);
        let oracle = scalar_emp(
            gap,
            eps,
            40.0,
            &EmpConfig {
                intervals: 1600,
                ..EmpConfig::default()
            },
        )
        .unwrap()
        .energy;
        assert!((cost - oracle).abs() < 0.01 * oracle, "{cost} vs {oracle}");
        assert!((cost - infinite_horizon_energy(gap, eps)).abs() < 0.01 * oracle);
    }

    #[test]
    fn energy_approaches_the_heteroclinic_cost() {
        let cfg = EmpConfig {
            intervals: 2000,
            ..EmpConfig::default()
        };
        let sol = scalar_emp(1.0, 0.5, 60.0, &cfg).unwrap();
        let limit = infinite_horizon_energy(1.0, 0.5);
        assert!(
            (sol.energy - limit).abs() < 0.01 * limit,
            "{} vs {limit}",
            sol.energy
        );
        assert!(sol.terminal_error < 1e-3);
    }

    #[test]
    fn collocation_matches_dynamic_programming() {
        let cfg = EmpConfig::default();
        let sol = scalar_emp(1.0, 0.5, 20.0, &cfg).unwrap();
        let dp = dp_oracle(1.0, 0.5, 20.0, 400, 400).unwrap();
        assert!(
            (sol.energy - dp).abs() < 0.02 * dp,
            "{} vs {dp}",
            sol.energy
        );
        // Every DP path is admissible, so it cannot beat the infimum over T.
        assert!(dp >= infinite_horizon_energy(1.0, 0.5));
    }

    #[test]
    fn energy_scales_with_noise_and_gap() {
        let cfg = EmpConfig::default();
        let e = |gap: f64, eps: f64| scalar_emp(gap, eps, 20.0, &cfg).unwrap().energy;
        assert!(e(1.0, 5.0) < e(1.0, 0.5));
        assert!(e(1.0, 1e3) < 1e-3);
        assert!(e(2.0_f64.sqrt(), 0.5) > e(1.0, 0.5));
    }

    #[test]
    fn optimum_is_stationary() {
        let cfg = EmpConfig::default();
        let sol = scalar_emp(1.0, 0.5, 20.0, &cfg).unwrap();
        let dt = 20.0 / cfg.intervals as f64;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let mut v: Vec<f64> = (0..sol.theta.len())
                .map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5)
                .collect();
            v[0] = 0.0;
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let delta = 1e-6;
            let shifted = |sgn: f64| -> Vec<f64> {
                sol.theta
                    .iter()
                    .zip(&v)
                    .map(|(t, d)| t + sgn * delta * d / norm)
                    .collect()
            };
            let f = |th: &[f64]| collocation_objective(th, 1.0, 0.5, dt, cfg.terminal_weight).0;
            let dd = (f(&shifted(1.0)) - f(&shifted(-1.0))) / (2.0 * delta);
            assert!(dd.abs() < 1e-4, "directional derivative {dd:e}");
        }
    }

    #[test]
    fn tiny_horizon_is_infeasible() {
        let cfg = EmpConfig {
            intervals: 50,
            ..EmpConfig::default()
        };
        let err = scalar_emp(1.0, 0.01, 1e-4, &cfg);
        assert!(matches!(err, Err(IsoflowError::InfeasibleHorizon { .. })));
    }

    #[test]
    fn tridiagonal_solver() {
        let x = solve_tridiagonal(&[4.0, 4.0, 4.0], &[1.0, 1.0], &[5.0, 6.0, 5.0]).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
        assert!(solve_tridiagonal(&[-1.0, 1.0], &[0.0], &[1.0, 1.0]).is_none());
    }

    #[test]
    fn weights_prefer_the_smaller_gap() {
        let s = Spectrum::certified(vec![1.0, 2.0, 4.0]).unwrap();
        let pred = predicted_transitions(&s, 0.5, 20.0, &EmpConfig::default()).unwrap();
        for from in &pred.states {
            let a = from.lexicographic_index();
            let small = from.swap_values(0).lexicographic_index();
            let large = from.swap_values(1).lexicographic_index();
            assert!(pred.matrix[a][small] > pred.matrix[a][large]);
            assert!((pred.matrix[a].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(pred.edges.len(), 6);
    }

    #[test]
    fn equal_gaps_give_uniform_weights() {
        let s = Spectrum::certified(vec![0.0, 1.0, 2.0 + 1e-9]).unwrap();
        let pred = predicted_transitions(&s, 0.5, 20.0, &EmpConfig::default()).unwrap();
        for row in &pred.matrix {
            for &w in row.iter().filter(|w| **w > 0.0) {
                assert!((w - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kendall_conventions() {
        assert_eq!(kendall_tau(&[1.0], &[2.0]), None);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), Some(1.0));
        assert_eq!(kendall_tau(&[1.0, 2.0], &[2.0, 1.0]), Some(-1.0));
    }

    #[test]
    fn adjacency_required() {
        let s = Spectrum::certified(vec![1.0, 2.0, 4.0]).unwrap();
        let far = Permutation::new(vec![2, 1, 0]).unwrap();
        assert!(matches!(
            ControlProblem::new(&s, &Permutation::identity(3), &far, 0.5, 10.0),
            Err(IsoflowError::NotAdjacent(..))
        ));
        let p = ControlProblem::new(
            &s,
            &Permutation::identity(3),
            &Permutation::new(vec![1, 0, 2]).unwrap(),
            0.5,
            10.0,
        )
        .unwrap();
        assert_eq!(p.lambda_pair, (1.0, 2.0));
        assert!(transition_weight(&p, &EmpConfig::default()).unwrap() > 0.0);
    }
}
