//! Deterministic integration of `Ḣ = [H, [H, π(H)]]`.
//!
//! Each step conjugates by an orthogonal matrix,
//! `H⁺ = e^{-hC} H e^{hC}` with `C = [H, π(H)]`, so the spectrum is kept up
//! to the roundoff of one matrix exponential per step.

use nalgebra::allocator::Allocator;
use nalgebra::{DefaultAllocator, Dim};
use serde::{Deserialize, Serialize};

use crate::error::{IsoflowError, Result};
use crate::kernel::{self, with_dim, Kernel};
use crate::linalg::sym_eigen_sorted;
use crate::manifold::SymState;
use crate::perm::Permutation;
use crate::spectra::Spectrum;

/// Slack allowed on `Ψ` decreasing over one accepted step.
pub const MONOTONE_SLACK: f64 = 1e-12;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub step_size: f64,
    pub max_time: f64,
    /// Stop once `‖[H,[H,π(H)]]‖_F` drops below this.
    pub convergence_tol: f64,
    /// Off-diagonal mass below which a converged state counts as diagonal.
    pub classify_tol: f64,
    /// Record every `record_stride`-th step (the first and last are always kept).
    pub record_stride: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            max_time: 200.0,
            convergence_tol: 1e-10,
            classify_tol: 1e-6,
            record_stride: 10,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(IsoflowError::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive(self.step_size, "step size")?;
        positive(self.max_time, "max time")?;
        positive(self.convergence_tol, "convergence tolerance")?;
        positive(self.classify_tol, "classification tolerance")?;
        if self.record_stride == 0 {
            return Err(IsoflowError::InvalidConfig(
                "record stride must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Default tolerances with a step scaled to the spectrum's spread and a
    /// horizon long enough for the slowest mode, which contracts at a rate
    /// of order `min_gap²`.
    pub fn for_spectrum(spectrum: &Spectrum) -> Self {
        let gap = spectrum.min_gap();
        let slowest = if gap.is_finite() && gap > 0.0 {
            100.0 / (gap * gap)
        } else {
            0.0
        };
        Self {
            step_size: suggested_step(spectrum),
            max_time: slowest.max(Self::default().max_time),
            ..Self::default()
        }
    }
}

/// Largest step for which one exponential-conjugation step never lowers
/// `Ψ` (checked empirically for n <= 6): `1 / (2 spread²)`.
pub fn max_monotone_step(spectrum: &Spectrum) -> f64 {
    let spread = spectrum.spread().max(f64::MIN_POSITIVE);
    0.5 / (spread * spread)
}

/// A comfortable working step: a fifth of [`max_monotone_step`].
pub fn suggested_step(spectrum: &Spectrum) -> f64 {
    0.2 * max_monotone_step(spectrum)
}

/// One step of the isospectral integrator.
pub fn step(state: &SymState, h: f64) -> SymState {
    let m = with_dim!(state.n(), |D| {
        let mut k = Kernel::<D>::new(state.matrix());
        k.flow_step(h);
        k.to_dmatrix()
    });
    SymState::from_conjugation(state.spectrum().clone(), m)
}

/// Label attached to the end point of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalLabel {
    Stable {
        permutation: Permutation,
    },
    NonStableCritical {
        /// Blocks of eigenvalue indices (0-based, canonical order).
        partition: Vec<Vec<usize>>,
        /// Matrix slots occupied by each block, aligned with `partition`.
        slots: Vec<Vec<usize>>,
    },
    DidNotConverge,
}

impl TerminalLabel {
    pub fn permutation(&self) -> Option<&Permutation> {
        match self {
            TerminalLabel::Stable { permutation } => Some(permutation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub potential_values: Vec<f64>,
    pub off_diagonal_mass: Vec<f64>,
    pub terminal_state: SymState,
    pub terminal_label: TerminalLabel,
    pub steps: usize,
    pub final_gradient_norm: f64,
    pub final_step_size: f64,
}

impl TrajectoryRecord {
    pub fn converged(&self) -> bool {
        self.terminal_label != TerminalLabel::DidNotConverge
    }
}

/// Advances until the gradient norm falls below `convergence_tol` or the
/// time exceeds `max_time`. A step that would lower `Ψ` is retried at half
/// the step size, and the halved size is kept.
pub fn integrate(initial: &SymState, cfg: &FlowConfig) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    with_dim!(initial.n(), |D| integrate_in::<D>(initial, cfg))
}

fn integrate_in<D: Dim>(initial: &SymState, cfg: &FlowConfig) -> Result<TrajectoryRecord>
where
    DefaultAllocator: Allocator<D, D>,
{
    let mut k = Kernel::<D>::new(initial.matrix());
    let mut psi = k.potential();
    let mut t = 0.0;
    let mut h = cfg.step_size;
    let mut steps = 0usize;
    let mut times = vec![0.0];
    let mut potentials = vec![psi];
    let mut masses = vec![k.off_diagonal_norm()];
    let mut halvings = 0usize;

    let (converged, grad_norm) = loop {
        let c = k.drift();
        let grad_norm = k.field_norm(&c);
        if grad_norm < cfg.convergence_tol {
            break (true, grad_norm);
        }
        if t >= cfg.max_time {
            break (false, grad_norm);
        }
        let candidate = k.conjugated(&kernel::expm(&(c * -h)));
        let psi_next = candidate.potential();
        if psi_next < psi - MONOTONE_SLACK && halvings < MAX_HALVINGS {
            h *= 0.5;
            halvings += 1;
            continue;
        }
        k = candidate;
        psi = psi_next;
        t += h;
        steps += 1;
        if steps.is_multiple_of(cfg.record_stride) {
            times.push(t);
            potentials.push(psi);
            masses.push(k.off_diagonal_norm());
        }
    };
    if *times.last().unwrap() != t {
        times.push(t);
        potentials.push(psi);
        masses.push(k.off_diagonal_norm());
    }

    let terminal_state = SymState::from_conjugation(initial.spectrum().clone(), k.to_dmatrix());
    let terminal_label = if converged {
        classify_terminal(&terminal_state, cfg.classify_tol)?
    } else {
        TerminalLabel::DidNotConverge
    };
    Ok(TrajectoryRecord {
        times,
        potential_values: potentials,
        off_diagonal_mass: masses,
        terminal_state,
        terminal_label,
        steps,
        final_gradient_norm: grad_norm,
        final_step_size: h,
    })
}

/// Labels a (near-)equilibrium.
///
/// With off-diagonal mass below `tol` the diagonal is matched to the
/// nearest `s_σ` (the ranking of the diagonal entries); a second
/// permutation within `tol` is an [`IsoflowError::AmbiguousMatch`].
/// Otherwise the diagonal entries are clustered by value (blocks share the
/// mean of their eigenvalues) and each cluster's eigenvalues are matched to
/// the spectrum.
pub fn classify_terminal(state: &SymState, tol: f64) -> Result<TerminalLabel> {
    let spectrum = state.spectrum();
    let values = spectrum.values();
    let d: Vec<f64> = state.project_diagonal().iter().copied().collect();
    let vertex_distance = |sigma: &Permutation| -> f64 {
        sigma
            .apply(values)
            .iter()
            .zip(&d)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };

    if state.off_diagonal_mass() < tol {
        let sigma = Permutation::ranking(&d);
        if vertex_distance(&sigma) <= tol {
            for rank in 0..state.n().saturating_sub(1) {
                let other = sigma.swap_values(rank);
                if vertex_distance(&other) <= tol {
                    return Err(IsoflowError::AmbiguousMatch(format!(
                        "{sigma} and {other} are both within {tol:e}"
                    )));
                }
            }
            return Ok(TerminalLabel::Stable { permutation: sigma });
        }
    }

    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let mut clusters: Vec<Vec<usize>> = vec![vec![order[0]]];
    for w in order.windows(2) {
        if d[w[1]] - d[w[0]] > tol {
            clusters.push(Vec::new());
        }
        clusters.last_mut().unwrap().push(w[1]);
    }

    let mut used = vec![false; values.len()];
    let mut pairs: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(clusters.len());
    for mut slots in clusters {
        slots.sort_unstable();
        let sub = state.matrix().select_rows(&slots).select_columns(&slots);
        let (eigs, _) = sym_eigen_sorted(&sub);
        let mut block = Vec::with_capacity(slots.len());
        for e in eigs.iter() {
            let best = (0..values.len())
                .filter(|&k| !used[k])
                .min_by(|&a, &b| (values[a] - e).abs().total_cmp(&(values[b] - e).abs()))
                .expect("cluster sizes sum to n");
            used[best] = true;
            block.push(best);
        }
        block.sort_unstable();
        pairs.push((block, slots));
    }
    pairs.sort_by_key(|(block, _)| block[0]);
    let (partition, slots) = pairs.into_iter().unzip();
    Ok(TerminalLabel::NonStableCritical { partition, slots })
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;

    use super::*;
    use crate::manifold::random_state;

    fn s124() -> Spectrum {
        Spectrum::certified(vec![1.0, 2.0, 4.0]).unwrap()
    }

    #[test]
    fn diagonal_state_is_fixed() {
        let h = SymState::diagonal(s124(), &Permutation::new(vec![2, 0, 1]).unwrap());
        assert_eq!(step(&h, 0.1), h);
        let rec = integrate(&h, &FlowConfig::default()).unwrap();
        assert_eq!(rec.steps, 0);
        assert_eq!(rec.terminal_state, h);
        assert_eq!(
            rec.terminal_label,
            TerminalLabel::Stable {
                permutation: Permutation::new(vec![2, 0, 1]).unwrap()
            }
        );
    }

    #[test]
    fn classify_exact_and_near_diagonal() {
        let d = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 4.0]);
        let h = SymState::new(s124(), d.clone()).unwrap();
        let want = TerminalLabel::Stable {
            permutation: Permutation::new(vec![1, 0, 2]).unwrap(),
        };
        assert_eq!(classify_terminal(&h, 1e-6).unwrap(), want);

        let mut near = d;
        near[(0, 2)] = 1e-12;
        near[(2, 0)] = 1e-12;
        let h = SymState::new(s124(), near).unwrap();
        assert_eq!(classify_terminal(&h, 1e-6).unwrap(), want);
    }

    #[test]
    fn classify_saddle_as_critical() {
        let s = Spectrum::certified(vec![1.0, 2.0]).unwrap();
        let h = SymState::new(s, DMatrix::from_row_slice(2, 2, &[1.5, 0.5, 0.5, 1.5])).unwrap();
        let label = classify_terminal(&h, 1e-6).unwrap();
        assert_eq!(
            label,
            TerminalLabel::NonStableCritical {
                partition: vec![vec![0, 1]],
                slots: vec![vec![0, 1]]
            }
        );
        // The flow cannot leave an exact equilibrium.
        let rec = integrate(&h, &FlowConfig::default()).unwrap();
        assert_eq!(rec.terminal_label, label);
    }

    #[test]
    fn ambiguous_match_is_an_error() {
        let s = Spectrum::certified(vec![1.0, 1.0 + 1e-7]).unwrap();
        let h = SymState::diagonal(s, &Permutation::identity(2));
        assert!(matches!(
            classify_terminal(&h, 1e-6),
            Err(IsoflowError::AmbiguousMatch(_))
        ));
    }

    #[test]
    fn random_start_converges_to_a_vertex() {
        let s = s124();
        let cfg = FlowConfig::for_spectrum(&s);
        let rec = integrate(&random_state(&s, 11), &cfg).unwrap();
        assert!(
            rec.terminal_label.permutation().is_some(),
            "{:?}",
            rec.terminal_label
        );
        assert!(rec
            .potential_values
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-10));
        assert!(rec.terminal_state.spectrum_error() < 1e-10);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = FlowConfig {
            step_size: 0.0,
            ..FlowConfig::default()
        };
        assert!(cfg.validate().is_err());
        let h = SymState::diagonal(s124(), &Permutation::identity(3));
        assert!(integrate(&h, &cfg).is_err());
    }

    #[test]
    fn horizon_exhaustion_is_labelled() {
        let s = s124();
        let cfg = FlowConfig {
            max_time: 0.01,
            ..FlowConfig::for_spectrum(&s)
        };
        let rec = integrate(&random_state(&s, 2), &cfg).unwrap();
        assert_eq!(rec.terminal_label, TerminalLabel::DidNotConverge);
        assert!(!rec.converged());
    }
}
