//! The isospectral manifold `Sym(Λ)`: states, skew generators, the normal
//! metric, the diagonal potential `Ψ(H) = ½ Σ dᵢ²` and its gradient field
//! `[H, [H, π(H)]]`.
//!
//! States are produced by orthogonal conjugation of `diag(Λ)` (or by the
//! flows, which conjugate); externally supplied matrices are checked.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{IsoflowError, Result};
use crate::linalg::{
    asymmetry, commutator, conjugate, diag_part, off_diagonal_norm, pair_generator,
    sorted_eigenvalues, symmetrize, trace_product,
};
use crate::perm::Permutation;
use crate::spectra::Spectrum;

/// Eigenvalue agreement required of a valid state.
pub const SPECTRUM_TOL: f64 = 1e-8;
/// Eigenvalue agreement asserted right after construction.
pub const CONSTRUCTION_TOL: f64 = 1e-10;

/// A point of `Sym(Λ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "StateFile", try_from = "StateFile")]
pub struct SymState {
    matrix: DMatrix<f64>,
    spectrum: Spectrum,
}

impl SymState {
    /// Validates a user-supplied matrix: square of size n, symmetric up to
    /// roundoff, eigenvalues matching the spectrum within [`SPECTRUM_TOL`].
    pub fn new(spectrum: Spectrum, mut matrix: DMatrix<f64>) -> Result<Self> {
        let n = spectrum.n();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(IsoflowError::DimensionMismatch {
                expected: n,
                got: matrix.nrows().max(matrix.ncols()),
            });
        }
        let skew = asymmetry(&matrix);
        if skew > 1e-10 * (1.0 + matrix.norm()) {
            return Err(IsoflowError::InvalidState(format!(
                "matrix is not symmetric (max |H_ij - H_ji| = {skew:e})"
            )));
        }
        symmetrize(&mut matrix);
        let state = Self { matrix, spectrum };
        let err = state.spectrum_error();
        if err > SPECTRUM_TOL {
            return Err(IsoflowError::InvalidState(format!(
                "eigenvalues differ from the spectrum by {err:e}"
            )));
        }
        Ok(state)
    }

    /// Wraps a matrix known to lie on the manifold (result of a conjugation).
    pub(crate) fn from_conjugation(spectrum: Spectrum, mut matrix: DMatrix<f64>) -> Self {
        symmetrize(&mut matrix);
        Self { matrix, spectrum }
    }

    /// The stable diagonal state `s_σ`.
    pub fn diagonal(spectrum: Spectrum, sigma: &Permutation) -> Self {
        let d = DVector::from_vec(sigma.apply(spectrum.values()));
        Self {
            matrix: DMatrix::from_diagonal(&d),
            spectrum,
        }
    }

    /// `QᵀΛQ` for an orthogonal `Q`.
    pub fn from_frame(spectrum: Spectrum, q: &DMatrix<f64>) -> Self {
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(spectrum.values()));
        let m = q.transpose() * d * q;
        Self::from_conjugation(spectrum, m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn n(&self) -> usize {
        self.spectrum.n()
    }

    /// `(d₁, …, dₙ)`.
    pub fn project_diagonal(&self) -> DVector<f64> {
        self.matrix.diagonal()
    }

    pub fn potential(&self) -> f64 {
        potential_of(&self.matrix)
    }

    /// `[H, π(H)]`, the skew generator of the gradient.
    pub fn commutator_with_diagonal(&self) -> DMatrix<f64> {
        commutator(&self.matrix, &diag_part(&self.matrix))
    }

    /// `[H, [H, π(H)]]`.
    pub fn gradient_field(&self) -> DMatrix<f64> {
        commutator(&self.matrix, &self.commutator_with_diagonal())
    }

    /// `dΨ/dt = -tr([H, π(H)]²)` along the flow.
    pub fn potential_rate(&self) -> f64 {
        let c = self.commutator_with_diagonal();
        -trace_product(&c, &c)
    }

    /// Largest deviation of the sorted eigenvalues from the spectrum.
    pub fn spectrum_error(&self) -> f64 {
        sorted_eigenvalues(&self.matrix)
            .iter()
            .zip(self.spectrum.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn off_diagonal_mass(&self) -> f64 {
        off_diagonal_norm(&self.matrix)
    }

    pub fn distance(&self, other: &DMatrix<f64>) -> f64 {
        (&self.matrix - other).norm()
    }

    /// `Q H Qᵀ` for orthogonal `Q`.
    pub fn conjugated_by(&self, q: &DMatrix<f64>) -> Self {
        Self::from_conjugation(self.spectrum.clone(), conjugate(q, &self.matrix))
    }

    /// `P H Pᵀ`, moving slot `k` to slot `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(perm[i], perm[j])] = self.matrix[(i, j)];
            }
        }
        Self {
            matrix: m,
            spectrum: self.spectrum.clone(),
        }
    }

    /// `tr(Hᵏ)` for `k = 1..=n`.
    pub fn trace_powers(&self) -> Vec<f64> {
        let mut power = self.matrix.clone();
        let mut out = Vec::with_capacity(self.n());
        for _ in 0..self.n() {
            out.push(power.trace());
            power = &power * &self.matrix;
        }
        out
    }
}

pub(crate) fn potential_of(m: &DMatrix<f64>) -> f64 {
    0.5 * m.diagonal().iter().map(|d| d * d).sum::<f64>()
}

/// A real skew-symmetric matrix `Ω`, acting on states through `[H, Ω]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewGenerator(DMatrix<f64>);

impl SkewGenerator {
    /// Requires `Ωᵀ = -Ω` exactly.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(IsoflowError::InvalidState("generator is not square".into()));
        }
        if matrix != -matrix.transpose() {
            return Err(IsoflowError::InvalidState(
                "generator is not skew-symmetric".into(),
            ));
        }
        Ok(Self(matrix))
    }

    /// Skew part `(M - Mᵀ)/2`, which is exactly skew in floating point.
    pub fn skew_part(m: &DMatrix<f64>) -> Self {
        Self((m - m.transpose()) * 0.5)
    }

    pub fn pair(n: usize, i: usize, j: usize) -> Self {
        Self(pair_generator(n, i, j))
    }

    pub fn zero(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    /// Tangent vector `[H, Ω]` at `state`.
    pub fn tangent_at(&self, state: &SymState) -> DMatrix<f64> {
        commutator(state.matrix(), &self.0)
    }

    /// Random generator with i.i.d. standard normal upper entries.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v: f64 = rng.sample(StandardNormal);
                m[(i, j)] = v;
                m[(j, i)] = -v;
            }
        }
        Self(m)
    }
}

impl std::ops::Add for &SkewGenerator {
    type Output = SkewGenerator;
    fn add(self, rhs: &SkewGenerator) -> SkewGenerator {
        SkewGenerator(&self.0 + &rhs.0)
    }
}

impl std::ops::Mul<f64> for &SkewGenerator {
    type Output = SkewGenerator;
    fn mul(self, rhs: f64) -> SkewGenerator {
        SkewGenerator(&self.0 * rhs)
    }
}

/// Normal metric `g([H,Ω₁],[H,Ω₂]) = -tr(Ω₁Ω₂)`.
pub fn normal_metric(a: &SkewGenerator, b: &SkewGenerator) -> Result<f64> {
    if a.n() != b.n() {
        return Err(IsoflowError::DimensionMismatch {
            expected: a.n(),
            got: b.n(),
        });
    }
    Ok(-trace_product(a.matrix(), b.matrix()))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn haar_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// `QᵀΛQ` with Haar-random `Q`, reproducible from `seed`.
pub fn random_state(spectrum: &Spectrum, seed: u64) -> SymState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_state_with(spectrum, &mut rng)
}

pub fn random_state_with<R: Rng + ?Sized>(spectrum: &Spectrum, rng: &mut R) -> SymState {
    let q = haar_orthogonal(spectrum.n(), rng);
    SymState::from_frame(spectrum.clone(), &q)
}

/// A matrix with eigenvalues `sub_spectrum` and every diagonal entry equal
/// to their mean, built by Givens rotations from `diag(sub_spectrum)`.
///
/// Each rotation acts on a pair of diagonal entries straddling the mean and
/// moves one of them exactly onto it; entries already at the mean are never
/// touched again, so at most `n - 1` rotations are needed.
pub fn constant_diagonal_state(sub_spectrum: &[f64]) -> Result<SymState> {
    if sub_spectrum.len() < 2 {
        return Err(IsoflowError::InvalidSpectrum(
            "constant-diagonal construction needs at least two eigenvalues".into(),
        ));
    }
    let spectrum = Spectrum::new(sub_spectrum.to_vec())?;
    let n = spectrum.n();
    let mu = spectrum.mean();
    let scale = spectrum
        .values()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let mut h = DMatrix::from_diagonal(&DVector::from_column_slice(spectrum.values()));
    let mut done = vec![false; n];

    for _ in 0..n - 1 {
        let open: Vec<usize> = (0..n).filter(|&k| !done[k]).collect();
        let above = open
            .iter()
            .copied()
            .filter(|&k| h[(k, k)] > mu)
            .max_by(|&a, &b| h[(a, a)].total_cmp(&h[(b, b)]));
        let below = open
            .iter()
            .copied()
            .filter(|&k| h[(k, k)] < mu)
            .min_by(|&a, &b| h[(a, a)].total_cmp(&h[(b, b)]));
        let (i, j) = match (above, below) {
            (Some(i), Some(j)) => (i, j),
            _ => break,
        };
        let (a, c, b) = (h[(i, i)], h[(j, j)], h[(i, j)]);
        let mid = 0.5 * (a + c);
        let half = 0.5 * (a - c);
        let radius = half.hypot(b);
        let phase = b.atan2(half);
        let two_t = ((mu - mid) / radius).clamp(-1.0, 1.0).acos() - phase;
        let t = 0.5 * two_t;
        let mut g = DMatrix::identity(n, n);
        g[(i, i)] = t.cos();
        g[(i, j)] = -t.sin();
        g[(j, i)] = t.sin();
        g[(j, j)] = t.cos();
        h = conjugate(&g, &h);
        done[i] = true;
    }

    let residual = h
        .diagonal()
        .iter()
        .map(|d| (d - mu).abs())
        .fold(0.0, f64::max);
    if residual > 1e-12 * scale * n as f64 {
        return Err(IsoflowError::ConstructionStalled(format!(
            "diagonal deviates from the mean by {residual:e}"
        )));
    }
    for k in 0..n {
        h[(k, k)] = mu;
    }
    let state = SymState::from_conjugation(spectrum, h);
    let err = state.spectrum_error();
    if err > CONSTRUCTION_TOL {
        return Err(IsoflowError::ConstructionStalled(format!(
            "eigenvalues drifted by {err:e}"
        )));
    }
    Ok(state)
}

/// Serializable view of a state: row-major matrix plus its spectrum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateFile {
    pub spectrum: Spectrum,
    pub matrix: Vec<Vec<f64>>,
}

impl From<&SymState> for StateFile {
    fn from(s: &SymState) -> Self {
        let n = s.n();
        StateFile {
            spectrum: s.spectrum.clone(),
            matrix: (0..n)
                .map(|i| (0..n).map(|j| s.matrix[(i, j)]).collect())
                .collect(),
        }
    }
}

impl From<SymState> for StateFile {
    fn from(s: SymState) -> Self {
        StateFile::from(&s)
    }
}

impl TryFrom<StateFile> for SymState {
    type Error = IsoflowError;
    fn try_from(f: StateFile) -> Result<Self> {
        let n = f.matrix.len();
        if f.matrix.iter().any(|row| row.len() != n) {
            return Err(IsoflowError::InvalidState(
                "matrix rows have unequal length".into(),
            ));
        }
        let m = DMatrix::from_fn(n, n, |i, j| f.matrix[i][j]);
        SymState::new(f.spectrum, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s124() -> Spectrum {
        Spectrum::certified(vec![1.0, 2.0, 4.0]).unwrap()
    }

    #[test]
    fn diagonal_projection_and_potential() {
        let h = SymState::diagonal(s124(), &Permutation::identity(3));
        assert_eq!(h.project_diagonal().as_slice(), &[1.0, 2.0, 4.0]);
        assert_eq!(h.potential(), 10.5);
        assert_eq!(h.gradient_field(), DMatrix::zeros(3, 3));
        assert_eq!(h.potential_rate(), 0.0);
    }

    #[test]
    fn two_by_two_saddle() {
        let s = Spectrum::certified(vec![1.0, 2.0]).unwrap();
        let h = SymState::new(s, DMatrix::from_row_slice(2, 2, &[1.5, 0.5, 0.5, 1.5])).unwrap();
        assert_eq!(h.project_diagonal().as_slice(), &[1.5, 1.5]);
        assert_eq!(h.potential(), 2.25);
        assert_eq!(h.gradient_field(), DMatrix::zeros(2, 2));
        assert_eq!(h.potential_rate(), 0.0);
    }

    #[test]
    fn general_two_by_two_gradient() {
        // H = [[d1, h], [h, d2]]: [H, π(H)] has off-diagonal h(d2 - d1), and
        // the gradient's top-left entry is 2h²(d1 - d2).
        let theta: f64 = 0.3;
        let s = Spectrum::certified(vec![1.0, 2.0]).unwrap();
        let q =
            DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let h = SymState::from_frame(s, &q);
        let (d1, d2, off) = (h.matrix()[(0, 0)], h.matrix()[(1, 1)], h.matrix()[(0, 1)]);
        let c = h.commutator_with_diagonal();
        assert!((c[(0, 1)] - off * (d2 - d1)).abs() < 1e-14);
        let f = h.gradient_field();
        assert!((f[(0, 0)] - 2.0 * off * off * (d1 - d2)).abs() < 1e-14);
        assert!(h.potential_rate() > 0.0);

        // Central difference of t ↦ e^{-tC} H e^{tC}, C = [H, π(H)].
        let dt = 1e-5;
        let curve = |t: f64| conjugate(&(&c * -t).exp(), h.matrix());
        let fd = (curve(dt) - curve(-dt)) / (2.0 * dt);
        assert!((fd - &f).norm() < 1e-9 * f.norm().max(1.0));
    }

    #[test]
    fn rejects_bad_matrices() {
        let s = Spectrum::certified(vec![1.0, 2.0]).unwrap();
        assert!(SymState::new(
            s.clone(),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0])
        )
        .is_err());
        assert!(SymState::new(
            s.clone(),
            DMatrix::from_row_slice(2, 2, &[1.5, 0.5, 0.4, 1.5])
        )
        .is_err());
        assert!(SymState::new(s, DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn normal_metric_of_pair_generator() {
        let g = SkewGenerator::pair(4, 1, 3);
        assert_eq!(normal_metric(&g, &g).unwrap(), 2.0);
        assert!(normal_metric(&g, &SkewGenerator::pair(3, 0, 1)).is_err());
    }

    #[test]
    fn skew_generator_validation() {
        assert!(SkewGenerator::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])).is_ok());
        assert!(SkewGenerator::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).is_err());
    }

    #[test]
    fn random_state_is_reproducible_and_isospectral() {
        let a = random_state(&s124(), 7);
        let b = random_state(&s124(), 7);
        assert_eq!(a, b);
        assert!(a.spectrum_error() < 1e-10);
        assert_ne!(a, random_state(&s124(), 8));
    }

    #[test]
    fn constant_diagonal_pair_is_the_saddle() {
        let h = constant_diagonal_state(&[1.0, 2.0]).unwrap();
        let m = h.matrix();
        assert!((m[(0, 0)] - 1.5).abs() < 1e-15 && (m[(1, 1)] - 1.5).abs() < 1e-15);
        assert!((m[(0, 1)].abs() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn constant_diagonal_triple() {
        let h = constant_diagonal_state(&[1.0, 2.0, 4.0]).unwrap();
        for k in 0..3 {
            assert!((h.matrix()[(k, k)] - 7.0 / 3.0).abs() < 1e-10);
        }
        assert!(h.spectrum_error() < 1e-10);
        assert!(h.gradient_field().norm() < 1e-10);
    }

    #[test]
    fn constant_diagonal_needs_two_values() {
        assert!(constant_diagonal_state(&[1.0]).is_err());
    }

    #[test]
    fn state_file_round_trip() {
        let h = random_state(&s124(), 3);
        let f = StateFile::from(&h);
        let json = serde_json::to_string(&f).unwrap();
        let back: SymState = serde_json::from_str::<StateFile>(&json)
            .unwrap()
            .try_into()
            .unwrap();
        assert!((back.matrix() - h.matrix()).norm() < 1e-15);
    }
}
