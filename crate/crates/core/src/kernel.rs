//! Step kernels shared by the deterministic and stochastic integrators,
//! generic over nalgebra's dimension type so small systems run on
//! stack-allocated matrices.

use nalgebra::allocator::Allocator;
use nalgebra::{DMatrix, DefaultAllocator, Dim, OMatrix};
use rand::Rng;
use rand_distr::StandardNormal;

/// Degree of the Taylor core in [`expm`].
pub(crate) const TAYLOR_DEGREE: usize = 12;
/// One-norm the argument is scaled down to before the Taylor series.
pub(crate) const SCALED_NORM: f64 = 0.25;

/// Runs `$body` with `$D` bound to `Const<n>` for `n <= 6` and to `Dyn`
/// otherwise.
macro_rules! with_dim {
    ($n:expr, |$D:ident| $body:expr) => {
        match $n {
            1 => {
                type $D = nalgebra::Const<1>;
                $body
            }
            2 => {
                type $D = nalgebra::Const<2>;
                $body
            }
            3 => {
                type $D = nalgebra::Const<3>;
                $body
            }
            4 => {
                type $D = nalgebra::Const<4>;
                $body
            }
            5 => {
                type $D = nalgebra::Const<5>;
                $body
            }
            6 => {
                type $D = nalgebra::Const<6>;
                $body
            }
            _ => {
                type $D = nalgebra::Dyn;
                $body
            }
        }
    };
}
pub(crate) use with_dim;

pub(crate) fn one_norm<D: Dim>(a: &OMatrix<f64, D, D>) -> f64
where
    DefaultAllocator: Allocator<D, D>,
{
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Scaling and squaring around a degree-12 Taylor core; after scaling
/// `‖A‖₁ <= 1/4`, where the truncation error is below 1e-17 relative.
pub(crate) fn expm<D: Dim>(a: &OMatrix<f64, D, D>) -> OMatrix<f64, D, D>
where
    DefaultAllocator: Allocator<D, D>,
{
    let (rows, _) = a.shape_generic();
    let n = a.nrows();
    let norm = one_norm(a);
    let squarings = if norm > SCALED_NORM {
        (norm / SCALED_NORM).log2().ceil() as i32
    } else {
        0
    };
    let b = a * 2f64.powi(-squarings);
    // Horner: I + B(I + B/2(I + B/3(...))).
    let mut acc = OMatrix::<f64, D, D>::identity_generic(rows, rows);
    for k in (1..=TAYLOR_DEGREE).rev() {
        acc = &b * &acc;
        acc *= 1.0 / k as f64;
        for i in 0..n {
            acc[(i, i)] += 1.0;
        }
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    acc
}

/// A symmetric matrix being advanced in place.
pub(crate) struct Kernel<D: Dim>
where
    DefaultAllocator: Allocator<D, D>,
{
    pub m: OMatrix<f64, D, D>,
}

impl<D: Dim> Kernel<D>
where
    DefaultAllocator: Allocator<D, D>,
{
    pub fn new(m: &DMatrix<f64>) -> Self {
        let d = D::from_usize(m.nrows());
        Self {
            m: OMatrix::from_fn_generic(d, d, |i, j| m[(i, j)]),
        }
    }

    pub fn n(&self) -> usize {
        self.m.nrows()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.m[(i, j)])
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.m[(i, i)]
    }

    pub fn potential(&self) -> f64 {
        0.5 * (0..self.n()).map(|i| self.m[(i, i)].powi(2)).sum::<f64>()
    }

    /// `C = [H, π(H)]`, entrywise `H_ij (d_j - d_i)`.
    pub fn drift(&self) -> OMatrix<f64, D, D> {
        let mut c = self.m.clone();
        let n = self.n();
        for j in 0..n {
            let dj = self.m[(j, j)];
            for i in 0..n {
                c[(i, j)] *= dj - self.m[(i, i)];
            }
        }
        c
    }

    /// `‖[H, C]‖_F`, the norm of the flow field.
    pub fn field_norm(&self, c: &OMatrix<f64, D, D>) -> f64 {
        (&self.m * c - c * &self.m).norm()
    }

    pub fn off_diagonal_norm(&self) -> f64 {
        let n = self.n();
        let mut s = 0.0;
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    s += self.m[(i, j)].powi(2);
                }
            }
        }
        s.sqrt()
    }

    /// `H ← Q H Qᵀ`, re-symmetrized.
    pub fn conjugate(&mut self, q: &OMatrix<f64, D, D>) {
        let mut out = q * &self.m * q.transpose();
        let n = self.n();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        self.m = out;
    }

    /// Conjugated copy without touching `self`.
    pub fn conjugated(&self, q: &OMatrix<f64, D, D>) -> Self {
        let mut k = Self { m: self.m.clone() };
        k.conjugate(q);
        k
    }

    /// One deterministic step `H ← e^{-hC} H e^{hC}`.
    pub fn flow_step(&mut self, h: f64) {
        let s = self.drift() * -h;
        self.conjugate(&expm(&s));
    }

    /// One noisy step: `S = -hC + (ε/√2) Σ_{i<j} Ω_ij ξ_ij √h`,
    /// `H ← e^S H e^{-S}`.
    pub fn sde_step<R: Rng + ?Sized>(&mut self, h: f64, epsilon: f64, rng: &mut R) {
        if epsilon == 0.0 {
            self.flow_step(h);
            return;
        }
        let mut s = self.drift() * -h;
        let scale = epsilon * (0.5 * h).sqrt();
        let n = self.n();
        for i in 0..n {
            for j in (i + 1)..n {
                let xi: f64 = rng.sample(StandardNormal);
                s[(i, j)] += scale * xi;
                s[(j, i)] -= scale * xi;
            }
        }
        self.conjugate(&expm(&s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Const, Dyn};

    #[test]
    fn static_and_dynamic_agree() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.3, 2.0, 0.5, -0.2, 0.5, 4.0]);
        let mut a = Kernel::<Const<3>>::new(&m);
        let mut b = Kernel::<Dyn>::new(&m);
        for _ in 0..100 {
            a.flow_step(0.01);
            b.flow_step(0.01);
        }
        assert!((a.to_dmatrix() - b.to_dmatrix()).norm() < 1e-13);
    }

    #[test]
    fn drift_is_the_commutator() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.3, 2.0, 0.5, -0.2, 0.5, 4.0]);
        let k = Kernel::<Dyn>::new(&m);
        let d = DMatrix::from_diagonal(&m.diagonal());
        assert!((k.drift() - (&m * &d - &d * &m)).norm() < 1e-15);
    }

    #[test]
    fn dispatch_covers_all_sizes() {
        for n in 1..9 {
            let got = with_dim!(n, |D| Kernel::<D>::new(&DMatrix::identity(n, n)).n());
            assert_eq!(got, n);
        }
    }
}
