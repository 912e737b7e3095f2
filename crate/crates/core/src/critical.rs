//! Critical manifolds of the diagonal potential.
//!
//! Every equilibrium is, up to a permutation of slots, block diagonal with
//! each block having constant diagonal equal to the mean of its
//! eigenvalues. For a partition `α` of the spectrum and a placement of its
//! blocks onto slots this module builds a representative, the normal-space
//! basis `𝒩 = 𝒩_o ∪ 𝒩_d`, the spectrum of the operator `L_ℋ` induced by
//! the Hessian, and the index / co-index.
//!
//! Sign convention: the flow ascends `Ψ`, so stable manifolds are local
//! maxima. The index counts negative Hessian eigenvalues on the normal
//! space, the co-index positive ones; co-index 0 means stable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IsoflowError, Result};
use crate::linalg::{
    commutator, diag_part, generalized_sym_eigen, sym_eigen_sorted, trace_product, upper_pairs,
};
use crate::manifold::{constant_diagonal_state, SkewGenerator, SymState};
use crate::perm::Permutation;
use crate::spectra::{enumerate_partitions, Partition, Spectrum};

/// `‖[H, π(H)]‖_F` allowed at an equilibrium, relative to `max(1, ‖H‖²)`.
pub const EQUILIBRIUM_TOL: f64 = 1e-10;
/// `|λ|` below which an `L_ℋ` eigenvalue counts as zero.
pub const DEGENERACY_TOL: f64 = 1e-10;

/// `½ Σ (nᵢ - 1)(nᵢ - 2)`.
pub fn manifold_dimension(partition: &Partition) -> usize {
    partition
        .block_sizes
        .iter()
        .map(|&s| if s >= 2 { (s - 1) * (s - 2) / 2 } else { 0 })
        .sum()
}

/// `Σ_{p<q} n_p n_q + Σ (nᵢ - 1)`.
pub fn normal_dimension(partition: &Partition) -> usize {
    let sizes = &partition.block_sizes;
    let mut off = 0;
    for p in 0..sizes.len() {
        for q in (p + 1)..sizes.len() {
            off += sizes[p] * sizes[q];
        }
    }
    off + sizes.iter().map(|s| s - 1).sum::<usize>()
}

/// `½ n (n - 1)`.
pub fn manifold_total_dimension(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

fn check_equilibrium(h: &DMatrix<f64>) -> Result<()> {
    let c = commutator(h, &diag_part(h)).norm();
    if c > EQUILIBRIUM_TOL * h.norm_squared().max(1.0) {
        return Err(IsoflowError::NotEquilibrium(c));
    }
    Ok(())
}

/// Hessian of `Ψ` at an equilibrium, on the tangent vectors `[H,Ω₁]`,
/// `[H,Ω₂]`:
///
/// `ℋ = -tr([H,Ω₁][π(H),Ω₂]) + ⟨π([H,Ω₁]), π([H,Ω₂])⟩`.
///
/// This equals `d²/dt² Ψ(e^{tΩ} H e^{-tΩ})` at `t = 0` when `Ω₁ = Ω₂ = Ω`.
pub fn hessian_form(state: &SymState, a: &SkewGenerator, b: &SkewGenerator) -> Result<f64> {
    check_equilibrium(state.matrix())?;
    Ok(hessian_unchecked(state.matrix(), a.matrix(), b.matrix()))
}

fn hessian_unchecked(h: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d = diag_part(h);
    let ta = commutator(h, a);
    let tb = commutator(h, b);
    let first = -trace_product(&ta, &commutator(&d, b));
    let second: f64 = ta
        .diagonal()
        .iter()
        .zip(tb.diagonal().iter())
        .map(|(x, y)| x * y)
        .sum();
    first + second
}

/// Gram matrix `ℋ(Ω_a, Ω_b)` over a list of generators.
pub fn hessian_gram(state: &SymState, generators: &[SkewGenerator]) -> Result<DMatrix<f64>> {
    check_equilibrium(state.matrix())?;
    let m = generators.len();
    let mut g = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let v = hessian_unchecked(
                state.matrix(),
                generators[a].matrix(),
                generators[b].matrix(),
            );
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    Ok(g)
}

/// Hessian Gram matrix over the pair generators `e_i e_jᵀ - e_j e_iᵀ`, i.e.
/// on the whole tangent space.
pub fn full_tangent_hessian(state: &SymState) -> Result<DMatrix<f64>> {
    let n = state.n();
    let gens: Vec<SkewGenerator> = upper_pairs(n)
        .into_iter()
        .map(|(i, j)| SkewGenerator::pair(n, i, j))
        .collect();
    hessian_gram(state, &gens)
}

/// Number of eigenvalues of the full tangent Hessian with `|λ| < cutoff`.
pub fn tangent_nullity(state: &SymState, cutoff: f64) -> Result<usize> {
    let g = full_tangent_hessian(state)?;
    let (vals, _) = sym_eigen_sorted(&g);
    Ok(vals.iter().filter(|v| v.abs() < cutoff).count())
}

/// Which part of `𝒩` a basis element belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisLabel {
    /// `N_{pq,ij}`: blocks `p < q`, eigenvector `i` of block `p`, `j` of block `q`.
    OffDiagonal {
        p: usize,
        q: usize,
        i: usize,
        j: usize,
    },
    /// `N_{b,j}`: the `j`-th element built inside block `b`.
    Diagonal { block: usize, j: usize },
}

#[derive(Debug, Clone)]
pub struct BasisElement {
    pub label: BasisLabel,
    pub generator: SkewGenerator,
    /// `N = [H, Ω]`.
    pub tangent: DMatrix<f64>,
    /// `-(μ_p - μ_q)/(λ_pi - λ_qj)` for off-diagonal elements.
    pub analytic_eigenvalue: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct HessianBasis {
    pub off_diag: Vec<BasisElement>,
    pub diag: Vec<BasisElement>,
}

impl HessianBasis {
    pub fn len(&self) -> usize {
        self.off_diag.len() + self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn elements(&self) -> impl Iterator<Item = &BasisElement> {
        self.off_diag.iter().chain(self.diag.iter())
    }

    pub fn generators(&self) -> Vec<SkewGenerator> {
        self.elements().map(|e| e.generator.clone()).collect()
    }

    /// Trace Gram `tr(N_a N_b)`.
    pub fn trace_gram(&self) -> DMatrix<f64> {
        let elems: Vec<&BasisElement> = self.elements().collect();
        let m = elems.len();
        DMatrix::from_fn(m, m, |a, b| {
            trace_product(&elems[a].tangent, &elems[b].tangent)
        })
    }
}

/// Builds `𝒩` at an equilibrium whose blocks occupy `slots` (one slot list
/// per block, in partition order).
///
/// `𝒩_o` uses the block eigenvectors: `Ω = v_pi v_qjᵀ - v_qj v_piᵀ`, giving
/// `N = (λ_pi - λ_qj)(v_pi v_qjᵀ + v_qj v_piᵀ)`. `𝒩_d` solves
/// `π([H_b, Ω̃]) = u_j` for a Helmert basis `{u_j}` of `e⊥` by the
/// minimum-norm least-squares solution, which keeps `N` normal to the
/// critical manifold.
pub fn build_hessian_basis_at(state: &SymState, slots: &[Vec<usize>]) -> Result<HessianBasis> {
    check_equilibrium(state.matrix())?;
    let h = state.matrix();
    let n = state.n();

    struct Block {
        mean: f64,
        values: DVector<f64>,
        vectors: Vec<DVector<f64>>,
    }
    let blocks: Vec<Block> = slots
        .iter()
        .map(|sl| {
            let sub = h.select_rows(sl).select_columns(sl);
            let (values, local) = sym_eigen_sorted(&sub);
            let vectors = (0..sl.len())
                .map(|c| {
                    let mut v = DVector::zeros(n);
                    for (k, &slot) in sl.iter().enumerate() {
                        v[slot] = local[(k, c)];
                    }
                    v
                })
                .collect();
            let mean = sl.iter().map(|&s| h[(s, s)]).sum::<f64>() / sl.len() as f64;
            Block {
                mean,
                values,
                vectors,
            }
        })
        .collect();

    let mut off_diag = Vec::new();
    for p in 0..blocks.len() {
        for q in (p + 1)..blocks.len() {
            for i in 0..blocks[p].vectors.len() {
                for j in 0..blocks[q].vectors.len() {
                    let vp = &blocks[p].vectors[i];
                    let vq = &blocks[q].vectors[j];
                    let omega = vp * vq.transpose() - vq * vp.transpose();
                    let generator = SkewGenerator::skew_part(&omega);
                    let tangent = commutator(h, generator.matrix());
                    let gap = blocks[p].values[i] - blocks[q].values[j];
                    off_diag.push(BasisElement {
                        label: BasisLabel::OffDiagonal { p, q, i, j },
                        generator,
                        tangent,
                        analytic_eigenvalue: Some(-(blocks[p].mean - blocks[q].mean) / gap),
                    });
                }
            }
        }
    }

    let mut diag = Vec::new();
    for (b, sl) in slots.iter().enumerate() {
        let size = sl.len();
        if size < 2 {
            continue;
        }
        let sub = h.select_rows(sl).select_columns(sl);
        let pairs = upper_pairs(size);
        // Column (k,l): π([H_b, E_kl]) where E_kl is the local pair generator.
        let mut a = DMatrix::zeros(size, pairs.len());
        for (c, &(k, l)) in pairs.iter().enumerate() {
            let e = crate::linalg::pair_generator(size, k, l);
            let image = commutator(&sub, &e);
            for r in 0..size {
                a[(r, c)] = image[(r, r)];
            }
        }
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-10 * smax.max(1.0))
            .count();
        if rank != size - 1 {
            return Err(IsoflowError::RankDeficient {
                rank,
                expected: size - 1,
            });
        }
        let pinv = svd
            .pseudo_inverse(1e-10 * smax.max(1.0))
            .map_err(|e| IsoflowError::InvalidState(e.to_string()))?;
        for j in 1..size {
            let mut u = DVector::zeros(size);
            let norm = ((j * (j + 1)) as f64).sqrt();
            for r in 0..j {
                u[r] = 1.0 / norm;
            }
            u[j] = -(j as f64) / norm;
            let x = &pinv * &u;
            let mut omega = DMatrix::zeros(n, n);
            for (c, &(k, l)) in pairs.iter().enumerate() {
                omega[(sl[k], sl[l])] = x[c];
                omega[(sl[l], sl[k])] = -x[c];
            }
            let generator = SkewGenerator::new(omega).expect("built skew");
            let tangent = commutator(h, generator.matrix());
            diag.push(BasisElement {
                label: BasisLabel::Diagonal { block: b, j: j - 1 },
                generator,
                tangent,
                analytic_eigenvalue: None,
            });
        }
    }
    Ok(HessianBasis { off_diag, diag })
}

/// Eigen-decomposition of `L_ℋ` on the normal space, defined by
/// `ℋ(N, ·) = tr(L_ℋ(N) ·)`: the generalized problem `G_ℋ x = λ G_tr x`.
#[derive(Debug, Clone)]
pub struct LOperatorSpectrum {
    pub values: Vec<f64>,
    /// Coefficients over the basis (columns, aligned with `values`).
    pub coefficients: DMatrix<f64>,
}

pub fn l_operator_spectrum(state: &SymState, basis: &HessianBasis) -> Result<LOperatorSpectrum> {
    if basis.is_empty() {
        return Ok(LOperatorSpectrum {
            values: Vec::new(),
            coefficients: DMatrix::zeros(0, 0),
        });
    }
    let gh = hessian_gram(state, &basis.generators())?;
    let gt = basis.trace_gram();
    let (values, coefficients) = generalized_sym_eigen(&gh, &gt)
        .ok_or_else(|| IsoflowError::InvalidState("normal basis is linearly dependent".into()))?;
    Ok(LOperatorSpectrum {
        values: values.iter().copied().collect(),
        coefficients,
    })
}

/// `(index, co-index)`: counts of negative and positive eigenvalues.
/// Any eigenvalue within [`DEGENERACY_TOL`] of zero is an error.
pub fn index_coindex(eigenvalues: &[f64]) -> Result<(usize, usize)> {
    if let Some(&z) = eigenvalues.iter().find(|v| v.abs() < DEGENERACY_TOL) {
        return Err(IsoflowError::Degenerate(z));
    }
    let neg = eigenvalues.iter().filter(|&&v| v < 0.0).count();
    Ok((neg, eigenvalues.len() - neg))
}

/// One critical manifold `P E_α Pᵀ` of the catalog.
#[derive(Debug, Clone)]
pub struct CriticalManifold {
    pub partition: Partition,
    /// Block index held by each slot.
    pub placement: Vec<usize>,
    /// Slots held by each block, ascending.
    pub slots: Vec<Vec<usize>>,
    /// Blocks occupy contiguous slots in increasing order of their means.
    pub canonical: bool,
    pub representative: SymState,
    pub dim: usize,
    pub index: usize,
    pub coindex: usize,
    pub l_eigenvalues: Vec<f64>,
}

impl CriticalManifold {
    /// Builds the representative and classifies it.
    pub fn new(spectrum: &Spectrum, partition: Partition, placement: Vec<usize>) -> Result<Self> {
        let blocks = block_states(spectrum, &partition)?;
        Self::with_blocks(spectrum, partition, placement, &blocks)
    }

    fn with_blocks(
        spectrum: &Spectrum,
        partition: Partition,
        placement: Vec<usize>,
        blocks: &[DMatrix<f64>],
    ) -> Result<Self> {
        let n = spectrum.n();
        if placement.len() != n {
            return Err(IsoflowError::DimensionMismatch {
                expected: n,
                got: placement.len(),
            });
        }
        let mut slots = vec![Vec::new(); partition.k()];
        for (slot, &b) in placement.iter().enumerate() {
            if b >= partition.k() {
                return Err(IsoflowError::InvalidPartition(format!(
                    "placement names block {b}"
                )));
            }
            slots[b].push(slot);
        }
        if slots
            .iter()
            .zip(&partition.block_sizes)
            .any(|(s, &size)| s.len() != size)
        {
            return Err(IsoflowError::InvalidPartition(
                "placement does not match block sizes".into(),
            ));
        }
        let mut m = DMatrix::zeros(n, n);
        for (b, sl) in slots.iter().enumerate() {
            for (r, &i) in sl.iter().enumerate() {
                for (c, &j) in sl.iter().enumerate() {
                    m[(i, j)] = blocks[b][(r, c)];
                }
            }
        }
        let representative = SymState::new(spectrum.clone(), m)?;
        let basis = build_hessian_basis_at(&representative, &slots)?;
        let l = l_operator_spectrum(&representative, &basis)?;
        let (index, coindex) = index_coindex(&l.values)?;
        let canonical = is_canonical(&partition, &placement);
        Ok(Self {
            dim: manifold_dimension(&partition),
            partition,
            placement,
            slots,
            canonical,
            representative,
            index,
            coindex,
            l_eigenvalues: l.values,
        })
    }

    pub fn is_stable(&self) -> bool {
        self.coindex == 0
    }

    pub fn hessian_basis(&self) -> Result<HessianBasis> {
        build_hessian_basis_at(&self.representative, &self.slots)
    }
}

pub fn build_hessian_basis(cm: &CriticalManifold) -> Result<HessianBasis> {
    cm.hessian_basis()
}

/// Eigenvalues of `L_ℋ` at the manifold's representative, ascending.
pub fn l_operator_eigenvalues(cm: &CriticalManifold) -> Result<Vec<f64>> {
    let basis = cm.hessian_basis()?;
    Ok(l_operator_spectrum(&cm.representative, &basis)?.values)
}

fn is_canonical(partition: &Partition, placement: &[usize]) -> bool {
    let mut order: Vec<usize> = (0..partition.k()).collect();
    order.sort_by(|&a, &b| partition.block_means[a].total_cmp(&partition.block_means[b]));
    let expected: Vec<usize> = order
        .iter()
        .flat_map(|&b| std::iter::repeat_n(b, partition.block_sizes[b]))
        .collect();
    expected == placement
}

/// Block matrices for a partition: `[λ]` for singletons, a constant-diagonal
/// state otherwise.
fn block_states(spectrum: &Spectrum, partition: &Partition) -> Result<Vec<DMatrix<f64>>> {
    (0..partition.k())
        .map(|b| {
            let values = partition.block_values(spectrum, b);
            if values.len() == 1 {
                Ok(DMatrix::from_element(1, 1, values[0]))
            } else {
                Ok(constant_diagonal_state(&values)?.into_matrix())
            }
        })
        .collect()
}

/// All slot assignments with block `b` on exactly `sizes[b]` slots,
/// lexicographic.
pub fn placements(partition: &Partition) -> Vec<Vec<usize>> {
    let mut word: Vec<usize> = partition
        .block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    let mut out = vec![word.clone()];
    loop {
        let n = word.len();
        let Some(i) = (1..n).rev().find(|&i| word[i - 1] < word[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| word[j] > word[i - 1]).unwrap();
        word.swap(i - 1, j);
        word[i..].reverse();
        out.push(word.clone());
    }
    out
}

/// Every critical manifold: each partition in every placement of its orbit.
pub fn enumerate_catalog(spectrum: &Spectrum, cap: usize) -> Result<Vec<CriticalManifold>> {
    let spectrum = if spectrum.is_strongly_disjoint() {
        spectrum.clone()
    } else {
        spectrum.clone().certify()?
    };
    let mut out = Vec::new();
    for partition in enumerate_partitions(&spectrum, cap)? {
        let blocks = block_states(&spectrum, &partition)?;
        for placement in placements(&partition) {
            out.push(CriticalManifold::with_blocks(
                &spectrum,
                partition.clone(),
                placement,
                &blocks,
            )?);
        }
    }
    Ok(out)
}

/// The two matrices `K_{σ₁,σ₂}` linking `s_σ₁` and `s_σ₂`: the common
/// diagonal entries elsewhere, `½(λᵢ + λᵢ₊₁)` on the two swapped slots and
/// `±½(λᵢ - λᵢ₊₁)` between them.
pub fn build_saddle(
    sigma1: &Permutation,
    sigma2: &Permutation,
    spectrum: &Spectrum,
) -> Result<(SymState, SymState)> {
    let swap = sigma1
        .simple_swap_to(sigma2)
        .ok_or_else(|| IsoflowError::NotAdjacent(sigma1.to_string(), sigma2.to_string()))?;
    if sigma1.len() != spectrum.n() {
        return Err(IsoflowError::DimensionMismatch {
            expected: spectrum.n(),
            got: sigma1.len(),
        });
    }
    let values = spectrum.values();
    let (lo, hi) = (values[swap.rank], values[swap.rank + 1]);
    let (a, b) = swap.slots;
    let base = SymState::diagonal(spectrum.clone(), sigma1).into_matrix();
    let make = |sign: f64| {
        let mut m = base.clone();
        m[(a, a)] = 0.5 * (lo + hi);
        m[(b, b)] = 0.5 * (lo + hi);
        m[(a, b)] = sign * 0.5 * (lo - hi);
        m[(b, a)] = sign * 0.5 * (lo - hi);
        SymState::new(spectrum.clone(), m)
    };
    Ok((make(1.0)?, make(-1.0)?))
}

/// Block structure of an equilibrium: the partition and the slots of each
/// block (aligned with the partition's blocks). Diagonal entries within
/// `tol` are grouped together.
pub fn equilibrium_blocks(state: &SymState, tol: f64) -> Result<(Partition, Vec<Vec<usize>>)> {
    check_equilibrium(state.matrix())?;
    match crate::flow::classify_terminal(state, tol)? {
        crate::flow::TerminalLabel::Stable { permutation } => {
            let n = state.n();
            let blocks: Vec<Vec<usize>> = (0..n).map(|r| vec![r]).collect();
            let slots = (0..n).map(|r| vec![permutation.slot_of(r)]).collect();
            Ok((Partition::new(state.spectrum(), blocks)?, slots))
        }
        crate::flow::TerminalLabel::NonStableCritical { partition, slots } => {
            Ok((Partition::new(state.spectrum(), partition)?, slots))
        }
        crate::flow::TerminalLabel::DidNotConverge => {
            unreachable!("classification never reports this")
        }
    }
}

/// `S H S` with `S` the identity except `-1` at `slot`: maps one member of a
/// two-point critical set to the other.
pub fn reflect_slot(state: &SymState, slot: usize) -> SymState {
    let mut s = DMatrix::identity(state.n(), state.n());
    s[(slot, slot)] = -1.0;
    state.conjugated_by(&s)
}
