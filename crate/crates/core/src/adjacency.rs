//! The predicted adjacency graph over stable states and its verification
//! by tracing unstable manifolds of co-index-1 saddles.
//!
//! Two diagonal states are joined when their permutations differ by
//! swapping two values adjacent in sorted order. Each edge carries the pair
//! of saddles `K` between them and the potential barrier `Ψ(s) - Ψ(K)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::allocator::Allocator;
use nalgebra::{DMatrix, DefaultAllocator, Dim};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critical::{
    build_hessian_basis_at, build_saddle, enumerate_catalog, equilibrium_blocks, index_coindex,
    l_operator_spectrum, reflect_slot,
};
use crate::error::{IsoflowError, Result};
use crate::flow::{integrate, step, suggested_step, FlowConfig, TerminalLabel};
use crate::kernel::{with_dim, Kernel};
use crate::linalg::{commutator, expm, sym_eigen_sorted};
use crate::manifold::{random_state_with, SkewGenerator, SymState};
use crate::perm::{factorial, Permutation};
use crate::spectra::{Spectrum, DEFAULT_CAP};

#[derive(Debug, Clone)]
pub struct AdjacencyEdge {
    pub from: Permutation,
    pub to: Permutation,
    /// Rank `i` of the swapped values `λᵢ, λᵢ₊₁` (0-based).
    pub rank: usize,
    pub slots: (usize, usize),
    pub saddles: (SymState, SymState),
    pub barrier: f64,
}

#[derive(Debug, Clone)]
pub struct AdjacencyGraph {
    pub spectrum: Spectrum,
    pub nodes: Vec<Permutation>,
    pub edges: Vec<AdjacencyEdge>,
}

fn require_certified(spectrum: &Spectrum) -> Result<Spectrum> {
    if spectrum.is_strongly_disjoint() {
        Ok(spectrum.clone())
    } else {
        spectrum.clone().certify()
    }
}

/// All `n!` diagonal states, joined by simple value swaps.
pub fn build_graph(spectrum: &Spectrum, cap: usize) -> Result<AdjacencyGraph> {
    let spectrum = require_certified(spectrum)?;
    let n = spectrum.n();
    if n > cap {
        return Err(IsoflowError::CapExceeded { n, cap });
    }
    let nodes = Permutation::all(n);
    let top = spectrum.sum_of_squares() / 2.0;
    let mut edges = Vec::with_capacity(nodes.len() * n.saturating_sub(1) / 2);
    for from in &nodes {
        for rank in 0..n.saturating_sub(1) {
            let to = from.swap_values(rank);
            if to.lexicographic_index() < from.lexicographic_index() {
                continue;
            }
            let saddles = build_saddle(from, &to, &spectrum)?;
            let barrier = top - saddles.0.potential();
            edges.push(AdjacencyEdge {
                slots: (from.slot_of(rank), from.slot_of(rank + 1)),
                from: from.clone(),
                to,
                rank,
                saddles,
                barrier,
            });
        }
    }
    Ok(AdjacencyGraph {
        spectrum,
        nodes,
        edges,
    })
}

impl AdjacencyGraph {
    pub fn n(&self) -> usize {
        self.spectrum.n()
    }

    pub fn degree(&self, sigma: &Permutation) -> usize {
        self.edges
            .iter()
            .filter(|e| &e.from == sigma || &e.to == sigma)
            .count()
    }

    pub fn neighbours(&self, sigma: &Permutation) -> Vec<Permutation> {
        (0..self.n().saturating_sub(1))
            .map(|r| sigma.swap_values(r))
            .collect()
    }

    pub fn is_edge(&self, a: &Permutation, b: &Permutation) -> bool {
        a.is_adjacent_to(b)
    }

    pub fn edge_between(&self, a: &Permutation, b: &Permutation) -> Option<&AdjacencyEdge> {
        self.edges
            .iter()
            .find(|e| (&e.from == a && &e.to == b) || (&e.from == b && &e.to == a))
    }

    /// Graphviz source; edges are labelled with their barrier.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("graph adjacency {\n");
        for node in &self.nodes {
            let _ = writeln!(out, "  \"{node}\";");
        }
        for e in &self.edges {
            let _ = writeln!(
                out,
                "  \"{}\" -- \"{}\" [label=\"{:.6}\"];",
                e.from, e.to, e.barrier
            );
        }
        out.push_str("}\n");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub flow: FlowConfig,
    /// Relative size of the initial push off the saddle.
    pub delta: f64,
}

impl TraceConfig {
    pub fn for_spectrum(spectrum: &Spectrum) -> Self {
        Self {
            flow: FlowConfig::for_spectrum(spectrum),
            delta: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(IsoflowError::InvalidConfig(format!(
                "trace delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// The unstable direction at a co-index-1 equilibrium: the generator whose
/// tangent `N⁺ = [K, Ω⁺]` is the eigenmatrix of `L_ℋ` with positive
/// eigenvalue.
pub fn unstable_direction(k: &SymState, tol: f64) -> Result<(SkewGenerator, f64)> {
    let (_, slots) = equilibrium_blocks(k, tol)?;
    let basis = build_hessian_basis_at(k, &slots)?;
    let l_spec = l_operator_spectrum(k, &basis)?;
    let (_, coindex) = index_coindex(&l_spec.values)?;
    if coindex != 1 {
        return Err(IsoflowError::NotCoindexOne(coindex));
    }
    let last = l_spec.values.len() - 1;
    let mut omega = DMatrix::zeros(k.n(), k.n());
    for (a, element) in basis.elements().enumerate() {
        omega += element.generator.matrix() * l_spec.coefficients[(a, last)];
    }
    Ok((SkewGenerator::skew_part(&omega), l_spec.values[last]))
}

/// Pushes `K` off along `±N⁺` by a conjugation of relative size `delta`
/// and flows both sides to their terminal states.
pub fn trace_unstable_manifold(
    k: &SymState,
    cfg: &TraceConfig,
) -> Result<(TerminalLabel, TerminalLabel)> {
    cfg.validate()?;
    let (omega, _) = unstable_direction(k, cfg.flow.classify_tol)?;
    let tangent = commutator(k.matrix(), omega.matrix());
    let s = cfg.delta * k.matrix().norm() / tangent.norm();
    let side = |sign: f64| -> Result<TerminalLabel> {
        let q = expm(&(omega.matrix() * (sign * s)));
        let start = k.conjugated_by(&q);
        let record = integrate(&start, &cfg.flow)?;
        match record.terminal_label {
            TerminalLabel::Stable { .. } => Ok(record.terminal_label),
            other => Err(IsoflowError::UnstableEndpoint(format!("{other:?}"))),
        }
    };
    Ok((side(1.0)?, side(-1.0)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaddleTrace {
    pub partition: Vec<Vec<usize>>,
    pub placement: Vec<usize>,
    /// `+` for the cataloged representative, `-` for its reflection.
    pub member: char,
    pub endpoints: Option<(Permutation, Permutation)>,
    pub edge: Option<(Permutation, Permutation)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcludedSaddle {
    pub partition: Vec<Vec<usize>>,
    pub placement: Vec<usize>,
    pub coindex: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeBarrier {
    pub from: Permutation,
    pub to: Permutation,
    pub barrier: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjacencyReport {
    pub n: usize,
    pub edges: usize,
    pub confirmed: usize,
    pub traces: Vec<SaddleTrace>,
    pub mismatches: Vec<SaddleTrace>,
    pub excluded: Vec<ExcludedSaddle>,
    pub barriers: Vec<EdgeBarrier>,
}

impl AdjacencyReport {
    pub fn all_confirmed(&self) -> bool {
        self.mismatches.is_empty() && self.confirmed == self.edges
    }
}

/// Traces every co-index-1 critical point of the catalog (both members of
/// each two-point set) and checks that the endpoints are exactly the two
/// states of one graph edge.
pub fn verify_adjacency(spectrum: &Spectrum, cfg: &TraceConfig) -> Result<AdjacencyReport> {
    verify_adjacency_capped(spectrum, cfg, DEFAULT_CAP)
}

pub fn verify_adjacency_capped(
    spectrum: &Spectrum,
    cfg: &TraceConfig,
    cap: usize,
) -> Result<AdjacencyReport> {
    cfg.validate()?;
    let graph = build_graph(spectrum, cap)?;
    let catalog = enumerate_catalog(&graph.spectrum, cap)?;

    let excluded = catalog
        .iter()
        .filter(|c| c.coindex >= 2)
        .map(|c| ExcludedSaddle {
            partition: c.partition.blocks.clone(),
            placement: c.placement.clone(),
            coindex: c.coindex,
        })
        .collect();

    let jobs: Vec<(usize, char, SymState)> = catalog
        .iter()
        .enumerate()
        .filter(|(_, c)| c.coindex == 1)
        .flat_map(|(i, c)| {
            let pair_slot = c
                .slots
                .iter()
                .find(|s| s.len() == 2)
                .map(|s| s[0])
                .unwrap_or(0);
            let minus = reflect_slot(&c.representative, pair_slot);
            [(i, '+', c.representative.clone()), (i, '-', minus)]
        })
        .collect();

    let traces: Vec<SaddleTrace> = jobs
        .par_iter()
        .map(|(i, member, k)| {
            let c = &catalog[*i];
            let mut trace = SaddleTrace {
                partition: c.partition.blocks.clone(),
                placement: c.placement.clone(),
                member: *member,
                endpoints: None,
                edge: None,
                error: None,
            };
            match trace_unstable_manifold(k, cfg) {
                Ok((a, b)) => {
                    let a = a.permutation().cloned().expect("stable endpoint");
                    let b = b.permutation().cloned().expect("stable endpoint");
                    if let Some(e) = graph.edge_between(&a, &b) {
                        trace.edge = Some((e.from.clone(), e.to.clone()));
                    }
                    trace.endpoints = Some((a, b));
                }
                Err(e) => trace.error = Some(e.to_string()),
            }
            trace
        })
        .collect();

    // An edge counts as confirmed when both members of some saddle set land
    // on it and nothing else does.
    let mut per_manifold: BTreeMap<Vec<usize>, Vec<&SaddleTrace>> = BTreeMap::new();
    for t in &traces {
        per_manifold
            .entry(
                t.partition
                    .iter()
                    .flatten()
                    .copied()
                    .chain(t.placement.iter().copied())
                    .collect(),
            )
            .or_default()
            .push(t);
    }
    let mut confirmed: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut mismatches: Vec<SaddleTrace> = traces
        .iter()
        .filter(|t| t.edge.is_none())
        .cloned()
        .collect();
    for members in per_manifold.values() {
        let edges: BTreeSet<_> = members
            .iter()
            .map(|t| {
                t.edge
                    .as_ref()
                    .map(|(a, b)| (a.lexicographic_index(), b.lexicographic_index()))
            })
            .collect();
        match (edges.len(), edges.iter().next()) {
            (1, Some(Some(e))) => {
                confirmed.insert(*e);
            }
            _ => {
                for t in members {
                    if t.edge.is_some() {
                        mismatches.push((*t).clone());
                    }
                }
            }
        }
    }

    let barriers = graph
        .edges
        .iter()
        .map(|e| EdgeBarrier {
            from: e.from.clone(),
            to: e.to.clone(),
            barrier: e.barrier,
        })
        .collect();

    Ok(AdjacencyReport {
        n: graph.n(),
        edges: graph.edges.len(),
        confirmed: confirmed.len(),
        traces,
        mismatches,
        excluded,
        barriers,
    })
}

/// Potential above every non-stable critical value: the largest saddle
/// potential. Once a trajectory exceeds it, its basin is decided.
pub fn highest_saddle_potential(graph: &AdjacencyGraph) -> f64 {
    graph
        .edges
        .iter()
        .map(|e| e.saddles.0.potential())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Flows until `Ψ` exceeds `threshold` and returns the nearest diagonal
/// state, or `None` if `max_time` runs out first.
pub fn basin_label(start: &SymState, h: f64, threshold: f64, max_time: f64) -> Option<Permutation> {
    with_dim!(start.n(), |D| basin_label_in::<D>(
        start, h, threshold, max_time
    ))
}

fn basin_label_in<D: Dim>(
    start: &SymState,
    h: f64,
    threshold: f64,
    max_time: f64,
) -> Option<Permutation>
where
    DefaultAllocator: Allocator<D, D>,
{
    let mut k = Kernel::<D>::new(start.matrix());
    let mut t = 0.0;
    loop {
        if k.potential() > threshold {
            let d: Vec<f64> = (0..k.n()).map(|i| k.diag(i)).collect();
            return Some(Permutation::ranking(&d));
        }
        if t >= max_time {
            return None;
        }
        k.flow_step(h);
        t += h;
    }
}

/// Nearest isospectral matrix to `m`: same eigenvectors, eigenvalues
/// replaced by the spectrum in matching order.
pub fn project_isospectral(spectrum: &Spectrum, m: &DMatrix<f64>) -> SymState {
    let (_, vectors) = sym_eigen_sorted(m);
    SymState::from_frame(spectrum.clone(), &vectors.transpose())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasinCrossing {
    pub from: Permutation,
    pub to: Permutation,
    /// Co-index of the critical set where the boundary trajectory stalls.
    pub stalling_coindex: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasinReport {
    pub samples: usize,
    /// Fraction of samples per state, in lexicographic order.
    pub volumes: Vec<(Permutation, f64)>,
    pub undecided: usize,
    pub crossings: Vec<BasinCrossing>,
}

impl BasinReport {
    pub fn edge_crossings(&self) -> usize {
        self.crossings
            .iter()
            .filter(|c| c.from.is_adjacent_to(&c.to))
            .count()
    }

    pub fn higher_coindex_crossings(&self) -> usize {
        self.crossings
            .iter()
            .filter(|c| c.stalling_coindex >= 2)
            .count()
    }

    /// Fraction of all detected crossings that join graph-adjacent states.
    pub fn edge_fraction(&self) -> f64 {
        if self.crossings.is_empty() {
            return 1.0;
        }
        self.edge_crossings() as f64 / self.crossings.len() as f64
    }

    /// Fraction of crossings that join graph-adjacent states or pass through
    /// a critical set of co-index 2 or more.
    pub fn explained_fraction(&self) -> f64 {
        if self.crossings.is_empty() {
            return 1.0;
        }
        let ok = self
            .crossings
            .iter()
            .filter(|c| c.from.is_adjacent_to(&c.to) || c.stalling_coindex >= 2)
            .count();
        ok as f64 / self.crossings.len() as f64
    }
}

/// Follows a boundary point until its basin is decided and returns the
/// co-index of the critical set where the gradient was smallest on the way.
fn stalling_coindex(start: &SymState, h: f64, threshold: f64, max_time: f64) -> Option<usize> {
    let mut state = start.clone();
    let mut best = (f64::INFINITY, state.clone());
    let mut t = 0.0;
    while state.potential() <= threshold && t < max_time {
        let g = state.gradient_field().norm();
        if g < best.0 {
            best = (g, state.clone());
        }
        state = step(&state, h);
        t += h;
    }
    let scale = start.spectrum().min_gap().min(1.0);
    let label = crate::flow::classify_terminal(&best.1, 1e-2 * scale).ok()?;
    let TerminalLabel::NonStableCritical { partition, slots } = label else {
        return Some(0);
    };
    let partition = crate::spectra::Partition::new(start.spectrum(), partition).ok()?;
    let mut placement = vec![0; start.n()];
    for (b, sl) in slots.iter().enumerate() {
        for &slot in sl {
            placement[slot] = b;
        }
    }
    crate::critical::CriticalManifold::new(start.spectrum(), partition, placement)
        .ok()
        .map(|c| c.coindex)
}

pub const BISECTION_STEPS: usize = 40;

/// Samples random initial states, labels their basins, then bisects
/// `segments` straight segments between samples of different basins
/// (projected back onto the isospectral set) to locate one boundary
/// crossing each.
pub fn basin_crosscheck(
    spectrum: &Spectrum,
    samples: usize,
    segments: usize,
    seed: u64,
    max_time: f64,
) -> Result<BasinReport> {
    let graph = build_graph(spectrum, DEFAULT_CAP)?;
    let spectrum = graph.spectrum.clone();
    let threshold = highest_saddle_potential(&graph);
    let h = suggested_step(&spectrum);

    let states: Vec<SymState> = (0..samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            random_state_with(&spectrum, &mut rng)
        })
        .collect();
    let labels: Vec<Option<Permutation>> = states
        .par_iter()
        .map(|s| basin_label(s, h, threshold, max_time))
        .collect();

    let total = factorial(spectrum.n()) as usize;
    let mut counts = vec![0usize; total];
    for l in labels.iter().flatten() {
        counts[l.lexicographic_index()] += 1;
    }
    let volumes = graph
        .nodes
        .iter()
        .map(|p| {
            (
                p.clone(),
                counts[p.lexicographic_index()] as f64 / samples.max(1) as f64,
            )
        })
        .collect();

    let decided: Vec<usize> = (0..samples).filter(|&i| labels[i].is_some()).collect();
    let mut pair_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut pairs = Vec::with_capacity(segments);
    let mut attempts = 0;
    while pairs.len() < segments && decided.len() >= 2 && attempts < 100 * segments.max(1) {
        attempts += 1;
        let a = decided[pair_rng.random_range(0..decided.len())];
        let b = decided[pair_rng.random_range(0..decided.len())];
        if labels[a] != labels[b] {
            pairs.push((a, b));
        }
    }

    let crossings: Vec<Option<(Permutation, Permutation, usize)>> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let ma = states[a].matrix();
            let mb = states[b].matrix();
            let at = |t: f64| project_isospectral(&spectrum, &(ma * (1.0 - t) + mb * t));
            let (mut lo, mut hi) = (0.0, 1.0);
            let mut l_lo = labels[a].clone()?;
            let mut l_hi = labels[b].clone()?;
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                let l_mid = basin_label(&at(mid), h, threshold, max_time)?;
                if l_mid != l_lo {
                    hi = mid;
                    l_hi = l_mid;
                } else {
                    lo = mid;
                    l_lo = l_mid;
                }
            }
            let coindex = stalling_coindex(&at(0.5 * (lo + hi)), h, threshold, max_time)?;
            Some((l_lo, l_hi, coindex))
        })
        .collect();
    let crossings = crossings
        .into_iter()
        .flatten()
        .map(|(from, to, stalling_coindex)| BasinCrossing {
            from,
            to,
            stalling_coindex,
        })
        .collect();

    Ok(BasinReport {
        samples,
        volumes,
        undecided: labels.iter().filter(|l| l.is_none()).count(),
        crossings,
    })
}
