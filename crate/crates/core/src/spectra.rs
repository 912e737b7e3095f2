//! Eigenvalue-set combinatorics: strong disjointness, set partitions of the
//! spectrum, orbit counts and the permutohedron.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IsoflowError, Result};
use crate::perm::{factorial, Permutation};

/// Default cap on `n` for paths that enumerate partitions or permutations.
pub const DEFAULT_CAP: usize = 8;

/// Relative tolerance used when comparing subset means.
pub const MEAN_RTOL: f64 = 1e-12;

/// A strictly increasing list of eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpectrumFile", into = "SpectrumFile")]
pub struct Spectrum {
    values: Vec<f64>,
    strongly_disjoint: bool,
}

/// On-disk form: `{"values": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumFile {
    pub values: Vec<f64>,
}

impl TryFrom<SpectrumFile> for Spectrum {
    type Error = IsoflowError;
    fn try_from(f: SpectrumFile) -> Result<Self> {
        Spectrum::new(f.values)
    }
}

impl From<Spectrum> for SpectrumFile {
    fn from(s: Spectrum) -> Self {
        SpectrumFile { values: s.values }
    }
}

impl Spectrum {
    /// Sorts `values` and rejects empty, non-finite or repeated entries.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(IsoflowError::InvalidSpectrum("no eigenvalues".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(IsoflowError::InvalidSpectrum(format!(
                "non-finite eigenvalue {v}"
            )));
        }
        values.sort_by(f64::total_cmp);
        if let Some(w) = values.windows(2).find(|w| w[0] == w[1]) {
            return Err(IsoflowError::InvalidSpectrum(format!(
                "repeated eigenvalue {}",
                w[0]
            )));
        }
        Ok(Self {
            values,
            strongly_disjoint: false,
        })
    }

    /// Builds the spectrum and certifies strong disjointness.
    pub fn certified(values: Vec<f64>) -> Result<Self> {
        Self::new(values)?.certify()
    }

    /// Runs the exhaustive check; on success the flag is set.
    pub fn certify(mut self) -> Result<Self> {
        let check = check_strongly_disjoint(&self);
        match check.witness {
            None => {
                self.strongly_disjoint = true;
                Ok(self)
            }
            Some((a, b)) => {
                let mean = subset_mean(&self.values, &a);
                Err(IsoflowError::NotStronglyDisjoint {
                    left: a.iter().map(|&i| self.values[i]).collect(),
                    right: b.iter().map(|&i| self.values[i]).collect(),
                    mean,
                })
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn is_strongly_disjoint(&self) -> bool {
        self.strongly_disjoint
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.n() as f64
    }

    /// Smallest gap between consecutive eigenvalues (infinite for n = 1).
    pub fn min_gap(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn spread(&self) -> f64 {
        self.values[self.n() - 1] - self.values[0]
    }

    /// `Σ λ²`, which equals `‖H‖_F²` for every state on the manifold.
    pub fn sum_of_squares(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// A random strongly disjoint spectrum with entries drawn uniformly from
    /// `[0, scale)`. Redraws until certification succeeds.
    pub fn random(n: usize, scale: f64, seed: u64) -> Result<Self> {
        if n == 0 || !(scale > 0.0) {
            return Err(IsoflowError::InvalidSpectrum(
                "need n >= 1 and scale > 0".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * scale).collect();
            if let Ok(s) = Self::certified(values) {
                return Ok(s);
            }
        }
    }
}

/// Outcome of the strong-disjointness check. The witness holds two
/// disjoint, nonempty index sets with equal means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisjointnessCheck {
    pub strongly_disjoint: bool,
    pub witness: Option<(Vec<usize>, Vec<usize>)>,
}

fn subset_mean(values: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
}

fn means_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= MEAN_RTOL * a.abs().max(b.abs())
}

/// Checks every ordered pair of disjoint nonempty index subsets (`3ⁿ`
/// assignments of each index to left, right or neither).
pub fn check_strongly_disjoint(spectrum: &Spectrum) -> DisjointnessCheck {
    let values = spectrum.values();
    let n = values.len();
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let (mut sa, mut na, mut sb, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for v in values {
            match c % 3 {
                1 => {
                    sa += v;
                    na += 1;
                }
                2 => {
                    sb += v;
                    nb += 1;
                }
                _ => {}
            }
            c /= 3;
        }
        if na == 0 || nb == 0 {
            continue;
        }
        if means_equal(sa / na as f64, sb / nb as f64) {
            let (mut left, mut right) = (Vec::new(), Vec::new());
            let mut c = code;
            for i in 0..n {
                match c % 3 {
                    1 => left.push(i),
                    2 => right.push(i),
                    _ => {}
                }
                c /= 3;
            }
            return DisjointnessCheck {
                strongly_disjoint: false,
                witness: Some((left, right)),
            };
        }
    }
    DisjointnessCheck {
        strongly_disjoint: true,
        witness: None,
    }
}

/// A set partition of the eigenvalue indices `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub blocks: Vec<Vec<usize>>,
    pub block_means: Vec<f64>,
    pub block_sizes: Vec<usize>,
}

impl Partition {
    /// Canonicalizes (indices sorted within blocks, blocks sorted by their
    /// smallest index) and validates coverage of `0..n`.
    pub fn new(spectrum: &Spectrum, mut blocks: Vec<Vec<usize>>) -> Result<Self> {
        let n = spectrum.n();
        let mut seen = vec![false; n];
        for block in &mut blocks {
            if block.is_empty() {
                return Err(IsoflowError::InvalidPartition("empty block".into()));
            }
            block.sort_unstable();
            for &i in block.iter() {
                if i >= n || seen[i] {
                    return Err(IsoflowError::InvalidPartition(format!(
                        "index {i} repeated or out of range"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(IsoflowError::InvalidPartition(
                "blocks do not cover 0..n".into(),
            ));
        }
        blocks.sort_by_key(|b| b[0]);
        let values = spectrum.values();
        let block_means = blocks.iter().map(|b| subset_mean(values, b)).collect();
        let block_sizes = blocks.iter().map(Vec::len).collect();
        Ok(Self {
            blocks,
            block_means,
            block_sizes,
        })
    }

    pub fn n(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    /// Eigenvalues of block `b`, ascending.
    pub fn block_values(&self, spectrum: &Spectrum, b: usize) -> Vec<f64> {
        self.blocks[b]
            .iter()
            .map(|&i| spectrum.values()[i])
            .collect()
    }

    pub fn is_all_singletons(&self) -> bool {
        self.block_sizes.iter().all(|&s| s == 1)
    }
}

/// All set partitions of `0..n` in canonical order. Fails when `n > cap`.
pub fn enumerate_partitions(spectrum: &Spectrum, cap: usize) -> Result<Vec<Partition>> {
    let n = spectrum.n();
    if n > cap {
        return Err(IsoflowError::CapExceeded { n, cap });
    }
    let mut out = Vec::new();
    let mut assign = vec![0usize; n];
    growth_strings(&mut assign, 1, 0, &mut |a| {
        let k = a.iter().max().map_or(0, |m| m + 1);
        let mut blocks = vec![Vec::new(); k];
        for (i, &b) in a.iter().enumerate() {
            blocks[b].push(i);
        }
        out.push(blocks);
    });
    let mut partitions = out
        .into_iter()
        .map(|b| Partition::new(spectrum, b))
        .collect::<Result<Vec<_>>>()?;
    partitions.sort_by(|a, b| a.blocks.cmp(&b.blocks));
    Ok(partitions)
}

// Restricted growth strings: a[0] = 0, a[i] <= max(a[..i]) + 1.
fn growth_strings(a: &mut [usize], i: usize, max: usize, emit: &mut dyn FnMut(&[usize])) {
    if a.is_empty() {
        return;
    }
    if i == a.len() {
        emit(a);
        return;
    }
    for b in 0..=max + 1 {
        a[i] = b;
        growth_strings(a, i + 1, max.max(b), emit);
    }
}

/// Number of critical manifolds in the permutation orbit of `E_α`:
/// `n! / Π nᵢ!`.
pub fn orbit_size(partition: &Partition) -> u128 {
    let denom: u128 = partition
        .block_sizes
        .iter()
        .map(|&s| factorial(s))
        .product();
    factorial(partition.n()) / denom
}

/// Vertices (coordinate permutations of the spectrum, listed in the
/// lexicographic order of `Permutation::all`) and edges (value swaps of
/// consecutive eigenvalues) of the permutohedron.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Permutohedron {
    pub vertices: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize)>,
}

pub fn permutohedron(spectrum: &Spectrum, cap: usize) -> Result<Permutohedron> {
    let n = spectrum.n();
    if n > cap {
        return Err(IsoflowError::CapExceeded { n, cap });
    }
    let perms = Permutation::all(n);
    let vertices = perms.iter().map(|p| p.apply(spectrum.values())).collect();
    let mut edges = Vec::new();
    for (a, p) in perms.iter().enumerate() {
        for rank in 0..n.saturating_sub(1) {
            let b = p.swap_values(rank).lexicographic_index();
            if a < b {
                edges.push((a, b));
            }
        }
    }
    edges.sort_unstable();
    Ok(Permutohedron { vertices, edges })
}
