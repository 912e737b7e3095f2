//! Permutations labelling the stable diagonal states.
//!
//! A `Permutation` lists, slot by slot, which sorted eigenvalue sits on the
//! diagonal: `s_σ = diag(λ_σ(0), …, λ_σ(n-1))` with 0-based ranks.
//! Displayed 1-based, e.g. `[2 1 3]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{IsoflowError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

/// Two permutations differing by a swap of the values of rank `rank` and
/// `rank + 1`, which sit at `slots`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimpleSwap {
    pub rank: usize,
    pub slots: (usize, usize),
}

impl Permutation {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        let n = ranks.len();
        let mut seen = vec![false; n];
        for &r in &ranks {
            if r >= n || seen[r] {
                return Err(IsoflowError::InvalidState(format!(
                    "{ranks:?} is not a permutation of 0..{n}"
                )));
            }
            seen[r] = true;
        }
        Ok(Self(ranks))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    /// Permutation whose slot ranks follow the ordering of `values`
    /// (ties broken by slot).
    pub fn ranking(values: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        let mut ranks = vec![0; values.len()];
        for (rank, &slot) in order.iter().enumerate() {
            ranks[slot] = rank;
        }
        Self(ranks)
    }

    /// All `n!` permutations in lexicographic order.
    pub fn all(n: usize) -> Vec<Self> {
        let mut current: Vec<usize> = (0..n).collect();
        let mut out = vec![Self(current.clone())];
        while next_lexicographic(&mut current) {
            out.push(Self(current.clone()));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ranks(&self) -> &[usize] {
        &self.0
    }

    /// Slot holding the value of the given rank.
    pub fn slot_of(&self, rank: usize) -> usize {
        self.0
            .iter()
            .position(|&r| r == rank)
            .expect("rank in range")
    }

    /// Position of this permutation in the lexicographic listing of `all`.
    pub fn lexicographic_index(&self) -> usize {
        let n = self.0.len();
        let mut index = 0;
        let mut used = vec![false; n];
        for (k, &r) in self.0.iter().enumerate() {
            let smaller_unused = (0..r).filter(|&x| !used[x]).count();
            index += smaller_unused * factorial(n - 1 - k) as usize;
            used[r] = true;
        }
        index
    }

    /// The neighbour obtained by exchanging the values of rank `rank` and
    /// `rank + 1`.
    pub fn swap_values(&self, rank: usize) -> Self {
        let a = self.slot_of(rank);
        let b = self.slot_of(rank + 1);
        let mut ranks = self.0.clone();
        ranks.swap(a, b);
        Self(ranks)
    }

    /// If `self` and `other` differ by exchanging two values adjacent in
    /// sorted order, returns that swap.
    pub fn simple_swap_to(&self, other: &Self) -> Option<SimpleSwap> {
        if self.len() != other.len() {
            return None;
        }
        let diff: Vec<usize> = (0..self.len())
            .filter(|&k| self.0[k] != other.0[k])
            .collect();
        if diff.len() != 2 {
            return None;
        }
        let (a, b) = (diff[0], diff[1]);
        if self.0[a] != other.0[b] || self.0[b] != other.0[a] {
            return None;
        }
        let lo = self.0[a].min(self.0[b]);
        let hi = self.0[a].max(self.0[b]);
        (hi == lo + 1).then_some(SimpleSwap {
            rank: lo,
            slots: (a, b),
        })
    }

    pub fn is_adjacent_to(&self, other: &Self) -> bool {
        self.simple_swap_to(other).is_some()
    }

    /// Values `(λ_σ(0), …)` for a sorted spectrum.
    pub fn apply(&self, sorted_values: &[f64]) -> Vec<f64> {
        self.0.iter().map(|&r| sorted_values[r]).collect()
    }

    /// Relabels slots: the result holds at slot `perm[k]` what `self` holds
    /// at slot `k`, matching conjugation by the permutation matrix of `perm`.
    pub fn moved_by(&self, perm: &[usize]) -> Self {
        let mut ranks = vec![0; self.0.len()];
        for (k, &to) in perm.iter().enumerate() {
            ranks[to] = self.0[k];
        }
        Self(ranks)
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (k, r) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, " ")?;
            }
            write!(f, "{}", r + 1)?;
        }
        write!(f, "]")
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = IsoflowError;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

pub fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

fn next_lexicographic(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}
