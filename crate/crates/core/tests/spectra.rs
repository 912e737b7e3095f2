use std::collections::HashSet;

use isoflow::manifold::SymState;
use isoflow::perm::Permutation;
use isoflow::spectra::{
    check_strongly_disjoint, enumerate_partitions, orbit_size, permutohedron, Spectrum, DEFAULT_CAP,
};
use proptest::prelude::*;

/// Exact oracle on integers: two disjoint nonempty subsets `A`, `B` have
/// equal means iff `sum(A)·|B| == sum(B)·|A|`. Walks all subsets `A` and,
/// for each, all subsets of the complement.
fn integer_oracle(values: &[i64]) -> bool {
    let n = values.len();
    let full = (1u32 << n) - 1;
    let stats = |mask: u32| {
        (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .fold((0i64, 0i64), |(s, c), i| (s + values[i], c + 1))
    };
    for a in 1..=full {
        let rest = full & !a;
        let (sa, ca) = stats(a);
        let mut b = rest;
        while b > 0 {
            let (sb, cb) = stats(b);
            if sa * cb == sb * ca {
                return false;
            }
            b = (b - 1) & rest;
        }
    }
    true
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn disjointness_agrees_with_the_integer_oracle(
        raw in prop::collection::hash_set(-40i64..40, 1..=7)
    ) {
        let ints: Vec<i64> = raw.into_iter().collect();
        let spectrum = Spectrum::new(ints.iter().map(|&v| v as f64).collect()).unwrap();
        let mut sorted = ints.clone();
        sorted.sort_unstable();
        let check = check_strongly_disjoint(&spectrum);
        prop_assert_eq!(check.strongly_disjoint, integer_oracle(&sorted));
        if let Some((left, right)) = check.witness {
            let mean = |idx: &[usize]| idx.iter().map(|&i| sorted[i]).sum::<i64>() as f64 / idx.len() as f64;
            prop_assert!(left.iter().all(|i| !right.contains(i)));
            prop_assert_eq!(mean(&left), mean(&right));
        }
    }
}

fn disjoint_spectra() -> Vec<Spectrum> {
    // Powers of two are strongly disjoint; the random ones are certified.
    let mut out: Vec<Spectrum> = (1..=6)
        .map(|n| Spectrum::certified((0..n).map(|k| 2f64.powi(k)).collect()).unwrap())
        .collect();
    for seed in 0..4 {
        out.push(Spectrum::random(6, 3.0, seed).unwrap());
    }
    out
}

#[test]
fn block_means_are_distinct_for_every_partition() {
    for s in disjoint_spectra() {
        for p in enumerate_partitions(&s, DEFAULT_CAP).unwrap() {
            let m = &p.block_means;
            for a in 0..m.len() {
                for b in (a + 1)..m.len() {
                    assert!(m[a] != m[b], "{:?} in {:?}", p.blocks, s.values());
                }
            }
        }
    }
}

#[test]
fn orbit_sizes_match_direct_enumeration() {
    // Count distinct diagonal patterns of block labels directly: conjugating
    // a block-diagonal representative by every permutation matrix and
    // keeping the distinct block-slot assignments.
    for n in 1..=5 {
        let s = Spectrum::certified((0..n).map(|k| 2f64.powi(k as i32)).collect()).unwrap();
        for p in enumerate_partitions(&s, DEFAULT_CAP).unwrap() {
            let mut label = Vec::new();
            for (b, block) in p.blocks.iter().enumerate() {
                label.extend(std::iter::repeat_n(b, block.len()));
            }
            let distinct: HashSet<Vec<usize>> = Permutation::all(n)
                .iter()
                .map(|perm| {
                    let mut placed = vec![0; n];
                    for (slot, &rank) in perm.ranks().iter().enumerate() {
                        placed[slot] = label[rank];
                    }
                    placed
                })
                .collect();
            assert_eq!(orbit_size(&p), distinct.len() as u128, "{:?}", p.blocks);
        }
    }
}

#[test]
fn permutohedron_vertices_are_the_diagonal_states() {
    let s = Spectrum::certified(vec![1.0, 2.0, 4.0, 8.0]).unwrap();
    let poly = permutohedron(&s, DEFAULT_CAP).unwrap();
    for (v, sigma) in poly.vertices.iter().zip(Permutation::all(4)) {
        let d = SymState::diagonal(s.clone(), &sigma).project_diagonal();
        assert_eq!(d.as_slice(), v.as_slice());
    }
    assert_eq!(poly.edges.len(), 36);
}
