use isoflow::adjacency::{
    basin_crosscheck, build_graph, trace_unstable_manifold, verify_adjacency, TraceConfig,
};
use isoflow::critical::{build_saddle, reflect_slot};
use isoflow::flow::{FlowConfig, TerminalLabel};
use isoflow::perm::Permutation;
use isoflow::spectra::{permutohedron, Spectrum, DEFAULT_CAP};

fn stable(ranks: Vec<usize>) -> TerminalLabel {
    TerminalLabel::Stable {
        permutation: Permutation::new(ranks).unwrap(),
    }
}

#[test]
fn graph_structure_for_n_up_to_five() {
    for n in 2..=5 {
        let s = Spectrum::certified((0..n).map(|k| 3f64.powi(k as i32)).collect()).unwrap();
        let g = build_graph(&s, DEFAULT_CAP).unwrap();
        assert_eq!(g.edges.len() * 2, (n - 1) * g.nodes.len());
        for node in &g.nodes {
            assert_eq!(g.degree(node), n - 1);
        }
        let poly = permutohedron(&s, DEFAULT_CAP).unwrap();
        for e in &g.edges {
            let (a, b) = (e.from.lexicographic_index(), e.to.lexicographic_index());
            assert!(poly.edges.contains(&(a.min(b), a.max(b))));
            assert!(e.barrier > 0.0);
            assert!((top(&s) - e.saddles.0.potential() - e.barrier).abs() < 1e-12);
            assert!((e.saddles.0.potential() - e.saddles.1.potential()).abs() < 1e-12);
        }
    }
}

fn top(s: &Spectrum) -> f64 {
    0.5 * s.values().iter().map(|v| v * v).sum::<f64>()
}

#[test]
fn the_one_two_four_barriers() {
    let s = Spectrum::certified(vec![1.0, 2.0, 4.0]).unwrap();
    let g = build_graph(&s, DEFAULT_CAP).unwrap();
    for e in &g.edges {
        let expected = if e.rank == 0 { 0.25 } else { 1.0 };
        assert!((e.barrier - expected).abs() < 1e-12);
    }
}

#[test]
fn two_by_two_saddle_splits_into_both_states() {
    let s = Spectrum::certified(vec![1.0, 2.0]).unwrap();
    let (k, _) = build_saddle(
        &Permutation::identity(2),
        &Permutation::new(vec![1, 0]).unwrap(),
        &s,
    )
    .unwrap();
    let (a, b) = trace_unstable_manifold(&k, &TraceConfig::for_spectrum(&s)).unwrap();
    let mut ends = vec![a, b];
    ends.sort_by_key(|l| format!("{l:?}"));
    assert_eq!(ends, vec![stable(vec![0, 1]), stable(vec![1, 0])]);
}

#[test]
fn both_saddle_members_share_endpoints_at_n_four() {
    let s = Spectrum::certified(vec![1.0, 2.0, 4.0, 8.0]).unwrap();
    let g = build_graph(&s, DEFAULT_CAP).unwrap();
    let cfg = TraceConfig::for_spectrum(&s);
    for e in g.edges.iter().step_by(5) {
        let expected = {
            let mut v = vec![
                stable(e.from.ranks().to_vec()),
                stable(e.to.ranks().to_vec()),
            ];
            v.sort_by_key(|l| format!("{l:?}"));
            v
        };
        let reflected = reflect_slot(&e.saddles.0, e.slots.0);
        for k in [&e.saddles.0, &e.saddles.1, &reflected] {
            let (a, b) = trace_unstable_manifold(k, &cfg).unwrap();
            let mut got = vec![a, b];
            got.sort_by_key(|l| format!("{l:?}"));
            assert_eq!(got, expected);
        }
    }
}

#[test]
fn verification_at_n_three_excludes_far_pairs() {
    let s = Spectrum::certified(vec![1.0, 2.0, 4.0]).unwrap();
    let report = verify_adjacency(&s, &TraceConfig::for_spectrum(&s)).unwrap();
    assert!(report.all_confirmed());
    assert_eq!((report.edges, report.confirmed), (6, 6));
    assert!(report.excluded.iter().all(|x| x.coindex >= 2));
    // Three far-pair placements plus the full-block minimum.
    assert_eq!(report.excluded.len(), 4);
}

#[test]
fn basin_boundaries_follow_the_graph() {
    let s = Spectrum::certified(vec![1.0, 2.0, 4.0]).unwrap();
    let max_time = FlowConfig::for_spectrum(&s).max_time;
    let report = basin_crosscheck(&s, 10_000, 200, 17, max_time).unwrap();
    assert_eq!(report.volumes.len(), 6);
    assert!(report.volumes.iter().all(|(_, v)| *v > 0.0));
    assert!(report.crossings.len() >= 150);
    assert!(
        report.explained_fraction() >= 0.99,
        "{}",
        report.explained_fraction()
    );
    assert!(report.edge_fraction() >= 0.95, "{}", report.edge_fraction());
}
