use isoflow::manifold::{random_state, SymState};
use isoflow::perm::Permutation;
use isoflow::spectra::Spectrum;
use isoflow::stochastic::{
    chart_drift, estimate_markov, first_hitting, random_starts, sde_step, simulate_path,
    simulate_paths, stationary_check, theta_chart, HittingSample, SdeConfig,
};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn s124() -> Spectrum {
    Spectrum::certified(vec![1.0, 2.0, 4.0]).unwrap()
}

#[test]
fn a_million_noisy_steps_keep_the_spectrum() {
    let s = Spectrum::random(4, 2.0, 4).unwrap();
    let cfg = SdeConfig::new(&s, 0.4, 1e-3, 1000.0, 4);
    let path = simulate_path(&random_state(&s, 4), &cfg, 0).unwrap();
    assert_eq!(path.steps, 1_000_000);
    assert!(
        path.terminal_state.spectrum_error() < 1e-8,
        "{:e}",
        path.terminal_state.spectrum_error()
    );
}

#[test]
fn chart_moments_match_drift_and_diffusion() {
    let s = Spectrum::certified(vec![1.0, 3.0]).unwrap();
    let (eps, h) = (0.3, 1e-4);
    let cfg = SdeConfig::new(&s, eps, h, 1.0, 0);
    let theta0: f64 = 0.9;
    let (c, sn) = ((0.5 * theta0).cos(), (0.5 * theta0).sin());
    let start = SymState::from_frame(s.clone(), &DMatrix::from_row_slice(2, 2, &[c, sn, -sn, c]));
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 100_000;
    let increments: Vec<f64> = (0..n)
        .map(|_| theta_chart(&sde_step(&start, &cfg, &mut rng)).unwrap() - theta0)
        .collect();
    let mean = increments.iter().sum::<f64>() / n as f64;
    let var = increments.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;

    let drift = mean / h;
    let drift_se = (var / n as f64).sqrt() / h;
    let expected_drift = chart_drift(&s, theta0);
    assert!(
        (drift - expected_drift).abs() < 3.0 * drift_se,
        "{drift} vs {expected_drift} (se {drift_se})"
    );

    let diffusion = var / h;
    let diffusion_se = diffusion * (2.0 / (n - 1) as f64).sqrt();
    let expected_diffusion = 2.0 * eps * eps;
    assert!(
        (diffusion - expected_diffusion).abs() < 3.0 * diffusion_se,
        "{diffusion} vs {expected_diffusion} (se {diffusion_se})"
    );
}

#[test]
fn chain_statistics_are_relabeling_invariant() {
    let s = s124();
    let cfg = SdeConfig::new(&s, 0.45, 0.01, 300.0, 5);
    let perm = [2, 0, 1];
    let base = random_state(&s, 77);
    let starts_a = vec![base.clone(); 60];
    let starts_b = vec![base.permuted(&perm); 60];
    let a = estimate_markov(&simulate_paths(&starts_a, &cfg).unwrap()).unwrap();
    let b = estimate_markov(&simulate_paths(&starts_b, &SdeConfig { seed: 6, ..cfg }).unwrap())
        .unwrap();

    // Two-sample chi-square over transition types, with run B relabeled.
    let m = a.states.len();
    let mut table = Vec::new();
    for from in 0..m {
        for to in 0..m {
            let ca = a.counts[from][to] as f64;
            let (pf, pt) = (a.states[from].moved_by(&perm), a.states[to].moved_by(&perm));
            let cb = b.counts[pf.lexicographic_index()][pt.lexicographic_index()] as f64;
            if ca + cb > 0.0 {
                table.push((ca, cb));
            }
        }
    }
    let (na, nb): (f64, f64) = table
        .iter()
        .fold((0.0, 0.0), |(x, y), (a, b)| (x + a, y + b));
    assert!(na > 200.0 && nb > 200.0, "{na} {nb}");
    let mut stat = 0.0;
    for (ca, cb) in &table {
        let total = ca + cb;
        let (ea, eb) = (total * na / (na + nb), total * nb / (na + nb));
        stat += (ca - ea).powi(2) / ea + (cb - eb).powi(2) / eb;
    }
    let p = ChiSquared::new((table.len() - 1) as f64).unwrap().sf(stat);
    assert!(p > 1e-3, "p = {p}, stat {stat} over {} cells", table.len());
}

#[test]
fn independent_runs_agree_on_the_potential_histogram() {
    let s = s124();
    let cfg = SdeConfig {
        sample_stride: 10,
        ..SdeConfig::new(&s, 0.4, 0.01, 500.0, 1)
    };
    let collect = |seed: u64| -> Vec<f64> {
        let starts = random_starts(&s, 20, seed);
        simulate_paths(&starts, &SdeConfig { seed, ..cfg })
            .unwrap()
            .into_iter()
            .flat_map(|p| p.psi_samples)
            .collect()
    };
    let report = stationary_check(&collect(1), &collect(2), 20, 5).unwrap();
    assert!(report.total_variation < 0.05, "{}", report.total_variation);
}

#[test]
fn hitting_times_grow_as_noise_shrinks() {
    let s = s124();
    let from = Permutation::identity(3);
    let neighbours = vec![from.swap_values(0), from.swap_values(1)];
    let mean_time = |eps: f64| {
        let cfg = SdeConfig::new(&s, eps, 0.01, 400.0, 3);
        let samples = first_hitting(&s, &from, &neighbours, &cfg, 200).unwrap();
        let times: Vec<f64> = samples
            .iter()
            .filter_map(|x| match x {
                HittingSample::Hit { time, .. } => Some(*time),
                _ => None,
            })
            .collect();
        assert!(times.len() >= 160, "eps {eps}: only {} hits", times.len());
        times.iter().sum::<f64>() / times.len() as f64
    };
    let grid = [0.7, 0.55, 0.45];
    let means: Vec<f64> = grid.iter().map(|&e| mean_time(e)).collect();
    assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
}

#[test]
fn non_adjacent_targets_are_rarely_hit_first() {
    let s = s124();
    let from = Permutation::identity(3);
    let cfg = SdeConfig::new(&s, 0.5, 0.01, 400.0, 8);
    let hit_fraction = |targets: &[Permutation]| {
        let samples = first_hitting(&s, &from, targets, &cfg, 300).unwrap();
        samples
            .iter()
            .filter(|x| matches!(x, HittingSample::Hit { .. }))
            .count() as f64
            / samples.len() as f64
    };
    let far = Permutation::new(vec![2, 1, 0]).unwrap();
    assert!(!far.is_adjacent_to(&from));
    let adjacent = hit_fraction(&[from.swap_values(0), from.swap_values(1)]);
    let distant = hit_fraction(&[far]);
    assert!(adjacent > 0.9, "{adjacent}");
    assert!(distant < 0.1 * adjacent, "{distant} vs {adjacent}");
}

#[test]
fn dominance_weakens_with_large_noise() {
    let s = s124();
    let dominance = |eps: f64| {
        let cfg = SdeConfig::new(&s, eps, 0.01, 200.0, 12);
        let paths = simulate_paths(&random_starts(&s, 20, 12), &cfg).unwrap();
        estimate_markov(&paths).unwrap().adjacency_dominance
    };
    let (quiet, loud) = (dominance(0.45), dominance(3.0));
    assert!(quiet > loud, "{quiet} vs {loud}");
    assert!(quiet > 0.95);
}
