//! Property tests for the invariants the library promises.

mod common;

use proptest::collection::vec;
use proptest::prelude::*;
use soe_core::eval::{self, SolutionRecord};
use soe_core::io::config::{parse_toml, render_toml, SimFileConfig, ValueMapKind};
use soe_core::io::trajectory::{decode_trajectory, encode_trajectory};
use soe_core::linalg::Matrix;
use soe_core::manifold::{estimate_manifold, Aggregation, MCSampleSet};
use soe_core::pipeline::{self, Gate, RunConfig, SelectorKind, TruncationStrategy};
use soe_core::probe;
use soe_core::sim::{self, AttentionKind};
use soe_core::spectral::{self, StateTrajectory};

fn rows(max_rows: usize, max_dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2..=max_rows, 1..=max_dim).prop_flat_map(|(r, d)| vec(vec(-10.0f64..10.0, d), r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn effrank_is_bounded_by_support(spectrum in vec(0.0f64..100.0, 1..40)) {
        let positive = spectrum.iter().filter(|&&x| x > 0.0).count();
        prop_assume!(positive > 0);
        let r = spectral::effective_rank(&spectrum).unwrap();
        prop_assert!(r >= 1.0 && r <= positive as f64);
    }

    #[test]
    fn effrank_is_scale_and_permutation_invariant(
        spectrum in vec(0.01f64..100.0, 1..30),
        c in 1e-3f64..1e3,
        shift in 0usize..30,
    ) {
        let base = spectral::effective_rank(&spectrum).unwrap();
        let scaled: Vec<f64> = spectrum.iter().map(|x| c * x).collect();
        let mut rotated = spectrum.clone();
        rotated.rotate_left(shift % spectrum.len());
        prop_assert!((spectral::effective_rank(&scaled).unwrap() - base).abs() < 1e-9 * base);
        prop_assert!((spectral::effective_rank(&rotated).unwrap() - base).abs() < 1e-9 * base);
    }

    #[test]
    fn trajectory_round_trips(
        data in rows(20, 12),
        tag in any::<u32>(),
        with_tokens in any::<bool>(),
        label in proptest::option::of(any::<bool>()),
    ) {
        let flat: Vec<f64> = data.iter().flatten().map(|&x| x as f32 as f64).collect();
        let mut traj = StateTrajectory::new(data[0].len(), flat).unwrap().with_layer_tag(tag).with_correctness(label);
        if with_tokens {
            traj = traj.with_tokens((0..data.len()).map(|i| format!(" w{i}\n")).collect()).unwrap();
        }
        let back = decode_trajectory(&encode_trajectory(&traj).unwrap()).unwrap();
        prop_assert_eq!(back, traj);
    }

    #[test]
    fn sim_config_round_trips_through_toml(
        dim in 2usize..64,
        steps in 1usize..100,
        beta_end in 0.0f64..50.0,
        betas in proptest::option::of(vec(0.0f64..30.0, 1..5)),
        noise in 0.0f64..1.0,
        linear in any::<bool>(),
        random_map in any::<bool>(),
        seed in proptest::option::of(any::<u32>()),
    ) {
        let config = SimFileConfig {
            dim,
            steps,
            beta_end,
            betas,
            noise_sigma: noise,
            attention: if linear { AttentionKind::Linear } else { AttentionKind::Softmax },
            value_map: if random_map { ValueMapKind::Random } else { ValueMapKind::Identity },
            seed: seed.map(u64::from),
            ..SimFileConfig::default()
        };
        let back: SimFileConfig = parse_toml(&render_toml(&config).unwrap()).unwrap();
        prop_assert_eq!(back, config);
    }

    #[test]
    fn run_config_round_trips_through_toml(
        budget in 1usize..64,
        rho in 0.01f64..1.0,
        theta in 0.01f64..1.0,
        collapse in any::<bool>(),
        random in any::<bool>(),
        uniform in any::<bool>(),
        last in any::<bool>(),
        seed in proptest::option::of(any::<u32>()),
    ) {
        let config = RunConfig {
            resume_budget: budget,
            rho,
            theta,
            gate: if collapse { Gate::Collapse } else { Gate::Always },
            selector: if random { SelectorKind::Random } else { SelectorKind::Orthogonal },
            strategy: if uniform { TruncationStrategy::UniformFractions } else { TruncationStrategy::StepMarkers },
            aggregation: if last { Aggregation::LastState } else { Aggregation::MeanPool },
            seed: seed.map(u64::from),
            ..RunConfig::default()
        };
        let back: RunConfig = parse_toml(&render_toml(&config).unwrap()).unwrap();
        prop_assert_eq!(back, config);
    }

    #[test]
    fn manifold_basis_is_orthonormal_and_bounded(samples in rows(16, 24), rho in 0.05f64..1.0, k_max in 1usize..6) {
        let set = MCSampleSet::new(samples, Aggregation::MeanPool, 0.7).unwrap();
        if let Ok(m) = estimate_manifold(&set, rho, k_max) {
            prop_assert!(m.rank() >= 1 && m.rank() <= k_max);
            prop_assert!(m.basis.orthonormality_error() < 1e-9);
            prop_assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(m.energy_fraction > 0.0 && m.energy_fraction <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn scores_are_in_unit_interval_and_scale_invariant(
        samples in rows(10, 12),
        seed in any::<u64>(),
        c in 0.01f64..100.0,
    ) {
        let d = samples[0].len();
        let set = MCSampleSet::new(samples, Aggregation::MeanPool, 0.7).unwrap();
        let Ok(m) = estimate_manifold(&set, 0.9, 4) else { return Ok(()) };
        let mut rng = common::rng(seed);
        let dir = common::gaussian(&mut rng, d);
        let z: Vec<f64> = m.mean.iter().zip(&dir).map(|(a, b)| a + b).collect();
        let zc: Vec<f64> = m.mean.iter().zip(&dir).map(|(a, b)| a + c * b).collect();
        let s = probe::orthogonality_score(&z, &m, 0.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((probe::orthogonality_score(&zc, &m, 0.0).unwrap() - s).abs() < 1e-9);
        prop_assert!(probe::orthogonality_score(&z, &m, 1e-8).unwrap() <= s + 1e-15);
    }

    #[test]
    fn distinct_curve_is_monotone(seed in any::<u64>(), n in 1usize..50, tau in 0.1f64..0.999) {
        let records = common::clustered_records(seed, n, 6);
        let curve = eval::distinct_solutions(&records, tau).unwrap();
        prop_assert_eq!(curve.points.len(), n);
        prop_assert!(curve.points.windows(2).all(|w| w[0].tokens <= w[1].tokens && w[0].distinct <= w[1].distinct));
        let correct = records.iter().filter(|r| r.correct).count();
        prop_assert!(curve.final_count() <= correct);
        prop_assert_eq!(curve.points.last().unwrap().tokens, records.iter().map(|r| r.token_cost).sum::<u64>());
    }

    #[test]
    fn duplicating_a_solution_never_adds_a_distinct_one(seed in any::<u64>(), n in 1usize..30) {
        let records = common::clustered_records(seed, n, 6);
        let before = eval::distinct_solutions(&records, 0.95).unwrap().final_count();
        let mut extra = records.clone();
        let copy = SolutionRecord { order: u64::MAX, ..records[0].clone() };
        extra.push(copy);
        prop_assert_eq!(eval::distinct_solutions(&extra, 0.95).unwrap().final_count(), before);
    }

    #[test]
    fn pass_at_k_ignores_problem_and_sample_order(
        problems in vec(vec(any::<bool>(), 1..10), 1..20),
        rot in 0usize..20,
    ) {
        let base = eval::pass_at_k(&problems).unwrap();
        let mut shuffled = problems.clone();
        shuffled.rotate_left(rot % problems.len());
        shuffled.iter_mut().for_each(|p| p.reverse());
        prop_assert_eq!(eval::pass_at_k(&shuffled).unwrap(), base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn budget_split_is_even_and_complete(total in 0usize..10_000, parts in 1usize..64) {
        let split = pipeline::split_budget(total, parts);
        prop_assert_eq!(split.len(), parts);
        prop_assert_eq!(split.iter().sum::<usize>(), total);
        prop_assert!(split.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }

    #[test]
    fn uniform_plans_are_strictly_increasing_interior_points(len in 1usize..500, n in 1usize..10) {
        let points = pipeline::uniform_points(len, n);
        prop_assert!(points.len() <= n);
        prop_assert!(points.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(points.iter().all(|&p| p < len));
    }

    #[test]
    fn step_markers_cut_right_after_each_heading(steps in 1usize..8, filler in 1usize..6) {
        let mut tokens = Vec::new();
        let mut want = Vec::new();
        for s in 1..=steps {
            tokens.push(if s == 1 { "Step 1:".to_string() } else { format!("\nStep {s}:") });
            want.push(tokens.len());
            tokens.extend((0..filler).map(|i| format!(" x{i}")));
        }
        prop_assert_eq!(pipeline::step_marker_points(&tokens), want);
    }

    #[test]
    fn injection_rank_law(seed in any::<u64>(), m in 1usize..6, out in any::<bool>()) {
        let d = 12;
        let mut rng = common::rng(seed);
        let basis = sim::random_subspace(d, m, seed).unwrap();
        let rows: Vec<Vec<f64>> = (0..10).map(|_| basis.mat_vec(&common::gaussian(&mut rng, m)).unwrap()).collect();
        let states = Matrix::from_rows(&rows).unwrap();
        let v = if out {
            let (_, perp) = soe_core::linalg::project_split(&basis, &common::gaussian(&mut rng, d)).unwrap();
            perp
        } else {
            basis.mat_vec(&common::gaussian(&mut rng, m)).unwrap()
        };
        let ev = sim::inject_orthogonal(&states, &v, sim::DEFAULT_RANK_TOL).unwrap();
        prop_assert!(ev.rank_after <= ev.rank_before + 1);
        if out {
            prop_assert_eq!(ev.rank_after, ev.rank_before + 1);
        } else {
            prop_assert_eq!(ev.rank_after, ev.rank_before);
        }
    }
}
