//! Normalization laws, the soft Bellman residual and brute-force likelihoods.

mod common;

use common::{brute_force_likelihood, Instance, TIGHT};
use incentive_core::hmm::{log_likelihood, sequence_likelihood, AugmentedHmm};
use incentive_core::inference::{entropy_gradient, posterior, EntropySource};
use incentive_core::mdp::{soft_max, solve};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sized(seed: u64, n: usize, m: usize, horizon: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Instance::random_sized(&mut rng, n, 2, m, horizon)
}

#[test]
fn sequence_probabilities_sum_to_one() {
    for (seed, m, horizon) in [(1, 2, 4), (2, 3, 3), (3, 4, 4), (4, 4, 2)] {
        let inst = sized(seed, 3, m, horizon);
        let aug = inst.aug_from_theta(&inst.theta());
        let seqs = inst.all_sequences();
        for f in aug.followers() {
            let total: f64 = seqs.iter().map(|y| sequence_likelihood(f, y).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-10, "{total}");
        }
        let mut evidence = 0.0;
        for y in &seqs {
            let post = posterior(&aug, y).unwrap();
            assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            evidence += post.evidence();
        }
        assert!((evidence - 1.0).abs() < 1e-10, "{evidence}");
    }
}

#[test]
fn exact_entropy_gradient_of_evidence_vanishes() {
    // sum_y dP(y) = 0 is implied by the score having zero mean.
    let inst = sized(9, 3, 3, 2);
    let aug = inst.aug_from_theta(&inst.theta());
    let mut total = vec![0.0; inst.theta().len()];
    for y in inst.all_sequences() {
        let pg = incentive_core::inference::posterior_gradient(&aug, &y, &inst.specs).unwrap();
        let p = pg.posterior.evidence();
        total.iter_mut().zip(&pg.score).for_each(|(t, s)| *t += p * s);
    }
    assert!(total.iter().all(|t| t.abs() < 1e-12), "{total:?}");
    let g = entropy_gradient(&aug, EntropySource::Exact { horizon: 2, cap: 1_000 }, &inst.specs).unwrap();
    assert!(g.gradient.iter().all(|v| v.is_finite()));
}

#[test]
fn soft_bellman_residual_is_small() {
    for seed in 0..10 {
        let inst = Instance::random(seed);
        for spec in &inst.specs {
            let sol = solve(spec, spec.base_reward(), Default::default()).unwrap();
            let q = spec.base_reward() + spec.expected_next(&sol.v_star) * spec.discount();
            assert!((&q - &sol.q_star).amax() < 1e-9);
            for s in 0..spec.num_states() {
                let v = soft_max(sol.q_star.row(s).iter().copied(), spec.temperature());
                assert!((v - sol.v_star[s]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn operator_likelihood_matches_path_enumeration() {
    for seed in 0..6 {
        let inst = Instance::random(seed);
        let sols: Vec<_> = inst.specs.iter().map(|s| solve(s, s.base_reward(), TIGHT).unwrap()).collect();
        let aug = inst.aug_from_theta(&inst.theta());
        for y in inst.all_sequences() {
            for (i, f) in aug.followers().iter().enumerate() {
                let oracle = brute_force_likelihood(&inst.specs[i], &sols[i].policy, &inst.sensor, y.symbols());
                let got = sequence_likelihood(f, &y).unwrap();
                assert!((got - oracle).abs() <= 1e-12 * oracle.max(1e-300) + 1e-15, "{got} vs {oracle}");
            }
        }
    }
}

#[test]
fn augmented_chain_evidence_matches_mixture() {
    // Run the forward pass on the (state, type) product chain directly.
    let inst = sized(11, 3, 3, 3);
    let aug: AugmentedHmm = inst.aug_from_theta(&inst.theta());
    let n = aug.num_states();
    let k = aug.num_types();
    for y in inst.all_sequences().iter().step_by(3) {
        let mut alpha = aug.joint_initial();
        for &o in y.symbols() {
            let mut next = nalgebra::DMatrix::zeros(n, k);
            for t in 0..k {
                let col = aug.followers()[t].operator(o) * alpha.column(t);
                next.set_column(t, &col);
            }
            alpha = next;
        }
        let evidence: f64 = alpha.sum();
        let post = posterior(&aug, y).unwrap();
        assert!((post.evidence() - evidence).abs() < 1e-14);
        for t in 0..k {
            let direct = alpha.column(t).sum() / evidence;
            assert!((post.probs[t] - direct).abs() < 1e-12);
        }
    }
}

#[test]
fn impossible_sequence_has_zero_likelihood() {
    use incentive_core::hmm::{build_follower_hmm, ObservationSeq, SensorModel};
    let inst = sized(2, 2, 2, 1);
    // Symbol 1 is never emitted.
    let sensor = SensorModel::new(
        vec!["a".into(), "b".into()],
        nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]),
        None,
    )
    .unwrap();
    let sol = solve(&inst.specs[0], inst.specs[0].base_reward(), TIGHT).unwrap();
    let hmm = build_follower_hmm(&inst.specs[0], &sol.policy, &sensor).unwrap();
    let y = ObservationSeq::new(vec![0, 1], 2).unwrap();
    assert_eq!(log_likelihood(&hmm, &y).unwrap(), f64::NEG_INFINITY);
}
