//! Random small instances and finite-difference / brute-force oracles shared
//! by the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use incentive_core::hmm::{
    build_follower_hmm, sequence_count, sequence_likelihood, AugmentedHmm, FollowerHmm, ObservationSeq, SensorModel,
};
use incentive_core::incentive::{objective, total_gradient, IncentiveProblem, ObjectiveConfig};
use incentive_core::inference::{entropy_gradient, exact_conditional_entropy, EntropyMode, EntropySource};
use incentive_core::mdp::{pair_index, softmax_policy, solve, FollowerSpec, SidePayment, SoftSolution, SolverSettings};
use incentive_core::q_gradient::solve_q_jacobian;

pub const TIGHT: SolverSettings = SolverSettings {
    tol: 1e-13,
    max_iter: 100_000,
};

/// `|a - f| / max(|f|, 1e-3 ||f||_inf, 1e-12)`, maximized over components.
pub fn max_rel_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(reference)
        .map(|(a, f)| (a - f).abs() / f.abs().max(1e-3 * scale).max(1e-12))
        .fold(0.0, f64::max)
}

pub fn stochastic_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(0.05..1.0));
    for r in 0..rows {
        let s = m.row(r).sum();
        m.row_mut(r).scale_mut(1.0 / s);
    }
    m
}

pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn random_spec(rng: &mut ChaCha8Rng, n: usize, na: usize) -> FollowerSpec {
    let kernels = (0..na).map(|_| stochastic_rows(rng, n, n)).collect();
    let initial = DVector::from_vec(random_distribution(rng, n));
    let gamma = rng.gen_range(0.5..0.95);
    let tau = rng.gen_range(0.2..1.0);
    let reward = DMatrix::from_fn(n, na, |_, _| rng.gen_range(-1.0..1.0));
    FollowerSpec::new(kernels, initial, gamma, reward, tau).unwrap()
}

pub fn random_sensor(rng: &mut ChaCha8Rng, m: usize, n: usize) -> SensorModel {
    let emission = stochastic_rows(rng, n, m).transpose();
    let labels = (0..m).map(|o| format!("o{o}")).collect();
    SensorModel::new(labels, emission, None).unwrap()
}

/// Two followers of the same size, one shared sensor, a random prior and a
/// one- or two-pair payment support.
#[derive(Debug, Clone)]
pub struct Instance {
    pub specs: Vec<FollowerSpec>,
    pub sensor: SensorModel,
    pub prior: Vec<f64>,
    pub horizon: usize,
    pub payment: SidePayment,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=4);
        let m = rng.gen_range(2..=3);
        let horizon = rng.gen_range(1..=3);
        Self::random_sized(&mut rng, n, 2, m, horizon)
    }

    pub fn random_sized(rng: &mut ChaCha8Rng, n: usize, na: usize, m: usize, horizon: usize) -> Self {
        let specs = vec![random_spec(rng, n, na), random_spec(rng, n, na)];
        let sensor = random_sensor(rng, m, n);
        let prior = random_distribution(rng, 2);
        let mut support = vec![(rng.gen_range(0..n), rng.gen_range(0..na))];
        let second = (rng.gen_range(0..n), rng.gen_range(0..na));
        if rng.gen_bool(0.5) && second != support[0] {
            support.push(second);
        }
        let values = support.iter().map(|_| rng.gen_range(0.1..1.0)).collect();
        let payment = SidePayment::new(support, values, 5.0).unwrap();
        Self {
            specs,
            sensor,
            prior,
            horizon,
            payment,
        }
    }

    pub fn num_types(&self) -> usize {
        self.specs.len()
    }

    pub fn solutions(&self) -> Vec<SoftSolution> {
        self.specs
            .iter()
            .map(|s| solve(s, s.base_reward(), TIGHT).unwrap())
            .collect()
    }

    /// Q-tables of the base-reward solutions, concatenated by type.
    pub fn theta(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (spec, sol) in self.specs.iter().zip(self.solutions()) {
            for s in 0..spec.num_states() {
                for a in 0..spec.num_actions() {
                    out.push(sol.q_star[(s, a)]);
                }
            }
        }
        out
    }

    pub fn follower_from_theta(&self, i: usize, theta: &[f64]) -> FollowerHmm {
        let spec = &self.specs[i];
        let (n, na) = (spec.num_states(), spec.num_actions());
        let q = DMatrix::from_fn(n, na, |s, a| theta[pair_index(s, a, na)]);
        build_follower_hmm(spec, &softmax_policy(&q, spec.temperature()), &self.sensor).unwrap()
    }

    /// Augmented HMM for an arbitrary profile `theta`.
    pub fn aug_from_theta(&self, theta: &[f64]) -> AugmentedHmm {
        let block = self.specs[0].num_pairs();
        let followers = (0..self.num_types())
            .map(|i| self.follower_from_theta(i, &theta[i * block..(i + 1) * block]))
            .collect();
        AugmentedHmm::new(followers, self.prior.clone()).unwrap()
    }

    pub fn problem(&self) -> IncentiveProblem {
        let domain = SidePayment::zeros(self.payment.support().to_vec(), self.payment.max_value()).unwrap();
        IncentiveProblem::new(
            self.specs.clone(),
            vec![self.sensor.clone(); self.num_types()],
            self.prior.clone(),
            domain,
        )
        .unwrap()
        .with_solver(TIGHT)
    }

    pub fn exact_config(&self, beta: f64) -> ObjectiveConfig {
        ObjectiveConfig {
            horizon: self.horizon,
            beta,
            entropy_mode: EntropyMode::Exact,
            ..ObjectiveConfig::default()
        }
    }

    pub fn all_sequences(&self) -> Vec<ObservationSeq> {
        let m = self.sensor.alphabet_size();
        let len = self.horizon + 1;
        (0..sequence_count(m, len) as u64)
            .map(|k| ObservationSeq::from_index(k, m, len))
            .collect()
    }
}

pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[j] += h;
            down[j] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// Worst relative error of `dQ*/dR` against re-solving with perturbed rewards.
pub fn q_jacobian_error(inst: &Instance) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for spec in &inst.specs {
        let sol = solve(spec, spec.base_reward(), TIGHT).unwrap();
        let jac = solve_q_jacobian(spec, &sol).unwrap();
        let na = spec.num_actions();
        for col in 0..spec.num_pairs() {
            let (s, a) = (col / na, col % na);
            let q_at = |d: f64| {
                let mut r = spec.base_reward().clone();
                r[(s, a)] += d;
                solve(spec, &r, TIGHT).unwrap().q_star
            };
            let fd = (q_at(h) - q_at(-h)) / (2.0 * h);
            let fd: Vec<f64> = (0..spec.num_pairs()).map(|p| fd[(p / na, p % na)]).collect();
            let analytic: Vec<f64> = jac.matrix.column(col).iter().copied().collect();
            worst = worst.max(max_rel_error(&analytic, &fd));
        }
    }
    worst
}

/// Worst relative error of `dP(y)/dtheta` over every sequence and type.
pub fn likelihood_gradient_error(inst: &Instance) -> f64 {
    let theta = inst.theta();
    let block = inst.specs[0].num_pairs();
    let mut worst: f64 = 0.0;
    for i in 0..inst.num_types() {
        let th = &theta[i * block..(i + 1) * block];
        let hmm = inst.follower_from_theta(i, th);
        for y in inst.all_sequences() {
            let analytic = incentive_core::hmm::likelihood_gradient(&hmm, &y, &inst.specs[i]).unwrap();
            let fd = central_difference(th, 1e-5, |t| {
                sequence_likelihood(&inst.follower_from_theta(i, t), &y).unwrap()
            });
            worst = worst.max(max_rel_error(&analytic, &fd));
        }
    }
    worst
}

/// Worst relative error of the exact `dH/dtheta` against finite differences of
/// the enumerated entropy.
pub fn entropy_gradient_error(inst: &Instance) -> f64 {
    let theta = inst.theta();
    let aug = inst.aug_from_theta(&theta);
    let source = EntropySource::Exact {
        horizon: inst.horizon,
        cap: u64::MAX,
    };
    let analytic = entropy_gradient(&aug, source, &inst.specs).unwrap().gradient;
    let fd = central_difference(&theta, 1e-5, |t| {
        exact_conditional_entropy(&inst.aug_from_theta(t), inst.horizon, u64::MAX)
            .unwrap()
            .value
    });
    max_rel_error(&analytic, &fd)
}

/// Worst relative error of `DJ(x)` against finite differences of `J` in exact mode.
pub fn total_gradient_error(inst: &Instance) -> f64 {
    let problem = inst.problem();
    let config = inst.exact_config(0.05);
    let x = inst.payment.values().to_vec();
    let analytic = total_gradient(&inst.payment, &problem, &config).unwrap().gradient;
    let fd = central_difference(&x, 1e-4, |v| {
        objective(&problem.payment(v.to_vec()).unwrap(), &problem, &config)
            .unwrap()
            .objective
    });
    max_rel_error(&analytic, &fd)
}

/// `P(y)` by summing over every hidden state path.
pub fn brute_force_likelihood(spec: &FollowerSpec, policy: &DMatrix<f64>, sensor: &SensorModel, y: &[usize]) -> f64 {
    let n = spec.num_states();
    let step = |from: usize, to: usize| -> f64 {
        (0..spec.num_actions())
            .map(|a| policy[(from, a)] * spec.transition(a)[(from, to)])
            .sum()
    };
    let paths = n.pow(y.len() as u32);
    let mut total = 0.0;
    for mut code in 0..paths {
        let mut states = Vec::with_capacity(y.len());
        for _ in 0..y.len() {
            states.push(code % n);
            code /= n;
        }
        let mut p = spec.initial()[states[0]] * sensor.emission()[(y[0], states[0])];
        for k in 1..y.len() {
            p *= step(states[k - 1], states[k]) * sensor.emission()[(y[k], states[k])];
        }
        total += p;
    }
    total
}

/// Hard-max value iteration, the `tau -> 0` limit of the soft solver.
pub fn hard_value_iteration(spec: &FollowerSpec, reward: &DMatrix<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(spec.num_states());
    for _ in 0..100_000 {
        let q = reward + spec.expected_next(&v) * spec.discount();
        let next = DVector::from_iterator(
            spec.num_states(),
            (0..spec.num_states()).map(|s| q.row(s).max()),
        );
        let done = (&next - &v).amax() < 1e-13;
        v = next;
        if done {
            break;
        }
    }
    v
}
