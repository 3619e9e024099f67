//! The leader's single-level problem `J(x) = H(T | Y; pi*(x)) + beta ||x||_1`
//! and projected gradient descent over the side payment.
//!
//! Gradients follow the chain `DJ = DH(theta) * DQ*(R(x)) * DR(x) + Dh(x)` with
//! `theta` the profile of soft-optimal Q-tables.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hmm::{build_follower_hmm, sample_observations, AugmentedHmm, ObservationSeq, SensorModel};
use crate::inference::{
    entropy_gradient, exact_conditional_entropy, sampled_conditional_entropy, EntropyEstimate, EntropyMode,
    EntropySource, DEFAULT_ENUMERATION_CAP,
};
use crate::mdp::{solve_with_payment, FollowerSpec, SidePayment, SoftSolution, SolverSettings};
use crate::q_gradient::profile_q_jacobian;

/// Followers, the leader's sensors, the type prior and the payment domain.
#[derive(Debug, Clone, PartialEq)]
pub struct IncentiveProblem {
    followers: Vec<FollowerSpec>,
    sensors: Vec<SensorModel>,
    prior: Vec<f64>,
    /// Support and bound; the values are ignored.
    domain: SidePayment,
    solver: SolverSettings,
}

impl IncentiveProblem {
    pub fn new(
        followers: Vec<FollowerSpec>,
        sensors: Vec<SensorModel>,
        prior: Vec<f64>,
        domain: SidePayment,
    ) -> Result<Self> {
        if followers.is_empty() {
            return Err(Error::Config("need at least one follower type".into()));
        }
        if followers.len() != sensors.len() || followers.len() != prior.len() {
            return Err(Error::Config(format!(
                "{} followers, {} sensor models, {} prior entries",
                followers.len(),
                sensors.len(),
                prior.len()
            )));
        }
        let (n, a) = (followers[0].num_states(), followers[0].num_actions());
        if followers.iter().any(|f| f.num_states() != n || f.num_actions() != a) {
            return Err(Error::Config("followers must share state and action spaces".into()));
        }
        domain.check_indices(n, a)?;
        if domain.is_empty() {
            return Err(Error::Config("payment support is empty".into()));
        }
        Ok(Self {
            followers,
            sensors,
            prior,
            domain,
            solver: SolverSettings::default(),
        })
    }

    pub fn with_solver(mut self, solver: SolverSettings) -> Self {
        self.solver = solver;
        self
    }

    pub fn followers(&self) -> &[FollowerSpec] {
        &self.followers
    }

    pub fn sensors(&self) -> &[SensorModel] {
        &self.sensors
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn solver(&self) -> SolverSettings {
        self.solver
    }

    pub fn num_types(&self) -> usize {
        self.followers.len()
    }

    pub fn support(&self) -> &[(usize, usize)] {
        self.domain.support()
    }

    pub fn max_value(&self) -> f64 {
        self.domain.max_value()
    }

    /// A payment on this problem's support; values must lie in the box.
    pub fn payment(&self, values: Vec<f64>) -> Result<SidePayment> {
        self.domain.with_values(values)
    }

    /// Every coordinate set to `value`.
    pub fn uniform_payment(&self, value: f64) -> Result<SidePayment> {
        self.payment(vec![value; self.domain.len()])
    }

    fn check_payment(&self, x: &SidePayment) -> Result<()> {
        if x.support() != self.domain.support() {
            return Err(Error::InvalidArgument("payment support differs from the problem's".into()));
        }
        Ok(())
    }

    /// Solves every follower under `x` and builds the induced type HMM.
    pub fn respond(&self, x: &SidePayment) -> Result<FollowerResponse> {
        self.check_payment(x)?;
        let solutions = self
            .followers
            .par_iter()
            .map(|spec| solve_with_payment(spec, x, self.solver))
            .collect::<Result<Vec<_>>>()?;
        let hmms = self
            .followers
            .iter()
            .zip(&solutions)
            .zip(&self.sensors)
            .map(|((spec, sol), sensor)| build_follower_hmm(spec, &sol.policy, sensor))
            .collect::<Result<Vec<_>>>()?;
        let aug = AugmentedHmm::new(hmms, self.prior.clone())?;
        Ok(FollowerResponse { solutions, aug })
    }
}

/// Best responses of all followers to one payment.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerResponse {
    pub solutions: Vec<SoftSolution>,
    pub aug: AugmentedHmm,
}

/// How the Monte Carlo seed evolves across optimizer iterations. Within one
/// iteration the objective and gradient always share a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplePolicy {
    /// Every iteration reuses `seed`.
    FixedSeed,
    /// Iteration `t` uses the `t`-th draw of a stream keyed by `seed`.
    Fresh,
}

impl std::fmt::Display for ResamplePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResamplePolicy::FixedSeed => "fixed-seed",
            ResamplePolicy::Fresh => "fresh",
        })
    }
}

impl std::str::FromStr for ResamplePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-seed" => Ok(ResamplePolicy::FixedSeed),
            "fresh" => Ok(ResamplePolicy::Fresh),
            other => Err(Error::InvalidArgument(format!("unknown resample policy `{other}`"))),
        }
    }
}

/// Hyperparameters of the objective and the descent loop.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObjectiveConfig {
    /// Sequences hold `horizon + 1` symbols.
    pub horizon: usize,
    pub sample_count: usize,
    pub beta: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
    pub entropy_mode: EntropyMode,
    pub resample: ResamplePolicy,
    pub enumeration_cap: u64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            horizon: 12,
            sample_count: 2000,
            beta: 0.05,
            step_size: 0.1,
            max_iters: 200,
            grad_tol: 1e-4,
            seed: 0,
            entropy_mode: EntropyMode::Sampled,
            resample: ResamplePolicy::Fresh,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.sample_count == 0 {
            return bad("sample count must be at least 1");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be nonnegative");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step size must be positive");
        }
        if !(self.grad_tol > 0.0) {
            return bad("gradient tolerance must be positive");
        }
        Ok(())
    }
}

/// `h(x) = beta * sum_j x_j` (x is nonnegative).
pub fn cost(x: &SidePayment, beta: f64) -> f64 {
    beta * x.values().iter().sum::<f64>()
}

/// `beta` per coordinate; at `x_j = 0` this is the right derivative.
pub fn cost_gradient(x: &SidePayment, beta: f64) -> Vec<f64> {
    vec![beta; x.len()]
}

/// `(J, H, h)` at one payment.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub entropy: EntropyEstimate,
    pub cost: f64,
}

fn draw_sequences(aug: &AugmentedHmm, config: &ObjectiveConfig, seed: u64) -> Result<Vec<ObservationSeq>> {
    Ok(sample_observations(aug, config.sample_count, config.horizon, seed)?
        .into_iter()
        .map(|(_, y)| y)
        .collect())
}

/// `J(x)` using `seed` for the Monte Carlo draw in sampled mode.
pub fn objective_with_seed(
    x: &SidePayment,
    problem: &IncentiveProblem,
    config: &ObjectiveConfig,
    seed: u64,
) -> Result<ObjectiveValue> {
    config.validate()?;
    let response = problem.respond(x)?;
    let entropy = match config.entropy_mode {
        EntropyMode::Exact => exact_conditional_entropy(&response.aug, config.horizon, config.enumeration_cap)?,
        EntropyMode::Sampled => {
            let samples = draw_sequences(&response.aug, config, seed)?;
            sampled_conditional_entropy(&response.aug, &samples)?
        }
    };
    let h = cost(x, config.beta);
    Ok(ObjectiveValue {
        objective: entropy.value + h,
        entropy,
        cost: h,
    })
}

/// `J(x)` with `config.seed`.
pub fn objective(x: &SidePayment, problem: &IncentiveProblem, config: &ObjectiveConfig) -> Result<ObjectiveValue> {
    objective_with_seed(x, problem, config, config.seed)
}

/// `DJ(x)` and the objective value it was computed with.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalGradient {
    pub value: ObjectiveValue,
    /// `DJ(x)` over the support.
    pub gradient: Vec<f64>,
    /// The entropy part `DH * DQ* * DR` alone.
    pub entropy_part: Vec<f64>,
    /// Profile gradient `dH/dtheta` before the chain rule.
    pub theta_gradient: Vec<f64>,
}

pub fn total_gradient_with_seed(
    x: &SidePayment,
    problem: &IncentiveProblem,
    config: &ObjectiveConfig,
    seed: u64,
) -> Result<TotalGradient> {
    config.validate()?;
    let response = problem.respond(x)?;
    let samples;
    let source = match config.entropy_mode {
        EntropyMode::Exact => EntropySource::Exact {
            horizon: config.horizon,
            cap: config.enumeration_cap,
        },
        EntropyMode::Sampled => {
            samples = draw_sequences(&response.aug, config, seed)?;
            EntropySource::Sampled(&samples)
        }
    };
    let eg = entropy_gradient(&response.aug, source, problem.followers())?;
    let jac = profile_q_jacobian(problem.followers(), &response.solutions, x)?;
    let entropy_part = jac.pull_back(&eg.gradient)?;
    let gradient = entropy_part
        .iter()
        .zip(cost_gradient(x, config.beta))
        .map(|(a, b)| a + b)
        .collect();
    let h = cost(x, config.beta);
    Ok(TotalGradient {
        value: ObjectiveValue {
            objective: eg.entropy.value + h,
            entropy: eg.entropy,
            cost: h,
        },
        gradient,
        entropy_part,
        theta_gradient: eg.gradient,
    })
}

/// `DJ(x)` with `config.seed`.
pub fn total_gradient(x: &SidePayment, problem: &IncentiveProblem, config: &ObjectiveConfig) -> Result<TotalGradient> {
    total_gradient_with_seed(x, problem, config, config.seed)
}

/// One descent iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct OptRecord {
    pub iter: usize,
    pub x: Vec<f64>,
    pub entropy: f64,
    pub cost: f64,
    pub objective: f64,
    /// Norm of the projected gradient `(x - clamp(x - step * DJ)) / step`.
    pub grad_norm: f64,
    pub gradient: Vec<f64>,
    pub entropy_std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptStatus {
    Converged,
    MaxIters,
    /// A solver failure stopped the loop; the trace holds every iterate before it.
    Aborted(Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptTrace {
    pub records: Vec<OptRecord>,
    pub status: OptStatus,
}

impl OptTrace {
    pub fn last(&self) -> Option<&OptRecord> {
        self.records.last()
    }
}

fn projected_gradient(x: &[f64], gradient: &[f64], step: f64, max_value: f64) -> Vec<f64> {
    x.iter()
        .zip(gradient)
        .map(|(xi, g)| (xi - (xi - step * g).clamp(0.0, max_value)) / step)
        .collect()
}

/// Projected gradient descent `x <- clamp(x - step DJ(x), 0, x_max)` from `x0`.
pub fn optimize(problem: &IncentiveProblem, config: &ObjectiveConfig, x0: &SidePayment) -> Result<OptTrace> {
    optimize_with(problem, config, x0, |_| {})
}

/// As [`optimize`], calling `observe` after every recorded iterate.
pub fn optimize_with(
    problem: &IncentiveProblem,
    config: &ObjectiveConfig,
    x0: &SidePayment,
    mut observe: impl FnMut(&OptRecord),
) -> Result<OptTrace> {
    config.validate()?;
    problem.check_payment(x0)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = x0.clone();
    let mut records = Vec::new();
    for iter in 0..=config.max_iters {
        let seed = match config.resample {
            ResamplePolicy::FixedSeed => config.seed,
            ResamplePolicy::Fresh => seeds.next_u64(),
        };
        let tg = match total_gradient_with_seed(&x, problem, config, seed) {
            Ok(tg) => tg,
            Err(e) => {
                return Ok(OptTrace {
                    records,
                    status: OptStatus::Aborted(e),
                })
            }
        };
        let pg = projected_gradient(x.values(), &tg.gradient, config.step_size, problem.max_value());
        let grad_norm = pg.iter().map(|g| g * g).sum::<f64>().sqrt();
        let record = OptRecord {
            iter,
            x: x.values().to_vec(),
            entropy: tg.value.entropy.value,
            cost: tg.value.cost,
            objective: tg.value.objective,
            grad_norm,
            gradient: tg.gradient.clone(),
            entropy_std_error: tg.value.entropy.std_error,
        };
        observe(&record);
        records.push(record);
        if grad_norm < config.grad_tol {
            return Ok(OptTrace {
                records,
                status: OptStatus::Converged,
            });
        }
        if iter == config.max_iters {
            break;
        }
        let next: Vec<f64> = x
            .values()
            .iter()
            .zip(&tg.gradient)
            .map(|(xi, g)| xi - config.step_size * g)
            .collect();
        x = x.projected(&next)?;
    }
    Ok(OptTrace {
        records,
        status: OptStatus::MaxIters,
    })
}
