//! Follower MDPs, side payments and the entropy-regularized planning problem.
//!
//! Every follower solves a discounted MDP whose Bellman backup is a
//! temperature-scaled log-sum-exp:
//!
//! ```text
//! V*(s)   = tau * ln sum_a exp(Q*(s,a) / tau)
//! Q*(s,a) = R(s,a) + gamma * sum_s' P(s'|s,a) V*(s')
//! pi*(a|s) = exp(Q*(s,a) / tau) / sum_a' exp(Q*(s,a') / tau)
//! ```
//!
//! Tables over state-action pairs are `N x A` matrices; when flattened they use
//! row-major `(s, a)` order, see [`pair_index`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Default sup-norm tolerance for soft value iteration.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default sweep budget for soft value iteration.
pub const DEFAULT_MAX_ITER: usize = 100_000;
/// Default softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Flattened index of the pair `(s, a)`.
#[inline]
pub fn pair_index(state: usize, action: usize, num_actions: usize) -> usize {
    state * num_actions + action
}

/// One follower type's planning problem.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerSpec {
    /// `transition[a][(s, s')] = P(s' | s, a)`.
    transition: Vec<DMatrix<f64>>,
    initial: DVector<f64>,
    discount: f64,
    /// `N x A` table of rewards without payments.
    base_reward: DMatrix<f64>,
    temperature: f64,
}

impl FollowerSpec {
    pub fn new(
        transition: Vec<DMatrix<f64>>,
        initial: DVector<f64>,
        discount: f64,
        base_reward: DMatrix<f64>,
        temperature: f64,
    ) -> Result<Self> {
        let num_actions = transition.len();
        if num_actions == 0 {
            return Err(Error::Config("follower needs at least one action".into()));
        }
        let n = initial.len();
        if n == 0 {
            return Err(Error::Config("follower needs at least one state".into()));
        }
        for (a, kernel) in transition.iter().enumerate() {
            if kernel.nrows() != n || kernel.ncols() != n {
                return Err(Error::Config(format!(
                    "transition[{a}] is {}x{}, expected {n}x{n}",
                    kernel.nrows(),
                    kernel.ncols()
                )));
            }
            for s in 0..n {
                let row = kernel.row(s);
                if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::Config(format!(
                        "transition[{a}] row {s} has entry {p} outside [0,1]"
                    )));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::Config(format!(
                        "transition[{a}] row {s} sums to {total}"
                    )));
                }
            }
        }
        if initial.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("initial distribution has entries outside [0,1]".into()));
        }
        let total: f64 = initial.iter().sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Config(format!("initial distribution sums to {total}")));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::Config(format!("discount {discount} not in (0,1)")));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {temperature} must be positive")));
        }
        if base_reward.nrows() != n || base_reward.ncols() != num_actions {
            return Err(Error::Config(format!(
                "base reward is {}x{}, expected {n}x{num_actions}",
                base_reward.nrows(),
                base_reward.ncols()
            )));
        }
        if base_reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Config("base reward has non-finite entries".into()));
        }
        Ok(Self {
            transition,
            initial,
            discount,
            base_reward,
            temperature,
        })
    }

    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    pub fn num_actions(&self) -> usize {
        self.transition.len()
    }

    /// Number of state-action pairs, the length of a flattened table.
    pub fn num_pairs(&self) -> usize {
        self.num_states() * self.num_actions()
    }

    pub fn transition(&self, action: usize) -> &DMatrix<f64> {
        &self.transition[action]
    }

    pub fn transitions(&self) -> &[DMatrix<f64>] {
        &self.transition
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn base_reward(&self) -> &DMatrix<f64> {
        &self.base_reward
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {temperature} must be positive")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn with_base_reward(mut self, base_reward: DMatrix<f64>) -> Result<Self> {
        if base_reward.shape() != self.base_reward.shape() {
            return Err(Error::Config("base reward shape mismatch".into()));
        }
        self.base_reward = base_reward;
        Ok(self)
    }

    /// `sum_s' P(s'|s,a) v(s')` for every pair, as an `N x A` table.
    pub fn expected_next(&self, values: &DVector<f64>) -> DMatrix<f64> {
        let n = self.num_states();
        let mut out = DMatrix::zeros(n, self.num_actions());
        for (a, kernel) in self.transition.iter().enumerate() {
            out.set_column(a, &(kernel * values));
        }
        out
    }

    fn check_table(&self, table: &DMatrix<f64>, what: &str) -> Result<()> {
        if table.nrows() != self.num_states() || table.ncols() != self.num_actions() {
            return Err(Error::InvalidArgument(format!(
                "{what} is {}x{}, expected {}x{}",
                table.nrows(),
                table.ncols(),
                self.num_states(),
                self.num_actions()
            )));
        }
        Ok(())
    }
}

/// Nonnegative reward bonus on an ordered support of state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SidePayment {
    support: Vec<(usize, usize)>,
    values: Vec<f64>,
    max_value: f64,
}

impl SidePayment {
    pub fn new(support: Vec<(usize, usize)>, values: Vec<f64>, max_value: f64) -> Result<Self> {
        if !(max_value > 0.0 && max_value.is_finite()) {
            return Err(Error::Config(format!("payment bound {max_value} must be positive")));
        }
        if support.len() != values.len() {
            return Err(Error::Config(format!(
                "payment support has {} pairs but {} values",
                support.len(),
                values.len()
            )));
        }
        for (k, pair) in support.iter().enumerate() {
            if support[..k].contains(pair) {
                return Err(Error::Config(format!(
                    "payment support repeats pair (s={}, a={})",
                    pair.0, pair.1
                )));
            }
        }
        let payment = Self {
            support,
            values: Vec::new(),
            max_value,
        };
        payment.with_values(values)
    }

    /// All-zero payment on `support`.
    pub fn zeros(support: Vec<(usize, usize)>, max_value: f64) -> Result<Self> {
        let values = vec![0.0; support.len()];
        Self::new(support, values, max_value)
    }

    /// Same support and bound, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.support.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} payment values, got {}",
                self.support.len(),
                values.len()
            )));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !(**v >= 0.0 && **v <= self.max_value))
        {
            return Err(Error::InvalidArgument(format!(
                "payment value {v} outside [0, {}]",
                self.max_value
            )));
        }
        Ok(Self {
            support: self.support.clone(),
            values,
            max_value: self.max_value,
        })
    }

    /// Same support and bound, values clamped into `[0, max_value]`.
    pub fn projected(&self, values: &[f64]) -> Result<Self> {
        let clamped = values
            .iter()
            .map(|v| v.clamp(0.0, self.max_value))
            .collect();
        self.with_values(clamped)
    }

    pub fn support(&self) -> &[(usize, usize)] {
        &self.support
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self) -> f64 {
        self.max_value
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn check_indices(&self, num_states: usize, num_actions: usize) -> Result<()> {
        for &(s, a) in &self.support {
            if s >= num_states || a >= num_actions {
                return Err(Error::Config(format!(
                    "payment pair (s={s}, a={a}) out of range for {num_states} states, {num_actions} actions"
                )));
            }
        }
        Ok(())
    }
}

/// Optimal soft value, Q-table and softmax policy for one reward table.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSolution {
    pub v_star: DVector<f64>,
    pub q_star: DMatrix<f64>,
    pub policy: DMatrix<f64>,
}

/// Stopping rule for the fixed-point iterations in this module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// `R(s,a) = Rbar(s,a) + x(s,a)` on the payment support, `Rbar` elsewhere.
pub fn apply_side_payment(spec: &FollowerSpec, payment: &SidePayment) -> Result<DMatrix<f64>> {
    payment.check_indices(spec.num_states(), spec.num_actions())?;
    let mut reward = spec.base_reward.clone();
    for (&(s, a), &x) in payment.support.iter().zip(&payment.values) {
        reward[(s, a)] += x;
    }
    Ok(reward)
}

/// `tau * ln sum_j exp(z_j / tau)` with max-subtraction.
pub fn soft_max(values: impl Iterator<Item = f64> + Clone, tau: f64) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.map(|z| ((z - max) / tau).exp()).sum();
    max + tau * sum.ln()
}

fn soft_backup(spec: &FollowerSpec, reward: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let q = soft_q_unchecked(spec, reward, v);
    let tau = spec.temperature;
    DVector::from_iterator(
        spec.num_states(),
        (0..spec.num_states()).map(|s| soft_max(q.row(s).iter().copied(), tau)),
    )
}

/// Synchronous soft value iteration from `V = 0` until the sup-norm change
/// drops below `tol`.
pub fn soft_value_iteration(
    spec: &FollowerSpec,
    reward: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    spec.check_table(reward, "reward")?;
    let mut v = DVector::zeros(spec.num_states());
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let next = soft_backup(spec, reward, &v);
        residual = (&next - &v).amax();
        v = next;
        if residual < tol {
            return Ok(v);
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(Error::Divergence {
        iterations: max_iter,
        residual,
    })
}

fn soft_q_unchecked(spec: &FollowerSpec, reward: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    reward + spec.expected_next(v) * spec.discount
}

/// `Q(s,a) = R(s,a) + gamma * E_{s'} V(s')`.
pub fn soft_q(spec: &FollowerSpec, reward: &DMatrix<f64>, v_star: &DVector<f64>) -> Result<DMatrix<f64>> {
    spec.check_table(reward, "reward")?;
    if v_star.len() != spec.num_states() {
        return Err(Error::InvalidArgument(format!(
            "value vector has length {}, expected {}",
            v_star.len(),
            spec.num_states()
        )));
    }
    Ok(soft_q_unchecked(spec, reward, v_star))
}

/// Row-wise softmax of `q / tau`.
pub fn softmax_policy(q_star: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut policy = DMatrix::zeros(q_star.nrows(), q_star.ncols());
    for s in 0..q_star.nrows() {
        let row = q_star.row(s);
        let max = row.max();
        let weights: Vec<f64> = row.iter().map(|q| ((q - max) / tau).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (a, w) in weights.into_iter().enumerate() {
            policy[(s, a)] = w / total;
        }
    }
    policy
}

/// Solves for `V*`, `Q*` and `pi*` under `reward`.
pub fn solve(spec: &FollowerSpec, reward: &DMatrix<f64>, settings: SolverSettings) -> Result<SoftSolution> {
    let v_star = soft_value_iteration(spec, reward, settings.tol, settings.max_iter)?;
    let q_star = soft_q_unchecked(spec, reward, &v_star);
    let policy = softmax_policy(&q_star, spec.temperature);
    Ok(SoftSolution {
        v_star,
        q_star,
        policy,
    })
}

/// Solves the follower's problem under the payment-modified reward.
pub fn solve_with_payment(
    spec: &FollowerSpec,
    payment: &SidePayment,
    settings: SolverSettings,
) -> Result<SoftSolution> {
    let reward = apply_side_payment(spec, payment)?;
    solve(spec, &reward, settings)
}

/// Entropy-regularized value of an arbitrary stochastic policy:
/// `V(s) = sum_a pi(a|s) [R(s,a) - tau ln pi(a|s) + gamma E V(s')]`.
pub fn evaluate_policy(
    spec: &FollowerSpec,
    reward: &DMatrix<f64>,
    policy: &DMatrix<f64>,
    settings: SolverSettings,
) -> Result<DVector<f64>> {
    spec.check_table(reward, "reward")?;
    spec.check_table(policy, "policy")?;
    for s in 0..spec.num_states() {
        let total: f64 = policy.row(s).sum();
        if (total - 1.0).abs() > 1e-10 || policy.row(s).iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidArgument(format!("policy row {s} is not a distribution")));
        }
    }
    let tau = spec.temperature;
    let gamma = spec.discount;
    // Immediate regularized reward per state, independent of V.
    let immediate = DVector::from_iterator(
        spec.num_states(),
        (0..spec.num_states()).map(|s| {
            (0..spec.num_actions())
                .map(|a| {
                    let p = policy[(s, a)];
                    if p > 0.0 {
                        p * (reward[(s, a)] - tau * p.ln())
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        }),
    );
    let mut v = DVector::zeros(spec.num_states());
    let mut residual = f64::INFINITY;
    for _ in 0..settings.max_iter {
        let next_exp = spec.expected_next(&v);
        let next = DVector::from_iterator(
            spec.num_states(),
            (0..spec.num_states()).map(|s| {
                immediate[s] + gamma * policy.row(s).dot(&next_exp.row(s))
            }),
        );
        residual = (&next - &v).amax();
        v = next;
        if residual < settings.tol {
            return Ok(v);
        }
    }
    Err(Error::Divergence {
        iterations: settings.max_iter,
        residual,
    })
}
