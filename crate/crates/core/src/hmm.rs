//! Policy-induced hidden Markov models and their observable operators.
//!
//! A follower running policy `pi` induces the chain
//! `T[i,j] = P(X_{t+1}=i | X_t=j) = sum_a P(i|j,a) pi(a|j)` (note the
//! transposed, column-stochastic layout). The leader sees symbol `o` emitted at
//! the *source* state before each transition, so the observable operator is
//! `A_o = T diag(O[o, ..])` and an observation sequence `y = o_0 .. o_T` has
//! probability `1' A_{o_T} ... A_{o_0} mu`.
//!
//! Sequences carry `T + 1` symbols for horizon `T`. Likelihoods are propagated
//! with per-step normalization so that long horizons do not underflow; only
//! the log-likelihood is exposed in unscaled form.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mdp::{pair_index, FollowerSpec};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Emission model `E(o|s)` stored as an `M x N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    labels: Vec<String>,
    emission: DMatrix<f64>,
    null_symbol: Option<usize>,
}

impl SensorModel {
    pub fn new(labels: Vec<String>, emission: DMatrix<f64>, null_symbol: Option<usize>) -> Result<Self> {
        if labels.len() != emission.nrows() {
            return Err(Error::Config(format!(
                "{} observation labels for {} emission rows",
                labels.len(),
                emission.nrows()
            )));
        }
        if let Some(n) = null_symbol {
            if n >= labels.len() {
                return Err(Error::Config(format!("null symbol {n} outside alphabet")));
            }
        }
        for s in 0..emission.ncols() {
            let col = emission.column(s);
            if col.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Config(format!("emission column {s} has entries outside [0,1]")));
            }
            let total = col.sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Config(format!("emission column {s} sums to {total}")));
            }
        }
        Ok(Self {
            labels,
            emission,
            null_symbol,
        })
    }

    pub fn alphabet_size(&self) -> usize {
        self.emission.nrows()
    }

    pub fn num_states(&self) -> usize {
        self.emission.ncols()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn emission(&self) -> &DMatrix<f64> {
        &self.emission
    }

    pub fn null_symbol(&self) -> Option<usize> {
        self.null_symbol
    }
}

/// A sequence `o_0 .. o_T` of alphabet indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObservationSeq(Vec<usize>);

impl ObservationSeq {
    pub fn new(symbols: Vec<usize>, alphabet_size: usize) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::InvalidArgument("observation sequence is empty".into()));
        }
        if let Some(o) = symbols.iter().find(|o| **o >= alphabet_size) {
            return Err(Error::InvalidArgument(format!(
                "symbol {o} outside alphabet of size {alphabet_size}"
            )));
        }
        Ok(Self(symbols))
    }

    /// The `index`-th sequence of `len` symbols in lexicographic order.
    pub fn from_index(mut index: u64, alphabet_size: usize, len: usize) -> Self {
        let m = alphabet_size as u64;
        let mut symbols = vec![0; len];
        for slot in symbols.iter_mut().rev() {
            *slot = (index % m) as usize;
            index /= m;
        }
        Self(symbols)
    }

    pub fn symbols(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Horizon `T` such that the sequence holds `T + 1` symbols.
    pub fn horizon(&self) -> usize {
        self.0.len() - 1
    }
}

/// Number of sequences of `len` symbols, saturating on overflow.
pub fn sequence_count(alphabet_size: usize, len: usize) -> u128 {
    let mut count: u128 = 1;
    for _ in 0..len {
        count = count.saturating_mul(alphabet_size as u128);
    }
    count
}

/// The hidden Markov model a follower's policy induces.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerHmm {
    trans: DMatrix<f64>,
    obs: DMatrix<f64>,
    operators: Vec<DMatrix<f64>>,
    init: DVector<f64>,
    policy: DMatrix<f64>,
}

impl FollowerHmm {
    pub fn trans(&self) -> &DMatrix<f64> {
        &self.trans
    }

    pub fn obs(&self) -> &DMatrix<f64> {
        &self.obs
    }

    pub fn operator(&self, symbol: usize) -> &DMatrix<f64> {
        &self.operators[symbol]
    }

    pub fn operators(&self) -> &[DMatrix<f64>] {
        &self.operators
    }

    pub fn init(&self) -> &DVector<f64> {
        &self.init
    }

    pub fn policy(&self) -> &DMatrix<f64> {
        &self.policy
    }

    pub fn num_states(&self) -> usize {
        self.init.len()
    }

    pub fn alphabet_size(&self) -> usize {
        self.obs.nrows()
    }

    fn check_sequence(&self, y: &ObservationSeq) -> Result<()> {
        if y.is_empty() {
            return Err(Error::InvalidArgument("observation sequence is empty".into()));
        }
        if let Some(o) = y.symbols().iter().find(|o| **o >= self.alphabet_size()) {
            return Err(Error::InvalidArgument(format!(
                "symbol {o} outside alphabet of size {}",
                self.alphabet_size()
            )));
        }
        Ok(())
    }

    /// Emission-weighted source vector `O[o, j] * v[j]`.
    fn emit(&self, symbol: usize, v: &DVector<f64>) -> DVector<f64> {
        v.component_mul(&self.obs.row(symbol).transpose())
    }
}

/// `T[i,j] = sum_a P(i|j,a) pi(a|j)`, `A_o = T diag(O[o, ..])`.
pub fn build_follower_hmm(spec: &FollowerSpec, policy: &DMatrix<f64>, sensor: &SensorModel) -> Result<FollowerHmm> {
    let n = spec.num_states();
    if policy.shape() != (n, spec.num_actions()) {
        return Err(Error::InvalidArgument(format!(
            "policy is {}x{}, expected {}x{}",
            policy.nrows(),
            policy.ncols(),
            n,
            spec.num_actions()
        )));
    }
    if sensor.num_states() != n {
        return Err(Error::Config(format!(
            "sensor covers {} states, follower has {n}",
            sensor.num_states()
        )));
    }
    for s in 0..n {
        if (policy.row(s).sum() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("policy row {s} is not normalized")));
        }
    }
    let mut trans = DMatrix::zeros(n, n);
    for (a, kernel) in spec.transitions().iter().enumerate() {
        for j in 0..n {
            let p_act = policy[(j, a)];
            if p_act == 0.0 {
                continue;
            }
            for i in 0..n {
                trans[(i, j)] += kernel[(j, i)] * p_act;
            }
        }
    }
    let obs = sensor.emission().clone();
    let operators = (0..obs.nrows())
        .map(|o| {
            let mut op = trans.clone();
            for j in 0..n {
                op.column_mut(j).scale_mut(obs[(o, j)]);
            }
            op
        })
        .collect();
    Ok(FollowerHmm {
        trans,
        obs,
        operators,
        init: spec.initial().clone(),
        policy: policy.clone(),
    })
}

/// `ln P(y)` by the scaled operator recursion; `-inf` when `P(y) = 0`.
pub fn log_likelihood(hmm: &FollowerHmm, y: &ObservationSeq) -> Result<f64> {
    hmm.check_sequence(y)?;
    let mut alpha = hmm.init.clone();
    let mut log_like = 0.0;
    for &o in y.symbols() {
        // 1'T = 1', so the mass after A_o equals the emitted mass.
        alpha = &hmm.operators[o] * alpha;
        let c = alpha.sum();
        if c <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        alpha /= c;
        log_like += c.ln();
    }
    Ok(log_like)
}

/// `P(y) = 1' A_{o_T} ... A_{o_0} mu`.
pub fn sequence_likelihood(hmm: &FollowerHmm, y: &ObservationSeq) -> Result<f64> {
    Ok(log_likelihood(hmm, y)?.exp())
}

/// Log-likelihood together with its gradient with respect to the follower's
/// policy parameters (flattened `(s, a)` Q-table).
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikelihoodGrad {
    pub log_likelihood: f64,
    /// `d ln P(y) / d theta`; all zeros when `P(y) = 0`.
    pub grad: Vec<f64>,
}

impl LogLikelihoodGrad {
    pub fn likelihood(&self) -> f64 {
        self.log_likelihood.exp()
    }
}

/// Gradient of `ln P(y)` w.r.t. the softmax parameters `theta` of `hmm`'s policy.
///
/// Uses `d ln P = sum_k beta_k' (dA_{o_k}) alpha_k / (beta_k' A_{o_k} alpha_k)`
/// with `alpha_k = A_{o_{k-1}}..A_{o_0} mu` and `beta_k' = 1' A_{o_T}..A_{o_{k+1}}`.
/// Each ratio is invariant to the scale of `alpha_k` and `beta_k`, so both are
/// normalized per step. Only column `s` of `T` depends on `theta_{s,.}`:
/// `dT[i,s]/dtheta_{s,a} = pi(a|s)/tau * (P(i|s,a) - T[i,s])`.
pub fn log_likelihood_gradient(hmm: &FollowerHmm, y: &ObservationSeq, spec: &FollowerSpec) -> Result<LogLikelihoodGrad> {
    hmm.check_sequence(y)?;
    let n = hmm.num_states();
    let na = spec.num_actions();
    if spec.num_states() != n || hmm.policy.ncols() != na {
        return Err(Error::InvalidArgument("follower spec does not match hmm".into()));
    }
    let symbols = y.symbols();
    let len = symbols.len();

    let mut alphas = Vec::with_capacity(len);
    let mut alpha = hmm.init.clone();
    let mut log_like = 0.0;
    for &o in symbols {
        let next = &hmm.operators[o] * &alpha;
        alphas.push(alpha);
        let c = next.sum();
        if c <= 0.0 {
            return Ok(LogLikelihoodGrad {
                log_likelihood: f64::NEG_INFINITY,
                grad: vec![0.0; n * na],
            });
        }
        alpha = next / c;
        log_like += c.ln();
    }

    let mut betas = vec![DVector::zeros(n); len];
    betas[len - 1] = DVector::from_element(n, 1.0);
    for k in (0..len - 1).rev() {
        let b = hmm.operators[symbols[k + 1]].tr_mul(&betas[k + 1]);
        let m = b.max();
        betas[k] = if m > 0.0 { b / m } else { b };
    }

    let tau = spec.temperature();
    let mut grad = vec![0.0; n * na];
    // k = T contributes nothing: beta_T = 1 and columns of dT sum to zero.
    for k in 0..len - 1 {
        let o = symbols[k];
        let beta = &betas[k];
        let emitted = hmm.emit(o, &alphas[k]);
        // w[s,a] = sum_i P(i|s,a) beta[i]; wbar[s] = sum_i T[i,s] beta[i].
        let w: Vec<DVector<f64>> = spec.transitions().iter().map(|p| p * beta).collect();
        let wbar = hmm.trans.tr_mul(beta);
        let denom = wbar.dot(&emitted);
        if denom <= 0.0 {
            continue;
        }
        for s in 0..n {
            let weight = emitted[s];
            if weight == 0.0 {
                continue;
            }
            for (a, w_a) in w.iter().enumerate() {
                grad[pair_index(s, a, na)] +=
                    weight * hmm.policy[(s, a)] / tau * (w_a[s] - wbar[s]) / denom;
            }
        }
    }
    Ok(LogLikelihoodGrad {
        log_likelihood: log_like,
        grad,
    })
}

/// `d P(y) / d theta` in the unscaled form.
pub fn likelihood_gradient(hmm: &FollowerHmm, y: &ObservationSeq, spec: &FollowerSpec) -> Result<Vec<f64>> {
    let lg = log_likelihood_gradient(hmm, y, spec)?;
    let p = lg.likelihood();
    Ok(lg.grad.into_iter().map(|g| g * p).collect())
}

/// Follower HMMs over a shared state space plus a prior over types.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedHmm {
    followers: Vec<FollowerHmm>,
    prior: Vec<f64>,
}

impl AugmentedHmm {
    pub fn new(followers: Vec<FollowerHmm>, prior: Vec<f64>) -> Result<Self> {
        if followers.is_empty() {
            return Err(Error::Config("need at least one follower type".into()));
        }
        if followers.len() != prior.len() {
            return Err(Error::Config(format!(
                "{} follower types but prior has {} entries",
                followers.len(),
                prior.len()
            )));
        }
        if prior.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("prior entries must lie in [0,1]".into()));
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Config(format!("prior sums to {total}")));
        }
        let n = followers[0].num_states();
        let m = followers[0].alphabet_size();
        if followers.iter().any(|f| f.num_states() != n || f.alphabet_size() != m) {
            return Err(Error::Config("follower types must share states and alphabet".into()));
        }
        Ok(Self { followers, prior })
    }

    pub fn followers(&self) -> &[FollowerHmm] {
        &self.followers
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn num_types(&self) -> usize {
        self.followers.len()
    }

    pub fn num_states(&self) -> usize {
        self.followers[0].num_states()
    }

    pub fn alphabet_size(&self) -> usize {
        self.followers[0].alphabet_size()
    }

    /// `mu_0(s, i) = mu_i(s) P(T=i)` as an `N x types` matrix.
    pub fn joint_initial(&self) -> DMatrix<f64> {
        let mut mu = DMatrix::zeros(self.num_states(), self.num_types());
        for (i, f) in self.followers.iter().enumerate() {
            mu.set_column(i, &(f.init() * self.prior[i]));
        }
        mu
    }

    /// Same follower chains with a different prior.
    pub fn with_prior(&self, prior: Vec<f64>) -> Result<Self> {
        Self::new(self.followers.clone(), prior)
    }
}

struct ChainSampler {
    initial: WeightedIndex<f64>,
    emission: Vec<WeightedIndex<f64>>,
    next: Vec<Option<WeightedIndex<f64>>>,
}

impl ChainSampler {
    fn new(hmm: &FollowerHmm) -> Result<Self> {
        let dist = |w: Vec<f64>| {
            WeightedIndex::new(w).map_err(|e| Error::InvalidArgument(format!("bad distribution: {e}")))
        };
        let initial = dist(hmm.init.iter().copied().collect())?;
        let n = hmm.num_states();
        let emission = (0..n)
            .map(|s| dist(hmm.obs.column(s).iter().copied().collect()))
            .collect::<Result<_>>()?;
        // Rows whose policy mass vanished numerically are never left.
        let next = (0..n)
            .map(|s| dist(hmm.trans.column(s).iter().copied().collect()).ok())
            .collect();
        Ok(Self {
            initial,
            emission,
            next,
        })
    }

    fn run(&self, horizon: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut state = self.initial.sample(rng);
        let mut symbols = Vec::with_capacity(horizon + 1);
        for _ in 0..=horizon {
            symbols.push(self.emission[state].sample(rng));
            if let Some(next) = &self.next[state] {
                state = next.sample(rng);
            }
        }
        symbols
    }
}

fn stream_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws `count` pairs `(type, y)` with `y` holding `horizon + 1` symbols.
///
/// Sample `k` uses its own ChaCha stream keyed by `(seed, k)`, so the output is
/// independent of thread scheduling.
pub fn sample_observations(
    aug: &AugmentedHmm,
    count: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<(usize, ObservationSeq)>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let samplers = aug
        .followers
        .iter()
        .map(ChainSampler::new)
        .collect::<Result<Vec<_>>>()?;
    let prior = WeightedIndex::new(aug.prior.clone())
        .map_err(|e| Error::Config(format!("bad prior: {e}")))?;
    Ok((0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k);
            let t = prior.sample(&mut rng);
            (t, ObservationSeq(samplers[t].run(horizon, &mut rng)))
        })
        .collect())
}

/// Draws `count` sequences from follower `true_type` alone.
pub fn sample_observations_for_type(
    aug: &AugmentedHmm,
    true_type: usize,
    count: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<ObservationSeq>> {
    if true_type >= aug.num_types() {
        return Err(Error::InvalidArgument(format!("unknown type {true_type}")));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let sampler = ChainSampler::new(&aug.followers[true_type])?;
    Ok((0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k);
            ObservationSeq(sampler.run(horizon, &mut rng))
        })
        .collect())
}
