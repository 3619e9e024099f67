//! Type posteriors and the conditional entropy `H(T | Y)` of the follower's
//! type given an observation sequence, with gradients w.r.t. the policy profile.
//!
//! The profile parameter `theta` concatenates each type's flattened Q-table, in
//! type order. Type `i`'s likelihood depends only on block `i`.
//!
//! Entropies are in bits; `0 log 0 = 0`.

use std::f64::consts::LN_2;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hmm::{log_likelihood, log_likelihood_gradient, sequence_count, AugmentedHmm, ObservationSeq};
use crate::mdp::FollowerSpec;

/// Default bound on `M^(T+1)` for exact enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyMode {
    Exact,
    Sampled,
}

impl std::fmt::Display for EntropyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EntropyMode::Exact => "exact",
            EntropyMode::Sampled => "sampled",
        })
    }
}

impl std::str::FromStr for EntropyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(EntropyMode::Exact),
            "sampled" => Ok(EntropyMode::Sampled),
            other => Err(Error::InvalidArgument(format!("unknown entropy mode `{other}`"))),
        }
    }
}

/// `P(T = i | y)` with the per-type log-likelihoods it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorResult {
    pub probs: Vec<f64>,
    /// `ln P(y | T = i)`, possibly `-inf`.
    pub log_likes: Vec<f64>,
    pub log_evidence: f64,
}

impl PosteriorResult {
    /// `P(y) = sum_i P(T=i) P(y | T=i)`.
    pub fn evidence(&self) -> f64 {
        self.log_evidence.exp()
    }

    /// Shannon entropy of the posterior, in bits.
    pub fn entropy_bits(&self) -> f64 {
        entropy_bits(&self.probs)
    }
}

/// Shannon entropy in bits with `0 log 0 = 0`.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.log2())
        .sum::<f64>()
}

fn posterior_from_log_likes(prior: &[f64], log_likes: Vec<f64>) -> Result<PosteriorResult> {
    let joint: Vec<f64> = prior
        .iter()
        .zip(&log_likes)
        .map(|(p, ll)| if *p > 0.0 { p.ln() + ll } else { f64::NEG_INFINITY })
        .collect();
    let max = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::ZeroEvidence);
    }
    let total: f64 = joint.iter().map(|j| (j - max).exp()).sum();
    let log_evidence = max + total.ln();
    let probs = joint.iter().map(|j| (j - log_evidence).exp()).collect();
    Ok(PosteriorResult {
        probs,
        log_likes,
        log_evidence,
    })
}

/// Bayes' rule over types, computed in log space.
pub fn posterior(aug: &AugmentedHmm, y: &ObservationSeq) -> Result<PosteriorResult> {
    let log_likes = aug
        .followers()
        .iter()
        .map(|f| log_likelihood(f, y))
        .collect::<Result<Vec<_>>>()?;
    posterior_from_log_likes(aug.prior(), log_likes)
}

/// A conditional-entropy value in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyEstimate {
    pub value: f64,
    pub mode: EntropyMode,
    pub sample_count: Option<usize>,
    pub std_error: Option<f64>,
}

fn enumeration_len(aug: &AugmentedHmm, horizon: usize, cap: u64) -> Result<u64> {
    let count = sequence_count(aug.alphabet_size(), horizon + 1);
    if count > cap as u128 {
        return Err(Error::EnumerationCap {
            sequences: count,
            cap,
        });
    }
    Ok(count as u64)
}

/// `H(T|Y) = -sum_y sum_i P(i, y) log2 P(i | y)` over all `M^(T+1)` sequences.
pub fn exact_conditional_entropy(aug: &AugmentedHmm, horizon: usize, cap: u64) -> Result<EntropyEstimate> {
    let count = enumeration_len(aug, horizon, cap)?;
    let m = aug.alphabet_size();
    let terms = (0..count)
        .into_par_iter()
        .map(|idx| {
            let y = ObservationSeq::from_index(idx, m, horizon + 1);
            match posterior(aug, &y) {
                Ok(post) => Ok(post.evidence() * post.entropy_bits()),
                Err(Error::ZeroEvidence) => Ok(0.0),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EntropyEstimate {
        value: terms.iter().sum(),
        mode: EntropyMode::Exact,
        sample_count: None,
        std_error: None,
    })
}

fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// `H(T|Y) ~ (1/K) sum_k H(T | y_k)` for `y_k` drawn from the model.
pub fn sampled_conditional_entropy(aug: &AugmentedHmm, samples: &[ObservationSeq]) -> Result<EntropyEstimate> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no observation samples".into()));
    }
    let terms = samples
        .par_iter()
        .map(|y| posterior(aug, y).map(|p| p.entropy_bits()))
        .collect::<Result<Vec<f64>>>()?;
    let (value, se) = mean_and_std_error(&terms);
    Ok(EntropyEstimate {
        value,
        mode: EntropyMode::Sampled,
        sample_count: Some(samples.len()),
        std_error: Some(se),
    })
}

fn check_specs(aug: &AugmentedHmm, specs: &[FollowerSpec]) -> Result<usize> {
    if specs.len() != aug.num_types() {
        return Err(Error::Config(format!(
            "{} follower specs for {} types",
            specs.len(),
            aug.num_types()
        )));
    }
    let block = specs[0].num_pairs();
    if specs.iter().any(|s| s.num_pairs() != block || s.num_states() != aug.num_states()) {
        return Err(Error::Config("follower specs must share states and actions".into()));
    }
    Ok(block)
}

/// Posterior at `y` with `d P(T=i|y) / d theta` for every type.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGradient {
    pub posterior: PosteriorResult,
    /// `grads[i]` is the profile gradient of `P(T=i | y)`.
    pub grads: Vec<Vec<f64>>,
    /// `d ln P(y) / d theta`.
    pub score: Vec<f64>,
}

/// Gradient of the type posterior.
///
/// With `g_i = d ln P(y|T=i) / d theta` (nonzero only on block `i`),
/// `P(T=i) [dP(y|i)/P(y) - P(y|i) dP(y)/P(y)^2]` reduces to
/// `p_i (g_i - sum_j p_j g_j)`, which is what is evaluated here so that no
/// unscaled likelihood is ever formed.
pub fn posterior_gradient(aug: &AugmentedHmm, y: &ObservationSeq, specs: &[FollowerSpec]) -> Result<PosteriorGradient> {
    let block = check_specs(aug, specs)?;
    let per_type = aug
        .followers()
        .iter()
        .zip(specs)
        .map(|(f, spec)| log_likelihood_gradient(f, y, spec))
        .collect::<Result<Vec<_>>>()?;
    let log_likes = per_type.iter().map(|l| l.log_likelihood).collect();
    let posterior = posterior_from_log_likes(aug.prior(), log_likes)?;

    let types = aug.num_types();
    let mut score = vec![0.0; types * block];
    for (i, lg) in per_type.iter().enumerate() {
        let p = posterior.probs[i];
        if p == 0.0 {
            continue;
        }
        for (dst, g) in score[i * block..(i + 1) * block].iter_mut().zip(&lg.grad) {
            *dst = p * g;
        }
    }
    let grads = (0..types)
        .map(|i| {
            let p = posterior.probs[i];
            let mut g: Vec<f64> = score.iter().map(|s| -p * s).collect();
            if p > 0.0 {
                for (dst, gi) in g[i * block..(i + 1) * block].iter_mut().zip(&per_type[i].grad) {
                    *dst += p * gi;
                }
            }
            g
        })
        .collect();
    Ok(PosteriorGradient {
        posterior,
        grads,
        score,
    })
}

/// Where the entropy and its gradient are evaluated.
#[derive(Debug, Clone, Copy)]
pub enum EntropySource<'a> {
    /// Enumerate all sequences of `horizon + 1` symbols.
    Exact { horizon: usize, cap: u64 },
    /// Average over sequences drawn from the model.
    Sampled(&'a [ObservationSeq]),
}

/// `H(T|Y)` and `d H / d theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyGradient {
    pub entropy: EntropyEstimate,
    pub gradient: Vec<f64>,
    /// Component-wise standard error in sampled mode.
    pub std_error: Option<Vec<f64>>,
}

/// Per-sequence bracket `-sum_i [log2 p_i dp_i + p_i log2 p_i d ln P(y) + dp_i / ln 2]`.
fn entropy_bracket(pg: &PosteriorGradient) -> Vec<f64> {
    let probs = &pg.posterior.probs;
    let dim = pg.score.len();
    let neg_entropy: f64 = probs.iter().filter(|p| **p > 0.0).map(|p| p * p.log2()).sum();
    let mut out: Vec<f64> = pg.score.iter().map(|s| -neg_entropy * s).collect();
    for (i, grad) in pg.grads.iter().enumerate() {
        let p = probs[i];
        if p <= 0.0 {
            continue;
        }
        let weight = p.log2() + 1.0 / LN_2;
        for (o, g) in out.iter_mut().zip(grad).take(dim) {
            *o -= weight * g;
        }
    }
    out
}

/// Exact (full enumeration) or sampled entropy together with its gradient.
pub fn entropy_gradient(aug: &AugmentedHmm, source: EntropySource<'_>, specs: &[FollowerSpec]) -> Result<EntropyGradient> {
    let block = check_specs(aug, specs)?;
    let dim = block * aug.num_types();
    match source {
        EntropySource::Exact { horizon, cap } => {
            let count = enumeration_len(aug, horizon, cap)?;
            let m = aug.alphabet_size();
            let terms = (0..count)
                .into_par_iter()
                .map(|idx| {
                    let y = ObservationSeq::from_index(idx, m, horizon + 1);
                    match posterior_gradient(aug, &y, specs) {
                        Ok(pg) => {
                            let p_y = pg.posterior.evidence();
                            let probs = &pg.posterior.probs;
                            // dP(y) = P(y) d ln P(y)
                            let d_evidence: Vec<f64> = pg.score.iter().map(|s| p_y * s).collect();
                            let mut grad = vec![0.0; dim];
                            for (i, dp) in pg.grads.iter().enumerate() {
                                let p = probs[i];
                                if p <= 0.0 {
                                    continue;
                                }
                                let lg = p.log2();
                                for d in 0..dim {
                                    grad[d] -= p_y * dp[d] * lg + p * d_evidence[d] * lg + p_y * dp[d] / LN_2;
                                }
                            }
                            Ok(Some((p_y * pg.posterior.entropy_bits(), grad)))
                        }
                        Err(Error::ZeroEvidence) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let mut value = 0.0;
            let mut gradient = vec![0.0; dim];
            for (h, g) in terms.into_iter().flatten() {
                value += h;
                gradient.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            Ok(EntropyGradient {
                entropy: EntropyEstimate {
                    value,
                    mode: EntropyMode::Exact,
                    sample_count: None,
                    std_error: None,
                },
                gradient,
                std_error: None,
            })
        }
        EntropySource::Sampled(samples) => {
            if samples.is_empty() {
                return Err(Error::InvalidArgument("no observation samples".into()));
            }
            let terms = sampled_entropy_terms(aug, samples, specs)?;
            let k = samples.len() as f64;
            let entropies: Vec<f64> = terms.iter().map(|(h, _)| *h).collect();
            let (value, se) = mean_and_std_error(&entropies);
            let mut mean = vec![0.0; dim];
            for (_, g) in &terms {
                mean.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            mean.iter_mut().for_each(|a| *a /= k);
            let mut var = vec![0.0; dim];
            for (_, g) in &terms {
                var.iter_mut()
                    .zip(g.iter().zip(&mean))
                    .for_each(|(v, (b, m))| *v += (b - m).powi(2));
            }
            let std_error = var
                .into_iter()
                .map(|v| if terms.len() > 1 { (v / (k - 1.0) / k).sqrt() } else { 0.0 })
                .collect();
            Ok(EntropyGradient {
                entropy: EntropyEstimate {
                    value,
                    mode: EntropyMode::Sampled,
                    sample_count: Some(samples.len()),
                    std_error: Some(se),
                },
                gradient: mean,
                std_error: Some(std_error),
            })
        }
    }
}

/// Per-sample `(H(T | y_k), bracket_k)`; the sampled entropy gradient is the
/// mean of the brackets.
pub fn sampled_entropy_terms(
    aug: &AugmentedHmm,
    samples: &[ObservationSeq],
    specs: &[FollowerSpec],
) -> Result<Vec<(f64, Vec<f64>)>> {
    check_specs(aug, specs)?;
    samples
        .par_iter()
        .map(|y| {
            let pg = posterior_gradient(aug, y, specs)?;
            Ok((pg.posterior.entropy_bits(), entropy_bracket(&pg)))
        })
        .collect()
}

/// `(1/M) sum_k P(T = i | y_k)` for every type `i`.
pub fn posterior_estimator(aug: &AugmentedHmm, samples: &[ObservationSeq]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no observation samples".into()));
    }
    let posts = samples
        .par_iter()
        .map(|y| posterior(aug, y).map(|p| p.probs))
        .collect::<Result<Vec<_>>>()?;
    let mut est = vec![0.0; aug.num_types()];
    for p in &posts {
        est.iter_mut().zip(p).for_each(|(e, v)| *e += v);
    }
    let m = samples.len() as f64;
    est.iter_mut().for_each(|e| *e /= m);
    Ok(est)
}
