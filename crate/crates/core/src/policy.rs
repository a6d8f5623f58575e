//! Softmax policies over actions or clusters, the regression-derived
//! deterministic second-stage policy, and their composition.

use crate::env::ClusterMap;
use crate::error::{OplError, Result};
use crate::mlp::Mlp;
use crate::Real;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Anything that maps a context to a probability vector over actions.
pub trait ActionDistribution: Send + Sync {
    fn action_probs(&self, x: &[Real]) -> Vec<Real>;
}

pub struct UniformPolicy {
    pub n_actions: usize,
}

impl ActionDistribution for UniformPolicy {
    fn action_probs(&self, _x: &[Real]) -> Vec<Real> {
        vec![1.0 / self.n_actions as Real; self.n_actions]
    }
}

/// Anything that maps a context to one value per action (reward regressors,
/// tabular fixtures). Drives the deterministic second stage and the
/// regression-based softmax baseline.
pub trait ActionScorer: Send + Sync {
    fn action_values(&self, x: &[Real]) -> Result<Vec<Real>>;
}

/// Context-independent per-action values; handy for hand-built fixtures.
#[derive(Debug, Clone)]
pub struct ConstScorer(pub Vec<Real>);

impl ActionScorer for ConstScorer {
    fn action_values(&self, _x: &[Real]) -> Result<Vec<Real>> {
        Ok(self.0.clone())
    }
}

/// Closure-backed scorer.
pub struct FnScorer<F>(pub F);

impl<F> ActionScorer for FnScorer<F>
where
    F: Fn(&[Real]) -> Vec<Real> + Send + Sync,
{
    fn action_values(&self, x: &[Real]) -> Result<Vec<Real>> {
        Ok((self.0)(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "snake_case")]
pub enum OutcomeSpace {
    Actions(usize),
    Clusters(usize),
}

impl OutcomeSpace {
    pub fn n_outcomes(&self) -> usize {
        match *self {
            OutcomeSpace::Actions(n) | OutcomeSpace::Clusters(n) => n,
        }
    }
}

/// π(k|x) = softmax(scores(x)/τ). Learned policies use τ = 1; the
/// regression-derived baseline exposes τ as a tuning knob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub net: Mlp<Real>,
    pub outcome_space: OutcomeSpace,
    pub temperature: Real,
}

/// Softmax with max-subtraction; τ already applied by the caller.
pub(crate) fn softmax(scores: &[Real]) -> Vec<Real> {
    let max = scores.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut out: Vec<Real> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: Real = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index(probs: &[Real], rng: &mut ChaCha8Rng) -> usize {
    let u: Real = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl SoftmaxPolicy {
    pub fn new(net: Mlp<Real>, outcome_space: OutcomeSpace, temperature: Real) -> Result<Self> {
        if net.output_size() != outcome_space.n_outcomes() {
            return Err(OplError::Config(format!(
                "net outputs {} scores for an outcome space of size {}",
                net.output_size(),
                outcome_space.n_outcomes()
            )));
        }
        if !(temperature > 0.0) {
            return Err(OplError::Config(format!(
                "temperature {temperature} must be positive"
            )));
        }
        Ok(Self {
            net,
            outcome_space,
            temperature,
        })
    }

    /// Seeded fresh policy: context → one score per outcome through the
    /// given hidden layers, temperature 1.
    pub fn fresh(
        context_dim: usize,
        hidden: &[usize],
        outcome_space: OutcomeSpace,
        seed: u64,
    ) -> Result<Self> {
        let mut sizes = vec![context_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(outcome_space.n_outcomes());
        Self::new(Mlp::new(&sizes, seed)?, outcome_space, 1.0)
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcome_space.n_outcomes()
    }

    pub fn scores(&self, x: &[Real]) -> Result<Vec<Real>> {
        self.net.forward(x)
    }

    pub fn probs(&self, x: &[Real]) -> Result<Vec<Real>> {
        let mut s = self.net.forward(x)?;
        s.iter_mut().for_each(|v| *v /= self.temperature);
        Ok(softmax(&s))
    }

    /// Score function s(x, k) = ∇_params log π(k|x).
    pub fn score_function(&self, x: &[Real], outcome: usize) -> Result<Vec<Real>> {
        if outcome >= self.n_outcomes() {
            return Err(OplError::Contract(format!(
                "outcome {outcome} out of range ({})",
                self.n_outcomes()
            )));
        }
        let probs = self.probs(x)?;
        let upstream: Vec<Real> = probs
            .iter()
            .enumerate()
            .map(|(k, &p)| ((k == outcome) as usize as Real - p) / self.temperature)
            .collect();
        self.net.param_gradient(x, &upstream)
    }

    /// Σ_k coeffs[k] · score_function(x, k) in one backward pass.
    ///
    /// Since s(x,k) = Σ_j (δ_{jk} − π_j)/τ · ∇scores_j, the combined upstream
    /// into the net is (coeffs − (Σ coeffs)·π)/τ.
    pub fn weighted_score_gradient(&self, x: &[Real], coeffs: &[Real]) -> Result<Vec<Real>> {
        let probs = self.probs(x)?;
        self.weighted_score_gradient_with_probs(x, &probs, coeffs)
    }

    /// Same as [`weighted_score_gradient`](Self::weighted_score_gradient) for
    /// callers that already hold `probs(x)`.
    pub fn weighted_score_gradient_with_probs(
        &self,
        x: &[Real],
        probs: &[Real],
        coeffs: &[Real],
    ) -> Result<Vec<Real>> {
        if coeffs.len() != self.n_outcomes() {
            return Err(OplError::Contract(format!(
                "{} coefficients for {} outcomes",
                coeffs.len(),
                self.n_outcomes()
            )));
        }
        let total: Real = coeffs.iter().sum();
        let upstream: Vec<Real> = coeffs
            .iter()
            .zip(probs)
            .map(|(&c, &p)| (c - total * p) / self.temperature)
            .collect();
        self.net.param_gradient(x, &upstream)
    }

    pub fn sample(&self, x: &[Real], rng: &mut ChaCha8Rng) -> Result<usize> {
        Ok(sample_index(&self.probs(x)?, rng))
    }
}

impl ActionDistribution for SoftmaxPolicy {
    fn action_probs(&self, x: &[Real]) -> Vec<Real> {
        self.probs(x).expect("softmax policy evaluation")
    }
}

/// Deterministic second stage: within each cluster pick the action with the
/// highest regression value, breaking ties toward the lowest action index.
#[derive(Clone)]
pub struct SecondStagePolicy {
    pub h_model: Arc<dyn ActionScorer>,
    pub cluster_map: ClusterMap,
}

impl SecondStagePolicy {
    pub fn new(h_model: Arc<dyn ActionScorer>, cluster_map: ClusterMap) -> Self {
        Self {
            h_model,
            cluster_map,
        }
    }

    pub fn choice(&self, x: &[Real], c: usize) -> Result<usize> {
        if c >= self.cluster_map.n_clusters() {
            return Err(OplError::Contract(format!(
                "cluster {c} out of range ({})",
                self.cluster_map.n_clusters()
            )));
        }
        let values = self.h_model.action_values(x)?;
        self.choice_from_values(&values, c)
    }

    fn choice_from_values(&self, values: &[Real], c: usize) -> Result<usize> {
        let mut best: Option<(usize, Real)> = None;
        for (a, &cl) in self.cluster_map.assignment().iter().enumerate() {
            if cl != c {
                continue;
            }
            // strict > keeps the lowest index on ties
            if best.map_or(true, |(_, bv)| values[a] > bv) {
                best = Some((a, values[a]));
            }
        }
        best.map(|(a, _)| a).ok_or_else(|| {
            OplError::Contract(format!("cluster {c} has no member actions"))
        })
    }

    /// Chosen action for every cluster at once (one regressor evaluation).
    pub fn choices_all(&self, x: &[Real]) -> Result<Vec<usize>> {
        let values = self.h_model.action_values(x)?;
        (0..self.cluster_map.n_clusters())
            .map(|c| self.choice_from_values(&values, c))
            .collect()
    }
}

/// Two-stage composition: π(a|x) = Σ_c π_first(c|x)·𝕀{a = choice(x, c)}.
#[derive(Clone)]
pub struct OverallPolicy {
    pub first: SoftmaxPolicy,
    pub second: SecondStagePolicy,
}

impl OverallPolicy {
    pub fn new(first: SoftmaxPolicy, second: SecondStagePolicy) -> Result<Self> {
        match first.outcome_space {
            OutcomeSpace::Clusters(n) if n == second.cluster_map.n_clusters() => {}
            _ => {
                return Err(OplError::Config(format!(
                    "first stage over {:?} does not match {} clusters",
                    first.outcome_space,
                    second.cluster_map.n_clusters()
                )))
            }
        }
        Ok(Self { first, second })
    }

    pub fn overall_probs(&self, x: &[Real]) -> Result<Vec<Real>> {
        let first = self.first.probs(x)?;
        let choices = self.second.choices_all(x)?;
        let mut probs = vec![0.0; self.second.cluster_map.n_actions()];
        for (c, &a) in choices.iter().enumerate() {
            probs[a] += first[c];
        }
        Ok(probs)
    }

    /// Sample a cluster from the first stage, then apply the second stage.
    pub fn sample_action(&self, x: &[Real], rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
        let c = self.first.sample(x, rng)?;
        let a = self.second.choice(x, c)?;
        Ok((c, a))
    }
}

impl ActionDistribution for OverallPolicy {
    fn action_probs(&self, x: &[Real]) -> Vec<Real> {
        self.overall_probs(x).expect("overall policy evaluation")
    }
}

/// Regression-based baseline: softmax over a fitted regressor's values with
/// a tuning temperature.
pub struct RegressorPolicy {
    pub scorer: Arc<dyn ActionScorer>,
    pub temperature: Real,
}

impl RegressorPolicy {
    pub fn new(scorer: Arc<dyn ActionScorer>, temperature: Real) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(OplError::Config(format!(
                "temperature {temperature} must be positive"
            )));
        }
        Ok(Self {
            scorer,
            temperature,
        })
    }
}

impl ActionDistribution for RegressorPolicy {
    fn action_probs(&self, x: &[Real]) -> Vec<Real> {
        let mut v = self.scorer.action_values(x).expect("regressor evaluation");
        v.iter_mut().for_each(|s| *s /= self.temperature);
        softmax(&v)
    }
}

/// Marginalize an action simplex onto clusters.
pub fn cluster_marginal(pi: &[Real], cm: &ClusterMap) -> Result<Vec<Real>> {
    if pi.len() != cm.n_actions() {
        return Err(OplError::Contract(format!(
            "{} probabilities for {} actions",
            pi.len(),
            cm.n_actions()
        )));
    }
    let mut out = vec![0.0; cm.n_clusters()];
    for (a, &p) in pi.iter().enumerate() {
        out[cm.cluster_of(a)] += p;
    }
    Ok(out)
}
