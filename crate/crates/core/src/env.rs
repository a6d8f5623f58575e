//! Synthetic contextual-bandit environments with clustered action structure.
//!
//! The expected reward decomposes as q(x,a) = g(x, c_a) + h_{c_a}(x, a): a
//! cluster effect shared by every action in a cluster plus a within-cluster
//! residual effect. The logging policy is a softmax over β·q(x,a) + μ(x,a).
//! Everything is a deterministic function of (config, seed).

use crate::error::{OplError, Result};
use crate::policy::ActionDistribution;
use crate::Real;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Clip band for expected rewards in Bernoulli mode.
pub const BERNOULLI_CLIP: Real = 0.01;

/// Standard normal draw (Box-Muller).
pub(crate) fn std_normal(rng: &mut ChaCha8Rng) -> Real {
    let u1: Real = 1.0 - rng.gen::<Real>(); // (0, 1]
    let u2: Real = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Action → cluster assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    assignment: Vec<usize>,
    n_clusters: usize,
}

impl ClusterMap {
    pub fn new(assignment: Vec<usize>, n_clusters: usize) -> Result<Self> {
        if n_clusters == 0 || assignment.is_empty() {
            return Err(OplError::Config(
                "cluster map needs at least one action and one cluster".into(),
            ));
        }
        if let Some(&bad) = assignment.iter().find(|&&c| c >= n_clusters) {
            return Err(OplError::Config(format!(
                "cluster index {bad} out of range for {n_clusters} clusters"
            )));
        }
        Ok(Self {
            assignment,
            n_clusters,
        })
    }

    /// Singleton clusters: the cluster space equals the action space.
    pub fn identity(n_actions: usize) -> Self {
        Self {
            assignment: (0..n_actions).collect(),
            n_clusters: n_actions,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn cluster_of(&self, action: usize) -> usize {
        self.assignment[action]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Per-cluster action lists.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.n_clusters];
        for (a, &c) in self.assignment.iter().enumerate() {
            m[c].push(a);
        }
        m
    }

    /// True when every cluster index has at least one action.
    pub fn is_surjective(&self) -> bool {
        let mut seen = vec![false; self.n_clusters];
        for &c in &self.assignment {
            seen[c] = true;
        }
        seen.into_iter().all(|s| s)
    }

    /// Each action independently, with probability `noise_ratio`, is
    /// reassigned to a uniformly random *different* cluster.
    pub fn perturb(&self, noise_ratio: Real, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise_ratio) {
            return Err(OplError::Config(format!(
                "noise ratio {noise_ratio} outside [0, 1]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut assignment = self.assignment.clone();
        if self.n_clusters > 1 {
            for c in assignment.iter_mut() {
                if rng.gen::<Real>() < noise_ratio {
                    let mut pick = rng.gen_range(0..self.n_clusters - 1);
                    if pick >= *c {
                        pick += 1;
                    }
                    *c = pick;
                }
            }
        }
        Ok(Self {
            assignment,
            n_clusters: self.n_clusters,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardNoise {
    /// Binary rewards with mean q(x,a) clipped to [0.01, 0.99].
    Bernoulli,
    /// Gaussian rewards with mean q(x,a) and the given standard deviation.
    Gaussian { sigma: Real },
}

/// Context law. Discrete mode exists so oracle modules can enumerate
/// expectations exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextSpec {
    /// Standard normal contexts.
    Continuous,
    /// Finite context set sampled at build time, uniform weights.
    DiscreteRandom { n_contexts: usize },
    /// Explicit finite context set with sampling weights.
    DiscreteFixed {
        contexts: Vec<Vec<Real>>,
        weights: Vec<Real>,
    },
}

/// Resolved context law stored on a built environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ContextMode {
    Continuous,
    Discrete {
        contexts: Vec<Vec<Real>>,
        weights: Vec<Real>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_actions: usize,
    pub n_clusters: usize,
    pub context_dim: usize,
    pub logging_beta: Real,
    pub reward_noise: RewardNoise,
    pub context_spec: ContextSpec,
    /// Multiplier applied to both the cluster and residual effects. Shrinking
    /// it compresses the reward landscape so that a fixed amount of reward-model
    /// noise becomes material relative to the gaps between cluster values.
    #[serde(default = "default_effect_scale")]
    pub effect_scale: Real,
}

fn default_effect_scale() -> Real {
    1.0
}

impl EnvConfig {
    pub fn new(n_actions: usize, n_clusters: usize) -> Self {
        Self {
            n_actions,
            n_clusters,
            context_dim: 10,
            logging_beta: 0.0,
            reward_noise: RewardNoise::Gaussian { sigma: 1.0 },
            context_spec: ContextSpec::Continuous,
            effect_scale: 1.0,
        }
    }

    pub fn with_effect_scale(mut self, scale: Real) -> Self {
        self.effect_scale = scale;
        self
    }

    pub fn with_beta(mut self, beta: Real) -> Self {
        self.logging_beta = beta;
        self
    }

    pub fn with_noise(mut self, noise: RewardNoise) -> Self {
        self.reward_noise = noise;
        self
    }

    pub fn with_context_spec(mut self, spec: ContextSpec) -> Self {
        self.context_spec = spec;
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.context_dim = dim;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticEnvironment {
    pub config: EnvConfig,
    pub cluster_map: ClusterMap,
    pub context_mode: ContextMode,
    /// Per-cluster quadratic form A_c (dim × dim, row-major) of the base
    /// cluster effect g_base(x,c) = 3·tanh(xᵀA_c x + b_cᵀx).
    pub g_quad: Vec<Vec<Real>>,
    /// Per-cluster linear part b_c of g_base.
    pub g_lin: Vec<Vec<Real>>,
    /// Threshold bonuses u1..u4, uniform [-3, 3].
    pub u: [Real; 4],
    /// Per-cluster residual matrices M_c (dim × n_actions, row-major).
    pub resid_m: Vec<Vec<Real>>,
    /// Per-cluster residual context vectors θ_{x,c}.
    pub resid_theta_x: Vec<Vec<Real>>,
    /// Per-cluster residual action vectors θ_{a,c}.
    pub resid_theta_a: Vec<Vec<Real>>,
    /// Logging perturbation weights W of μ(x,a) = clamp(xᵀ W onehot_a, -2, 2).
    pub mu_w: Vec<Real>,
    /// Actions excluded from the logging policy's support.
    pub unsupported: Vec<bool>,
}

pub fn build_synthetic_env(config: EnvConfig, seed: u64) -> Result<SyntheticEnvironment> {
    let (na, nc, dim) = (config.n_actions, config.n_clusters, config.context_dim);
    if na == 0 || nc == 0 {
        return Err(OplError::Config("need at least one action and cluster".into()));
    }
    if na < nc {
        return Err(OplError::Config(format!(
            "n_actions {na} < n_clusters {nc}"
        )));
    }
    if dim == 0 {
        return Err(OplError::Config("context_dim must be ≥ 1".into()));
    }
    if !(config.effect_scale.is_finite() && config.effect_scale > 0.0) {
        return Err(OplError::Config(format!(
            "effect_scale must be a positive finite number, got {}",
            config.effect_scale
        )));
    }
    match &config.context_spec {
        ContextSpec::DiscreteRandom { n_contexts: 0 } => {
            return Err(OplError::Config("discrete mode needs ≥ 1 context".into()))
        }
        ContextSpec::DiscreteFixed { contexts, weights } => {
            if contexts.is_empty() || contexts.len() != weights.len() {
                return Err(OplError::Config("contexts/weights length mismatch".into()));
            }
            if contexts.iter().any(|c| c.len() != dim) {
                return Err(OplError::Config("context dimension mismatch".into()));
            }
            let sum: Real = weights.iter().sum();
            if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(OplError::Config(
                    "context weights must form a probability simplex".into(),
                ));
            }
        }
        _ => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Cluster actions by the sorted projection of per-action features onto a
    // random direction, into n_clusters equal-size bins.
    const FEATURE_DIM: usize = 5;
    let features: Vec<[Real; FEATURE_DIM]> = (0..na)
        .map(|_| {
            let mut f = [0.0; FEATURE_DIM];
            f.iter_mut().for_each(|v| *v = std_normal(&mut rng));
            f
        })
        .collect();
    let mut direction = [0.0; FEATURE_DIM];
    direction.iter_mut().for_each(|v| *v = std_normal(&mut rng));
    let mut order: Vec<usize> = (0..na).collect();
    let proj: Vec<Real> = features
        .iter()
        .map(|f| f.iter().zip(&direction).map(|(a, b)| a * b).sum())
        .collect();
    order.sort_by(|&i, &j| proj[i].partial_cmp(&proj[j]).unwrap().then(i.cmp(&j)));
    let mut assignment = vec![0usize; na];
    for (rank, &a) in order.iter().enumerate() {
        assignment[a] = rank * nc / na;
    }
    let cluster_map = ClusterMap::new(assignment, nc)?;

    let mut u = [0.0; 4];
    u.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
    let mut uniform_vec = |len: usize| -> Vec<Real> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let g_quad: Vec<Vec<Real>> = (0..nc).map(|_| uniform_vec(dim * dim)).collect();
    let g_lin: Vec<Vec<Real>> = (0..nc).map(|_| uniform_vec(dim)).collect();
    let resid_m: Vec<Vec<Real>> = (0..nc).map(|_| uniform_vec(dim * na)).collect();
    let resid_theta_x: Vec<Vec<Real>> = (0..nc).map(|_| uniform_vec(dim)).collect();
    let resid_theta_a: Vec<Vec<Real>> = (0..nc).map(|_| uniform_vec(na)).collect();
    let mu_w = uniform_vec(dim * na);

    let context_mode = match &config.context_spec {
        ContextSpec::Continuous => ContextMode::Continuous,
        ContextSpec::DiscreteRandom { n_contexts } => {
            let contexts: Vec<Vec<Real>> = (0..*n_contexts)
                .map(|_| (0..dim).map(|_| std_normal(&mut rng)).collect())
                .collect();
            let w = 1.0 / *n_contexts as Real;
            ContextMode::Discrete {
                weights: vec![w; *n_contexts],
                contexts,
            }
        }
        ContextSpec::DiscreteFixed { contexts, weights } => ContextMode::Discrete {
            contexts: contexts.clone(),
            weights: weights.clone(),
        },
    };

    Ok(SyntheticEnvironment {
        config,
        cluster_map,
        context_mode,
        g_quad,
        g_lin,
        u,
        resid_m,
        resid_theta_x,
        resid_theta_a,
        mu_w,
        unsupported: vec![false; na],
    })
}

impl SyntheticEnvironment {
    pub fn n_actions(&self) -> usize {
        self.config.n_actions
    }

    pub fn n_clusters(&self) -> usize {
        self.config.n_clusters
    }

    pub fn context_dim(&self) -> usize {
        self.config.context_dim
    }

    /// A constant-q fixture: every parameter zero except the per-action
    /// residual vector, so q(x, a) = q_values[a] for every context. Used by
    /// numeric-example tests and oracle instances with hand-picked rewards.
    pub fn fixture_constant_q(
        q_values: &[Real],
        assignment: &[usize],
        n_clusters: usize,
        contexts: Vec<Vec<Real>>,
        reward_noise: RewardNoise,
    ) -> Result<Self> {
        let na = q_values.len();
        if assignment.len() != na {
            return Err(OplError::Config("assignment/q length mismatch".into()));
        }
        let dim = contexts
            .first()
            .map(|c| c.len())
            .ok_or_else(|| OplError::Config("fixture needs ≥ 1 context".into()))?;
        let cluster_map = ClusterMap::new(assignment.to_vec(), n_clusters)?;
        let w = 1.0 / contexts.len() as Real;
        let weights = vec![w; contexts.len()];
        let mut theta_a = vec![vec![0.0; na]; n_clusters];
        for (a, &q) in q_values.iter().enumerate() {
            theta_a[cluster_map.cluster_of(a)][a] = q;
        }
        let config = EnvConfig {
            n_actions: na,
            n_clusters,
            context_dim: dim,
            logging_beta: 0.0,
            reward_noise,
            context_spec: ContextSpec::DiscreteFixed {
                contexts: contexts.clone(),
                weights: weights.clone(),
            },
            effect_scale: 1.0,
        };
        Ok(Self {
            config,
            cluster_map,
            context_mode: ContextMode::Discrete { contexts, weights },
            g_quad: vec![vec![0.0; dim * dim]; n_clusters],
            g_lin: vec![vec![0.0; dim]; n_clusters],
            u: [0.0; 4],
            resid_m: vec![vec![0.0; dim * na]; n_clusters],
            resid_theta_x: vec![vec![0.0; dim]; n_clusters],
            resid_theta_a: theta_a,
            mu_w: vec![0.0; dim * na],
            unsupported: vec![false; na],
        })
    }

    /// Base cluster effect, bounded in [-3, 3].
    pub fn g_base(&self, x: &[Real], c: usize) -> Real {
        let dim = self.context_dim();
        let quad = &self.g_quad[c];
        let mut s = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                s += x[i] * quad[i * dim + j] * x[j];
            }
        }
        for (xi, bi) in x.iter().zip(&self.g_lin[c]) {
            s += xi * bi;
        }
        3.0 * s.tanh()
    }

    /// Cluster effect g(x, c): base effect plus the four threshold bonuses on
    /// coordinate sums (1-based dimension ranges, truncated to context_dim).
    pub fn cluster_effect(&self, x: &[Real], c: usize) -> Real {
        let sum_range = |lo: usize, hi: usize| -> Real {
            // inclusive 1-based [lo, hi]
            let hi = hi.min(x.len());
            if lo > hi {
                return 0.0;
            }
            x[lo - 1..hi].iter().sum()
        };
        let mut g = self.g_base(x, c);
        if sum_range(1, 3) < 1.5 {
            g += self.u[0];
        }
        if sum_range(3, 8) < -0.5 {
            g += self.u[1];
        }
        if sum_range(2, 3) > 3.0 {
            g += self.u[2];
        }
        if sum_range(5, 10) < 1.0 {
            g += self.u[3];
        }
        g * self.config.effect_scale
    }

    /// Residual effect h_{c_a}(x, a).
    pub fn residual_effect(&self, x: &[Real], a: usize) -> Real {
        let c = self.cluster_map.cluster_of(a);
        let na = self.n_actions();
        let m = &self.resid_m[c];
        let mut h = self.resid_theta_a[c][a];
        for (d, xd) in x.iter().enumerate() {
            h += xd * m[d * na + a];
            h += xd * self.resid_theta_x[c][d];
        }
        h * self.config.effect_scale
    }

    pub fn expected_reward(&self, x: &[Real], a: usize) -> Result<Real> {
        if a >= self.n_actions() {
            return Err(OplError::Contract(format!(
                "action {a} out of range ({} actions)",
                self.n_actions()
            )));
        }
        let q = self.cluster_effect(x, self.cluster_map.cluster_of(a)) + self.residual_effect(x, a);
        Ok(match self.config.reward_noise {
            RewardNoise::Bernoulli => q.clamp(BERNOULLI_CLIP, 1.0 - BERNOULLI_CLIP),
            RewardNoise::Gaussian { .. } => q,
        })
    }

    /// q(x, a) for every action at once.
    pub fn expected_rewards_all(&self, x: &[Real]) -> Vec<Real> {
        let na = self.n_actions();
        let g: Vec<Real> = (0..self.n_clusters())
            .map(|c| self.cluster_effect(x, c))
            .collect();
        (0..na)
            .map(|a| {
                let q = g[self.cluster_map.cluster_of(a)] + self.residual_effect(x, a);
                match self.config.reward_noise {
                    RewardNoise::Bernoulli => q.clamp(BERNOULLI_CLIP, 1.0 - BERNOULLI_CLIP),
                    RewardNoise::Gaussian { .. } => q,
                }
            })
            .collect()
    }

    /// Reward variance σ²(x, a) under the configured noise law.
    pub fn reward_variance(&self, x: &[Real], a: usize) -> Real {
        match self.config.reward_noise {
            RewardNoise::Bernoulli => {
                let q = self.expected_reward(x, a).unwrap();
                q * (1.0 - q)
            }
            RewardNoise::Gaussian { sigma } => sigma * sigma,
        }
    }

    pub fn mu_value(&self, x: &[Real], a: usize) -> Real {
        let na = self.n_actions();
        let mut s = 0.0;
        for (d, xd) in x.iter().enumerate() {
            s += xd * self.mu_w[d * na + a];
        }
        s.clamp(-2.0, 2.0)
    }

    /// Logging policy π_0(·|x): softmax over β·q(x,a) + μ(x,a), with
    /// unsupported actions receiving probability zero.
    pub fn logging_policy_probs(&self, x: &[Real]) -> Vec<Real> {
        let q = self.expected_rewards_all(x);
        let beta = self.config.logging_beta;
        let scores: Vec<Real> = (0..self.n_actions())
            .map(|a| beta * q[a] + self.mu_value(x, a))
            .collect();
        let max = scores
            .iter()
            .zip(&self.unsupported)
            .filter(|(_, &u)| !u)
            .map(|(&s, _)| s)
            .fold(Real::NEG_INFINITY, Real::max);
        let mut probs: Vec<Real> = scores
            .iter()
            .zip(&self.unsupported)
            .map(|(&s, &u)| if u { 0.0 } else { (s - max).exp() })
            .collect();
        let z: Real = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        probs
    }

    pub fn sample_context(&self, rng: &mut ChaCha8Rng) -> Vec<Real> {
        match &self.context_mode {
            ContextMode::Continuous => (0..self.context_dim())
                .map(|_| std_normal(rng))
                .collect(),
            ContextMode::Discrete { contexts, weights } => {
                let u: Real = rng.gen();
                let mut acc = 0.0;
                for (c, &w) in contexts.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return c.clone();
                    }
                }
                contexts.last().unwrap().clone()
            }
        }
    }

    pub fn sample_contexts(&self, n: usize, seed: u64) -> Vec<Vec<Real>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_context(&mut rng)).collect()
    }

    fn sample_reward(&self, q: Real, rng: &mut ChaCha8Rng) -> Real {
        match self.config.reward_noise {
            RewardNoise::Bernoulli => {
                if rng.gen::<Real>() < q {
                    1.0
                } else {
                    0.0
                }
            }
            RewardNoise::Gaussian { sigma } => q + sigma * std_normal(rng),
        }
    }

    /// Sample n logged records. Each context is reused for
    /// `repeats_per_context` consecutive records so pairwise regression data
    /// exists even in continuous-context mode.
    pub fn sample_logged_data(
        &self,
        n: usize,
        seed: u64,
        repeats_per_context: usize,
    ) -> Result<LoggedDataset> {
        if n == 0 {
            return Err(OplError::Config("requested an empty dataset".into()));
        }
        if repeats_per_context == 0 {
            return Err(OplError::Config("repeats_per_context must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::with_capacity(n);
        while records.len() < n {
            let x = self.sample_context(&mut rng);
            let probs = self.logging_policy_probs(&x);
            let q = self.expected_rewards_all(&x);
            for _ in 0..repeats_per_context {
                if records.len() == n {
                    break;
                }
                let u: Real = rng.gen();
                let mut acc = 0.0;
                let mut action = self.n_actions() - 1;
                for (a, &p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        action = a;
                        break;
                    }
                }
                let reward = self.sample_reward(q[action], &mut rng);
                records.push(LoggedRecord {
                    context: x.clone(),
                    action,
                    cluster: self.cluster_map.cluster_of(action),
                    reward,
                    propensity: probs[action],
                });
            }
        }
        Ok(LoggedDataset {
            records,
            cluster_map: self.cluster_map.clone(),
        })
    }

    /// Remove `n_unsupported` actions from the logging policy's support while
    /// keeping at least one supported action per cluster (full cluster
    /// support is preserved whenever the precondition can be met).
    pub fn restrict_support(&self, n_unsupported: usize, seed: u64) -> Result<Self> {
        let na = self.n_actions();
        if n_unsupported >= na {
            return Err(OplError::Config(format!(
                "cannot remove {n_unsupported} of {na} actions"
            )));
        }
        let mut env = self.clone();
        if n_unsupported == 0 {
            return Ok(env);
        }
        let mut supported_per_cluster = vec![0usize; self.n_clusters()];
        for a in 0..na {
            if !env.unsupported[a] {
                supported_per_cluster[self.cluster_map.cluster_of(a)] += 1;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..na).collect();
        // Fisher-Yates
        for i in (1..na).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut removed = 0;
        for &a in &order {
            if removed == n_unsupported {
                break;
            }
            let c = self.cluster_map.cluster_of(a);
            if !env.unsupported[a] && supported_per_cluster[c] > 1 {
                env.unsupported[a] = true;
                supported_per_cluster[c] -= 1;
                removed += 1;
            }
        }
        if removed < n_unsupported {
            return Err(OplError::Config(format!(
                "removing {n_unsupported} actions would empty a cluster's support"
            )));
        }
        Ok(env)
    }
}

/// Exact policy value over a finite context set:
/// (1/|contexts|) Σ_x Σ_a π(a|x) q(x,a).
pub fn policy_value(
    env: &SyntheticEnvironment,
    policy: &dyn ActionDistribution,
    contexts: &[Vec<Real>],
) -> Result<Real> {
    if contexts.is_empty() {
        return Err(OplError::Config("empty evaluation context set".into()));
    }
    let mut total = 0.0;
    for x in contexts {
        let probs = policy.action_probs(x);
        if probs.len() != env.n_actions() {
            return Err(OplError::Contract(format!(
                "policy returned {} probabilities for {} actions",
                probs.len(),
                env.n_actions()
            )));
        }
        let sum: Real = probs.iter().sum();
        if probs.iter().any(|&p| p < -1e-12) || (sum - 1.0).abs() > 1e-9 {
            return Err(OplError::Contract(format!(
                "policy output is not a probability simplex (sum {sum})"
            )));
        }
        let q = env.expected_rewards_all(x);
        total += probs.iter().zip(&q).map(|(p, qa)| p * qa).sum::<Real>();
    }
    Ok(total / contexts.len() as Real)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedRecord {
    pub context: Vec<Real>,
    pub action: usize,
    pub cluster: usize,
    pub reward: Real,
    pub propensity: Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoggedDataset {
    pub records: Vec<LoggedRecord>,
    /// Cluster map used at logging time.
    pub cluster_map: ClusterMap,
}

impl LoggedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Export as CSV with header `ctx_0..ctx_{d-1},action,cluster,reward,propensity`.
    pub fn to_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let dim = self.records.first().map(|r| r.context.len()).unwrap_or(0);
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..dim).map(|d| format!("ctx_{d}")).collect();
        header.extend(["action", "cluster", "reward", "propensity"].map(String::from));
        wtr.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = r.context.iter().map(|v| format!("{v:e}")).collect();
            row.push(r.action.to_string());
            row.push(r.cluster.to_string());
            row.push(format!("{:e}", r.reward));
            row.push(format!("{:e}", r.propensity));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn from_csv<R: std::io::Read>(r: R, cluster_map: ClusterMap) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let dim = headers.iter().filter(|h| h.starts_with("ctx_")).count();
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let parse = |s: &str| -> Result<Real> {
                s.parse()
                    .map_err(|_| OplError::Config(format!("bad number {s:?} in row {i}")))
            };
            let context: Vec<Real> = (0..dim)
                .map(|d| parse(&row[d]))
                .collect::<Result<_>>()?;
            let action: usize = row[dim]
                .parse()
                .map_err(|_| OplError::Config(format!("bad action in row {i}")))?;
            let cluster: usize = row[dim + 1]
                .parse()
                .map_err(|_| OplError::Config(format!("bad cluster in row {i}")))?;
            let reward = parse(&row[dim + 2])?;
            let propensity = parse(&row[dim + 3])?;
            if propensity <= 0.0 {
                return Err(OplError::Config(format!(
                    "record {i} has non-positive propensity {propensity}"
                )));
            }
            if cluster != cluster_map.cluster_of(action) {
                return Err(OplError::Config(format!(
                    "record {i}: cluster {cluster} does not match map for action {action}"
                )));
            }
            records.push(LoggedRecord {
                context,
                action,
                cluster,
                reward,
                propensity,
            });
        }
        Ok(Self {
            records,
            cluster_map,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::UniformPolicy;

    fn small_env(seed: u64) -> SyntheticEnvironment {
        build_synthetic_env(EnvConfig::new(8, 3).with_dim(4), seed).unwrap()
    }

    #[test]
    fn build_is_deterministic_and_counts_match() {
        let cfg = EnvConfig::new(20, 5);
        let a = build_synthetic_env(cfg.clone(), 7).unwrap();
        let b = build_synthetic_env(cfg, 7).unwrap();
        assert_eq!(a.cluster_map, b.cluster_map);
        assert_eq!(a.g_quad, b.g_quad);
        assert_eq!(a.resid_m, b.resid_m);
        assert_eq!(a.u, b.u);
        assert_eq!(a.mu_w, b.mu_w);
        assert_eq!(a.n_actions(), 20);
        assert_eq!(a.n_clusters(), 5);
        assert!(a.cluster_map.is_surjective());
    }

    #[test]
    fn default_scale_env_builds() {
        let env = build_synthetic_env(EnvConfig::new(2000, 30), 0).unwrap();
        assert_eq!(env.n_actions(), 2000);
        assert_eq!(env.n_clusters(), 30);
        assert_eq!(env.context_dim(), 10);
        assert!(env.cluster_map.is_surjective());
        // balanced bins: every cluster within ±1 of n/|C|
        let sizes: Vec<usize> = env.cluster_map.members().iter().map(|m| m.len()).collect();
        assert!(sizes.iter().all(|&s| s >= 2000 / 30 && s <= 2000 / 30 + 1));
    }

    #[test]
    fn singleton_clusters_when_counts_equal() {
        let env = build_synthetic_env(EnvConfig::new(4, 4).with_dim(3), 5).unwrap();
        let members = env.cluster_map.members();
        assert!(members.iter().all(|m| m.len() == 1));
    }

    #[test]
    fn invalid_counts_rejected() {
        assert!(build_synthetic_env(EnvConfig::new(0, 1), 0).is_err());
        assert!(build_synthetic_env(EnvConfig::new(5, 0), 0).is_err());
        assert!(build_synthetic_env(EnvConfig::new(3, 5), 0).is_err());
    }

    #[test]
    fn parameter_ranges_honored() {
        let env = build_synthetic_env(EnvConfig::new(50, 7), 13).unwrap();
        assert!(env.u.iter().all(|v| (-3.0..3.0).contains(v)));
        for c in 0..7 {
            assert!(env.resid_m[c].iter().all(|v| (-1.0..1.0).contains(v)));
            assert!(env.resid_theta_x[c].iter().all(|v| (-1.0..1.0).contains(v)));
            assert!(env.resid_theta_a[c].iter().all(|v| (-1.0..1.0).contains(v)));
            assert!(env.g_quad[c].iter().all(|v| (-1.0..1.0).contains(v)));
        }
    }

    #[test]
    fn constant_reward_when_params_cleared() {
        let mut env = small_env(1);
        for c in 0..env.n_clusters() {
            env.resid_m[c].iter_mut().for_each(|v| *v = 0.0);
            env.resid_theta_x[c].iter_mut().for_each(|v| *v = 0.0);
            env.resid_theta_a[c].iter_mut().for_each(|v| *v = 0.0);
            env.g_quad[c].iter_mut().for_each(|v| *v = 0.0);
            env.g_lin[c].iter_mut().for_each(|v| *v = 0.0);
        }
        env.u = [0.0; 4];
        let x = vec![0.5, -0.2, 1.0, 0.3];
        for a in 0..env.n_actions() {
            assert_eq!(env.expected_reward(&x, a).unwrap(), 0.0);
        }
    }

    #[test]
    fn same_cluster_actions_share_cluster_effect() {
        let env = small_env(2);
        let x = vec![0.1, 0.9, -0.4, 0.2];
        let members = env.cluster_map.members();
        let pair = members.iter().find(|m| m.len() >= 2).unwrap();
        let (a, b) = (pair[0], pair[1]);
        let qa = env.expected_reward(&x, a).unwrap();
        let qb = env.expected_reward(&x, b).unwrap();
        let diff = qa - qb;
        let h_diff = env.residual_effect(&x, a) - env.residual_effect(&x, b);
        assert!((diff - h_diff).abs() < 1e-12);
    }

    /// Independent re-evaluation of the reward formula, coded from scratch.
    fn reward_reference(env: &SyntheticEnvironment, x: &[Real], a: usize) -> Real {
        let c = env.cluster_map.cluster_of(a);
        let dim = x.len();
        let mut quad = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                quad += x[i] * env.g_quad[c][i * dim + j] * x[j];
            }
        }
        let lin: Real = x.iter().zip(&env.g_lin[c]).map(|(a, b)| a * b).sum();
        let mut g = 3.0 * (quad + lin).tanh();
        let s = |lo: usize, hi: usize| -> Real {
            x.iter()
                .enumerate()
                .filter(|(d, _)| *d + 1 >= lo && *d + 1 <= hi)
                .map(|(_, v)| v)
                .sum()
        };
        if s(1, 3) < 1.5 {
            g += env.u[0];
        }
        if s(3, 8) < -0.5 {
            g += env.u[1];
        }
        if s(2, 3) > 3.0 {
            g += env.u[2];
        }
        if s(5, 10) < 1.0 {
            g += env.u[3];
        }
        let na = env.n_actions();
        let mut h = env.resid_theta_a[c][a];
        for d in 0..dim {
            h += x[d] * env.resid_m[c][d * na + a] + x[d] * env.resid_theta_x[c][d];
        }
        g + h
    }

    #[test]
    fn expected_reward_matches_independent_reimplementation() {
        let env = build_synthetic_env(EnvConfig::new(4, 2).with_dim(10), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let x: Vec<Real> = (0..10).map(|_| std_normal(&mut rng)).collect();
            for a in 0..4 {
                let got = env.expected_reward(&x, a).unwrap();
                let want = reward_reference(&env, &x, a);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bernoulli_mode_clips() {
        let env = build_synthetic_env(
            EnvConfig::new(6, 2).with_noise(RewardNoise::Bernoulli),
            3,
        )
        .unwrap();
        let x = vec![2.0; 10];
        for a in 0..6 {
            let q = env.expected_reward(&x, a).unwrap();
            assert!((0.01..=0.99).contains(&q));
        }
    }

    #[test]
    fn logging_uniform_when_beta_zero_and_mu_zero() {
        let mut env = small_env(4);
        env.config.logging_beta = 0.0;
        env.mu_w.iter_mut().for_each(|v| *v = 0.0);
        let probs = env.logging_policy_probs(&[0.3, 0.1, -0.5, 0.9]);
        for p in probs {
            assert!((p - 1.0 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logging_concentrates_for_large_beta() {
        let mut env = small_env(5);
        env.config.logging_beta = 200.0;
        env.mu_w.iter_mut().for_each(|v| *v = 0.0);
        let x = vec![0.4, -0.1, 0.8, 0.2];
        let q = env.expected_rewards_all(&x);
        let best = (0..q.len())
            .max_by(|&i, &j| q[i].partial_cmp(&q[j]).unwrap())
            .unwrap();
        let probs = env.logging_policy_probs(&x);
        assert!(probs[best] > 0.99);
    }

    #[test]
    fn logging_matches_brute_force_softmax() {
        let mut env = small_env(6);
        env.config.logging_beta = -1.0;
        let x = vec![0.7, 0.2, -0.3, 1.1];
        let probs = env.logging_policy_probs(&x);
        // direct softmax recomputation from expected_reward values
        let scores: Vec<Real> = (0..env.n_actions())
            .map(|a| -1.0 * env.expected_reward(&x, a).unwrap() + env.mu_value(&x, a))
            .collect();
        let z: Real = scores.iter().map(|s| s.exp()).sum();
        for (a, p) in probs.iter().enumerate() {
            assert!((p - scores[a].exp() / z).abs() < 1e-12);
        }
        let sum: Real = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_rejected() {
        let env = small_env(0);
        assert!(env.sample_logged_data(0, 1, 1).is_err());
    }

    #[test]
    fn noiseless_rewards_equal_expected_reward() {
        let mut env = small_env(8);
        env.config.reward_noise = RewardNoise::Gaussian { sigma: 0.0 };
        let d = env.sample_logged_data(50, 3, 1).unwrap();
        for r in &d.records {
            let q = env.expected_reward(&r.context, r.action).unwrap();
            assert!((r.reward - q).abs() < 1e-12);
        }
    }

    #[test]
    fn propensities_match_logging_probs() {
        let env = small_env(9);
        let d = env.sample_logged_data(200, 5, 2).unwrap();
        for r in &d.records {
            let probs = env.logging_policy_probs(&r.context);
            assert!((r.propensity - probs[r.action]).abs() < 1e-12);
            assert_eq!(r.cluster, env.cluster_map.cluster_of(r.action));
            assert!(r.propensity > 0.0);
        }
    }

    #[test]
    fn uniform_logging_frequencies_within_four_se() {
        let mut env = build_synthetic_env(EnvConfig::new(5, 2).with_dim(3), 11).unwrap();
        env.config.logging_beta = 0.0;
        env.mu_w.iter_mut().for_each(|v| *v = 0.0);
        let n = 1_000_000;
        let d = env.sample_logged_data(n, 123, 1).unwrap();
        let mut counts = vec![0usize; 5];
        for r in &d.records {
            counts[r.action] += 1;
        }
        let p = 1.0 / 5.0;
        let se = (p * (1.0 - p) / n as Real).sqrt();
        for &c in &counts {
            let freq = c as Real / n as Real;
            assert!((freq - p).abs() < 4.0 * se, "freq {freq} vs {p} (se {se})");
        }
    }

    #[test]
    fn perturb_identity_and_full_flip() {
        let cm = ClusterMap::new(vec![0, 0, 1, 1, 2, 2], 3).unwrap();
        let same = cm.perturb(0.0, 42).unwrap();
        assert_eq!(cm, same);
        let flipped = cm.perturb(1.0, 42).unwrap();
        for a in 0..6 {
            assert_ne!(cm.cluster_of(a), flipped.cluster_of(a));
        }
        assert_eq!(flipped.n_clusters(), 3);
        assert_eq!(flipped.n_actions(), 6);
    }

    #[test]
    fn perturb_fraction_binomial_check() {
        let assignment: Vec<usize> = (0..10_000).map(|a| a % 8).collect();
        let cm = ClusterMap::new(assignment, 8).unwrap();
        let noisy = cm.perturb(0.3, 7).unwrap();
        let changed = (0..10_000)
            .filter(|&a| cm.cluster_of(a) != noisy.cluster_of(a))
            .count();
        let p: Real = 0.3;
        let se: Real = (p * (1.0 - p) / 10_000.0).sqrt();
        let frac = changed as Real / 10_000.0;
        assert!((frac - p).abs() < 4.0 * se, "fraction {frac}");
    }

    #[test]
    fn restrict_support_identity_and_renormalization() {
        let env = small_env(14);
        let same = env.restrict_support(0, 9).unwrap();
        let x = vec![0.2, -0.8, 0.5, 0.0];
        assert_eq!(env.logging_policy_probs(&x), same.logging_policy_probs(&x));

        let one_less = env.restrict_support(1, 9).unwrap();
        let probs = one_less.logging_policy_probs(&x);
        let sum: Real = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let removed = one_less.unsupported.iter().filter(|&&u| u).count();
        assert_eq!(removed, 1);
        // cluster support preserved
        let mut cluster_mass = vec![0.0; env.n_clusters()];
        for (a, &p) in probs.iter().enumerate() {
            cluster_mass[env.cluster_map.cluster_of(a)] += p;
        }
        assert!(cluster_mass.iter().all(|&m| m > 0.0));
    }

    #[test]
    fn restrict_support_rejects_emptying_a_cluster() {
        // 3 actions, 3 singleton clusters: removing any action empties one
        let env = build_synthetic_env(EnvConfig::new(3, 3).with_dim(2), 1).unwrap();
        assert!(env.restrict_support(1, 0).is_err());
        assert!(env.restrict_support(3, 0).is_err());
    }

    #[test]
    fn removed_actions_never_sampled() {
        let env = build_synthetic_env(EnvConfig::new(10, 2).with_dim(3), 17).unwrap();
        let restricted = env.restrict_support(4, 3).unwrap();
        let d = restricted.sample_logged_data(100_000, 55, 1).unwrap();
        for r in &d.records {
            assert!(!restricted.unsupported[r.action]);
        }
    }

    #[test]
    fn policy_value_on_numeric_example() {
        // q = (4, 2, 5, 0), clusters {0,0},{1,1}
        let env = SyntheticEnvironment::fixture_constant_q(
            &[4.0, 2.0, 5.0, 0.0],
            &[0, 0, 1, 1],
            2,
            vec![vec![0.0; 3]],
            RewardNoise::Gaussian { sigma: 1.0 },
        )
        .unwrap();
        let contexts = vec![vec![0.0; 3]];
        // deterministic policy on a2 → 5
        struct Det;
        impl ActionDistribution for Det {
            fn action_probs(&self, _x: &[Real]) -> Vec<Real> {
                vec![0.0, 0.0, 1.0, 0.0]
            }
        }
        assert_eq!(policy_value(&env, &Det, &contexts).unwrap(), 5.0);
        // uniform → 2.75
        let v = policy_value(&env, &UniformPolicy { n_actions: 4 }, &contexts).unwrap();
        assert!((v - 2.75).abs() < 1e-12);
    }

    #[test]
    fn policy_value_rejects_non_simplex() {
        let env = small_env(3);
        struct Bad;
        impl ActionDistribution for Bad {
            fn action_probs(&self, _x: &[Real]) -> Vec<Real> {
                vec![0.5; 8]
            }
        }
        let contexts = vec![vec![0.0; 4]];
        assert!(policy_value(&env, &Bad, &contexts).is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let env = small_env(19);
        let d = env.sample_logged_data(25, 2, 2).unwrap();
        let mut buf = Vec::new();
        d.to_csv(&mut buf).unwrap();
        let back = LoggedDataset::from_csv(&buf[..], env.cluster_map.clone()).unwrap();
        assert_eq!(d.records.len(), back.records.len());
        for (a, b) in d.records.iter().zip(&back.records) {
            assert_eq!(a.action, b.action);
            assert_eq!(a.cluster, b.cluster);
            assert!((a.reward - b.reward).abs() < 1e-15);
            assert!((a.propensity - b.propensity).abs() < 1e-15);
            for (x, y) in a.context.iter().zip(&b.context) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
