//! Closed-form bias/variance oracles for the gradient estimators, plus the
//! Monte-Carlo machinery used to validate estimators against them.
//!
//! All closed forms require a discrete context law: exact enumeration needs a
//! finite joint distribution over (x, a). Continuous-context validation is
//! Monte-Carlo only. Reward laws enter the formulas analytically through
//! their mean and variance, so no reward sampling happens in the enumeration
//! identities.

use crate::env::{ContextMode, LoggedDataset, SyntheticEnvironment};
use crate::policy::{cluster_marginal, OverallPolicy, SecondStagePolicy, SoftmaxPolicy};
use crate::reward::RewardRegressor;
use crate::{GradientVector, OplError, Real, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Finite context law of a discrete-mode environment.
fn discrete_law(env: &SyntheticEnvironment) -> Result<(&[Vec<Real>], &[Real])> {
    match &env.context_mode {
        ContextMode::Discrete { contexts, weights } => Ok((contexts, weights)),
        ContextMode::Continuous => Err(OplError::UnsupportedMode(
            "closed-form oracles need a discrete context law".into(),
        )),
    }
}

/// Exact bias of the two-stage gradient estimator for a given reward model.
///
/// Evaluates, for each context and cluster, the within-cluster pair sum
/// Σ_{a<b} π_0(a|x,c)·π_0(b|x,c)·(Δ_q − Δ_f̂)(x,a,b)·(w(x,b) − w(x,a))
/// weighted by π_0(c|x) and the first-stage score, where w(x,a) is the
/// overall-policy importance weight. The pair terms are computed in the
/// algebraically cancelled form π_0(a|x)·π(b|x) − π(a|x)·π_0(b|x), which
/// stays finite for logging-unsupported actions.
///
/// Requires full cluster support: every cluster must have positive logging
/// marginal at every context.
pub fn potec_bias_closed_form(
    env: &SyntheticEnvironment,
    overall: &OverallPolicy,
    f: &RewardRegressor,
) -> Result<GradientVector> {
    let (contexts, weights) = discrete_law(env)?;
    let cm = &env.cluster_map;
    let members = cm.members();
    let mut bias = vec![0.0; overall.first.net.n_params()];
    for (x, &px) in contexts.iter().zip(weights) {
        let pi0 = env.logging_policy_probs(x);
        let pi0_c = cluster_marginal(&pi0, cm)?;
        let pi = overall.overall_probs(x)?;
        let q = env.expected_rewards_all(x);
        let f_all = f.eval_all(x)?;
        let mut coeffs = vec![0.0; cm.n_clusters()];
        for (c, group) in members.iter().enumerate() {
            if pi0_c[c] <= 0.0 {
                return Err(OplError::Contract(format!(
                    "cluster {c} has zero logging marginal; full cluster support required"
                )));
            }
            let mut acc = 0.0;
            for (i, &a) in group.iter().enumerate() {
                for &b in &group[i + 1..] {
                    let delta = (q[a] - f_all[a]) - (q[b] - f_all[b]);
                    acc += delta * (pi0[a] * pi[b] - pi[a] * pi0[b]);
                }
            }
            coeffs[c] = acc / pi0_c[c];
        }
        let g = overall.first.weighted_score_gradient(x, &coeffs)?;
        for (tot, v) in bias.iter_mut().zip(&g) {
            *tot += px * v;
        }
    }
    Ok(bias)
}

/// Three-term decomposition of a single-record gradient-estimator variance
/// trace (n·tr(Cov) for n = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceTerms {
    /// Reward-noise term: E_{x, a~π_0}[(w·s)² σ²(x,a)] summed over dims.
    pub reward_noise: Real,
    /// Importance-weight term: E_x[V_{a~π_0}[w·Δ·s]] summed over dims.
    pub weight: Real,
    /// Context term: V_x[E[model value · s]] summed over dims.
    pub context: Real,
}

impl VarianceTerms {
    pub fn total(&self) -> Real {
        self.reward_noise + self.weight + self.context
    }
}

/// Variance decomposition of the two-stage gradient estimator, together with
/// how far the reward model is from local correctness — the hypothesis under
/// which the closed form is exact. The formula is evaluated regardless; a
/// nonzero residual flags that it need not match empirical variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotecVarianceReport {
    pub terms: VarianceTerms,
    pub local_correctness_residual: Real,
}

/// Exact single-record variance trace of the two-stage gradient estimator,
/// with cluster importance weights w(x,c) = π_θ(c|x)/π_0(c|x) and first-stage
/// scores. Exact under local correctness of `f`; see
/// [`potec_variance_report`] for the hypothesis-violation flag.
pub fn potec_variance_closed_form(
    env: &SyntheticEnvironment,
    overall: &OverallPolicy,
    f: &RewardRegressor,
) -> Result<Real> {
    Ok(potec_variance_report(env, overall, f)?.terms.total())
}

pub fn potec_variance_report(
    env: &SyntheticEnvironment,
    overall: &OverallPolicy,
    f: &RewardRegressor,
) -> Result<PotecVarianceReport> {
    let (contexts, weights) = discrete_law(env)?;
    let cm = &env.cluster_map;
    let nc = cm.n_clusters();
    let n_params = overall.first.net.n_params();
    let mut reward_noise = 0.0;
    let mut weight_term = 0.0;
    let mut mean_sq_norm = 0.0; // E_x[‖u_x‖²] of the context term
    let mut mean_vec = vec![0.0; n_params]; // E_x[u_x]
    let mut residual: Real = 0.0;
    for (x, &px) in contexts.iter().zip(weights) {
        let pi0 = env.logging_policy_probs(x);
        let pi0_c = cluster_marginal(&pi0, cm)?;
        let pi1 = overall.first.probs(x)?;
        let q = env.expected_rewards_all(x);
        let f_all = f.eval_all(x)?;
        let choices = overall.second.choices_all(x)?;
        let scores: Vec<GradientVector> = (0..nc)
            .map(|c| overall.first.score_function(x, c))
            .collect::<Result<_>>()?;
        let w_c: Vec<Real> = (0..nc)
            .map(|c| {
                if pi0_c[c] <= 0.0 {
                    Err(OplError::Contract(format!(
                        "cluster {c} has zero logging marginal; full cluster support required"
                    )))
                } else {
                    Ok(pi1[c] / pi0_c[c])
                }
            })
            .collect::<Result<_>>()?;
        // local-correctness residual: within-cluster pairwise differences of q − f̂
        for group in cm.members() {
            for (i, &a) in group.iter().enumerate() {
                for &b in &group[i + 1..] {
                    residual = residual.max(((q[a] - f_all[a]) - (q[b] - f_all[b])).abs());
                }
            }
        }
        let mut e_v2 = 0.0; // E_{a~π_0}[‖w·Δ·s‖²]
        let mut e_v = vec![0.0; n_params]; // E_{a~π_0}[w·Δ·s]
        for (a, &p0a) in pi0.iter().enumerate() {
            if p0a <= 0.0 {
                continue;
            }
            let c = cm.cluster_of(a);
            let sq_norm: Real = scores[c].iter().map(|s| s * s).sum();
            reward_noise += px * p0a * w_c[c] * w_c[c] * sq_norm * env.reward_variance(x, a);
            let h = w_c[c] * (q[a] - f_all[a]);
            e_v2 += p0a * h * h * sq_norm;
            for (acc, s) in e_v.iter_mut().zip(&scores[c]) {
                *acc += p0a * h * s;
            }
        }
        let e_v_norm: Real = e_v.iter().map(|v| v * v).sum();
        weight_term += px * (e_v2 - e_v_norm);
        // context term accumulators: u_x = Σ_c π_θ(c|x)·q(x, choice(x,c))·s(x,c)
        let mut u = vec![0.0; n_params];
        for c in 0..nc {
            let coef = pi1[c] * q[choices[c]];
            for (acc, s) in u.iter_mut().zip(&scores[c]) {
                *acc += coef * s;
            }
        }
        mean_sq_norm += px * u.iter().map(|v| v * v).sum::<Real>();
        for (acc, v) in mean_vec.iter_mut().zip(&u) {
            *acc += px * v;
        }
    }
    let context = mean_sq_norm - mean_vec.iter().map(|v| v * v).sum::<Real>();
    Ok(PotecVarianceReport {
        terms: VarianceTerms {
            reward_noise,
            weight: weight_term,
            context,
        },
        local_correctness_residual: residual,
    })
}

/// Exact single-record variance trace of the doubly-robust gradient
/// estimator over actions; with q̂ ≡ 0 this is the plain importance-weighted
/// estimator's variance. Requires full action support.
pub fn dr_variance_closed_form(
    env: &SyntheticEnvironment,
    p: &SoftmaxPolicy,
    q_hat: &RewardRegressor,
) -> Result<Real> {
    Ok(dr_variance_terms(env, p, q_hat)?.total())
}

pub fn dr_variance_terms(
    env: &SyntheticEnvironment,
    p: &SoftmaxPolicy,
    q_hat: &RewardRegressor,
) -> Result<VarianceTerms> {
    let (contexts, weights) = discrete_law(env)?;
    let na = env.n_actions();
    if p.n_outcomes() != na {
        return Err(OplError::Contract(format!(
            "policy over {} outcomes for {na} actions",
            p.n_outcomes()
        )));
    }
    let n_params = p.net.n_params();
    let mut reward_noise = 0.0;
    let mut weight_term = 0.0;
    let mut mean_sq_norm = 0.0;
    let mut mean_vec = vec![0.0; n_params];
    for (x, &px) in contexts.iter().zip(weights) {
        let pi0 = env.logging_policy_probs(x);
        let pi = p.probs(x)?;
        let q = env.expected_rewards_all(x);
        let qh = q_hat.eval_all(x)?;
        let scores: Vec<GradientVector> = (0..na)
            .map(|a| p.score_function(x, a))
            .collect::<Result<_>>()?;
        let mut e_v2 = 0.0;
        let mut e_v = vec![0.0; n_params];
        let mut u = vec![0.0; n_params];
        for a in 0..na {
            if pi0[a] <= 0.0 {
                return Err(OplError::Contract(format!(
                    "action {a} has zero logging propensity; full support required"
                )));
            }
            let w = pi[a] / pi0[a];
            let sq_norm: Real = scores[a].iter().map(|s| s * s).sum();
            reward_noise += px * pi0[a] * w * w * sq_norm * env.reward_variance(x, a);
            let h = w * (q[a] - qh[a]);
            e_v2 += pi0[a] * h * h * sq_norm;
            let model = pi[a] * q[a];
            for ((ev, uv), s) in e_v.iter_mut().zip(u.iter_mut()).zip(&scores[a]) {
                *ev += pi0[a] * h * s;
                *uv += model * s;
            }
        }
        weight_term += px * (e_v2 - e_v.iter().map(|v| v * v).sum::<Real>());
        mean_sq_norm += px * u.iter().map(|v| v * v).sum::<Real>();
        for (acc, v) in mean_vec.iter_mut().zip(&u) {
            *acc += px * v;
        }
    }
    let context = mean_sq_norm - mean_vec.iter().map(|v| v * v).sum::<Real>();
    Ok(VarianceTerms {
        reward_noise,
        weight: weight_term,
        context,
    })
}

/// True expected reward of a cluster under the (deterministic) second-stage
/// policy: q(x, choice(x,c)).
pub fn cluster_value(
    env: &SyntheticEnvironment,
    second: &SecondStagePolicy,
    x: &[Real],
    c: usize,
) -> Result<Real> {
    env.expected_reward(x, second.choice(x, c)?)
}

/// True expected reward of a cluster under a uniform second stage:
/// the mean of q(x,·) over the cluster's actions.
pub fn cluster_value_uniform(env: &SyntheticEnvironment, x: &[Real], c: usize) -> Result<Real> {
    let group: Vec<usize> = env
        .cluster_map
        .assignment()
        .iter()
        .enumerate()
        .filter(|&(_, &ca)| ca == c)
        .map(|(a, _)| a)
        .collect();
    if group.is_empty() {
        return Err(OplError::Config(format!("cluster {c} has no actions")));
    }
    let mut s = 0.0;
    for &a in &group {
        s += env.expected_reward(x, a)?;
    }
    Ok(s / group.len() as Real)
}

/// Exhaustive single-record mean and variance trace of a gradient estimator.
///
/// Every per-record estimator here is affine in the reward, so probing one
/// single-record dataset at r = 0 and r = 1 recovers the affine coefficients;
/// the reward law then enters only through its first two moments. Enumerates
/// the full discrete joint law of (x, a).
pub fn enumerate_single_record_moments<F>(
    env: &SyntheticEnvironment,
    estimate: F,
) -> Result<(GradientVector, Real)>
where
    F: Fn(&LoggedDataset) -> Result<GradientVector>,
{
    let (contexts, weights) = discrete_law(env)?;
    let mut mean: Option<GradientVector> = None;
    let mut second_moment = 0.0;
    for (x, &px) in contexts.iter().zip(weights) {
        let pi0 = env.logging_policy_probs(x);
        for (a, &p0a) in pi0.iter().enumerate() {
            if p0a <= 0.0 {
                continue;
            }
            let mut d = LoggedDataset {
                records: vec![crate::env::LoggedRecord {
                    context: x.clone(),
                    action: a,
                    cluster: env.cluster_map.cluster_of(a),
                    reward: 0.0,
                    propensity: p0a,
                }],
                cluster_map: env.cluster_map.clone(),
            };
            let at_zero = estimate(&d)?;
            d.records[0].reward = 1.0;
            let at_one = estimate(&d)?;
            let slope: GradientVector = at_one
                .iter()
                .zip(&at_zero)
                .map(|(one, zero)| one - zero)
                .collect();
            let r_mean = env.expected_reward(x, a)?;
            let r_second = r_mean * r_mean + env.reward_variance(x, a);
            let weight = px * p0a;
            let mean_acc = mean.get_or_insert_with(|| vec![0.0; at_zero.len()]);
            let mut cross = 0.0;
            let mut zero_sq = 0.0;
            let mut slope_sq = 0.0;
            for ((m, &z), &s) in mean_acc.iter_mut().zip(&at_zero).zip(&slope) {
                *m += weight * (z + r_mean * s);
                cross += z * s;
                zero_sq += z * z;
                slope_sq += s * s;
            }
            second_moment += weight * (zero_sq + 2.0 * r_mean * cross + r_second * slope_sq);
        }
    }
    let mean = mean.ok_or_else(|| OplError::Contract("logging policy has empty support".into()))?;
    let trace_var = second_moment - mean.iter().map(|v| v * v).sum::<Real>();
    Ok((mean, trace_var))
}

/// Moments of a gradient estimator over independent seeded replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    /// Monte-Carlo mean of the estimator.
    pub mc_mean: GradientVector,
    /// mc_mean minus the supplied true gradient.
    pub mc_bias: GradientVector,
    /// Trace of the sample covariance across replications.
    pub mc_variance_trace: Real,
    /// Per-component standard errors of mc_mean.
    pub mc_std_errors: Vec<Real>,
    pub n_replications: usize,
    /// Closed-form bias, when an oracle applies to this estimator.
    pub closed_form_bias: Option<GradientVector>,
    /// Closed-form single-record variance trace, when an oracle applies.
    pub closed_form_variance_trace: Option<Real>,
}

impl BiasVarianceReport {
    pub fn with_closed_form_bias(mut self, bias: GradientVector) -> Self {
        self.closed_form_bias = Some(bias);
        self
    }

    pub fn with_closed_form_variance(mut self, trace: Real) -> Self {
        self.closed_form_variance_trace = Some(trace);
        self
    }

    /// True when every component of mc_bias lies within `k_se` standard
    /// errors of the closed-form bias (or of zero when no oracle is set).
    pub fn bias_within(&self, k_se: Real) -> bool {
        self.mc_bias.iter().enumerate().all(|(j, &b)| {
            let target = self.closed_form_bias.as_ref().map_or(0.0, |cf| cf[j]);
            (b - target).abs() <= k_se * self.mc_std_errors[j]
        })
    }

    /// Per-component CSV: index, mc_mean, mc_bias, mc_std_error, and the
    /// closed-form bias column when available.
    pub fn to_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let with_cf = self.closed_form_bias.is_some();
        let mut header = vec!["index", "mc_mean", "mc_bias", "mc_std_error"];
        if with_cf {
            header.push("closed_form_bias");
        }
        wtr.write_record(&header)?;
        for j in 0..self.mc_mean.len() {
            let mut row = vec![
                j.to_string(),
                format!("{:.17e}", self.mc_mean[j]),
                format!("{:.17e}", self.mc_bias[j]),
                format!("{:.17e}", self.mc_std_errors[j]),
            ];
            if let Some(cf) = &self.closed_form_bias {
                row.push(format!("{:.17e}", cf[j]));
            }
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(OplError::Io)?;
        Ok(())
    }

    /// Human-readable summary block.
    pub fn summary(&self) -> String {
        let max_abs_bias = self
            .mc_bias
            .iter()
            .fold(0.0_f64, |m, &b| m.max(b.abs()));
        let max_se_ratio = self
            .mc_bias
            .iter()
            .zip(&self.mc_std_errors)
            .enumerate()
            .map(|(j, (&b, &se))| {
                let target = self.closed_form_bias.as_ref().map_or(0.0, |cf| cf[j]);
                if se > 0.0 {
                    (b - target).abs() / se
                } else if (b - target).abs() > 0.0 {
                    Real::INFINITY
                } else {
                    0.0
                }
            })
            .fold(0.0_f64, Real::max);
        let mut out = String::new();
        out.push_str(&format!(
            "replications: {}\ncomponents: {}\nmax |mc bias|: {max_abs_bias:.6e}\nmax |bias deviation| / SE: {max_se_ratio:.3}\nmc variance trace: {:.6e}\n",
            self.n_replications,
            self.mc_mean.len(),
            self.mc_variance_trace
        ));
        if let Some(cf) = &self.closed_form_bias {
            let norm: Real = cf.iter().map(|v| v * v).sum::<Real>().sqrt();
            out.push_str(&format!("closed-form bias norm: {norm:.6e}\n"));
        }
        if let Some(cf) = self.closed_form_variance_trace {
            let rel = if cf != 0.0 {
                (self.mc_variance_trace - cf).abs() / cf.abs()
            } else {
                self.mc_variance_trace.abs()
            };
            out.push_str(&format!(
                "closed-form variance trace: {cf:.6e} (relative deviation {rel:.4})\n"
            ));
        }
        out
    }
}

const MC_BLOCK: usize = 256;

struct MomentPartial {
    sum: GradientVector,
    sum_sq: GradientVector,
    sq_norm: Real,
    count: usize,
}

/// Estimate an estimator's mean, bias against `truth`, trace covariance and
/// per-component standard errors from `n_replications` independently seeded
/// datasets of `n_per_replication` records each.
///
/// Replications run in parallel but are reduced block-by-block in a fixed
/// order, so the report is bit-identical regardless of thread count.
pub fn monte_carlo_moments<F>(
    env: &SyntheticEnvironment,
    truth: &[Real],
    estimate: F,
    n_per_replication: usize,
    n_replications: usize,
    seed: u64,
) -> Result<BiasVarianceReport>
where
    F: Fn(&LoggedDataset) -> Result<GradientVector> + Sync,
{
    if n_replications < 2 {
        return Err(OplError::Config(
            "need at least 2 replications for standard errors".into(),
        ));
    }
    let n_blocks = n_replications.div_ceil(MC_BLOCK);
    let partials: Vec<MomentPartial> = (0..n_blocks)
        .into_par_iter()
        .map(|block| {
            let lo = block * MC_BLOCK;
            let hi = (lo + MC_BLOCK).min(n_replications);
            let mut sum: GradientVector = Vec::new();
            let mut sum_sq: GradientVector = Vec::new();
            let mut sq_norm = 0.0;
            for rep in lo..hi {
                let d = env.sample_logged_data(
                    n_per_replication,
                    crate::mix_seed(seed, rep as u64 + 1),
                    1,
                )?;
                let g = estimate(&d)?;
                if sum.is_empty() {
                    sum = vec![0.0; g.len()];
                    sum_sq = vec![0.0; g.len()];
                }
                for ((s, s2), &v) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(&g) {
                    *s += v;
                    *s2 += v * v;
                    sq_norm += v * v;
                }
            }
            Ok(MomentPartial {
                sum,
                sum_sq,
                sq_norm,
                count: hi - lo,
            })
        })
        .collect::<Result<_>>()?;
    let dim = partials
        .iter()
        .find(|p| !p.sum.is_empty())
        .map(|p| p.sum.len())
        .ok_or_else(|| OplError::Contract("no replications produced a gradient".into()))?;
    if truth.len() != dim {
        return Err(OplError::Contract(format!(
            "true gradient has {} components, estimator produced {dim}",
            truth.len()
        )));
    }
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    let mut sq_norm = 0.0;
    let mut count = 0usize;
    for p in &partials {
        for ((s, s2), (&ps, &ps2)) in sum
            .iter_mut()
            .zip(sum_sq.iter_mut())
            .zip(p.sum.iter().zip(&p.sum_sq))
        {
            *s += ps;
            *s2 += ps2;
        }
        sq_norm += p.sq_norm;
        count += p.count;
    }
    let n = count as Real;
    let mc_mean: GradientVector = sum.iter().map(|s| s / n).collect();
    // sample variances with the n−1 correction
    let variances: Vec<Real> = sum_sq
        .iter()
        .zip(&mc_mean)
        .map(|(&s2, &m)| ((s2 - n * m * m) / (n - 1.0)).max(0.0))
        .collect();
    let mc_std_errors: Vec<Real> = variances.iter().map(|v| (v / n).sqrt()).collect();
    let mean_norm: Real = mc_mean.iter().map(|m| m * m).sum();
    let mc_variance_trace = ((sq_norm - n * mean_norm) / (n - 1.0)).max(0.0);
    let mc_bias: GradientVector = mc_mean.iter().zip(truth).map(|(m, t)| m - t).collect();
    Ok(BiasVarianceReport {
        mc_mean,
        mc_bias,
        mc_variance_trace,
        mc_std_errors,
        n_replications: count,
        closed_form_bias: None,
        closed_form_variance_trace: None,
    })
}

/// Convenience: Monte-Carlo moments of the two-stage estimator with
/// environment-derived cluster propensities.
pub fn monte_carlo_potec(
    env: &SyntheticEnvironment,
    overall: &OverallPolicy,
    f: &RewardRegressor,
    truth: &[Real],
    n_per_replication: usize,
    n_replications: usize,
    seed: u64,
) -> Result<BiasVarianceReport> {
    let logging = crate::estimators::EnvLogging(env);
    monte_carlo_moments(
        env,
        truth,
        |d| {
            crate::estimators::potec_pg(
                d,
                &overall.first,
                &overall.second,
                f,
                &env.cluster_map,
                &logging,
            )
        },
        n_per_replication,
        n_replications,
        seed,
    )
}
