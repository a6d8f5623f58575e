//! Policy-gradient estimators from logged bandit feedback: vanilla and
//! selective importance weighting, doubly robust correction, and the
//! cluster-weighted two-stage and one-stage estimators, plus exact
//! true-gradient oracles for synthetic environments.
//!
//! Every estimator is an average of per-record terms that are linear in the
//! score function; each record therefore costs one backward pass through the
//! policy net via a combined coefficient vector. Reduction order is fixed
//! (sequential over records) so results are bit-stable per seed.

use crate::env::{ClusterMap, LoggedDataset, LoggedRecord, SyntheticEnvironment};
use crate::error::{OplError, Result};
use crate::policy::{cluster_marginal, ActionScorer, SecondStagePolicy, SoftmaxPolicy};
use crate::{GradientVector, Real};
use std::collections::HashMap;
use std::sync::Arc;

/// Source of logging-policy cluster propensities π_0(c|x) for the
/// cluster-weighted estimators.
pub trait ClusterPropensities: Sync {
    fn cluster_propensity(&self, record: usize, rec: &LoggedRecord, cm: &ClusterMap)
        -> Result<Real>;
}

/// Recompute the exact logging simplex from the environment and marginalize.
pub struct EnvLogging<'a>(pub &'a SyntheticEnvironment);

impl ClusterPropensities for EnvLogging<'_> {
    fn cluster_propensity(
        &self,
        _record: usize,
        rec: &LoggedRecord,
        cm: &ClusterMap,
    ) -> Result<Real> {
        let probs = self.0.logging_policy_probs(&rec.context);
        let marg = cluster_marginal(&probs, cm)?;
        Ok(marg[cm.cluster_of(rec.action)])
    }
}

/// Stored per-record cluster propensities (imported datasets).
pub struct RecordedClusterPropensities(pub Vec<Real>);

impl ClusterPropensities for RecordedClusterPropensities {
    fn cluster_propensity(
        &self,
        record: usize,
        _rec: &LoggedRecord,
        _cm: &ClusterMap,
    ) -> Result<Real> {
        self.0.get(record).copied().ok_or_else(|| {
            OplError::Contract(format!("no stored cluster propensity for record {record}"))
        })
    }
}

/// Per-context relevant-action sets Φ(x) for selective importance weighting.
pub enum ActionSelector {
    /// Keep the top ⌈fraction·|A|⌉ actions ranked by a regressor's values
    /// (ties broken toward lower indices).
    TopFraction {
        scorer: Arc<dyn ActionScorer>,
        fraction: Real,
    },
    /// Oracle selector for synthetic data: actions with true q(x,a) > 0.
    PositiveTrueReward { env: Arc<SyntheticEnvironment> },
}

impl ActionSelector {
    pub fn relevant(&self, x: &[Real], n_actions: usize) -> Result<Vec<bool>> {
        match self {
            ActionSelector::TopFraction { scorer, fraction } => {
                if !(*fraction > 0.0 && *fraction <= 1.0) {
                    return Err(OplError::Config(format!(
                        "selector fraction {fraction} outside (0, 1]"
                    )));
                }
                let values = scorer.action_values(x)?;
                if values.len() != n_actions {
                    return Err(OplError::Contract(format!(
                        "selector scorer returned {} values for {n_actions} actions",
                        values.len()
                    )));
                }
                let k = (fraction * n_actions as Real).ceil() as usize;
                let mut order: Vec<usize> = (0..n_actions).collect();
                order.sort_by(|&i, &j| {
                    values[j].partial_cmp(&values[i]).unwrap().then(i.cmp(&j))
                });
                let mut rel = vec![false; n_actions];
                for &a in order.iter().take(k) {
                    rel[a] = true;
                }
                Ok(rel)
            }
            ActionSelector::PositiveTrueReward { env } => Ok(env
                .expected_rewards_all(x)
                .iter()
                .map(|&q| q > 0.0)
                .collect()),
        }
    }
}

fn check_action_policy(d: &LoggedDataset, p: &SoftmaxPolicy) -> Result<()> {
    if p.n_outcomes() != d.cluster_map.n_actions() {
        return Err(OplError::Contract(format!(
            "policy over {} outcomes for {} actions",
            p.n_outcomes(),
            d.cluster_map.n_actions()
        )));
    }
    Ok(())
}

fn propensity_of(i: usize, rec: &LoggedRecord) -> Result<Real> {
    if rec.propensity > 0.0 {
        Ok(rec.propensity)
    } else {
        Err(OplError::ZeroPropensity {
            record: i,
            detail: format!("stored propensity {}", rec.propensity),
        })
    }
}

fn all_indices(d: &LoggedDataset) -> Vec<usize> {
    (0..d.len()).collect()
}

/// f̂ rows per record, shared between records with bitwise-equal contexts.
pub fn scorer_rows(d: &LoggedDataset, f: &dyn ActionScorer) -> Result<Vec<Arc<Vec<Real>>>> {
    let mut cache: HashMap<Vec<u64>, Arc<Vec<Real>>> = HashMap::new();
    d.records
        .iter()
        .map(|rec| {
            let key: Vec<u64> = rec.context.iter().map(|v| v.to_bits()).collect();
            if let Some(row) = cache.get(&key) {
                return Ok(row.clone());
            }
            let row = Arc::new(f.action_values(&rec.context)?);
            cache.insert(key, row.clone());
            Ok(row)
        })
        .collect()
}

/// Vanilla importance-weighted gradient:
/// (1/n) Σ (π_θ(a_i|x_i)/π_0(a_i|x_i)) · r_i · s_θ(x_i, a_i).
pub fn ips_pg(d: &LoggedDataset, p: &SoftmaxPolicy) -> Result<GradientVector> {
    ips_pg_at(d, p, &all_indices(d))
}

pub fn ips_pg_at(d: &LoggedDataset, p: &SoftmaxPolicy, indices: &[usize]) -> Result<GradientVector> {
    check_action_policy(d, p)?;
    let na = p.n_outcomes();
    let mut grad = vec![0.0; p.net.n_params()];
    for &i in indices {
        let rec = &d.records[i];
        let prop = propensity_of(i, rec)?;
        let probs = p.probs(&rec.context)?;
        let mut coeffs = vec![0.0; na];
        coeffs[rec.action] = probs[rec.action] / prop * rec.reward;
        let g = p.weighted_score_gradient_with_probs(&rec.context, &probs, &coeffs)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let n = indices.len() as Real;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok(grad)
}

/// Doubly robust gradient: importance-weighted residual against q̂ plus the
/// exact model term Σ_a π_θ(a|x)·q̂(x,a)·s_θ(x,a).
pub fn dr_pg(d: &LoggedDataset, p: &SoftmaxPolicy, q_hat: &dyn ActionScorer) -> Result<GradientVector> {
    let rows = scorer_rows(d, q_hat)?;
    dr_pg_at(d, p, &rows, &all_indices(d))
}

pub fn dr_pg_at(
    d: &LoggedDataset,
    p: &SoftmaxPolicy,
    q_rows: &[Arc<Vec<Real>>],
    indices: &[usize],
) -> Result<GradientVector> {
    check_action_policy(d, p)?;
    let mut grad = vec![0.0; p.net.n_params()];
    for &i in indices {
        let rec = &d.records[i];
        let prop = propensity_of(i, rec)?;
        let probs = p.probs(&rec.context)?;
        let q = &q_rows[i];
        let w = probs[rec.action] / prop;
        let mut coeffs: Vec<Real> = probs.iter().zip(q.iter()).map(|(&pk, &qk)| pk * qk).collect();
        coeffs[rec.action] += w * (rec.reward - q[rec.action]);
        let g = p.weighted_score_gradient_with_probs(&rec.context, &probs, &coeffs)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let n = indices.len() as Real;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok(grad)
}

/// Per-record relevant-action sets for the selective estimator, cached per
/// distinct context so training loops pay the selector cost once.
pub struct SipsPrep {
    pub relevant: Vec<Arc<Vec<bool>>>,
}

pub fn prepare_sips(
    d: &LoggedDataset,
    sel: &ActionSelector,
    n_actions: usize,
) -> Result<SipsPrep> {
    let mut cache: HashMap<Vec<u64>, Arc<Vec<bool>>> = HashMap::new();
    let mut relevant = Vec::with_capacity(d.len());
    for rec in &d.records {
        let key: Vec<u64> = rec.context.iter().map(|v| v.to_bits()).collect();
        let rel = match cache.get(&key) {
            Some(r) => r.clone(),
            None => {
                let r = Arc::new(sel.relevant(&rec.context, n_actions)?);
                cache.insert(key, r.clone());
                r
            }
        };
        relevant.push(rel);
    }
    Ok(SipsPrep { relevant })
}

/// Selective importance weighting: the target policy is conditioned on the
/// relevant-action set Φ(x); records whose logged action falls outside Φ
/// contribute zero.
pub fn sips_pg(d: &LoggedDataset, p: &SoftmaxPolicy, sel: &ActionSelector) -> Result<GradientVector> {
    let prep = prepare_sips(d, sel, p.n_outcomes())?;
    sips_pg_at(d, p, &prep, &all_indices(d))
}

pub fn sips_pg_at(
    d: &LoggedDataset,
    p: &SoftmaxPolicy,
    prep: &SipsPrep,
    indices: &[usize],
) -> Result<GradientVector> {
    check_action_policy(d, p)?;
    let na = p.n_outcomes();
    let mut grad = vec![0.0; p.net.n_params()];
    for &i in indices {
        let rec = &d.records[i];
        let prop = propensity_of(i, rec)?;
        let rel = &prep.relevant[i];
        if !rel[rec.action] {
            continue;
        }
        let probs = p.probs(&rec.context)?;
        // conditioning on the full action set is the identity; skipping the
        // renormalization keeps the full-set case bitwise equal to the plain
        // importance-weighted estimator
        let mass: Real = if rel.iter().all(|&r| r) {
            1.0
        } else {
            probs
                .iter()
                .zip(rel.iter())
                .filter(|(_, &r)| r)
                .map(|(&p, _)| p)
                .sum()
        };
        let mut coeffs = vec![0.0; na];
        coeffs[rec.action] = (probs[rec.action] / mass) / prop * rec.reward;
        let g = p.weighted_score_gradient_with_probs(&rec.context, &probs, &coeffs)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let n = indices.len() as Real;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok(grad)
}

/// Policy-independent per-record quantities for the two-stage estimator,
/// computed once and reused across training minibatches.
pub struct PotecPrep {
    pub cm: ClusterMap,
    /// Logged cluster per record (under `cm`, which may differ from the
    /// dataset's logging-time map in cluster-noise ablations).
    pub cluster: Vec<usize>,
    /// π_0(c_i|x_i).
    pub pi0: Vec<Real>,
    /// f̂(x_i, a_i).
    pub f_logged: Vec<Real>,
    /// Per record: f̂ at each cluster's second-stage choice.
    pub f_choice: Vec<Arc<Vec<Real>>>,
}

pub fn prepare_potec(
    d: &LoggedDataset,
    second: &SecondStagePolicy,
    f: &dyn ActionScorer,
    cm: &ClusterMap,
    logging: &dyn ClusterPropensities,
) -> Result<PotecPrep> {
    let mut cache: HashMap<Vec<u64>, (Arc<Vec<Real>>, Arc<Vec<Real>>)> = HashMap::new();
    let mut cluster = Vec::with_capacity(d.len());
    let mut pi0 = Vec::with_capacity(d.len());
    let mut f_logged = Vec::with_capacity(d.len());
    let mut f_choice = Vec::with_capacity(d.len());
    for (i, rec) in d.records.iter().enumerate() {
        let key: Vec<u64> = rec.context.iter().map(|v| v.to_bits()).collect();
        let (f_all, choice_vals) = match cache.get(&key) {
            Some(v) => v.clone(),
            None => {
                let f_all = Arc::new(f.action_values(&rec.context)?);
                let choices = second.choices_all(&rec.context)?;
                let vals = Arc::new(choices.iter().map(|&a| f_all[a]).collect::<Vec<_>>());
                cache.insert(key, (f_all.clone(), vals.clone()));
                (f_all, vals)
            }
        };
        let c = cm.cluster_of(rec.action);
        let p0 = logging.cluster_propensity(i, rec, cm)?;
        if p0 <= 0.0 {
            return Err(OplError::ZeroPropensity {
                record: i,
                detail: format!("cluster {c} has logging marginal {p0}"),
            });
        }
        cluster.push(c);
        pi0.push(p0);
        f_logged.push(f_all[rec.action]);
        f_choice.push(choice_vals);
    }
    Ok(PotecPrep {
        cm: cm.clone(),
        cluster,
        pi0,
        f_logged,
        f_choice,
    })
}

/// Two-stage gradient for the first-stage cluster policy:
/// (1/n) Σ { w(x_i,c_i)·(r_i − f̂(x_i,a_i))·s_θ(x_i,c_i)
///          + Σ_c π_θ(c|x_i)·f̂(x_i, choice(x_i,c))·s_θ(x_i,c) }.
pub fn potec_pg(
    d: &LoggedDataset,
    first: &SoftmaxPolicy,
    second: &SecondStagePolicy,
    f: &dyn ActionScorer,
    cm: &ClusterMap,
    logging: &dyn ClusterPropensities,
) -> Result<GradientVector> {
    let prep = prepare_potec(d, second, f, cm, logging)?;
    potec_pg_at(d, first, &prep, &all_indices(d))
}

pub fn potec_pg_at(
    d: &LoggedDataset,
    first: &SoftmaxPolicy,
    prep: &PotecPrep,
    indices: &[usize],
) -> Result<GradientVector> {
    let nc = prep.cm.n_clusters();
    if first.n_outcomes() != nc {
        return Err(OplError::Contract(format!(
            "first-stage policy over {} outcomes for {nc} clusters",
            first.n_outcomes()
        )));
    }
    let mut grad = vec![0.0; first.net.n_params()];
    for &i in indices {
        let rec = &d.records[i];
        let probs = first.probs(&rec.context)?;
        let c = prep.cluster[i];
        let w = probs[c] / prep.pi0[i];
        let mut coeffs: Vec<Real> = probs
            .iter()
            .zip(prep.f_choice[i].iter())
            .map(|(&pc, &fc)| pc * fc)
            .collect();
        coeffs[c] += w * (rec.reward - prep.f_logged[i]);
        let g = first.weighted_score_gradient_with_probs(&rec.context, &probs, &coeffs)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let n = indices.len() as Real;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok(grad)
}

/// Policy-independent per-record quantities for the one-stage variant.
pub struct Potec1Prep {
    pub cm: ClusterMap,
    pub cluster: Vec<usize>,
    pub pi0: Vec<Real>,
    /// f̂(x_i, ·) over all actions.
    pub f_rows: Vec<Arc<Vec<Real>>>,
}

pub fn prepare_potec_one_stage(
    d: &LoggedDataset,
    f: &dyn ActionScorer,
    cm: &ClusterMap,
    logging: &dyn ClusterPropensities,
) -> Result<Potec1Prep> {
    let f_rows = scorer_rows(d, f)?;
    let mut cluster = Vec::with_capacity(d.len());
    let mut pi0 = Vec::with_capacity(d.len());
    for (i, rec) in d.records.iter().enumerate() {
        let c = cm.cluster_of(rec.action);
        let p0 = logging.cluster_propensity(i, rec, cm)?;
        if p0 <= 0.0 {
            return Err(OplError::ZeroPropensity {
                record: i,
                detail: format!("cluster {c} has logging marginal {p0}"),
            });
        }
        cluster.push(c);
        pi0.push(p0);
    }
    Ok(Potec1Prep {
        cm: cm.clone(),
        cluster,
        pi0,
        f_rows,
    })
}

/// One-stage variant: an action policy learned directly with cluster
/// importance weights on the residual plus the exact model term.
pub fn potec_one_stage_pg(
    d: &LoggedDataset,
    p: &SoftmaxPolicy,
    f: &dyn ActionScorer,
    cm: &ClusterMap,
    logging: &dyn ClusterPropensities,
) -> Result<GradientVector> {
    let prep = prepare_potec_one_stage(d, f, cm, logging)?;
    potec_one_stage_pg_at(d, p, &prep, &all_indices(d))
}

pub fn potec_one_stage_pg_at(
    d: &LoggedDataset,
    p: &SoftmaxPolicy,
    prep: &Potec1Prep,
    indices: &[usize],
) -> Result<GradientVector> {
    check_action_policy(d, p)?;
    let mut grad = vec![0.0; p.net.n_params()];
    for &i in indices {
        let rec = &d.records[i];
        let probs = p.probs(&rec.context)?;
        let marg = cluster_marginal(&probs, &prep.cm)?;
        let c = prep.cluster[i];
        let w = marg[c] / prep.pi0[i];
        let f_row = &prep.f_rows[i];
        let mut coeffs: Vec<Real> = probs
            .iter()
            .zip(f_row.iter())
            .map(|(&pk, &fk)| pk * fk)
            .collect();
        coeffs[rec.action] += w * (rec.reward - f_row[rec.action]);
        let g = p.weighted_score_gradient_with_probs(&rec.context, &probs, &coeffs)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let n = indices.len() as Real;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok(grad)
}

/// Exact first-stage gradient over a finite context set:
/// (1/|X|) Σ_x Σ_c π_θ(c|x)·q(x, choice(x,c))·s_θ(x,c), with q from the
/// environment.
pub fn true_first_stage_gradient(
    env: &SyntheticEnvironment,
    first: &SoftmaxPolicy,
    second: &SecondStagePolicy,
    contexts: &[Vec<Real>],
) -> Result<GradientVector> {
    if contexts.is_empty() {
        return Err(OplError::Config("empty context set".into()));
    }
    let mut grad = vec![0.0; first.net.n_params()];
    for x in contexts {
        let probs = first.probs(x)?;
        let q = env.expected_rewards_all(x);
        let choices = second.choices_all(x)?;
        let coeffs: Vec<Real> = probs
            .iter()
            .zip(&choices)
            .map(|(&pc, &a)| pc * q[a])
            .collect();
        let g = first.weighted_score_gradient_with_probs(x, &probs, &coeffs)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let n = contexts.len() as Real;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok(grad)
}

/// Exact action-policy gradient over a finite context set:
/// (1/|X|) Σ_x Σ_a π_θ(a|x)·q(x,a)·s_θ(x,a).
pub fn true_action_gradient(
    env: &SyntheticEnvironment,
    p: &SoftmaxPolicy,
    contexts: &[Vec<Real>],
) -> Result<GradientVector> {
    if contexts.is_empty() {
        return Err(OplError::Config("empty context set".into()));
    }
    let mut grad = vec![0.0; p.net.n_params()];
    for x in contexts {
        let probs = p.probs(x)?;
        let q = env.expected_rewards_all(x);
        let coeffs: Vec<Real> = probs.iter().zip(&q).map(|(&pa, &qa)| pa * qa).collect();
        let g = p.weighted_score_gradient_with_probs(x, &probs, &coeffs)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let n = contexts.len() as Real;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok(grad)
}
