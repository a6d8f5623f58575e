//! Reward regression: conventional per-action models, pairwise within-cluster
//! models, cluster-level baselines, their combination, and diagnostics for
//! local correctness (preservation of within-cluster reward differences).

use crate::adam::{AdamHyper, AdamState};
use crate::env::{std_normal, ClusterMap, LoggedDataset, SyntheticEnvironment};
use crate::error::{OplError, Result};
use crate::mlp::Mlp;
use crate::policy::{ActionScorer, SecondStagePolicy};
use crate::Real;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

/// Same-context, same-cluster record pair with both observed rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub context: Vec<Real>,
    pub a: usize,
    pub b: usize,
    pub r_a: Real,
    pub r_b: Real,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PairDataset {
    pub records: Vec<PairRecord>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV export: `ctx_0..ctx_{d-1},a,b,r_a,r_b`.
    pub fn to_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let dim = self.records.first().map(|r| r.context.len()).unwrap_or(0);
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..dim).map(|d| format!("ctx_{d}")).collect();
        header.extend(["a", "b", "r_a", "r_b"].map(String::from));
        wtr.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = r.context.iter().map(|v| format!("{v:e}")).collect();
            row.push(r.a.to_string());
            row.push(r.b.to_string());
            row.push(format!("{:e}", r.r_a));
            row.push(format!("{:e}", r.r_b));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// All unordered pairs of records sharing a bitwise-identical context and the
/// same cluster, each emitted once with a < b. Records that repeat the same
/// action are skipped.
pub fn build_pair_dataset(d: &LoggedDataset, cm: &ClusterMap) -> PairDataset {
    // context identity is exact bit equality; contexts repeat by construction
    let key_of = |ctx: &[Real], c: usize| -> (Vec<u64>, usize) {
        (ctx.iter().map(|v| v.to_bits()).collect(), c)
    };
    let mut groups: HashMap<(Vec<u64>, usize), Vec<usize>> = HashMap::new();
    let mut records = Vec::new();
    for (j, rec) in d.records.iter().enumerate() {
        let c = cm.cluster_of(rec.action);
        let group = groups.entry(key_of(&rec.context, c)).or_default();
        for &i in group.iter() {
            let prev = &d.records[i];
            if prev.action == rec.action {
                continue;
            }
            let (a, b, r_a, r_b) = if prev.action < rec.action {
                (prev.action, rec.action, prev.reward, rec.reward)
            } else {
                (rec.action, prev.action, rec.reward, prev.reward)
            };
            records.push(PairRecord {
                context: rec.context.clone(),
                a,
                b,
                r_a,
                r_b,
            });
        }
        group.push(j);
    }
    PairDataset { records }
}

/// Hyperparameters for the squared-loss regression fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionConfig {
    /// Hidden layer widths of the regression net.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub hyper: AdamHyper<Real>,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            epochs: 30,
            batch_size: 128,
            hyper: AdamHyper::default_fixed(),
            seed: 0,
        }
    }
}

impl RegressionConfig {
    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(1);
        sizes
    }
}

/// A fitted (or fixed) reward model evaluable at every action.
#[derive(Clone, Serialize, Deserialize)]
pub enum RewardRegressor {
    /// q̂(x, a): net on context ⊕ onehot(action).
    Conventional { net: Mlp<Real>, n_actions: usize },
    /// ĥ(x, a): pairwise within-cluster model, same featurization as q̂.
    Pairwise { net: Mlp<Real>, n_actions: usize },
    /// ĝ(x, c): cluster-level baseline; net on context ⊘ onehot(cluster),
    /// evaluated per action through its cluster.
    Baseline {
        net: Mlp<Real>,
        cluster_map: ClusterMap,
    },
    /// f̂(x, a) = ĝ(x, c_a) + ĥ(x, a).
    Combined {
        g: Mlp<Real>,
        h: Mlp<Real>,
        cluster_map: ClusterMap,
    },
    /// Context-independent per-action values (fixtures, numeric examples).
    Tabular { values: Vec<Real> },
    /// The environment's true expected reward.
    Exact { env: Arc<SyntheticEnvironment> },
    /// True expected reward plus frozen noise: constant per-cluster and
    /// per-action offsets, and context-dependent pseudo-noise ε(x,c) ~
    /// N(0, σ_c²) and ε(x,a) ~ N(0, σ_a²) derived deterministically from
    /// `noise_seed` (the same (x, index) always yields the same draw).
    FrozenNoisy {
        env: Arc<SyntheticEnvironment>,
        cluster_offsets: Vec<Real>,
        action_offsets: Vec<Real>,
        sigma_c: Real,
        sigma_a: Real,
        noise_seed: u64,
    },
}

impl RewardRegressor {
    pub fn eval(&self, x: &[Real], a: usize) -> Result<Real> {
        Ok(self.eval_all(x)?[a])
    }

    /// Values at every action. Net-backed kinds reuse the dense-context
    /// first-layer prefix so the sweep costs one forward per distinct one-hot.
    pub fn eval_all(&self, x: &[Real]) -> Result<Vec<Real>> {
        match self {
            RewardRegressor::Conventional { net, n_actions }
            | RewardRegressor::Pairwise { net, n_actions } => {
                let prefix = net.onehot_prefix(x)?;
                (0..*n_actions)
                    .map(|a| Ok(net.forward_from_prefix(&prefix, a)?[0]))
                    .collect()
            }
            RewardRegressor::Baseline { net, cluster_map } => {
                let prefix = net.onehot_prefix(x)?;
                let per_cluster: Vec<Real> = (0..cluster_map.n_clusters())
                    .map(|c| Ok(net.forward_from_prefix(&prefix, c)?[0]))
                    .collect::<Result<_>>()?;
                Ok((0..cluster_map.n_actions())
                    .map(|a| per_cluster[cluster_map.cluster_of(a)])
                    .collect())
            }
            RewardRegressor::Combined { g, h, cluster_map } => {
                let gp = g.onehot_prefix(x)?;
                let per_cluster: Vec<Real> = (0..cluster_map.n_clusters())
                    .map(|c| Ok(g.forward_from_prefix(&gp, c)?[0]))
                    .collect::<Result<_>>()?;
                let hp = h.onehot_prefix(x)?;
                (0..cluster_map.n_actions())
                    .map(|a| {
                        Ok(per_cluster[cluster_map.cluster_of(a)]
                            + h.forward_from_prefix(&hp, a)?[0])
                    })
                    .collect()
            }
            RewardRegressor::Tabular { values } => Ok(values.clone()),
            RewardRegressor::Exact { env } => Ok(env.expected_rewards_all(x)),
            RewardRegressor::FrozenNoisy {
                env,
                cluster_offsets,
                action_offsets,
                sigma_c,
                sigma_a,
                noise_seed,
            } => {
                let q = env.expected_rewards_all(x);
                let cluster_noise: Vec<Real> = (0..env.n_clusters())
                    .map(|c| sigma_c * frozen_gauss(*noise_seed, x, c as u64))
                    .collect();
                Ok(q.iter()
                    .enumerate()
                    .map(|(a, &v)| {
                        let c = env.cluster_map.cluster_of(a);
                        v + cluster_offsets[c]
                            + action_offsets[a]
                            + cluster_noise[c]
                            + sigma_a * frozen_gauss(*noise_seed, x, 0x4000_0000 + a as u64)
                    })
                    .collect())
            }
        }
    }

    /// Compose a cluster baseline with a pairwise model into f̂ = ĝ + ĥ.
    pub fn combine(g: RewardRegressor, h: RewardRegressor) -> Result<RewardRegressor> {
        match (g, h) {
            (
                RewardRegressor::Baseline { net: g, cluster_map },
                RewardRegressor::Pairwise { net: h, n_actions },
            ) => {
                if cluster_map.n_actions() != n_actions {
                    return Err(OplError::Config(format!(
                        "baseline over {} actions, pairwise over {n_actions}",
                        cluster_map.n_actions()
                    )));
                }
                Ok(RewardRegressor::Combined { g, h, cluster_map })
            }
            _ => Err(OplError::Config(
                "combine expects a baseline ĝ and a pairwise ĥ".into(),
            )),
        }
    }
}

impl ActionScorer for RewardRegressor {
    fn action_values(&self, x: &[Real]) -> Result<Vec<Real>> {
        self.eval_all(x)
    }
}

/// Standard-normal draw frozen to (seed, context, index): hashing replaces
/// storage so the noise is an arbitrary deterministic function of (x, index).
fn frozen_gauss(seed: u64, x: &[Real], idx: u64) -> Real {
    let mut h = seed;
    for v in x {
        h = crate::mix_seed(h, v.to_bits());
    }
    let h1 = crate::mix_seed(h, 2 * idx);
    let h2 = crate::mix_seed(h, 2 * idx + 1);
    // Box–Muller on two (0,1) uniforms
    let u1 = (h1 >> 11) as Real / (1u64 << 53) as Real + 1e-17;
    let u2 = (h2 >> 11) as Real / (1u64 << 53) as Real;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// True q plus frozen noise ε(x,c) ~ N(0, σ_c²) and ε(x,a) ~ N(0, σ_a²),
/// fixed once per seed. σ_c-only noise is locally correct (it is a function
/// of (x, c) alone); σ_a noise breaks local correctness.
pub fn make_noisy_regression_model(
    env: Arc<SyntheticEnvironment>,
    sigma_c: Real,
    sigma_a: Real,
    seed: u64,
) -> Result<RewardRegressor> {
    if sigma_c < 0.0 || sigma_a < 0.0 {
        return Err(OplError::Config(format!(
            "noise scales must be nonnegative, got ({sigma_c}, {sigma_a})"
        )));
    }
    let cluster_offsets = vec![0.0; env.n_clusters()];
    let action_offsets = vec![0.0; env.n_actions()];
    Ok(RewardRegressor::FrozenNoisy {
        env,
        sigma_c,
        sigma_a,
        noise_seed: seed,
        cluster_offsets,
        action_offsets,
    })
}

fn onehot_input(ctx: &[Real], hot: usize, width: usize) -> Vec<Real> {
    let mut v = Vec::with_capacity(ctx.len() + width);
    v.extend_from_slice(ctx);
    v.resize(ctx.len() + width, 0.0);
    v[ctx.len() + hot] = 1.0;
    v
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Fit ĥ by minimizing mean squared error between observed reward
/// differences r_a − r_b and predicted differences ĥ(x,a) − ĥ(x,b).
pub fn fit_pairwise(
    p: &PairDataset,
    n_actions: usize,
    cfg: &RegressionConfig,
) -> Result<RewardRegressor> {
    if p.is_empty() {
        return Err(OplError::Config(
            "empty pair dataset: fall back to conventional regression".into(),
        ));
    }
    let dim = p.records[0].context.len();
    let mut net = Mlp::<Real>::new(&cfg.layer_sizes(dim + n_actions), cfg.seed)?;
    let mut adam = AdamState::new(net.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for _ in 0..cfg.epochs {
        let order = shuffled_indices(p.len(), &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; net.n_params()];
            let scale = 1.0 / batch.len() as Real;
            for &i in batch {
                let rec = &p.records[i];
                let va = onehot_input(&rec.context, rec.a, n_actions);
                let vb = onehot_input(&rec.context, rec.b, n_actions);
                let pred = net.forward(&va)?[0] - net.forward(&vb)?[0];
                let coef = 2.0 * (pred - (rec.r_a - rec.r_b)) * scale;
                let ga = net.param_gradient(&va, &[coef])?;
                let gb = net.param_gradient(&vb, &[coef])?;
                for ((acc, a), b) in grad.iter_mut().zip(&ga).zip(&gb) {
                    *acc += a - b;
                }
            }
            adam.step(&mut net.params, &grad, &cfg.hyper)?;
        }
    }
    Ok(RewardRegressor::Pairwise { net, n_actions })
}

/// Fit the cluster baseline ĝ(x, c) to the residual r − ĥ(x, a).
pub fn fit_baseline(
    d: &LoggedDataset,
    h: &RewardRegressor,
    cfg: &RegressionConfig,
) -> Result<RewardRegressor> {
    if d.is_empty() {
        return Err(OplError::Config("empty dataset".into()));
    }
    let cm = d.cluster_map.clone();
    let dim = d.records[0].context.len();
    let nc = cm.n_clusters();
    let targets: Vec<Real> = d
        .records
        .iter()
        .map(|r| Ok(r.reward - h.eval(&r.context, r.action)?))
        .collect::<Result<_>>()?;
    let mut net = Mlp::<Real>::new(&cfg.layer_sizes(dim + nc), cfg.seed)?;
    let mut adam = AdamState::new(net.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for _ in 0..cfg.epochs {
        let order = shuffled_indices(d.len(), &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; net.n_params()];
            let scale = 1.0 / batch.len() as Real;
            for &i in batch {
                let rec = &d.records[i];
                let v = onehot_input(&rec.context, rec.cluster, nc);
                let pred = net.forward(&v)?[0];
                let coef = 2.0 * (pred - targets[i]) * scale;
                let g = net.param_gradient(&v, &[coef])?;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            adam.step(&mut net.params, &grad, &cfg.hyper)?;
        }
    }
    Ok(RewardRegressor::Baseline {
        net,
        cluster_map: cm,
    })
}

/// Conventional regression of observed rewards on (context, action).
pub fn fit_conventional(d: &LoggedDataset, cfg: &RegressionConfig) -> Result<RewardRegressor> {
    if d.is_empty() {
        return Err(OplError::Config("empty dataset".into()));
    }
    let na = d.cluster_map.n_actions();
    let dim = d.records[0].context.len();
    let mut net = Mlp::<Real>::new(&cfg.layer_sizes(dim + na), cfg.seed)?;
    let mut adam = AdamState::new(net.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for _ in 0..cfg.epochs {
        let order = shuffled_indices(d.len(), &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; net.n_params()];
            let scale = 1.0 / batch.len() as Real;
            for &i in batch {
                let rec = &d.records[i];
                let v = onehot_input(&rec.context, rec.action, na);
                let pred = net.forward(&v)?[0];
                let coef = 2.0 * (pred - rec.reward) * scale;
                let g = net.param_gradient(&v, &[coef])?;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            adam.step(&mut net.params, &grad, &cfg.hyper)?;
        }
    }
    Ok(RewardRegressor::Conventional { net, n_actions: na })
}

/// Pairwise-fit feasibility rule: the two-step procedure needs at least
/// 10 × (parameter count of ĥ's last layer) pairs; otherwise fall back to
/// conventional regression.
pub fn pairwise_fallback_needed(n_pairs: usize, h_layer_sizes: &[usize]) -> bool {
    let n = h_layer_sizes.len();
    let last = (h_layer_sizes[n - 2] + 1) * h_layer_sizes[n - 1];
    n_pairs < 10 * last
}

/// Root-mean-squared error of predicted vs observed pairwise differences.
pub fn pair_difference_rmse(f: &dyn ActionScorer, p: &PairDataset) -> Result<Real> {
    if p.is_empty() {
        return Err(OplError::Config("empty pair dataset".into()));
    }
    let mut acc = 0.0;
    for rec in &p.records {
        let v = f.action_values(&rec.context)?;
        let d = (v[rec.a] - v[rec.b]) - (rec.r_a - rec.r_b);
        acc += d * d;
    }
    Ok((acc / p.len() as Real).sqrt())
}

/// Expected f̂ under the second-stage policy: deterministic second stage means
/// f̂ at the chosen action.
pub fn f_cluster_expectation(
    f: &dyn ActionScorer,
    second: &SecondStagePolicy,
    x: &[Real],
    c: usize,
) -> Result<Real> {
    let a = second.choice(x, c)?;
    f.action_values(x).map(|v| v[a])
}

/// Test-only stochastic evaluator: expectation of f̂ under a uniform
/// distribution over the cluster's actions.
pub fn f_cluster_expectation_uniform(
    f: &dyn ActionScorer,
    cm: &ClusterMap,
    x: &[Real],
    c: usize,
) -> Result<Real> {
    let members: Vec<usize> = cm
        .assignment()
        .iter()
        .enumerate()
        .filter(|(_, &cl)| cl == c)
        .map(|(a, _)| a)
        .collect();
    if members.is_empty() {
        return Err(OplError::Contract(format!("cluster {c} has no actions")));
    }
    let v = f.action_values(x)?;
    Ok(members.iter().map(|&a| v[a]).sum::<Real>() / members.len() as Real)
}

/// Max over contexts and same-cluster action pairs of
/// |Δ_q(x,a,b) − Δ_f̂(x,a,b)| where Δ(x,a,b) is the within-pair difference.
/// Zero iff f̂ is locally correct on the evaluated contexts.
pub fn local_correctness_residual(
    f: &dyn ActionScorer,
    env: &SyntheticEnvironment,
    contexts: &[Vec<Real>],
) -> Result<Real> {
    let mut worst = 0.0;
    let members = env.cluster_map.members();
    for x in contexts {
        let q = env.expected_rewards_all(x);
        let fv = f.action_values(x)?;
        for cluster in &members {
            for (i, &a) in cluster.iter().enumerate() {
                for &b in &cluster[i + 1..] {
                    let gap = ((q[a] - q[b]) - (fv[a] - fv[b])).abs();
                    worst = gap.max(worst);
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_synthetic_env, EnvConfig, LoggedRecord, RewardNoise};

    fn logged(records: Vec<LoggedRecord>, cm: ClusterMap) -> LoggedDataset {
        LoggedDataset {
            records,
            cluster_map: cm,
        }
    }

    fn rec(ctx: &[Real], action: usize, cluster: usize, reward: Real) -> LoggedRecord {
        LoggedRecord {
            context: ctx.to_vec(),
            action,
            cluster,
            reward,
            propensity: 0.1,
        }
    }

    #[test]
    fn distinct_contexts_give_empty_pairs() {
        let cm = ClusterMap::new(vec![0, 0, 0], 1).unwrap();
        let d = logged(
            vec![
                rec(&[0.1], 0, 0, 1.0),
                rec(&[0.2], 1, 0, 2.0),
                rec(&[0.3], 2, 0, 3.0),
            ],
            cm.clone(),
        );
        assert!(build_pair_dataset(&d, &cm).is_empty());
    }

    #[test]
    fn single_pair_is_ordered() {
        let cm = ClusterMap::new(vec![0; 8], 1).unwrap();
        let d = logged(
            vec![rec(&[0.5, 0.5], 7, 0, 2.0), rec(&[0.5, 0.5], 3, 0, 9.0)],
            cm.clone(),
        );
        let p = build_pair_dataset(&d, &cm);
        assert_eq!(p.len(), 1);
        let t = &p.records[0];
        assert_eq!((t.a, t.b), (3, 7));
        assert_eq!((t.r_a, t.r_b), (9.0, 2.0));
    }

    #[test]
    fn cross_cluster_and_same_action_pairs_excluded() {
        let cm = ClusterMap::new(vec![0, 0, 1, 1], 2).unwrap();
        let x = [1.0, 2.0];
        let d = logged(
            vec![
                rec(&x, 0, 0, 1.0),
                rec(&x, 2, 1, 2.0), // other cluster
                rec(&x, 0, 0, 3.0), // same action as record 0
                rec(&x, 1, 0, 4.0),
            ],
            cm.clone(),
        );
        let p = build_pair_dataset(&d, &cm);
        // only (0,1) pairs survive: records 0-3 and 2-3
        assert_eq!(p.len(), 2);
        assert!(p.records.iter().all(|t| (t.a, t.b) == (0, 1)));
    }

    #[test]
    fn pair_count_matches_brute_force_enumeration() {
        let env = build_synthetic_env(EnvConfig::new(6, 2).with_dim(3), 3).unwrap();
        let d = env.sample_logged_data(90, 11, 3).unwrap();
        let p = build_pair_dataset(&d, &env.cluster_map);
        // brute force over all index pairs
        let mut count = 0;
        for i in 0..d.len() {
            for j in i + 1..d.len() {
                let (a, b) = (&d.records[i], &d.records[j]);
                if a.context == b.context && a.cluster == b.cluster && a.action != b.action {
                    count += 1;
                }
            }
        }
        assert_eq!(p.len(), count);
        assert!(p.records.iter().all(|t| t.a < t.b));
    }

    /// Pairs from a linear ground-truth h with noiseless rewards; fitting a
    /// linear ĥ must recover the within-cluster differences.
    #[test]
    fn pairwise_fit_recovers_realizable_differences() {
        let dim = 3;
        let na = 6;
        let cm = ClusterMap::new(vec![0, 0, 0, 1, 1, 1], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w: Vec<Real> = (0..dim + na).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let truth = |x: &[Real], a: usize| -> Real {
            let v = onehot_input(x, a, na);
            v.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut make = |n: usize| -> PairDataset {
            let mut records = Vec::new();
            for _ in 0..n {
                let x: Vec<Real> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let c = rng.gen_range(0..2usize);
                let a = 3 * c + rng.gen_range(0..3);
                let mut b = 3 * c + rng.gen_range(0..3);
                while b == a {
                    b = 3 * c + rng.gen_range(0..3);
                }
                let (a, b) = (a.min(b), a.max(b));
                records.push(PairRecord {
                    r_a: truth(&x, a),
                    r_b: truth(&x, b),
                    context: x,
                    a,
                    b,
                });
            }
            PairDataset { records }
        };
        let train = make(600);
        let held_out = make(200);
        let cfg = RegressionConfig {
            hidden: vec![],
            epochs: 300,
            batch_size: 64,
            hyper: AdamHyper::default_fixed().with_lr(0.05).with_weight_decay(0.0),
            seed: 5,
        };
        let h = fit_pairwise(&train, na, &cfg).unwrap();
        let rmse = pair_difference_rmse(&h, &held_out).unwrap();
        assert!(rmse <= 0.05, "held-out pairwise rmse {rmse}");
        let _ = cm;
    }

    #[test]
    fn zero_residual_zero_net_is_a_fixed_point() {
        let p = PairDataset {
            records: vec![PairRecord {
                context: vec![0.3, 0.3],
                a: 0,
                b: 1,
                r_a: 1.0,
                r_b: 1.0,
            }],
        };
        // zero-initialized net: prediction difference 0 matches the target 0,
        // so the gradient (and decoupled decay of zero params) vanishes
        let cfg = RegressionConfig {
            hidden: vec![4],
            epochs: 10,
            batch_size: 8,
            hyper: AdamHyper::default_fixed(),
            seed: 0,
        };
        let mut net = Mlp::<Real>::zeros(&cfg.layer_sizes(2 + 2)).unwrap();
        let mut adam = AdamState::new(net.n_params());
        // replicate one epoch of updates by hand against the fit loop's math
        for _ in 0..5 {
            let rec = &p.records[0];
            let va = onehot_input(&rec.context, rec.a, 2);
            let vb = onehot_input(&rec.context, rec.b, 2);
            let pred = net.forward(&va).unwrap()[0] - net.forward(&vb).unwrap()[0];
            let coef = 2.0 * (pred - (rec.r_a - rec.r_b));
            let ga = net.param_gradient(&va, &[coef]).unwrap();
            let gb = net.param_gradient(&vb, &[coef]).unwrap();
            let grad: Vec<Real> = ga.iter().zip(&gb).map(|(a, b)| a - b).collect();
            adam.step(&mut net.params, &grad, &cfg.hyper).unwrap();
        }
        assert!(net.params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pairwise_loss_is_gauge_invariant() {
        let env = build_synthetic_env(EnvConfig::new(6, 2).with_dim(3), 9).unwrap();
        let d = env.sample_logged_data(60, 2, 3).unwrap();
        let p = build_pair_dataset(&d, &env.cluster_map);
        assert!(!p.is_empty());
        let values: Vec<Real> = (0..6).map(|a| 0.3 * a as Real - 0.7).collect();
        let base = RewardRegressor::Tabular {
            values: values.clone(),
        };
        // shift every cluster by its own constant
        let shifted_values: Vec<Real> = values
            .iter()
            .enumerate()
            .map(|(a, &v)| v + [13.5, -4.2][env.cluster_map.cluster_of(a)])
            .collect();
        let shifted = RewardRegressor::Tabular {
            values: shifted_values,
        };
        let r1 = pair_difference_rmse(&base, &p).unwrap();
        let r2 = pair_difference_rmse(&shifted, &p).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn baseline_residual_free_when_h_is_exact() {
        let mut env = build_synthetic_env(EnvConfig::new(5, 2).with_dim(3), 7).unwrap();
        env.config.reward_noise = RewardNoise::Gaussian { sigma: 0.0 };
        let env = Arc::new(env);
        let d = env.sample_logged_data(400, 21, 1).unwrap();
        let h = RewardRegressor::Exact { env: env.clone() };
        let cfg = RegressionConfig {
            hidden: vec![8],
            epochs: 200,
            batch_size: 64,
            hyper: AdamHyper::default_fixed().with_lr(0.02).with_weight_decay(0.0),
            seed: 3,
        };
        let g = fit_baseline(&d, &h, &cfg).unwrap();
        let held = env.sample_logged_data(100, 99, 1).unwrap();
        let mut acc = 0.0;
        for r in &held.records {
            let v = g.eval(&r.context, r.action).unwrap();
            acc += v * v;
        }
        let rms = (acc / held.len() as Real).sqrt();
        assert!(rms <= 0.05, "residual-free baseline rms {rms}");
    }

    #[test]
    fn baseline_fits_cluster_means_when_h_is_zero() {
        let env = Arc::new(
            SyntheticEnvironment::fixture_constant_q(
                &[2.0, 2.0, 5.0, 5.0],
                &[0, 0, 1, 1],
                2,
                vec![vec![0.1, -0.2], vec![0.4, 0.9], vec![-0.6, 0.3]],
                RewardNoise::Gaussian { sigma: 0.0 },
            )
            .unwrap(),
        );
        let d = env.sample_logged_data(300, 8, 1).unwrap();
        let h = RewardRegressor::Tabular {
            values: vec![0.0; 4],
        };
        let cfg = RegressionConfig {
            hidden: vec![8],
            epochs: 300,
            batch_size: 64,
            hyper: AdamHyper::default_fixed().with_lr(0.02).with_weight_decay(0.0),
            seed: 4,
        };
        let g = fit_baseline(&d, &h, &cfg).unwrap();
        for x in [[0.1, -0.2], [0.4, 0.9], [-0.6, 0.3]] {
            let v = g.eval_all(&x).unwrap();
            assert!((v[0] - 2.0).abs() <= 0.05, "cluster 0 fit {}", v[0]);
            assert!((v[2] - 5.0).abs() <= 0.05, "cluster 1 fit {}", v[2]);
        }
        // combined f̂ = ĝ + ĥ (with the same zero ĥ the baseline was fitted
        // against) leaves a near-zero training-set mean residual per cluster
        let zero_h = RewardRegressor::Pairwise {
            net: Mlp::zeros(&[2 + 4, 1]).unwrap(),
            n_actions: 4,
        };
        let f = RewardRegressor::combine(g, zero_h).unwrap();
        let mut sums = vec![0.0; 2];
        let mut counts = vec![0usize; 2];
        for r in &d.records {
            sums[r.cluster] += r.reward - f.eval(&r.context, r.action).unwrap();
            counts[r.cluster] += 1;
        }
        for c in 0..2 {
            assert!(counts[c] > 0);
            let mean = sums[c] / counts[c] as Real;
            assert!(mean.abs() <= 0.05, "cluster {c} mean residual {mean}");
        }
    }

    #[test]
    fn conventional_fits_constant_rewards() {
        let cm = ClusterMap::new(vec![0, 0, 1], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let records: Vec<LoggedRecord> = (0..200)
            .map(|_| {
                let x: Vec<Real> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let a = rng.gen_range(0..3usize);
                rec(&x, a, cm.cluster_of(a), 0.7)
            })
            .collect();
        let d = logged(records, cm);
        let cfg = RegressionConfig {
            hidden: vec![8],
            epochs: 200,
            batch_size: 64,
            hyper: AdamHyper::default_fixed().with_lr(0.02).with_weight_decay(0.0),
            seed: 1,
        };
        let q = fit_conventional(&d, &cfg).unwrap();
        let mut acc = 0.0;
        let mut n = 0;
        for _ in 0..50 {
            let x: Vec<Real> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for v in q.eval_all(&x).unwrap() {
                acc += (v - 0.7) * (v - 0.7);
                n += 1;
            }
        }
        let rmse = (acc / n as Real).sqrt();
        assert!(rmse <= 0.05, "constant-fit rmse {rmse}");
    }

    #[test]
    fn conventional_handles_single_record() {
        let cm = ClusterMap::new(vec![0, 1], 2).unwrap();
        let d = logged(vec![rec(&[0.5], 1, 1, 3.0)], cm);
        let q = fit_conventional(&d, &RegressionConfig::default()).unwrap();
        let v = q.eval(&[0.5], 1).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn conventional_realizable_linear_with_noise() {
        let dim = 5;
        let na = 20;
        let cm = ClusterMap::new((0..na).map(|a| a % 4).collect(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let w: Vec<Real> = (0..dim + na).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let truth = |x: &[Real], a: usize| -> Real {
            onehot_input(x, a, na)
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum()
        };
        let sigma = 0.1;
        let records: Vec<LoggedRecord> = (0..5000)
            .map(|_| {
                let x: Vec<Real> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let a = rng.gen_range(0..na);
                let r = truth(&x, a) + sigma * std_normal(&mut rng);
                rec(&x, a, cm.cluster_of(a), r)
            })
            .collect();
        let d = logged(records, cm);
        let cfg = RegressionConfig {
            hidden: vec![],
            epochs: 60,
            batch_size: 128,
            hyper: AdamHyper::default_fixed().with_lr(0.05).with_weight_decay(0.0),
            seed: 6,
        };
        let q = fit_conventional(&d, &cfg).unwrap();
        let mut acc = 0.0;
        let mut n = 0;
        for _ in 0..100 {
            let x: Vec<Real> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vals = q.eval_all(&x).unwrap();
            for (a, v) in vals.iter().enumerate() {
                let e = v - truth(&x, a);
                acc += e * e;
                n += 1;
            }
        }
        let rmse = (acc / n as Real).sqrt();
        assert!(rmse <= 2.0 * sigma, "held-out rmse {rmse}");
    }

    #[test]
    fn combined_with_zero_baseline_equals_h() {
        let cm = ClusterMap::new(vec![0, 0, 1], 2).unwrap();
        let h_net = Mlp::<Real>::new(&[2 + 3, 4, 1], 3).unwrap();
        let h = RewardRegressor::Pairwise {
            net: h_net.clone(),
            n_actions: 3,
        };
        let g = RewardRegressor::Baseline {
            net: Mlp::zeros(&[2 + 2, 4, 1]).unwrap(),
            cluster_map: cm,
        };
        let f = RewardRegressor::combine(g, h.clone()).unwrap();
        let x = [0.3, -0.8];
        let fa = f.eval_all(&x).unwrap();
        let ha = h.eval_all(&x).unwrap();
        for (a, b) in fa.iter().zip(&ha) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tabular_fixtures_reproduce_their_rows() {
        for (values, want) in [
            (vec![3.0, 0.0, 1.0, 0.0], [3.0, 0.0, 1.0, 0.0]),
            (vec![50.0, 47.0, -30.0, -31.0], [50.0, 47.0, -30.0, -31.0]),
            (vec![4.0, 1.0, 3.0, 2.0], [4.0, 1.0, 3.0, 2.0]),
        ] {
            let f = RewardRegressor::Tabular { values };
            for (a, w) in want.iter().enumerate() {
                assert_eq!(f.eval(&[0.0], a).unwrap(), *w);
            }
        }
    }

    #[test]
    fn zero_noise_frozen_model_equals_expected_reward() {
        let env = Arc::new(build_synthetic_env(EnvConfig::new(6, 2).with_dim(3), 12).unwrap());
        let f = make_noisy_regression_model(env.clone(), 0.0, 0.0, 4).unwrap();
        let x = [0.2, -0.5, 0.9];
        let q = env.expected_rewards_all(&x);
        let fv = f.eval_all(&x).unwrap();
        for (a, b) in q.iter().zip(&fv) {
            assert_eq!(a, b);
        }
        assert!(make_noisy_regression_model(env, -0.1, 0.0, 0).is_err());
    }

    #[test]
    fn cluster_noise_only_preserves_local_correctness() {
        let env = Arc::new(build_synthetic_env(EnvConfig::new(8, 3).with_dim(3), 15).unwrap());
        let contexts = env.sample_contexts(20, 2);
        let f = make_noisy_regression_model(env.clone(), 1.5, 0.0, 9).unwrap();
        let r = local_correctness_residual(&f, &env, &contexts).unwrap();
        assert!(r < 1e-10, "cluster-only noise residual {r}");
        let g = make_noisy_regression_model(env.clone(), 0.0, 0.5, 9).unwrap();
        let r2 = local_correctness_residual(&g, &env, &contexts).unwrap();
        assert!(r2 > 0.0);
        // matches a from-scratch pair scan
        let mut worst: Real = 0.0;
        for x in &contexts {
            for a in 0..8 {
                for b in (a + 1)..8 {
                    if env.cluster_map.cluster_of(a) != env.cluster_map.cluster_of(b) {
                        continue;
                    }
                    let dq = env.expected_reward(x, a).unwrap()
                        - env.expected_reward(x, b).unwrap();
                    let df = g.eval(x, a).unwrap() - g.eval(x, b).unwrap();
                    worst = worst.max((dq - df).abs());
                }
            }
        }
        assert!((r2 - worst).abs() < 1e-12);
    }

    #[test]
    fn exact_model_has_zero_residual() {
        let env = Arc::new(build_synthetic_env(EnvConfig::new(6, 2).with_dim(3), 18).unwrap());
        let f = RewardRegressor::Exact { env: env.clone() };
        let contexts = env.sample_contexts(10, 3);
        assert_eq!(local_correctness_residual(&f, &env, &contexts).unwrap(), 0.0);
    }

    #[test]
    fn fixture_regressors_are_locally_correct_on_their_instance() {
        // true q = (4,1,3,2), clusters {a0,a1}, {a2,a3}: Δ within clusters are
        // 3 and 1; each fixture preserves them exactly
        let env = SyntheticEnvironment::fixture_constant_q(
            &[4.0, 1.0, 3.0, 2.0],
            &[0, 0, 1, 1],
            2,
            vec![vec![0.0]],
            RewardNoise::Gaussian { sigma: 1.0 },
        )
        .unwrap();
        let contexts = vec![vec![0.0]];
        for values in [
            vec![3.0, 0.0, 1.0, 0.0],
            vec![50.0, 47.0, -30.0, -31.0],
            vec![4.0, 1.0, 3.0, 2.0],
        ] {
            let f = RewardRegressor::Tabular { values };
            let r = local_correctness_residual(&f, &env, &contexts).unwrap();
            assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn gauge_shift_leaves_residual_unchanged() {
        let env = Arc::new(build_synthetic_env(EnvConfig::new(6, 2).with_dim(3), 25).unwrap());
        let contexts = env.sample_contexts(10, 4);
        let f = make_noisy_regression_model(env.clone(), 0.0, 0.8, 2).unwrap();
        let base = local_correctness_residual(&f, &env, &contexts).unwrap();
        // add an arbitrary per-cluster offset on top
        if let RewardRegressor::FrozenNoisy {
            env: e,
            mut cluster_offsets,
            action_offsets,
            sigma_c,
            sigma_a,
            noise_seed,
        } = f
        {
            cluster_offsets[0] += 17.0;
            cluster_offsets[1] -= 3.3;
            let shifted = RewardRegressor::FrozenNoisy {
                env: e.clone(),
                cluster_offsets,
                action_offsets,
                sigma_c,
                sigma_a,
                noise_seed,
            };
            let after = local_correctness_residual(&shifted, &e, &contexts).unwrap();
            assert!((base - after).abs() < 1e-12);
        } else {
            unreachable!();
        }
    }

    #[test]
    fn cluster_expectation_on_numeric_example() {
        // q = (4, 2, 5, 0), clusters {a0,a1}, {a2,a3}
        let env = Arc::new(
            SyntheticEnvironment::fixture_constant_q(
                &[4.0, 2.0, 5.0, 0.0],
                &[0, 0, 1, 1],
                2,
                vec![vec![0.0]],
                RewardNoise::Gaussian { sigma: 1.0 },
            )
            .unwrap(),
        );
        let f = RewardRegressor::Exact { env: env.clone() };
        let second = SecondStagePolicy::new(Arc::new(f.clone()), env.cluster_map.clone());
        let x = [0.0];
        // optimal second stage picks the best action per cluster → (4, 5)
        assert_eq!(f_cluster_expectation(&f, &second, &x, 0).unwrap(), 4.0);
        assert_eq!(f_cluster_expectation(&f, &second, &x, 1).unwrap(), 5.0);
        // uniform second stage → cluster means (3, 2.5)
        assert_eq!(
            f_cluster_expectation_uniform(&f, &env.cluster_map, &x, 0).unwrap(),
            3.0
        );
        assert_eq!(
            f_cluster_expectation_uniform(&f, &env.cluster_map, &x, 1).unwrap(),
            2.5
        );
    }

    #[test]
    fn singleton_cluster_expectation_is_the_single_value() {
        let cm = ClusterMap::identity(3);
        let f = RewardRegressor::Tabular {
            values: vec![7.0, -1.0, 2.5],
        };
        let second = SecondStagePolicy::new(Arc::new(f.clone()), cm.clone());
        for c in 0..3 {
            assert_eq!(
                f_cluster_expectation(&f, &second, &[0.0], c).unwrap(),
                f.eval(&[0.0], c).unwrap()
            );
            assert_eq!(
                f_cluster_expectation_uniform(&f, &cm, &[0.0], c).unwrap(),
                f.eval(&[0.0], c).unwrap()
            );
        }
    }

    #[test]
    fn fallback_rule_thresholds() {
        // last layer of [13, 32, 1] has 33 params → need ≥ 330 pairs
        assert!(pairwise_fallback_needed(329, &[13, 32, 1]));
        assert!(!pairwise_fallback_needed(330, &[13, 32, 1]));
    }

    #[test]
    fn empty_pair_dataset_signals_fallback() {
        let p = PairDataset::default();
        assert!(fit_pairwise(&p, 4, &RegressionConfig::default()).is_err());
    }

    #[test]
    fn pair_dataset_csv_export() {
        let p = PairDataset {
            records: vec![PairRecord {
                context: vec![0.5, -1.0],
                a: 1,
                b: 3,
                r_a: 0.25,
                r_b: 2.0,
            }],
        };
        let mut buf = Vec::new();
        p.to_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), "ctx_0,ctx_1,a,b,r_a,r_b");
        let row = lines.next().unwrap();
        assert!(row.contains(",1,3,"));
    }
}
