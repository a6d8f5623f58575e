//! Gradient-ascent training loops for every method, the full two-stage
//! pipeline (two-step regression then first-stage policy gradient), and the
//! baselines, with learning-curve capture.

use crate::adam::{AdamHyper, AdamState};
use crate::env::{ClusterMap, LoggedDataset, SyntheticEnvironment};
use crate::estimators::{
    dr_pg_at, ips_pg_at, potec_one_stage_pg_at, potec_pg_at, prepare_potec,
    prepare_potec_one_stage, prepare_sips, scorer_rows, sips_pg_at, ActionSelector,
    ClusterPropensities, EnvLogging,
};
use crate::policy::{
    ActionDistribution, ActionScorer, OutcomeSpace, OverallPolicy, RegressorPolicy,
    SecondStagePolicy, SoftmaxPolicy,
};
use crate::reward::{
    build_pair_dataset, fit_baseline, fit_conventional, fit_pairwise, local_correctness_residual,
    pair_difference_rmse, pairwise_fallback_needed, RegressionConfig, RewardRegressor,
};
use crate::{env::policy_value, mix_seed, GradientVector, OplError, Real, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// The gradient estimator driving a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Importance-weighted policy gradient over actions.
    Ips,
    /// Doubly-robust policy gradient over actions.
    Dr,
    /// Selective importance weighting over a relevant-action subset.
    Sips,
    /// Two-stage estimator: cluster policy with cluster importance weights.
    Potec,
    /// One-stage variant: action policy with cluster importance weights.
    Potec1,
}

impl EstimatorKind {
    /// Whether the trained policy lives on clusters rather than actions.
    pub fn cluster_level(self) -> bool {
        matches!(self, EstimatorKind::Potec)
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EstimatorKind::Ips => "ips",
            EstimatorKind::Dr => "dr",
            EstimatorKind::Sips => "sips",
            EstimatorKind::Potec => "potec",
            EstimatorKind::Potec1 => "potec1",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = OplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ips" => Ok(EstimatorKind::Ips),
            "dr" => Ok(EstimatorKind::Dr),
            "sips" => Ok(EstimatorKind::Sips),
            "potec" => Ok(EstimatorKind::Potec),
            "potec1" => Ok(EstimatorKind::Potec1),
            other => Err(OplError::Config(format!(
                "unknown estimator '{other}' (expected ips|dr|sips|potec|potec1)"
            ))),
        }
    }
}

/// Search grids exposed for baseline tuning. The two-stage method itself runs
/// with the fixed defaults in [`TrainConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrids {
    pub weight_decay: Vec<Real>,
    pub learning_rate: Vec<Real>,
    pub batch_size: Vec<usize>,
    /// Relevant-action fractions for the selective estimator.
    pub selector_fraction: Vec<Real>,
}

impl Default for HyperGrids {
    fn default() -> Self {
        Self {
            weight_decay: vec![1e-2, 1e-4, 1e-6],
            learning_rate: vec![1e-3, 5e-4, 1e-4],
            batch_size: vec![64, 128, 256],
            selector_fraction: vec![0.1, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub estimator: EstimatorKind,
    pub learning_rate: Real,
    pub weight_decay: Real,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hidden layer sizes of the policy network.
    pub hidden: Vec<usize>,
    /// Softmax temperature of the trained policy (and of the
    /// regression-based baseline).
    pub temperature: Real,
    /// Relevant-action fraction used by the selective estimator.
    pub sips_fraction: Real,
    pub grids: HyperGrids,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Fixed defaults for the two-stage method: weight decay 1e-4, learning
    /// rate 5e-4, batch size 128.
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Potec,
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 50,
            hidden: vec![32, 32, 32],
            temperature: 1.0,
            sips_fraction: 1.0,
            grids: HyperGrids::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(OplError::Config(format!(
                "learning rate {} must be nonnegative",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(OplError::Config("negative weight decay".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(OplError::Config(
                "batch size and epoch count must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(OplError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(self.sips_fraction > 0.0 && self.sips_fraction <= 1.0) {
            return Err(OplError::Config(format!(
                "selector fraction {} outside (0, 1]",
                self.sips_fraction
            )));
        }
        if self.grids.weight_decay.is_empty()
            || self.grids.learning_rate.is_empty()
            || self.grids.batch_size.is_empty()
            || self.grids.selector_fraction.is_empty()
        {
            return Err(OplError::Config("empty hyperparameter grid".into()));
        }
        Ok(())
    }

    pub fn with_estimator(mut self, estimator: EstimatorKind) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn hyper(&self) -> AdamHyper<Real> {
        AdamHyper::default_fixed()
            .with_lr(self.learning_rate)
            .with_weight_decay(self.weight_decay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    /// Exact test policy value at this epoch.
    pub value: Real,
    /// Mean minibatch gradient norm during the epoch (0 at epoch 0).
    pub grad_norm: Real,
}

/// Per-epoch trajectory of exact policy value and gradient magnitude. The
/// entry at epoch 0 is the untrained policy.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    fn push(&mut self, epoch: usize, value: Real, grad_norm: Real) -> Result<()> {
        if !value.is_finite() || !grad_norm.is_finite() {
            return Err(OplError::Numeric(format!(
                "non-finite curve point at epoch {epoch}: value {value}, grad norm {grad_norm}"
            )));
        }
        if let Some(last) = self.points.last() {
            if epoch <= last.epoch {
                return Err(OplError::Contract(format!(
                    "epoch {epoch} not after {}",
                    last.epoch
                )));
            }
        }
        self.points.push(CurvePoint {
            epoch,
            value,
            grad_norm,
        });
        Ok(())
    }

    pub fn initial_value(&self) -> Real {
        self.points.first().map_or(Real::NAN, |p| p.value)
    }

    pub fn final_value(&self) -> Real {
        self.points.last().map_or(Real::NAN, |p| p.value)
    }

    /// Mean exact value over the last 10% of recorded epochs (at least one).
    pub fn tail_mean_value(&self) -> Real {
        if self.points.is_empty() {
            return Real::NAN;
        }
        let k = (self.points.len() / 10).max(1);
        let tail = &self.points[self.points.len() - k..];
        tail.iter().map(|p| p.value).sum::<Real>() / k as Real
    }

    pub fn to_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["epoch", "value", "grad_norm"])?;
        for p in &self.points {
            wtr.write_record(&[
                p.epoch.to_string(),
                format!("{:.17e}", p.value),
                format!("{:.17e}", p.grad_norm),
            ])?;
        }
        wtr.flush().map_err(OplError::Io)?;
        Ok(())
    }
}

/// Frozen per-estimator inputs for a training run. The policy is the only
/// thing that changes during ascent; everything here stays fixed.
pub enum EstimatorInputs<'a> {
    Ips,
    Dr {
        q_hat: &'a RewardRegressor,
    },
    Sips {
        selector: &'a ActionSelector,
    },
    Potec {
        second: &'a SecondStagePolicy,
        f: &'a RewardRegressor,
        logging: &'a dyn ClusterPropensities,
    },
    Potec1 {
        f: &'a RewardRegressor,
        logging: &'a dyn ClusterPropensities,
    },
}

impl EstimatorInputs<'_> {
    fn kind(&self) -> EstimatorKind {
        match self {
            EstimatorInputs::Ips => EstimatorKind::Ips,
            EstimatorInputs::Dr { .. } => EstimatorKind::Dr,
            EstimatorInputs::Sips { .. } => EstimatorKind::Sips,
            EstimatorInputs::Potec { .. } => EstimatorKind::Potec,
            EstimatorInputs::Potec1 { .. } => EstimatorKind::Potec1,
        }
    }
}

/// Precomputed record-level state, one variant per estimator.
enum Prepared {
    Ips,
    Dr {
        q_rows: Vec<Arc<Vec<Real>>>,
    },
    Sips {
        prep: crate::estimators::SipsPrep,
    },
    Potec {
        prep: crate::estimators::PotecPrep,
    },
    Potec1 {
        prep: crate::estimators::Potec1Prep,
    },
}

impl Prepared {
    fn gradient(
        &self,
        d: &LoggedDataset,
        p: &SoftmaxPolicy,
        indices: &[usize],
    ) -> Result<GradientVector> {
        match self {
            Prepared::Ips => ips_pg_at(d, p, indices),
            Prepared::Dr { q_rows } => dr_pg_at(d, p, q_rows, indices),
            Prepared::Sips { prep } => sips_pg_at(d, p, prep, indices),
            Prepared::Potec { prep } => potec_pg_at(d, p, prep, indices),
            Prepared::Potec1 { prep } => potec_one_stage_pg_at(d, p, prep, indices),
        }
    }
}

fn check_compatible(p: &SoftmaxPolicy, d: &LoggedDataset, kind: EstimatorKind) -> Result<()> {
    match (kind.cluster_level(), p.outcome_space) {
        (true, OutcomeSpace::Clusters(n)) if n == d.cluster_map.n_clusters() => Ok(()),
        (false, OutcomeSpace::Actions(n)) if n == d.cluster_map.n_actions() => Ok(()),
        _ => Err(OplError::Config(format!(
            "estimator {kind} incompatible with a policy over {:?} for {} actions / {} clusters",
            p.outcome_space,
            d.cluster_map.n_actions(),
            d.cluster_map.n_clusters()
        ))),
    }
}

fn exact_value(
    p: &SoftmaxPolicy,
    inputs: &EstimatorInputs<'_>,
    env: &SyntheticEnvironment,
    test_contexts: &[Vec<Real>],
) -> Result<Real> {
    match inputs {
        EstimatorInputs::Potec { second, .. } => {
            let overall = OverallPolicy::new(p.clone(), (*second).clone())?;
            policy_value(env, &overall, test_contexts)
        }
        _ => policy_value(env, p, test_contexts),
    }
}

/// Minibatch gradient *ascent* with decoupled weight decay for a fixed epoch
/// count. Every epoch uses a fresh seeded shuffle; the exact test value is
/// recorded per epoch via full enumeration on `test_contexts`.
pub fn train_policy(
    mut p: SoftmaxPolicy,
    d: &LoggedDataset,
    cfg: &TrainConfig,
    inputs: &EstimatorInputs<'_>,
    env: &SyntheticEnvironment,
    test_contexts: &[Vec<Real>],
) -> Result<(SoftmaxPolicy, LearningCurve)> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(OplError::Config("empty training dataset".into()));
    }
    let kind = inputs.kind();
    if kind != cfg.estimator {
        return Err(OplError::Config(format!(
            "config names estimator {} but inputs are for {kind}",
            cfg.estimator
        )));
    }
    check_compatible(&p, d, kind)?;
    let prepared = match inputs {
        EstimatorInputs::Ips => Prepared::Ips,
        EstimatorInputs::Dr { q_hat } => Prepared::Dr {
            q_rows: scorer_rows(d, *q_hat)?,
        },
        EstimatorInputs::Sips { selector } => Prepared::Sips {
            prep: prepare_sips(d, selector, d.cluster_map.n_actions())?,
        },
        EstimatorInputs::Potec { second, f, logging } => Prepared::Potec {
            // the second stage carries the learner's cluster map, which may
            // deliberately differ from the logging-time map of the dataset
            prep: prepare_potec(d, second, *f, &second.cluster_map, *logging)?,
        },
        EstimatorInputs::Potec1 { f, logging } => Prepared::Potec1 {
            prep: prepare_potec_one_stage(d, *f, &d.cluster_map, *logging)?,
        },
    };
    let hyper = cfg.hyper();
    let mut adam = AdamState::new(p.net.n_params());
    let mut curve = LearningCurve::default();
    curve.push(0, exact_value(&p, inputs, env, test_contexts)?, 0.0)?;
    let mut indices: Vec<usize> = (0..d.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        for i in (1..indices.len()).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        let mut norm_acc = 0.0;
        let mut n_batches = 0usize;
        for batch in indices.chunks(cfg.batch_size) {
            let mut grad = prepared.gradient(d, &p, batch)?;
            norm_acc += grad.iter().map(|g| g * g).sum::<Real>().sqrt();
            n_batches += 1;
            // ascent: Adam descends, so feed the negated gradient
            grad.iter_mut().for_each(|g| *g = -*g);
            adam.step(&mut p.net.params, &grad, &hyper)?;
        }
        curve.push(
            epoch,
            exact_value(&p, inputs, env, test_contexts)?,
            norm_acc / n_batches as Real,
        )?;
    }
    Ok((p, curve))
}

/// The reward model produced by the two-step regression, with the scorer the
/// second stage should rank actions by.
pub struct FittedRewardModel {
    pub f: Arc<RewardRegressor>,
    pub second_scorer: Arc<dyn ActionScorer>,
    pub used_pairwise_fallback: bool,
    pub n_pairs: usize,
    pub pair_rmse: Option<Real>,
}

/// Two-step regression: fit the pairwise model on same-context same-cluster
/// pairs, then regress the residual at cluster level. Falls back to a
/// conventional regression when the pair data cannot support the pairwise
/// fit (fewer than 10× the last-layer parameter count, or no pairs at all).
pub fn fit_two_step(
    d: &LoggedDataset,
    cm: &ClusterMap,
    reg_cfg: &RegressionConfig,
) -> Result<FittedRewardModel> {
    if d.is_empty() {
        return Err(OplError::Config("empty dataset".into()));
    }
    let dim = d.records[0].context.len();
    let na = cm.n_actions();
    let pairs = build_pair_dataset(d, cm);
    let h_layers = reg_cfg.layer_sizes(dim + na);
    if pairs.is_empty() || pairwise_fallback_needed(pairs.len(), &h_layers) {
        let f = Arc::new(fit_conventional(d, reg_cfg)?);
        return Ok(FittedRewardModel {
            second_scorer: f.clone(),
            f,
            used_pairwise_fallback: true,
            n_pairs: pairs.len(),
            pair_rmse: None,
        });
    }
    let h = fit_pairwise(&pairs, na, reg_cfg)?;
    let g = fit_baseline(d, &h, reg_cfg)?;
    let second_scorer: Arc<dyn ActionScorer> = Arc::new(h.clone());
    let f = Arc::new(RewardRegressor::combine(g, h)?);
    let pair_rmse = Some(pair_difference_rmse(f.as_ref(), &pairs)?);
    Ok(FittedRewardModel {
        f,
        second_scorer,
        used_pairwise_fallback: false,
        n_pairs: pairs.len(),
        pair_rmse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotecDiagnostics {
    pub used_pairwise_fallback: bool,
    pub n_pairs: usize,
    /// Pairwise-difference RMSE of f̂ on the pair data (absent on fallback).
    pub pair_rmse: Option<Real>,
    /// Max within-cluster pairwise deviation of f̂ from q on a probe set.
    pub local_correctness_residual: Real,
}

/// The full two-stage pipeline: two-step regression (or an injected reward
/// model), deterministic second stage, then first-stage policy-gradient
/// ascent with the frozen reward model. Nothing retrains during the ascent.
pub fn run_potec(
    d: &LoggedDataset,
    cm: &ClusterMap,
    env: &SyntheticEnvironment,
    cfg: &TrainConfig,
    reg_cfg: &RegressionConfig,
    f_override: Option<Arc<RewardRegressor>>,
    test_contexts: &[Vec<Real>],
) -> Result<(OverallPolicy, LearningCurve, PotecDiagnostics)> {
    if d.is_empty() {
        return Err(OplError::Config("empty dataset".into()));
    }
    let fitted = match f_override {
        Some(f) => FittedRewardModel {
            second_scorer: f.clone(),
            f,
            used_pairwise_fallback: false,
            n_pairs: 0,
            pair_rmse: None,
        },
        None => fit_two_step(d, cm, reg_cfg)?,
    };
    let probe = &test_contexts[..test_contexts.len().min(32)];
    let residual = local_correctness_residual(fitted.f.as_ref(), env, probe)?;
    let second = SecondStagePolicy::new(fitted.second_scorer.clone(), cm.clone());
    let dim = d.records[0].context.len();
    let first = SoftmaxPolicy::fresh(
        dim,
        &cfg.hidden,
        OutcomeSpace::Clusters(cm.n_clusters()),
        mix_seed(cfg.seed, 0xF1),
    )?;
    let cfg = cfg.clone().with_estimator(EstimatorKind::Potec);
    let logging = EnvLogging(env);
    let inputs = EstimatorInputs::Potec {
        second: &second,
        f: fitted.f.as_ref(),
        logging: &logging,
    };
    let (trained, curve) = train_policy(first, d, &cfg, &inputs, env, test_contexts)?;
    let overall = OverallPolicy::new(trained, second)?;
    Ok((
        overall,
        curve,
        PotecDiagnostics {
            used_pairwise_fallback: fitted.used_pairwise_fallback,
            n_pairs: fitted.n_pairs,
            pair_rmse: fitted.pair_rmse,
            local_correctness_residual: residual,
        },
    ))
}

/// A trained policy of any method, evaluable as an action distribution.
pub enum TrainedPolicy {
    Softmax(SoftmaxPolicy),
    Regressor(RegressorPolicy),
    Overall(OverallPolicy),
}

impl ActionDistribution for TrainedPolicy {
    fn action_probs(&self, x: &[Real]) -> Vec<Real> {
        match self {
            TrainedPolicy::Softmax(p) => p.action_probs(x),
            TrainedPolicy::Regressor(p) => p.action_probs(x),
            TrainedPolicy::Overall(p) => p.action_probs(x),
        }
    }
}

/// Baseline methods: greedy-softmax on a fitted regressor, or gradient
/// ascent with one of the action-level estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    RegBased,
    Ips,
    Dr,
    Sips,
    Potec1,
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BaselineMethod::RegBased => "reg_based",
            BaselineMethod::Ips => "ips",
            BaselineMethod::Dr => "dr",
            BaselineMethod::Sips => "sips",
            BaselineMethod::Potec1 => "potec1",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for BaselineMethod {
    type Err = OplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reg_based" => Ok(BaselineMethod::RegBased),
            "ips" => Ok(BaselineMethod::Ips),
            "dr" => Ok(BaselineMethod::Dr),
            "sips" => Ok(BaselineMethod::Sips),
            "potec1" => Ok(BaselineMethod::Potec1),
            other => Err(OplError::Config(format!(
                "unknown baseline '{other}' (expected reg_based|ips|dr|sips|potec1)"
            ))),
        }
    }
}

/// Run one baseline end to end. `q_override` injects a reward model in place
/// of the fitted regression (for the regression-based policy, the
/// doubly-robust model, and the selective estimator's relevance scorer).
pub fn run_baseline(
    method: BaselineMethod,
    d: &LoggedDataset,
    env: &SyntheticEnvironment,
    cfg: &TrainConfig,
    reg_cfg: &RegressionConfig,
    q_override: Option<Arc<RewardRegressor>>,
    test_contexts: &[Vec<Real>],
) -> Result<(TrainedPolicy, LearningCurve)> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(OplError::Config("empty dataset".into()));
    }
    let dim = d.records[0].context.len();
    let na = d.cluster_map.n_actions();
    let fit_q = |seed_shift: u64| -> Result<Arc<RewardRegressor>> {
        match &q_override {
            Some(q) => Ok(q.clone()),
            None => {
                let mut rc = reg_cfg.clone();
                rc.seed = mix_seed(reg_cfg.seed, seed_shift);
                Ok(Arc::new(fit_conventional(d, &rc)?))
            }
        }
    };
    let fresh = |kind: EstimatorKind| -> Result<SoftmaxPolicy> {
        SoftmaxPolicy::fresh(
            dim,
            &cfg.hidden,
            if kind.cluster_level() {
                OutcomeSpace::Clusters(d.cluster_map.n_clusters())
            } else {
                OutcomeSpace::Actions(na)
            },
            mix_seed(cfg.seed, 0xF1),
        )
    };
    match method {
        BaselineMethod::RegBased => {
            let q = fit_q(1)?;
            let policy = RegressorPolicy::new(q, cfg.temperature)?;
            let value = policy_value(env, &policy, test_contexts)?;
            let mut curve = LearningCurve::default();
            curve.push(0, value, 0.0)?;
            Ok((TrainedPolicy::Regressor(policy), curve))
        }
        BaselineMethod::Ips => {
            let cfg = cfg.clone().with_estimator(EstimatorKind::Ips);
            let (p, curve) = train_policy(
                fresh(EstimatorKind::Ips)?,
                d,
                &cfg,
                &EstimatorInputs::Ips,
                env,
                test_contexts,
            )?;
            Ok((TrainedPolicy::Softmax(p), curve))
        }
        BaselineMethod::Dr => {
            let q = fit_q(2)?;
            let cfg = cfg.clone().with_estimator(EstimatorKind::Dr);
            let (p, curve) = train_policy(
                fresh(EstimatorKind::Dr)?,
                d,
                &cfg,
                &EstimatorInputs::Dr { q_hat: q.as_ref() },
                env,
                test_contexts,
            )?;
            Ok((TrainedPolicy::Softmax(p), curve))
        }
        BaselineMethod::Sips => {
            let q = fit_q(3)?;
            let selector = ActionSelector::TopFraction {
                scorer: q,
                fraction: cfg.sips_fraction,
            };
            let cfg = cfg.clone().with_estimator(EstimatorKind::Sips);
            let (p, curve) = train_policy(
                fresh(EstimatorKind::Sips)?,
                d,
                &cfg,
                &EstimatorInputs::Sips {
                    selector: &selector,
                },
                env,
                test_contexts,
            )?;
            Ok((TrainedPolicy::Softmax(p), curve))
        }
        BaselineMethod::Potec1 => {
            let f = match &q_override {
                Some(q) => q.clone(),
                None => fit_two_step(d, &d.cluster_map, reg_cfg)?.f,
            };
            let cfg = cfg.clone().with_estimator(EstimatorKind::Potec1);
            let logging = EnvLogging(env);
            let (p, curve) = train_policy(
                fresh(EstimatorKind::Potec1)?,
                d,
                &cfg,
                &EstimatorInputs::Potec1 {
                    f: f.as_ref(),
                    logging: &logging,
                },
                env,
                test_contexts,
            )?;
            Ok((TrainedPolicy::Softmax(p), curve))
        }
    }
}

/// Checkpoint a trained softmax policy as JSON.
pub fn save_policy_json<W: std::io::Write>(p: &SoftmaxPolicy, w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, p)?;
    Ok(())
}

pub fn load_policy_json<R: std::io::Read>(r: R) -> Result<SoftmaxPolicy> {
    let p: SoftmaxPolicy = serde_json::from_reader(r)?;
    // re-validate the deserialized structure
    SoftmaxPolicy::new(p.net, p.outcome_space, p.temperature)
}
