//! Experiment harness: configuration files, seeded sweeps over environment
//! parameters, bootstrap summaries, and the commands behind the CLI verbs.

use crate::env::{
    build_synthetic_env, policy_value, ContextSpec, EnvConfig, RewardNoise, SyntheticEnvironment,
};
use crate::mlp::Mlp;
use crate::policy::{ActionDistribution, OutcomeSpace, SoftmaxPolicy};
use crate::reward::{make_noisy_regression_model, RegressionConfig, RewardRegressor};
use crate::trainer::{BaselineMethod, TrainConfig, TrainedPolicy};
use crate::{mix_seed, OplError, Real, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "OPL_OUT_DIR";

pub fn default_out_dir() -> std::path::PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(Into::into)
        .unwrap_or_else(|| "results".into())
}

/// The environment parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweptParam {
    /// Training set size.
    N,
    NActions,
    NClusters,
    /// Logging-policy inverse temperature.
    Beta,
    /// Fraction of actions whose cluster assignment is scrambled in the map
    /// given to the learner.
    ClusterNoise,
    /// Number of actions removed from logging support.
    NUnsupported,
    /// Injected reward-model noise at cluster level (locally correct).
    SigmaC,
    /// Injected reward-model noise at action level (locally incorrect).
    SigmaA,
}

impl std::fmt::Display for SweptParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SweptParam::N => "n",
            SweptParam::NActions => "n_actions",
            SweptParam::NClusters => "n_clusters",
            SweptParam::Beta => "beta",
            SweptParam::ClusterNoise => "cluster_noise",
            SweptParam::NUnsupported => "n_unsupported",
            SweptParam::SigmaC => "sigma_c",
            SweptParam::SigmaA => "sigma_a",
        };
        f.write_str(s)
    }
}

/// A method a sweep can run: the two-stage pipeline or one of the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Potec,
    RegBased,
    Ips,
    Dr,
    Sips,
    Potec1,
}

impl Method {
    fn as_baseline(self) -> Option<BaselineMethod> {
        match self {
            Method::Potec => None,
            Method::RegBased => Some(BaselineMethod::RegBased),
            Method::Ips => Some(BaselineMethod::Ips),
            Method::Dr => Some(BaselineMethod::Dr),
            Method::Sips => Some(BaselineMethod::Sips),
            Method::Potec1 => Some(BaselineMethod::Potec1),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Potec => "potec",
            Method::RegBased => "reg_based",
            Method::Ips => "ips",
            Method::Dr => "dr",
            Method::Sips => "sips",
            Method::Potec1 => "potec1",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = OplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "potec" => Ok(Method::Potec),
            "reg_based" => Ok(Method::RegBased),
            "ips" => Ok(Method::Ips),
            "dr" => Ok(Method::Dr),
            "sips" => Ok(Method::Sips),
            "potec1" => Ok(Method::Potec1),
            other => Err(OplError::Config(format!(
                "unknown method '{other}' (expected potec|reg_based|ips|dr|sips|potec1)"
            ))),
        }
    }
}

/// Environment section of an experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub n_actions: usize,
    pub n_clusters: usize,
    pub context_dim: usize,
    pub logging_beta: Real,
    pub reward_noise: RewardNoise,
    pub effect_scale: Real,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            n_actions: 2000,
            n_clusters: 30,
            context_dim: 10,
            logging_beta: 1.0,
            reward_noise: RewardNoise::Gaussian { sigma: 1.0 },
            effect_scale: 1.0,
        }
    }
}

/// Sweep section: what to vary, over which values, and the fixed defaults
/// used when a parameter is not the swept one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub param: SweptParam,
    pub values: Vec<Real>,
    pub n_seeds: usize,
    pub master_seed: u64,
    /// Training set size when `param` is not `n`.
    pub n_train: usize,
    /// Fresh contexts for exact test-value evaluation.
    pub n_test_contexts: usize,
    /// Consecutive logged records sharing one context (pairwise data).
    pub repeats_per_context: usize,
    pub cluster_noise: Real,
    pub n_unsupported: usize,
    /// Replace fitted regressions with the true reward plus frozen noise
    /// (σ_c at cluster level, σ_a at action level).
    pub inject_model_noise: bool,
    pub sigma_c: Real,
    pub sigma_a: Real,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            param: SweptParam::N,
            values: vec![500.0, 1000.0, 2000.0, 4000.0],
            n_seeds: 10,
            master_seed: 0,
            n_train: 4000,
            n_test_contexts: 10_000,
            repeats_per_context: 5,
            cluster_noise: 0.0,
            n_unsupported: 0,
            inject_model_noise: false,
            sigma_c: 0.0,
            sigma_a: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodsSection {
    pub list: Vec<Method>,
}

impl Default for MethodsSection {
    fn default() -> Self {
        Self {
            list: vec![
                Method::Potec,
                Method::RegBased,
                Method::Ips,
                Method::Dr,
            ],
        }
    }
}

/// Full experiment configuration, loadable from a structured text file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub sweep: SweepSection,
    pub methods: MethodsSection,
    pub train: TrainConfig,
    pub regression: RegressionConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweep.values.is_empty() {
            return Err(OplError::Config("empty sweep value list".into()));
        }
        if self.methods.list.is_empty() {
            return Err(OplError::Config("empty method list".into()));
        }
        if self.sweep.n_seeds == 0 {
            return Err(OplError::Config("n_seeds must be ≥ 1".into()));
        }
        if self.sweep.n_train == 0 || self.sweep.n_test_contexts == 0 {
            return Err(OplError::Config(
                "n_train and n_test_contexts must be positive".into(),
            ));
        }
        if self.env.n_actions == 0 || self.env.n_clusters == 0 {
            return Err(OplError::Config("need ≥ 1 action and cluster".into()));
        }
        self.train.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)
            .map_err(|e| OplError::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }
}

/// Documented configuration template written by the `init` command. Parses
/// back into [`ExperimentConfig::default`].
pub fn config_template() -> String {
    r#"# Experiment configuration. Every field shown here is the default; delete
# anything you do not want to override.

[env]
n_actions = 2000
n_clusters = 30
context_dim = 10
# logging-policy inverse temperature (0 = uniform logging)
logging_beta = 1.0
# reward law: { kind = "gaussian", sigma = 1.0 } or { kind = "bernoulli" }
reward_noise = { kind = "gaussian", sigma = 1.0 }
# multiplier on the expected-reward landscape; values below 1 compress the
# gaps between cluster values so fixed-size model noise matters more
effect_scale = 1.0

[sweep]
# one of: n, n_actions, n_clusters, beta, cluster_noise, n_unsupported,
# sigma_c, sigma_a
param = "n"
values = [500.0, 1000.0, 2000.0, 4000.0]
n_seeds = 10
master_seed = 0
# training set size when "n" is not the swept parameter
n_train = 4000
# fresh contexts for exact test-value evaluation
n_test_contexts = 10000
# consecutive logged records sharing one context (pairwise regression data)
repeats_per_context = 5
# fraction of actions with a scrambled cluster assignment for the learner
cluster_noise = 0.0
# actions removed from logging support (cluster support is preserved)
n_unsupported = 0
# replace fitted regressions with true reward + frozen noise
inject_model_noise = false
sigma_c = 0.0
sigma_a = 0.0

[methods]
list = ["potec", "reg_based", "ips", "dr"]

[train]
estimator = "potec"
learning_rate = 5e-4
weight_decay = 1e-4
batch_size = 128
epochs = 50
hidden = [32, 32, 32]
temperature = 1.0
sips_fraction = 1.0
seed = 0

[train.grids]
weight_decay = [1e-2, 1e-4, 1e-6]
learning_rate = [1e-3, 5e-4, 1e-4]
batch_size = [64, 128, 256]
selector_fraction = [0.1, 0.5, 1.0]

[regression]
hidden = [32]
epochs = 30
batch_size = 128
seed = 0

[regression.hyper]
learning_rate = 5e-4
beta1 = 0.9
beta2 = 0.999
epsilon = 1e-8
weight_decay = 1e-4
"#
    .to_string()
}

/// One (method, swept value, seed) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub swept_value: Real,
    pub seed: u64,
    /// Exact test value of the trained policy.
    pub raw_value: Real,
    /// Exact test value of the logging policy (the normalizer).
    pub logging_value: Real,
    /// raw_value / logging_value.
    pub normalized_value: Real,
    /// Failure message when the run did not produce a policy.
    pub error: Option<String>,
}

pub fn write_results_csv<W: std::io::Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "method",
        "swept_value",
        "seed",
        "raw_value",
        "logging_value",
        "normalized_value",
        "error",
    ])?;
    for r in rows {
        wtr.write_record(&[
            r.method.clone(),
            format!("{:.17e}", r.swept_value),
            r.seed.to_string(),
            format!("{:.17e}", r.raw_value),
            format!("{:.17e}", r.logging_value),
            format!("{:.17e}", r.normalized_value),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush().map_err(OplError::Io)?;
    Ok(())
}

pub fn read_results_csv<R: std::io::Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(OplError::Config(format!(
                "result row with {} fields, expected 7",
                rec.len()
            )));
        }
        let field = |i: usize| -> Result<Real> {
            rec[i]
                .parse()
                .map_err(|_| OplError::Config(format!("bad number '{}'", &rec[i])))
        };
        rows.push(ResultRow {
            method: rec[0].to_string(),
            swept_value: field(1)?,
            seed: rec[2]
                .parse()
                .map_err(|_| OplError::Config(format!("bad seed '{}'", &rec[2])))?,
            raw_value: field(3)?,
            logging_value: field(4)?,
            normalized_value: field(5)?,
            error: if rec[6].is_empty() {
                None
            } else {
                Some(rec[6].to_string())
            },
        });
    }
    Ok(rows)
}

/// The logging policy as an evaluable action distribution.
struct LoggingDistribution<'a>(&'a SyntheticEnvironment);

impl ActionDistribution for LoggingDistribution<'_> {
    fn action_probs(&self, x: &[Real]) -> Vec<Real> {
        self.0.logging_policy_probs(x)
    }
}

/// Resolved per-cell parameters after applying the swept value.
struct CellParams {
    n_train: usize,
    env_cfg: EnvConfig,
    cluster_noise: Real,
    n_unsupported: usize,
    inject_model_noise: bool,
    sigma_c: Real,
    sigma_a: Real,
}

fn cell_params(cfg: &ExperimentConfig, value: Real) -> Result<CellParams> {
    let s = &cfg.sweep;
    let mut p = CellParams {
        n_train: s.n_train,
        env_cfg: EnvConfig {
            n_actions: cfg.env.n_actions,
            n_clusters: cfg.env.n_clusters,
            context_dim: cfg.env.context_dim,
            logging_beta: cfg.env.logging_beta,
            reward_noise: cfg.env.reward_noise,
            context_spec: ContextSpec::Continuous,
            effect_scale: cfg.env.effect_scale,
        },
        cluster_noise: s.cluster_noise,
        n_unsupported: s.n_unsupported,
        inject_model_noise: s.inject_model_noise,
        sigma_c: s.sigma_c,
        sigma_a: s.sigma_a,
    };
    let as_count = |name: &str| -> Result<usize> {
        if value < 0.0 || value.fract() != 0.0 {
            return Err(OplError::Config(format!(
                "swept {name} value {value} is not a nonnegative integer"
            )));
        }
        Ok(value as usize)
    };
    match s.param {
        SweptParam::N => p.n_train = as_count("n")?,
        SweptParam::NActions => p.env_cfg.n_actions = as_count("n_actions")?,
        SweptParam::NClusters => p.env_cfg.n_clusters = as_count("n_clusters")?,
        SweptParam::Beta => p.env_cfg.logging_beta = value,
        SweptParam::ClusterNoise => p.cluster_noise = value,
        SweptParam::NUnsupported => p.n_unsupported = as_count("n_unsupported")?,
        SweptParam::SigmaC => {
            p.inject_model_noise = true;
            p.sigma_c = value;
        }
        SweptParam::SigmaA => {
            p.inject_model_noise = true;
            p.sigma_a = value;
        }
    }
    Ok(p)
}

/// Run every method of one (value, seed) cell. The cell owns its RNG streams,
/// derived from (master seed, value, seed) only, so rows are independent of
/// whatever else the sweep contains.
fn run_cell(cfg: &ExperimentConfig, value: Real, seed: u64) -> Vec<ResultRow> {
    let row_err = |method: Method, msg: String| ResultRow {
        method: method.to_string(),
        swept_value: value,
        seed,
        raw_value: Real::NAN,
        logging_value: Real::NAN,
        normalized_value: Real::NAN,
        error: Some(msg),
    };
    let cell_seed = mix_seed(mix_seed(cfg.sweep.master_seed, value.to_bits()), seed);
    let setup = || -> Result<_> {
        let p = cell_params(cfg, value)?;
        let mut env = build_synthetic_env(p.env_cfg.clone(), mix_seed(cell_seed, 1))?;
        if p.n_unsupported > 0 {
            env = env.restrict_support(p.n_unsupported, mix_seed(cell_seed, 2))?;
        }
        let d = env.sample_logged_data(
            p.n_train,
            mix_seed(cell_seed, 3),
            cfg.sweep.repeats_per_context,
        )?;
        let test_contexts = env.sample_contexts(cfg.sweep.n_test_contexts, mix_seed(cell_seed, 4));
        let learner_cm = if p.cluster_noise > 0.0 {
            env.cluster_map.perturb(p.cluster_noise, mix_seed(cell_seed, 5))?
        } else {
            env.cluster_map.clone()
        };
        let model_override: Option<Arc<RewardRegressor>> = if p.inject_model_noise {
            Some(Arc::new(make_noisy_regression_model(
                Arc::new(env.clone()),
                p.sigma_c,
                p.sigma_a,
                mix_seed(cell_seed, 6),
            )?))
        } else {
            None
        };
        let logging_value = policy_value(&env, &LoggingDistribution(&env), &test_contexts)?;
        if !(logging_value > 0.0) {
            return Err(OplError::Contract(format!(
                "logging policy value {logging_value} is not positive; cannot normalize"
            )));
        }
        Ok((env, d, test_contexts, learner_cm, model_override, logging_value))
    };
    let (env, d, test_contexts, learner_cm, model_override, logging_value) = match setup() {
        Ok(v) => v,
        Err(e) => {
            return cfg
                .methods
                .list
                .iter()
                .map(|&m| row_err(m, e.to_string()))
                .collect()
        }
    };
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = mix_seed(cell_seed, 7);
    let mut reg_cfg = cfg.regression.clone();
    reg_cfg.seed = mix_seed(cell_seed, 8);
    cfg.methods
        .list
        .iter()
        .map(|&method| {
            let run = || -> Result<Real> {
                let policy: TrainedPolicy = match method.as_baseline() {
                    None => {
                        let mut potec_cfg =
                            train_cfg.clone().with_estimator(crate::trainer::EstimatorKind::Potec);
                        potec_cfg.weight_decay = 1e-4;
                        potec_cfg.learning_rate = 5e-4;
                        potec_cfg.batch_size = 128;
                        let (overall, _, _) = crate::trainer::run_potec(
                            &d,
                            &learner_cm,
                            &env,
                            &potec_cfg,
                            &reg_cfg,
                            model_override.clone(),
                            &test_contexts,
                        )?;
                        TrainedPolicy::Overall(overall)
                    }
                    Some(b) => {
                        crate::trainer::run_baseline(
                            b,
                            &d,
                            &env,
                            &train_cfg,
                            &reg_cfg,
                            model_override.clone(),
                            &test_contexts,
                        )?
                        .0
                    }
                };
                policy_value(&env, &policy, &test_contexts)
            };
            match run() {
                Ok(raw) => ResultRow {
                    method: method.to_string(),
                    swept_value: value,
                    seed,
                    raw_value: raw,
                    logging_value,
                    normalized_value: raw / logging_value,
                    error: None,
                },
                Err(e) => row_err(method, e.to_string()),
            }
        })
        .collect()
}

/// Execute the full sweep. Cells run in parallel; rows come back in the
/// deterministic (value, seed, method) order regardless of thread count.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let cells: Vec<(Real, u64)> = cfg
        .sweep
        .values
        .iter()
        .flat_map(|&v| (0..cfg.sweep.n_seeds as u64).map(move |s| (v, s)))
        .collect();
    let rows: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(value, seed)| run_cell(cfg, value, seed))
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Per-(method, swept value) mean with a seeded percentile-bootstrap
/// confidence interval over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub swept_value: Real,
    pub n_runs: usize,
    pub mean_normalized: Real,
    pub ci_lower: Real,
    pub ci_upper: Real,
}

pub fn summarize(
    rows: &[ResultRow],
    confidence: Real,
    n_resamples: usize,
    seed: u64,
) -> Result<Vec<SummaryRow>> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(OplError::Config(format!(
            "confidence {confidence} outside (0, 1)"
        )));
    }
    if n_resamples == 0 {
        return Err(OplError::Config("need ≥ 1 bootstrap resample".into()));
    }
    // group by (method, value) in order of first appearance
    let mut order: Vec<(String, u64)> = Vec::new();
    let mut groups: std::collections::HashMap<(String, u64), Vec<Real>> =
        std::collections::HashMap::new();
    for r in rows {
        if r.error.is_some() {
            continue;
        }
        let key = (r.method.clone(), r.swept_value.to_bits());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.normalized_value);
    }
    if order.is_empty() {
        return Err(OplError::Config(
            "no successful rows to summarize".into(),
        ));
    }
    let alpha = 1.0 - confidence;
    let mut out = Vec::with_capacity(order.len());
    for (group_idx, key) in order.iter().enumerate() {
        let vals = &groups[key];
        let n = vals.len();
        let mean = vals.iter().sum::<Real>() / n as Real;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, group_idx as u64));
        let mut means: Vec<Real> = (0..n_resamples)
            .map(|_| {
                let mut acc = 0.0;
                for _ in 0..n {
                    acc += vals[rng.gen_range(0..n)];
                }
                acc / n as Real
            })
            .collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = |q: Real| -> usize {
            (((n_resamples - 1) as Real * q).round() as usize).min(n_resamples - 1)
        };
        out.push(SummaryRow {
            method: key.0.clone(),
            swept_value: Real::from_bits(key.1),
            n_runs: n,
            mean_normalized: mean,
            ci_lower: means[idx(alpha / 2.0)],
            ci_upper: means[idx(1.0 - alpha / 2.0)],
        });
    }
    Ok(out)
}

pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "method",
        "swept_value",
        "n_runs",
        "mean_normalized",
        "ci_lower",
        "ci_upper",
    ])?;
    for r in rows {
        wtr.write_record(&[
            r.method.clone(),
            format!("{:.17e}", r.swept_value),
            r.n_runs.to_string(),
            format!("{:.17e}", r.mean_normalized),
            format!("{:.17e}", r.ci_lower),
            format!("{:.17e}", r.ci_upper),
        ])?;
    }
    wtr.flush().map_err(OplError::Io)?;
    Ok(())
}

/// Write the configuration template. Refuses to clobber an existing file
/// unless `force` is set.
pub fn cmd_init(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(OplError::Config(format!(
            "{} already exists (use --force to overwrite)",
            path.display()
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, config_template())?;
    Ok(())
}

/// Run a sweep and write `results.csv` and `summary.csv` under `out_dir`.
/// `jobs` bounds the worker pool (default: all cores). Returns the rows;
/// callers decide how to surface per-row failures.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    jobs: Option<usize>,
) -> Result<Vec<ResultRow>> {
    let rows = match jobs {
        Some(j) if j > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| OplError::Config(format!("worker pool: {e}")))?
            .install(|| run_sweep(cfg))?,
        _ => run_sweep(cfg)?,
    };
    std::fs::create_dir_all(out_dir)?;
    let f = std::fs::File::create(out_dir.join("results.csv"))?;
    write_results_csv(&rows, f)?;
    if rows.iter().any(|r| r.error.is_none()) {
        let summary = summarize(&rows, 0.95, 10_000, cfg.sweep.master_seed)?;
        let f = std::fs::File::create(out_dir.join("summary.csv"))?;
        write_summary_csv(&summary, f)?;
    }
    Ok(rows)
}

pub fn cmd_summarize(results_path: &Path, out_path: Option<&Path>) -> Result<Vec<SummaryRow>> {
    let f = std::fs::File::open(results_path)?;
    let rows = read_results_csv(f)?;
    let summary = summarize(&rows, 0.95, 10_000, 0)?;
    if let Some(out) = out_path {
        let f = std::fs::File::create(out)?;
        write_summary_csv(&summary, f)?;
    }
    Ok(summary)
}

/// One verification check: name, outcome, and a one-line detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, body: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match body() {
        Ok((passed, detail)) => CheckResult {
            name: name.to_string(),
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name: name.to_string(),
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Fast self-verification battery: estimator reduction identities, the
/// closed-form bias/variance oracles against exhaustive enumeration, and a
/// Monte-Carlo unbiasedness check. Runs in seconds.
pub fn cmd_verify() -> Vec<CheckResult> {
    use crate::estimators::{dr_pg, ips_pg, potec_pg, true_first_stage_gradient, EnvLogging};
    use crate::oracle::{
        enumerate_single_record_moments, monte_carlo_potec, potec_bias_closed_form,
        potec_variance_closed_form,
    };
    use crate::policy::{OverallPolicy, SecondStagePolicy};

    let make_env = |seed: u64| -> Result<Arc<SyntheticEnvironment>> {
        Ok(Arc::new(build_synthetic_env(
            EnvConfig::new(6, 3)
                .with_dim(2)
                .with_beta(0.8)
                .with_noise(RewardNoise::Gaussian { sigma: 0.5 })
                .with_context_spec(ContextSpec::DiscreteRandom { n_contexts: 3 }),
            seed,
        )?))
    };
    let make_overall = |env: &Arc<SyntheticEnvironment>,
                        f: &RewardRegressor,
                        seed: u64|
     -> Result<OverallPolicy> {
        let first = SoftmaxPolicy::fresh(
            env.context_dim(),
            &[4],
            OutcomeSpace::Clusters(env.n_clusters()),
            seed,
        )?;
        let second = SecondStagePolicy::new(Arc::new(f.clone()), env.cluster_map.clone());
        OverallPolicy::new(first, second)
    };
    let contexts_of = |env: &SyntheticEnvironment| -> Vec<Vec<Real>> {
        match &env.context_mode {
            crate::env::ContextMode::Discrete { contexts, .. } => contexts.clone(),
            _ => unreachable!(),
        }
    };
    let max_abs_diff = |a: &[Real], b: &[Real]| -> Real {
        a.iter()
            .zip(b)
            .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
    };

    vec![
        check("reduction: zero-model doubly-robust equals plain weighting", || {
            let env = make_env(11)?;
            let d = env.sample_logged_data(200, 12, 1)?;
            let p = SoftmaxPolicy::fresh(env.context_dim(), &[4], OutcomeSpace::Actions(6), 13)?;
            let zero = RewardRegressor::Tabular {
                values: vec![0.0; 6],
            };
            let gap = max_abs_diff(&dr_pg(&d, &p, &zero)?, &ips_pg(&d, &p)?);
            Ok((gap <= 1e-12, format!("max gap {gap:.2e} (tol 1e-12)")))
        }),
        check("bias oracle equals exhaustive enumeration minus true gradient", || {
            let env = make_env(21)?;
            let f = make_noisy_regression_model(env.clone(), 0.3, 0.6, 22)?;
            let overall = make_overall(&env, &f, 23)?;
            let bias = potec_bias_closed_form(&env, &overall, &f)?;
            let logging = EnvLogging(&env);
            let (mean, _) = enumerate_single_record_moments(&env, |d| {
                potec_pg(d, &overall.first, &overall.second, &f, &env.cluster_map, &logging)
            })?;
            let truth = true_first_stage_gradient(
                &env,
                &overall.first,
                &overall.second,
                &contexts_of(&env),
            )?;
            let expect: Vec<Real> = mean.iter().zip(&truth).map(|(m, t)| m - t).collect();
            let gap = max_abs_diff(&bias, &expect);
            Ok((gap <= 1e-10, format!("max gap {gap:.2e} (tol 1e-10)")))
        }),
        check("variance oracle equals exhaustive single-record trace", || {
            let env = make_env(31)?;
            let f = make_noisy_regression_model(env.clone(), 0.5, 0.0, 32)?;
            let overall = make_overall(&env, &f, 33)?;
            let cf = potec_variance_closed_form(&env, &overall, &f)?;
            let logging = EnvLogging(&env);
            let (_, trace) = enumerate_single_record_moments(&env, |d| {
                potec_pg(d, &overall.first, &overall.second, &f, &env.cluster_map, &logging)
            })?;
            let gap = (cf - trace).abs();
            Ok((gap <= 1e-10, format!("|{cf:.4e} − {trace:.4e}| = {gap:.2e}")))
        }),
        check("two-stage estimator unbiased under local correctness (Monte Carlo)", || {
            let env = make_env(41)?;
            let f = make_noisy_regression_model(env.clone(), 0.5, 0.0, 42)?;
            let overall = make_overall(&env, &f, 43)?;
            let truth = true_first_stage_gradient(
                &env,
                &overall.first,
                &overall.second,
                &contexts_of(&env),
            )?;
            let report = monte_carlo_potec(&env, &overall, &f, &truth, 1, 40_000, 44)?;
            Ok((
                report.bias_within(3.0),
                format!(
                    "max |bias|/SE over {} replications: see summary\n{}",
                    report.n_replications,
                    report.summary().trim_end()
                ),
            ))
        }),
    ]
}

/// Gradient check report: network parameter gradients and policy score
/// functions against central finite differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub n_cases: usize,
    pub max_relative_error: Real,
    pub tolerance: Real,
    pub passed: bool,
}

pub fn cmd_gradcheck(seed: u64, n_cases: usize) -> Result<GradcheckReport> {
    const STEP: Real = 1e-6;
    const TOL: Real = 1e-5;
    if n_cases == 0 {
        return Err(OplError::Config("need ≥ 1 gradient-check case".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Real = 0.0;
    for case in 0..n_cases {
        let d_in = rng.gen_range(1..=4);
        let hidden = rng.gen_range(1..=5);
        let d_out = rng.gen_range(1..=4);
        let net = Mlp::<Real>::new(&[d_in, hidden, d_out], mix_seed(seed, case as u64))?;
        let x: Vec<Real> = (0..d_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let upstream: Vec<Real> = (0..d_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // network parameter gradient of Σ_j upstream_j · output_j
        let analytic = net.param_gradient(&x, &upstream)?;
        let scalar = |net: &Mlp<Real>| -> Result<Real> {
            Ok(net
                .forward(&x)?
                .iter()
                .zip(&upstream)
                .map(|(o, u)| o * u)
                .sum())
        };
        let scale = analytic
            .iter()
            .fold(0.0_f64, |m, g| m.max(g.abs()))
            .max(1.0);
        for i in 0..net.n_params() {
            let mut plus = net.clone();
            plus.params[i] += STEP;
            let mut minus = net.clone();
            minus.params[i] -= STEP;
            let fd = (scalar(&plus)? - scalar(&minus)?) / (2.0 * STEP);
            worst = worst.max((fd - analytic[i]).abs() / scale);
        }
        // policy score function: gradient of ln π(outcome|x)
        let p = SoftmaxPolicy::new(net, OutcomeSpace::Actions(d_out), 1.0)?;
        let outcome = rng.gen_range(0..d_out);
        let score = p.score_function(&x, outcome)?;
        let log_prob = |p: &SoftmaxPolicy| -> Result<Real> { Ok(p.probs(&x)?[outcome].ln()) };
        let scale = score.iter().fold(0.0_f64, |m, g| m.max(g.abs())).max(1.0);
        for i in 0..p.net.n_params() {
            let mut plus = p.clone();
            plus.net.params[i] += STEP;
            let mut minus = p.clone();
            minus.net.params[i] -= STEP;
            let fd = (log_prob(&plus)? - log_prob(&minus)?) / (2.0 * STEP);
            worst = worst.max((fd - score[i]).abs() / scale);
        }
    }
    Ok(GradcheckReport {
        n_cases,
        max_relative_error: worst,
        tolerance: TOL,
        passed: worst <= TOL,
    })
}
