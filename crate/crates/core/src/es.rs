//! Evolution strategy on a deterministic MLP policy.
//!
//! The objective is smoothed as `E_ε F(θ + σε)` and its gradient estimated
//! as `(1/(Nσ)) Σ_k F_k ε_k` from perturbed rollouts. Each perturbation is
//! identified by a seed alone, so a worker can rebuild ε from the seed and
//! return a single scalar. Fitness values are reduced in task order, which
//! makes results independent of the number of worker threads.
//!
//! Nothing here differentiates through the network.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{AllocationAudit, EnvConfig, EnvError, Environment, PortfolioWeights};
use crate::market_data::FeatureCube;
use crate::neural::{es_mlp_forward, init_params, Activation, ArchSpec, GradientVector, NetError, NetworkParams};
use crate::pgac::DayRange;
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum EsError {
    #[error("invalid ES configuration: {0}")]
    Config(String),
    #[error("need at least two fitness values, got {0}")]
    TooFewSamples(usize),
    #[error("{fitness} fitness values for {tasks} tasks")]
    Mismatch { fitness: usize, tasks: usize },
    #[error("non-finite fitness at task {0}")]
    NonFinite(usize),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsConfig {
    pub sigma: f64,
    pub population: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub antithetic: bool,
    pub rank_shaping: bool,
    /// Rollout cap in environment steps.
    pub max_steps: usize,
    /// Use `ln(p_T/p_0)` instead of `p_T/p_0` as fitness.
    pub log_fitness: bool,
    pub hidden: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            population: 64,
            learning_rate: 0.02,
            iterations: 300,
            antithetic: true,
            rank_shaping: true,
            max_steps: 50,
            log_fitness: false,
            hidden: 32,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<(), EsError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(EsError::Config("sigma must be positive".into()));
        }
        if self.population < 2 {
            return Err(EsError::Config("population must be at least 2".into()));
        }
        if self.antithetic && !self.population.is_multiple_of(2) {
            return Err(EsError::Config("antithetic sampling needs an even population".into()));
        }
        if self.max_steps < 1 {
            return Err(EsError::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything a worker needs to evaluate one perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerTask {
    /// Iteration whose parameter snapshot is perturbed.
    pub snapshot: usize,
    pub seed: u64,
    /// +1 or −1.
    pub sign: i8,
}

/// The population for one iteration; antithetic pairs are adjacent.
pub fn schedule_tasks(config: &EsConfig, iteration: usize) -> Vec<WorkerTask> {
    let noise_seed = |k: usize| seed::derive(config.seed, &[seed::stream::ES_NOISE, iteration as u64, k as u64]);
    if config.antithetic {
        (0..config.population / 2)
            .flat_map(|k| {
                let s = noise_seed(k);
                [1i8, -1].map(|sign| WorkerTask {
                    snapshot: iteration,
                    seed: s,
                    sign,
                })
            })
            .collect()
    } else {
        (0..config.population)
            .map(|k| WorkerTask {
                snapshot: iteration,
                seed: noise_seed(k),
                sign: 1,
            })
            .collect()
    }
}

/// Standard normal noise vector rebuilt from `seed`.
pub fn noise(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `θ + sign·σ·ε(seed)` on a flat vector.
pub fn perturb_flat(theta: &[f64], seed: u64, sign: i8, sigma: f64) -> Vec<f64> {
    let scale = f64::from(sign) * sigma;
    theta
        .iter()
        .zip(noise(seed, theta.len()))
        .map(|(t, e)| t + scale * e)
        .collect()
}

pub fn perturb(params: &NetworkParams, seed: u64, sign: i8, sigma: f64) -> Result<NetworkParams, EsError> {
    Ok(NetworkParams::from_flat(
        *params.arch(),
        perturb_flat(params.flat(), seed, sign, sigma),
    )?)
}

/// Centered ranks in `[-0.5, 0.5]` (ties share their mean rank), or raw
/// fitness minus the batch mean.
pub fn shape_fitness(fitness: &[f64], rank_shaping: bool) -> Vec<f64> {
    let n = fitness.len();
    if !rank_shaping {
        let mean = fitness.iter().sum::<f64>() / n as f64;
        return fitness.iter().map(|f| f - mean).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && fitness[order[j + 1]] == fitness[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    let denom = (n - 1) as f64;
    ranks.iter().map(|r| r / denom - 0.5).collect()
}

/// `ĝ = (1/(Nσ)) Σ_k shaped(F_k)·sign_k·ε_k`, summed in task order.
pub fn es_gradient(
    fitness: &[f64],
    tasks: &[WorkerTask],
    dim: usize,
    sigma: f64,
    rank_shaping: bool,
) -> Result<GradientVector, EsError> {
    if fitness.len() != tasks.len() {
        return Err(EsError::Mismatch {
            fitness: fitness.len(),
            tasks: tasks.len(),
        });
    }
    if fitness.len() < 2 {
        return Err(EsError::TooFewSamples(fitness.len()));
    }
    if let Some(k) = fitness.iter().position(|f| !f.is_finite()) {
        return Err(EsError::NonFinite(k));
    }
    let shaped = shape_fitness(fitness, rank_shaping);
    let mut grad = vec![0.0; dim];
    let mut k = 0;
    while k < tasks.len() {
        // adjacent tasks with the same seed share one noise draw
        let mut weight = shaped[k] * f64::from(tasks[k].sign);
        let mut j = k + 1;
        while j < tasks.len() && tasks[j].seed == tasks[k].seed {
            weight += shaped[j] * f64::from(tasks[j].sign);
            j += 1;
        }
        if weight != 0.0 {
            for (g, e) in grad.iter_mut().zip(noise(tasks[k].seed, dim)) {
                *g += weight * e;
            }
        }
        k = j;
    }
    let scale = 1.0 / (fitness.len() as f64 * sigma);
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(GradientVector(grad))
}

/// Noise-free allocation from the MLP given the current state.
pub fn act(
    params: &NetworkParams,
    state: &crate::market_data::StateTensor,
    prev: &[f64],
) -> Result<PortfolioWeights, EsError> {
    let out = es_mlp_forward(state, prev, params)?;
    let risky: Vec<f64> = out.output()[1..].iter().map(|x| x.clamp(-1.0, 1.0)).collect();
    Ok(PortfolioWeights::complete(&risky)?)
}

/// Runs at most `max_steps` deterministic steps from a freshly reset
/// environment and returns `p_T / p_0` (0 after a wipe-out).
pub fn rollout_return(
    mut env: Environment<'_>,
    mut state: crate::market_data::StateTensor,
    params: &NetworkParams,
    max_steps: usize,
) -> Result<(f64, AllocationAudit), EsError> {
    for _ in 0..max_steps {
        if env.is_done() {
            break;
        }
        let prev = env.previous_action().as_slice().to_vec();
        let action = act(params, &state, &prev)?;
        state = env.step(&action)?.state;
    }
    Ok((env.p(), *env.audit()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsHistoryRow {
    pub iteration: usize,
    pub mean_fitness: f64,
    pub best_fitness: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EsHistory {
    pub rows: Vec<EsHistoryRow>,
    pub audit: AllocationAudit,
}

impl EsHistory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,mean_fitness,best_fitness,grad_norm")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                r.iteration, r.mean_fitness, r.best_fitness, r.grad_norm
            )?;
        }
        Ok(())
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, EsError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| EsError::Pool(e.to_string()))
}

/// Generic ES ascent on a flat parameter vector. `fitness` is evaluated on
/// `workers` threads (0 = rayon default); results do not depend on it.
pub fn optimize<F>(
    theta: Vec<f64>,
    config: &EsConfig,
    workers: usize,
    fitness: F,
) -> Result<(Vec<f64>, EsHistory), EsError>
where
    F: Fn(&[f64]) -> Result<(f64, AllocationAudit), EsError> + Sync,
{
    config.validate()?;
    let pool = pool(workers)?;
    let mut theta = theta;
    let mut history = EsHistory::default();
    for iteration in 0..config.iterations {
        let tasks = schedule_tasks(config, iteration);
        let snapshot = &theta;
        let results = pool.install(|| {
            tasks
                .par_iter()
                .map(|t| fitness(&perturb_flat(snapshot, t.seed, t.sign, config.sigma)))
                .collect::<Result<Vec<_>, _>>()
        })?;
        let mut values = Vec::with_capacity(results.len());
        for (f, audit) in results {
            history.audit.merge(&audit);
            values.push(if config.log_fitness { f.max(1e-12).ln() } else { f });
        }
        let grad = es_gradient(&values, &tasks, theta.len(), config.sigma, config.rank_shaping)?;
        for (t, g) in theta.iter_mut().zip(&grad.0) {
            *t += config.learning_rate * g;
        }
        history.rows.push(EsHistoryRow {
            iteration,
            mean_fitness: values.iter().sum::<f64>() / values.len() as f64,
            best_fitness: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            grad_norm: grad.norm(),
        });
    }
    Ok((theta, history))
}

/// First day of the ES rollout window: the most recent `max_steps` steps of
/// the training range.
pub fn rollout_start(range: DayRange, horizon: usize, max_steps: usize) -> usize {
    range.last.saturating_sub(max_steps).max(range.first).max(horizon)
}

pub fn initial_params(
    n_assets: usize,
    n_features: usize,
    horizon: usize,
    config: &EsConfig,
) -> Result<NetworkParams, EsError> {
    let arch = ArchSpec::es_mlp(n_assets, horizon, n_features, config.hidden).with_activation(config.activation);
    Ok(init_params(
        arch,
        seed::derive(config.seed, &[seed::stream::INIT_POLICY]),
    )?)
}

/// Trains the MLP policy on the most recent `max_steps` days of `range`.
pub fn train_es(
    cube: &FeatureCube,
    env_config: &EnvConfig,
    config: &EsConfig,
    range: DayRange,
    workers: usize,
) -> Result<(NetworkParams, EsHistory), EsError> {
    config.validate()?;
    if range.last >= cube.n_days() {
        return Err(EsError::Config(format!(
            "training range {range:?} exceeds {} days",
            cube.n_days()
        )));
    }
    let start = rollout_start(range, env_config.horizon, config.max_steps);
    if start >= range.last {
        return Err(EsError::Config(format!(
            "training range {range:?} leaves no steps after horizon {}",
            env_config.horizon
        )));
    }
    let init = initial_params(cube.n_assets(), cube.n_features(), env_config.horizon, config)?;
    let arch = *init.arch();
    let env_config = EnvConfig {
        episode_cap: Some(config.max_steps),
        ..env_config.clone()
    };
    let fitness = |theta: &[f64]| {
        let params = NetworkParams::from_flat(arch, theta.to_vec())?;
        let (env, state) = Environment::reset_window(cube, env_config.clone(), start, range.last)?;
        rollout_return(env, state, &params, config.max_steps)
    };
    let (theta, history) = optimize(init.into_flat(), config, workers, fitness)?;
    Ok((NetworkParams::from_flat(arch, theta)?, history))
}
