//! Policy-gradient actor-critic with a Gaussian policy around the CNN mean.
//!
//! Each update samples a batch of episodes from `N(μ_θ(s), diag(σ²))`, fits the
//! value net to the undiscounted reward-to-go, forms one-step advantages
//! `r + V(s') − V(s)` and ascends `mean_t ∇_θ ln π(a_t|s_t) · Â_t`.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{AllocationAudit, EnvConfig, EnvError, Environment, PortfolioWeights};
use crate::market_data::{FeatureCube, StateTensor};
use crate::neural::{
    backward, init_params, policy_cnn_forward, value_cnn_forward, Activation, ArchSpec, ForwardRecord, GradientVector,
    NetError, NetworkParams,
};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum PgacError {
    #[error("exploration scale must be positive, got {0}")]
    ZeroSigma(f64),
    #[error("non-finite {what} at update {update}")]
    NonFinite { what: &'static str, update: usize },
    #[error("no trajectories to learn from")]
    Empty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl From<crate::market_data::DataError> for PgacError {
    fn from(e: crate::market_data::DataError) -> Self {
        PgacError::Env(e.into())
    }
}

/// Linear decay of the exploration scale from `initial` to `last`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    /// Updates over which σ decays; `None` spreads the decay over the whole run.
    pub decay_updates: Option<usize>,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            last: 0.01,
            decay_updates: None,
        }
    }
}

impl SigmaSchedule {
    pub fn at(&self, update: usize, total_updates: usize) -> f64 {
        let horizon = self.decay_updates.unwrap_or(total_updates.saturating_sub(1)).max(1);
        let frac = (update as f64 / horizon as f64).min(1.0);
        self.initial + (self.last - self.initial) * frac
    }
}

/// Policy net plus diagonal exploration scale over the risky assets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: NetworkParams,
    pub sigma: Vec<f64>,
    pub schedule: SigmaSchedule,
}

impl GaussianPolicy {
    pub fn new(net: NetworkParams, schedule: SigmaSchedule) -> Self {
        let n = net.arch().assets;
        Self {
            net,
            sigma: vec![schedule.initial; n - 1],
            schedule,
        }
    }

    pub fn mean(&self, state: &StateTensor, prev: &[f64]) -> Result<ForwardRecord, NetError> {
        policy_cnn_forward(state, prev, &self.net)
    }

    /// Noise-free allocation: risky slots from the mean, riskless as residual.
    pub fn act_deterministic(&self, state: &StateTensor, prev: &[f64]) -> Result<PortfolioWeights, PgacError> {
        let rec = self.mean(state, prev)?;
        let risky: Vec<f64> = rec.output()[1..].iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        Ok(PortfolioWeights::complete(&risky)?)
    }
}

/// Pre-clamp draw and the executed allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    pub raw: Vec<f64>,
    pub weights: PortfolioWeights,
}

/// Draws `a = μ + σ ⊙ z`, clamps each component to `[-1, 1]` and completes
/// the weights with the riskless residual.
pub fn sample_action<R: Rng + ?Sized>(mu: &[f64], sigma: &[f64], rng: &mut R) -> Result<SampledAction, PgacError> {
    let raw: Vec<f64> = mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| {
            let z: f64 = StandardNormal.sample(rng);
            m + s * z
        })
        .collect();
    let clamped: Vec<f64> = raw.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
    Ok(SampledAction {
        weights: PortfolioWeights::complete(&clamped)?,
        raw,
    })
}

/// `ln N(a; μ, diag σ²)`.
pub fn log_prob(mu: &[f64], action: &[f64], sigma: &[f64]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    mu.iter()
        .zip(action)
        .zip(sigma)
        .map(|((m, a), s)| {
            let u = (a - m) / s;
            -0.5 * u * u - s.ln() - half_ln_2pi
        })
        .sum()
}

/// `∇_θ ln π(a|s)`: `Σ⁻¹(a − μ)` back-propagated through the policy net.
/// `action` holds the risky components only; the riskless output slot gets
/// zero upstream gradient.
pub fn log_prob_grad(
    params: &NetworkParams,
    record: &ForwardRecord,
    action: &[f64],
    sigma: &[f64],
) -> Result<GradientVector, PgacError> {
    if let Some(&s) = sigma.iter().find(|s| s.is_nan() || **s <= 0.0) {
        return Err(PgacError::ZeroSigma(s));
    }
    let mu = &record.output()[1..];
    let mut upstream = vec![0.0];
    upstream.extend(mu.iter().zip(action).zip(sigma).map(|((m, a), s)| (a - m) / (s * s)));
    Ok(backward(params, record, &upstream)?)
}

/// One environment transition as seen by the learner.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub state: StateTensor,
    pub prev_weights: Vec<f64>,
    /// Pre-clamp risky action.
    pub action: Vec<f64>,
    pub executed: PortfolioWeights,
    pub reward: f64,
    pub next_state: StateTensor,
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    steps: Vec<StepRecord>,
    returns: Vec<f64>,
    final_value: f64,
}

impl Trajectory {
    /// Builds the trajectory and its undiscounted reward-to-go.
    pub fn new(steps: Vec<StepRecord>, final_value: f64) -> Self {
        let mut returns = vec![0.0; steps.len()];
        let mut acc = 0.0;
        for (k, s) in steps.iter().enumerate().rev() {
            acc += s.reward;
            returns[k] = acc;
        }
        Self {
            steps,
            returns,
            final_value,
        }
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn total_reward(&self) -> f64 {
        self.returns.first().copied().unwrap_or(0.0)
    }

    pub fn final_value(&self) -> f64 {
        self.final_value
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn value_of(state: &StateTensor, value: &NetworkParams) -> Result<f64, NetError> {
    Ok(value_cnn_forward(state, value)?.output()[0])
}

/// `Â = r + V(s') − V(s)`, with `V(s') = 0` at terminal steps.
pub fn advantage(step: &StepRecord, value: &NetworkParams) -> Result<f64, PgacError> {
    let next = if step.terminal {
        0.0
    } else {
        value_of(&step.next_state, value)?
    };
    Ok(step.reward + next - value_of(&step.state, value)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueFit {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ValueFit {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 1e-3,
        }
    }
}

fn ordered_sum(len: usize, grads: Vec<GradientVector>) -> GradientVector {
    let mut total = GradientVector::zeros(len);
    for g in &grads {
        total.add_scaled(1.0, g);
    }
    total
}

fn value_mse(samples: &[(&StateTensor, f64)], value: &NetworkParams) -> Result<f64, NetError> {
    let errs = samples
        .par_iter()
        .map(|(s, g)| value_of(s, value).map(|v| (v - g) * (v - g)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Full-batch gradient descent of `mean ½(V(s_t) − G_t)²` over all visited
/// states. Returns the updated parameters and the final mean squared error.
pub fn fit_value(
    trajectories: &[Trajectory],
    value: &NetworkParams,
    fit: &ValueFit,
) -> Result<(NetworkParams, f64), PgacError> {
    let samples: Vec<(&StateTensor, f64)> = trajectories
        .iter()
        .flat_map(|t| t.steps.iter().zip(&t.returns).map(|(s, g)| (&s.state, *g)))
        .collect();
    if samples.is_empty() {
        return Err(PgacError::Empty);
    }
    let inv_n = 1.0 / samples.len() as f64;
    let mut params = value.clone();
    for epoch in 0..fit.epochs {
        let grads = samples
            .par_iter()
            .map(|(s, g)| {
                let rec = value_cnn_forward(s, &params)?;
                backward(&params, &rec, &[(rec.output()[0] - g) * inv_n])
            })
            .collect::<Result<Vec<_>, _>>()?;
        let grad = ordered_sum(params.len(), grads);
        if !grad.is_finite() {
            return Err(PgacError::NonFinite {
                what: "value gradient",
                update: epoch,
            });
        }
        params.add_scaled(-fit.learning_rate, &grad);
    }
    let mse = value_mse(&samples, &params)?;
    if !mse.is_finite() {
        return Err(PgacError::NonFinite {
            what: "value loss",
            update: fit.epochs,
        });
    }
    Ok((params, mse))
}

/// Rescales to zero mean and unit variance; degenerate batches become zeros.
fn normalize(adv: &mut [f64]) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

/// One ascent step `θ ← θ + α · mean_t ∇ ln π(a_t|s_t) Â_t`.
pub fn policy_update(
    trajectories: &[Trajectory],
    policy: &GaussianPolicy,
    value: &NetworkParams,
    learning_rate: f64,
    normalize_advantages: bool,
) -> Result<NetworkParams, PgacError> {
    let steps: Vec<&StepRecord> = trajectories.iter().flat_map(|t| t.steps.iter()).collect();
    if steps.is_empty() {
        return Err(PgacError::Empty);
    }
    let mut adv = steps
        .par_iter()
        .map(|s| advantage(s, value))
        .collect::<Result<Vec<_>, _>>()?;
    if normalize_advantages {
        normalize(&mut adv);
    }
    let grads = steps
        .par_iter()
        .zip(adv.par_iter())
        .map(|(s, &a)| {
            if a == 0.0 {
                return Ok(GradientVector::zeros(policy.net.len()));
            }
            let rec = policy.mean(&s.state, &s.prev_weights)?;
            let mut g = log_prob_grad(&policy.net, &rec, &s.action, &policy.sigma)?;
            g.scale(a);
            Ok(g)
        })
        .collect::<Result<Vec<_>, PgacError>>()?;
    let mut grad = ordered_sum(policy.net.len(), grads);
    grad.scale(1.0 / steps.len() as f64);
    if !grad.is_finite() {
        return Err(PgacError::NonFinite {
            what: "policy gradient",
            update: 0,
        });
    }
    let mut net = policy.net.clone();
    net.add_scaled(learning_rate, &grad);
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgacConfig {
    /// Total episodes sampled over the run.
    pub episodes: usize,
    pub batch_size: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub value_epochs: usize,
    pub sigma: SigmaSchedule,
    pub normalize_advantages: bool,
    /// Steps per training episode.
    pub episode_length: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for PgacConfig {
    fn default() -> Self {
        Self {
            episodes: 3200,
            batch_size: 16,
            policy_lr: 1e-4,
            value_lr: 1e-3,
            value_epochs: 5,
            sigma: SigmaSchedule::default(),
            normalize_advantages: true,
            episode_length: 50,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

/// Inclusive day range `[first, last]`; steps run from `t` to `t + 1` with
/// `t + 1 <= last`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayRange {
    pub first: usize,
    pub last: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgacHistoryRow {
    pub update: usize,
    pub episode_return: f64,
    pub portfolio_value: f64,
    pub sigma: f64,
    pub value_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PgacHistory {
    pub rows: Vec<PgacHistoryRow>,
    pub audit: AllocationAudit,
}

impl PgacHistory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "update,episode_return,portfolio_value,sigma,value_mse")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.update, r.episode_return, r.portfolio_value, r.sigma, r.value_mse
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PgacOutcome {
    pub policy: GaussianPolicy,
    pub value: NetworkParams,
    pub history: PgacHistory,
    pub updates: usize,
}

/// Samples one episode on a random window of `range`.
pub fn rollout_episode(
    cube: &FeatureCube,
    env_config: &EnvConfig,
    policy: &GaussianPolicy,
    range: DayRange,
    episode_length: usize,
    episode_seed: u64,
) -> Result<(Trajectory, AllocationAudit), PgacError> {
    let first = range.first.max(env_config.horizon);
    if first >= range.last {
        return Err(PgacError::Config(format!(
            "training range {:?} leaves no steps after horizon {}",
            range, env_config.horizon
        )));
    }
    let len = episode_length.min(range.last - first).max(1);
    let mut rng = seed::rng(episode_seed);
    let start = rng.random_range(first..=range.last - len);
    let config = EnvConfig {
        episode_cap: Some(len),
        ..env_config.clone()
    };
    let (mut env, mut state) = Environment::reset_window(cube, config, start, range.last)?;
    let mut steps = Vec::with_capacity(len);
    loop {
        let prev = env.previous_action().as_slice().to_vec();
        let rec = policy.mean(&state, &prev)?;
        let sampled = sample_action(&rec.output()[1..], &policy.sigma, &mut rng)?;
        let res = env.step(&sampled.weights)?;
        steps.push(StepRecord {
            state,
            prev_weights: prev,
            action: sampled.raw,
            executed: sampled.weights,
            reward: res.reward,
            next_state: res.state.clone(),
            terminal: res.done,
        });
        state = res.state;
        if res.done {
            break;
        }
    }
    Ok((Trajectory::new(steps, env.p()), *env.audit()))
}

/// Runs the full sample → fit value → advantage → update loop.
pub fn train_pgac(
    cube: &FeatureCube,
    env_config: &EnvConfig,
    config: &PgacConfig,
    range: DayRange,
) -> Result<PgacOutcome, PgacError> {
    if config.batch_size == 0 {
        return Err(PgacError::Config("batch_size must be positive".into()));
    }
    if !(config.sigma.initial > 0.0 && config.sigma.last > 0.0 && config.sigma.last <= config.sigma.initial) {
        return Err(PgacError::Config(
            "sigma schedule must be positive and non-increasing".into(),
        ));
    }
    if range.last >= cube.n_days() {
        return Err(PgacError::Config(format!(
            "training range {range:?} exceeds {} days",
            cube.n_days()
        )));
    }
    let (n, d, m) = (cube.n_assets(), env_config.horizon, cube.n_features());
    let policy_arch = ArchSpec::policy(n, d, m).with_activation(config.activation);
    let value_arch = ArchSpec::value(n, d, m).with_activation(config.activation);
    let net = init_params(policy_arch, seed::derive(config.seed, &[seed::stream::INIT_POLICY]))?;
    let mut value = init_params(value_arch, seed::derive(config.seed, &[seed::stream::INIT_VALUE]))?;
    let mut policy = GaussianPolicy::new(net, config.sigma);
    let mut history = PgacHistory::default();

    let updates = config.episodes.div_ceil(config.batch_size);
    for update in 0..updates {
        let sigma = config.sigma.at(update, updates);
        policy.sigma.iter_mut().for_each(|s| *s = sigma);
        let batch = config.batch_size.min(config.episodes - update * config.batch_size);

        let results = (0..batch)
            .into_par_iter()
            .map(|e| {
                let episode_seed = seed::derive(config.seed, &[seed::stream::EPISODE, update as u64, e as u64]);
                rollout_episode(cube, env_config, &policy, range, config.episode_length, episode_seed)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut trajectories = Vec::with_capacity(batch);
        for (traj, audit) in results {
            history.audit.merge(&audit);
            trajectories.push(traj);
        }

        let fit = ValueFit {
            epochs: config.value_epochs,
            learning_rate: config.value_lr,
        };
        let (new_value, mse) = fit_value(&trajectories, &value, &fit).map_err(|e| tag_update(e, update))?;
        value = new_value;
        policy.net = policy_update(
            &trajectories,
            &policy,
            &value,
            config.policy_lr,
            config.normalize_advantages,
        )
        .map_err(|e| tag_update(e, update))?;

        let b = trajectories.len() as f64;
        history.rows.push(PgacHistoryRow {
            update,
            episode_return: trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / b,
            portfolio_value: trajectories.iter().map(Trajectory::final_value).sum::<f64>() / b,
            sigma,
            value_mse: mse,
        });
    }

    Ok(PgacOutcome {
        policy,
        value,
        history,
        updates,
    })
}

fn tag_update(e: PgacError, update: usize) -> PgacError {
    match e {
        PgacError::NonFinite { what, .. } => PgacError::NonFinite { what, update },
        other => other,
    }
}
