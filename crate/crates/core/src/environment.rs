//! Trading environment with proportional transaction costs and short selling.
//!
//! One step is a rebalance at the close of day `t` followed by the overnight
//! move to `t + 1`:
//!
//! 1. the shrinkage factor ζ is solved from the drifted holdings `w'` and the
//!    submitted target weights,
//! 2. the target weights drift with the price relatives `y = v_{t+1} / v_t`,
//! 3. the portfolio value and the reward are updated according to
//!    [`RewardForm`].

use serde::{Deserialize, Serialize};

use crate::market_data::{amplify_state, DataError, FeatureCube, StateTensor};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("risky weight {index} = {value} outside [-1, 1]")]
    WeightOutOfRange { index: usize, value: f64 },
    #[error("weights sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("expected {expected} weights, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite weight at index {0}")]
    NonFinite(usize),
    #[error("portfolio wiped out (growth factor {growth})")]
    WipeOut { growth: f64 },
    #[error("price relative {index} = {value} must be positive")]
    BadPriceRelative { index: usize, value: f64 },
    #[error("cost model infeasible")]
    Infeasible,
    #[error("invalid cost rates: purchase {purchase}, sale {sale} (need 0 <= c < 1)")]
    InvalidCosts { purchase: f64, sale: f64 },
    #[error("log return undefined for values {new} / {old}")]
    NonPositiveValue { new: f64, old: f64 },
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("insufficient data: {days} days cannot hold horizon {horizon} plus one step")]
    InsufficientData { days: usize, horizon: usize },
    #[error("invalid episode window: start {start}, last day {last}, {days} days")]
    InvalidWindow { start: usize, last: usize, days: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Absolute tolerance on `Σ w = 1`, per asset.
pub const SUM_TOLERANCE: f64 = 1e-12;

/// Allocation vector over all assets; index 0 is the riskless asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PortfolioWeights(Vec<f64>);

impl PortfolioWeights {
    /// Everything in the riskless asset.
    pub fn riskless(n_assets: usize) -> Self {
        let mut w = vec![0.0; n_assets];
        w[0] = 1.0;
        Self(w)
    }

    /// Completes risky weights with the riskless residual `w_0 = 1 - Σ risky`.
    pub fn complete(risky: &[f64]) -> Result<Self, EnvError> {
        let mut w = Vec::with_capacity(risky.len() + 1);
        w.push(0.0);
        for (k, &r) in risky.iter().enumerate() {
            if !r.is_finite() {
                return Err(EnvError::NonFinite(k + 1));
            }
            if !(-1.0..=1.0).contains(&r) {
                return Err(EnvError::WeightOutOfRange { index: k + 1, value: r });
            }
            w.push(r);
        }
        w[0] = 1.0 - risky.iter().sum::<f64>();
        Ok(Self(w))
    }

    /// Wraps an arbitrary allocation, checking only that it sums to 1.
    pub fn new(w: Vec<f64>) -> Result<Self, EnvError> {
        if let Some(k) = w.iter().position(|x| !x.is_finite()) {
            return Err(EnvError::NonFinite(k));
        }
        let sum: f64 = w.iter().sum();
        if w.is_empty() || (sum - 1.0).abs() > 1e-9 {
            return Err(EnvError::NotNormalized { sum });
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn risky(&self) -> &[f64] {
        &self.0[1..]
    }

    pub fn sum_error(&self) -> f64 {
        (self.0.iter().sum::<f64>() - 1.0).abs()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Applies price relatives to weights: returns `(w', W·y)` with
/// `w'_i = w_i y_i / (W·y)`.
pub fn drift_weights(w: &PortfolioWeights, y: &[f64]) -> Result<(PortfolioWeights, f64), EnvError> {
    if y.len() != w.len() {
        return Err(EnvError::LengthMismatch {
            expected: w.len(),
            got: y.len(),
        });
    }
    if let Some((index, &value)) = y.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(EnvError::BadPriceRelative { index, value });
    }
    let growth: f64 = w.0.iter().zip(y).map(|(a, b)| a * b).sum();
    if growth <= 0.0 {
        return Err(EnvError::WipeOut { growth });
    }
    let drifted = w.0.iter().zip(y).map(|(a, b)| a * b / growth).collect();
    Ok((PortfolioWeights(drifted), growth))
}

/// How turnover on risky assets is charged in the shrinkage equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortCostMode {
    /// `Σ (w'_i - ζ w_i)^+`, the long-only form.
    #[default]
    PositivePart,
    /// `Σ |w'_i - ζ w_i|`.
    AbsoluteTurnover,
}

/// Proportional transaction costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub purchase: f64,
    pub sale: f64,
    #[serde(default)]
    pub short_cost_mode: ShortCostMode,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            purchase: 0.0025,
            sale: 0.0025,
            short_cost_mode: ShortCostMode::default(),
        }
    }
}

impl CostModel {
    pub fn new(purchase: f64, sale: f64, short_cost_mode: ShortCostMode) -> Result<Self, EnvError> {
        let c = Self {
            purchase,
            sale,
            short_cost_mode,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn zero() -> Self {
        Self {
            purchase: 0.0,
            sale: 0.0,
            short_cost_mode: ShortCostMode::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let ok = |c: f64| (0.0..1.0).contains(&c);
        if ok(self.purchase) && ok(self.sale) {
            Ok(())
        } else {
            Err(EnvError::InvalidCosts {
                purchase: self.purchase,
                sale: self.sale,
            })
        }
    }
}

/// Right-hand side of the shrinkage fixed-point equation evaluated at `zeta`.
pub fn shrinkage_rhs(zeta: f64, w_prime: &[f64], target: &[f64], costs: &CostModel) -> f64 {
    let cp = costs.purchase;
    let cs = costs.sale;
    let k = cs + cp - cs * cp;
    let turnover: f64 = w_prime[1..]
        .iter()
        .zip(&target[1..])
        .map(|(a, b)| {
            let d = a - zeta * b;
            match costs.short_cost_mode {
                ShortCostMode::PositivePart => d.max(0.0),
                ShortCostMode::AbsoluteTurnover => d.abs(),
            }
        })
        .sum();
    (1.0 - cp * w_prime[0] - k * turnover) / (1.0 - cp * target[0])
}

const ZETA_TOL: f64 = 1e-13;
const ZETA_MAX_ITER: usize = 200;

/// Solves the transaction-cost shrinkage ζ for a rebalance from drifted
/// holdings `w_prime` to `target`.
///
/// Damped iteration `ζ ← (ζ + RHS(ζ)) / 2` from ζ = 1, falling back to
/// bisection on `[0, 1]`.
pub fn cost_shrinkage(
    w_prime: &PortfolioWeights,
    target: &PortfolioWeights,
    costs: &CostModel,
) -> Result<f64, EnvError> {
    if w_prime.len() != target.len() {
        return Err(EnvError::LengthMismatch {
            expected: w_prime.len(),
            got: target.len(),
        });
    }
    costs.validate()?;
    if 1.0 - costs.purchase * target.0[0] <= 0.0 {
        return Err(EnvError::Infeasible);
    }
    let rhs = |z: f64| shrinkage_rhs(z, &w_prime.0, &target.0, costs);

    let mut z = 1.0;
    for _ in 0..ZETA_MAX_ITER {
        let r = rhs(z);
        if !r.is_finite() {
            break;
        }
        if (z - r).abs() < ZETA_TOL {
            if z > 0.0 && z <= 1.0 {
                return Ok(z);
            }
            break;
        }
        z = 0.5 * z + 0.5 * r;
    }

    // Bisection on g(ζ) = ζ - RHS(ζ); g(1) >= 0 holds for valid costs.
    let g = |z: f64| z - rhs(z);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    if g(lo) >= 0.0 || g(hi) < 0.0 {
        return Err(EnvError::Infeasible);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    let z = hi;
    if z > 0.0 && (z - rhs(z)).abs() < ZETA_TOL {
        Ok(z)
    } else {
        Err(EnvError::Infeasible)
    }
}

/// `ln(p_new / p_old)`.
pub fn log_return(p_new: f64, p_old: f64) -> Result<f64, EnvError> {
    if !(p_new > 0.0 && p_old > 0.0) {
        return Err(EnvError::NonPositiveValue { new: p_new, old: p_old });
    }
    Ok((p_new / p_old).ln())
}

/// How ζ enters value and reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardForm {
    /// `p' = ζ·growth·p`, reward `ln(p'/p)`.
    #[default]
    CostInValue,
    /// `p' = growth·p`, reward `ζ·ln(growth)`.
    LiteralScaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Days of history in each state.
    pub horizon: usize,
    /// Amplification scale K.
    pub amplification: f64,
    pub costs: CostModel,
    pub reward_form: RewardForm,
    /// Maximum steps per episode; `None` runs to the end of the window.
    pub episode_cap: Option<usize>,
    /// Reward emitted when the portfolio is wiped out.
    pub reward_floor: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            amplification: 100.0,
            costs: CostModel::default(),
            reward_form: RewardForm::default(),
            episode_cap: None,
            reward_floor: -10.0,
        }
    }
}

/// Running record of every allocation executed in an environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationAudit {
    pub count: u64,
    pub max_sum_error: f64,
    pub min_risky: f64,
    pub max_risky: f64,
    pub negative_risky: u64,
}

impl Default for AllocationAudit {
    fn default() -> Self {
        Self {
            count: 0,
            max_sum_error: 0.0,
            min_risky: f64::INFINITY,
            max_risky: f64::NEG_INFINITY,
            negative_risky: 0,
        }
    }
}

impl AllocationAudit {
    pub fn record(&mut self, w: &PortfolioWeights) {
        self.count += 1;
        self.max_sum_error = self.max_sum_error.max(w.sum_error());
        for &r in w.risky() {
            self.min_risky = self.min_risky.min(r);
            self.max_risky = self.max_risky.max(r);
            if r < 0.0 {
                self.negative_risky += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &AllocationAudit) {
        self.count += other.count;
        self.max_sum_error = self.max_sum_error.max(other.max_sum_error);
        self.min_risky = self.min_risky.min(other.min_risky);
        self.max_risky = self.max_risky.max(other.max_risky);
        self.negative_risky += other.negative_risky;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: StateTensor,
    pub reward: f64,
    pub zeta: f64,
    pub growth: f64,
    /// `Σ_{i≥1} |target_i - w'_i|` at the rebalance.
    pub turnover: f64,
    pub done: bool,
    pub p: f64,
}

/// Market simulator over a borrowed feature cube.
#[derive(Debug, Clone)]
pub struct Environment<'a> {
    cube: &'a FeatureCube,
    config: EnvConfig,
    t: usize,
    last_day: usize,
    steps: usize,
    p: f64,
    w_drifted: PortfolioWeights,
    prev_action: PortfolioWeights,
    done: bool,
    audit: AllocationAudit,
}

impl<'a> Environment<'a> {
    /// Starts at day `horizon` and runs to the end of the cube.
    pub fn reset(cube: &'a FeatureCube, config: EnvConfig) -> Result<(Self, StateTensor), EnvError> {
        if cube.n_days() < config.horizon + 2 {
            return Err(EnvError::InsufficientData {
                days: cube.n_days(),
                horizon: config.horizon,
            });
        }
        let start = config.horizon;
        Self::reset_window(cube, config, start, cube.n_days() - 1)
    }

    /// Starts at day `start`; the episode ends once day `last_day` is reached.
    pub fn reset_window(
        cube: &'a FeatureCube,
        config: EnvConfig,
        start: usize,
        last_day: usize,
    ) -> Result<(Self, StateTensor), EnvError> {
        if start >= last_day || last_day >= cube.n_days() {
            return Err(EnvError::InvalidWindow {
                start,
                last: last_day,
                days: cube.n_days(),
            });
        }
        config.costs.validate()?;
        let state = amplify_state(cube, start, config.horizon, config.amplification)?;
        let n = cube.n_assets();
        let env = Self {
            cube,
            config,
            t: start,
            last_day,
            steps: 0,
            p: 1.0,
            w_drifted: PortfolioWeights::riskless(n),
            prev_action: PortfolioWeights::riskless(n),
            done: false,
            audit: AllocationAudit::default(),
        };
        Ok((env, state))
    }

    pub fn step(&mut self, action: &PortfolioWeights) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let n = self.cube.n_assets();
        if action.len() != n {
            return Err(EnvError::LengthMismatch {
                expected: n,
                got: action.len(),
            });
        }
        let sum_error = action.sum_error();
        if sum_error > 1e-9 {
            return Err(EnvError::NotNormalized { sum: 1.0 + sum_error });
        }
        self.audit.record(action);

        let zeta = cost_shrinkage(&self.w_drifted, action, &self.config.costs)?;
        let turnover: f64 = action
            .risky()
            .iter()
            .zip(self.w_drifted.risky())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let y = self.cube.price_relatives(self.t)?;

        let (reward, growth) = match drift_weights(action, &y) {
            Ok((drifted, growth)) => {
                let p_old = self.p;
                let reward = match self.config.reward_form {
                    RewardForm::CostInValue => {
                        self.p = zeta * growth * p_old;
                        log_return(self.p, p_old)?
                    }
                    RewardForm::LiteralScaling => {
                        self.p = growth * p_old;
                        zeta * growth.ln()
                    }
                };
                self.w_drifted = drifted;
                (reward, growth)
            }
            Err(EnvError::WipeOut { growth }) => {
                self.p = 0.0;
                self.done = true;
                (self.config.reward_floor, growth)
            }
            Err(e) => return Err(e),
        };

        self.prev_action = action.clone();
        self.t += 1;
        self.steps += 1;
        let capped = self.config.episode_cap.is_some_and(|cap| self.steps >= cap);
        self.done = self.done || self.t >= self.last_day || capped;
        let state = amplify_state(self.cube, self.t, self.config.horizon, self.config.amplification)?;
        Ok(StepResult {
            state,
            reward,
            zeta,
            growth,
            turnover,
            done: self.done,
            p: self.p,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn n_assets(&self) -> usize {
        self.cube.n_assets()
    }

    pub fn drifted_weights(&self) -> &PortfolioWeights {
        &self.w_drifted
    }

    /// Last submitted target allocation (all-riskless before the first step).
    pub fn previous_action(&self) -> &PortfolioWeights {
        &self.prev_action
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn cube(&self) -> &'a FeatureCube {
        self.cube
    }

    pub fn audit(&self) -> &AllocationAudit {
        &self.audit
    }
}
