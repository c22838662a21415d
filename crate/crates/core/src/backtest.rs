//! Held-out replays and report metrics.
//!
//! Metrics are per period (daily) with no annualization and a zero risk-free
//! rate.

use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::environment::{EnvConfig, EnvError, Environment, PortfolioWeights, RewardForm};
use crate::market_data::FeatureCube;
use crate::neural::{policy_cnn_forward, AgentKind, ArchTag, Checkpoint, NetError, NetworkParams};
use crate::pgac::DayRange;

#[derive(Debug, thiserror::Error)]
pub enum BacktestError {
    #[error("test window starting at day {start} overlaps training data ending at day {train_last}")]
    Overlap { start: usize, train_last: usize },
    #[error("test window of {len} steps from day {start} does not fit {days} days")]
    Window { start: usize, len: usize, days: usize },
    #[error("need at least 2 returns, got {0}")]
    TooFewReturns(usize),
    #[error("undefined Sharpe: returns have zero variance")]
    UndefinedSharpe,
    #[error("undefined Sortino: all returns are zero")]
    UndefinedSortino,
    #[error("non-finite return at index {0}")]
    NonFiniteReturn(usize),
    #[error("equity curve is empty")]
    EmptyCurve,
    #[error("agent expects {expected}, found {got}")]
    Shape { expected: String, got: String },
    #[error("checkpoint policy has architecture {0:?}, which cannot act")]
    NotAPolicy(ArchTag),
    #[error("no reports to compare")]
    NoReports,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Reference strategies that need no training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Everything in the riskless asset.
    HoldRiskless,
    /// Equal split over the risky assets on day one, then no trading.
    EqualWeight,
    /// All-in on the asset with the best growth over the window. Uses future
    /// prices, so it is for reporting only.
    BestSingleAsset,
}

/// Anything that can be replayed over a test window.
#[derive(Debug, Clone, PartialEq)]
pub enum Agent {
    /// Policy CNN; the mean action is used, never a sample.
    Pgac(NetworkParams),
    Es(NetworkParams),
    Baseline(Baseline),
}

impl Agent {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, BacktestError> {
        match (ckpt.agent, ckpt.policy.arch().tag) {
            (AgentKind::Pgac, ArchTag::PgacPolicy) => Ok(Agent::Pgac(ckpt.policy.clone())),
            (AgentKind::Es, ArchTag::EsMlp) => Ok(Agent::Es(ckpt.policy.clone())),
            (_, tag) => Err(BacktestError::NotAPolicy(tag)),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Agent::Pgac(_) => "pgac",
            Agent::Es(_) => "es",
            Agent::Baseline(Baseline::HoldRiskless) => "riskless",
            Agent::Baseline(Baseline::EqualWeight) => "equal",
            Agent::Baseline(Baseline::BestSingleAsset) => "best",
        }
    }

    fn network(&self) -> Option<&NetworkParams> {
        match self {
            Agent::Pgac(p) | Agent::Es(p) => Some(p),
            Agent::Baseline(_) => None,
        }
    }
}

/// `len` rebalances starting on day `start`; the last price relative used is
/// `close[start + len] / close[start + len - 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestWindow {
    pub start: usize,
    pub len: usize,
}

impl TestWindow {
    /// The window that begins where training stopped.
    pub fn after(train: DayRange, len: usize) -> Self {
        Self { start: train.last, len }
    }
}

impl std::str::FromStr for TestWindow {
    type Err = String;

    /// `START:LEN`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| format!("expected START:LEN, got {s:?}"))?;
        let start = a.trim().parse().map_err(|e| format!("bad start {a:?}: {e}"))?;
        let len: usize = b.trim().parse().map_err(|e| format!("bad length {b:?}: {e}"))?;
        if len == 0 {
            return Err("window length must be positive".into());
        }
        Ok(Self { start, len })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityCurve {
    pub start_day: usize,
    /// `values[0] = 1`, one entry per step after that.
    pub values: Vec<f64>,
    /// `returns[t] = ln(values[t + 1] / values[t])`.
    pub returns: Vec<f64>,
    pub actions: Vec<PortfolioWeights>,
    pub zetas: Vec<f64>,
    pub growths: Vec<f64>,
    pub turnovers: Vec<f64>,
    /// Holdings after the last price move.
    pub final_weights: PortfolioWeights,
}

impl EquityCurve {
    pub fn final_value(&self) -> f64 {
        *self.values.last().unwrap_or(&1.0)
    }

    pub fn n_trades(&self) -> usize {
        self.turnovers.iter().filter(|&&x| x > 0.0).count()
    }

    /// `day,value,weight_0..weight_{n-1}`; each row holds the allocation
    /// chosen on that day (the final row: drifted holdings).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.final_weights.len();
        let header: Vec<String> = ["day".to_string(), "value".to_string()]
            .into_iter()
            .chain((0..n).map(|i| format!("weight_{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (k, v) in self.values.iter().enumerate() {
            let weights = self.actions.get(k).unwrap_or(&self.final_weights);
            let cols: Vec<String> = weights.as_slice().iter().map(f64::to_string).collect();
            writeln!(w, "{},{},{}", self.start_day + k, v, cols.join(","))?;
        }
        Ok(())
    }
}

/// Replays `agent` over `window`. Training data must end at or before the
/// window start. Portfolio value always includes transaction costs, whatever
/// reward form the config names.
pub fn run_backtest(
    agent: &Agent,
    cube: &FeatureCube,
    window: TestWindow,
    train_last: Option<usize>,
    env_config: &EnvConfig,
) -> Result<EquityCurve, BacktestError> {
    if let Some(train_last) = train_last {
        if window.start < train_last {
            return Err(BacktestError::Overlap {
                start: window.start,
                train_last,
            });
        }
    }
    let last_day = window.start + window.len;
    if window.len == 0 || last_day >= cube.n_days() {
        return Err(BacktestError::Window {
            start: window.start,
            len: window.len,
            days: cube.n_days(),
        });
    }
    let n = cube.n_assets();
    if let Some(net) = agent.network() {
        let arch = net.arch();
        let want = (n, env_config.horizon, cube.n_features());
        let got = (arch.assets, arch.horizon, arch.features);
        if want != got {
            return Err(BacktestError::Shape {
                expected: format!("(assets, horizon, features) = {want:?}"),
                got: format!("{got:?}"),
            });
        }
    }

    let config = EnvConfig {
        reward_form: RewardForm::CostInValue,
        episode_cap: None,
        ..env_config.clone()
    };
    let (mut env, mut state) = Environment::reset_window(cube, config, window.start, last_day)?;
    let best = match agent {
        Agent::Baseline(Baseline::BestSingleAsset) => Some(best_asset(cube, window)),
        _ => None,
    };

    let mut curve = EquityCurve {
        start_day: window.start,
        values: vec![1.0],
        returns: Vec::with_capacity(window.len),
        actions: Vec::with_capacity(window.len),
        zetas: Vec::with_capacity(window.len),
        growths: Vec::with_capacity(window.len),
        turnovers: Vec::with_capacity(window.len),
        final_weights: PortfolioWeights::riskless(n),
    };
    while !env.is_done() {
        let prev = env.previous_action().as_slice().to_vec();
        let action = match agent {
            Agent::Pgac(net) => {
                let rec = policy_cnn_forward(&state, &prev, net)?;
                let risky: Vec<f64> = rec.output()[1..].iter().map(|x| x.clamp(-1.0, 1.0)).collect();
                PortfolioWeights::complete(&risky)?
            }
            Agent::Es(net) => crate::es::act(net, &state, &prev).map_err(|e| match e {
                crate::es::EsError::Net(e) => BacktestError::Net(e),
                crate::es::EsError::Env(e) => BacktestError::Env(e),
                other => BacktestError::Shape {
                    expected: "an ES policy".into(),
                    got: other.to_string(),
                },
            })?,
            Agent::Baseline(Baseline::HoldRiskless) => PortfolioWeights::riskless(n),
            Agent::Baseline(Baseline::EqualWeight) if env.steps() == 0 => {
                let mut w = vec![1.0 / (n - 1) as f64; n];
                w[0] = 0.0;
                PortfolioWeights::complete(&w[1..])?
            }
            Agent::Baseline(Baseline::BestSingleAsset) if env.steps() == 0 => {
                let mut w = vec![0.0; n];
                w[best.unwrap_or(0)] = 1.0;
                PortfolioWeights::new(w)?
            }
            // buy-and-hold: keep whatever the market drifted us to
            Agent::Baseline(_) => env.drifted_weights().clone(),
        };
        let p_old = env.p();
        let step = env.step(&action)?;
        curve.values.push(step.p);
        curve.returns.push((step.p / p_old).ln());
        curve.actions.push(action);
        curve.zetas.push(step.zeta);
        curve.growths.push(step.growth);
        curve.turnovers.push(step.turnover);
        state = step.state;
    }
    curve.final_weights = env.drifted_weights().clone();
    Ok(curve)
}

/// Index of the asset (riskless included) with the largest close-to-close
/// growth across the window; ties go to the lower index.
fn best_asset(cube: &FeatureCube, window: TestWindow) -> usize {
    let end = window.start + window.len;
    let growth = |i: usize| cube.close(i, end) / cube.close(i, window.start);
    (0..cube.n_assets()).fold(0, |best, i| if growth(i) > growth(best) { i } else { best })
}

fn check_returns(returns: &[f64]) -> Result<(), BacktestError> {
    if returns.len() < 2 {
        return Err(BacktestError::TooFewReturns(returns.len()));
    }
    match returns.iter().position(|r| !r.is_finite()) {
        Some(i) => Err(BacktestError::NonFiniteReturn(i)),
        None => Ok(()),
    }
}

/// Mean over sample (n − 1) standard deviation.
pub fn sharpe(returns: &[f64]) -> Result<f64, BacktestError> {
    check_returns(returns)?;
    if returns.iter().all(|&r| r == returns[0]) {
        return Err(BacktestError::UndefinedSharpe);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(mean / var.sqrt())
}

/// Mean over the downside deviation `sqrt(mean(min(r, 0)^2))`, the mean
/// taken over every period. No down periods and a positive mean give
/// `f64::INFINITY`.
pub fn sortino(returns: &[f64]) -> Result<f64, BacktestError> {
    check_returns(returns)?;
    if returns.iter().all(|&r| r == 0.0) {
        return Err(BacktestError::UndefinedSortino);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let downside = (returns.iter().map(|r| r.min(0.0).powi(2)).sum::<f64>() / n).sqrt();
    if downside == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(mean / downside)
}

/// Largest fractional fall from a running peak.
pub fn max_drawdown(values: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &v in values {
        peak = peak.max(v);
        if peak > 0.0 {
            worst = worst.max((peak - v) / peak);
        }
    }
    worst
}

/// One row of a results table. Undefined ratios are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub trial: String,
    pub final_value: f64,
    pub sharpe: Option<f64>,
    #[serde(with = "ratio")]
    pub sortino: Option<f64>,
    pub mdd: f64,
    pub n_trades: usize,
}

impl MetricsReport {
    pub fn from_curve(trial: impl Into<String>, curve: &EquityCurve) -> Self {
        Self {
            trial: trial.into(),
            final_value: curve.final_value(),
            sharpe: sharpe(&curve.returns).ok(),
            sortino: sortino(&curve.returns).ok(),
            mdd: max_drawdown(&curve.values),
            n_trades: curve.n_trades(),
        }
    }

    pub fn to_json(&self) -> Result<String, BacktestError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, BacktestError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// JSON has no infinity, so an unbounded ratio is written as the string
/// `"inf"` (or `"-inf"`).
mod ratio {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if *x == f64::INFINITY => s.serialize_str("inf"),
            Some(x) if *x == f64::NEG_INFINITY => s.serialize_str("-inf"),
            Some(x) => s.serialize_f64(*x),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) => match t.as_str() {
                "inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("bad ratio {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub final_value: f64,
    #[serde(with = "ratio")]
    pub sortino: Option<f64>,
    pub sharpe: Option<f64>,
    pub mdd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<MetricsReport>,
    pub mean: MeanRow,
}

/// Aligns reports into one table with a per-metric mean. Ratios that are
/// undefined in some rows are averaged over the rows that have them.
pub fn compare(reports: &[MetricsReport]) -> Result<Comparison, BacktestError> {
    if reports.is_empty() {
        return Err(BacktestError::NoReports);
    }
    let n = reports.len() as f64;
    let mean_opt = |f: fn(&MetricsReport) -> Option<f64>| {
        let xs: Vec<f64> = reports.iter().filter_map(f).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    Ok(Comparison {
        rows: reports.to_vec(),
        mean: MeanRow {
            final_value: reports.iter().map(|r| r.final_value).sum::<f64>() / n,
            sortino: mean_opt(|r| r.sortino),
            sharpe: mean_opt(|r| r.sharpe),
            mdd: reports.iter().map(|r| r.mdd).sum::<f64>() / n,
        },
    })
}

fn cell(x: Option<f64>) -> String {
    match x {
        None => String::new(),
        Some(v) if v == f64::INFINITY => "inf".into(),
        Some(v) if v == f64::NEG_INFINITY => "-inf".into(),
        Some(v) => v.to_string(),
    }
}

impl Comparison {
    pub const HEADER: &'static str = "Trial,Portfolio Value,Sortino,Sharpe,MMD";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.trial,
                r.final_value,
                cell(r.sortino),
                cell(r.sharpe),
                r.mdd
            )?;
        }
        let m = &self.mean;
        writeln!(
            w,
            "mean,{},{},{},{}",
            m.final_value,
            cell(m.sortino),
            cell(m.sharpe),
            m.mdd
        )
    }

    pub fn to_json(&self) -> Result<String, BacktestError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
