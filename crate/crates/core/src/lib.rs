//! Portfolio management with reinforcement learning.
//!
//! The crate is organised along the pipeline:
//!
//! * [`market_data`] loads or synthesizes OHLCV series, derives feature cubes
//!   and builds amplified state tensors.
//! * [`environment`] is the trading simulator with proportional transaction
//!   costs (the shrinkage factor ζ) and short positions.
//! * [`neural`] holds the hand-written networks (CNN policy/value, flat MLP)
//!   with analytic gradients and the checkpoint format.
//! * [`pgac`] trains a Gaussian policy-gradient actor-critic agent.
//! * [`es`] trains a deterministic policy with an evolution strategy.
//! * [`backtest`] replays agents on held-out windows and reports metrics.

pub mod backtest;
pub mod environment;
pub mod es;
pub mod market_data;
pub mod neural;
pub mod pgac;
pub mod seed;

pub use backtest::{Agent, Baseline, Comparison, EquityCurve, MetricsReport, TestWindow};
pub use environment::{CostModel, EnvConfig, Environment, PortfolioWeights, RewardForm, ShortCostMode, StepResult};
pub use es::{EsConfig, EsHistory};
pub use market_data::{FeatureCube, FeatureKind, PriceSeries, StateTensor, SyntheticSpec};
pub use neural::{Activation, ArchSpec, ArchTag, Checkpoint, NetworkParams};
pub use pgac::{DayRange, GaussianPolicy, PgacConfig, PgacHistory};

/// Top-level error, wrapping the per-module error types.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] market_data::DataError),
    #[error(transparent)]
    Env(#[from] environment::EnvError),
    #[error(transparent)]
    Net(#[from] neural::NetError),
    #[error(transparent)]
    Pgac(#[from] pgac::PgacError),
    #[error(transparent)]
    Es(#[from] es::EsError),
    #[error(transparent)]
    Backtest(#[from] backtest::BacktestError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
