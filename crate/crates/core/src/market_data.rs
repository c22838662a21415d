//! Market data: OHLCV series, feature cubes and amplified state tensors.
//!
//! Asset index 0 is always the riskless asset with a constant close of 1.
//! It is synthesized here and never read from input files.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed;

/// Name given to the synthesized riskless asset.
pub const RISKLESS: &str = "CASH";

/// Expected CSV header.
pub const CSV_HEADER: [&str; 7] = ["date", "asset", "open", "high", "low", "close", "volume"];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("no data")]
    NoData,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unexpected CSV header {found:?}, expected {expected}", expected = CSV_HEADER.join(","))]
    Header { found: Vec<String> },
    #[error("row {row}: {reason}")]
    MalformedRow { row: u64, reason: String },
    #[error("row {row}: non-positive {field} ({value})")]
    NonPositivePrice { row: u64, field: &'static str, value: f64 },
    #[error("row {row}: duplicate entry for asset {asset} on {date}")]
    Duplicate { row: u64, date: NaiveDate, asset: String },
    #[error("row {row}: asset name {RISKLESS:?} is reserved for the riskless asset")]
    ReservedAsset { row: u64 },
    #[error("gap: asset {asset} has no row for {date}")]
    Gap { date: NaiveDate, asset: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("moving-average window must be at least 1")]
    InvalidWindow,
    #[error("feature spec must include \"close\"")]
    MissingClose,
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error(
        "asset index {index} out of range: the data has {count} assets, riskless included (valid indices 0..{count})"
    )]
    UnknownAsset { index: usize, count: usize },
    #[error("day {day} out of range for {days} days")]
    DayOutOfRange { day: usize, days: usize },
    #[error("horizon must be at least 1")]
    InvalidHorizon,
    #[error("amplification scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("zero denominator in amplification at asset {asset}, day {day}, feature {feature}")]
    DivisionByZero { asset: usize, day: usize, feature: usize },
}

/// One daily bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Bar {
    const RISKLESS: Bar = Bar {
        open: 1.0,
        high: 1.0,
        low: 1.0,
        close: 1.0,
        volume: 0.0,
    };
}

/// Per-asset daily OHLCV records with the riskless asset at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    assets: Vec<String>,
    dates: Vec<NaiveDate>,
    /// `bars[asset][day]`
    bars: Vec<Vec<Bar>>,
}

impl PriceSeries {
    /// Builds a series from risky-asset bars (`bars[asset][day]`), prepending
    /// the riskless asset.
    pub fn from_risky(names: Vec<String>, dates: Vec<NaiveDate>, bars: Vec<Vec<Bar>>) -> Result<Self, DataError> {
        if dates.is_empty() || names.is_empty() {
            return Err(DataError::NoData);
        }
        if names.len() != bars.len() || bars.iter().any(|b| b.len() != dates.len()) {
            return Err(DataError::InvalidSpec("bar matrix shape mismatch".into()));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::InvalidSpec("dates must be strictly increasing".into()));
        }
        for b in bars.iter().flatten() {
            for (field, value) in [("open", b.open), ("high", b.high), ("low", b.low), ("close", b.close)] {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(DataError::NonPositivePrice { row: 0, field, value });
                }
            }
        }
        let mut assets = Vec::with_capacity(names.len() + 1);
        assets.push(RISKLESS.to_string());
        assets.extend(names);
        let mut all = Vec::with_capacity(bars.len() + 1);
        all.push(vec![Bar::RISKLESS; dates.len()]);
        all.extend(bars);
        Ok(Self {
            assets,
            dates,
            bars: all,
        })
    }

    /// Number of assets including the riskless one.
    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn bars(&self, asset: usize) -> &[Bar] {
        &self.bars[asset]
    }

    pub fn closes(&self, asset: usize) -> Vec<f64> {
        self.bars[asset].iter().map(|b| b.close).collect()
    }

    /// Writes the risky assets in the CSV input format.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER).map_err(csv_io)?;
        for (day, date) in self.dates.iter().enumerate() {
            for asset in 1..self.n_assets() {
                let b = self.bars[asset][day];
                w.write_record([
                    date.to_string(),
                    self.assets[asset].clone(),
                    b.open.to_string(),
                    b.high.to_string(),
                    b.low.to_string(),
                    b.close.to_string(),
                    b.volume.to_string(),
                ])
                .map_err(csv_io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> DataError {
    DataError::Io(std::io::Error::other(e))
}

/// Loads a long-format OHLCV CSV file (`date,asset,open,high,low,close,volume`).
pub fn load_ohlcv(path: impl AsRef<Path>) -> Result<PriceSeries, DataError> {
    let file = std::fs::File::open(path)?;
    read_ohlcv(file)
}

/// Parses OHLCV CSV from any reader. Row numbers in errors are file line
/// numbers, the header being line 1.
pub fn read_ohlcv<R: Read>(reader: R) -> Result<PriceSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        None => return Err(DataError::NoData),
        Some(r) => r.map_err(|e| DataError::MalformedRow {
            row: 1,
            reason: e.to_string(),
        })?,
    };
    let found: Vec<String> = header.iter().map(str::to_string).collect();
    if found.len() != CSV_HEADER.len() || found.iter().zip(CSV_HEADER).any(|(a, b)| a != b) {
        return Err(DataError::Header { found });
    }

    let mut names: Vec<String> = Vec::new();
    // (date, asset index) -> (bar, row)
    let mut cells: std::collections::BTreeMap<(NaiveDate, usize), (Bar, u64)> = Default::default();
    for (k, rec) in records.enumerate() {
        let row = k as u64 + 2;
        let rec = rec.map_err(|e| DataError::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        if rec.len() != CSV_HEADER.len() {
            return Err(DataError::MalformedRow {
                row,
                reason: format!("expected {} fields, found {}", CSV_HEADER.len(), rec.len()),
            });
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| DataError::MalformedRow {
            row,
            reason: format!("bad date {:?}: {e}", &rec[0]),
        })?;
        let name = &rec[1];
        if name.is_empty() {
            return Err(DataError::MalformedRow {
                row,
                reason: "empty asset name".into(),
            });
        }
        if name == RISKLESS {
            return Err(DataError::ReservedAsset { row });
        }
        let mut nums = [0.0; 5];
        for (slot, (field, text)) in nums.iter_mut().zip(CSV_HEADER[2..].iter().zip(rec.iter().skip(2))) {
            *slot = text.parse::<f64>().map_err(|_| DataError::MalformedRow {
                row,
                reason: format!("{field} is not a number: {text:?}"),
            })?;
            if !slot.is_finite() {
                return Err(DataError::MalformedRow {
                    row,
                    reason: format!("{field} is not finite"),
                });
            }
        }
        let bar = Bar {
            open: nums[0],
            high: nums[1],
            low: nums[2],
            close: nums[3],
            volume: nums[4],
        };
        for (field, value) in [
            ("open", bar.open),
            ("high", bar.high),
            ("low", bar.low),
            ("close", bar.close),
        ] {
            if value <= 0.0 {
                return Err(DataError::NonPositivePrice { row, field, value });
            }
        }
        if bar.volume < 0.0 {
            return Err(DataError::MalformedRow {
                row,
                reason: "negative volume".into(),
            });
        }
        let asset = match names.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                names.push(name.to_string());
                names.len() - 1
            }
        };
        if cells.insert((date, asset), (bar, row)).is_some() {
            return Err(DataError::Duplicate {
                row,
                date,
                asset: name.to_string(),
            });
        }
    }
    if cells.is_empty() {
        return Err(DataError::NoData);
    }

    let mut dates: Vec<NaiveDate> = cells.keys().map(|(d, _)| *d).collect();
    dates.dedup();
    let mut bars = vec![Vec::with_capacity(dates.len()); names.len()];
    for &date in &dates {
        for (asset, series) in bars.iter_mut().enumerate() {
            match cells.get(&(date, asset)) {
                Some((bar, _)) => series.push(*bar),
                None => {
                    return Err(DataError::Gap {
                        date,
                        asset: names[asset].clone(),
                    })
                }
            }
        }
    }
    PriceSeries::from_risky(names, dates, bars)
}

/// Geometric Brownian motion parameters for one synthetic asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetProcess {
    pub name: String,
    /// Log drift per day.
    pub drift: f64,
    /// Volatility per day.
    pub volatility: f64,
    #[serde(default = "one")]
    pub initial_price: f64,
}

fn one() -> f64 {
    1.0
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date")
}

/// Specification for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub assets: Vec<AssetProcess>,
    pub days: usize,
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
}

impl SyntheticSpec {
    /// One asset drifting by `daily_growth` (e.g. 1.005) per day, the rest flat.
    pub fn one_rising(risky: usize, rising: usize, daily_growth: f64, volatility: f64, days: usize) -> Self {
        let assets = (1..=risky)
            .map(|i| AssetProcess {
                name: format!("A{i}"),
                drift: if i == rising { daily_growth.ln() } else { 0.0 },
                volatility,
                initial_price: 1.0,
            })
            .collect();
        Self {
            assets,
            days,
            start_date: default_start(),
        }
    }
}

fn next_weekday(d: NaiveDate) -> NaiveDate {
    let mut next = d + Days::new(1);
    while matches!(next.weekday(), Weekday::Sat | Weekday::Sun) {
        next = next + Days::new(1);
    }
    next
}

/// Generates GBM closes, `close_t = close_{t-1} * exp(mu - sigma^2/2 + sigma*z_t)`.
///
/// Normals are drawn day-major, asset-minor from a ChaCha8 stream keyed by
/// `seed`. Open is the previous close; high/low bracket open and close.
/// Dates are consecutive weekdays starting at `spec.start_date`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<PriceSeries, DataError> {
    if spec.days < 1 {
        return Err(DataError::InvalidSpec("days must be at least 1".into()));
    }
    if spec.assets.is_empty() {
        return Err(DataError::InvalidSpec("at least one asset required".into()));
    }
    for a in &spec.assets {
        if !(a.volatility >= 0.0 && a.volatility.is_finite()) {
            return Err(DataError::InvalidSpec(format!("{}: volatility must be >= 0", a.name)));
        }
        if !a.drift.is_finite() {
            return Err(DataError::InvalidSpec(format!("{}: drift must be finite", a.name)));
        }
        if !(a.initial_price > 0.0 && a.initial_price.is_finite()) {
            return Err(DataError::InvalidSpec(format!("{}: initial price must be > 0", a.name)));
        }
        if a.name == RISKLESS {
            return Err(DataError::InvalidSpec(format!("{RISKLESS:?} is reserved")));
        }
    }

    let mut rng = seed::rng(seed::derive(seed, &[seed::stream::SYNTHETIC]));
    let mut closes: Vec<Vec<f64>> = spec.assets.iter().map(|a| vec![a.initial_price]).collect();
    for _ in 1..spec.days {
        for (a, series) in spec.assets.iter().zip(closes.iter_mut()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            let prev = *series.last().expect("non-empty");
            let incr = a.drift - 0.5 * a.volatility * a.volatility + a.volatility * z;
            series.push(prev * incr.exp());
        }
    }

    let mut dates = Vec::with_capacity(spec.days);
    let mut date = spec.start_date;
    while matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
        date = next_weekday(date);
    }
    for _ in 0..spec.days {
        dates.push(date);
        date = next_weekday(date);
    }

    let bars = closes
        .iter()
        .map(|c| {
            c.iter()
                .enumerate()
                .map(|(t, &close)| {
                    let open = if t == 0 { close } else { c[t - 1] };
                    Bar {
                        open,
                        high: open.max(close),
                        low: open.min(close),
                        close,
                        volume: 1.0e6,
                    }
                })
                .collect()
        })
        .collect();
    PriceSeries::from_risky(spec.assets.iter().map(|a| a.name.clone()).collect(), dates, bars)
}

/// Trailing mean of closes; the window shrinks at the head of the series.
pub fn moving_average(series: &PriceSeries, asset: usize, window: usize) -> Result<Vec<f64>, DataError> {
    if window < 1 {
        return Err(DataError::InvalidWindow);
    }
    if asset >= series.n_assets() {
        return Err(DataError::UnknownAsset {
            index: asset,
            count: series.n_assets(),
        });
    }
    Ok(trailing_mean(&series.closes(asset), window))
}

fn trailing_mean(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for (t, &x) in xs.iter().enumerate() {
        sum += x;
        if t >= window {
            sum -= xs[t - window];
        }
        let len = (t + 1).min(window);
        // Recompute occasionally to bound accumulated rounding error.
        if t % 256 == 255 {
            sum = xs[t + 1 - len..=t].iter().sum();
        }
        out.push(sum / len as f64);
    }
    out
}

/// One feature column of the cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FeatureKind {
    /// The asset's own close.
    Close,
    /// Trailing moving average of the asset's own close (`ma5`, `ma10`, ...).
    MovingAverage(usize),
    /// Close of another asset, broadcast to every asset row.
    AuxClose(usize),
}

impl FeatureKind {
    /// The 7-feature configuration used by default.
    pub fn default_set() -> Vec<FeatureKind> {
        use FeatureKind::*;
        vec![
            Close,
            MovingAverage(5),
            MovingAverage(10),
            MovingAverage(20),
            AuxClose(1),
            AuxClose(2),
            AuxClose(3),
        ]
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureKind::Close => f.write_str("close"),
            FeatureKind::MovingAverage(w) => write!(f, "ma{w}"),
            FeatureKind::AuxClose(a) => write!(f, "aux_close({a})"),
        }
    }
}

impl FromStr for FeatureKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let unknown = || DataError::UnknownFeature(s.to_string());
        if s == "close" {
            return Ok(FeatureKind::Close);
        }
        if let Some(w) = s.strip_prefix("ma") {
            let w: usize = w.parse().map_err(|_| unknown())?;
            if w < 1 {
                return Err(DataError::InvalidWindow);
            }
            return Ok(FeatureKind::MovingAverage(w));
        }
        if let Some(rest) = s.strip_prefix("aux_close(").and_then(|r| r.strip_suffix(')')) {
            return rest.trim().parse().map(FeatureKind::AuxClose).map_err(|_| unknown());
        }
        Err(unknown())
    }
}

impl TryFrom<String> for FeatureKind {
    type Error = DataError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<FeatureKind> for String {
    fn from(k: FeatureKind) -> String {
        k.to_string()
    }
}

/// Dense `(assets, days, features)` array, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCube {
    n_assets: usize,
    n_days: usize,
    features: Vec<FeatureKind>,
    close_index: usize,
    entries: Vec<f64>,
}

impl FeatureCube {
    /// Builds a cube directly from entries laid out as `[asset][day][feature]`.
    pub fn from_entries(
        n_assets: usize,
        n_days: usize,
        features: Vec<FeatureKind>,
        entries: Vec<f64>,
    ) -> Result<Self, DataError> {
        let close_index = features
            .iter()
            .position(|f| *f == FeatureKind::Close)
            .ok_or(DataError::MissingClose)?;
        if n_assets == 0 || n_days == 0 {
            return Err(DataError::NoData);
        }
        if entries.len() != n_assets * n_days * features.len() {
            return Err(DataError::InvalidSpec("cube entry count mismatch".into()));
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(DataError::InvalidSpec("cube entries must be finite".into()));
        }
        Ok(Self {
            n_assets,
            n_days,
            features,
            close_index,
            entries,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn n_days(&self) -> usize {
        self.n_days
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[FeatureKind] {
        &self.features
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(ToString::to_string).collect()
    }

    #[inline]
    pub fn get(&self, asset: usize, day: usize, feature: usize) -> f64 {
        self.entries[(asset * self.n_days + day) * self.features.len() + feature]
    }

    pub fn close(&self, asset: usize, day: usize) -> f64 {
        self.get(asset, day, self.close_index)
    }

    /// Price relatives `close[day+1] / close[day]` for every asset.
    pub fn price_relatives(&self, day: usize) -> Result<Vec<f64>, DataError> {
        if day + 1 >= self.n_days {
            return Err(DataError::DayOutOfRange {
                day: day + 1,
                days: self.n_days,
            });
        }
        Ok((0..self.n_assets)
            .map(|i| self.close(i, day + 1) / self.close(i, day))
            .collect())
    }

    /// A copy restricted to days `..end`.
    pub fn truncated(&self, end: usize) -> Result<Self, DataError> {
        if end == 0 || end > self.n_days {
            return Err(DataError::DayOutOfRange {
                day: end,
                days: self.n_days,
            });
        }
        let m = self.features.len();
        let mut entries = Vec::with_capacity(self.n_assets * end * m);
        for i in 0..self.n_assets {
            let base = i * self.n_days * m;
            entries.extend_from_slice(&self.entries[base..base + end * m]);
        }
        Ok(Self {
            n_days: end,
            entries,
            ..self.clone()
        })
    }
}

/// Derives one column per requested feature for every asset.
pub fn build_feature_cube(series: &PriceSeries, spec: &[FeatureKind]) -> Result<FeatureCube, DataError> {
    if !spec.contains(&FeatureKind::Close) {
        return Err(DataError::MissingClose);
    }
    let n = series.n_assets();
    let days = series.n_days();
    let m = spec.len();
    let closes: Vec<Vec<f64>> = (0..n).map(|i| series.closes(i)).collect();

    let mut columns: Vec<Vec<Vec<f64>>> = Vec::with_capacity(m);
    for kind in spec {
        let col = match *kind {
            FeatureKind::Close => closes.clone(),
            FeatureKind::MovingAverage(w) => {
                if w < 1 {
                    return Err(DataError::InvalidWindow);
                }
                closes.iter().map(|c| trailing_mean(c, w)).collect()
            }
            FeatureKind::AuxClose(a) => {
                let src = closes.get(a).ok_or(DataError::UnknownAsset { index: a, count: n })?;
                vec![src.clone(); n]
            }
        };
        columns.push(col);
    }

    let mut entries = Vec::with_capacity(n * days * m);
    for i in 0..n {
        for t in 0..days {
            for col in &columns {
                entries.push(col[i][t]);
            }
        }
    }
    FeatureCube::from_entries(n, days, spec.to_vec(), entries)
}

/// Amplified window of the `horizon` most recent days, shape `(assets, horizon, features)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    n_assets: usize,
    horizon: usize,
    n_features: usize,
    t_end: usize,
    entries: Vec<f64>,
}

impl StateTensor {
    pub fn from_entries(
        n_assets: usize,
        horizon: usize,
        n_features: usize,
        t_end: usize,
        entries: Vec<f64>,
    ) -> Result<Self, DataError> {
        if entries.len() != n_assets * horizon * n_features {
            return Err(DataError::InvalidSpec("state entry count mismatch".into()));
        }
        Ok(Self {
            n_assets,
            horizon,
            n_features,
            t_end,
            entries,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_assets, self.horizon, self.n_features)
    }

    /// Day index of the most recent slice.
    pub fn t_end(&self) -> usize {
        self.t_end
    }

    /// Row-major `[asset][lag][feature]` entries, oldest lag first.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, asset: usize, lag: usize, feature: usize) -> f64 {
        self.entries[(asset * self.horizon + lag) * self.n_features + feature]
    }
}

/// Builds the state ending at day `t_end` (0-based, inclusive):
/// entry `(i, k, j)` is `scale * e[i][t][j] / e[i][t-1][j]` for
/// `t = t_end - horizon + 1 + k`, and `scale` wherever `t - 1` precedes the
/// first day.
pub fn amplify_state(cube: &FeatureCube, t_end: usize, horizon: usize, scale: f64) -> Result<StateTensor, DataError> {
    if horizon < 1 {
        return Err(DataError::InvalidHorizon);
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(DataError::InvalidScale(scale));
    }
    if t_end >= cube.n_days {
        return Err(DataError::DayOutOfRange {
            day: t_end,
            days: cube.n_days,
        });
    }
    let n = cube.n_assets;
    let m = cube.n_features();
    let mut entries = Vec::with_capacity(n * horizon * m);
    for i in 0..n {
        for k in 0..horizon {
            // t = t_end + 1 + k - horizon; padded when t < 1
            let shifted = t_end + 1 + k;
            for j in 0..m {
                if shifted < horizon + 1 {
                    entries.push(scale);
                    continue;
                }
                let t = shifted - horizon;
                let prev = cube.get(i, t - 1, j);
                if prev == 0.0 {
                    return Err(DataError::DivisionByZero {
                        asset: i,
                        day: t,
                        feature: j,
                    });
                }
                entries.push(scale * cube.get(i, t, j) / prev);
            }
        }
    }
    StateTensor::from_entries(n, horizon, m, t_end, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series_from_closes(closes: &[Vec<f64>]) -> PriceSeries {
        let days = closes[0].len();
        let mut dates = vec![default_start()];
        for _ in 1..days {
            dates.push(next_weekday(*dates.last().unwrap()));
        }
        let bars = closes
            .iter()
            .map(|c| {
                c.iter()
                    .map(|&x| Bar {
                        open: x,
                        high: x,
                        low: x,
                        close: x,
                        volume: 1.0,
                    })
                    .collect()
            })
            .collect();
        let names = (1..=closes.len()).map(|i| format!("A{i}")).collect();
        PriceSeries::from_risky(names, dates, bars).unwrap()
    }

    fn csv_rows(assets: usize, days: usize) -> String {
        let mut s = CSV_HEADER.join(",") + "\n";
        let mut date = default_start();
        for t in 0..days {
            for a in 0..assets {
                let p = 10.0 + a as f64 + 0.01 * t as f64;
                s += &format!("{date},S{a},{p},{p},{p},{p},100\n");
            }
            date = next_weekday(date);
        }
        s
    }

    #[test]
    fn load_prepends_riskless() {
        let s = read_ohlcv(csv_rows(3, 600).as_bytes()).unwrap();
        assert_eq!(s.n_assets(), 4);
        assert_eq!(s.n_days(), 600);
        assert_eq!(s.assets()[0], RISKLESS);
        assert!(s.closes(0).iter().all(|&c| c == 1.0));
        assert_eq!(s.assets()[1..], ["S0", "S1", "S2"]);
    }

    #[test]
    fn load_rejects_negative_close_with_row() {
        let mut text = csv_rows(2, 3);
        text = text.replacen(
            "2020-01-02,S1,11.01,11.01,11.01,11.01",
            "2020-01-02,S1,11.01,11.01,11.01,-5",
            1,
        );
        let err = read_ohlcv(text.as_bytes()).unwrap_err();
        match err {
            // header line 1, day 0 lines 2-3, day 1 lines 4-5
            DataError::NonPositivePrice { row, field, .. } => {
                assert_eq!(row, 5);
                assert_eq!(field, "close");
            }
            other => panic!("unexpected {other}"),
        }
        assert!(read_ohlcv(text.as_bytes()).unwrap_err().to_string().contains("row 5"));
    }

    #[test]
    fn load_rejects_degenerate_inputs() {
        assert!(matches!(read_ohlcv("".as_bytes()), Err(DataError::NoData)));
        let header_only = CSV_HEADER.join(",") + "\n";
        assert!(matches!(read_ohlcv(header_only.as_bytes()), Err(DataError::NoData)));
        let bad_header = "date,ticker,open,high,low,close,volume\n";
        assert!(matches!(
            read_ohlcv(bad_header.as_bytes()),
            Err(DataError::Header { .. })
        ));

        let dup = csv_rows(1, 2) + "2020-01-02,S0,1,1,1,1,1\n";
        assert!(matches!(
            read_ohlcv(dup.as_bytes()),
            Err(DataError::Duplicate { row: 4, .. })
        ));

        let gap = csv_rows(2, 2) + "2020-01-06,S0,1,1,1,1,1\n";
        assert!(matches!(read_ohlcv(gap.as_bytes()), Err(DataError::Gap { .. })));

        let reserved = csv_rows(1, 1) + "2020-01-02,CASH,1,1,1,1,1\n";
        assert!(matches!(
            read_ohlcv(reserved.as_bytes()),
            Err(DataError::ReservedAsset { row: 3 })
        ));

        let short = csv_rows(1, 1) + "2020-01-02,S0,1,1\n";
        assert!(matches!(
            read_ohlcv(short.as_bytes()),
            Err(DataError::MalformedRow { row: 3, .. })
        ));

        let bad_date = csv_rows(1, 1) + "2020-13-02,S0,1,1,1,1,1\n";
        assert!(matches!(
            read_ohlcv(bad_date.as_bytes()),
            Err(DataError::MalformedRow { row: 3, .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let spec = SyntheticSpec::one_rising(3, 1, 1.005, 0.01, 40);
        let s = generate_synthetic(&spec, 11).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(read_ohlcv(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn synthetic_zero_noise_cases() {
        let flat = SyntheticSpec::one_rising(3, 0, 1.0, 0.0, 30);
        let s = generate_synthetic(&flat, 1).unwrap();
        for a in 0..4 {
            assert!(s.closes(a).iter().all(|&c| c == 1.0));
        }

        let drift = SyntheticSpec::one_rising(1, 1, 1.005, 0.0, 600);
        let s = generate_synthetic(&drift, 1).unwrap();
        for (t, c) in s.closes(1).iter().enumerate() {
            let expect = 1.005f64.powi(t as i32);
            assert!(((c - expect) / expect).abs() < 1e-12, "t={t}: {c} vs {expect}");
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::one_rising(3, 2, 1.001, 0.02, 100);
        let a = generate_synthetic(&spec, 42).unwrap();
        let b = generate_synthetic(&spec, 42).unwrap();
        let c = generate_synthetic(&spec, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a
            .dates()
            .iter()
            .all(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun)));
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        let mut spec = SyntheticSpec::one_rising(1, 1, 1.0, 0.0, 0);
        assert!(generate_synthetic(&spec, 0).is_err());
        spec.days = 5;
        spec.assets[0].volatility = -0.1;
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn moving_average_cases() {
        let s = series_from_closes(&[vec![10.0; 8], vec![1.0, 2.0, 3.0, 2.0, 2.0, 2.0, 2.0, 2.0]]);
        assert!(moving_average(&s, 1, 5)
            .unwrap()
            .iter()
            .all(|&v| (v - 10.0).abs() < 1e-12));
        assert_eq!(moving_average(&s, 2, 2).unwrap()[..3], [1.0, 1.5, 2.5]);
        assert_eq!(moving_average(&s, 2, 1).unwrap(), s.closes(2));
        assert!(matches!(moving_average(&s, 2, 0), Err(DataError::InvalidWindow)));
    }

    #[test]
    fn long_moving_average_matches_direct_mean() {
        let spec = SyntheticSpec::one_rising(1, 1, 1.001, 0.03, 1000);
        let s = generate_synthetic(&spec, 5).unwrap();
        let closes = s.closes(1);
        let ma = moving_average(&s, 1, 10).unwrap();
        for t in [0usize, 3, 9, 10, 500, 999] {
            let lo = (t + 1).saturating_sub(10);
            let direct: f64 = closes[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64;
            assert!((ma[t] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_kind_parsing() {
        for k in FeatureKind::default_set() {
            assert_eq!(k.to_string().parse::<FeatureKind>().unwrap(), k);
        }
        assert!("vwap".parse::<FeatureKind>().is_err());
        assert!("ma0".parse::<FeatureKind>().is_err());
        assert_eq!(
            "aux_close( 2 )".parse::<FeatureKind>().unwrap(),
            FeatureKind::AuxClose(2)
        );
    }

    #[test]
    fn cube_shapes_and_errors() {
        let spec = SyntheticSpec::one_rising(3, 1, 1.005, 0.01, 600);
        let s = generate_synthetic(&spec, 3).unwrap();
        let cube = build_feature_cube(&s, &[FeatureKind::Close]).unwrap();
        assert_eq!((cube.n_assets(), cube.n_days(), cube.n_features()), (4, 600, 1));
        for i in 0..4 {
            for t in [0, 10, 599] {
                assert_eq!(cube.get(i, t, 0), s.closes(i)[t]);
            }
        }
        let cube = build_feature_cube(&s, &FeatureKind::default_set()).unwrap();
        assert_eq!((cube.n_assets(), cube.n_days(), cube.n_features()), (4, 600, 7));
        assert_eq!(cube.get(0, 17, 5), s.closes(2)[17]);

        assert!(matches!(build_feature_cube(&s, &[]), Err(DataError::MissingClose)));
        assert!(matches!(
            build_feature_cube(&s, &[FeatureKind::MovingAverage(5)]),
            Err(DataError::MissingClose)
        ));
        assert!(matches!(
            build_feature_cube(&s, &[FeatureKind::Close, FeatureKind::AuxClose(9)]),
            Err(DataError::UnknownAsset { .. })
        ));
    }

    #[test]
    fn amplification_cases() {
        let s = series_from_closes(&[vec![3.0; 6], vec![1.0, 2.0, 4.0, 4.0, 8.0, 8.0]]);
        let cube = build_feature_cube(&s, &[FeatureKind::Close]).unwrap();
        let st = amplify_state(&cube, 5, 4, 100.0).unwrap();
        assert_eq!(st.shape(), (3, 4, 1));
        for i in 0..2 {
            for k in 0..4 {
                assert_eq!(st.get(i, k, 0), 100.0);
            }
        }
        // days 2..=5 for asset 2: ratios 2, 1, 2, 1
        let got: Vec<f64> = (0..4).map(|k| st.get(2, k, 0)).collect();
        assert_eq!(got, [200.0, 100.0, 200.0, 100.0]);

        // first day: every lag is padding
        let st = amplify_state(&cube, 0, 3, 100.0).unwrap();
        assert!(st.entries().iter().all(|&e| e == 100.0));
        // partial padding: lags before day 1
        let st = amplify_state(&cube, 1, 3, 100.0).unwrap();
        assert_eq!(
            [st.get(2, 0, 0), st.get(2, 1, 0), st.get(2, 2, 0)],
            [100.0, 100.0, 200.0]
        );

        assert!(amplify_state(&cube, 6, 3, 100.0).is_err());
        assert!(amplify_state(&cube, 3, 0, 100.0).is_err());
        assert!(amplify_state(&cube, 3, 2, 0.0).is_err());
    }

    #[test]
    fn amplification_rejects_zero_denominator() {
        let cube = FeatureCube::from_entries(
            1,
            3,
            vec![FeatureKind::Close, FeatureKind::MovingAverage(1)],
            vec![1.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        assert!(matches!(
            amplify_state(&cube, 1, 1, 100.0),
            Err(DataError::DivisionByZero {
                asset: 0,
                day: 1,
                feature: 1
            })
        ));
    }

    #[test]
    fn truncation_keeps_prefix() {
        let spec = SyntheticSpec::one_rising(2, 1, 1.01, 0.02, 50);
        let cube =
            build_feature_cube(&generate_synthetic(&spec, 9).unwrap(), &FeatureKind::default_set()[..4]).unwrap();
        let short = cube.truncated(20).unwrap();
        assert_eq!(short.n_days(), 20);
        for i in 0..3 {
            for t in 0..20 {
                for j in 0..4 {
                    assert_eq!(short.get(i, t, j), cube.get(i, t, j));
                }
            }
        }
    }
}
