use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use folio_core::backtest::{compare as compare_reports, run_backtest, Agent, Baseline, MetricsReport, TestWindow};
use folio_core::es::train_es;
use folio_core::market_data::{FeatureCube, FeatureKind, PriceSeries};
use folio_core::neural::{AgentKind, Checkpoint, CHECKPOINT_VERSION};
use folio_core::pgac::{train_pgac, DayRange};
use serde_json::json;

use crate::config::{DataSource, RunConfig};
use crate::AgentArg;

const DEFAULT_OUT: &str = "runs";

fn output_dir(flag: Option<PathBuf>, config: &RunConfig) -> PathBuf {
    flag.or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub struct IngestArgs {
    pub config: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub synthetic: bool,
    pub write: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn ingest(args: IngestArgs) -> Result<()> {
    let explicit_config = args.config.is_some();
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(path) = args.csv {
        config.data = DataSource::Csv { path };
    }
    if args.synthetic && !matches!(config.data, DataSource::Synthetic { .. }) {
        config.data = DataSource::default();
    }
    if let (Some(s), DataSource::Synthetic { seed, .. }) = (args.seed, &mut config.data) {
        *seed = s;
    }

    let series = config.data.load()?;
    if !explicit_config {
        // the built-in feature list names assets 1..=3; drop the ones this data lacks
        let n = series.n_assets();
        config
            .features
            .retain(|f| !matches!(f, FeatureKind::AuxClose(a) if *a >= n));
    }
    let cube = config.build_cube(&series)?;
    print_summary(&series, &cube);

    if args.synthetic {
        let path = match args.write {
            Some(p) => p,
            None => {
                let dir = output_dir(args.out, &config);
                create_dir(&dir)?;
                dir.join("synthetic.csv")
            }
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        series.write_csv(writer(&path)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn print_summary(series: &PriceSeries, cube: &FeatureCube) {
    let dates = series.dates();
    println!("assets: {} ({})", series.n_assets(), series.assets().join(", "));
    println!(
        "days:   {} ({} to {})",
        series.n_days(),
        dates.first().map(ToString::to_string).unwrap_or_default(),
        dates.last().map(ToString::to_string).unwrap_or_default()
    );
    println!("{:<14} {:>12} {:>12} {:>12}", "feature", "min", "mean", "max");
    for (j, name) in cube.feature_names().iter().enumerate() {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        let mut count = 0usize;
        // the riskless asset is constant and would only dilute the statistics
        for i in 1..cube.n_assets() {
            for t in 0..cube.n_days() {
                let v = cube.get(i, t, j);
                min = min.min(v);
                max = max.max(v);
                sum += v;
                count += 1;
            }
        }
        let mean = if count > 0 { sum / count as f64 } else { f64::NAN };
        println!("{name:<14} {min:>12.6} {mean:>12.6} {max:>12.6}");
    }
}

pub struct TrainArgs {
    pub agent: AgentArg,
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config = config.with_seed(seed);
    }
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    let dir = output_dir(args.out, &config);
    config.output_dir = Some(dir.clone());

    let series = config.data.load()?;
    let cube = config.build_cube(&series)?;
    let range = config.train_range();
    let context = json!({
        "config": config.provenance()?,
        "train_range": range,
    });

    let (checkpoint, history_csv, summary) = match args.agent {
        AgentArg::Pgac => {
            config.check_windows(cube.n_days(), config.pgac.horizon)?;
            let env = config.env.with_horizon(config.pgac.horizon);
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
            let outcome = pool.install(|| train_pgac(&cube, &env, &config.pgac.train, range))?;
            let mut csv = Vec::new();
            outcome.history.write_csv(&mut csv)?;
            let summary = outcome
                .history
                .rows
                .last()
                .map(|r| format!("last batch: mean value {:.4}, sigma {:.4}", r.portfolio_value, r.sigma))
                .unwrap_or_else(|| "no updates".into());
            let ckpt = Checkpoint {
                format_version: CHECKPOINT_VERSION,
                agent: AgentKind::Pgac,
                policy: outcome.policy.net,
                value: Some(outcome.value),
                sigma: Some(outcome.policy.sigma),
                seed: config.seed,
                updates: outcome.updates,
                context,
            };
            (ckpt, csv, summary)
        }
        AgentArg::Es => {
            config.check_windows(cube.n_days(), config.es.horizon)?;
            let env = config.env.with_horizon(config.es.horizon);
            let (params, history) = train_es(&cube, &env, &config.es.train, range, workers)?;
            let mut csv = Vec::new();
            history.write_csv(&mut csv)?;
            let summary = history
                .rows
                .last()
                .map(|r| {
                    format!(
                        "last iteration: mean fitness {:.4}, best {:.4}",
                        r.mean_fitness, r.best_fitness
                    )
                })
                .unwrap_or_else(|| "no iterations".into());
            let ckpt = Checkpoint {
                format_version: CHECKPOINT_VERSION,
                agent: AgentKind::Es,
                policy: params,
                value: None,
                sigma: None,
                seed: config.seed,
                updates: history.rows.len(),
                context,
            };
            (ckpt, csv, summary)
        }
    };

    create_dir(&dir)?;
    checkpoint.save(dir.join("checkpoint.json"))?;
    fs::write(dir.join("history.csv"), history_csv).context("writing history.csv")?;
    write_file(&dir.join("config.resolved.toml"), &config.to_toml()?)?;
    println!("{summary}");
    println!("wrote {}", dir.join("checkpoint.json").display());
    Ok(())
}

pub struct BacktestArgs {
    pub checkpoint: Option<PathBuf>,
    pub baseline: Option<Baseline>,
    pub config: Option<PathBuf>,
    pub window: Option<TestWindow>,
    pub trial: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn backtest(args: BacktestArgs) -> Result<()> {
    let checkpoint = args
        .checkpoint
        .as_ref()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .transpose()?;

    let mut config = match (&args.config, &checkpoint) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(ckpt)) => RunConfig::from_json(
            ckpt.context
                .get("config")
                .ok_or_else(|| anyhow!("checkpoint carries no run config; pass --config"))?,
        )?,
        (None, None) => bail!("--config is required for baselines"),
    };

    let (agent, horizon, train_last, label) = match (&checkpoint, args.baseline) {
        (Some(ckpt), _) => {
            config = config.with_seed(ckpt.seed);
            let agent = Agent::from_checkpoint(ckpt)?;
            let train_last = ckpt
                .context
                .get("train_range")
                .and_then(|v| serde_json::from_value::<DayRange>(v.clone()).ok())
                .map_or(config.train_range().last, |r| r.last);
            let label = format!("{}-seed{}", agent.label(), ckpt.seed);
            (agent, ckpt.policy.arch().horizon, Some(train_last), label)
        }
        (None, Some(baseline)) => {
            let agent = Agent::Baseline(baseline);
            let label = agent.label().to_string();
            (agent, config.es.horizon, None, label)
        }
        (None, None) => bail!("pass --checkpoint or --baseline"),
    };

    let dir = output_dir(args.out, &config);
    config.output_dir = Some(dir.clone());
    let series = config.data.load()?;
    let cube = config.build_cube(&series)?;
    let window = args
        .window
        .unwrap_or_else(|| TestWindow::after(config.train_range(), config.test_days));
    let env = config.env.with_horizon(horizon);
    let curve = run_backtest(&agent, &cube, window, train_last, &env)?;
    let report = MetricsReport::from_curve(args.trial.unwrap_or(label), &curve);

    create_dir(&dir)?;
    let json = report.to_json()?;
    write_file(&dir.join("report.json"), &json)?;
    let mut equity = writer(&dir.join("equity.csv"))?;
    curve.write_csv(&mut equity)?;
    equity.flush()?;
    write_file(&dir.join("config.resolved.toml"), &config.to_toml()?)?;
    println!("{json}");
    Ok(())
}

pub fn compare(paths: &[PathBuf], csv: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let mut reports = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(path).with_context(|| format!("reading report {}", path.display()))?;
        let mut report =
            MetricsReport::from_json(&text).with_context(|| format!("parsing report {}", path.display()))?;
        if report.trial.is_empty() {
            report.trial = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        reports.push(report);
    }
    let table = compare_reports(&reports)?;
    let mut text = Vec::new();
    table.write_csv(&mut text)?;
    std::io::stdout().write_all(&text)?;
    if let Some(path) = csv {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = json {
        write_file(path, &table.to_json()?)?;
    }
    Ok(())
}
