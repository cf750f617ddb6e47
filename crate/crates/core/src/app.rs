//! Command-line front end: configuration, the four subcommands and their
//! artifacts.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::cv::{build_cpcv_plan, run_backtest, Allocator, BacktestConfig, BacktestResult, METRICS_HEADER};
use crate::data::{compute_log_returns, load_prices, synth_gbm, DatasetManifest, PriceMatrix};
use crate::error::Error;
use crate::metrics::{mean_std, MetricsReport};
use crate::stats::{cld_markdown, compact_letter_display, tukey_hsd, CldLabels, GroupSample, TukeyResult, DEFAULT_ALPHA};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// An error tagged with the stage that failed and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.error)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn at<T>(code: i32, stage: &'static str, r: crate::Result<T>) -> Outcome<T> {
    r.map_err(|error| Failure { code, stage, error })
}

#[derive(Parser, Debug)]
#[command(name = "hopfolio", version, about = "Hopfield portfolio allocators and CPCV backtests")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic price panel as CSV.
    Synth(SynthArgs),
    /// Run a CPCV backtest for each allocator.
    Backtest(BacktestArgs),
    /// Tukey HSD and letter display over per-path Sharpe ratios.
    Compare(CompareArgs),
    /// Rebuild the markdown summary from a metrics CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON panel description.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the panel description.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Destination price CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BacktestArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Training seed; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Results directory; overrides the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated allocator labels, e.g. EW,MVO,HOP-POOL.
    #[arg(long, value_delimiter = ',')]
    pub allocators: Option<Vec<String>>,
    /// Splits fitted concurrently; 0 uses every core.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Result directories, one per dataset.
    #[arg(long, required = true, num_args = 1..)]
    pub results: Vec<PathBuf>,
    /// Family-wise significance level.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Output directory; defaults to the first results directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding metrics.csv.
    #[arg(long)]
    pub results: PathBuf,
    /// Output directory; defaults to the results directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Correlated GBM panel description. `drifts` and `vols` hold one value per
/// asset, or a single value shared by all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_assets: usize,
    pub n_days: usize,
    pub drifts: Vec<f64>,
    pub vols: Vec<f64>,
    #[serde(default)]
    pub correlation: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn generate(&self) -> crate::Result<PriceMatrix> {
        let spread = |v: &[f64], what: &str| -> crate::Result<Vec<f64>> {
            match v.len() {
                1 => Ok(vec![v[0]; self.n_assets]),
                n if n == self.n_assets => Ok(v.to_vec()),
                n => Err(Error::InvalidArgument(format!(
                    "{what} has {n} entries for {} assets",
                    self.n_assets
                ))),
            }
        };
        let drifts = spread(&self.drifts, "drifts")?;
        let vols = spread(&self.vols, "vols")?;
        let corr: Vec<Vec<f64>> = (0..self.n_assets)
            .map(|i| {
                (0..self.n_assets)
                    .map(|j| if i == j { 1.0 } else { self.correlation })
                    .collect()
            })
            .collect();
        synth_gbm(self.n_assets, self.n_days, &drifts, &vols, &corr, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv { path: PathBuf },
    Synth(SynthSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpcvConfig {
    pub n_groups: usize,
    pub k_test: usize,
    pub purge: usize,
    pub embargo: usize,
}

impl Default for CpcvConfig {
    fn default() -> Self {
        Self {
            n_groups: crate::cv::DEFAULT_GROUPS,
            k_test: crate::cv::DEFAULT_TEST_GROUPS,
            purge: crate::cv::DEFAULT_PURGE,
            embargo: crate::cv::DEFAULT_EMBARGO,
        }
    }
}

fn default_name() -> String {
    "DATA".into()
}

fn default_allocators() -> Vec<Allocator> {
    Allocator::ALL.to_vec()
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSource,
    #[serde(default = "default_allocators")]
    pub allocators: Vec<Allocator>,
    #[serde(default)]
    pub cpcv: CpcvConfig,
    #[serde(default)]
    pub backtest: BacktestConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl RunConfig {
    /// Parse a config file; relative dataset and output paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSource::Csv { path: p } = &mut cfg.dataset {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.allocators.is_empty() {
            return Err(Error::InvalidArgument("no allocators configured".into()));
        }
        self.backtest.train.validate()
    }
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Per-method metric rows in first-appearance order.
pub type MetricRows = Vec<(String, Vec<MetricsReport>)>;

/// Methods as columns and the four metrics as rows, each cell `mean ± std`
/// over paths (just the mean when every path agrees).
pub fn results_markdown(name: &str, rows: &MetricRows) -> String {
    let mut out = format!("### {name}\n\n|");
    for (m, _) in rows {
        out.push_str(&format!(" | {m}"));
    }
    out.push_str(" |\n|---");
    for _ in rows {
        out.push_str("|---:");
    }
    out.push_str("|\n");
    for (k, label) in MetricsReport::TABLE_ROWS.iter().enumerate() {
        out.push_str(&format!("| {label}"));
        for (_, reports) in rows {
            let xs: Vec<f64> = reports.iter().map(|r| r.values()[k]).collect();
            let (m, s) = mean_std(&xs);
            if s == 0.0 {
                out.push_str(&format!(" | {m:.3}"));
            } else {
                out.push_str(&format!(" | {m:.3} ± {s:.3}"));
            }
        }
        out.push_str(" |\n");
    }
    out
}

pub fn read_metrics_csv(path: &Path) -> crate::Result<MetricRows> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Malformed(format!("unexpected metrics header {header:?}")));
    }
    let mut rows: MetricRows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |k: usize| -> crate::Result<f64> {
            rec[k]
                .trim()
                .parse()
                .map_err(|_| Error::Malformed(format!("row {}: bad number {:?}", i + 1, &rec[k])))
        };
        let report = MetricsReport {
            mean_annual: num(2)?,
            sharpe_annual: num(3)?,
            sortino_annual: num(4)?,
            avg_drawdown: num(5)?,
        };
        let method = rec[0].to_string();
        match rows.iter_mut().find(|(m, _)| *m == method) {
            Some((_, v)) => v.push(report),
            None => rows.push((method, vec![report])),
        }
    }
    Ok(rows)
}

pub fn cmd_synth(args: &SynthArgs) -> Outcome<()> {
    let text = at(EXIT_CONFIG, "config", fs::read_to_string(&args.config).map_err(Error::from))?;
    let mut spec: SynthSpec = at(EXIT_CONFIG, "config", serde_json::from_str(&text).map_err(Error::from))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let prices = at(EXIT_CONFIG, "synth", spec.generate())?;
    let mut buf = Vec::new();
    at(EXIT_RUNTIME, "synth", prices.write_csv(&mut buf))?;
    at(EXIT_DATA, "write", write_atomic(&args.out, &buf))
}

fn file_label(method: &str) -> String {
    method.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_")
}

pub fn cmd_backtest(args: &BacktestArgs) -> Outcome<PathBuf> {
    let mut cfg = at(EXIT_CONFIG, "config", RunConfig::load(&args.config))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(list) = &args.allocators {
        cfg.allocators = at(EXIT_CONFIG, "config", list.iter().map(|s| Allocator::parse(s)).collect())?;
    }
    if let Some(jobs) = args.jobs {
        cfg.backtest.jobs = jobs;
    }
    cfg.backtest.train.seed = cfg.seed;
    at(EXIT_CONFIG, "config", cfg.validate())?;

    let (prices, source) = match &cfg.dataset {
        DatasetSource::Csv { path } => (at(EXIT_DATA, "load", load_prices(path))?, path.display().to_string()),
        DatasetSource::Synth(spec) => (at(EXIT_CONFIG, "synth", spec.generate())?, "synthetic".to_string()),
    };
    let returns = compute_log_returns(&prices);
    let c = &cfg.cpcv;
    let plan = at(
        EXIT_CONFIG,
        "plan",
        build_cpcv_plan(returns.n_rows(), c.n_groups, c.k_test, c.purge, c.embargo),
    )?;

    let mut results: Vec<BacktestResult> = Vec::new();
    for &a in &cfg.allocators {
        info!("backtesting {} over {} splits", a.label(), plan.splits.len());
        results.push(at(EXIT_RUNTIME, "backtest", run_backtest(a, &plan, &returns, &cfg.backtest))?);
    }

    // everything is computed before the first write
    let mut files: BTreeMap<PathBuf, Vec<u8>> = BTreeMap::new();
    let mut metrics = Vec::new();
    for (i, res) in results.iter().enumerate() {
        at(EXIT_RUNTIME, "metrics", res.write_metrics_csv(&mut metrics, i == 0))?;
        let json = at(EXIT_RUNTIME, "serialize", serde_json::to_vec_pretty(res).map_err(Error::from))?;
        let label = file_label(&res.method);
        files.insert(cfg.out.join(format!("{label}.json")), json);
        let mut cum = Vec::new();
        at(EXIT_RUNTIME, "cumulative", res.write_cumulative_csv(&mut cum))?;
        files.insert(cfg.out.join(format!("cumulative_{label}.csv")), cum);
    }
    files.insert(cfg.out.join("metrics.csv"), metrics);
    let rows: MetricRows = results
        .iter()
        .map(|r| (r.method.clone(), r.paths.iter().map(|p| p.metrics).collect()))
        .collect();
    files.insert(cfg.out.join("report.md"), results_markdown(&cfg.name, &rows).into_bytes());
    let manifest = DatasetManifest::describe(&cfg.name, &prices, source);
    let manifest = at(EXIT_RUNTIME, "serialize", serde_json::to_vec_pretty(&manifest).map_err(Error::from))?;
    files.insert(cfg.out.join("dataset.json"), manifest);
    for (path, bytes) in &files {
        at(EXIT_DATA, "write", write_atomic(path, bytes))?;
    }
    Ok(cfg.out)
}

fn dataset_name(dir: &Path) -> String {
    fs::read(dir.join("dataset.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<DatasetManifest>(&b).ok())
        .map(|m| m.name)
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(default_name)
}

/// Tukey HSD on per-path Sharpe ratios of each method in one results
/// directory.
pub fn compare_dir(dir: &Path, alpha: f64) -> Outcome<(TukeyResult, CldLabels)> {
    let rows = at(EXIT_DATA, "load", read_metrics_csv(&dir.join("metrics.csv")))?;
    if rows.len() < 2 {
        return Err(Failure {
            code: EXIT_CONFIG,
            stage: "compare",
            error: Error::InvalidArgument(format!("{} holds fewer than two methods", dir.display())),
        });
    }
    let counts: Vec<usize> = rows.iter().map(|(_, r)| r.len()).collect();
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(Failure {
            code: EXIT_CONFIG,
            stage: "compare",
            error: Error::InvalidArgument(format!("mismatched path counts {counts:?}")),
        });
    }
    let groups: Vec<GroupSample> = rows
        .iter()
        .map(|(m, r)| GroupSample::new(m.clone(), r.iter().map(|x| x.sharpe_annual).collect()))
        .collect();
    let res = at(EXIT_RUNTIME, "tukey", tukey_hsd(&groups, alpha))?;
    let cld = at(EXIT_RUNTIME, "cld", compact_letter_display(&res))?;
    Ok((res, cld))
}

pub fn cmd_compare(args: &CompareArgs) -> Outcome<PathBuf> {
    let mut tests = BTreeMap::new();
    let mut letters = Vec::new();
    for dir in &args.results {
        if !dir.is_dir() {
            return Err(Failure {
                code: EXIT_DATA,
                stage: "load",
                error: Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("results directory {} not found", dir.display()),
                )),
            });
        }
        let (res, cld) = compare_dir(dir, args.alpha)?;
        let name = dataset_name(dir);
        tests.insert(name.clone(), res);
        letters.push((name, cld));
    }
    let out = args.out.clone().unwrap_or_else(|| args.results[0].clone());
    let json = at(EXIT_RUNTIME, "serialize", serde_json::to_vec_pretty(&tests).map_err(Error::from))?;
    let md = cld_markdown(&letters);
    at(EXIT_DATA, "write", write_atomic(&out.join("tukey.json"), &json))?;
    at(EXIT_DATA, "write", write_atomic(&out.join("cld.md"), md.as_bytes()))?;
    Ok(out)
}

pub fn cmd_report(args: &ReportArgs) -> Outcome<PathBuf> {
    let rows = at(EXIT_DATA, "load", read_metrics_csv(&args.results.join("metrics.csv")))?;
    let out = args.out.clone().unwrap_or_else(|| args.results.join("report.md"));
    let md = results_markdown(&dataset_name(&args.results), &rows);
    at(EXIT_DATA, "write", write_atomic(&out, md.as_bytes()))?;
    Ok(out)
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| a.out.clone()),
        Command::Backtest(a) => cmd_backtest(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(path) => {
            info!("wrote {}", path.display());
            0
        }
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
