//! Price ingestion, log returns, sliding-window batches and a synthetic
//! geometric-Brownian-motion panel generator.

use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// T x N panel of strictly positive prices, one column per ticker.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceMatrix {
    dates: Vec<String>,
    tickers: Vec<String>,
    columns: Vec<Vec<f64>>,
}

/// (T - 1) x N panel of daily log returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnMatrix {
    dates: Vec<String>,
    tickers: Vec<String>,
    columns: Vec<Vec<f64>>,
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}

impl PriceMatrix {
    pub fn new(dates: Vec<String>, tickers: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if tickers.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 tickers, got {}",
                tickers.len()
            )));
        }
        if dates.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 dates, got {}",
                dates.len()
            )));
        }
        if columns.len() != tickers.len() || columns.iter().any(|c| c.len() != dates.len()) {
            return Err(Error::Malformed("panel shape does not match labels".into()));
        }
        for (row, pair) in dates.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                return Err(Error::NonIncreasingDates {
                    row: row + 1,
                    date: pair[1].clone(),
                });
            }
        }
        for (c, col) in columns.iter().enumerate() {
            for (row, &v) in col.iter().enumerate() {
                if v.is_nan() {
                    return Err(Error::MissingValue {
                        row,
                        column: tickers[c].clone(),
                    });
                }
                if v <= 0.0 || !v.is_finite() {
                    return Err(Error::NonPositivePrice {
                        row,
                        column: tickers[c].clone(),
                        value: v,
                    });
                }
            }
        }
        Ok(Self {
            dates,
            tickers,
            columns,
        })
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.columns[i][t]
    }

    /// Write in the same CSV layout that [`load_prices`] reads.
    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["date".to_string()];
        header.extend(self.tickers.iter().cloned());
        out.write_record(&header)?;
        for (t, date) in self.dates.iter().enumerate() {
            let mut record = vec![date.clone()];
            record.extend(self.columns.iter().map(|c| format!("{:?}", c[t])));
            out.write_record(&record)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Read `date,<ticker1>,...,<tickerN>` CSV. Rows in error messages count
/// data lines from 1.
pub fn load_prices(path: impl AsRef<Path>) -> Result<PriceMatrix> {
    let file = std::fs::File::open(path.as_ref())?;
    read_prices(file)
}

pub fn read_prices(reader: impl std::io::Read) -> Result<PriceMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 3 || !header[0].eq_ignore_ascii_case("date") {
        return Err(Error::Malformed(
            "header must be date,<ticker1>,...,<tickerN> with at least two tickers".into(),
        ));
    }
    let tickers: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut dates: Vec<String> = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); tickers.len()];
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::Malformed(format!(
                "row {row} has {} fields, expected {}",
                record.len(),
                header.len()
            )));
        }
        let date = record[0].to_string();
        if parse_date(&date).is_none() {
            return Err(Error::Malformed(format!(
                "row {row}: date {date:?} is not YYYY-MM-DD"
            )));
        }
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(Error::NonIncreasingDates { row, date });
            }
        }
        for (c, cell) in record.iter().skip(1).enumerate() {
            let missing = || Error::MissingValue {
                row,
                column: tickers[c].clone(),
            };
            if cell.is_empty() {
                return Err(missing());
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Malformed(format!("row {row}, column {}: {cell:?}", tickers[c]))
            })?;
            if v.is_nan() {
                return Err(missing());
            }
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::NonPositivePrice {
                    row,
                    column: tickers[c].clone(),
                    value: v,
                });
            }
            columns[c].push(v);
        }
        dates.push(date);
    }
    PriceMatrix::new(dates, tickers, columns)
}

/// `r[t][i] = ln P[t+1][i] - ln P[t][i]`, dated by the later day.
pub fn compute_log_returns(p: &PriceMatrix) -> ReturnMatrix {
    let columns = p
        .columns
        .iter()
        .map(|col| col.windows(2).map(|w| w[1].ln() - w[0].ln()).collect())
        .collect();
    ReturnMatrix {
        dates: p.dates[1..].to_vec(),
        tickers: p.tickers.clone(),
        columns,
    }
}

impl ReturnMatrix {
    pub fn new(dates: Vec<String>, tickers: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if columns.len() != tickers.len() || columns.iter().any(|c| c.len() != dates.len()) {
            return Err(Error::Malformed("panel shape does not match labels".into()));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Malformed("non-finite return".into()));
        }
        Ok(Self {
            dates,
            tickers,
            columns,
        })
    }

    /// Build from row-major values with synthetic `row-<t>` dates.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        let tickers = (0..n).map(|i| format!("A{i}")).collect();
        let dates = (0..rows.len()).map(|t| format!("row-{t:06}")).collect();
        let columns = (0..n).map(|i| rows.iter().map(|r| r[i]).collect()).collect();
        Self::new(dates, tickers, columns)
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.columns[i][t]
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[t]).collect()
    }

    /// Contiguous rows `range` as a new panel.
    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            dates: self.dates[range.clone()].to_vec(),
            tickers: self.tickers.clone(),
            columns: self.columns.iter().map(|c| c[range.clone()].to_vec()).collect(),
        }
    }

    /// Arbitrary rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            dates: rows.iter().map(|&t| self.dates[t].clone()).collect(),
            tickers: self.tickers.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&t| c[t]).collect())
                .collect(),
        }
    }

    /// Rows `[origin, origin + len)` as a `len x N` tensor.
    pub fn window(&self, origin: usize, len: usize) -> Tensor {
        let n = self.n_assets();
        let mut data = Vec::with_capacity(len * n);
        for t in origin..origin + len {
            data.extend(self.columns.iter().map(|c| c[t]));
        }
        Tensor::new(len, n, data).expect("window shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub lookback: usize,
    pub batch_size: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            lookback: 128,
            batch_size: 32,
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback < 2 || self.batch_size < 1 {
            return Err(Error::InvalidArgument(format!(
                "lookback must be >= 2 and batch size >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Window origins into a [`ReturnMatrix`], grouped into batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSet {
    lookback: usize,
    origins: Vec<usize>,
    batch_size: usize,
}

impl BatchSet {
    pub fn from_origins(origins: Vec<usize>, cfg: BatchConfig) -> Self {
        Self {
            lookback: cfg.lookback,
            origins,
            batch_size: cfg.batch_size,
        }
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    /// Every window origin, in order.
    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    pub fn n_windows(&self) -> usize {
        self.origins.len()
    }

    /// Batches of at most `batch_size` origins; the last one may be short.
    pub fn batches(&self) -> std::slice::Chunks<'_, usize> {
        self.origins.chunks(self.batch_size)
    }

    pub fn n_batches(&self) -> usize {
        self.origins.len().div_ceil(self.batch_size)
    }
}

/// All length-`lookback` windows inside `range`, each shifted one row from
/// the previous.
pub fn make_batches(r: &ReturnMatrix, cfg: BatchConfig, range: Range<usize>) -> Result<BatchSet> {
    cfg.validate()?;
    if range.end > r.n_rows() || range.start > range.end {
        return Err(Error::InvalidArgument(format!(
            "range {range:?} outside {} rows",
            r.n_rows()
        )));
    }
    if range.len() < cfg.lookback {
        return Err(Error::InsufficientHistory {
            needed: cfg.lookback,
            available: range.len(),
        });
    }
    let origins = (range.start..=range.end - cfg.lookback).collect();
    Ok(BatchSet::from_origins(origins, cfg))
}

/// Correlated GBM panel. `drifts` and `vols` are per day; the price at day
/// `t` is `100 * exp(sum of log returns)`, starting on 2000-01-03 and
/// skipping weekends.
pub fn synth_gbm(
    n_assets: usize,
    n_days: usize,
    drifts: &[f64],
    vols: &[f64],
    corr: &[Vec<f64>],
    seed: u64,
) -> Result<PriceMatrix> {
    if drifts.len() != n_assets || vols.len() != n_assets || corr.len() != n_assets {
        return Err(Error::InvalidArgument(
            "drifts, vols and corr must match n_assets".into(),
        ));
    }
    if vols.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("vols must be finite and >= 0".into()));
    }
    let chol = correlation_factor(corr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = vec![Vec::with_capacity(n_days); n_assets];
    let mut log_level = vec![100f64.ln(); n_assets];
    let mut z = vec![0.0; n_assets];
    for t in 0..n_days {
        if t > 0 {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            for i in 0..n_assets {
                let shock: f64 = (0..=i).map(|j| chol[i][j] * z[j]).sum();
                log_level[i] += drifts[i] - 0.5 * vols[i] * vols[i] + vols[i] * shock;
            }
        }
        for i in 0..n_assets {
            columns[i].push(log_level[i].exp());
        }
    }
    let tickers = (0..n_assets).map(|i| format!("SYN{i:02}")).collect();
    PriceMatrix::new(business_days(n_days), tickers, columns)
}

fn business_days(n: usize) -> Vec<String> {
    let mut day = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(day.format("%Y-%m-%d").to_string());
        }
        day += Duration::days(1);
    }
    out
}

/// Lower-triangular factor of a correlation matrix; zero pivots are allowed
/// so singular PSD matrices are accepted.
fn correlation_factor(corr: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = corr.len();
    const TOL: f64 = 1e-10;
    for i in 0..n {
        if corr[i].len() != n || (corr[i][i] - 1.0).abs() > TOL {
            return Err(Error::InvalidArgument(
                "correlation must be square with unit diagonal".into(),
            ));
        }
        for j in 0..i {
            if (corr[i][j] - corr[j][i]).abs() > TOL {
                return Err(Error::InvalidArgument("correlation must be symmetric".into()));
            }
        }
    }
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = corr[i][i] - s;
                if d < -TOL {
                    return Err(Error::NotPositiveSemidefinite);
                }
                l[i][i] = d.max(0.0).sqrt();
            } else if l[j][j] > TOL {
                l[i][j] = (corr[i][j] - s) / l[j][j];
            } else if (corr[i][j] - s).abs() > 1e-8 {
                return Err(Error::NotPositiveSemidefinite);
            }
        }
    }
    Ok(l)
}

/// Dataset summary emitted alongside ingested panels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub n_assets: usize,
    pub start: String,
    pub end: String,
    pub path: String,
}

impl DatasetManifest {
    pub fn describe(name: impl Into<String>, prices: &PriceMatrix, path: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            n_assets: prices.n_assets(),
            start: prices.dates.first().cloned().unwrap_or_default(),
            end: prices.dates.last().cloned().unwrap_or_default(),
            path: path.into(),
        }
    }
}
