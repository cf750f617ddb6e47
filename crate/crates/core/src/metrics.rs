//! Portfolio return series and the four reported performance metrics.

use serde::{Deserialize, Serialize};

use crate::data::ReturnMatrix;
use crate::error::{Error, Result};

/// Trading days per year.
pub const ANNUALIZATION: f64 = 252.0;
/// Annual risk-free rate.
pub const RISK_FREE: f64 = 0.0;
/// Tolerance on `sum(w) = 1` for portfolio weights.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortfolioSeries {
    pub dates: Vec<String>,
    pub values: Vec<f64>,
}

impl PortfolioSeries {
    pub fn new(dates: Vec<String>, values: Vec<f64>) -> Self {
        Self { dates, values }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        let dates = (0..values.len()).map(|t| format!("row-{t:06}")).collect();
        Self { dates, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `exp(cumsum(values)) - 1` for each day.
    pub fn cumulative_returns(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.values
            .iter()
            .map(|v| {
                acc += v;
                acc.exp() - 1.0
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_annual: f64,
    pub sharpe_annual: f64,
    pub sortino_annual: f64,
    pub avg_drawdown: f64,
}

pub fn check_simplex(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::InvalidArgument(format!(
            "weight vector has {} entries for {n} assets",
            w.len()
        )));
    }
    let total: f64 = w.iter().sum();
    if w.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidArgument(format!(
            "weights are not on the unit simplex (sum {total})"
        )));
    }
    Ok(())
}

/// `R_p(t) = w . R(t)` for every row.
pub fn portfolio_returns(w: &[f64], r: &ReturnMatrix) -> Result<PortfolioSeries> {
    check_simplex(w, r.n_assets())?;
    let values = (0..r.n_rows())
        .map(|t| w.iter().enumerate().map(|(i, wi)| wi * r.get(t, i)).sum())
        .collect();
    Ok(PortfolioSeries::new(r.dates().to_vec(), values))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Annualized Sharpe ratio with sample standard deviation.
pub fn sharpe_ratio(s: &PortfolioSeries) -> Result<f64> {
    if s.len() < 2 {
        return Err(Error::InvalidArgument("Sharpe ratio needs two returns".into()));
    }
    let sd = sample_std(&s.values);
    if !(sd > 0.0) {
        return Err(Error::DegenerateSeries);
    }
    Ok(ANNUALIZATION.sqrt() * (mean(&s.values) - RISK_FREE / ANNUALIZATION) / sd)
}

/// Annualized Sortino ratio; the downside deviation averages `min(r, 0)^2`
/// over every observation.
pub fn sortino_ratio(s: &PortfolioSeries) -> Result<f64> {
    if !s.values.iter().any(|&v| v < 0.0) {
        return Err(Error::UndefinedDownside);
    }
    let downside = (s.values.iter().map(|&v| v.min(0.0).powi(2)).sum::<f64>()
        / s.len() as f64)
        .sqrt();
    Ok(ANNUALIZATION.sqrt() * mean(&s.values) / downside)
}

/// Mean fractional distance below the running wealth peak.
pub fn average_drawdown(s: &PortfolioSeries) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::InvalidArgument("empty series".into()));
    }
    let mut log_wealth = 0.0;
    let mut peak = f64::NEG_INFINITY;
    let mut total = 0.0;
    for v in &s.values {
        log_wealth += v;
        peak = peak.max(log_wealth);
        total += 1.0 - (log_wealth - peak).exp();
    }
    Ok(total / s.len() as f64)
}

/// Mean and sample standard deviation over paths, accumulated as deviations
/// from the first value so identical inputs give a spread of exactly zero.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let Some(&first) = xs.first() else {
        return (f64::NAN, f64::NAN);
    };
    let n = xs.len() as f64;
    let (sum, sum_sq) = xs
        .iter()
        .fold((0.0, 0.0), |(s, q), &x| (s + (x - first), q + (x - first) * (x - first)));
    let sd = if xs.len() > 1 {
        ((sum_sq - sum * sum / n) / (n - 1.0)).max(0.0).sqrt()
    } else {
        0.0
    };
    (first + sum / n, sd)
}

pub fn annual_mean(s: &PortfolioSeries) -> f64 {
    ANNUALIZATION * mean(&s.values)
}

/// All four metrics. A series without losses reports an infinite Sortino
/// ratio instead of failing.
pub fn report(s: &PortfolioSeries) -> Result<MetricsReport> {
    let sortino = match sortino_ratio(s) {
        Err(Error::UndefinedDownside) => f64::INFINITY,
        other => other?,
    };
    Ok(MetricsReport {
        mean_annual: annual_mean(s),
        sharpe_annual: sharpe_ratio(s)?,
        sortino_annual: sortino,
        avg_drawdown: average_drawdown(s)?,
    })
}

impl MetricsReport {
    pub const TABLE_ROWS: [&'static str; 4] = ["Mean", "Sharpe", "Sortino", "Avg. DD"];

    pub fn values(&self) -> [f64; 4] {
        [
            self.mean_annual,
            self.sharpe_annual,
            self.sortino_annual,
            self.avg_drawdown,
        ]
    }

    /// `| Mean | Sharpe | Sortino | Avg. DD |` values as a markdown row.
    pub fn markdown_row(&self, label: &str) -> String {
        let cells: Vec<String> = self.values().iter().map(|v| format!("{v:.3}")).collect();
        format!("| {label} | {} |", cells.join(" | "))
    }
}
