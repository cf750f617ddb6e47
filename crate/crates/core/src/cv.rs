//! Combinatorial purged cross-validation and the backtest driver.

use std::collections::BTreeSet;
use std::io::Write;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{equal_weights, hrp_allocate, mvo_min_variance, sample_covariance};
use crate::data::ReturnMatrix;
use crate::error::{Error, Result};
use crate::metrics::{mean_std, report, MetricsReport, PortfolioSeries};
use crate::models::{ArchConfig, LossKind, Model, ModelKind, ModelSpec};
use crate::train::{infer_weights, train_model, TrainConfig, TrainHistory};

pub const DEFAULT_GROUPS: usize = 10;
pub const DEFAULT_TEST_GROUPS: usize = 8;
pub const DEFAULT_PURGE: usize = 21;
pub const DEFAULT_EMBARGO: usize = 21;

/// Contiguous near-equal row intervals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GroupPartition {
    pub n_rows: usize,
    pub groups: Vec<Range<usize>>,
}

impl GroupPartition {
    pub fn new(n_rows: usize, n_groups: usize) -> Result<Self> {
        if n_groups < 1 || n_rows < n_groups {
            return Err(Error::InvalidArgument(format!(
                "cannot split {n_rows} rows into {n_groups} groups"
            )));
        }
        let (base, extra) = (n_rows / n_groups, n_rows % n_groups);
        let mut groups = Vec::with_capacity(n_groups);
        let mut start = 0;
        for g in 0..n_groups {
            let len = base + usize::from(g < extra);
            groups.push(start..start + len);
            start += len;
        }
        Ok(Self { n_rows, groups })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SplitSpec {
    pub id: usize,
    pub test_groups: Vec<usize>,
    pub test_ranges: Vec<Range<usize>>,
    pub raw_train: Vec<usize>,
    pub train: Vec<usize>,
}

impl SplitSpec {
    pub fn test_rows(&self) -> Vec<usize> {
        self.test_ranges.iter().flat_map(|r| r.clone()).collect()
    }

    /// Error unless at least `needed` purged training rows remain.
    pub fn require_rows(&self, needed: usize) -> Result<()> {
        if self.train.len() < needed {
            return Err(Error::FoldUnusable {
                rows: self.train.len(),
                needed,
            });
        }
        Ok(())
    }
}

/// For one backtest path, the split that tests each group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PathAssignment {
    pub path: usize,
    pub split_for_group: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CpcvPlan {
    pub partition: GroupPartition,
    pub k_test: usize,
    pub purge: usize,
    pub embargo: usize,
    pub splits: Vec<SplitSpec>,
    pub paths: Vec<PathAssignment>,
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(binomial(n, k));
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Drop training rows within `purge` rows before a test group's start or
/// `embargo` rows after its end.
pub fn purge_and_embargo(split: &SplitSpec, purge: usize, embargo: usize) -> SplitSpec {
    let mut banned = BTreeSet::new();
    for r in &split.test_ranges {
        banned.extend(r.start.saturating_sub(purge)..r.start);
        banned.extend(r.end..r.end + embargo);
    }
    let train = split
        .raw_train
        .iter()
        .copied()
        .filter(|t| !banned.contains(t))
        .collect();
    SplitSpec {
        train,
        ..split.clone()
    }
}

pub fn build_cpcv_plan(
    n_rows: usize,
    n_groups: usize,
    k_test: usize,
    purge: usize,
    embargo: usize,
) -> Result<CpcvPlan> {
    if n_groups < 2 || k_test < 1 || k_test >= n_groups {
        return Err(Error::InvalidArgument(format!(
            "need n_groups >= 2 and 1 <= k_test < n_groups, got {n_groups}, {k_test}"
        )));
    }
    let partition = GroupPartition::new(n_rows, n_groups)?;
    let mut splits = Vec::new();
    for (id, test_groups) in combinations(n_groups, k_test).into_iter().enumerate() {
        let test_ranges: Vec<Range<usize>> =
            test_groups.iter().map(|&g| partition.groups[g].clone()).collect();
        let raw_train: Vec<usize> = (0..n_groups)
            .filter(|g| !test_groups.contains(g))
            .flat_map(|g| partition.groups[g].clone())
            .collect();
        let raw = SplitSpec {
            id,
            test_groups,
            test_ranges,
            raw_train: raw_train.clone(),
            train: raw_train,
        };
        splits.push(purge_and_embargo(&raw, purge, embargo));
    }
    let n_paths = k_test * splits.len() / n_groups;
    let mut cover: Vec<Vec<Option<usize>>> = vec![vec![None; n_groups]; n_paths];
    for s in &splits {
        for &g in &s.test_groups {
            let p = (0..n_paths)
                .find(|&p| cover[p][g].is_none())
                .expect("closed-form path count leaves room");
            cover[p][g] = Some(s.id);
        }
    }
    let paths = cover
        .into_iter()
        .enumerate()
        .map(|(path, row)| PathAssignment {
            path,
            split_for_group: row.into_iter().map(|s| s.expect("every cell filled")).collect(),
        })
        .collect();
    Ok(CpcvPlan {
        partition,
        k_test,
        purge,
        embargo,
        splits,
        paths,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Allocator {
    #[serde(rename = "EW")]
    EqualWeight,
    #[serde(rename = "MVO")]
    MinVariance,
    #[serde(rename = "HRP")]
    Hrp,
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "HOP-POOL")]
    HopPool,
    #[serde(rename = "HOP-TRA")]
    HopTra,
}

impl Allocator {
    pub const ALL: [Allocator; 6] = [
        Allocator::EqualWeight,
        Allocator::MinVariance,
        Allocator::Hrp,
        Allocator::Lstm,
        Allocator::HopPool,
        Allocator::HopTra,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Allocator::EqualWeight => "EW",
            Allocator::MinVariance => "MVO",
            Allocator::Hrp => "HRP",
            Allocator::Lstm => "LSTM",
            Allocator::HopPool => "HOP-POOL",
            Allocator::HopTra => "HOP-TRA",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown allocator {s:?}")))
    }

    pub fn model_kind(self) -> Option<ModelKind> {
        match self {
            Allocator::Lstm => Some(ModelKind::Lstm),
            Allocator::HopPool => Some(ModelKind::HopPool),
            Allocator::HopTra => Some(ModelKind::HopTra),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestConfig {
    pub lookback: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Upper bound on concurrently processed splits; 0 uses every core.
    pub jobs: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            lookback: 128,
            batch_size: 32,
            loss: LossKind::NegativeSharpe,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            jobs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitOutcome {
    pub split: usize,
    pub weights: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainHistory>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathResult {
    pub path: usize,
    pub series: PortfolioSeries,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BacktestResult {
    pub method: String,
    pub splits: Vec<SplitOutcome>,
    pub paths: Vec<PathResult>,
}

/// Mean and sample standard deviation of each metric over paths.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl BacktestResult {
    pub fn summary(&self) -> MetricSummary {
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for i in 0..4 {
            let xs: Vec<f64> = self.paths.iter().map(|p| p.metrics.values()[i]).collect();
            (mean[i], std[i]) = mean_std(&xs);
        }
        MetricSummary { mean, std }
    }

    pub fn path_sharpes(&self) -> Vec<f64> {
        self.paths.iter().map(|p| p.metrics.sharpe_annual).collect()
    }

    /// Per-path metrics with the header `method,path,mean_annual,sharpe,sortino,avg_dd`.
    pub fn write_metrics_csv(&self, w: impl Write, header: bool) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        if header {
            wtr.write_record(METRICS_HEADER)?;
        }
        for p in &self.paths {
            let m = &p.metrics;
            wtr.write_record([
                self.method.clone(),
                p.path.to_string(),
                format!("{:?}", m.mean_annual),
                format!("{:?}", m.sharpe_annual),
                format!("{:?}", m.sortino_annual),
                format!("{:?}", m.avg_drawdown),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Cumulative returns, one column per path.
    pub fn write_cumulative_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["date".to_string()];
        header.extend(self.paths.iter().map(|p| format!("path{}", p.path)));
        wtr.write_record(&header)?;
        let cums: Vec<Vec<f64>> = self.paths.iter().map(|p| p.series.cumulative_returns()).collect();
        if let Some(first) = self.paths.first() {
            for (t, date) in first.series.dates.iter().enumerate() {
                let mut rec = vec![date.clone()];
                rec.extend(cums.iter().map(|c| format!("{:?}", c[t])));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

pub const METRICS_HEADER: [&str; 6] = ["method", "path", "mean_annual", "sharpe", "sortino", "avg_dd"];

/// Per-split RNG stream, independent of scheduling.
pub fn split_rng(seed: u64, split: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split as u64 + 1);
    rng
}

fn fit_split(
    allocator: Allocator,
    split: &SplitSpec,
    r: &ReturnMatrix,
    cfg: &BacktestConfig,
) -> Result<SplitOutcome> {
    let n = r.n_assets();
    let wrap = |e: Error| Error::Allocator {
        method: allocator.label().to_string(),
        split: split.id,
        source: Box::new(e),
    };
    let (weights, history) = match allocator.model_kind() {
        None if allocator == Allocator::EqualWeight => (equal_weights(n).map_err(wrap)?, None),
        None => {
            split.require_rows(2).map_err(wrap)?;
            let train = r.select_rows(&split.train);
            let w = match allocator {
                Allocator::MinVariance => sample_covariance(&train).and_then(|c| mvo_min_variance(&c)),
                _ => hrp_allocate(&train),
            }
            .map_err(wrap)?;
            (w, None)
        }
        Some(kind) => {
            split.require_rows(cfg.lookback + 2).map_err(wrap)?;
            let model = Model::new(ModelSpec {
                kind,
                n_assets: n,
                lookback: cfg.lookback,
                loss: cfg.loss,
                arch: cfg.arch.clone(),
            })
            .map_err(wrap)?;
            let mut rng = split_rng(cfg.train.seed, split.id);
            let (params, history) =
                train_model(&model, r, &split.train, cfg.batch_size, &cfg.train, &mut rng).map_err(wrap)?;
            let w = infer_weights(&model, &params, r, &split.test_rows(), cfg.batch_size).map_err(wrap)?;
            (w, Some(history))
        }
    };
    Ok(SplitOutcome {
        split: split.id,
        weights,
        history,
    })
}

/// Fit every split, apply each split's weights to its test groups and
/// stitch the segments into backtest paths.
pub fn run_backtest(
    allocator: Allocator,
    plan: &CpcvPlan,
    r: &ReturnMatrix,
    cfg: &BacktestConfig,
) -> Result<BacktestResult> {
    if plan.partition.n_rows != r.n_rows() {
        return Err(Error::InvalidArgument(format!(
            "plan covers {} rows, returns have {}",
            plan.partition.n_rows,
            r.n_rows()
        )));
    }
    let work = || -> Vec<Result<SplitOutcome>> {
        plan.splits
            .par_iter()
            .map(|s| fit_split(allocator, s, r, cfg))
            .collect()
    };
    let outcomes = if cfg.jobs == 0 {
        work()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(work)
    };
    let splits: Vec<SplitOutcome> = outcomes.into_iter().collect::<Result<_>>()?;

    let mut paths = Vec::with_capacity(plan.paths.len());
    for pa in &plan.paths {
        let mut dates = Vec::with_capacity(r.n_rows());
        let mut values = Vec::with_capacity(r.n_rows());
        for (g, &sid) in pa.split_for_group.iter().enumerate() {
            let w = &splits[sid].weights;
            for t in plan.partition.groups[g].clone() {
                dates.push(r.dates()[t].clone());
                values.push((0..r.n_assets()).map(|i| w[i] * r.get(t, i)).sum());
            }
        }
        let series = PortfolioSeries::new(dates, values);
        let metrics = report(&series)?;
        paths.push(PathResult {
            path: pa.path,
            series,
            metrics,
        });
    }
    Ok(BacktestResult {
        method: allocator.label().to_string(),
        splits,
        paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_sizes() {
        let p = GroupPartition::new(23, 5).unwrap();
        let lens: Vec<usize> = p.groups.iter().map(|g| g.len()).collect();
        assert_eq!(lens, vec![5, 5, 5, 4, 4]);
        assert_eq!(p.groups.last().unwrap().end, 23);
        assert!(GroupPartition::new(3, 5).is_err());
    }

    #[test]
    fn default_plan_counts() {
        let plan = build_cpcv_plan(2500, 10, 8, 21, 21).unwrap();
        assert_eq!(plan.splits.len(), 45);
        assert_eq!(plan.paths.len(), 36);
    }

    #[test]
    fn small_plans() {
        let plan = build_cpcv_plan(10, 2, 1, 0, 0).unwrap();
        assert_eq!((plan.splits.len(), plan.paths.len()), (2, 1));
        let plan = build_cpcv_plan(40, 4, 2, 0, 0).unwrap();
        assert_eq!((plan.splits.len(), plan.paths.len()), (6, 3));
        // splits: 01 02 03 12 13 23
        let cover: Vec<Vec<usize>> = plan.paths.iter().map(|p| p.split_for_group.clone()).collect();
        assert_eq!(cover, vec![vec![0, 0, 1, 2], vec![1, 3, 3, 4], vec![2, 4, 5, 5]]);
    }

    #[test]
    fn invalid_plans() {
        assert!(build_cpcv_plan(100, 1, 1, 0, 0).is_err());
        assert!(build_cpcv_plan(100, 5, 5, 0, 0).is_err());
        assert!(build_cpcv_plan(100, 5, 0, 0, 0).is_err());
        assert!(build_cpcv_plan(3, 5, 2, 0, 0).is_err());
    }

    #[test]
    fn purge_interval_arithmetic() {
        let split = SplitSpec {
            id: 0,
            test_groups: vec![1],
            test_ranges: vec![100..200],
            raw_train: (0..100).chain(200..300).collect(),
            train: (0..100).chain(200..300).collect(),
        };
        assert_eq!(purge_and_embargo(&split, 0, 0).train, split.raw_train);
        let p = purge_and_embargo(&split, 21, 0);
        assert_eq!(p.train, (0..79).chain(200..300).collect::<Vec<_>>());
        let p = purge_and_embargo(&split, 21, 21);
        assert_eq!(p.train, (0..79).chain(221..300).collect::<Vec<_>>());
    }

    #[test]
    fn adjacent_test_groups_merge_zones() {
        let plan = build_cpcv_plan(100, 10, 2, 5, 5).unwrap();
        let s = plan.splits.iter().find(|s| s.test_groups == vec![3, 4]).unwrap();
        let expected: Vec<usize> = (0..25).chain(55..100).collect();
        assert_eq!(s.train, expected);
    }

    #[test]
    fn combinations_lexicographic() {
        assert_eq!(
            combinations(4, 2),
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        assert_eq!(binomial(10, 8), 45);
    }

    #[test]
    fn allocator_labels_round_trip() {
        for a in Allocator::ALL {
            assert_eq!(Allocator::parse(a.label()).unwrap(), a);
        }
        assert!(Allocator::parse("XYZ").is_err());
    }

    #[test]
    fn single_split_path_is_the_test_segment() {
        let rows: Vec<Vec<f64>> = (0..20).map(|t| vec![0.001 * t as f64 - 0.01, 0.002 - 0.0003 * t as f64]).collect();
        let r = ReturnMatrix::from_rows(&rows).unwrap();
        let plan = build_cpcv_plan(20, 2, 1, 0, 0).unwrap();
        let res = run_backtest(Allocator::EqualWeight, &plan, &r, &BacktestConfig::default()).unwrap();
        assert_eq!(res.paths.len(), 1);
        let expected: Vec<f64> = rows.iter().map(|x| 0.5 * x[0] + 0.5 * x[1]).collect();
        assert_eq!(res.paths[0].series.values, expected);
    }
}
