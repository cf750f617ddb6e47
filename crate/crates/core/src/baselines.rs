//! Equal-weight, minimum-variance and hierarchical risk parity allocators.
//! All of them see the full training slice at once.

use serde::Serialize;

use crate::data::ReturnMatrix;
use crate::error::{Error, Result};

pub const MVO_MAX_ITER: usize = 50_000;
pub const MVO_TOL: f64 = 1e-10;

/// Symmetric `N x N` covariance, row-major.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CovEstimate {
    n: usize,
    values: Vec<f64>,
}

impl CovEstimate {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("covariance must be square".into()));
        }
        let cov = Self {
            n,
            values: rows.concat(),
        };
        cov.validate()?;
        Ok(cov)
    }

    fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite covariance entry".into()));
        }
        for i in 0..self.n {
            if self.get(i, i) < 0.0 {
                return Err(Error::InvalidArgument(format!("negative variance at {i}")));
            }
            for j in 0..i {
                let (a, b) = (self.get(i, j), self.get(j, i));
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// `w' Σ w`.
    pub fn quad_form(&self, w: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| w[i] * self.row(i).iter().zip(w).map(|(s, x)| s * x).sum::<f64>())
            .sum()
    }
}

pub fn equal_weights(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("equal weights need at least one asset".into()));
    }
    Ok(vec![1.0 / n as f64; n])
}

/// Unbiased sample covariance of the columns of `r`.
pub fn sample_covariance(r: &ReturnMatrix) -> Result<CovEstimate> {
    let (t, n) = (r.n_rows(), r.n_assets());
    if t < 2 {
        return Err(Error::InsufficientHistory {
            needed: 2,
            available: t,
        });
    }
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let c = r.column(i);
            let m = c.iter().sum::<f64>() / t as f64;
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>();
            let v = s / (t - 1) as f64;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(CovEstimate { n, values })
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Clip floating-point negatives and renormalize to sum one.
fn clean_simplex(mut w: Vec<f64>) -> Vec<f64> {
    for x in w.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Long-only minimum-variance weights by projected gradient descent.
pub fn mvo_min_variance(cov: &CovEstimate) -> Result<Vec<f64>> {
    cov.validate()?;
    let n = cov.n;
    if n < 2 {
        return Err(Error::InvalidArgument("minimum variance needs two assets".into()));
    }
    let bound = (0..n)
        .map(|i| cov.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    if bound == 0.0 {
        return equal_weights(n);
    }
    let step = 1.0 / (2.0 * bound);
    let mut w = vec![1.0 / n as f64; n];
    let mut trial = vec![0.0; n];
    for _ in 0..MVO_MAX_ITER {
        for i in 0..n {
            let g = 2.0 * cov.row(i).iter().zip(&w).map(|(s, x)| s * x).sum::<f64>();
            trial[i] = w[i] - step * g;
        }
        let next = project_simplex(&trial);
        let moved = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = next;
        if moved < MVO_TOL {
            break;
        }
    }
    Ok(clean_simplex(w))
}

/// Agglomerative merges over leaves `0..N`; the cluster created by merge
/// `m` has id `N + m`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinkageTree {
    pub merges: Vec<(usize, usize, f64)>,
    pub order: Vec<usize>,
}

/// Single-linkage clustering of a distance matrix. Ties go to the pair whose
/// smallest leaf indices come first. Each merge stores the smaller cluster id
/// first, and the leaf order expands every merge left to right.
pub fn single_linkage(dist: &[Vec<f64>]) -> LinkageTree {
    let n = dist.len();
    // (cluster id, members), kept sorted by smallest member
    let mut active: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    while active.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..active.len() {
            for b in a + 1..active.len() {
                let mut d = f64::INFINITY;
                for &i in &active[a].1 {
                    for &j in &active[b].1 {
                        d = d.min(dist[i][j]);
                    }
                }
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let (d, a, b) = best.expect("at least two clusters");
        let (id_b, mb) = active.remove(b);
        let (id_a, ma) = active.remove(a);
        merges.push((id_a.min(id_b), id_a.max(id_b), d));
        let mut members = ma;
        members.extend(mb);
        let lead = *members.iter().min().expect("non-empty cluster");
        let at = active.partition_point(|(_, m)| m.iter().min().is_some_and(|&x| x < lead));
        active.insert(at, (n + merges.len() - 1, members));
    }
    let mut order = Vec::with_capacity(n);
    if n > 0 {
        let mut stack = vec![if n == 1 { 0 } else { 2 * n - 2 }];
        while let Some(id) = stack.pop() {
            if id < n {
                order.push(id);
            } else {
                let (l, r, _) = merges[id - n];
                stack.push(r);
                stack.push(l);
            }
        }
    }
    LinkageTree { merges, order }
}

/// Inverse-variance portfolio variance of the assets in `items`.
fn cluster_variance(cov: &CovEstimate, items: &[usize]) -> f64 {
    let ivp: Vec<f64> = items.iter().map(|&i| 1.0 / cov.get(i, i)).collect();
    let s: f64 = ivp.iter().sum();
    let w: Vec<f64> = ivp.iter().map(|v| v / s).collect();
    let mut var = 0.0;
    for (a, &i) in items.iter().enumerate() {
        for (b, &j) in items.iter().enumerate() {
            var += w[a] * w[b] * cov.get(i, j);
        }
    }
    var
}

/// HRP weights from a covariance matrix.
pub fn hrp_from_cov(cov: &CovEstimate) -> Result<Vec<f64>> {
    cov.validate()?;
    let n = cov.n;
    if n < 2 {
        return Err(Error::InvalidArgument("HRP needs two assets".into()));
    }
    if let Some(i) = (0..n).find(|&i| !(cov.get(i, i) > 0.0)) {
        return Err(Error::DegenerateAsset(i));
    }
    let sd: Vec<f64> = (0..n).map(|i| cov.get(i, i).sqrt()).collect();
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let rho = (cov.get(i, j) / (sd[i] * sd[j])).clamp(-1.0, 1.0);
                    (0.5 * (1.0 - rho)).max(0.0).sqrt()
                })
                .collect()
        })
        .collect();
    let tree = single_linkage(&dist);
    let mut w = vec![1.0; n];
    let mut pending = vec![tree.order.clone()];
    while let Some(items) = pending.pop() {
        if items.len() < 2 {
            continue;
        }
        let (left, right) = items.split_at(items.len() / 2);
        let vl = cluster_variance(cov, left);
        let vr = cluster_variance(cov, right);
        let alpha = 1.0 - vl / (vl + vr);
        left.iter().for_each(|&i| w[i] *= alpha);
        right.iter().for_each(|&i| w[i] *= 1.0 - alpha);
        pending.push(right.to_vec());
        pending.push(left.to_vec());
    }
    Ok(clean_simplex(w))
}

/// HRP weights estimated from a return slice.
pub fn hrp_allocate(r: &ReturnMatrix) -> Result<Vec<f64>> {
    if r.n_assets() < 2 {
        return Err(Error::InvalidArgument("HRP needs two assets".into()));
    }
    hrp_from_cov(&sample_covariance(r)?)
}
