//! Tukey HSD over per-path metrics and the compact letter display.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupSample {
    pub label: String,
    pub values: Vec<f64>,
}

impl GroupSample {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            values,
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    /// `mean_a - mean_b`.
    pub diff: f64,
    pub q: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TukeyResult {
    pub labels: Vec<String>,
    pub means: Vec<f64>,
    pub alpha: f64,
    pub df: f64,
    pub pooled_variance: f64,
    pub pairs: Vec<PairwiseTest>,
}

impl TukeyResult {
    /// A result built from a significance pattern alone, for letter displays
    /// of externally computed tests. `significant[i][j]` must be symmetric.
    pub fn from_significance(
        labels: Vec<String>,
        means: Vec<f64>,
        significant: &[Vec<bool>],
    ) -> Result<Self> {
        let k = labels.len();
        if means.len() != k || significant.len() != k || significant.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument("significance matrix does not match labels".into()));
        }
        let mut pairs = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                if significant[i][j] != significant[j][i] {
                    return Err(Error::InvalidArgument(format!(
                        "significance matrix not symmetric at ({i}, {j})"
                    )));
                }
                pairs.push(PairwiseTest {
                    a: labels[i].clone(),
                    b: labels[j].clone(),
                    diff: means[i] - means[j],
                    q: f64::NAN,
                    p_value: if significant[i][j] { 0.0 } else { 1.0 },
                    significant: significant[i][j],
                });
            }
        }
        Ok(Self {
            labels,
            means,
            alpha: DEFAULT_ALPHA,
            df: f64::NAN,
            pooled_variance: f64::NAN,
            pairs,
        })
    }

    fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// The test for `(a, b)` in either order; the difference is `mean_a - mean_b`.
    pub fn pair(&self, a: &str, b: &str) -> Option<PairwiseTest> {
        self.pairs.iter().find_map(|p| {
            if p.a == a && p.b == b {
                Some(p.clone())
            } else if p.a == b && p.b == a {
                Some(PairwiseTest {
                    a: a.to_string(),
                    b: b.to_string(),
                    diff: -p.diff,
                    ..p.clone()
                })
            } else {
                None
            }
        })
    }

    pub fn significance_matrix(&self) -> Vec<Vec<bool>> {
        let k = self.labels.len();
        let mut m = vec![vec![false; k]; k];
        for p in &self.pairs {
            if let (Some(i), Some(j)) = (self.index(&p.a), self.index(&p.b)) {
                m[i][j] = p.significant;
                m[j][i] = p.significant;
            }
        }
        m
    }
}

// 20-point Gauss-Legendre nodes and weights on [-1, 1], positive half.
const GL_X: [f64; 10] = [
    0.076_526_521_133_497_33,
    0.227_785_851_141_645_08,
    0.373_706_088_715_419_56,
    0.510_867_001_950_827_1,
    0.636_053_680_726_515,
    0.746_331_906_460_150_8,
    0.839_116_971_822_218_8,
    0.912_234_428_251_325_9,
    0.963_971_927_277_913_8,
    0.993_128_599_185_094_9,
];
const GL_W: [f64; 10] = [
    0.152_753_387_130_725_85,
    0.149_172_986_472_603_75,
    0.142_096_109_318_382_05,
    0.131_688_638_449_176_63,
    0.118_194_531_961_518_42,
    0.101_930_119_817_240_44,
    0.083_276_741_576_704_75,
    0.062_672_048_334_109_06,
    0.040_601_429_800_386_94,
    0.017_614_007_139_152_12,
];

/// Composite 20-point Gauss-Legendre rule over `pieces` equal subintervals.
fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, pieces: usize) -> f64 {
    let h = (hi - lo) / pieces as f64;
    let mut total = 0.0;
    for p in 0..pieces {
        let mid = lo + (p as f64 + 0.5) * h;
        let half = 0.5 * h;
        let mut s = 0.0;
        for (x, w) in GL_X.iter().zip(GL_W) {
            s += w * (f(mid - half * x) + f(mid + half * x));
        }
        total += s * half;
    }
    total
}

/// `P(range of k iid standard normals <= w)`.
fn normal_range_cdf(w: f64, k: usize, normal: &Normal) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let inner = integrate(
        |z| {
            let d = normal.cdf(z) - normal.cdf(z - w);
            phi(z) * d.max(0.0).powi(k as i32 - 1)
        },
        -8.5,
        8.5,
        24,
    );
    (k as f64 * inner).clamp(0.0, 1.0)
}

/// CDF of the studentized range with `k` groups and `df` error degrees of
/// freedom.
pub fn studentized_range_cdf(q: f64, k: usize, df: f64) -> Result<f64> {
    if k < 2 || !(df > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "studentized range needs k >= 2 and df > 0 (k={k}, df={df})"
        )));
    }
    if !(q > 0.0) {
        return Ok(0.0);
    }
    let normal = Normal::standard();
    if df > 50_000.0 {
        return Ok(normal_range_cdf(q, k, &normal));
    }
    // s = sqrt(chi2_df / df); integrate over u = ln s, whose density peaks
    // at 0 with width ~ 1/sqrt(2 df) and a left tail ~ exp(df u)
    let half = 0.5 * df;
    let log_norm = half * df.ln() - ln_gamma(half) - (half - 1.0) * 2f64.ln();
    let spread = 1.0 / (2.0 * df).sqrt();
    let lo = -(12.0 * spread).max(40.0 / df);
    let hi = 12.0 * spread;
    let total = integrate(
        |u| {
            let s = u.exp();
            let log_density = log_norm + df * u - half * s * s;
            log_density.exp() * normal_range_cdf(q * s, k, &normal)
        },
        lo,
        hi,
        48,
    );
    Ok(total.clamp(0.0, 1.0))
}

/// All-pairs Tukey HSD (Tukey-Kramer for unequal group sizes).
pub fn tukey_hsd(groups: &[GroupSample], alpha: f64) -> Result<TukeyResult> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::InvalidArgument("Tukey HSD needs two groups".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
    }
    if let Some(g) = groups.iter().find(|g| g.values.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "group {} has fewer than two observations",
            g.label
        )));
    }
    let means: Vec<f64> = groups.iter().map(GroupSample::mean).collect();
    let total: usize = groups.iter().map(|g| g.values.len()).sum();
    let df = (total - k) as f64;
    let ss: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>())
        .sum();
    let msw = ss / df;
    let scale = means.iter().map(|m| m.abs()).fold(1.0, f64::max);
    if !(msw > 1e-300) || msw.sqrt() < 1e-14 * scale {
        return Err(Error::DegenerateGroups);
    }
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let (ni, nj) = (groups[i].values.len() as f64, groups[j].values.len() as f64);
            let diff = means[i] - means[j];
            let se = (0.5 * msw * (1.0 / ni + 1.0 / nj)).sqrt();
            let q = diff.abs() / se;
            let p = (1.0 - studentized_range_cdf(q, k, df)?).clamp(0.0, 1.0);
            pairs.push(PairwiseTest {
                a: groups[i].label.clone(),
                b: groups[j].label.clone(),
                diff,
                q,
                p_value: p,
                significant: p < alpha,
            });
        }
    }
    Ok(TukeyResult {
        labels: groups.iter().map(|g| g.label.clone()).collect(),
        means,
        alpha,
        df,
        pooled_variance: msw,
        pairs,
    })
}

/// Method label and its letters, in the order of `TukeyResult::labels`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CldLabels {
    pub labels: Vec<(String, String)>,
}

impl CldLabels {
    pub fn get(&self, label: &str) -> Option<&str> {
        self.labels
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, s)| s.as_str())
    }
}

fn letter(i: usize) -> Result<char> {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
    ALPHABET
        .get(i)
        .map(|&c| c as char)
        .ok_or_else(|| Error::InvalidArgument("more than 52 letter groups".into()))
}

/// Insert-absorb letter display. Letters follow decreasing group means.
pub fn compact_letter_display(res: &TukeyResult) -> Result<CldLabels> {
    let k = res.labels.len();
    let sig = res.significance_matrix();
    let mut columns: Vec<Vec<bool>> = vec![vec![true; k]];
    for i in 0..k {
        for j in i + 1..k {
            if !sig[i][j] {
                continue;
            }
            let mut next = Vec::with_capacity(columns.len() + 1);
            for col in columns {
                if col[i] && col[j] {
                    let mut without_i = col.clone();
                    without_i[i] = false;
                    let mut without_j = col;
                    without_j[j] = false;
                    next.push(without_i);
                    next.push(without_j);
                } else {
                    next.push(col);
                }
            }
            columns = absorb(next);
        }
    }
    let mut rank: Vec<usize> = (0..k).collect();
    rank.sort_by(|&a, &b| res.means[b].total_cmp(&res.means[a]).then(a.cmp(&b)));
    let mut position = vec![0; k];
    for (p, &m) in rank.iter().enumerate() {
        position[m] = p;
    }
    // order columns by their members' ranks, lexicographically
    let key = |col: &Vec<bool>| {
        let mut ranks: Vec<usize> = (0..k).filter(|&m| col[m]).map(|m| position[m]).collect();
        ranks.sort_unstable();
        ranks
    };
    columns.sort_by_key(key);
    let mut labels = Vec::with_capacity(k);
    for m in 0..k {
        let mut s = String::new();
        for (c, col) in columns.iter().enumerate() {
            if col[m] {
                s.push(letter(c)?);
            }
        }
        labels.push((res.labels[m].clone(), s));
    }
    Ok(CldLabels { labels })
}

/// Drop duplicate columns and columns contained in another column.
fn absorb(columns: Vec<Vec<bool>>) -> Vec<Vec<bool>> {
    let subset = |a: &[bool], b: &[bool]| a.iter().zip(b).all(|(x, y)| !x || *y);
    let mut kept: Vec<Vec<bool>> = Vec::with_capacity(columns.len());
    for (idx, col) in columns.iter().enumerate() {
        let dominated = columns.iter().enumerate().any(|(other, o)| {
            other != idx && subset(col, o) && (col != o || other < idx)
        });
        if !dominated {
            kept.push(col.clone());
        }
    }
    kept
}

/// Markdown table: one row per method, one column per dataset.
pub fn cld_markdown(datasets: &[(String, CldLabels)]) -> String {
    let mut methods: Vec<String> = Vec::new();
    for (_, cld) in datasets {
        for (m, _) in &cld.labels {
            if !methods.contains(m) {
                methods.push(m.clone());
            }
        }
    }
    let mut out = String::from("|");
    for (d, _) in datasets {
        out.push_str(&format!(" | {d}"));
    }
    out.push_str(" |\n|---");
    for _ in datasets {
        out.push_str("|:---:");
    }
    out.push_str("|\n");
    for m in &methods {
        out.push_str(&format!("| {m}"));
        for (_, cld) in datasets {
            out.push_str(&format!(" | {}", cld.get(m).unwrap_or("-")));
        }
        out.push_str(" |\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("M{i}")).collect()
    }

    #[test]
    fn identical_groups_have_unit_p() {
        let g = vec![
            GroupSample::new("a", vec![1.0, 2.0, 3.0, 4.0]),
            GroupSample::new("b", vec![1.0, 2.0, 3.0, 4.0]),
        ];
        let r = tukey_hsd(&g, DEFAULT_ALPHA).unwrap();
        assert_eq!(r.pairs[0].diff, 0.0);
        assert_eq!(r.pairs[0].p_value, 1.0);
    }

    #[test]
    fn degenerate_groups_rejected() {
        let g = vec![
            GroupSample::new("a", vec![1.0, 1.0]),
            GroupSample::new("b", vec![2.0, 2.0]),
        ];
        assert!(matches!(tukey_hsd(&g, 0.05), Err(Error::DegenerateGroups)));
    }

    #[test]
    fn pair_lookup_is_symmetric() {
        let g = vec![
            GroupSample::new("a", vec![1.0, 2.0, 3.0]),
            GroupSample::new("b", vec![2.0, 3.5, 4.0]),
            GroupSample::new("c", vec![0.0, 0.5, 1.5]),
        ];
        let r = tukey_hsd(&g, 0.05).unwrap();
        let ab = r.pair("a", "b").unwrap();
        let ba = r.pair("b", "a").unwrap();
        assert_eq!(ab.p_value, ba.p_value);
        assert_eq!(ab.diff, -ba.diff);
        assert!(r.pairs.iter().all(|p| (0.0..=1.0).contains(&p.p_value)));
    }

    #[test]
    fn two_group_range_matches_student_t() {
        // with k = 2, Q / sqrt(2) is |T|
        use statrs::distribution::StudentsT;
        let t = StudentsT::new(0.0, 1.0, 7.0).unwrap();
        for q in [0.5, 1.5, 3.0, 5.0] {
            let expected = 2.0 * t.cdf(q / 2f64.sqrt()) - 1.0;
            assert!((studentized_range_cdf(q, 2, 7.0).unwrap() - expected).abs() < 1e-7);
        }
    }

    #[test]
    fn range_cdf_matches_reference_points() {
        // tests/oracles/tukey_fixture.py
        let cases = [
            (0.5, 3, 27.0, 0.06641333533132304),
            (2.0, 3, 27.0, 0.6520758149061425),
            (3.5, 3, 27.0, 0.9495093194000047),
            (4.2, 6, 210.0, 0.9614675516917783),
            (3.0, 5, 4.0, 0.6413365336079381),
            (1.2, 2, 1.0, 0.44795046900858426),
            (6.0, 10, 12.0, 0.974891375325806),
        ];
        for (q, k, df, expected) in cases {
            let got = studentized_range_cdf(q, k, df).unwrap();
            assert!((got - expected).abs() < 1e-6, "q={q} k={k} df={df}: {got} vs {expected}");
        }
    }

    #[test]
    fn shift_invariance_and_monotonicity() {
        let base = [
            vec![0.3, 0.5, 0.1, 0.4, 0.2],
            vec![0.6, 0.4, 0.7, 0.5, 0.8],
            vec![0.2, 0.3, 0.4, 0.1, 0.35],
        ];
        let build = |shift: f64, push: f64| {
            base.iter()
                .enumerate()
                .map(|(i, v)| {
                    let extra = if i == 1 { push } else { 0.0 };
                    GroupSample::new(format!("g{i}"), v.iter().map(|x| x + shift + extra).collect())
                })
                .collect::<Vec<_>>()
        };
        let r0 = tukey_hsd(&build(0.0, 0.0), 0.05).unwrap();
        let r1 = tukey_hsd(&build(3.25, 0.0), 0.05).unwrap();
        for (a, b) in r0.pairs.iter().zip(&r1.pairs) {
            assert!((a.p_value - b.p_value).abs() < 1e-12);
        }
        let mut last = r0.pair("g0", "g1").unwrap().p_value;
        for step in 1..6 {
            let p = tukey_hsd(&build(0.0, 0.05 * step as f64), 0.05)
                .unwrap()
                .pair("g0", "g1")
                .unwrap()
                .p_value;
            assert!(p <= last + 1e-12);
            last = p;
        }
    }

    #[test]
    fn no_significance_gives_single_letter() {
        let r = TukeyResult::from_significance(labels(3), vec![1.0, 2.0, 3.0], &vec![vec![false; 3]; 3]).unwrap();
        let cld = compact_letter_display(&r).unwrap();
        assert!(cld.labels.iter().all(|(_, s)| s == "a"));
    }

    #[test]
    fn full_separation_gives_distinct_letters() {
        let sig: Vec<Vec<bool>> = (0..3).map(|i| (0..3).map(|j| i != j).collect()).collect();
        let r = TukeyResult::from_significance(labels(3), vec![3.0, 2.0, 1.0], &sig).unwrap();
        let cld = compact_letter_display(&r).unwrap();
        let got: Vec<&str> = cld.labels.iter().map(|(_, s)| s.as_str()).collect();
        assert_eq!(got, vec!["a", "b", "c"]);
    }

    #[test]
    fn non_transitive_pattern() {
        // M0 ~ M1, M1 ~ M2, M0 != M2
        let mut sig = vec![vec![false; 3]; 3];
        sig[0][2] = true;
        sig[2][0] = true;
        let r = TukeyResult::from_significance(labels(3), vec![3.0, 2.0, 1.0], &sig).unwrap();
        let cld = compact_letter_display(&r).unwrap();
        assert_eq!(cld.get("M0"), Some("a"));
        assert_eq!(cld.get("M1"), Some("ab"));
        assert_eq!(cld.get("M2"), Some("b"));
    }

    #[test]
    fn markdown_shape() {
        let r = TukeyResult::from_significance(labels(2), vec![1.0, 0.0], &vec![vec![false; 2]; 2]).unwrap();
        let cld = compact_letter_display(&r).unwrap();
        let md = cld_markdown(&[("SYN".into(), cld)]);
        assert!(md.starts_with("| | SYN |\n|---|:---:|\n| M0 | a |"));
    }
}
