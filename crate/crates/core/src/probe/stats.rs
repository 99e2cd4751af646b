//! Two-sample tests for attention-score comparisons.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

pub const PERCENTILES: [f64; 4] = [25.0, 50.0, 75.0, 95.0];

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Percentile by linear interpolation between order statistics.
pub fn percentile(x: &[f64], p: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Welch {
    pub t: f64,
    pub df: f64,
    pub p_two_sided: f64,
}

pub fn welch_t(a: &[f64], b: &[f64]) -> Result<Welch> {
    check_sizes(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(if diff == 0.0 {
            Welch {
                t: 0.0,
                df: na + nb - 2.0,
                p_two_sided: 1.0,
            }
        } else {
            Welch {
                t: diff.signum() * f64::INFINITY,
                df: na + nb - 2.0,
                p_two_sided: 0.0,
            }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0);
    Ok(Welch { t, df, p_two_sided: p })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MannWhitney {
    /// `U` of the first sample: pairs `(a_i, b_j)` with `a_i > b_j`, ties
    /// counting one half.
    pub u: f64,
    /// Normal approximation with tie and continuity correction.
    pub p_normal: f64,
    /// Exact `P(U <= u)` under the null, when there are no ties.
    pub p_exact_less: Option<f64>,
    pub p_exact_two_sided: Option<f64>,
}

/// Midranks (1-based) of the pooled sample, and the tie groups' sizes.
fn midranks(x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Null counts of `U = 0..=na*nb` for samples without ties.
pub fn u_distribution(na: usize, nb: usize) -> Vec<f64> {
    // f[i][j] is the distribution for sizes (i, j)
    let mut f: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); nb + 1]; na + 1];
    for i in 0..=na {
        for j in 0..=nb {
            let mut d = vec![0.0; i * j + 1];
            if i == 0 || j == 0 {
                d[0] = 1.0;
            } else {
                // the largest value belongs to a (adds j) or to b
                for (u, c) in f[i - 1][j].iter().enumerate() {
                    d[u + j] += c;
                }
                for (u, c) in f[i][j - 1].iter().enumerate() {
                    d[u] += c;
                }
            }
            f[i][j] = d;
        }
    }
    std::mem::take(&mut f[na][nb])
}

pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    check_sizes(a, b)?;
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;
    let n = (na + nb) as f64;
    let mu = (na * nb) as f64 / 2.0;
    let tie: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie / (n * (n - 1.0)));
    let p_normal = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let nd = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * nd.cdf(-z)).clamp(0.0, 1.0)
    };
    let (p_less, p_two) = if ties.is_empty() {
        let d = u_distribution(na, nb);
        let total: f64 = d.iter().sum();
        let ui = u.round() as usize;
        let less: f64 = d[..=ui].iter().sum::<f64>() / total;
        let greater: f64 = d[ui..].iter().sum::<f64>() / total;
        (Some(less), Some((2.0 * less.min(greater)).min(1.0)))
    } else {
        (None, None)
    };
    Ok(MannWhitney {
        u,
        p_normal,
        p_exact_less: p_less,
        p_exact_two_sided: p_two,
    })
}

fn check_sizes(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Argument(format!(
            "both samples need at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite sample value".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatReport {
    pub label_a: String,
    pub label_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// 25/50/75/95th percentiles.
    pub percentiles_a: [f64; 4],
    pub percentiles_b: [f64; 4],
    pub t_statistic: f64,
    pub t_p_value: f64,
    pub u_statistic: f64,
    pub u_p_value: f64,
}

pub fn attention_stats(label_a: &str, a: &[f64], label_b: &str, b: &[f64]) -> Result<StatReport> {
    let w = welch_t(a, b)?;
    let u = mann_whitney(a, b)?;
    Ok(StatReport {
        label_a: label_a.into(),
        label_b: label_b.into(),
        n_a: a.len(),
        n_b: b.len(),
        mean_a: mean(a),
        mean_b: mean(b),
        percentiles_a: PERCENTILES.map(|p| percentile(a, p)),
        percentiles_b: PERCENTILES.map(|p| percentile(b, p)),
        t_statistic: w.t,
        t_p_value: w.p_two_sided,
        u_statistic: u.u,
        u_p_value: u.p_normal,
    })
}

impl StatReport {
    /// One row per group, statistics scaled by `1e4`; p-values unscaled.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,n,mean_e4,p25_e4,p50_e4,p75_e4,p95_e4,t_statistic,t_p_value,u_statistic,u_p_value\n");
        for (label, n, m, p) in [
            (&self.label_a, self.n_a, self.mean_a, self.percentiles_a),
            (&self.label_b, self.n_b, self.mean_b, self.percentiles_b),
        ] {
            s.push_str(&format!(
                "{label},{n},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6e},{},{:.6e}\n",
                m * 1e4,
                p[0] * 1e4,
                p[1] * 1e4,
                p[2] * 1e4,
                p[3] * 1e4,
                self.t_statistic,
                self.t_p_value,
                self.u_statistic,
                self.u_p_value
            ));
        }
        s
    }
}
