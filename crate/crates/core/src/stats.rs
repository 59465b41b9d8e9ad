//! Estimators shared across the pipeline: Wilson intervals, log-log power-law
//! fits and block-covariance (mixing) measurement with grouped jackknife.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const Z95: f64 = 1.959963984540054;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("degenerate fit: {0} usable points, need at least {1}")]
    DegenerateGrid(usize, usize),
    #[error("empty sample")]
    Empty,
    #[error("{have} replicas give interval half-width above {width}; need at least {need}")]
    InsufficientReplicas { have: usize, need: usize, width: f64 },
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if k == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub points: usize,
}

/// Ordinary least squares of `y` on `x`.
pub fn ols(xs: &[f64], ys: &[f64]) -> Result<LineFit, StatsError> {
    let n = xs.len();
    if n < 2 {
        return Err(StatsError::DegenerateGrid(n, 2));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(StatsError::DegenerateGrid(1, 2));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = if n > 2 { (rss / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(LineFit { slope, intercept, stderr, points: n })
}

/// Fit `log p = a + slope log n` over points with `p > 0`; at least 4 needed.
pub fn power_law_fit(points: &[(f64, f64)]) -> Result<LineFit, StatsError> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().filter(|(_, p)| *p > 0.0).map(|(n, p)| (n.ln(), p.ln())).unzip();
    if xs.len() < 4 {
        return Err(StatsError::DegenerateGrid(xs.len(), 4));
    }
    ols(&xs, &ys)
}

/// Covariance estimate with a jackknife interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovEstimate {
    pub cov: f64,
    /// Half-width of the 95% interval.
    pub ci: f64,
    pub replicas: usize,
}

fn cov_of(f: &[f64], g: &[f64]) -> f64 {
    let n = f.len() as f64;
    let mf = f.iter().sum::<f64>() / n;
    let mg = g.iter().sum::<f64>() / n;
    f.iter().zip(g).map(|(a, b)| (a - mf) * (b - mg)).sum::<f64>() / (n - 1.0)
}

/// Sample covariance of paired observations with a grouped (delete-a-group)
/// jackknife standard error.
pub fn covariance_jackknife(f: &[f64], g: &[f64], groups: usize) -> Result<CovEstimate, StatsError> {
    let n = f.len();
    if n < 2 * groups.max(1) || n != g.len() {
        return Err(StatsError::Empty);
    }
    let cov = cov_of(f, g);
    let size = n / groups;
    let mut thetas = Vec::with_capacity(groups);
    for j in 0..groups {
        let (a, b) = (j * size, if j + 1 == groups { n } else { (j + 1) * size });
        let ff: Vec<f64> = f[..a].iter().chain(&f[b..]).copied().collect();
        let gg: Vec<f64> = g[..a].iter().chain(&g[b..]).copied().collect();
        thetas.push(cov_of(&ff, &gg));
    }
    let gm = groups as f64;
    let mean = thetas.iter().sum::<f64>() / gm;
    let var = (gm - 1.0) / gm * thetas.iter().map(|t| (t - mean).powi(2)).sum::<f64>();
    Ok(CovEstimate { cov, ci: Z95 * var.sqrt(), replicas: n })
}

/// Replicas needed so that a covariance of functionals bounded by 1 has a
/// 95% half-width of at most `width` in the worst case.
pub fn required_replicas(width: f64) -> usize {
    ((Z95 / width).powi(2)).ceil() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingRow {
    pub target: String,
    pub functional: String,
    pub s_l1: u64,
    pub cov: f64,
    pub ci: f64,
    pub gamma: f64,
    pub s_pow_gamma_cov: f64,
}

/// Covariance of a functional at the origin block and at each shift.
/// `f0[k]` is the origin value for replica `k`, `fs[j][k]` the value at shift `j`.
pub fn mixing_table(
    target: &str,
    functional: &str,
    shifts: &[u64],
    f0: &[f64],
    fs: &[Vec<f64>],
    gammas: &[f64],
    min_width: Option<f64>,
) -> Result<Vec<MixingRow>, StatsError> {
    if f0.is_empty() {
        return Err(StatsError::Empty);
    }
    if let Some(w) = min_width {
        let need = required_replicas(w);
        if f0.len() < need {
            return Err(StatsError::InsufficientReplicas { have: f0.len(), need, width: w });
        }
    }
    let mut rows = Vec::new();
    for (j, &s) in shifts.iter().enumerate() {
        let est = covariance_jackknife(f0, &fs[j], 20.min(f0.len() / 2).max(1))?;
        for &gamma in gammas {
            rows.push(MixingRow {
                target: target.into(),
                functional: functional.into(),
                s_l1: s,
                cov: est.cov,
                ci: est.ci,
                gamma,
                s_pow_gamma_cov: (s as f64).powf(gamma) * est.cov.abs(),
            });
        }
    }
    Ok(rows)
}

pub fn mixing_csv(rows: &[MixingRow]) -> String {
    let mut s = String::from("target,functional,s_l1,cov,ci,gamma,s_pow_gamma_cov\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.6e},{:.6e},{:.6},{:.6e}\n", r.target, r.functional, r.s_l1, r.cov, r.ci, r.gamma, r.s_pow_gamma_cov));
    }
    s
}

/// Empirical quantile (nearest-rank, `q` in [0,1]).
pub fn quantile(v: &[f64], q: f64) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let k = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
    Some(s[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn exact_power_laws() {
        let pts: Vec<(f64, f64)> = [8.0, 16.0, 32.0, 64.0, 128.0].iter().map(|&n: &f64| (n, 1.0 / n)).collect();
        let f = power_law_fit(&pts).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [8.0, 16.0, 32.0, 64.0].iter().map(|&n: &f64| (n, n.powf(-0.5))).collect();
        assert!((power_law_fit(&pts).unwrap().slope + 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_grid_rejected() {
        assert!(matches!(power_law_fit(&[(1.0, 0.5), (2.0, 0.25), (4.0, 0.0), (8.0, 0.0)]), Err(StatsError::DegenerateGrid(2, 4))));
    }

    #[test]
    fn wilson_edges() {
        assert_eq!(wilson(0, 100, Z95).0, 0.0);
        assert!(wilson(1, 100, Z95).0 > 0.0);
        assert_eq!(wilson(100, 100, Z95).1, 1.0);
        let (lo, hi) = wilson(50, 100, Z95);
        assert!((lo - 0.4038).abs() < 1e-3 && (hi - 0.5962).abs() < 1e-3);
    }

    #[test]
    fn covariance_variance_and_independence() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let f: Vec<f64> = (0..20000).map(|_| if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
        let g: Vec<f64> = (0..20000).map(|_| if rng.gen::<f64>() < 0.6 { 1.0 } else { 0.0 }).collect();
        let var = covariance_jackknife(&f, &f, 20).unwrap();
        assert!(var.cov >= 0.0 && (var.cov - 0.21).abs() < 0.01);
        let ind = covariance_jackknife(&f, &g, 20).unwrap();
        assert!(ind.cov.abs() <= ind.ci * 1.5, "{ind:?}");
    }

    #[test]
    fn insufficient_replicas_reports_requirement() {
        let f = vec![0.0, 1.0, 0.0, 1.0];
        let err = mixing_table("a", "f", &[1], &f, &[f.clone()], &[1.0], Some(0.01)).unwrap_err();
        assert_eq!(err, StatsError::InsufficientReplicas { have: 4, need: required_replicas(0.01), width: 0.01 });
    }

    proptest! {
        #[test]
        fn wilson_contains_point_estimate(k in 0u64..500, extra in 0u64..500) {
            let n = k + extra + 1;
            let (lo, hi) = wilson(k, n, Z95);
            let p = k as f64 / n as f64;
            prop_assert!(lo <= p + 1e-12 && p <= hi + 1e-12);
            prop_assert!(lo >= 0.0 && hi <= 1.0);
        }

        #[test]
        fn bounded_functionals_have_bounded_cov(bits in proptest::collection::vec(any::<(bool, bool)>(), 40..200)) {
            let f: Vec<f64> = bits.iter().map(|b| b.0 as u8 as f64).collect();
            let g: Vec<f64> = bits.iter().map(|b| b.1 as u8 as f64).collect();
            let c = covariance_jackknife(&f, &g, 10).unwrap();
            prop_assert!(c.cov.abs() <= 1.0);
        }
    }
}
