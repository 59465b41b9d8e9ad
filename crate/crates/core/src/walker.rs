//! Random walks in a fixed environment: exact sampling of rows, survival in
//! an insulated ray, drift along the flow and exit-time tails.

use crate::environment::{PatchedEnv, RowKind};
use crate::forest::Orientation;
use crate::geometry::{drift_geom, ins_ray_contains, u_depth};
use crate::lattice::{Direction, Site};
use crate::pruning::RayHandle;
use crate::rng::{derive, replica_rng};
use crate::stats::{ols, quantile, wilson, Z95};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WalkError {
    #[error("no ray point at depth {required} with u >= {u_min}; deepest available is {have}")]
    NotDeep { required: usize, have: usize, u_min: u32 },
    #[error("horizon must be at least 1")]
    Horizon,
}

/// Anything that assigns a transition row to a site. `None` means the walk
/// has left the region where the environment is known.
pub trait Environment: Sync {
    fn row(&self, x: &Site) -> Option<RowKind>;
}

pub struct Uniform;

impl Environment for Uniform {
    fn row(&self, _: &Site) -> Option<RowKind> {
        Some(RowKind::Uniform)
    }
}

/// `omega^z` of a single ray, uniform off its tube.
pub struct RayEnv<'a> {
    pub ray: &'a RayHandle,
}

impl Environment for RayEnv<'_> {
    fn row(&self, x: &Site) -> Option<RowKind> {
        match drift_geom(self.ray, x).ok()? {
            None => Some(RowKind::Uniform),
            Some((_, r, s)) => Some(RowKind::Ray { r, s }),
        }
    }
}

impl Environment for PatchedEnv {
    fn row(&self, x: &Site) -> Option<RowKind> {
        self.region.index(x).map(|k| self.rows[k])
    }
}

/// Patched environment inside its window, `omega^z` of one ray outside.
pub struct Composite<'a> {
    pub inner: &'a PatchedEnv,
    pub outer: RayEnv<'a>,
}

impl Environment for Composite<'_> {
    fn row(&self, x: &Site) -> Option<RowKind> {
        Environment::row(self.inner, x).or_else(|| self.outer.row(x))
    }
}

/// Single deterministic direction; for tests.
pub struct Forced(pub Direction);

impl Environment for Forced {
    fn row(&self, _: &Site) -> Option<RowKind> {
        Some(RowKind::Deterministic(self.0))
    }
}

/// Cumulative thresholds `floor(F_k 2^64)` of an exact row.
fn thresholds(kind: RowKind, d: usize) -> Vec<u128> {
    let row = kind.row(d);
    let mut acc = num_rational::Ratio::<u128>::from_integer(0);
    row.0
        .iter()
        .map(|p| {
            acc += num_rational::Ratio::new(*p.numer() as u128, *p.denom() as u128);
            (acc.numer() << 64) / acc.denom()
        })
        .collect()
}

/// Sample a neighbour: the uniform 64-bit draw `U` selects the first `k`
/// with `U < floor(F_k 2^64)`.
pub fn step(kind: RowKind, x: &Site, rng: &mut impl RngCore) -> Site {
    let th = thresholds(kind, x.dim());
    let u = rng.next_u64() as u128;
    let k = th.iter().position(|&t| u < t).unwrap_or(th.len() - 1);
    x.step(Direction::from_index(k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub replica: u64,
    /// First step outside the survival set, if any.
    pub exit_step: Option<u32>,
    /// Left the environment's known region before the horizon.
    pub truncated: bool,
    /// `zeta (X_n - x) . 1 / n` at `N/2`, `3N/4`, `N` (NaN if not reached).
    pub drift_checkpoints: [f64; 3],
    /// Minimum of the same quantity over `n in [N/2, N]`.
    pub drift_min: f64,
    /// Visits to the ray spine before exit or horizon.
    pub spine_visits: u32,
}

pub struct WalkSpec<'a> {
    pub start: Site,
    pub horizon: u32,
    pub zeta: Orientation,
    /// Survival set; `None` disables exit tracking.
    pub alive: Option<&'a (dyn Fn(&Site) -> bool + Sync)>,
    /// Stop at the first exit instead of running to the horizon.
    pub stop_on_exit: bool,
    pub spine: Option<&'a (dyn Fn(&Site) -> bool + Sync)>,
}

pub fn walk(env: &dyn Environment, spec: &WalkSpec, seed: u64, replica: u64) -> Trace {
    let mut rng = replica_rng(derive(seed, "walk"), replica);
    let n = spec.horizon;
    let mut x = spec.start;
    let mut tr = Trace { replica, exit_step: None, truncated: false, drift_checkpoints: [f64::NAN; 3], drift_min: f64::INFINITY, spine_visits: 0 };
    let cps = [n / 2, (3 * n) / 4, n];
    let d = x.dim();
    let mut cache: std::collections::HashMap<RowKind, Vec<u128>> = std::collections::HashMap::new();
    for t in 1..=n {
        let Some(kind) = env.row(&x) else {
            tr.truncated = true;
            break;
        };
        let th = cache.entry(kind).or_insert_with(|| thresholds(kind, d));
        let u = rng.next_u64() as u128;
        let k = th.iter().position(|&v| u < v).unwrap_or(th.len() - 1);
        x = x.step(Direction::from_index(k));
        if let Some(sp) = spec.spine {
            if tr.exit_step.is_none() && sp(&x) {
                tr.spine_visits += 1;
            }
        }
        if let Some(alive) = spec.alive {
            if tr.exit_step.is_none() && !alive(&x) {
                tr.exit_step = Some(t);
                if spec.stop_on_exit {
                    break;
                }
            }
        }
        if t >= n / 2 {
            let drift = spec.zeta.level(&x.sub(&spec.start)) as f64 / t as f64;
            tr.drift_min = tr.drift_min.min(drift);
            for (j, &c) in cps.iter().enumerate() {
                if c == t {
                    tr.drift_checkpoints[j] = drift;
                }
            }
        }
    }
    if tr.truncated || tr.drift_min == f64::INFINITY {
        tr.drift_min = f64::NAN;
    }
    tr
}

/// Survival at the horizon with a Wilson interval, drift of survivors and
/// the exit-time histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrapEstimate {
    pub replicas: u64,
    pub survived: u64,
    pub truncated: u64,
    pub survival: f64,
    pub wilson: (f64, f64),
    pub drift_q05: Option<f64>,
    pub drift_median: Option<f64>,
    pub exit_histogram: BTreeMap<u32, u64>,
    pub traces: Vec<Trace>,
}

impl TrapEstimate {
    pub fn from_traces(traces: Vec<Trace>) -> Self {
        let replicas = traces.len() as u64;
        let truncated = traces.iter().filter(|t| t.truncated).count() as u64;
        let survivors: Vec<&Trace> = traces.iter().filter(|t| t.exit_step.is_none() && !t.truncated).collect();
        let survived = survivors.len() as u64;
        let drifts: Vec<f64> = survivors.iter().map(|t| t.drift_min).filter(|v| v.is_finite()).collect();
        let mut hist = BTreeMap::new();
        for t in &traces {
            if let Some(e) = t.exit_step {
                *hist.entry(e).or_insert(0) += 1;
            }
        }
        TrapEstimate {
            replicas,
            survived,
            truncated,
            survival: survived as f64 / replicas.max(1) as f64,
            wilson: wilson(survived, replicas, Z95),
            drift_q05: quantile(&drifts, 0.05),
            drift_median: quantile(&drifts, 0.5),
            exit_histogram: hist,
            traces,
        }
    }

    /// Survival fraction at every horizon `n <= N` (nonincreasing by construction).
    pub fn survival_curve(&self, ns: &[u32]) -> Vec<(u32, f64)> {
        ns.iter()
            .map(|&n| {
                let alive = self.traces.iter().filter(|t| !t.truncated && t.exit_step.map_or(true, |e| e > n)).count();
                (n, alive as f64 / self.replicas.max(1) as f64)
            })
            .collect()
    }
}

/// Start site `alpha^depth(z)` with `u_z >= u_min`, searching downward from `depth`.
pub fn deep_start(ray: &RayHandle, depth: usize, u_min: u32) -> Result<Site, WalkError> {
    let have = ray.points.len().saturating_sub(1);
    let top = depth.min(have);
    for n in (0..=top).rev() {
        if u_depth(ray, &ray.points[n]).map_or(false, |u| u >= u_min) {
            if n < depth {
                break;
            }
            return Ok(ray.points[n]);
        }
    }
    Err(WalkError::NotDeep { required: depth, have, u_min })
}

/// Survival of the walk started on `ray` in its insulated ray.
pub fn trap_probability(env: &dyn Environment, ray: &RayHandle, start: Site, horizon: u32, replicas: u64, seed: u64) -> Result<TrapEstimate, WalkError> {
    if horizon == 0 {
        return Err(WalkError::Horizon);
    }
    let alive = |x: &Site| ins_ray_contains(ray, x).unwrap_or(false);
    let spec = WalkSpec { start, horizon, zeta: ray.orientation, alive: Some(&alive), stop_on_exit: true, spine: None };
    let traces: Vec<Trace> = (0..replicas).into_par_iter().map(|i| walk(env, &spec, seed, i)).collect();
    Ok(TrapEstimate::from_traces(traces))
}

/// Exit-time distribution from `x` under `omega^z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitTail {
    pub replicas: u64,
    /// `P[T = n]` for observed `n`; `n = 0` when `x` is outside the tube.
    pub pmf: BTreeMap<u32, f64>,
    pub survival_at_horizon: f64,
    /// Slope of `log P[T > n]` against `n^beta` (negative for a stretched-exponential shape).
    pub log_survival_slope: Option<f64>,
    pub mean_spine_visits: f64,
    pub exit_times: Vec<Option<u32>>,
}

pub fn exit_tail(ray: &RayHandle, x: Site, replicas: u64, horizon: u32, seed: u64) -> ExitTail {
    let env = RayEnv { ray };
    let inside = ins_ray_contains(ray, &x).unwrap_or(false);
    if !inside {
        return ExitTail {
            replicas,
            pmf: BTreeMap::from([(0, 1.0)]),
            survival_at_horizon: 0.0,
            log_survival_slope: None,
            mean_spine_visits: 0.0,
            exit_times: vec![Some(0); replicas as usize],
        };
    }
    let spine_set: std::collections::HashSet<Site> = ray.points.iter().copied().collect();
    let alive = |y: &Site| ins_ray_contains(ray, y).unwrap_or(false);
    let spine = |y: &Site| spine_set.contains(y);
    let spec = WalkSpec { start: x, horizon, zeta: ray.orientation, alive: Some(&alive), stop_on_exit: true, spine: Some(&spine) };
    let traces: Vec<Trace> = (0..replicas).into_par_iter().map(|i| walk(&env, &spec, seed, i)).collect();
    let mut pmf = BTreeMap::new();
    for t in &traces {
        if let Some(e) = t.exit_step {
            *pmf.entry(e).or_insert(0.0) += 1.0 / replicas as f64;
        }
    }
    let exit_times: Vec<Option<u32>> = traces.iter().map(|t| t.exit_step).collect();
    let surv = |n: u32| exit_times.iter().filter(|e| e.map_or(true, |e| e > n)).count() as f64 / replicas as f64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut n = 1;
    while n <= horizon {
        let s = surv(n);
        if s > 0.0 {
            xs.push((n as f64).powf(ray.beta));
            ys.push(s.ln());
        }
        n *= 2;
    }
    let slope = ols(&xs, &ys).ok().map(|f| f.slope);
    ExitTail {
        replicas,
        pmf,
        survival_at_horizon: surv(horizon),
        log_survival_slope: slope,
        mean_spine_visits: traces.iter().map(|t| t.spine_visits as f64).sum::<f64>() / replicas as f64,
        exit_times,
    }
}

/// `walks.csv` with one row per replica.
pub fn walks_csv(traces: &[Trace]) -> String {
    let mut s = String::from("replica,survived,exit_step,drift_half,drift_3q,drift_full,truncated_flag\n");
    for t in traces {
        let f = |v: f64| if v.is_finite() { format!("{v:.6}") } else { "nan".into() };
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t.replica,
            (t.exit_step.is_none() && !t.truncated) as u8,
            t.exit_step.map_or(-1, |e| e as i64),
            f(t.drift_checkpoints[0]),
            f(t.drift_checkpoints[1]),
            f(t.drift_checkpoints[2]),
            t.truncated as u8
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::TransitionRow;
    use crate::rng::replica_rng;

    fn straight(d: usize, len: usize, beta: f64, zeta: Orientation) -> RayHandle {
        let mut pts = vec![Site::origin(d)];
        for k in 1..len {
            let last = pts[k - 1];
            pts.push(last.step(zeta.dir(k % d)));
        }
        RayHandle { leaf: pts[0], forest: 1, orientation: zeta, leaf_certain: true, certain_len: len, window_len: len, points: pts, frontier: None, beta }
    }

    fn freq(kind: RowKind, d: usize, n: u64) -> Vec<u64> {
        let mut rng = replica_rng(1, 0);
        let mut c = vec![0u64; 2 * d];
        let x = Site::origin(d);
        for _ in 0..n {
            let y = step(kind, &x, &mut rng);
            c[x.direction_to(&y).unwrap().index()] += 1;
        }
        c
    }

    #[test]
    fn uniform_row_frequencies() {
        let n = 1_000_000u64;
        for (k, c) in freq(RowKind::Uniform, 3, n).into_iter().enumerate() {
            let p = 1.0 / 6.0;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((c as f64 - n as f64 * p).abs() < 5.0 * sd, "dir {k}: {c}");
        }
    }

    #[test]
    fn merged_row_frequency() {
        let n = 1_000_000u64;
        let r = Direction::pos(2);
        let c = freq(RowKind::Ray { r, s: r }, 3, n);
        let sd = (n as f64 * 0.95 * 0.05).sqrt();
        assert!((c[r.index()] as f64 - 0.95 * n as f64).abs() < 5.0 * sd);
    }

    #[test]
    fn thresholds_are_exact() {
        let th = thresholds(RowKind::Uniform, 2);
        assert_eq!(th[3], 1u128 << 64);
        assert_eq!(th[1], (1u128 << 64) / 2);
        let _ = TransitionRow::uniform(2);
    }

    #[test]
    fn forced_walk_has_unit_drift() {
        let spec = WalkSpec { start: Site::origin(3), horizon: 100, zeta: Orientation::Plus, alive: None, stop_on_exit: false, spine: None };
        let t = walk(&Forced(Direction::pos(1)), &spec, 3, 0);
        assert_eq!(t.drift_min, 1.0);
        assert_eq!(t.drift_checkpoints, [1.0; 3]);
    }

    #[test]
    fn walks_are_deterministic_and_nearest_neighbour() {
        let ray = straight(3, 3000, 0.3, Orientation::Plus);
        let env = RayEnv { ray: &ray };
        let alive = |x: &Site| ins_ray_contains(&ray, x).unwrap_or(false);
        let spec = WalkSpec { start: ray.points[400], horizon: 500, zeta: Orientation::Plus, alive: Some(&alive), stop_on_exit: false, spine: None };
        let a = walk(&env, &spec, 9, 4);
        let b = walk(&env, &spec, 9, 4);
        assert_eq!(a, b);
        let mut rng = replica_rng(derive(9, "walk"), 4);
        let mut x = spec.start;
        for _ in 0..200 {
            let y = step(env.row(&x).unwrap(), &x, &mut rng);
            assert_eq!(x.l1(&y), 1);
            x = y;
        }
    }

    #[test]
    fn exit_time_at_least_depth() {
        let ray = straight(3, 4000, 0.3, Orientation::Minus);
        let x = ray.points[900].add(&Site::new(&[1, 0, 0]));
        let u = u_depth(&ray, &x).unwrap();
        let tail = exit_tail(&ray, x, 300, 2000, 5);
        assert!(tail.exit_times.iter().flatten().all(|&t| t >= u));
        let out = exit_tail(&ray, Site::new(&[5, 5, 5]), 10, 10, 5);
        assert_eq!(out.pmf, BTreeMap::from([(0, 1.0)]));
        // survival is nonincreasing
        let mut last = 1.0;
        for n in [1u32, 10, 100, 1000, 2000] {
            let s = tail.exit_times.iter().filter(|e| e.map_or(true, |e| e > n)).count() as f64;
            assert!(s <= last * 300.0 + 1e-9);
            last = s / 300.0;
        }
    }

    #[test]
    fn deeper_start_exits_later_on_matched_seeds() {
        let ray = straight(3, 6000, 0.2, Orientation::Plus);
        let shallow = exit_tail(&ray, ray.points[2], 400, 2000, 11);
        let deep = exit_tail(&ray, ray.points[300], 400, 2000, 11);
        let surv = |t: &ExitTail, n: u32| t.exit_times.iter().filter(|e| e.map_or(true, |e| e > n)).count();
        for n in [1, 4, 16, 64, 256, 1024, 2000] {
            assert!(surv(&deep, n) >= surv(&shallow, n), "n = {n}");
        }
        let mean = |t: &ExitTail| t.exit_times.iter().map(|e| e.unwrap_or(2001) as f64).sum::<f64>();
        assert!(mean(&deep) > mean(&shallow));
        assert!(deep.log_survival_slope.unwrap() < 0.0);
    }

    #[test]
    fn uniform_control_leaves_tube() {
        let ray = straight(3, 20000, 0.3, Orientation::Plus);
        let start = ray.points[2000];
        let est = trap_probability(&Uniform, &ray, start, 4000, 200, 1).unwrap();
        let tube = trap_probability(&RayEnv { ray: &ray }, &ray, start, 4000, 200, 1).unwrap();
        assert!(est.survival < tube.survival);
        let curve = tube.survival_curve(&[10, 100, 1000, 4000]);
        assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1));
        assert!(tube.drift_q05.unwrap() > 0.4);
    }

    #[test]
    fn deep_start_reports_required_depth() {
        let ray = straight(2, 100, 0.5, Orientation::Plus);
        assert!(deep_start(&ray, 50, 3).is_ok());
        assert_eq!(deep_start(&ray, 500, 1), Err(WalkError::NotDeep { required: 500, have: 99, u_min: 1 }));
    }

    #[test]
    fn csv_shape() {
        let t = Trace { replica: 0, exit_step: Some(7), truncated: false, drift_checkpoints: [0.5, f64::NAN, 1.0], drift_min: 0.5, spine_visits: 1 };
        let csv = walks_csv(&[t]);
        assert_eq!(csv.lines().nth(1).unwrap(), "0,0,7,0.500000,nan,1.000000,0");
    }
}
