//! Tube-trapping environments `omega^z`, exit-time functionals by backward
//! induction, the `c_31` calibration, and the patched global environment.

use crate::field::{read_header, read_region, read_u64, write_region, FieldError, FORMAT_VERSION};
use crate::forest::LazyForest;
use crate::geometry::{drift_geom, ins_ray_contains, ray_geom, tube_sites, GeomError, RayGeom};
use crate::lattice::{ball_radius, BoxRegion, Direction, Site};
use crate::metrics::{Censored, HInsField};
use crate::pruning::RayHandle;
use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};
use thiserror::Error;

pub type Prob = Ratio<u64>;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("exit DP needs {needed} states, budget is {budget}")]
    StateBudget { needed: usize, budget: usize },
    #[error("no c_31 up to {cap} satisfies the tail condition; worst pair ray {ray} site {site} excess {excess:.3e}")]
    ScanExhausted { cap: f64, ray: u32, site: Site, excess: f64 },
    #[error("empty calibration sample")]
    EmptySample,
}

/// `kappa = 1 / (20 (2d - 1))`.
pub fn kappa(d: usize) -> Prob {
    Ratio::new(1, 20 * (2 * d as u64 - 1))
}

/// One row of transition probabilities, indexed by `Direction::index`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransitionRow(pub Vec<Prob>);

impl TransitionRow {
    pub fn uniform(d: usize) -> Self {
        TransitionRow(vec![Ratio::new(1, 2 * d as u64); 2 * d])
    }

    /// `3/4` on `r`, `1/5` on `s`, the rest split evenly; `r = s` merges the two.
    pub fn omega(d: usize, r: Direction, s: Direction) -> Self {
        let others = 2 * d as u64 - 1 - (r != s) as u64;
        let rest = Ratio::new(1, 20 * others);
        let mut p = vec![rest; 2 * d];
        p[r.index()] = Ratio::new(3, 4);
        if r == s {
            p[r.index()] += Ratio::new(1, 5);
        } else {
            p[s.index()] = Ratio::new(1, 5);
        }
        TransitionRow(p)
    }

    pub fn sum(&self) -> Prob {
        self.0.iter().copied().fold(Ratio::from_integer(0), |a, b| a + b)
    }

    pub fn min(&self) -> Prob {
        *self.0.iter().min().unwrap()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|r| *r.numer() as f64 / *r.denom() as f64).collect()
    }
}

/// Row kinds stored per site; expanded to exact rows on demand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowKind {
    Uniform,
    Ray { r: Direction, s: Direction },
    /// Probability one on a single direction; only for control walks, never installed.
    Deterministic(Direction),
}

impl RowKind {
    pub fn row(self, d: usize) -> TransitionRow {
        match self {
            RowKind::Uniform => TransitionRow::uniform(d),
            RowKind::Ray { r, s } => TransitionRow::omega(d, r, s),
            RowKind::Deterministic(e) => {
                let mut p = vec![Ratio::from_integer(0); 2 * d];
                p[e.index()] = Ratio::from_integer(1);
                TransitionRow(p)
            }
        }
    }
}

/// Exit statistics of one (ray, site) pair at a list of horizons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitStats {
    pub horizons: Vec<u32>,
    /// `P[T_z <= N]` per horizon.
    pub p: Vec<f64>,
    /// `E[T_z; T_z <= N]` per horizon.
    pub e: Vec<f64>,
}

impl ExitStats {
    pub fn at(&self, n: u32) -> Option<(f64, f64)> {
        self.horizons.iter().position(|&h| h == n).map(|k| (self.p[k], self.e[k]))
    }
}

/// Backward induction for `P[T <= k]` and `E[T; T <= k]` over a finite set of
/// tube states. `next[y][e]` is `Some(j)` for a tube neighbour, `None` for an
/// exit. Values at the requested `(state, horizon)` pairs are returned.
pub fn exit_dp(weights: &[Vec<f64>], next: &[Vec<Option<usize>>], queries: &[(usize, u32)]) -> Vec<(f64, f64)> {
    let n = weights.len();
    let kmax = queries.iter().map(|q| q.1).max().unwrap_or(0);
    let mut by_k: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (qi, q) in queries.iter().enumerate() {
        by_k.entry(q.1).or_default().push(qi);
    }
    let mut out = vec![(0.0, 0.0); queries.len()];
    let mut q = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];
    let mut q2 = vec![0.0f64; n];
    let mut e2 = vec![0.0f64; n];
    for k in 0..=kmax {
        if k > 0 {
            for y in 0..n {
                let (mut a, mut b) = (0.0, 0.0);
                for (w, nb) in weights[y].iter().zip(&next[y]) {
                    match nb {
                        None => {
                            a += w;
                            b += w;
                        }
                        Some(j) => {
                            a += w * q[*j];
                            b += w * (e[*j] + q[*j]);
                        }
                    }
                }
                q2[y] = a;
                e2[y] = b;
            }
            std::mem::swap(&mut q, &mut q2);
            std::mem::swap(&mut e, &mut e2);
        }
        if let Some(qs) = by_k.get(&k) {
            for &qi in qs {
                out[qi] = (q[queries[qi].0], e[queries[qi].0]);
            }
        }
    }
    out
}

/// One in-window site of one insulated ray, with its geometry and exit data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub ray: u32,
    pub site: Site,
    pub geom: RayGeom,
    pub big_h: Censored,
    pub exit: ExitStats,
}

impl PairRecord {
    pub fn certain(&self) -> bool {
        self.big_h.is_exact()
    }

    /// `max(H, 1)`; leaves of the full forest have `h = 0`.
    pub fn h_eff(&self) -> u32 {
        self.big_h.value().max(1)
    }
}

/// Horizon `ceil(c H) ^ n_max`.
pub fn horizon(c: f64, h: u32, n_max: u32) -> u32 {
    let m = (c * h as f64 - 1e-9).ceil();
    if m >= n_max as f64 {
        n_max
    } else {
        m.max(0.0) as u32
    }
}

/// The `c_31` candidates `floor * 2^k` up to the first one whose horizons
/// all saturate at `n_max` for `H >= 1`.
pub fn c31_candidates(floor: f64, n_max: u32) -> Vec<f64> {
    let mut out = vec![floor];
    while *out.last().unwrap() < n_max as f64 {
        out.push(out.last().unwrap() * 2.0);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitConfig {
    pub n_max: u32,
    pub c31_floor: f64,
    pub state_budget: usize,
}

/// Exit data for all rays of both forests restricted to a window.
#[derive(Clone, Debug)]
pub struct ExitTable {
    pub region: BoxRegion,
    pub config: ExitConfig,
    pub candidates: Vec<f64>,
    pub rays: Vec<RayHandle>,
    pub pairs: Vec<PairRecord>,
}

/// Ray length needed so that every state reachable from the window within
/// `n_max` steps is classified exactly.
pub fn required_ray_len(ray: &RayHandle, region: &BoxRegion, n_max: u32) -> usize {
    let z = ray.points[0];
    let dmax = ray.points.iter().take(ray.window_len.max(1)).map(|p| p.l1(&z)).max().unwrap_or(0) as usize;
    let far = dmax + 4 + n_max as usize;
    let _ = region;
    far + 2 * ball_radius(far as u64 + 64, ray.beta) as usize + 8
}

/// Extend window rays with lazily computed ancestors.
pub fn extend_rays(rays: &mut [RayHandle], lazy: [&LazyForest<'_>; 2], region: &BoxRegion, n_max: u32) {
    rays.par_iter_mut().for_each(|r| {
        let len = required_ray_len(r, region, n_max);
        r.extend_lazy(lazy[(r.forest - 1) as usize], len);
    });
}

fn ray_exits(ray_id: u32, ray: &RayHandle, region: &BoxRegion, big_h: &HInsField, cfg: &ExitConfig, candidates: &[f64]) -> Result<Vec<PairRecord>, EnvError> {
    let d = region.dim();
    let z = ray.points[0];
    let tube = tube_sites(ray, ray.points.len());
    let inside: Vec<Site> = tube.iter().filter(|x| region.contains(x)).copied().collect();
    if inside.is_empty() {
        return Ok(Vec::new());
    }
    let dmax = inside.iter().map(|x| x.l1(&z)).max().unwrap();
    let reach = dmax + cfg.n_max as u64;
    let states: Vec<Site> = tube.into_iter().filter(|y| y.l1(&z) <= reach).collect();
    if states.len() > cfg.state_budget {
        return Err(EnvError::StateBudget { needed: states.len(), budget: cfg.state_budget });
    }
    let index: HashMap<Site, usize> = states.iter().enumerate().map(|(k, s)| (*s, k)).collect();
    let mut weights = Vec::with_capacity(states.len());
    let mut next = Vec::with_capacity(states.len());
    let mut geoms = Vec::with_capacity(states.len());
    for y in &states {
        // states on the far boundary have nothing reachable behind them; their
        // rows only matter beyond the horizon
        let g = match drift_geom(ray, y) {
            Ok(g) => Some(g),
            Err(GeomError::RayExhausted { .. }) if y.l1(&z) + 1 > dmax + cfg.n_max as u64 / 2 => None,
            Err(e) => return Err(e.into()),
        };
        let row = match g.flatten() {
            Some((_, r, s)) => TransitionRow::omega(d, r, s).to_f64(),
            None => TransitionRow::uniform(d).to_f64(),
        };
        let mut nb = Vec::with_capacity(2 * d);
        for k in 0..2 * d {
            let w = y.step(Direction::from_index(k));
            nb.push(match index.get(&w) {
                Some(&j) => Some(j),
                None if w.l1(&z) > reach => Some(usize::MAX),
                None => None,
            });
        }
        weights.push(row);
        next.push(nb);
        geoms.push(g);
    }
    // states beyond reach are frozen at zero through a sink state
    let sink = states.len();
    weights.push(vec![0.0; 2 * d]);
    next.push(vec![Some(sink); 2 * d]);
    for nb in next.iter_mut() {
        for j in nb.iter_mut() {
            if *j == Some(usize::MAX) {
                *j = Some(sink);
            }
        }
    }
    let mut queries = Vec::new();
    let mut meta = Vec::new();
    for x in &inside {
        let k = index[x];
        debug_assert!(geoms[k].is_some());
        let g = ray_geom(ray, x)?;
        let bh = big_h.get(x).expect("window site");
        let mut hs: Vec<u32> = candidates.iter().map(|&c| horizon(c, bh.value().max(1), cfg.n_max)).collect();
        hs.push(cfg.n_max);
        hs.sort_unstable();
        hs.dedup();
        for &h in &hs {
            queries.push((k, h));
        }
        meta.push((*x, g, bh, hs));
    }
    let vals = exit_dp(&weights, &next, &queries);
    let mut out = Vec::with_capacity(meta.len());
    let mut qi = 0;
    for (site, geom, big_h, hs) in meta {
        let n = hs.len();
        let slice = &vals[qi..qi + n];
        qi += n;
        out.push(PairRecord {
            ray: ray_id,
            site,
            geom,
            big_h,
            exit: ExitStats { horizons: hs, p: slice.iter().map(|v| v.0).collect(), e: slice.iter().map(|v| v.1).collect() },
        });
    }
    Ok(out)
}

/// Exit statistics for every in-window site of every ray. `big_h[i]` is the
/// `H` field of forest `i + 1`; rays must already be extended.
pub fn exit_table(rays: Vec<RayHandle>, region: BoxRegion, big_h: [&HInsField; 2], cfg: ExitConfig) -> Result<ExitTable, EnvError> {
    let candidates = c31_candidates(cfg.c31_floor, cfg.n_max);
    let per_ray: Result<Vec<Vec<PairRecord>>, EnvError> = rays
        .par_iter()
        .enumerate()
        .map(|(k, r)| ray_exits(k as u32, r, &region, big_h[(r.forest - 1) as usize], &cfg, &candidates))
        .collect();
    let pairs = per_ray?.into_iter().flatten().collect();
    Ok(ExitTable { region, config: cfg, candidates, rays, pairs })
}

/// Truncated tail mass `E[T; c H < T <= n_max]` of one pair.
pub fn tail_mass(p: &PairRecord, c: f64, n_max: u32) -> f64 {
    let m = horizon(c, p.h_eff(), n_max);
    let (_, em) = p.exit.at(m).expect("candidate horizon recorded");
    let (_, en) = p.exit.at(n_max).expect("cap horizon recorded");
    en - em
}

/// Smallest candidate `c_31` with `E[T; c H < T <= n_max] <= kappa^u` on every
/// certain pair of the sample.
pub fn choose_c31(sample: &[&PairRecord], candidates: &[f64], n_max: u32, kappa: f64) -> Result<f64, EnvError> {
    let certain: Vec<&&PairRecord> = sample.iter().filter(|p| p.certain()).collect();
    if certain.is_empty() {
        return Err(EnvError::EmptySample);
    }
    let mut worst = (f64::NEG_INFINITY, 0u32, certain[0].site);
    for &c in candidates {
        worst = (f64::NEG_INFINITY, 0, certain[0].site);
        for p in &certain {
            let excess = tail_mass(p, c, n_max) - kappa.powi(p.geom.u as i32);
            if excess > worst.0 {
                worst = (excess, p.ray, p.site);
            }
        }
        if worst.0 <= 1e-12 {
            return Ok(c);
        }
    }
    Err(EnvError::ScanExhausted { cap: *candidates.last().unwrap(), ray: worst.1, site: worst.2, excess: worst.0 })
}

/// Which site-level choice the patch made.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    Uniform,
    /// Minimiser of `E_z(x)` over the covering rays.
    Chosen(u32),
    /// Some covering ray has a censored `H`: first covering ray, excluded
    /// from asserted statistics.
    Flagged(u32),
}

/// Patch rule; `Argmax` exists only as a negative control.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchRule {
    Argmin,
    Argmax,
}

#[derive(Clone, Debug)]
pub struct PatchedEnv {
    pub region: BoxRegion,
    pub d: usize,
    pub c31: f64,
    pub n_max: u32,
    pub rows: Vec<RowKind>,
    pub choice: Vec<Choice>,
    /// `E(x)` and `p(x)` of the chosen pair (NaN where none).
    pub e: Vec<f64>,
    pub p: Vec<f64>,
    pub u: Vec<u32>,
    /// Site is inside some insulated ray (including flagged sites).
    pub covered: Vec<bool>,
}

fn ray_key(t: &ExitTable, ray: u32) -> (u8, Site) {
    let r = &t.rays[ray as usize];
    (r.forest, r.leaf)
}

pub fn patch(t: &ExitTable, c31: f64, rule: PatchRule) -> PatchedEnv {
    let region = t.region;
    let d = region.dim();
    let n = region.volume() as usize;
    let mut by_site: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, p) in t.pairs.iter().enumerate() {
        by_site[region.index(&p.site).unwrap()].push(k);
    }
    let mut env = PatchedEnv {
        region,
        d,
        c31,
        n_max: t.config.n_max,
        rows: vec![RowKind::Uniform; n],
        choice: vec![Choice::Uniform; n],
        e: vec![f64::NAN; n],
        p: vec![f64::NAN; n],
        u: vec![0; n],
        covered: vec![false; n],
    };
    for (k, cands) in by_site.iter_mut().enumerate() {
        if cands.is_empty() {
            continue;
        }
        cands.sort_by_key(|&j| ray_key(t, t.pairs[j].ray));
        env.covered[k] = true;
        let pick = if cands.iter().any(|&j| !t.pairs[j].certain()) {
            let j = cands[0];
            env.choice[k] = Choice::Flagged(t.pairs[j].ray);
            j
        } else {
            let val = |j: usize| {
                let p = &t.pairs[j];
                p.exit.at(horizon(c31, p.h_eff(), t.config.n_max)).unwrap().1
            };
            let mut best = cands[0];
            for &j in &cands[1..] {
                let better = match rule {
                    PatchRule::Argmin => val(j) < val(best),
                    PatchRule::Argmax => val(j) > val(best),
                };
                if better {
                    best = j;
                }
            }
            env.choice[k] = Choice::Chosen(t.pairs[best].ray);
            best
        };
        let p = &t.pairs[pick];
        let (pv, ev) = p.exit.at(horizon(c31, p.h_eff(), t.config.n_max)).unwrap();
        env.rows[k] = RowKind::Ray { r: p.geom.r.unwrap(), s: p.geom.s.unwrap() };
        env.e[k] = ev;
        env.p[k] = pv;
        env.u[k] = p.geom.u;
    }
    env
}

/// Worst one-step residual `sum_e omega(y, y+e) E(y+e) - E(y)` over eligible sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub eligible: usize,
    pub evaluated: usize,
    /// Eligible sites skipped because a neighbour is outside the window or flagged.
    pub skipped: usize,
    pub worst: f64,
    pub witness: Option<Site>,
}

/// Residuals at chosen (certain) sites with `E(y) < threshold` and
/// `u(y) >= min_u`. The stopping rule uses `threshold = kappa`, `min_u = 0`.
pub fn supermartingale_residuals(env: &PatchedEnv, threshold: f64, min_u: u32) -> Residuals {
    let d = env.d;
    let mut res = Residuals { eligible: 0, evaluated: 0, skipped: 0, worst: f64::NEG_INFINITY, witness: None };
    for k in 0..env.rows.len() {
        if !matches!(env.choice[k], Choice::Chosen(_)) || !(env.e[k] < threshold) || env.u[k] < min_u {
            continue;
        }
        res.eligible += 1;
        let y = env.region.site(k);
        let row = env.rows[k].row(d).to_f64();
        let mut acc = 0.0;
        let mut ok = true;
        for (j, w) in row.iter().enumerate() {
            let nb = y.step(Direction::from_index(j));
            match env.region.index(&nb) {
                None => ok = false,
                Some(m) => match env.choice[m] {
                    Choice::Uniform => {}
                    Choice::Chosen(_) => acc += w * env.e[m],
                    Choice::Flagged(_) => ok = false,
                },
            }
        }
        if !ok {
            res.skipped += 1;
            continue;
        }
        res.evaluated += 1;
        let delta = acc - env.e[k];
        if delta > res.worst {
            res.worst = delta;
            res.witness = Some(y);
        }
    }
    res
}

/// Counts of violations of the exact per-pair chains.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainCheck {
    pub pairs: usize,
    pub certain: usize,
    /// `kappa^u <= p <= E <= E(N)` for all recorded `N >= M`.
    pub chain_violations: usize,
    pub depth_one: usize,
    /// `E >= kappa` at `u = 1`.
    pub depth_one_violations: usize,
    /// `E(n_max) <= E + p` (reported, tail bracket of the second line).
    pub tail_bracket_failures: usize,
    pub worst_chain: Option<(u32, Site)>,
}

pub fn check_chains(t: &ExitTable, c31: f64) -> ChainCheck {
    let kap = {
        let k = kappa(t.region.dim());
        *k.numer() as f64 / *k.denom() as f64
    };
    let n_max = t.config.n_max;
    let mut c = ChainCheck::default();
    for p in &t.pairs {
        c.pairs += 1;
        if !p.certain() {
            continue;
        }
        c.certain += 1;
        let m = horizon(c31, p.h_eff(), n_max);
        let (pv, ev) = p.exit.at(m).unwrap();
        let lower = kap.powi(p.geom.u as i32);
        let mut ok = lower <= pv * (1.0 + 1e-12) + 1e-300 && pv <= ev + 1e-12;
        for (k, &h) in p.exit.horizons.iter().enumerate() {
            if h >= m && p.exit.e[k] < ev - 1e-12 {
                ok = false;
            }
        }
        if !ok {
            c.chain_violations += 1;
            c.worst_chain.get_or_insert((p.ray, p.site));
        }
        if p.geom.u == 1 {
            c.depth_one += 1;
            if ev < kap - 1e-12 {
                c.depth_one_violations += 1;
            }
        }
        let (_, en) = p.exit.at(n_max).unwrap();
        if en > ev + pv + 1e-12 {
            c.tail_bracket_failures += 1;
        }
    }
    c
}

/// Extrapolated `E^infinity` from the dyadic horizons of one pair: increments
/// are fitted as `exp(a - b N^beta)` and summed to infinity. Reported only.
pub fn extrapolate_e_infinity(p: &PairRecord, beta: f64) -> Option<f64> {
    let hs = &p.exit.horizons;
    let es = &p.exit.e;
    let pts: Vec<(f64, f64)> = (1..hs.len())
        .filter(|&k| es[k] > es[k - 1] && hs[k] > hs[k - 1])
        .map(|k| ((hs[k] as f64).powf(beta), ((es[k] - es[k - 1]) / (hs[k] - hs[k - 1]) as f64).ln()))
        .collect();
    if pts.len() < 2 {
        return Some(*es.last()?);
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let fit = crate::stats::ols(&xs, &ys).ok()?;
    if fit.slope >= 0.0 {
        return None;
    }
    let last = *hs.last()? as u64;
    let mut extra = 0.0;
    for n in last + 1..last + 1_000_000 {
        let inc = (fit.intercept + fit.slope * (n as f64).powf(beta)).exp();
        extra += inc;
        if inc < 1e-16 {
            break;
        }
    }
    Some(es.last()? + extra)
}

pub const ENV_MAGIC: &[u8; 4] = b"UMBE";

/// Run manifest for a patched environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvManifest {
    pub kappa: String,
    pub c_31: f64,
    pub beta: f64,
    pub n_max: u32,
    pub uniform_sites: usize,
    pub chosen_sites: usize,
    pub flagged_sites: usize,
    pub chosen_per_forest: [usize; 2],
    /// Number of leaves whose ray was chosen at exactly `k` sites, keyed by `k`.
    pub chosen_leaf_histogram: BTreeMap<usize, usize>,
}

impl PatchedEnv {
    pub fn row(&self, x: &Site) -> Option<TransitionRow> {
        self.region.index(x).map(|k| self.rows[k].row(self.d))
    }

    pub fn manifest(&self, t: &ExitTable, beta: f64) -> EnvManifest {
        let mut per_leaf: HashMap<u32, usize> = HashMap::new();
        let mut m = EnvManifest {
            kappa: kappa(self.d).to_string(),
            c_31: self.c31,
            beta,
            n_max: self.n_max,
            uniform_sites: 0,
            chosen_sites: 0,
            flagged_sites: 0,
            chosen_per_forest: [0, 0],
            chosen_leaf_histogram: BTreeMap::new(),
        };
        for c in &self.choice {
            match c {
                Choice::Uniform => m.uniform_sites += 1,
                Choice::Flagged(_) => m.flagged_sites += 1,
                Choice::Chosen(r) => {
                    m.chosen_sites += 1;
                    m.chosen_per_forest[(t.rays[*r as usize].forest - 1) as usize] += 1;
                    *per_leaf.entry(*r).or_default() += 1;
                }
            }
        }
        for v in per_leaf.values() {
            *m.chosen_leaf_histogram.entry(*v).or_default() += 1;
        }
        m
    }

    /// Dump: magic, version, d, region, then `2d` reduced `(num, den)` pairs per site.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(ENV_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        write_region(w, &self.region)?;
        let mut cache: HashMap<RowKind, Vec<u8>> = HashMap::new();
        for kind in &self.rows {
            let bytes = cache.entry(*kind).or_insert_with(|| {
                let mut b = Vec::new();
                for p in kind.row(self.d).0 {
                    b.extend_from_slice(&p.numer().to_le_bytes());
                    b.extend_from_slice(&p.denom().to_le_bytes());
                }
                b
            });
            w.write_all(bytes)?;
        }
        Ok(())
    }
}

/// Rows read back from a dump.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvDump {
    pub region: BoxRegion,
    pub rows: Vec<TransitionRow>,
}

impl EnvDump {
    pub fn read_dump<R: Read>(r: &mut R) -> Result<Self, FieldError> {
        let d = read_header(r, ENV_MAGIC)?;
        let region = read_region(r, d)?;
        let mut rows = Vec::with_capacity(region.volume() as usize);
        for _ in 0..region.volume() {
            let mut row = Vec::with_capacity(2 * d);
            for _ in 0..2 * d {
                let num = read_u64(r)?;
                let den = read_u64(r)?;
                if den == 0 {
                    return Err(FieldError::Format("zero denominator".into()));
                }
                row.push(Ratio::new(num, den));
            }
            rows.push(TransitionRow(row));
        }
        Ok(EnvDump { region, rows })
    }
}

/// Probability of every path of length at most `horizon` from `x`, by explicit
/// enumeration: returns `(P[T <= horizon], E[T; T <= horizon])`.
pub fn enumerate_exit(x: &Site, horizon: u32, inside: &dyn Fn(&Site) -> bool, row: &dyn Fn(&Site) -> Vec<f64>) -> (f64, f64) {
    fn rec(y: &Site, t: u32, mass: f64, left: u32, inside: &dyn Fn(&Site) -> bool, row: &dyn Fn(&Site) -> Vec<f64>, acc: &mut (f64, f64)) {
        if !inside(y) {
            acc.0 += mass;
            acc.1 += mass * t as f64;
            return;
        }
        if left == 0 {
            return;
        }
        for (k, w) in row(y).iter().enumerate() {
            rec(&y.step(Direction::from_index(k)), t + 1, mass * w, left - 1, inside, row, acc);
        }
    }
    let mut acc = (0.0, 0.0);
    rec(x, 0, 1.0, horizon, inside, row, &mut acc);
    acc
}

/// Row of `omega^z` at any site (uniform off the tube).
pub fn omega_z_row(ray: &RayHandle, x: &Site) -> Result<TransitionRow, GeomError> {
    let d = x.dim();
    if !ins_ray_contains(ray, x)? {
        return Ok(TransitionRow::uniform(d));
    }
    let g = ray_geom(ray, x)?;
    Ok(TransitionRow::omega(d, g.r.unwrap(), g.s.unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::Orientation;
    use crate::metrics::CensoredField;
    use crate::pruning::RayHandle;
    use rand::{Rng, SeedableRng};

    fn rat(a: u64, b: u64) -> Prob {
        Ratio::new(a, b)
    }

    fn random_ray(d: usize, len: usize, beta: f64, seed: u64, zeta: Orientation, start: Site) -> RayHandle {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut pts = vec![start];
        for _ in 1..len {
            let a = rng.gen_range(0..d);
            let last = *pts.last().unwrap();
            pts.push(last.step(zeta.dir(a)));
        }
        RayHandle { leaf: start, forest: 1, orientation: zeta, leaf_certain: true, certain_len: len, window_len: len, points: pts, frontier: None, beta }
    }

    #[test]
    fn rows_match_definition() {
        let r = Direction::pos(0);
        let s = Direction::new(1, -1);
        let row = TransitionRow::omega(3, r, s);
        assert_eq!(row.0[r.index()], rat(3, 4));
        assert_eq!(row.0[s.index()], rat(1, 5));
        assert_eq!(row.0.iter().filter(|&&p| p == rat(1, 80)).count(), 4);
        assert_eq!(row.sum(), rat(1, 1));
        let row = TransitionRow::omega(3, r, r);
        assert_eq!(row.0[r.index()], rat(19, 20));
        assert_eq!(row.0.iter().filter(|&&p| p == rat(1, 100)).count(), 5);
        assert_eq!(row.min(), kappa(3));
        assert_eq!(TransitionRow::uniform(3).0, vec![rat(1, 6); 6]);
        for d in 2..=4 {
            for a in Direction::all(d) {
                for b in Direction::all(d) {
                    let row = TransitionRow::omega(d, a, b);
                    assert_eq!(row.sum(), rat(1, 1));
                    assert!(row.min() >= kappa(d));
                }
            }
        }
    }

    #[test]
    fn dp_matches_enumeration_at_horizon_four() {
        for seed in 0..6 {
            let d = 2 + (seed as usize % 2);
            let ray = random_ray(d, 40, 0.5, seed, Orientation::Plus, Site::origin(d));
            let inside = |y: &Site| ins_ray_contains(&ray, y).unwrap();
            let row = |y: &Site| omega_z_row(&ray, y).unwrap().to_f64();
            let states: Vec<Site> = tube_sites(&ray, 40).into_iter().filter(|y| y.l1(&ray.points[0]) <= 20).collect();
            let index: HashMap<Site, usize> = states.iter().enumerate().map(|(k, s)| (*s, k)).collect();
            let w: Vec<Vec<f64>> = states.iter().map(row).collect();
            let next: Vec<Vec<Option<usize>>> = states
                .iter()
                .map(|y| (0..2 * d).map(|k| index.get(&y.step(Direction::from_index(k))).copied()).collect())
                .collect();
            let queries: Vec<(usize, u32)> = (0..states.len()).filter(|&k| states[k].l1(&ray.points[0]) <= 12).map(|k| (k, 4)).collect();
            let vals = exit_dp(&w, &next, &queries);
            for (q, v) in queries.iter().zip(vals) {
                let (p, e) = enumerate_exit(&states[q.0], 4, &inside, &row);
                assert!((p - v.0).abs() < 1e-12 && (e - v.1).abs() < 1e-12, "{} {p} {e} {v:?}", states[q.0]);
            }
        }
    }

    fn table_for(rays: Vec<RayHandle>, region: BoxRegion, h: u32, n_max: u32) -> ExitTable {
        let mut bh = CensoredField::zeros(region);
        for k in 0..bh.len() {
            bh.set_index(k, Censored::Exact(h));
        }
        let cfg = ExitConfig { n_max, c31_floor: 1.0, state_budget: 1 << 20 };
        exit_table(rays, region, [&bh, &bh], cfg).unwrap()
    }

    #[test]
    fn exit_chain_and_depth_one() {
        let region = BoxRegion::new(Site::origin(3), Site::splat(3, 12)).unwrap();
        let rays: Vec<RayHandle> = (0..4).map(|s| random_ray(3, 200, 0.3, s, Orientation::Plus, Site::new(&[s as i64, 0, 2]))).collect();
        let t = table_for(rays, region, 3, 64);
        let c = check_chains(&t, 4.0);
        assert!(c.certain > 100);
        assert_eq!(c.chain_violations, 0, "{c:?}");
        assert!(c.depth_one > 0);
        assert_eq!(c.depth_one_violations, 0);
        for p in &t.pairs {
            for k in 1..p.exit.e.len() {
                assert!(p.exit.e[k] >= p.exit.e[k - 1] - 1e-15 && p.exit.p[k] <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn c31_floor_binds_when_walks_exit_fast() {
        // beta small: radius 1 tube until n = 2^10, so exits are fast and the
        // full mass is captured by any horizon >= 64 here with H large
        let region = BoxRegion::new(Site::origin(2), Site::splat(2, 10)).unwrap();
        let rays = vec![random_ray(2, 400, 0.1, 1, Orientation::Plus, Site::origin(2))];
        let t = table_for(rays, region, 200, 64);
        let sample: Vec<&PairRecord> = t.pairs.iter().collect();
        assert_eq!(choose_c31(&sample, &t.candidates, 64, 1.0 / 60.0).unwrap(), 1.0);
    }

    #[test]
    fn c31_scan_fails_with_diagnostic() {
        let region = BoxRegion::new(Site::origin(2), Site::splat(2, 10)).unwrap();
        let rays = vec![random_ray(2, 400, 0.1, 1, Orientation::Plus, Site::origin(2))];
        let t = table_for(rays, region, 1, 64);
        let sample: Vec<&PairRecord> = t.pairs.iter().collect();
        // candidates capped below n_max, and a vanishing kappa
        let err = choose_c31(&sample, &t.candidates[..2], 64, 1e-300).unwrap_err();
        assert!(matches!(err, EnvError::ScanExhausted { .. }), "{err}");
    }

    #[test]
    fn patch_single_and_argmin() {
        let region = BoxRegion::new(Site::origin(2), Site::splat(2, 14)).unwrap();
        let a = random_ray(2, 200, 0.3, 3, Orientation::Plus, Site::new(&[0, 3]));
        let b = random_ray(2, 200, 0.3, 4, Orientation::Plus, Site::new(&[3, 0]));
        let t = table_for(vec![a, b], region, 4, 32);
        let env = patch(&t, 2.0, PatchRule::Argmin);
        let mut cover: HashMap<Site, Vec<&PairRecord>> = HashMap::new();
        for p in &t.pairs {
            cover.entry(p.site).or_default().push(p);
        }
        let mut multi = 0;
        for (x, ps) in cover {
            let k = region.index(&x).unwrap();
            let e = |p: &PairRecord| p.exit.at(horizon(2.0, p.h_eff(), 32)).unwrap().1;
            if ps.len() == 1 {
                assert_eq!(env.choice[k], Choice::Chosen(ps[0].ray));
            } else {
                multi += 1;
                let best = ps.iter().map(|p| e(p)).fold(f64::INFINITY, f64::min);
                assert_eq!(env.e[k], best);
            }
            assert!(env.rows[k].row(2).min() >= kappa(2));
        }
        assert!(multi > 0);
        let m = env.manifest(&t, 0.3);
        assert_eq!(m.uniform_sites + m.chosen_sites + m.flagged_sites, region.volume() as usize);
    }

    #[test]
    fn residuals_nonpositive_for_argmin_and_positive_for_argmax() {
        let region = BoxRegion::new(Site::origin(2), Site::splat(2, 30)).unwrap();
        let rays: Vec<RayHandle> = (0..6).map(|s| random_ray(2, 300, 0.5, s + 10, Orientation::Plus, Site::new(&[2 * s as i64, 0]))).collect();
        let t = table_for(rays, region, 40, 128);
        let sample: Vec<&PairRecord> = t.pairs.iter().collect();
        let kap = 1.0 / 60.0;
        let c31 = choose_c31(&sample, &t.candidates, 128, kap).unwrap();
        let env = patch(&t, c31, PatchRule::Argmin);
        let r = supermartingale_residuals(&env, kap, 0);
        assert!(r.worst <= 1e-9 || r.evaluated == 0, "{r:?}");
        // widened eligibility: every site two steps inside its tube
        let r = supermartingale_residuals(&env, f64::INFINITY, 2);
        assert!(r.evaluated > 50 && r.worst <= 1e-9, "{r:?}");
        let bad = patch(&t, c31, PatchRule::Argmax);
        let r_bad = supermartingale_residuals(&bad, f64::INFINITY, 2);
        assert!(r_bad.worst > 1e-9, "{r_bad:?}");
    }

    #[test]
    fn dump_roundtrip() {
        let region = BoxRegion::new(Site::origin(2), Site::splat(2, 9)).unwrap();
        let rays = vec![random_ray(2, 100, 0.3, 7, Orientation::Plus, Site::origin(2))];
        let t = table_for(rays, region, 2, 16);
        let env = patch(&t, 1.0, PatchRule::Argmin);
        let mut buf = Vec::new();
        env.write_dump(&mut buf).unwrap();
        let back = EnvDump::read_dump(&mut buf.as_slice()).unwrap();
        for (k, row) in back.rows.iter().enumerate() {
            assert_eq!(*row, env.rows[k].row(2));
        }
    }
}
