//! Tree heights `h`, the insulation field `H`, ancestral rays and censored
//! tail statistics.

use crate::field::{generate_field, ModelParams};
use crate::forest::{build_forest, example1_forest, Forest, ForestError, Orientation};
use crate::lattice::{ball_radius, sphere_count, BallCache, BoxRegion, LatticeError, Site, Window};
use crate::rng::{derive, derive_index};
use rayon::prelude::*;
use crate::stats::{power_law_fit, wilson, LineFit, StatsError, Z95};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

/// A value that is either known or only bounded below because the relevant
/// structure leaves the window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Censored {
    Exact(u32),
    AtLeast(u32),
}

impl Censored {
    #[inline]
    pub fn value(self) -> u32 {
        match self {
            Censored::Exact(v) | Censored::AtLeast(v) => v,
        }
    }
    #[inline]
    pub fn is_exact(self) -> bool {
        matches!(self, Censored::Exact(_))
    }
    /// Certainly `>= n`.
    #[inline]
    pub fn surely_geq(self, n: u32) -> bool {
        self.value() >= n
    }
    /// Possibly `>= n`.
    #[inline]
    pub fn maybe_geq(self, n: u32) -> bool {
        match self {
            Censored::Exact(v) => v >= n,
            Censored::AtLeast(_) => true,
        }
    }
}

const CENSOR_BIT: u32 = 1 << 31;

/// Per-site censored integer field on a box (used for both `h` and `H`).
#[derive(Clone, Debug, PartialEq)]
pub struct CensoredField {
    pub region: BoxRegion,
    data: Vec<u32>,
}

pub type HField = CensoredField;
pub type HInsField = CensoredField;

impl CensoredField {
    pub fn zeros(region: BoxRegion) -> Self {
        CensoredField { region, data: vec![0; region.volume() as usize] }
    }

    #[inline]
    pub fn at_index(&self, k: usize) -> Censored {
        let v = self.data[k];
        if v & CENSOR_BIT != 0 {
            Censored::AtLeast(v & !CENSOR_BIT)
        } else {
            Censored::Exact(v)
        }
    }

    #[inline]
    pub fn get(&self, x: &Site) -> Option<Censored> {
        self.region.index(x).map(|k| self.at_index(k))
    }

    #[inline]
    pub fn set_index(&mut self, k: usize, c: Censored) {
        self.data[k] = match c {
            Censored::Exact(v) => v,
            Censored::AtLeast(v) => v | CENSOR_BIT,
        };
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_value(&self) -> u32 {
        self.data.iter().map(|v| v & !CENSOR_BIT).max().unwrap_or(0)
    }

    pub fn censored_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v & CENSOR_BIT != 0).count() as f64 / self.data.len().max(1) as f64
    }

    /// Values on a sub-box, in its row-major order.
    pub fn values_in(&self, sub: &BoxRegion) -> Vec<Censored> {
        let mut out = Vec::with_capacity(sub.volume() as usize);
        self.region.for_each_in(sub, |k, _| out.push(self.at_index(k)));
        out
    }
}

/// True when `x` lies on a window face through which children can enter.
#[inline]
fn on_inflow_face(region: &BoxRegion, zeta: Orientation, x: &Site) -> bool {
    (0..region.dim()).any(|j| match zeta {
        Orientation::Plus => x.get(j) == region.lo.get(j),
        Orientation::Minus => x.get(j) == region.hi.get(j),
    })
}

/// Longest progeny branch, swept from the inflow side so every child is
/// final before its parent is read.
pub fn compute_h(forest: &Forest) -> HField {
    let region = forest.region;
    let n = region.volume() as usize;
    let mut h = vec![0u32; n];
    let mut cens: Vec<bool> = (0..n).map(|k| on_inflow_face(&region, forest.orientation, &region.site(k))).collect();
    let strides: Vec<usize> = (0..region.dim()).map(|i| region.stride(i)).collect();
    let visit = |k: usize, h: &mut Vec<u32>, cens: &mut Vec<bool>| {
        let x = region.site(k);
        let a = forest.axis[k] as usize;
        let p = x.step(forest.orientation.dir(a));
        if region.contains(&p) {
            let pk = match forest.orientation {
                Orientation::Plus => k + strides[a],
                Orientation::Minus => k - strides[a],
            };
            h[pk] = h[pk].max(h[k] + 1);
            cens[pk] |= cens[k];
        }
    };
    match forest.orientation {
        Orientation::Plus => (0..n).for_each(|k| visit(k, &mut h, &mut cens)),
        Orientation::Minus => (0..n).rev().for_each(|k| visit(k, &mut h, &mut cens)),
    }
    let mut out = CensoredField::zeros(region);
    for k in 0..n {
        out.set_index(k, if cens[k] { Censored::AtLeast(h[k]) } else { Censored::Exact(h[k]) });
    }
    out
}

/// `H(x) = sup { h(y) : |x - y|_1 <= h(y)^beta }` by stamping each ball.
pub fn compute_big_h(h: &HField, beta: f64) -> HInsField {
    let region = h.region;
    let d = region.dim();
    let n = h.len();
    let maxh = h.max_value();
    let mut val = vec![0u32; n];
    let mut cens = vec![false; n];
    let mut balls = BallCache::new(d);
    let censor_radius = ball_radius(maxh as u64, beta);
    for k in 0..n {
        let c = h.at_index(k);
        let y = region.site(k);
        let r = ball_radius(c.value() as u64, beta);
        for off in balls.get(r) {
            if let Some(j) = region.index(&y.add(off)) {
                val[j] = val[j].max(c.value());
            }
        }
        if !c.is_exact() {
            // the true height may be larger, so its ball may reach further
            for off in balls.get(r.max(censor_radius)) {
                if let Some(j) = region.index(&y.add(off)) {
                    cens[j] = true;
                }
            }
        }
    }
    let mut out = CensoredField::zeros(region);
    for k in 0..n {
        let x = region.site(k);
        let near_face = region.depth(&x) as u64 <= censor_radius;
        out.set_index(k, if cens[k] || near_face { Censored::AtLeast(val[k]) } else { Censored::Exact(val[k]) });
    }
    out
}

/// Ancestral line of `x` inside the forest window, at most `max_steps + 1` points.
pub fn ray(forest: &Forest, x: &Site, max_steps: usize) -> Vec<Site> {
    forest.line(x, max_steps + 1)
}

/// Censored tail counts, mergeable across replicas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailAccumulator {
    pub grid: Vec<u32>,
    /// `count_lo[j]` counts samples certainly `>= grid[j]`.
    pub count_lo: Vec<u64>,
    /// `count_hi[j]` counts samples possibly `>= grid[j]`.
    pub count_hi: Vec<u64>,
    pub total: u64,
}

impl TailAccumulator {
    pub fn new(grid: &[u32]) -> Self {
        TailAccumulator { grid: grid.to_vec(), count_lo: vec![0; grid.len()], count_hi: vec![0; grid.len()], total: 0 }
    }

    #[inline]
    pub fn push(&mut self, c: Censored) {
        self.total += 1;
        for (j, &n) in self.grid.iter().enumerate() {
            self.count_lo[j] += c.surely_geq(n) as u64;
            self.count_hi[j] += c.maybe_geq(n) as u64;
        }
    }

    pub fn extend(&mut self, it: impl IntoIterator<Item = Censored>) {
        // histogram first: the grid loop per sample dominates otherwise
        let top = self.grid.iter().copied().max().unwrap_or(0) as usize;
        let mut ex = vec![0u64; top + 1];
        let mut cz = vec![0u64; top + 1];
        for c in it {
            let v = (c.value() as usize).min(top);
            if c.is_exact() {
                ex[v] += 1;
            } else {
                cz[v] += 1;
            }
        }
        for v in 0..=top {
            let (e, z) = (ex[v], cz[v]);
            self.total += e + z;
            for (j, &n) in self.grid.iter().enumerate() {
                if v >= n as usize {
                    self.count_lo[j] += e + z;
                    self.count_hi[j] += e + z;
                } else {
                    self.count_hi[j] += z;
                }
            }
        }
    }

    pub fn merge(&mut self, o: &TailAccumulator) {
        assert_eq!(self.grid, o.grid);
        self.total += o.total;
        for j in 0..self.grid.len() {
            self.count_lo[j] += o.count_lo[j];
            self.count_hi[j] += o.count_hi[j];
        }
    }

    /// Tail table with `n^exponent * p` columns (exponent `d-1` for `h`).
    pub fn estimate(&self, exponent: f64) -> Result<TailEstimate, StatsError> {
        if self.total == 0 {
            return Err(StatsError::Empty);
        }
        let t = self.total as f64;
        let rows = self
            .grid
            .iter()
            .enumerate()
            .map(|(j, &n)| {
                let (lo, hi) = (self.count_lo[j], self.count_hi[j]);
                let p_lo = lo as f64 / t;
                let p_hi = hi as f64 / t;
                let scale = (n as f64).powf(exponent);
                TailRow {
                    n,
                    count_geq_lo: lo,
                    count_geq_hi: hi,
                    total: self.total,
                    p_lo,
                    p_hi,
                    ci_lo: wilson(lo, self.total, Z95).0,
                    ci_hi: wilson(hi, self.total, Z95).1,
                    scaled_lo: scale * p_lo,
                    scaled_hi: scale * p_hi,
                }
            })
            .collect();
        Ok(TailEstimate { exponent, rows })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub n: u32,
    pub count_geq_lo: u64,
    pub count_geq_hi: u64,
    pub total: u64,
    pub p_lo: f64,
    pub p_hi: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// `n^exponent * p_lo`.
    pub scaled_lo: f64,
    pub scaled_hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub exponent: f64,
    pub rows: Vec<TailRow>,
}

impl TailEstimate {
    pub fn fit_lo(&self) -> Result<LineFit, StatsError> {
        power_law_fit(&self.rows.iter().map(|r| (r.n as f64, r.p_lo)).collect::<Vec<_>>())
    }

    pub fn fit_hi(&self) -> Result<LineFit, StatsError> {
        power_law_fit(&self.rows.iter().map(|r| (r.n as f64, r.p_hi)).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,count_geq_lo,count_geq_hi,total,p_lo,p_hi,ci_lo,ci_hi,n_pow_dm1_p_lo,n_pow_dm1_p_hi\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}\n",
                r.n, r.count_geq_lo, r.count_geq_hi, r.total, r.p_lo, r.p_hi, r.ci_lo, r.ci_hi, r.scaled_lo, r.scaled_hi
            ));
        }
        s
    }
}

/// Build a tail table directly from samples.
pub fn tail_estimate(samples: impl IntoIterator<Item = Censored>, grid: &[u32], exponent: f64) -> Result<TailEstimate, StatsError> {
    let mut acc = TailAccumulator::new(grid);
    acc.extend(samples);
    acc.estimate(exponent)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForestKind {
    Umbrella,
    /// Independent uniform parent axes.
    Example1,
}

/// Replicated `h` tails on interior sites of independent windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRun {
    pub d: usize,
    pub side: i64,
    pub margin: i64,
    /// Interior sites lie at least this far from the window faces.
    pub buffer: i64,
    pub replicas: u64,
    pub seed: u64,
    pub kind: ForestKind,
    pub grid: Vec<u32>,
}

pub fn tail_run(cfg: &TailRun) -> Result<TailAccumulator, ForestError> {
    let w = Window::cube(cfg.d, cfg.side, cfg.margin)?;
    let interior = w.core.shrink(cfg.buffer).ok_or(LatticeError::EmptyBox { axis: 0, lo: cfg.buffer, hi: cfg.side - 1 - cfg.buffer })?;
    let key = derive(cfg.seed, "tails");
    let accs: Vec<TailAccumulator> = (0..cfg.replicas)
        .into_par_iter()
        .map(|k| {
            let s = derive_index(key, k);
            let f = match cfg.kind {
                ForestKind::Example1 => example1_forest(s, &w.core),
                ForestKind::Umbrella => {
                    let fld = generate_field(&ModelParams::preset(cfg.d, w, s))?;
                    build_forest(&fld, &fld.region, &w, Orientation::Plus, cfg.margin)?.0
                }
            };
            let mut acc = TailAccumulator::new(&cfg.grid);
            acc.extend(compute_h(&f).values_in(&interior));
            Ok(acc)
        })
        .collect::<Result<_, ForestError>>()?;
    let mut out = TailAccumulator::new(&cfg.grid);
    for a in &accs {
        out.merge(a);
    }
    Ok(out)
}

/// Tail table of `H` over `interior`, scaled by `n^((1-beta)d - 1)`.
pub fn big_h_tail(acc: &mut TailAccumulator, big_h: &HInsField, interior: &BoxRegion) {
    acc.extend(big_h.values_in(interior));
}

pub fn big_h_tail_exponent(d: usize, beta: f64) -> f64 {
    (1.0 - beta) * d as f64 - 1.0
}

/// Largest `c` with `c * #{|x|_1 = n} <= n^(d-1)` for all scanned `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Constant {
    pub value: Ratio<u128>,
    pub argmin: u64,
    pub scanned_to: u64,
    /// The ratio is nondecreasing on `[argmin, scanned_to]`.
    pub monotone_after_argmin: bool,
}

pub fn theorem1_constant(d: u32) -> Theorem1Constant {
    const SCAN: u64 = 10_000;
    let ratio = |n: u64| Ratio::new((n as u128).pow(d - 1), sphere_count(d, n));
    let mut best = ratio(1);
    let mut argmin = 1;
    for n in 2..=SCAN {
        let r = ratio(n);
        if r < best {
            best = r;
            argmin = n;
        }
    }
    let mut prev = ratio(argmin);
    let mut monotone = true;
    for n in argmin + 1..=SCAN {
        let r = ratio(n);
        if r < prev {
            monotone = false;
            break;
        }
        prev = r;
    }
    Theorem1Constant { value: best, argmin, scanned_to: SCAN, monotone_after_argmin: monotone }
}
