//! Umbrella forests: protecting-umbrella suprema `lambda_i`, the direction
//! choice `I`, the parent map, its reflected copy and the i.i.d. baseline.

use crate::field::{read_header, read_region, write_region, FieldError, FieldSource, FORMAT_VERSION};
use crate::lattice::{BoxRegion, Direction, LatticeError, Site, Window};
use crate::rng::{derive, site_hash};
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("truncation radius {radius} needs margin {radius}, field only covers margin {available}")]
    RadiusExceedsMargin { radius: i64, available: i64 },
    #[error("site {0} outside the forest window")]
    OutsideWindow(Site),
    #[error("field does not cover site {0}")]
    FieldMissing(Site),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Orientation of a forest: parents step along `+e_j` or `-e_j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Plus,
    Minus,
}

impl Orientation {
    #[inline]
    pub fn sign(self) -> i64 {
        match self {
            Orientation::Plus => 1,
            Orientation::Minus => -1,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Orientation::Plus => Orientation::Minus,
            Orientation::Minus => Orientation::Plus,
        }
    }

    #[inline]
    pub fn dir(self, axis: usize) -> Direction {
        Direction::new(axis, self.sign() as i8)
    }

    /// Signed depth of `x` along the flow, `zeta (x . 1)`.
    #[inline]
    pub fn level(self, x: &Site) -> i64 {
        self.sign() * x.coord_sum()
    }
}

/// Result of a single (possibly truncated) umbrella supremum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaValue {
    pub value: f64,
    /// All candidate vertices within the truncation radius were available.
    pub exact: bool,
}

/// Brute-force `lambda_i(x)`: the largest `L(y)` over vertices `y` within
/// l-infinity radius `r` whose umbrella side `i` (reflected for `Minus`)
/// contains `x`.
pub fn lambda(x: &Site, i: usize, field: &dyn FieldSource, r: i64, zeta: Orientation) -> LambdaValue {
    let d = x.dim();
    let others: Vec<usize> = (0..d).filter(|&j| j != i).collect();
    let mut best = 0.0f64;
    let mut exact = true;
    let mut w = vec![1i64; others.len()];
    loop {
        let mut y = *x;
        let mut wmax = 0;
        for (k, &j) in others.iter().enumerate() {
            y.set(j, x.get(j) - zeta.sign() * w[k]);
            wmax = wmax.max(w[k]);
        }
        match field.value(&y) {
            Some(l) if l >= wmax as f64 => best = best.max(l),
            Some(_) => {}
            None => exact = false,
        }
        let mut k = 0;
        loop {
            if k == w.len() {
                return LambdaValue { value: best, exact };
            }
            if w[k] < r {
                w[k] += 1;
                break;
            }
            w[k] = 1;
            k += 1;
        }
    }
}

/// Argmin of `lambda`, smallest axis on ties; the flag reports a tie.
pub fn choose_direction(lam: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut tie = false;
    for i in 1..lam.len() {
        if lam[i] < lam[best] {
            best = i;
            tie = false;
        } else if lam[i] == lam[best] {
            tie = true;
        }
    }
    (best, tie)
}

/// Per-site `lambda_i` on a window.
#[derive(Clone, Debug)]
pub struct LambdaField {
    pub region: BoxRegion,
    pub values: Vec<f64>,
}

impl LambdaField {
    pub fn at(&self, x: &Site) -> Option<&[f64]> {
        let d = self.region.dim();
        self.region.index(x).map(|k| &self.values[k * d..(k + 1) * d])
    }

    /// Fraction of (site, axis) pairs with `lambda_i > t` for each `t`.
    pub fn tail_profile(&self, ts: &[f64]) -> Vec<(f64, f64)> {
        let n = self.values.len() as f64;
        ts.iter().map(|&t| (t, self.values.iter().filter(|&&v| v > t).count() as f64 / n)).collect()
    }
}

/// Stamp every umbrella of radius at most `r` onto the window. Each vertex
/// writes its `L` onto the sides it covers; the per-axis maximum is `lambda`.
pub fn compute_lambda(field: &dyn FieldSource, field_box: &BoxRegion, core: &BoxRegion, r: i64, zeta: Orientation) -> Result<LambdaField, ForestError> {
    let avail = (0..core.dim())
        .map(|i| (core.lo.get(i) - field_box.lo.get(i)).min(field_box.hi.get(i) - core.hi.get(i)))
        .min()
        .unwrap_or(0);
    if avail < r {
        return Err(ForestError::RadiusExceedsMargin { radius: r, available: avail });
    }
    let d = core.dim();
    let mut values = vec![0.0; core.volume() as usize * d];
    let (vlo, vhi) = match zeta {
        Orientation::Plus => (core.lo.sub(&Site::splat(d, r)), core.hi),
        Orientation::Minus => (core.lo, core.hi.add(&Site::splat(d, r))),
    };
    let vbox = BoxRegion { lo: vlo, hi: vhi };
    for y in vbox.sites() {
        let l = field.value(&y).ok_or(ForestError::FieldMissing(y))?;
        let t = (l.floor() as i64).min(r);
        for i in 0..d {
            if y.get(i) < core.lo.get(i) || y.get(i) > core.hi.get(i) {
                continue;
            }
            let mut lo = y;
            let mut hi = y;
            let mut empty = false;
            for j in 0..d {
                if j == i {
                    continue;
                }
                let (a, b) = match zeta {
                    Orientation::Plus => (y.get(j) + 1, y.get(j) + t),
                    Orientation::Minus => (y.get(j) - t, y.get(j) - 1),
                };
                let a = a.max(core.lo.get(j));
                let b = b.min(core.hi.get(j));
                if a > b {
                    empty = true;
                    break;
                }
                lo.set(j, a);
                hi.set(j, b);
            }
            if empty {
                continue;
            }
            core.for_each_in(&BoxRegion { lo, hi }, |k, _| {
                let slot = &mut values[k * d + i];
                if l > *slot {
                    *slot = l;
                }
            });
        }
    }
    Ok(LambdaField { region: *core, values })
}

/// Parent map on a window. Axis codes are zero-based in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    pub orientation: Orientation,
    pub region: BoxRegion,
    pub axis: Vec<u8>,
    pub uncertain: Vec<bool>,
    /// Truncation radius used (0 for forests not built from umbrellas).
    pub radius: i64,
}

impl Forest {
    pub fn dim(&self) -> usize {
        self.region.dim()
    }

    pub fn parent_axis(&self, x: &Site) -> Option<usize> {
        self.region.index(x).map(|k| self.axis[k] as usize)
    }

    pub fn parent(&self, x: &Site) -> Option<Site> {
        self.parent_axis(x).map(|a| x.step(self.orientation.dir(a)))
    }

    pub fn is_uncertain(&self, x: &Site) -> bool {
        self.region.index(x).map(|k| self.uncertain[k]).unwrap_or(true)
    }

    /// Ancestral line `x, a(x), a^2(x), ...` while it stays in the window,
    /// capped at `max_len` points.
    pub fn line(&self, x: &Site, max_len: usize) -> Vec<Site> {
        let mut out = Vec::new();
        let mut cur = *x;
        while out.len() < max_len && self.region.contains(&cur) {
            out.push(cur);
            cur = self.parent(&cur).unwrap();
        }
        out
    }

    pub fn uncertain_fraction(&self) -> f64 {
        self.uncertain.iter().filter(|&&u| u).count() as f64 / self.uncertain.len().max(1) as f64
    }

    pub fn axis_frequencies(&self) -> Vec<f64> {
        let mut c = vec![0usize; self.dim()];
        for &a in &self.axis {
            c[a as usize] += 1;
        }
        c.iter().map(|&v| v as f64 / self.axis.len() as f64).collect()
    }
}

/// Upper bound on the probability that a vertex beyond l-infinity radius `r`
/// enlarges `lambda_i(x)` past its truncated value `lam`, summed over
/// spherical shells: `sum_{n>r} (d-1) n^(d-2) P[L >= max(n, lam)]`.
pub fn lambda_miss_bound(d: usize, theta: f64, r: i64, lam: f64) -> f64 {
    let d = d as i32;
    let r = r as f64;
    let c = (d - 1) as f64 * theta;
    if lam <= r {
        (c / r).min(1.0)
    } else {
        let head = c * (lam.powi(d - 1) - r.powi(d - 1)).max(0.0) / (d - 1) as f64 * lam.powi(-d);
        (head + c / lam).min(1.0)
    }
}

/// Build the umbrella forest on `window` with truncation radius `r`.
pub fn build_forest(field: &dyn FieldSource, field_box: &BoxRegion, window: &Window, zeta: Orientation, r: i64) -> Result<(Forest, LambdaField), ForestError> {
    let lam = compute_lambda(field, field_box, &window.core, r, zeta)?;
    let d = window.dim();
    let n = window.core.volume() as usize;
    let mut axis = vec![0u8; n];
    let mut uncertain = vec![false; n];
    for k in 0..n {
        let (a, tie) = choose_direction(&lam.values[k * d..(k + 1) * d]);
        axis[k] = a as u8;
        uncertain[k] = tie;
    }
    Ok((Forest { orientation: zeta, region: window.core, axis, uncertain, radius: r }, lam))
}

/// Forest with i.i.d. uniform parent axes and `Plus` orientation.
pub fn example1_forest(seed: u64, core: &BoxRegion) -> Forest {
    let d = core.dim();
    let key = derive(seed, "example-one");
    let n = core.volume() as usize;
    let mut axis = vec![0u8; n];
    for (k, a) in axis.iter_mut().enumerate() {
        *a = example1_axis(key, &core.site(k), d) as u8;
    }
    Forest { orientation: Orientation::Plus, region: *core, axis, uncertain: vec![false; n], radius: 0 }
}

#[inline]
pub fn example1_axis(key: u64, x: &Site, d: usize) -> usize {
    ((site_hash(key, x) as u128 * d as u128) >> 64) as usize
}

/// Parent map evaluated on demand anywhere in Z^d by brute force. Used as
/// an oracle and to follow ancestral lines past a window.
#[derive(Clone, Copy)]
pub struct LazyForest<'a> {
    pub field: &'a dyn FieldSource,
    pub orientation: Orientation,
    pub radius: i64,
}

impl<'a> LazyForest<'a> {
    pub fn new(field: &'a dyn FieldSource, orientation: Orientation, radius: i64) -> Self {
        LazyForest { field, orientation, radius }
    }

    pub fn lambdas(&self, x: &Site) -> Vec<LambdaValue> {
        (0..x.dim()).map(|i| lambda(x, i, self.field, self.radius, self.orientation)).collect()
    }

    /// Parent axis and whether it is uncertain (tie or missing field).
    pub fn parent_axis(&self, x: &Site) -> (usize, bool) {
        let lv = self.lambdas(x);
        let vals: Vec<f64> = lv.iter().map(|l| l.value).collect();
        let (a, tie) = choose_direction(&vals);
        (a, tie || lv.iter().any(|l| !l.exact))
    }

    pub fn parent(&self, x: &Site) -> Site {
        x.step(self.orientation.dir(self.parent_axis(x).0))
    }
}

/// Lazy i.i.d. baseline forest.
#[derive(Clone, Copy)]
pub struct LazyExample1 {
    key: u64,
}

impl LazyExample1 {
    pub fn new(seed: u64) -> Self {
        LazyExample1 { key: derive(seed, "example-one") }
    }
    pub fn parent(&self, x: &Site) -> Site {
        x.step(Direction::pos(example1_axis(self.key, x, x.dim())))
    }
}

pub const FOREST_MAGIC: &[u8; 4] = b"UMBA";

impl Forest {
    pub fn write_dump<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(FOREST_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&[self.orientation.sign() as i8 as u8])?;
        write_region(w, &self.region)?;
        let bytes: Vec<u8> = self.axis.iter().zip(&self.uncertain).map(|(&a, &u)| (a + 1) | if u { 0x80 } else { 0 }).collect();
        w.write_all(&bytes)
    }

    pub fn read_dump<R: Read>(r: &mut R) -> Result<Self, FieldError> {
        let d = read_header(r, FOREST_MAGIC)?;
        let mut z = [0u8; 1];
        r.read_exact(&mut z)?;
        let orientation = match z[0] as i8 {
            1 => Orientation::Plus,
            -1 => Orientation::Minus,
            v => return Err(FieldError::Format(format!("bad orientation {v}"))),
        };
        let region = read_region(r, d)?;
        let mut bytes = vec![0u8; region.volume() as usize];
        r.read_exact(&mut bytes)?;
        let mut axis = Vec::with_capacity(bytes.len());
        let mut uncertain = Vec::with_capacity(bytes.len());
        for b in bytes {
            let a = b & 0x7f;
            if a == 0 || a as usize > d {
                return Err(FieldError::Format(format!("bad axis code {a}")));
            }
            axis.push(a - 1);
            uncertain.push(b & 0x80 != 0);
        }
        Ok(Forest { orientation, region, axis, uncertain, radius: 0 })
    }
}

/// Field that overrides a few sites of another source.
pub struct PatchedField<'a> {
    pub base: &'a dyn FieldSource,
    pub overrides: Vec<(Site, f64)>,
}

impl FieldSource for PatchedField<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn value(&self, x: &Site) -> Option<f64> {
        for (s, v) in &self.overrides {
            if s == x {
                return Some(*v);
            }
        }
        self.base.value(x)
    }
}

/// Joint frequency `P[I(z) = 1, L(0) > t]` for `z = e_2 + ... + e_d`, which
/// lies on side 1 of every umbrella at the origin. `L(0)` is drawn from its
/// conditional law given `L(0) > t` and the result is reweighted by
/// `P[L(0) > t]`.
pub fn side_choice_joint_frequency(params: &crate::field::ModelParams, ts: &[f64], replicas: u64, r: i64) -> Vec<(f64, f64)> {
    use crate::field::SiteField;
    use crate::rng::{derive_index, to_open_unit};
    let d = params.d;
    let mut z = Site::splat(d, 1);
    z.set(0, 0);
    let key = derive(params.seed, "side-choice");
    ts.iter()
        .map(|&t| {
            let hits = (0..replicas)
                .filter(|&k| {
                    let sub = derive_index(key, k ^ (t.to_bits() << 1));
                    let base = SiteField::new(crate::field::ModelParams { seed: sub, ..*params });
                    let u = to_open_unit(crate::rng::splitmix64(sub));
                    let l0 = t * u.powf(-1.0 / d as f64);
                    let f = PatchedField { base: &base, overrides: vec![(Site::origin(d), l0)] };
                    LazyForest::new(&f, Orientation::Plus, r).parent_axis(&z).0 == 0
                })
                .count();
            (t, params.theta * t.powi(-(d as i32)) * hits as f64 / replicas as f64)
        })
        .collect()
}
