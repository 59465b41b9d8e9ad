//! Integer lattice primitives: sites, unit directions, boxes and windows,
//! plus exact sphere counts.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LatticeError {
    #[error("dimension {0} outside supported range 2..={MAX_DIM}")]
    Dimension(usize),
    #[error("empty box on axis {axis}: lo {lo} > hi {hi}")]
    EmptyBox { axis: usize, lo: i64, hi: i64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("box volume {volume} exceeds budget {budget}")]
    Capacity { volume: u128, budget: u64 },
}

pub fn check_dim(d: usize) -> Result<(), LatticeError> {
    if (2..=MAX_DIM).contains(&d) {
        Ok(())
    } else {
        Err(LatticeError::Dimension(d))
    }
}

/// A point of Z^d. Unused trailing coordinates are kept at zero so that
/// derived equality, hashing and ordering are lexicographic in the live ones.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    dim: u8,
    c: [i64; MAX_DIM],
}

impl Site {
    pub fn origin(d: usize) -> Self {
        assert!(d <= MAX_DIM, "dimension {d} > {MAX_DIM}");
        Site { dim: d as u8, c: [0; MAX_DIM] }
    }

    pub fn new(coords: &[i64]) -> Self {
        let mut s = Site::origin(coords.len());
        s.c[..coords.len()].copy_from_slice(coords);
        s
    }

    pub fn splat(d: usize, v: i64) -> Self {
        let mut s = Site::origin(d);
        for i in 0..d {
            s.c[i] = v;
        }
        s
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    #[inline]
    pub fn coords(&self) -> &[i64] {
        &self.c[..self.dim as usize]
    }

    #[inline]
    pub fn get(&self, i: usize) -> i64 {
        self.c[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: i64) {
        debug_assert!(i < self.dim());
        self.c[i] = v;
    }

    #[inline]
    pub fn step(&self, dir: Direction) -> Site {
        let mut s = *self;
        s.c[dir.axis] += dir.sign as i64;
        s
    }

    /// Translate by `k` along `dir`.
    #[inline]
    pub fn shift(&self, dir: Direction, k: i64) -> Site {
        let mut s = *self;
        s.c[dir.axis] += dir.sign as i64 * k;
        s
    }

    pub fn add(&self, o: &Site) -> Site {
        let mut s = *self;
        for i in 0..self.dim() {
            s.c[i] += o.c[i];
        }
        s
    }

    pub fn sub(&self, o: &Site) -> Site {
        let mut s = *self;
        for i in 0..self.dim() {
            s.c[i] -= o.c[i];
        }
        s
    }

    #[inline]
    pub fn l1(&self, o: &Site) -> u64 {
        let mut acc = 0u64;
        for i in 0..self.dim() {
            acc += (self.c[i] - o.c[i]).unsigned_abs();
        }
        acc
    }

    #[inline]
    pub fn linf(&self, o: &Site) -> u64 {
        let mut acc = 0u64;
        for i in 0..self.dim() {
            acc = acc.max((self.c[i] - o.c[i]).unsigned_abs());
        }
        acc
    }

    /// Sum of coordinates, i.e. the inner product with (1, ..., 1).
    #[inline]
    pub fn coord_sum(&self) -> i64 {
        self.coords().iter().sum()
    }

    /// Unit direction from `self` to `o` when they are lattice neighbours.
    pub fn direction_to(&self, o: &Site) -> Option<Direction> {
        if self.l1(o) != 1 {
            return None;
        }
        (0..self.dim()).find_map(|i| match o.c[i] - self.c[i] {
            1 => Some(Direction::new(i, 1)),
            -1 => Some(Direction::new(i, -1)),
            _ => None,
        })
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.coords())
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, v) in self.coords().iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

impl Serialize for Site {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Site {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v: Vec<i64> = Vec::deserialize(d)?;
        if v.is_empty() || v.len() > MAX_DIM {
            return Err(serde::de::Error::custom("site dimension out of range"));
        }
        Ok(Site::new(&v))
    }
}

/// One of the 2d unit vectors. `axis` is zero-based.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, serde::Serialize, serde::Deserialize)]
pub struct Direction {
    pub axis: usize,
    pub sign: i8,
}

impl Direction {
    pub fn new(axis: usize, sign: i8) -> Self {
        debug_assert!(sign == 1 || sign == -1);
        Direction { axis, sign }
    }

    pub fn pos(axis: usize) -> Self {
        Direction { axis, sign: 1 }
    }

    /// Slot used for transition rows: 2*axis for +e_axis, 2*axis+1 for -e_axis.
    #[inline]
    pub fn index(&self) -> usize {
        2 * self.axis + usize::from(self.sign < 0)
    }

    #[inline]
    pub fn from_index(k: usize) -> Self {
        Direction { axis: k / 2, sign: if k % 2 == 0 { 1 } else { -1 } }
    }

    pub fn all(d: usize) -> impl Iterator<Item = Direction> {
        (0..2 * d).map(Direction::from_index)
    }

    pub fn reversed(&self) -> Self {
        Direction { axis: self.axis, sign: -self.sign }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}e{}", if self.sign > 0 { "+" } else { "-" }, self.axis + 1)
    }
}

/// Closed integer box `lo..=hi`, indexed row-major with the last axis fastest.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lo: Site,
    pub hi: Site,
}

impl BoxRegion {
    pub fn new(lo: Site, hi: Site) -> Result<Self, LatticeError> {
        if lo.dim() != hi.dim() {
            return Err(LatticeError::DimMismatch { expected: lo.dim(), got: hi.dim() });
        }
        check_dim(lo.dim())?;
        for i in 0..lo.dim() {
            if lo.get(i) > hi.get(i) {
                return Err(LatticeError::EmptyBox { axis: i, lo: lo.get(i), hi: hi.get(i) });
            }
        }
        Ok(BoxRegion { lo, hi })
    }

    /// The cube `[-r, r]^d` centred at `c`.
    pub fn centered(c: Site, r: i64) -> Self {
        let d = c.dim();
        BoxRegion { lo: c.sub(&Site::splat(d, r)), hi: c.add(&Site::splat(d, r)) }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.lo.dim()
    }

    #[inline]
    pub fn len(&self, axis: usize) -> usize {
        (self.hi.get(axis) - self.lo.get(axis) + 1) as usize
    }

    pub fn volume(&self) -> u128 {
        (0..self.dim()).map(|i| self.len(i) as u128).product()
    }

    pub fn volume_checked(&self, budget: u64) -> Result<usize, LatticeError> {
        let v = self.volume();
        if v > budget as u128 {
            return Err(LatticeError::Capacity { volume: v, budget });
        }
        Ok(v as usize)
    }

    #[inline]
    pub fn contains(&self, x: &Site) -> bool {
        (0..self.dim()).all(|i| x.get(i) >= self.lo.get(i) && x.get(i) <= self.hi.get(i))
    }

    #[inline]
    pub fn index(&self, x: &Site) -> Option<usize> {
        let mut idx = 0usize;
        for i in 0..self.dim() {
            let v = x.get(i);
            if v < self.lo.get(i) || v > self.hi.get(i) {
                return None;
            }
            idx = idx * self.len(i) + (v - self.lo.get(i)) as usize;
        }
        Some(idx)
    }

    #[inline]
    pub fn site(&self, mut idx: usize) -> Site {
        let mut s = self.lo;
        for i in (0..self.dim()).rev() {
            let l = self.len(i);
            s.set(i, self.lo.get(i) + (idx % l) as i64);
            idx /= l;
        }
        s
    }

    /// Linear-index stride of `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        (axis + 1..self.dim()).map(|i| self.len(i)).product()
    }

    pub fn expand(&self, r: i64) -> BoxRegion {
        let d = self.dim();
        BoxRegion { lo: self.lo.sub(&Site::splat(d, r)), hi: self.hi.add(&Site::splat(d, r)) }
    }

    /// Shrink by `r` on every side; `None` when nothing is left.
    pub fn shrink(&self, r: i64) -> Option<BoxRegion> {
        BoxRegion::new(self.lo.add(&Site::splat(self.dim(), r)), self.hi.sub(&Site::splat(self.dim(), r))).ok()
    }

    pub fn intersect(&self, o: &BoxRegion) -> Option<BoxRegion> {
        let mut lo = self.lo;
        let mut hi = self.hi;
        for i in 0..self.dim() {
            lo.set(i, lo.get(i).max(o.lo.get(i)));
            hi.set(i, hi.get(i).min(o.hi.get(i)));
        }
        BoxRegion::new(lo, hi).ok()
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.volume() as usize).map(move |k| self.site(k))
    }

    /// l-infinity distance from `x` (inside) to the complement of the box,
    /// i.e. the number of unit steps needed to leave it.
    pub fn depth(&self, x: &Site) -> i64 {
        (0..self.dim())
            .map(|i| (x.get(i) - self.lo.get(i)).min(self.hi.get(i) - x.get(i)) + 1)
            .min()
            .unwrap_or(0)
    }

    /// Visit every site of `sub` (which must lie inside `self`) with its
    /// linear index in `self`.
    pub fn for_each_in(&self, sub: &BoxRegion, mut f: impl FnMut(usize, &Site)) {
        let d = self.dim();
        let mut cur = sub.lo;
        let Some(mut base) = self.index(&cur) else { return };
        let last = d - 1;
        let strides: Vec<usize> = (0..d).map(|i| self.stride(i)).collect();
        loop {
            let row = base;
            let mut s = cur;
            for k in 0..sub.len(last) {
                s.set(last, sub.lo.get(last) + k as i64);
                f(row + k, &s);
            }
            // advance the odometer on the remaining axes
            let mut axis = last;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                if cur.get(axis) < sub.hi.get(axis) {
                    cur.set(axis, cur.get(axis) + 1);
                    base += strides[axis];
                    break;
                }
                base -= strides[axis] * (sub.len(axis) - 1);
                cur.set(axis, sub.lo.get(axis));
            }
        }
    }
}

/// Observation window plus the margin of extra field that must be generated
/// around it.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Window {
    pub core: BoxRegion,
    pub margin: i64,
}

impl Window {
    pub fn new(core: BoxRegion, margin: i64) -> Result<Self, LatticeError> {
        if margin < 0 {
            return Err(LatticeError::EmptyBox { axis: 0, lo: 0, hi: margin });
        }
        Ok(Window { core, margin })
    }

    /// Cube `[0, side-1]^d`.
    pub fn cube(d: usize, side: i64, margin: i64) -> Result<Self, LatticeError> {
        check_dim(d)?;
        Window::new(BoxRegion::new(Site::origin(d), Site::splat(d, side - 1))?, margin)
    }

    /// Cube of the given side centred (up to parity) at the origin.
    pub fn centered_cube(d: usize, side: i64, margin: i64) -> Result<Self, LatticeError> {
        check_dim(d)?;
        let lo = -(side / 2);
        Window::new(BoxRegion::new(Site::splat(d, lo), Site::splat(d, lo + side - 1))?, margin)
    }

    pub fn dim(&self) -> usize {
        self.core.dim()
    }

    /// The box over which the field is generated.
    pub fn outer(&self) -> BoxRegion {
        self.core.expand(self.margin)
    }
}

pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for j in 0..k {
        acc = acc * (n - j) as u128 / (j + 1) as u128;
    }
    acc
}

/// Number of lattice points at l1 distance exactly `n` from the origin.
pub fn sphere_count(d: u32, n: u64) -> u128 {
    if n == 0 {
        return 1;
    }
    (1..=d as u64)
        .map(|k| (1u128 << k) * binomial(d as u64, k) * binomial(n - 1, k - 1))
        .sum()
}

/// Points at l1 distance `n` with all coordinates strictly positive.
pub fn orthant_sphere_count(d: u32, n: u64) -> u128 {
    if n == 0 {
        return 0;
    }
    binomial(n - 1, d as u64 - 1)
}

pub fn l1_norm(x: &Site) -> u64 {
    x.l1(&Site::origin(x.dim()))
}

/// Side `i` of the umbrella of length `t` based at `base`:
/// `base + {x in [0,t]^d : x_i = 0, x_j > 0 for j != i}`.
pub fn umbrella_side(i: usize, t: f64, base: &Site) -> Vec<Site> {
    let d = base.dim();
    let m = t.floor().max(0.0) as i64;
    if m < 1 {
        return Vec::new();
    }
    let mut lo = *base;
    let mut hi = *base;
    for j in 0..d {
        if j != i {
            lo.set(j, base.get(j) + 1);
            hi.set(j, base.get(j) + m);
        }
    }
    BoxRegion { lo, hi }.sites().collect()
}

/// Offsets of the closed l1 ball of radius `r` in dimension `d`.
pub fn l1_ball_offsets(d: usize, r: u64) -> Vec<Site> {
    let r = r as i64;
    let mut out = Vec::new();
    let mut cur = Site::origin(d);
    fn rec(axis: usize, d: usize, left: i64, cur: &mut Site, out: &mut Vec<Site>) {
        if axis == d {
            out.push(*cur);
            return;
        }
        for v in -left..=left {
            cur.set(axis, v);
            rec(axis + 1, d, left - v.abs(), cur, out);
        }
        cur.set(axis, 0);
    }
    rec(0, d, r, &mut cur, &mut out);
    out
}

/// Cache of l1 ball offsets keyed by radius.
#[derive(Debug, Default, Clone)]
pub struct BallCache {
    d: usize,
    balls: Vec<Vec<Site>>,
}

impl BallCache {
    pub fn new(d: usize) -> Self {
        BallCache { d, balls: Vec::new() }
    }

    pub fn get(&mut self, r: u64) -> &[Site] {
        while self.balls.len() <= r as usize {
            let k = self.balls.len() as u64;
            self.balls.push(l1_ball_offsets(self.d, k));
        }
        &self.balls[r as usize]
    }
}

/// `n^beta` with integer snapping: a value within 1e-12 (relative) of an
/// integer is returned as that integer, so that e.g. 32^0.2 == 2 exactly.
pub fn pow_beta(n: f64, beta: f64) -> f64 {
    if n <= 0.0 {
        return 0.0;
    }
    let p = n.powf(beta);
    let r = p.round();
    if (p - r).abs() <= 1e-12 * r.max(1.0) {
        r
    } else {
        p
    }
}

/// Largest integer radius `k` with `k <= n^beta`; this is the radius of the
/// closed lattice ball `B(x, n^beta)`.
pub fn ball_radius(n: u64, beta: f64) -> u64 {
    pow_beta(n as f64, beta).floor() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_sphere(d: usize, n: i64, positive: bool) -> u128 {
        let b = BoxRegion::centered(Site::origin(d), n);
        b.sites()
            .filter(|s| s.l1(&Site::origin(d)) == n as u64)
            .filter(|s| !positive || s.coords().iter().all(|&v| v > 0))
            .count() as u128
    }

    #[test]
    fn sphere_counts_small_cases() {
        assert_eq!(sphere_count(2, 3), 12);
        assert_eq!(sphere_count(3, 2), 18);
        assert_eq!(sphere_count(3, 1), 6);
        assert_eq!(orthant_sphere_count(2, 5), 4);
        assert_eq!(orthant_sphere_count(3, 2), 0);
    }

    #[test]
    fn sphere_counts_match_enumeration() {
        for d in 1..=4usize {
            for n in 1..=12i64 {
                assert_eq!(sphere_count(d as u32, n as u64), brute_sphere(d, n, false), "d={d} n={n}");
                assert_eq!(orthant_sphere_count(d as u32, n as u64), brute_sphere(d, n, true), "d={d} n={n}");
            }
        }
    }

    #[test]
    fn norms() {
        assert_eq!(l1_norm(&Site::new(&[0, 0])), 0);
        assert_eq!(l1_norm(&Site::new(&[1, -2])), 3);
        assert_eq!(l1_norm(&Site::new(&[2, -1, 3])), 6);
        assert_eq!(sphere_count(2, 1), 4);
        assert_eq!(orthant_sphere_count(3, 3), 1);
        assert_eq!(orthant_sphere_count(2, 1), 0);
    }

    #[test]
    fn umbrella_side_examples() {
        let o2 = Site::origin(2);
        assert_eq!(umbrella_side(0, 2.0, &o2), vec![Site::new(&[0, 1]), Site::new(&[0, 2])]);
        assert_eq!(umbrella_side(1, 1.0, &o2), vec![Site::new(&[1, 0])]);
        assert_eq!(umbrella_side(0, 1.0, &Site::origin(3)), vec![Site::new(&[0, 1, 1])]);
    }

    #[test]
    fn umbrella_sides_disjoint_and_sized() {
        let base = Site::new(&[3, -1, 2]);
        for t in 1..5 {
            let sides: Vec<Vec<Site>> = (0..3).map(|i| umbrella_side(i, t as f64 + 0.5, &base)).collect();
            for (i, s) in sides.iter().enumerate() {
                assert_eq!(s.len(), (t * t) as usize);
                for x in s {
                    // one step along -e_i from a point of base + [1,t]^d lands on the side
                    let inside = x.step(Direction::pos(i));
                    assert!((0..3).all(|j| (1..=t).contains(&(inside.get(j) - base.get(j)))));
                    for o in &sides[i + 1..] {
                        assert!(!o.contains(x));
                    }
                }
            }
        }
    }

    #[test]
    fn ball_offsets_have_right_size() {
        for d in 2..=4usize {
            for r in 0..4u64 {
                let expect: u128 = (0..=r).map(|k| sphere_count(d as u32, k)).sum();
                assert_eq!(l1_ball_offsets(d, r).len() as u128, expect);
            }
        }
    }

    #[test]
    fn pow_beta_snaps_integers() {
        assert_eq!(pow_beta(32.0, 0.2), 2.0);
        assert_eq!(ball_radius(32, 0.2), 2);
        assert_eq!(ball_radius(31, 0.2), 1);
        assert_eq!(ball_radius(1024, 0.1), 2);
        assert_eq!(ball_radius(0, 0.1), 0);
    }

    #[test]
    fn direction_index_roundtrip() {
        for k in 0..8 {
            assert_eq!(Direction::from_index(k).index(), k);
        }
    }

    #[test]
    fn for_each_in_visits_sub_box() {
        let b = BoxRegion::new(Site::new(&[-2, 0, 1]), Site::new(&[3, 4, 5])).unwrap();
        let sub = BoxRegion::new(Site::new(&[0, 1, 2]), Site::new(&[2, 1, 4])).unwrap();
        let mut seen = Vec::new();
        b.for_each_in(&sub, |k, s| {
            assert_eq!(b.index(s), Some(k));
            seen.push(*s);
        });
        let expect: Vec<Site> = sub.sites().collect();
        assert_eq!(seen, expect);
    }

    proptest! {
        #[test]
        fn box_index_roundtrip(lo in proptest::collection::vec(-5i64..5, 3), ext in proptest::collection::vec(0i64..4, 3), k in 0usize..1000) {
            let hi: Vec<i64> = lo.iter().zip(&ext).map(|(a, e)| a + e).collect();
            let b = BoxRegion::new(Site::new(&lo), Site::new(&hi)).unwrap();
            let k = k % b.volume() as usize;
            let s = b.site(k);
            prop_assert!(b.contains(&s));
            prop_assert_eq!(b.index(&s), Some(k));
        }
    }
}
