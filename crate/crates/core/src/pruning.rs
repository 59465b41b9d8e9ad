//! Three-valued pruning of the two forests into the sets `T~_i`, `T_i`,
//! their leaves, the insulation covers `B_i` / `C_i` and the insulated rays.

use crate::field::{read_header, read_region, read_u64, write_region, FieldError, FORMAT_VERSION};
use crate::forest::{Forest, LazyForest, Orientation};
use crate::lattice::{ball_radius, BallCache, BoxRegion, Site};
use crate::metrics::{CensoredField, Censored, HField, HInsField};
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tri {
    Out = 0,
    In = 1,
    Unknown = 2,
}

impl Tri {
    fn from_u8(v: u8) -> Option<Tri> {
        match v {
            0 => Some(Tri::Out),
            1 => Some(Tri::In),
            2 => Some(Tri::Unknown),
            _ => None,
        }
    }
}

/// One tri-state set over a window.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub region: BoxRegion,
    pub states: Vec<Tri>,
}

impl Layer {
    pub fn filled(region: BoxRegion, t: Tri) -> Self {
        Layer { region, states: vec![t; region.volume() as usize] }
    }

    #[inline]
    pub fn get(&self, x: &Site) -> Option<Tri> {
        self.region.index(x).map(|k| self.states[k])
    }

    #[inline]
    pub fn is_in(&self, x: &Site) -> bool {
        self.get(x) == Some(Tri::In)
    }

    pub fn count(&self, t: Tri) -> usize {
        self.states.iter().filter(|&&s| s == t).count()
    }

    pub fn fraction(&self, t: Tri) -> f64 {
        self.count(t) as f64 / self.states.len().max(1) as f64
    }
}

/// `T~_i = {x : h_i(x) > H_j(y) for all y in B(x, h_i(x)^beta)}`.
pub fn tilde_t(h_i: &HField, big_h_j: &HInsField, beta: f64) -> Layer {
    tilde_t_with(h_i, big_h_j, beta, false)
}

/// Like [`tilde_t`], but a censored `h_i(x) >= v` is declared IN when every
/// `H_j` in the radius-`v` ball is exact and below `v`. This is exact unless
/// the true height moves the ball radius past its value at `v`, and is used
/// only by the depth-violation diagnostic.
pub fn tilde_t_lower_bound_in(h_i: &HField, big_h_j: &HInsField, beta: f64) -> Layer {
    tilde_t_with(h_i, big_h_j, beta, true)
}

fn tilde_t_with(h_i: &HField, big_h_j: &HInsField, beta: f64, lower_bound_in: bool) -> Layer {
    let region = h_i.region;
    let mut balls = BallCache::new(region.dim());
    let mut out = Layer::filled(region, Tri::Unknown);
    for k in 0..h_i.len() {
        let x = region.site(k);
        let hx = h_i.at_index(k);
        let v = hx.value();
        let r = ball_radius(v as u64, beta);
        let mut forced_out = false;
        let mut all_certain = hx.is_exact() || (lower_bound_in && v > 0);
        for off in balls.get(r) {
            match big_h_j.get(&x.add(off)) {
                Some(c) => {
                    // H_j(y) >= c.value() >= v certainly violates when v is exact
                    if hx.is_exact() && c.value() >= v {
                        forced_out = true;
                        break;
                    }
                    all_certain &= c.is_exact();
                }
                None => all_certain = false,
            }
        }
        out.states[k] = if forced_out {
            Tri::Out
        } else if all_certain {
            Tri::In
        } else {
            Tri::Unknown
        };
    }
    out
}

/// How a certainly-IN ancestral line was accepted at the window's edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frontier {
    /// Every visited state was IN up to the window face.
    Face,
    /// The line entered the frontier band and passed an UNKNOWN site there.
    Band,
}

#[derive(Clone, Debug)]
pub struct PrunedSet {
    pub layer: Layer,
    /// For IN sites, how the line was accepted.
    pub frontier: Vec<Option<Frontier>>,
    pub band: i64,
}

/// Distance (in unit steps) from `x` to the outflow faces of the forest.
#[inline]
pub fn outflow_depth(region: &BoxRegion, zeta: Orientation, x: &Site) -> i64 {
    (0..region.dim())
        .map(|j| match zeta {
            Orientation::Plus => region.hi.get(j) - x.get(j),
            Orientation::Minus => x.get(j) - region.lo.get(j),
        })
        .min()
        .unwrap_or(0)
}

/// `T_i = {x : a_i^n(x) in T~_i for all n}` decided on the window. UNKNOWN
/// states of `T~_i` within `band` steps of the outflow faces are accepted;
/// elsewhere they make the line UNKNOWN. Any certain OUT on the line wins.
pub fn prune_to_infinite(forest: &Forest, tilde: &Layer, band: i64) -> PrunedSet {
    #[derive(Clone, Copy, PartialEq)]
    enum Line {
        Out,
        Unknown,
        Accepted(Frontier),
    }
    let region = forest.region;
    let n = region.volume() as usize;
    let strides: Vec<usize> = (0..region.dim()).map(|i| region.stride(i)).collect();
    let mut line = vec![Line::Unknown; n];
    let order: Box<dyn Iterator<Item = usize>> = match forest.orientation {
        // parents have larger indices for Plus, so visit them first
        Orientation::Plus => Box::new((0..n).rev()),
        Orientation::Minus => Box::new(0..n),
    };
    for k in order {
        let x = region.site(k);
        let a = forest.axis[k] as usize;
        let p = x.step(forest.orientation.dir(a));
        let up = if region.contains(&p) {
            let pk = match forest.orientation {
                Orientation::Plus => k + strides[a],
                Orientation::Minus => k - strides[a],
            };
            line[pk]
        } else {
            Line::Accepted(Frontier::Face)
        };
        line[k] = match (tilde.states[k], up) {
            (Tri::Out, _) | (_, Line::Out) => Line::Out,
            (Tri::In, l) => l,
            (Tri::Unknown, l) => {
                if outflow_depth(&region, forest.orientation, &x) < band {
                    match l {
                        Line::Unknown => Line::Unknown,
                        _ => Line::Accepted(Frontier::Band),
                    }
                } else {
                    Line::Unknown
                }
            }
        };
    }
    let mut layer = Layer::filled(region, Tri::Unknown);
    let mut frontier = vec![None; n];
    for k in 0..n {
        layer.states[k] = match (tilde.states[k], line[k]) {
            (_, Line::Out) => Tri::Out,
            (Tri::In, Line::Accepted(f)) => {
                frontier[k] = Some(f);
                Tri::In
            }
            _ => Tri::Unknown,
        };
    }
    PrunedSet { layer, frontier, band }
}

/// Frequency of a certain violation `a^n(x) notin T~` at some `n >= k`,
/// among lines fully decided for `n <= horizon`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationProfile {
    pub k: Vec<u32>,
    /// Lines with an observed violation at depth `>= k`.
    pub positive: Vec<u64>,
    /// Lines censored (UNKNOWN state or window exit) before any violation at depth `>= k`.
    pub ambiguous: Vec<u64>,
    /// Lines followed to the horizon without meeting an UNKNOWN state.
    pub decided: u64,
    /// Positives among the decided lines.
    pub decided_positive: Vec<u64>,
    pub attempted: u64,
    pub horizon: u32,
}

impl ViolationProfile {
    pub fn new(k: &[u32], horizon: u32) -> Self {
        let z = vec![0; k.len()];
        ViolationProfile { k: k.to_vec(), positive: z.clone(), ambiguous: z.clone(), decided: 0, decided_positive: z, attempted: 0, horizon }
    }

    /// `(k, lower, upper)`: ambiguous lines counted as negative, then as positive.
    pub fn brackets(&self) -> Vec<(f64, f64, f64)> {
        let n = self.attempted.max(1) as f64;
        (0..self.k.len())
            .map(|j| (self.k[j] as f64, self.positive[j] as f64 / n, (self.positive[j] + self.ambiguous[j]) as f64 / n))
            .collect()
    }

    /// Frequencies among lines decided up to the horizon.
    pub fn frequencies(&self) -> Vec<(f64, f64)> {
        self.k.iter().zip(&self.decided_positive).map(|(&k, &c)| (k as f64, c as f64 / self.decided.max(1) as f64)).collect()
    }

    pub fn merge(&mut self, o: &ViolationProfile) {
        self.decided += o.decided;
        self.attempted += o.attempted;
        for j in 0..self.k.len() {
            self.positive[j] += o.positive[j];
            self.ambiguous[j] += o.ambiguous[j];
            self.decided_positive[j] += o.decided_positive[j];
        }
    }
}

/// Frequency of `a^n(x)` leaving `tilde` for some `k <= n <= horizon`, right-censored at
/// the first UNKNOWN state on the line.
pub fn depth_violation_profile(forest: &Forest, tilde: &Layer, starts: &BoxRegion, k_grid: &[u32], horizon: u32) -> ViolationProfile {
    let mut prof = ViolationProfile::new(k_grid, horizon);
    for x in starts.sites() {
        prof.attempted += 1;
        let mut cur = x;
        let mut last_violation: Option<u32> = None;
        let mut complete = false;
        for n in 0..=horizon {
            match tilde.get(&cur) {
                Some(Tri::Out) => last_violation = Some(n),
                Some(Tri::In) => {}
                _ => break,
            }
            if n == horizon {
                complete = true;
                break;
            }
            cur = match forest.parent(&cur) {
                Some(p) => p,
                None => break,
            };
        }
        if complete {
            prof.decided += 1;
        }
        for (j, &k) in k_grid.iter().enumerate() {
            if last_violation.map_or(false, |v| v >= k) {
                prof.positive[j] += 1;
                prof.decided_positive[j] += complete as u64;
            } else if !complete {
                prof.ambiguous[j] += 1;
            }
        }
    }
    prof
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leaf {
    pub site: Site,
    /// No child could be hidden outside the window or in an UNKNOWN state.
    pub certain: bool,
}

/// IN sites of `T_i` with no IN child.
pub fn leaves(t: &Layer, forest: &Forest) -> Vec<Leaf> {
    let region = t.region;
    let zeta = forest.orientation;
    let mut out = Vec::new();
    for (k, &s) in t.states.iter().enumerate() {
        if s != Tri::In {
            continue;
        }
        let x = region.site(k);
        let mut has_in_child = false;
        let mut certain = true;
        for j in 0..x.dim() {
            let y = x.step(zeta.dir(j).reversed());
            match t.get(&y) {
                None => certain = false,
                Some(ts) => {
                    if forest.parent(&y) == Some(x) {
                        match ts {
                            Tri::In => has_in_child = true,
                            Tri::Unknown => certain = false,
                            Tri::Out => {}
                        }
                    }
                }
            }
        }
        if !has_in_child {
            out.push(Leaf { site: x, certain });
        }
    }
    out
}

/// Insulated ray `alpha^n(z)` from a leaf. Points past `certain_len` are
/// frontier points (accepted band states or lazily extended ancestors).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayHandle {
    pub leaf: Site,
    pub forest: u8,
    pub orientation: Orientation,
    pub leaf_certain: bool,
    pub points: Vec<Site>,
    /// Leading points that are certainly IN `T_i`.
    pub certain_len: usize,
    /// Leading points inside the window.
    pub window_len: usize,
    pub frontier: Option<Frontier>,
    pub beta: f64,
}

impl RayHandle {
    #[inline]
    pub fn radius(&self, n: usize) -> u64 {
        ball_radius(n as u64, self.beta)
    }

    #[inline]
    pub fn zeta(&self) -> Orientation {
        self.orientation
    }

    /// Append lazily computed ancestors until the ray has `len` points.
    pub fn extend_lazy(&mut self, lazy: &LazyForest<'_>, len: usize) {
        debug_assert_eq!(lazy.orientation, self.orientation);
        while self.points.len() < len {
            let last = *self.points.last().unwrap();
            self.points.push(lazy.parent(&last));
        }
    }

    /// Extend along the direction of steepest flow without a field, used only
    /// by tests that need long synthetic rays.
    pub fn extend_with(&mut self, len: usize, mut step: impl FnMut(&Site) -> Site) {
        while self.points.len() < len {
            let last = *self.points.last().unwrap();
            self.points.push(step(&last));
        }
    }
}

/// Covers `B_i` and `C_i` together with the rays that build `C_i`.
#[derive(Clone, Debug)]
pub struct Insulation {
    pub b: Layer,
    pub c: Layer,
    pub rays: Vec<RayHandle>,
}

/// `B_i = U_{x in T_i} B(x, h_i(x)^beta)` and `C_i = U_{leaves} InsRay(z)`.
pub fn insulate(forest_index: u8, forest: &Forest, t: &PrunedSet, h: &HField, leaves: &[Leaf], beta: f64) -> Insulation {
    let region = t.layer.region;
    let d = region.dim();
    let mut balls = BallCache::new(d);
    let maxr = ball_radius(h.max_value() as u64, beta);
    // 0 = out, 1 = unknown, 2 = in
    let mut b = vec![0u8; region.volume() as usize];
    let stamp = |x: &Site, r: u64, level: u8, b: &mut Vec<u8>, balls: &mut BallCache| {
        for off in balls.get(r) {
            if let Some(j) = region.index(&x.add(off)) {
                b[j] = b[j].max(level);
            }
        }
    };
    for k in 0..b.len() {
        let x = region.site(k);
        let hx = h.at_index(k);
        let r = ball_radius(hx.value() as u64, beta);
        match t.layer.states[k] {
            Tri::In => {
                stamp(&x, r, 2, &mut b, &mut balls);
                if !hx.is_exact() {
                    stamp(&x, maxr.max(r), 1, &mut b, &mut balls);
                }
            }
            Tri::Unknown => stamp(&x, maxr.max(r), 1, &mut b, &mut balls),
            Tri::Out => {}
        }
    }
    for k in 0..b.len() {
        if b[k] == 0 && region.depth(&region.site(k)) as u64 <= maxr {
            b[k] = 1;
        }
    }
    let to_tri = |v: u8| match v {
        2 => Tri::In,
        1 => Tri::Unknown,
        _ => Tri::Out,
    };
    let b = Layer { region, states: b.into_iter().map(to_tri).collect() };

    let mut rays = Vec::with_capacity(leaves.len());
    let mut c = vec![0u8; region.volume() as usize];
    for leaf in leaves {
        let pts = forest.line(&leaf.site, usize::MAX);
        let window_len = pts.len();
        let certain_len = pts.iter().take_while(|p| t.layer.is_in(p)).count();
        let frontier = pts.first().and_then(|p| region.index(p)).and_then(|k| t.frontier[k]);
        let ray = RayHandle {
            leaf: leaf.site,
            forest: forest_index,
            orientation: forest.orientation,
            leaf_certain: leaf.certain,
            points: pts,
            certain_len,
            window_len,
            frontier,
            beta,
        };
        for (n, p) in ray.points.iter().enumerate() {
            let level = if n < certain_len { 2 } else { 1 };
            for off in balls.get(ray.radius(n)) {
                if let Some(j) = region.index(&p.add(off)) {
                    c[j] = c[j].max(level);
                }
            }
        }
        rays.push(ray);
    }
    // balls of ray points beyond the window may reach in
    if !rays.is_empty() {
        let reach = rays.iter().map(|r| r.radius(r.points.len() + 4096)).max().unwrap_or(0);
        for k in 0..c.len() {
            if c[k] == 0 && (outflow_depth(&region, forest.orientation, &region.site(k)) as u64) < reach {
                c[k] = 1;
            }
        }
    }
    let c = Layer { region, states: c.into_iter().map(to_tri).collect() };
    Insulation { b, c, rays }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disjointness {
    pub certain_overlaps: usize,
    pub witnesses: Vec<Site>,
    pub unknown_overlaps: usize,
}

impl Disjointness {
    pub fn ok(&self) -> bool {
        self.certain_overlaps == 0
    }
}

pub fn check_disjoint(b1: &Layer, b2: &Layer) -> Disjointness {
    let mut out = Disjointness { certain_overlaps: 0, witnesses: Vec::new(), unknown_overlaps: 0 };
    for k in 0..b1.states.len() {
        match (b1.states[k], b2.states[k]) {
            (Tri::In, Tri::In) => {
                out.certain_overlaps += 1;
                if out.witnesses.len() < 16 {
                    out.witnesses.push(b1.region.site(k));
                }
            }
            (Tri::Out, _) | (_, Tri::Out) => {}
            _ => out.unknown_overlaps += 1,
        }
    }
    out
}

/// Joint ancestral function: `a_1` on `T_1`, `a_2` on `T_2`, undefined
/// (`None`, the cemetery state) elsewhere or when membership is UNKNOWN.
pub fn alpha(x: &Site, t1: &Layer, t2: &Layer, f1: &Forest, f2: &Forest) -> Option<Site> {
    if t1.is_in(x) {
        f1.parent(x)
    } else if t2.is_in(x) {
        f2.parent(x)
    } else {
        None
    }
}

/// Named tri-state layers with a stable on-disk form.
#[derive(Clone, Debug, PartialEq)]
pub struct Membership {
    pub region: BoxRegion,
    pub layers: Vec<(String, Layer)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipSummary {
    pub leaf_count_1: usize,
    pub leaf_count_2: usize,
    pub certain_in_fraction: std::collections::BTreeMap<String, f64>,
    pub unknown_fraction: std::collections::BTreeMap<String, f64>,
    pub overlap_count: usize,
}

pub const MEMBERSHIP_MAGIC: &[u8; 4] = b"UMBM";

impl Membership {
    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    pub fn summary(&self, leaf_count_1: usize, leaf_count_2: usize, overlap_count: usize) -> MembershipSummary {
        MembershipSummary {
            leaf_count_1,
            leaf_count_2,
            certain_in_fraction: self.layers.iter().map(|(n, l)| (n.clone(), l.fraction(Tri::In))).collect(),
            unknown_fraction: self.layers.iter().map(|(n, l)| (n.clone(), l.fraction(Tri::Unknown))).collect(),
            overlap_count,
        }
    }

    /// Header, name registry, then per layer a run count and `(state, len)` runs.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MEMBERSHIP_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.region.dim() as u32).to_le_bytes())?;
        write_region(w, &self.region)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for (name, _) in &self.layers {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
        for (_, l) in &self.layers {
            let mut runs: Vec<(u8, u64)> = Vec::new();
            for &s in &l.states {
                match runs.last_mut() {
                    Some((t, n)) if *t == s as u8 => *n += 1,
                    _ => runs.push((s as u8, 1)),
                }
            }
            w.write_all(&(runs.len() as u64).to_le_bytes())?;
            for (t, n) in runs {
                w.write_all(&[t])?;
                w.write_all(&n.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(r: &mut R) -> Result<Self, FieldError> {
        let d = read_header(r, MEMBERSHIP_MAGIC)?;
        let region = read_region(r, d)?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let nl = u32::from_le_bytes(b4) as usize;
        let mut names = Vec::with_capacity(nl);
        for _ in 0..nl {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            names.push(String::from_utf8(name).map_err(|e| FieldError::Format(e.to_string()))?);
        }
        let vol = region.volume() as usize;
        let mut layers = Vec::with_capacity(nl);
        for name in names {
            let runs = read_u64(r)?;
            let mut states = Vec::with_capacity(vol);
            for _ in 0..runs {
                let mut t = [0u8; 1];
                r.read_exact(&mut t)?;
                let s = Tri::from_u8(t[0]).ok_or_else(|| FieldError::Format(format!("bad state {}", t[0])))?;
                let n = read_u64(r)? as usize;
                states.extend(std::iter::repeat(s).take(n));
            }
            if states.len() != vol {
                return Err(FieldError::Format(format!("layer {name} has {} states, expected {vol}", states.len())));
            }
            layers.push((name, Layer { region, states }));
        }
        Ok(Membership { region, layers })
    }
}

/// Everything derived from one pair of forests on a window.
#[derive(Clone, Debug)]
pub struct PrunedPair {
    pub h: [HField; 2],
    pub big_h: [HInsField; 2],
    pub tilde: [Layer; 2],
    pub t: [PrunedSet; 2],
    pub leaves: [Vec<Leaf>; 2],
    pub ins: [Insulation; 2],
    pub disjoint: Disjointness,
}

impl PrunedPair {
    pub fn membership(&self) -> Membership {
        let region = self.tilde[0].region;
        let names = ["tilde_T_1", "T_1", "B_1", "C_1", "tilde_T_2", "T_2", "B_2", "C_2"];
        let layers = [
            &self.tilde[0],
            &self.t[0].layer,
            &self.ins[0].b,
            &self.ins[0].c,
            &self.tilde[1],
            &self.t[1].layer,
            &self.ins[1].b,
            &self.ins[1].c,
        ];
        Membership { region, layers: names.iter().zip(layers).map(|(n, l)| (n.to_string(), l.clone())).collect() }
    }

    pub fn summary(&self) -> MembershipSummary {
        self.membership().summary(self.leaves[0].len(), self.leaves[1].len(), self.disjoint.certain_overlaps)
    }
}

/// Run the pruning pipeline `h -> H -> T~ -> T -> leaves -> B/C` on two
/// forests sharing a window.
pub fn prune_pair(f1: &Forest, f2: &Forest, beta: f64, band: i64) -> PrunedPair {
    use crate::metrics::{compute_big_h, compute_h};
    let h = [compute_h(f1), compute_h(f2)];
    let big_h = [compute_big_h(&h[0], beta), compute_big_h(&h[1], beta)];
    let tilde = [tilde_t(&h[0], &big_h[1], beta), tilde_t(&h[1], &big_h[0], beta)];
    let t = [prune_to_infinite(f1, &tilde[0], band), prune_to_infinite(f2, &tilde[1], band)];
    let leaves = [leaves(&t[0].layer, f1), leaves(&t[1].layer, f2)];
    let ins = [insulate(1, f1, &t[0], &h[0], &leaves[0], beta), insulate(2, f2, &t[1], &h[1], &leaves[1], beta)];
    let disjoint = check_disjoint(&ins[0].b, &ins[1].b);
    PrunedPair { h, big_h, tilde, t, leaves, ins, disjoint }
}

/// Lift a censored field into a fully exact one (test helper for negative controls).
pub fn zero_field(region: BoxRegion) -> CensoredField {
    let mut z = CensoredField::zeros(region);
    for k in 0..z.len() {
        z.set_index(k, Censored::Exact(0));
    }
    z
}
