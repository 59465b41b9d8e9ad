//! Brute-force reference implementations written straight from the
//! definitions, and a sweep comparing them with the fast paths on small boxes.

use crate::environment::{enumerate_exit, exit_dp, omega_z_row};
use crate::field::{generate_field, FieldError, FieldSource, ModelParams, SiteField};
use crate::forest::{build_forest, choose_direction, Forest, ForestError, LazyForest, Orientation};
use crate::geometry::{ins_ray_contains, tube_sites, u_depth, v_and_n, GeomError};
use crate::lattice::{ball_radius, l1_ball_offsets, pow_beta, BoxRegion, Direction, LatticeError, Site, Window};
use crate::metrics::{compute_big_h, compute_h, Censored, HField};
use crate::pruning::RayHandle;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

const TIE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// `x` lies on side `i` of the umbrella of length `t` hung at `y`.
pub fn on_umbrella_side(x: &Site, y: &Site, i: usize, t: f64, zeta: Orientation) -> bool {
    (0..x.dim()).all(|j| {
        let w = zeta.sign() * (x.get(j) - y.get(j));
        if j == i {
            w == 0
        } else {
            w >= 1 && w as f64 <= t
        }
    })
}

/// `lambda_i(x)` by scanning every vertex of the l-infinity box of radius `r`.
/// The flag is false when a vertex of that box has no field value.
pub fn lambda_brute(x: &Site, i: usize, field: &dyn FieldSource, r: i64, zeta: Orientation) -> (f64, bool) {
    let d = x.dim();
    let mut best = 0.0f64;
    let mut complete = true;
    let bx = BoxRegion { lo: x.sub(&Site::splat(d, r)), hi: x.add(&Site::splat(d, r)) };
    for y in bx.sites() {
        match field.value(&y) {
            Some(l) => {
                if on_umbrella_side(x, &y, i, l, zeta) {
                    best = best.max(l);
                }
            }
            None => complete = false,
        }
    }
    (best, complete)
}

pub fn axis_brute(x: &Site, field: &dyn FieldSource, r: i64, zeta: Orientation) -> usize {
    let lam: Vec<f64> = (0..x.dim()).map(|i| lambda_brute(x, i, field, r, zeta).0).collect();
    choose_direction(&lam).0
}

fn on_inflow(region: &BoxRegion, zeta: Orientation, x: &Site) -> bool {
    (0..region.dim()).any(|j| match zeta {
        Orientation::Plus => x.get(j) == region.lo.get(j),
        Orientation::Minus => x.get(j) == region.hi.get(j),
    })
}

/// Height of the progeny tree of `x` by recursive descent over children.
pub fn h_brute(f: &Forest, x: &Site) -> Censored {
    let zeta = f.orientation;
    let mut best = 0;
    let mut cens = on_inflow(&f.region, zeta, x);
    for j in 0..x.dim() {
        let y = x.step(zeta.dir(j).reversed());
        if f.parent(&y) == Some(*x) {
            let c = h_brute(f, &y);
            best = best.max(c.value() + 1);
            cens |= !c.is_exact();
        }
    }
    if cens {
        Censored::AtLeast(best)
    } else {
        Censored::Exact(best)
    }
}

/// Largest `h(y)` over the window with `|x - y| <= h(y)^beta`.
pub fn big_h_brute(h: &HField, beta: f64, x: &Site) -> u32 {
    h.region
        .sites()
        .filter_map(|y| {
            let v = h.get(&y)?.value();
            (x.l1(&y) as f64 <= pow_beta(v as f64, beta)).then_some(v)
        })
        .max()
        .unwrap_or(0)
}

pub fn contains_brute(ray: &RayHandle, x: &Site) -> bool {
    ray.points.iter().enumerate().any(|(n, p)| x.l1(p) <= ball_radius(n as u64, ray.beta))
}

/// `(v, n)` by scanning every ray point; the largest index wins ties.
pub fn v_brute(ray: &RayHandle, x: &Site) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (n, p) in ray.points.iter().enumerate() {
        let t = pow_beta(n as f64, ray.beta) - x.l1(p) as f64;
        if t >= best - TIE {
            if t > best + TIE || n > arg {
                arg = n;
            }
            best = best.max(t);
        }
    }
    (best, arg)
}

/// Distance from `x` to the complement of the tube, searched within `reach`.
pub fn u_brute(ray: &RayHandle, x: &Site, reach: u64) -> u32 {
    if !contains_brute(ray, x) {
        return 0;
    }
    let o = Site::origin(x.dim());
    l1_ball_offsets(x.dim(), reach)
        .into_iter()
        .filter(|off| !contains_brute(ray, &x.add(off)))
        .map(|off| off.l1(&o))
        .min()
        .unwrap_or(u64::MAX) as u32
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub boxes: usize,
    pub sites: usize,
    pub lambda_mismatches: usize,
    pub axis_mismatches: usize,
    pub h_mismatches: usize,
    pub big_h_mismatches: usize,
    pub ray_sites: usize,
    pub v_mismatches: usize,
    pub u_mismatches: usize,
    pub dp_queries: usize,
    pub dp_max_error: f64,
}

impl OracleReport {
    pub fn mismatches(&self) -> usize {
        self.lambda_mismatches + self.axis_mismatches + self.h_mismatches + self.big_h_mismatches + self.v_mismatches + self.u_mismatches
    }

    pub fn merge(&mut self, o: &OracleReport) {
        self.boxes += o.boxes;
        self.sites += o.sites;
        self.lambda_mismatches += o.lambda_mismatches;
        self.axis_mismatches += o.axis_mismatches;
        self.h_mismatches += o.h_mismatches;
        self.big_h_mismatches += o.big_h_mismatches;
        self.ray_sites += o.ray_sites;
        self.v_mismatches += o.v_mismatches;
        self.u_mismatches += o.u_mismatches;
        self.dp_queries += o.dp_queries;
        self.dp_max_error = self.dp_max_error.max(o.dp_max_error);
    }
}

/// Compare the fast paths with the oracles on one box of side `side`.
pub fn check_box(d: usize, side: i64, r: i64, beta: f64, seed: u64, zeta: Orientation) -> Result<OracleReport, OracleError> {
    let mut rep = OracleReport { boxes: 1, ..Default::default() };
    let w = Window::centered_cube(d, side, r)?;
    let p = ModelParams::preset(d, w, seed);
    let fld = generate_field(&p)?;
    let (forest, lam) = build_forest(&fld, &fld.region, &w, zeta, r)?;
    let h = compute_h(&forest);
    let hh = compute_big_h(&h, beta);
    for x in w.core.sites() {
        rep.sites += 1;
        let fast = lam.at(&x).expect("core site");
        for (i, &fv) in fast.iter().enumerate() {
            let (bv, complete) = lambda_brute(&x, i, &fld, r, zeta);
            if !complete || bv != fv {
                rep.lambda_mismatches += 1;
            }
        }
        if forest.parent_axis(&x) != Some(axis_brute(&x, &fld, r, zeta)) {
            rep.axis_mismatches += 1;
        }
        if h.get(&x) != Some(h_brute(&forest, &x)) {
            rep.h_mismatches += 1;
        }
        if hh.get(&x).map(|c| c.value()) != Some(big_h_brute(&h, beta, &x)) {
            rep.big_h_mismatches += 1;
        }
    }

    // an ancestral line from the box centre, continued lazily on the same field
    let lazy_field = SiteField::new(p);
    let lazy = LazyForest::new(&lazy_field, zeta, r);
    let z = Site::origin(d);
    let len = 160;
    let mut ray = RayHandle {
        leaf: z,
        forest: 1,
        orientation: zeta,
        leaf_certain: true,
        points: vec![z],
        certain_len: 1,
        window_len: 1,
        frontier: None,
        beta,
    };
    ray.extend_lazy(&lazy, len);
    let reach = ball_radius(len as u64, beta) + 2;
    for x in w.core.sites() {
        rep.ray_sites += 1;
        let (v, n) = v_and_n(&ray, &x)?;
        let (bv, bn) = v_brute(&ray, &x);
        if (v - bv).abs() > TIE || n != bn || ins_ray_contains(&ray, &x)? != contains_brute(&ray, &x) {
            rep.v_mismatches += 1;
        }
        if u_depth(&ray, &x)? != u_brute(&ray, &x, reach) {
            rep.u_mismatches += 1;
        }
    }

    // horizon-4 exit masses: backward induction against path enumeration
    let states: Vec<Site> = tube_sites(&ray, len).into_iter().filter(|y| y.l1(&z) <= side as u64 + 6).collect();
    let index: HashMap<Site, usize> = states.iter().enumerate().map(|(k, s)| (*s, k)).collect();
    let rows: Vec<Vec<f64>> = states.iter().map(|y| omega_z_row(&ray, y).map(|t| t.to_f64())).collect::<Result<_, _>>()?;
    let next: Vec<Vec<Option<usize>>> = states.iter().map(|y| (0..2 * d).map(|k| index.get(&y.step(Direction::from_index(k))).copied()).collect()).collect();
    let queries: Vec<(usize, u32)> = (0..states.len()).filter(|&k| w.core.contains(&states[k])).map(|k| (k, 4)).collect();
    let vals = exit_dp(&rows, &next, &queries);
    let inside = |y: &Site| contains_brute(&ray, y);
    let row = |y: &Site| omega_z_row(&ray, y).expect("long ray").to_f64();
    for (q, v) in queries.iter().zip(vals) {
        let (p, e) = enumerate_exit(&states[q.0], 4, &inside, &row);
        rep.dp_queries += 1;
        rep.dp_max_error = rep.dp_max_error.max((p - v.0).abs()).max((e - v.1).abs());
    }
    Ok(rep)
}

/// Every box side from 1 to `max_side`, both orientations, `seeds` fields each.
pub fn oracle_sweep(d: usize, max_side: i64, seeds: u64, beta: f64) -> Result<OracleReport, OracleError> {
    let r = if d == 2 { 12 } else { 6 };
    let mut rep = OracleReport::default();
    for side in 1..=max_side {
        for seed in 0..seeds {
            for zeta in [Orientation::Plus, Orientation::Minus] {
                rep.merge(&check_box(d, side, r, beta, seed * 1000 + side as u64, zeta)?);
            }
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn umbrella_side_membership() {
        let y = Site::new(&[0, 0]);
        // side 0 of U_3: x_0 = 0, 1 <= x_1 <= 3
        assert!(on_umbrella_side(&Site::new(&[0, 1]), &y, 0, 3.0, Orientation::Plus));
        assert!(on_umbrella_side(&Site::new(&[0, 3]), &y, 0, 3.5, Orientation::Plus));
        assert!(!on_umbrella_side(&Site::new(&[0, 4]), &y, 0, 3.5, Orientation::Plus));
        assert!(!on_umbrella_side(&Site::new(&[0, 0]), &y, 0, 3.0, Orientation::Plus));
        assert!(!on_umbrella_side(&Site::new(&[1, 1]), &y, 0, 3.0, Orientation::Plus));
        assert!(on_umbrella_side(&Site::new(&[0, -2]), &y, 0, 3.0, Orientation::Minus));
    }

    #[test]
    fn sweep_small_boxes_d2() {
        let rep = oracle_sweep(2, 5, 2, 0.4).unwrap();
        assert_eq!(rep.mismatches(), 0, "{rep:?}");
        assert!(rep.dp_queries > 0 && rep.dp_max_error < 1e-12, "{rep:?}");
    }

    #[test]
    fn sweep_small_boxes_d3() {
        let rep = oracle_sweep(3, 3, 1, 0.4).unwrap();
        assert_eq!(rep.mismatches(), 0, "{rep:?}");
        assert!(rep.dp_max_error < 1e-12, "{rep:?}");
    }
}
