//! Per-(ray, site) geometry of insulated rays: `u_z`, `v_z`, `n_z`, the drift
//! directions `r_z`, `s_z`, and the constant solver for `c_20`.
//!
//! Rays are directed, so `|alpha^n(z) - z|_1 = n`. Every search below uses
//! `|x - alpha^n(z)| >= |n - |x - z||` to restrict `n` to a short window
//! around `|x - z|`, which keeps queries O(1) even on very long rays.

use crate::lattice::{ball_radius, l1_ball_offsets, pow_beta, Direction, Site};
use crate::metrics::Censored;
use crate::pruning::RayHandle;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const TIE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeomError {
    #[error("ray has {have} points but the query needs depth {required}; enlarge the window or extend the ray")]
    RayExhausted { required: usize, have: usize },
    #[error("site {0} is outside the insulated ray")]
    OutsideRay(Site),
}

/// Geometry of one site relative to one ray.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayGeom {
    pub u: u32,
    pub v: f64,
    pub n: usize,
    /// `None` outside the insulated ray.
    pub r: Option<Direction>,
    pub s: Option<Direction>,
}

#[inline]
fn point(ray: &RayHandle, n: usize) -> Result<&Site, GeomError> {
    ray.points.get(n).ok_or(GeomError::RayExhausted { required: n + 1, have: ray.points.len() })
}

/// Membership in `InsRay(z) = U_n B(alpha^n(z), n^beta)`.
pub fn ins_ray_contains(ray: &RayHandle, x: &Site) -> Result<bool, GeomError> {
    let d = x.l1(&ray.points[0]) as usize;
    let mut n = d.saturating_sub(ball_radius(d as u64, ray.beta) as usize);
    loop {
        if n > d && (n - d) as u64 > ball_radius(n as u64, ray.beta) {
            return Ok(false);
        }
        if x.l1(point(ray, n)?) <= ball_radius(n as u64, ray.beta) {
            return Ok(true);
        }
        n += 1;
    }
}

/// `v_z(x) = sup_n (n^beta - |x - alpha^n(z)|)` and the largest attaining `n`.
pub fn v_and_n(ray: &RayHandle, x: &Site) -> Result<(f64, usize), GeomError> {
    let d = x.l1(&ray.points[0]) as usize;
    let term = |n: usize| -> Result<f64, GeomError> { Ok(pow_beta(n as f64, ray.beta) - x.l1(point(ray, n)?) as f64) };
    let mut best = term(d)?;
    let mut arg = d;
    let mut n = d + 1;
    // upper side: bound n^beta - (n - d) is decreasing
    while pow_beta(n as f64, ray.beta) - ((n - d) as f64) >= best - TIE {
        let t = term(n)?;
        if t > best + TIE {
            best = t;
            arg = n;
        } else if t >= best - TIE {
            arg = n;
        }
        n += 1;
    }
    // lower side: bound n^beta - (d - n) decreases as n decreases
    for n in (0..d).rev() {
        if pow_beta(n as f64, ray.beta) - ((d - n) as f64) < best - TIE {
            break;
        }
        let t = term(n)?;
        if t > best + TIE {
            best = t;
            arg = n;
        }
    }
    Ok((best, arg))
}

/// `u_z(x)`: l1 distance from `x` to the complement of `InsRay(z)`.
pub fn u_depth(ray: &RayHandle, x: &Site) -> Result<u32, GeomError> {
    if !ins_ray_contains(ray, x)? {
        return Ok(0);
    }
    let dim = x.dim();
    let mut k = 1u64;
    loop {
        for off in l1_ball_offsets(dim, k).iter().filter(|o| o.l1(&Site::origin(dim)) == k) {
            if !ins_ray_contains(ray, &x.add(off))? {
                return Ok(k as u32);
            }
        }
        k += 1;
    }
}

/// `r_z(x)` is the ray's step at `n_z`; `s_z(x)` moves one step toward
/// `alpha^{n_z}(z)` along the lowest differing coordinate, or equals `r_z`
/// on the ray itself.
pub fn drift_directions(ray: &RayHandle, x: &Site, n: usize) -> Result<(Direction, Direction), GeomError> {
    if !ins_ray_contains(ray, x)? {
        return Err(GeomError::OutsideRay(*x));
    }
    let a = *point(ray, n)?;
    let r = a.direction_to(point(ray, n + 1)?).expect("ray steps are unit");
    let s = match (0..x.dim()).find(|&i| x.get(i) != a.get(i)) {
        None => r,
        Some(i) => Direction::new(i, if a.get(i) > x.get(i) { 1 } else { -1 }),
    };
    Ok((r, s))
}

/// `(n_z, r_z, s_z)` without the (costlier) depth `u_z`; `None` off the tube.
pub fn drift_geom(ray: &RayHandle, x: &Site) -> Result<Option<(usize, Direction, Direction)>, GeomError> {
    if !ins_ray_contains(ray, x)? {
        return Ok(None);
    }
    let (_, n) = v_and_n(ray, x)?;
    let (r, s) = drift_directions(ray, x, n)?;
    Ok(Some((n, r, s)))
}

pub fn ray_geom(ray: &RayHandle, x: &Site) -> Result<RayGeom, GeomError> {
    let (v, n) = v_and_n(ray, x)?;
    let u = u_depth(ray, x)?;
    let (r, s) = if u > 0 {
        let (r, s) = drift_directions(ray, x, n)?;
        (Some(r), Some(s))
    } else {
        (None, None)
    };
    Ok(RayGeom { u, v, n, r, s })
}

/// Constants `(c_20, c_22)` with `c_22^{-beta}(c_22 - 1) > sqrt(d)` and
/// `c_22 = ((c_20 - 2) d^{-2})^{1/beta}`.
pub fn solve_c20(d: usize, beta: f64) -> (f64, f64) {
    assert!(d >= 2 && beta > 0.0 && beta < 1.0);
    let target = (d as f64).sqrt();
    let f = |c: f64| c.powf(-beta) * (c - 1.0);
    let (mut lo, mut hi) = (1.0f64, 2.0f64);
    while f(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c22 = hi * (1.0 + 1e-9);
    let c20 = 2.0 + (d * d) as f64 * c22.powf(beta);
    (c20, c22)
}

/// `c_21 = c_20 2^beta`, the constant obtained by chaining (37) into (38).
pub fn c21(d: usize, beta: f64) -> f64 {
    solve_c20(d, beta).0 * 2f64.powf(beta)
}

/// Outcome of the distance and depth inequalities at one site. `None` means the
/// inequality was not evaluated (censored `H`, or `x = z` for the second).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBounds {
    pub distance_bound: Option<bool>,
    pub depth_bound: Option<bool>,
    pub h_bound: Option<bool>,
}

pub fn depth_bounds(ray: &RayHandle, x: &Site, big_h: Censored, u: u32, c20: f64) -> DepthBounds {
    let z = ray.points[0];
    let dist = x.l1(&z) as f64;
    let distance_bound = big_h.is_exact().then(|| dist <= 2.0 * big_h.value() as f64);
    let n = ray.orientation.level(&x.sub(&z));
    let depth_bound = (n >= 1).then(|| u as f64 <= c20 * pow_beta(n as f64, ray.beta) + 1e-9);
    let c21 = c20 * 2f64.powf(ray.beta);
    let h_bound = (big_h.is_exact() && n >= 1).then(|| u as f64 <= c21 * pow_beta(big_h.value() as f64, ray.beta) + 1e-9);
    DepthBounds { distance_bound, depth_bound, h_bound }
}

/// All sites of `InsRay(z)` built from the first `upto` ray points.
pub fn tube_sites(ray: &RayHandle, upto: usize) -> Vec<Site> {
    let dim = ray.points[0].dim();
    let mut out = std::collections::HashSet::new();
    let mut balls: Vec<Vec<Site>> = Vec::new();
    for (n, p) in ray.points.iter().take(upto).enumerate() {
        let r = ball_radius(n as u64, ray.beta) as usize;
        while balls.len() <= r {
            balls.push(l1_ball_offsets(dim, balls.len() as u64));
        }
        for off in &balls[r] {
            out.insert(p.add(off));
        }
    }
    let mut v: Vec<Site> = out.into_iter().collect();
    v.sort();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::Orientation;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Random directed ray from the origin.
    pub(crate) fn random_ray(d: usize, len: usize, beta: f64, seed: u64, zeta: Orientation) -> RayHandle {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut pts = vec![Site::origin(d)];
        for _ in 1..len {
            let a = rng.gen_range(0..d);
            let last = *pts.last().unwrap();
            pts.push(last.step(zeta.dir(a)));
        }
        RayHandle {
            leaf: pts[0],
            forest: 1,
            orientation: zeta,
            leaf_certain: true,
            certain_len: len,
            window_len: len,
            points: pts,
            frontier: None,
            beta,
        }
    }

    fn straight_ray(d: usize, len: usize, beta: f64) -> RayHandle {
        let mut r = random_ray(d, 1, beta, 0, Orientation::Plus);
        r.extend_with(len, |x| x.step(Direction::pos(0)));
        r
    }

    #[test]
    fn v_at_leaf_takes_larger_index() {
        let ray = straight_ray(3, 10, 0.2);
        assert_eq!(v_and_n(&ray, &ray.points[0]).unwrap(), (0.0, 1));
    }

    #[test]
    fn v_on_ray_at_32() {
        let ray = straight_ray(2, 64, 0.2);
        let (v, n) = v_and_n(&ray, &ray.points[32]).unwrap();
        assert_eq!((v, n), (2.0, 32));
    }

    #[test]
    fn v_matches_enumeration() {
        for seed in 0..20 {
            let zeta = if seed % 2 == 0 { Orientation::Plus } else { Orientation::Minus };
            let ray = random_ray(3, 400, 0.3, seed, zeta);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..200 {
                let n = rng.gen_range(0..150);
                let off = Site::new(&[rng.gen_range(-3..=3), rng.gen_range(-3..=3), rng.gen_range(-3..=3)]);
                let x = ray.points[n].add(&off);
                assert_eq!(v_and_n(&ray, &x).unwrap(), crate::oracle::v_brute(&ray, &x), "{x}");
                assert_eq!(ins_ray_contains(&ray, &x).unwrap(), crate::oracle::contains_brute(&ray, &x));
            }
        }
    }

    #[test]
    fn u_matches_bounded_box_oracle() {
        for seed in 0..10 {
            let ray = random_ray(2, 300, 0.4, seed, Orientation::Plus);
            for n in (0..120).step_by(7) {
                for off in l1_ball_offsets(2, 4) {
                    let x = ray.points[n].add(&off);
                    assert_eq!(u_depth(&ray, &x).unwrap(), crate::oracle::u_brute(&ray, &x, 12), "{x}");
                }
            }
        }
    }

    #[test]
    fn u_zero_and_one() {
        let ray = straight_ray(2, 20, 0.2);
        assert_eq!(u_depth(&ray, &Site::new(&[-1, 0])).unwrap(), 0);
        // leaf has radius 0, and its backward neighbour is outside
        assert_eq!(u_depth(&ray, &ray.points[0]).unwrap(), 1);
    }

    #[test]
    fn exhausted_ray_names_depth() {
        let ray = straight_ray(2, 5, 0.2);
        let err = v_and_n(&ray, &Site::new(&[6, 0])).unwrap_err();
        assert!(matches!(err, GeomError::RayExhausted { have: 5, .. }));
    }

    #[test]
    fn drift_rules() {
        let ray = straight_ray(3, 2000, 0.1);
        let x = ray.points[1500];
        let (_, n) = v_and_n(&ray, &x).unwrap();
        let (r, s) = drift_directions(&ray, &x, n).unwrap();
        assert_eq!(r, s);
        // target differs only in coordinate 2 (index 1) by +3: radius at 1500 is 2, so use a wider beta
        let wide = {
            let mut r = straight_ray(3, 1, 0.5);
            r.extend_with(200, |x| x.step(Direction::pos(0)));
            r
        };
        let x = wide.points[100].add(&Site::new(&[0, -3, 0]));
        let (_, n) = v_and_n(&wide, &x).unwrap();
        assert_eq!(wide.points[n].sub(&x), Site::new(&[0, 3, 0]));
        let (_, s) = drift_directions(&wide, &x, n).unwrap();
        assert_eq!(s, Direction::pos(1));
        assert!(drift_directions(&wide, &Site::new(&[0, 50, 0]), 0).is_err());
    }

    #[test]
    fn c20_solver() {
        let (c20, c22) = solve_c20(3, 0.1);
        assert!((c22 - 2.94).abs() < 0.02 && (c20 - 12.0).abs() < 0.1, "{c20} {c22}");
        let f = c22.powf(-0.1) * (c22 - 1.0);
        assert!(f > 3f64.sqrt() && (f - 3f64.sqrt()).abs() < 1e-8);
        assert!((((c20 - 2.0) / 9.0).powf(10.0) - c22).abs() <= 1e-9 * c22);
        let (_, c22) = solve_c20(3, 1e-6);
        assert!((c22 - (1.0 + 3f64.sqrt())).abs() < 1e-3);
    }

    #[test]
    fn depth_bounds_on_random_rays_with_synthetic_h() {
        let (c20, _) = solve_c20(3, 0.1);
        for seed in 0..5 {
            let ray = random_ray(3, 3000, 0.1, seed, Orientation::Minus);
            for n in (0..2500).step_by(37) {
                for off in l1_ball_offsets(3, 2) {
                    let x = ray.points[n].add(&off);
                    let u = u_depth(&ray, &x).unwrap();
                    if u == 0 {
                        continue;
                    }
                    // h along the ray is at least the depth index, so H(x) >= the covering n
                    let l = depth_bounds(&ray, &x, Censored::Exact(n as u32 + 2), u, c20);
                    assert_ne!(l.distance_bound, Some(false));
                    assert_ne!(l.depth_bound, Some(false));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn v_below_u_and_lipschitz(seed in 0u64..1000, n in 0usize..200, dx in -3i64..=3, dy in -3i64..=3, dz in -3i64..=3, axis in 0usize..6) {
            let ray = random_ray(3, 260, 0.25, seed, Orientation::Plus);
            let x = ray.points[n].add(&Site::new(&[dx, dy, dz]));
            let g = ray_geom(&ray, &x).unwrap();
            prop_assert!(g.v <= g.u as f64 + 1e-12);
            prop_assert_eq!(g.u == 0, !crate::oracle::contains_brute(&ray, &x));
            let y = x.step(Direction::from_index(axis));
            let (vy, _) = v_and_n(&ray, &y).unwrap();
            prop_assert!((g.v - vy).abs() <= 1.0 + 1e-12);
            if let (Some(r), Some(s)) = (g.r, g.s) {
                let a = ray.points[g.n];
                prop_assert_eq!(a.step(r), ray.points[g.n + 1]);
                if x != a {
                    prop_assert_eq!(x.step(s).l1(&a) + 1, x.l1(&a));
                } else {
                    prop_assert_eq!(s, r);
                }
            }
        }
    }
}
