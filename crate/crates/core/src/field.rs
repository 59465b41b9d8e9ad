//! Model parameters and the heavy-tailed umbrella-length field `L`.

use crate::lattice::{check_dim, orthant_sphere_count, BoxRegion, Site, Window};
use crate::rng::{derive, site_uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use thiserror::Error;

/// Relative slack used when comparing parameter inequalities that hold with
/// equality for the presets (e.g. theta = d^d / gamma).
const PARAM_RTOL: f64 = 1e-12;

pub const DEFAULT_SITE_BUDGET: u64 = 1 << 27;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d: usize,
    pub n0: u32,
    pub theta: f64,
    pub gamma: f64,
    pub beta: f64,
    pub window: Window,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ParamViolation {
    #[error("dimension {0} unsupported")]
    Dimension(usize),
    #[error("n0 must be at least 2, got {0}")]
    N0(u32),
    #[error("n0^d >= theta fails: n0^d = {n0_pow}, theta = {theta}")]
    ThetaUpper { n0_pow: f64, theta: f64 },
    #[error("theta >= d^d / gamma fails: theta = {theta}, d^d/gamma = {bound}")]
    ThetaLower { theta: f64, bound: f64 },
    #[error("orthant sphere bound gamma n^(d-1) <= #positive l1 sphere fails at n = {n}: {lhs} > {count}")]
    OrthantBound { n: u64, lhs: f64, count: u128 },
    #[error("insulation exponent must satisfy 0 < beta < (d-2)/(2d) = {bound}, got {beta}")]
    Beta { beta: f64, bound: f64 },
    #[error("window dimension {got} does not match d = {expected}")]
    WindowDim { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid parameters: {0:?}")]
    Params(Vec<ParamViolation>),
    #[error(transparent)]
    Lattice(#[from] crate::lattice::LatticeError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad field dump: {0}")]
    Format(String),
}

impl ModelParams {
    /// Default constants: d=2 -> (3, 6, 2/3); d=3 -> (7, 90, 0.3) with beta 0.1.
    pub fn preset(d: usize, window: Window, seed: u64) -> Self {
        match d {
            2 => ModelParams { d, n0: 3, theta: 6.0, gamma: 2.0 / 3.0, beta: 0.2, window, seed },
            3 => ModelParams { d, n0: 7, theta: 90.0, gamma: 0.3, beta: 0.1, window, seed },
            _ => {
                // generic choice: gamma from the asymptotic orthant ratio, theta at its floor
                let gamma = 0.5 / (1..d).product::<usize>() as f64;
                let mut n0 = d as u32 + 1;
                let p = ModelParams { d, n0, theta: 0.0, gamma, beta: 0.25 * (d as f64 - 2.0) / (2.0 * d as f64), window, seed };
                let theta = (d as f64).powi(d as i32) / gamma;
                while (n0 as f64).powi(d as i32) < theta || !orthant_ok(d, n0, gamma) {
                    n0 += 1;
                }
                ModelParams { n0, theta, ..p }
            }
        }
    }

    /// Tail mass `theta n0^-d = P[L > n0]`.
    pub fn tail_mass(&self) -> f64 {
        self.theta * (self.n0 as f64).powi(-(self.d as i32))
    }

    pub fn validate(&self) -> Result<(), Vec<ParamViolation>> {
        validate_params(self)
    }
}

fn orthant_ok(d: usize, n0: u32, gamma: f64) -> bool {
    (n0 as u64..=n0 as u64 + 64).all(|n| gamma * (n as f64).powi(d as i32 - 1) <= orthant_sphere_count(d as u32, n) as f64 * (1.0 + PARAM_RTOL))
}

/// Checks every parameter constraint and returns the complete violation list.
pub fn validate_params(p: &ModelParams) -> Result<(), Vec<ParamViolation>> {
    let mut v = Vec::new();
    if check_dim(p.d).is_err() {
        v.push(ParamViolation::Dimension(p.d));
        return Err(v);
    }
    if p.window.dim() != p.d {
        v.push(ParamViolation::WindowDim { expected: p.d, got: p.window.dim() });
    }
    if p.n0 < 2 {
        v.push(ParamViolation::N0(p.n0));
    }
    let d = p.d as i32;
    let n0_pow = (p.n0 as f64).powi(d);
    if n0_pow < p.theta * (1.0 - PARAM_RTOL) {
        v.push(ParamViolation::ThetaUpper { n0_pow, theta: p.theta });
    }
    let dd = (p.d as f64).powi(d);
    if !(p.gamma > 0.0) || p.theta * p.gamma < dd * (1.0 - PARAM_RTOL) {
        v.push(ParamViolation::ThetaLower { theta: p.theta, bound: dd / p.gamma });
    }
    for n in p.n0 as u64..=p.n0 as u64 + 64 {
        let lhs = p.gamma * (n as f64).powi(d - 1);
        let count = orthant_sphere_count(p.d as u32, n);
        if lhs > count as f64 * (1.0 + PARAM_RTOL) {
            v.push(ParamViolation::OrthantBound { n, lhs, count });
            break;
        }
    }
    if p.d >= 3 {
        let bound = (p.d as f64 - 2.0) / (2.0 * p.d as f64);
        if !(p.beta > 0.0 && p.beta < bound) {
            v.push(ParamViolation::Beta { beta: p.beta, bound });
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Inverse-CDF map from a uniform `u` in (0,1) to `L`. Decreasing in `u`;
/// exact Pareto tail above `n0`, uniform on `(1, n0]` below.
pub fn l_from_uniform(u: f64, p: &ModelParams) -> f64 {
    let q = p.tail_mass();
    if u < q {
        (p.theta / u).powf(1.0 / p.d as f64)
    } else {
        1.0 + (p.n0 as f64 - 1.0) * (1.0 - u) / (1.0 - q)
    }
}

pub fn field_key(seed: u64) -> u64 {
    derive(seed, "umbrella-length")
}

pub fn sample_l(x: &Site, p: &ModelParams) -> f64 {
    l_from_uniform(site_uniform(field_key(p.seed), x), p)
}

/// Anything that can report `L` at a site; `None` means the site is not
/// covered (finite field outside its box).
pub trait FieldSource: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &Site) -> Option<f64>;
}

/// Field evaluated on demand at any site of Z^d.
#[derive(Clone, Copy, Debug)]
pub struct SiteField {
    pub params: ModelParams,
    key: u64,
}

impl SiteField {
    pub fn new(params: ModelParams) -> Self {
        SiteField { params, key: field_key(params.seed) }
    }
}

impl FieldSource for SiteField {
    fn dim(&self) -> usize {
        self.params.d
    }
    fn value(&self, x: &Site) -> Option<f64> {
        Some(l_from_uniform(site_uniform(self.key, x), &self.params))
    }
}

/// Field materialised on a box.
#[derive(Clone, Debug)]
pub struct LField {
    pub region: BoxRegion,
    pub seed: u64,
    pub values: Vec<f64>,
}

impl LField {
    pub fn get(&self, x: &Site) -> Option<f64> {
        self.region.index(x).map(|k| self.values[k])
    }

    /// Fraction of sites with `L > t`.
    pub fn tail_fraction(&self, t: f64) -> f64 {
        self.values.iter().filter(|&&v| v > t).count() as f64 / self.values.len() as f64
    }
}

impl FieldSource for LField {
    fn dim(&self) -> usize {
        self.region.dim()
    }
    fn value(&self, x: &Site) -> Option<f64> {
        self.get(x)
    }
}

pub fn generate_field(p: &ModelParams) -> Result<LField, FieldError> {
    generate_field_on(p, &p.window.outer(), DEFAULT_SITE_BUDGET)
}

/// Materialise `L` on an arbitrary box, refusing boxes above `budget` sites.
pub fn generate_field_on(p: &ModelParams, region: &BoxRegion, budget: u64) -> Result<LField, FieldError> {
    validate_params(p).map_err(FieldError::Params)?;
    let n = region.volume_checked(budget)?;
    let key = field_key(p.seed);
    let mut values = vec![0.0; n];
    let last = region.dim() - 1;
    let row = region.len(last);
    values.par_chunks_mut(row).enumerate().for_each(|(r, chunk)| {
        let mut s = region.site(r * row);
        for (k, v) in chunk.iter_mut().enumerate() {
            s.set(last, region.lo.get(last) + k as i64);
            *v = l_from_uniform(site_uniform(key, &s), p);
        }
    });
    Ok(LField { region: *region, seed: p.seed, values })
}

pub const FIELD_MAGIC: &[u8; 4] = b"UMBF";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn write_region<W: Write>(w: &mut W, r: &BoxRegion) -> io::Result<()> {
    for i in 0..r.dim() {
        w.write_all(&r.lo.get(i).to_le_bytes())?;
        w.write_all(&r.hi.get(i).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_region<R: Read>(r: &mut R, d: usize) -> Result<BoxRegion, FieldError> {
    let mut lo = Site::origin(d);
    let mut hi = Site::origin(d);
    for i in 0..d {
        lo.set(i, read_u64(r)? as i64);
        hi.set(i, read_u64(r)? as i64);
    }
    Ok(BoxRegion::new(lo, hi)?)
}

pub(crate) fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<usize, FieldError> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(FieldError::Format(format!("magic {:?}, expected {:?}", m, magic)));
    }
    let ver = read_u32(r)?;
    if ver != FORMAT_VERSION {
        return Err(FieldError::Format(format!("unsupported version {ver}")));
    }
    let d = read_u32(r)? as usize;
    check_dim(d)?;
    Ok(d)
}

impl LField {
    pub fn write_dump<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(FIELD_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.region.dim() as u32).to_le_bytes())?;
        write_region(w, &self.region)?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_dump<R: Read>(r: &mut R) -> Result<Self, FieldError> {
        let d = read_header(r, FIELD_MAGIC)?;
        let region = read_region(r, d)?;
        let seed = read_u64(r)?;
        let n = region.volume() as usize;
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let values = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(LField { region, seed, values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p2() -> ModelParams {
        ModelParams::preset(2, Window::cube(2, 8, 2).unwrap(), 11)
    }

    fn p3() -> ModelParams {
        ModelParams::preset(3, Window::cube(3, 4, 2).unwrap(), 11)
    }

    #[test]
    fn presets_validate() {
        assert_eq!(validate_params(&p2()), Ok(()));
        assert_eq!(validate_params(&p3()), Ok(()));
        let p4 = ModelParams::preset(4, Window::cube(4, 2, 1).unwrap(), 1);
        assert_eq!(validate_params(&p4), Ok(()));
    }

    #[test]
    fn orthant_bound_by_enumeration_d3() {
        // C(n-1,2) >= 0.3 n^2 from n = 7, and fails at n = 6
        for n in 7u64..200 {
            assert!(((n - 1) * (n - 2) / 2) as f64 >= 0.3 * (n * n) as f64, "n={n}");
        }
        assert!(10.0 < 0.3 * 36.0);
    }

    #[test]
    fn beta_violation_reported() {
        let p = ModelParams { beta: 0.2, ..p3() };
        let v = validate_params(&p).unwrap_err();
        assert!(matches!(v[0], ParamViolation::Beta { .. }));
    }

    #[test]
    fn all_violations_returned() {
        let p = ModelParams { beta: 0.5, theta: 1000.0, n0: 3, ..p3() };
        let v = validate_params(&p).unwrap_err();
        assert!(v.iter().any(|e| matches!(e, ParamViolation::ThetaUpper { .. })));
        assert!(v.iter().any(|e| matches!(e, ParamViolation::OrthantBound { .. })));
        assert!(v.iter().any(|e| matches!(e, ParamViolation::Beta { .. })));
    }

    #[test]
    fn inverse_cdf_examples() {
        let p = p2();
        assert!((l_from_uniform(1.0 / 6.0, &p) - 6.0).abs() < 1e-12);
        assert!((p.tail_mass() - 2.0 / 3.0).abs() < 1e-15);
        let near_one = l_from_uniform(1.0 - 1e-15, &p);
        assert!(near_one > 1.0 && near_one < 1.0 + 1e-12);
        // continuity at the branch point
        let q = p.tail_mass();
        assert!((l_from_uniform(q * (1.0 - 1e-14), &p) - 3.0).abs() < 1e-9);
        assert!((l_from_uniform(q, &p) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn margins_agree_and_seeds_differ() {
        let p = p2();
        let a = generate_field(&ModelParams { window: Window::cube(2, 8, 16).unwrap(), ..p }).unwrap();
        let b = generate_field(&ModelParams { window: Window::cube(2, 8, 32).unwrap(), ..p }).unwrap();
        for x in a.region.sites() {
            assert_eq!(a.get(&x), b.get(&x));
        }
        let c = generate_field(&ModelParams { seed: 12, window: Window::cube(2, 8, 16).unwrap(), ..p }).unwrap();
        let same = a.values.iter().zip(&c.values).filter(|(x, y)| x == y).count();
        assert!((same as f64) < 0.01 * a.values.len() as f64);
        assert!(a.values.iter().all(|&v| v > 1.0));
    }

    #[test]
    fn tail_fraction_concentrates() {
        let p = ModelParams { window: Window::cube(2, 1000, 0).unwrap(), ..p2() };
        let f = generate_field(&p).unwrap();
        let n = f.values.len() as f64;
        for t in [3.0, 6.0, 12.0] {
            let expect = p.theta * f64::powi(t, -2);
            let sd = (expect * (1.0 - expect) / n).sqrt();
            assert!((f.tail_fraction(t) - expect).abs() < 5.0 * sd, "t={t}");
        }
    }

    #[test]
    fn budget_enforced() {
        let p = p2();
        let r = BoxRegion::new(Site::splat(2, 0), Site::splat(2, 99)).unwrap();
        assert!(matches!(generate_field_on(&p, &r, 1000), Err(FieldError::Lattice(_))));
    }

    #[test]
    fn dump_roundtrip() {
        let f = generate_field(&p3()).unwrap();
        let mut buf = Vec::new();
        f.write_dump(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"UMBF");
        let g = LField::read_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(g.region, f.region);
        assert_eq!(g.values, f.values);
    }

    proptest! {
        #[test]
        fn inverse_cdf_monotone(a in 1e-12f64..1.0, b in 1e-12f64..1.0) {
            let p = p3();
            prop_assume!(a < b);
            prop_assert!(l_from_uniform(a, &p) > l_from_uniform(b, &p));
        }

        #[test]
        fn tail_branch_exact(u in 1e-15f64..0.26) {
            let p = p3();
            prop_assume!(u < p.tail_mass());
            let l = l_from_uniform(u, &p);
            prop_assert!((p.theta * l.powi(-3) - u).abs() <= 1e-12 * u);
        }

        #[test]
        fn site_addressable(x in -1000i64..1000, y in -1000i64..1000) {
            let p = p2();
            let s = Site::new(&[x, y]);
            prop_assert_eq!(SiteField::new(p).value(&s).unwrap(), sample_l(&s, &p));
        }
    }
}
