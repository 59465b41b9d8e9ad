//! Block covariance measurements for the forest and environment functionals.

use crate::field::{ModelParams, SiteField};
use crate::forest::{LazyForest, Orientation};
use crate::lattice::{Site, Window};
use crate::pipeline::{build_instance, InstanceConfig, PipelineError};
use crate::pruning::Tri;
use crate::rng::{derive, derive_index};
use crate::stats::{mixing_table, MixingRow, StatsError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MixingError {
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("shift {shift} does not fit a window of side {side} with offset {offset}")]
    ShiftTooLarge { shift: u64, side: i64, offset: i64 },
}

/// Shift of l1 norm `s` spread as evenly as possible over the axes.
pub fn shift_vector(d: usize, s: u64) -> Site {
    let mut v = Site::origin(d);
    for i in 0..d {
        v.set(i, (s as i64 + (d - 1 - i) as i64) / d as i64);
    }
    v
}

/// `s` times the last unit vector: both blocks then lie on side 1 of the same
/// umbrellas, the direction of strongest dependence.
pub fn axis_shift(d: usize, s: u64) -> Site {
    let mut v = Site::origin(d);
    v.set(d - 1, s as i64);
    v
}

/// `cov(1{a(0) = e_1}, 1{a(s) = e_1})` for the umbrella forest on the whole
/// lattice, umbrellas truncated at radius `r`, shifts along the last axis.
pub fn forest_mixing(d: usize, shifts: &[u64], replicas: usize, seed: u64, r: i64, min_width: Option<f64>) -> Result<Vec<MixingRow>, MixingError> {
    let base = ModelParams::preset(d, Window::cube(d, 2, 1).expect("small window"), seed);
    let key = derive(seed, "mixing-forest");
    let o = Site::origin(d);
    let targets: Vec<Site> = shifts.iter().map(|&s| axis_shift(d, s)).collect();
    let samples: Vec<(f64, Vec<f64>)> = (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let field = SiteField::new(ModelParams { seed: derive_index(key, k), ..base });
            let lazy = LazyForest::new(&field, Orientation::Plus, r);
            let f = |x: &Site| (lazy.parent_axis(x).0 == 0) as u8 as f64;
            (f(&o), targets.iter().map(|t| f(t)).collect())
        })
        .collect();
    table("forest", "a(x)=e_1", shifts, &samples, min_width)
}

/// `cov(1{omega(o) non-uniform}, 1{omega(o + s) non-uniform})` on independent
/// `d`-dimensional instances of side `side`; `omega(x)` is non-uniform exactly
/// on the insulated rays.
pub fn omega_mixing(d: usize, side: i64, offset: i64, shifts: &[u64], replicas: usize, seed: u64) -> Result<Vec<MixingRow>, MixingError> {
    let o = Site::splat(d, offset);
    for &s in shifts {
        let t = o.add(&shift_vector(d, s));
        if (0..d).any(|i| t.get(i) >= side - offset.min(side)) {
            return Err(MixingError::ShiftTooLarge { shift: s, side, offset });
        }
    }
    let key = derive(seed, "mixing-omega");
    let targets: Vec<Site> = shifts.iter().map(|&s| o.add(&shift_vector(d, s))).collect();
    let samples: Vec<(f64, Vec<f64>)> = (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let cfg = InstanceConfig::preset(d, side, derive_index(key, k));
            let inst = build_instance(&cfg)?;
            let f = |x: &Site| inst.pair.ins.iter().any(|ins| ins.c.get(x) == Some(Tri::In)) as u8 as f64;
            Ok((f(&o), targets.iter().map(|t| f(t)).collect()))
        })
        .collect::<Result<_, PipelineError>>()?;
    table("omega", "omega(x)!=uniform", shifts, &samples, None)
}

fn table(target: &str, functional: &str, shifts: &[u64], samples: &[(f64, Vec<f64>)], min_width: Option<f64>) -> Result<Vec<MixingRow>, MixingError> {
    let f0: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let fs: Vec<Vec<f64>> = (0..shifts.len()).map(|j| samples.iter().map(|s| s.1[j]).collect()).collect();
    let gamma = if target == "forest" { 1.0 } else { 1.0 / 13.0 };
    Ok(mixing_table(target, functional, shifts, &f0, &fs, &[gamma], min_width)?)
}

/// Decay verdict over a table with one row per shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayCheck {
    /// `|cov|` nonincreasing along the grid, adjacent pairs with overlapping intervals excepted.
    pub decreasing: bool,
    /// `max_s |s|^gamma |cov|` divided by its value at the first shift.
    pub max_ratio: f64,
    /// `max_s |s|^gamma |cov|`.
    pub max_scaled: f64,
}

pub fn decay_check(rows: &[MixingRow]) -> DecayCheck {
    let decreasing = rows.windows(2).all(|w| {
        let (a, b) = (w[0].cov.abs(), w[1].cov.abs());
        b <= a || (b - w[1].ci) <= (a + w[0].ci)
    });
    let max_scaled = rows.iter().map(|r| r.s_pow_gamma_cov).fold(0.0, f64::max);
    let first = rows.first().map_or(0.0, |r| r.s_pow_gamma_cov);
    let max_ratio = if first > 0.0 { max_scaled / first } else { f64::INFINITY };
    DecayCheck { decreasing, max_ratio, max_scaled }
}
