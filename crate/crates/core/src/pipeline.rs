//! End-to-end construction of one instance: two independent fields, the two
//! oppositely oriented forests, pruning, insulated rays and the patched
//! environment.

use crate::environment::{
    check_chains, choose_c31, exit_table, extend_rays, patch, supermartingale_residuals, ChainCheck, EnvError, ExitConfig, ExitTable, PairRecord,
    PatchRule, PatchedEnv, Residuals,
};
use crate::field::{generate_field, FieldError, LField, ModelParams, SiteField};
use crate::forest::{build_forest, Forest, ForestError, LazyForest, Orientation};
use crate::geometry::{c21, depth_bounds, solve_c20, v_and_n, GeomError};
use crate::lattice::{Direction, LatticeError, Window};
use crate::pruning::{prune_pair, PrunedPair, RayHandle};
use crate::rng::derive;
use crate::walker::{deep_start, trap_probability, Composite, RayEnv, TrapEstimate, Uniform, WalkError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error("forest {0} has no ray from a certain leaf")]
    NoRay(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub d: usize,
    /// Side of the analysed core.
    pub side: i64,
    /// Field margin around the core; also the umbrella truncation radius.
    pub margin: i64,
    /// Depth from the outflow faces within which undecided pruning states are accepted.
    pub band: i64,
    pub beta: f64,
    pub n_max: u32,
    pub seed: u64,
}

impl InstanceConfig {
    pub fn preset(d: usize, side: i64, seed: u64) -> Self {
        let beta = ModelParams::preset(d, Window::cube(d, 2, 1).unwrap(), 0).beta;
        InstanceConfig { d, side, margin: 16, band: 8, beta, n_max: 256, seed }
    }

    pub fn window(&self) -> Result<Window, LatticeError> {
        Window::cube(self.d, self.side, self.margin)
    }

    /// Parameters of forest `i` (1 or 2); the fields are independent.
    pub fn params(&self, i: u8) -> Result<ModelParams, LatticeError> {
        let w = self.window()?;
        let mut p = ModelParams::preset(self.d, w, derive(self.seed, if i == 1 { "forest-1" } else { "forest-2" }));
        p.beta = self.beta;
        Ok(p)
    }
}

pub struct Instance {
    pub config: InstanceConfig,
    pub params: [ModelParams; 2],
    pub fields: [LField; 2],
    pub forests: [Forest; 2],
    pub pair: PrunedPair,
}

pub fn build_instance(cfg: &InstanceConfig) -> Result<Instance, PipelineError> {
    let w = cfg.window()?;
    let params = [cfg.params(1)?, cfg.params(2)?];
    let fields = [generate_field(&params[0])?, generate_field(&params[1])?];
    let (f1, _) = build_forest(&fields[0], &fields[0].region, &w, Orientation::Plus, cfg.margin)?;
    let (f2, _) = build_forest(&fields[1], &fields[1].region, &w, Orientation::Minus, cfg.margin)?;
    let pair = prune_pair(&f1, &f2, cfg.beta, cfg.band);
    Ok(Instance { config: *cfg, params, fields, forests: [f1, f2], pair })
}

impl Instance {
    /// Window rays of both forests, extended lazily far enough for the exit DP.
    pub fn rays(&self) -> Vec<RayHandle> {
        let mut rays: Vec<RayHandle> = self.pair.ins.iter().flat_map(|ins| ins.rays.iter().cloned()).collect();
        let s1 = SiteField::new(self.params[0]);
        let s2 = SiteField::new(self.params[1]);
        let l1 = LazyForest::new(&s1, Orientation::Plus, self.config.margin);
        let l2 = LazyForest::new(&s2, Orientation::Minus, self.config.margin);
        extend_rays(&mut rays, [&l1, &l2], &self.forests[0].region, self.config.n_max);
        rays
    }

    pub fn exit_table(&self) -> Result<ExitTable, PipelineError> {
        let cfg = ExitConfig { n_max: self.config.n_max, c31_floor: c21(self.config.d, self.config.beta).max(1.0), state_budget: 1 << 24 };
        Ok(exit_table(self.rays(), self.forests[0].region, [&self.pair.big_h[0], &self.pair.big_h[1]], cfg)?)
    }
}

/// Calibrate `c_31` on a table and patch.
pub fn calibrate_and_patch(t: &ExitTable) -> Result<(f64, PatchedEnv), PipelineError> {
    let sample: Vec<&PairRecord> = t.pairs.iter().collect();
    let c31 = choose_c31(&sample, &t.candidates, t.config.n_max, kappa_f64(t.region.dim()))?;
    Ok((c31, patch(t, c31, PatchRule::Argmin)))
}

pub fn kappa_f64(d: usize) -> f64 {
    let k = crate::environment::kappa(d);
    *k.numer() as f64 / *k.denom() as f64
}

/// Violation counts of the exact invariant suite on one instance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub pairs: usize,
    pub v_above_u: usize,
    pub lipschitz_edges: usize,
    pub lipschitz_violations: usize,
    pub depth_bounds_checked: usize,
    pub depth_bounds_violations: usize,
    pub certain_overlaps: usize,
    pub rows_checked: usize,
    pub row_violations: usize,
    pub min_entry_is_kappa: bool,
    pub chains: ChainCheck,
    pub residuals: Option<Residuals>,
    /// Same one-step inequality at every chosen site with `u >= 2`.
    pub residuals_wide: Option<Residuals>,
    pub c31: f64,
}

impl InvariantReport {
    pub fn violations(&self) -> usize {
        self.v_above_u
            + self.lipschitz_violations
            + self.depth_bounds_violations
            + self.certain_overlaps
            + self.row_violations
            + self.chains.chain_violations
            + self.chains.depth_one_violations
            + self.residuals.as_ref().map_or(0, |r| (r.worst > 1e-9) as usize)
            + self.residuals_wide.as_ref().map_or(0, |r| (r.worst > 1e-9) as usize)
    }
}

/// Run every exact invariant on one instance. `c31` overrides calibration.
pub fn invariant_suite(inst: &Instance, c31: Option<f64>) -> Result<(InvariantReport, ExitTable, PatchedEnv), PipelineError> {
    let t = inst.exit_table()?;
    let (c31, env) = match c31 {
        Some(c) => (c, patch(&t, c, PatchRule::Argmin)),
        None => calibrate_and_patch(&t)?,
    };
    let d = inst.config.d;
    let (c20, _) = solve_c20(d, inst.config.beta);
    let mut rep = InvariantReport { c31, certain_overlaps: inst.pair.disjoint.certain_overlaps, ..Default::default() };
    for p in &t.pairs {
        rep.pairs += 1;
        let ray = &t.rays[p.ray as usize];
        if p.geom.v > p.geom.u as f64 + 1e-12 {
            rep.v_above_u += 1;
        }
        for k in 0..2 * d {
            let y = p.site.step(Direction::from_index(k));
            let (vy, _) = v_and_n(ray, &y)?;
            rep.lipschitz_edges += 1;
            if (vy - p.geom.v).abs() > 1.0 + 1e-12 {
                rep.lipschitz_violations += 1;
            }
        }
        if p.certain() {
            let l = depth_bounds(ray, &p.site, p.big_h, p.geom.u, c20);
            rep.depth_bounds_checked += 1;
            if l.distance_bound == Some(false) || l.depth_bound == Some(false) {
                rep.depth_bounds_violations += 1;
            }
        }
    }
    let kap = crate::environment::kappa(d);
    let mut global_min = None;
    for kind in &env.rows {
        let row = kind.row(d);
        rep.rows_checked += 1;
        if row.sum() != num_rational::Ratio::from_integer(1) || row.min() < kap {
            rep.row_violations += 1;
        }
        global_min = Some(global_min.map_or(row.min(), |m: crate::environment::Prob| m.min(row.min())));
    }
    rep.min_entry_is_kappa = global_min == Some(kap);
    rep.chains = check_chains(&t, c31);
    rep.residuals = Some(supermartingale_residuals(&env, kappa_f64(d), 0));
    rep.residuals_wide = Some(supermartingale_residuals(&env, f64::INFINITY, 2));
    Ok((rep, t, env))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrappingConfig {
    /// Ray index of the start site `alpha^depth(z)`.
    pub depth: usize,
    pub horizon: u32,
    pub replicas: u64,
    pub u_min: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trapping {
    pub forest: u8,
    pub start: crate::lattice::Site,
    pub patched: TrapEstimate,
    /// Same start and seeds in the uniform environment.
    pub uniform: TrapEstimate,
}

/// Survival in `InsRay(z)` for the longest certain-leaf ray of each forest.
/// Inside the window the walk uses the patched environment, outside it the
/// single-ray environment of `z`, continued lazily on the same field.
pub fn trapping(inst: &Instance, env: &PatchedEnv, cfg: &TrappingConfig) -> Result<[Trapping; 2], PipelineError> {
    let mut out = Vec::new();
    for i in 0..2 {
        let mut ray = inst.pair.ins[i]
            .rays
            .iter()
            .filter(|r| r.leaf_certain)
            .max_by_key(|r| (r.certain_len, std::cmp::Reverse(r.leaf)))
            .ok_or(PipelineError::NoRay(i as u8 + 1))?
            .clone();
        let sf = SiteField::new(inst.params[i]);
        let lazy = LazyForest::new(&sf, ray.orientation, inst.config.margin);
        ray.extend_lazy(&lazy, cfg.depth + cfg.horizon as usize + 64);
        let start = deep_start(&ray, cfg.depth, cfg.u_min)?;
        let comp = Composite { inner: env, outer: RayEnv { ray: &ray } };
        let seed = derive(cfg.seed, if i == 0 { "trap-1" } else { "trap-2" });
        let patched = trap_probability(&comp, &ray, start, cfg.horizon, cfg.replicas, seed)?;
        let uniform = trap_probability(&Uniform, &ray, start, cfg.horizon, cfg.replicas, seed)?;
        out.push(Trapping { forest: i as u8 + 1, start, patched, uniform });
    }
    let b = out.pop().expect("two forests");
    let a = out.pop().expect("two forests");
    Ok([a, b])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_instance_has_no_violations() {
        let cfg = InstanceConfig { side: 20, n_max: 128, ..InstanceConfig::preset(3, 20, 5) };
        let inst = build_instance(&cfg).unwrap();
        let (rep, t, env) = invariant_suite(&inst, None).unwrap();
        assert!(rep.pairs > 0, "{rep:?}");
        assert_eq!(rep.violations(), 0, "{rep:?}");
        assert!(t.pairs.iter().all(|p| p.geom.u >= 1));
        assert_eq!(env.rows.len(), inst.forests[0].region.volume() as usize);
    }

    #[test]
    fn capped_horizon_breaks_only_the_widened_residual() {
        // most horizons saturate at n_max = 64; the widened check is not implied there
        let cfg = InstanceConfig { side: 20, n_max: 64, ..InstanceConfig::preset(3, 20, 5) };
        let (rep, _, _) = invariant_suite(&build_instance(&cfg).unwrap(), None).unwrap();
        let wide = rep.residuals_wide.as_ref().unwrap();
        assert!(wide.worst > 1e-9, "{wide:?}");
        assert_eq!(rep.violations(), 1);
        assert!(rep.residuals.as_ref().unwrap().worst <= 1e-9 || rep.residuals.as_ref().unwrap().evaluated == 0);
    }
}
