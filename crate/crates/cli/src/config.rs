//! Flat `key=value` run configuration with command-line overrides.

use crate::error::CliError;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use umbrella_core::field::{validate_params, ModelParams};
use umbrella_core::lattice::Window;
use umbrella_core::metrics::ForestKind;
use umbrella_core::pipeline::InstanceConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixingTarget {
    Forest,
    Omega,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dim: usize,
    /// Core side of the instance window; for `tails` the side of each replica window.
    pub window: i64,
    pub margin: i64,
    /// `None` resolves to the preset for `dim`.
    pub beta: Option<f64>,
    pub seed: u64,
    pub replicas: u64,
    pub horizon: u32,
    pub band: i64,
    pub n_max: u32,
    pub depth: usize,
    pub u_min: u32,
    /// Interior sampling buffer for `tails`; `None` resolves to `window / 4`.
    pub buffer: Option<i64>,
    pub grid: Vec<u32>,
    pub shifts: Vec<u64>,
    pub kind: ForestKind,
    pub mixing_target: MixingTarget,
    pub mixing_radius: i64,
    pub mixing_offset: i64,
    pub max_box: i64,
    pub oracle_seeds: u64,
    pub threads: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dim: 3,
            window: 24,
            margin: 16,
            beta: None,
            seed: 1,
            replicas: 200,
            horizon: 10_000,
            band: 8,
            n_max: 128,
            depth: 60_000,
            u_min: 1,
            buffer: None,
            grid: vec![8, 16, 32, 64],
            shifts: vec![8, 16, 32, 64],
            kind: ForestKind::Umbrella,
            mixing_target: MixingTarget::Forest,
            mixing_radius: 256,
            mixing_offset: 4,
            max_box: 5,
            oracle_seeds: 1,
            threads: 0,
            out: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, value: &str) -> CliError {
    CliError::Config(format!("bad value for {key}: {value:?}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.trim().parse().map_err(|_| bad(key, v))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    let xs: Vec<T> = v.split(',').map(|s| num(key, s)).collect::<Result<_, _>>()?;
    if xs.is_empty() {
        return Err(bad(key, v));
    }
    Ok(xs)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "dim" => self.dim = num(key, v)?,
            "window" => self.window = num(key, v)?,
            "margin" => self.margin = num(key, v)?,
            "beta" => self.beta = Some(num(key, v)?),
            "seed" => self.seed = num(key, v)?,
            "replicas" => self.replicas = num(key, v)?,
            "horizon" => self.horizon = num(key, v)?,
            "band" => self.band = num(key, v)?,
            "n_max" => self.n_max = num(key, v)?,
            "depth" => self.depth = num(key, v)?,
            "u_min" => self.u_min = num(key, v)?,
            "buffer" => self.buffer = Some(num(key, v)?),
            "grid" => self.grid = list(key, v)?,
            "shifts" => self.shifts = list(key, v)?,
            "kind" => {
                self.kind = match v.trim() {
                    "umbrella" => ForestKind::Umbrella,
                    "example1" => ForestKind::Example1,
                    _ => return Err(bad(key, v)),
                }
            }
            "mixing_target" => {
                self.mixing_target = match v.trim() {
                    "forest" => MixingTarget::Forest,
                    "omega" => MixingTarget::Omega,
                    _ => return Err(bad(key, v)),
                }
            }
            "mixing_radius" => self.mixing_radius = num(key, v)?,
            "mixing_offset" => self.mixing_offset = num(key, v)?,
            "max_box" => self.max_box = num(key, v)?,
            "oracle_seeds" => self.oracle_seeds = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "out" => self.out = PathBuf::from(v.trim()),
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a config file: one `key=value` per line, `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Config(format!("{}:{}: expected key=value", path.display(), no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| ModelParams::preset(self.dim, Window::cube(self.dim, 2, 1).expect("preset window"), 0).beta)
    }

    pub fn buffer(&self) -> i64 {
        self.buffer.unwrap_or(self.window / 4)
    }

    pub fn instance(&self) -> InstanceConfig {
        InstanceConfig { d: self.dim, side: self.window, margin: self.margin, band: self.band, beta: self.beta(), n_max: self.n_max, seed: self.seed }
    }

    /// Model parameters of forest 1; the checks are shared by both forests.
    pub fn params(&self) -> Result<ModelParams, CliError> {
        Ok(self.instance().params(1)?)
    }

    /// Parameter constraints plus basic sanity of the pipeline switches.
    pub fn validate(&self) -> Result<ModelParams, CliError> {
        if self.window < 1 || self.margin < 1 || self.buffer() < 0 {
            return Err(CliError::Config(format!("need window >= 1, margin >= 1 and buffer >= 0 (window {}, margin {}, buffer {})", self.window, self.margin, self.buffer())));
        }
        if self.replicas == 0 || self.horizon == 0 || self.n_max == 0 {
            return Err(CliError::Config("replicas, horizon and n_max must be positive".into()));
        }
        let p = self.params()?;
        validate_params(&p).map_err(|v| CliError::Config(v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")))?;
        Ok(p)
    }

    /// Every resolved key. `out` and `threads` do not affect results.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let kind = match self.kind {
            ForestKind::Umbrella => "umbrella",
            ForestKind::Example1 => "example1",
        };
        let target = match self.mixing_target {
            MixingTarget::Forest => "forest",
            MixingTarget::Omega => "omega",
        };
        [
            ("dim", self.dim.to_string()),
            ("window", self.window.to_string()),
            ("margin", self.margin.to_string()),
            ("beta", self.beta().to_string()),
            ("seed", self.seed.to_string()),
            ("replicas", self.replicas.to_string()),
            ("horizon", self.horizon.to_string()),
            ("band", self.band.to_string()),
            ("n_max", self.n_max.to_string()),
            ("depth", self.depth.to_string()),
            ("u_min", self.u_min.to_string()),
            ("buffer", self.buffer().to_string()),
            ("grid", join(&self.grid)),
            ("shifts", join(&self.shifts)),
            ("kind", kind.to_string()),
            ("mixing_target", target.to_string()),
            ("mixing_radius", self.mixing_radius.to_string()),
            ("mixing_offset", self.mixing_offset.to_string()),
            ("max_box", self.max_box.to_string()),
            ("oracle_seeds", self.oracle_seeds.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// sha256 over the canonical `key=value` listing.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_map() {
            h.update(format!("{k}={v}\n"));
        }
        hex::encode(h.finalize())
    }
}
