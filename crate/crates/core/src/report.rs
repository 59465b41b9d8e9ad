//! Versioned JSON run report. Serialization is canonical: maps are ordered and
//! floats use shortest round-trip formatting, so parse then serialize is the
//! identity on bytes.

use crate::metrics::TailEstimate;
use crate::pipeline::InvariantReport;
use crate::stats::MixingRow;
use crate::walker::TrapEstimate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report schema version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

impl Status {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantRow {
    pub name: String,
    pub status: Status,
    pub checked: u64,
    pub violations: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    /// Exact rational as `p/q`.
    pub c_1: Option<String>,
    pub c_20: Option<f64>,
    pub c_22: Option<f64>,
    pub c_31: Option<f64>,
    pub kappa: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTail {
    pub name: String,
    pub exponent: f64,
    pub rows: Vec<crate::metrics::TailRow>,
    pub slope_lo: Option<f64>,
    pub slope_hi: Option<f64>,
}

impl NamedTail {
    pub fn new(name: &str, t: &TailEstimate) -> Self {
        NamedTail {
            name: name.into(),
            exponent: t.exponent,
            rows: t.rows.clone(),
            slope_lo: t.fit_lo().ok().map(|f| f.slope),
            slope_hi: t.fit_hi().ok().map(|f| f.slope),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapRow {
    pub name: String,
    pub horizon: u32,
    pub replicas: u64,
    pub survived: u64,
    pub truncated: u64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub drift_q05: Option<f64>,
    pub drift_median: Option<f64>,
}

impl TrapRow {
    pub fn new(name: &str, horizon: u32, t: &TrapEstimate) -> Self {
        TrapRow {
            name: name.into(),
            horizon,
            replicas: t.replicas,
            survived: t.survived,
            truncated: t.truncated,
            wilson_lo: t.wilson.0,
            wilson_hi: t.wilson.1,
            drift_q05: t.drift_q05,
            drift_median: t.drift_median,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub params: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub constants: Constants,
    pub tails: Vec<NamedTail>,
    pub invariants: Vec<InvariantRow>,
    pub traps: Vec<TrapRow>,
    pub mixing: Vec<MixingRow>,
    pub censoring: BTreeMap<String, f64>,
}

impl Report {
    pub fn new(params: BTreeMap<String, String>) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            params,
            seeds: BTreeMap::new(),
            constants: Constants::default(),
            tails: Vec::new(),
            invariants: Vec::new(),
            traps: Vec::new(),
            mixing: Vec::new(),
            censoring: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self, ReportError> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let found = v.get("schema_version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(ReportError::Version { found, expected: SCHEMA_VERSION });
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn all_pass(&self) -> bool {
        self.invariants.iter().all(|r| r.status != Status::Fail)
    }
}

fn row(name: &str, checked: usize, violations: usize) -> InvariantRow {
    InvariantRow { name: name.into(), status: Status::from_bool(violations == 0), checked: checked as u64, violations: violations as u64 }
}

/// One row per exact invariant of an instance.
pub fn invariant_rows(r: &InvariantReport) -> Vec<InvariantRow> {
    let res = |name: &str, x: &Option<crate::environment::Residuals>| match x {
        Some(x) => row(name, x.evaluated, (x.evaluated > 0 && x.worst > 1e-9) as usize),
        None => InvariantRow { name: name.into(), status: Status::Skipped, checked: 0, violations: 0 },
    };
    vec![
        row("v_le_u", r.pairs, r.v_above_u),
        row("lipschitz_v", r.lipschitz_edges, r.lipschitz_violations),
        row("depth_bounds", r.depth_bounds_checked, r.depth_bounds_violations),
        row("certain_disjointness", 1, r.certain_overlaps),
        row("row_sums_and_min_entry", r.rows_checked, r.row_violations + (!r.min_entry_is_kappa) as usize),
        row("exit_chain", r.chains.certain, r.chains.chain_violations),
        row("depth_one_mass", r.chains.depth_one, r.chains.depth_one_violations),
        res("supermartingale_strict", &r.residuals),
        res("supermartingale_wide", &r.residuals_wide),
    ]
}
