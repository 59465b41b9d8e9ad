//! One function per subcommand. Pipeline stages read the dumps of earlier
//! stages through the manifest and rebuild nothing they can load.

use crate::config::{MixingTarget, RunConfig};
use crate::error::CliError;
use crate::manifest::OutDir;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use umbrella_core::environment::kappa;
use umbrella_core::field::{generate_field, LField};
use umbrella_core::forest::{build_forest, Forest, Orientation};
use umbrella_core::geometry::solve_c20;
use umbrella_core::metrics::{big_h_tail_exponent, compute_big_h, compute_h, tail_estimate, tail_run, theorem1_constant, TailRun};
use umbrella_core::mixing::{decay_check, forest_mixing, omega_mixing, DecayCheck};
use umbrella_core::oracle::{oracle_sweep, OracleReport};
use umbrella_core::pipeline::{invariant_suite, trapping, Instance, TrappingConfig};
use umbrella_core::pruning::{prune_pair, MembershipSummary};
use umbrella_core::report::{invariant_rows, InvariantRow, NamedTail, Report, Status, TrapRow};
use umbrella_core::rng::derive;
use umbrella_core::stats::{mixing_csv, MixingRow};
use umbrella_core::walker::walks_csv;

/// Result of a stage that ran to completion; `ok` is false on an invariant failure.
pub struct Outcome {
    pub ok: bool,
    pub summary: String,
}

fn done(summary: String) -> Outcome {
    Outcome { ok: true, summary }
}

fn read_json<T: for<'de> Deserialize<'de>>(out: &OutDir, name: &str, command: &'static str) -> Result<T, CliError> {
    Ok(serde_json::from_slice(&out.read(name, command)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub d: usize,
    pub gamma: f64,
    pub theta: f64,
    pub n0: u32,
    pub beta: f64,
    pub kappa: String,
    pub c_1: String,
    pub c_20: f64,
    pub c_22: f64,
}

pub fn constants(cfg: &RunConfig) -> Result<Constants, CliError> {
    let p = cfg.validate()?;
    let (c20, c22) = solve_c20(cfg.dim, p.beta);
    Ok(Constants {
        d: p.d,
        gamma: p.gamma,
        theta: p.theta,
        n0: p.n0,
        beta: p.beta,
        kappa: kappa(p.d).to_string(),
        c_1: theorem1_constant(p.d as u32).value.to_string(),
        c_20: c20,
        c_22: c22,
    })
}

pub fn validate(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let c = constants(cfg)?;
    out.write_json("constants.json", "validate", 1, &c)?;
    Ok(done(format!(
        "d={} gamma_{}={} theta_{}={} n_0={} beta={} kappa={} c_1={} c_20={:.6} c_22={:.6}",
        c.d, c.d, c.gamma, c.d, c.theta, c.n0, c.beta, c.kappa, c.c_1, c.c_20, c.c_22
    )))
}

fn field_name(i: u8) -> String {
    format!("field-{i}.bin")
}

fn forest_name(i: u8) -> String {
    format!("forest-{i}.bin")
}

pub fn gen(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let ic = cfg.instance();
    let mut csv = String::from("forest,sites,t,tail_fraction\n");
    for i in 1..=2u8 {
        let p = ic.params(i)?;
        let f = generate_field(&p)?;
        let mut buf = Vec::new();
        f.write_dump(&mut buf)?;
        out.write(&field_name(i), "gen", 1, &buf)?;
        for k in 0..4 {
            let t = (p.n0 as f64) * 2f64.powi(k);
            csv.push_str(&format!("{i},{},{t},{:.8e}\n", f.values.len(), f.tail_fraction(t)));
        }
    }
    out.write("field.csv", "gen", 1, csv.as_bytes())?;
    Ok(done(format!("two fields on a window of side {} with margin {}", cfg.window, cfg.margin)))
}

fn load_fields(out: &OutDir) -> Result<[LField; 2], CliError> {
    let f = |i| LField::read_dump(&mut out.read(&field_name(i), "gen")?.as_slice()).map_err(CliError::from);
    Ok([f(1)?, f(2)?])
}

fn load_forests(cfg: &RunConfig, out: &OutDir) -> Result<[Forest; 2], CliError> {
    let f = |i| -> Result<Forest, CliError> {
        let mut forest = Forest::read_dump(&mut out.read(&forest_name(i), "forest")?.as_slice())?;
        forest.radius = cfg.margin;
        Ok(forest)
    };
    Ok([f(1)?, f(2)?])
}

pub fn forest(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let fields = load_fields(out)?;
    let w = cfg.instance().window()?;
    let mut csv = String::from("forest,orientation,uncertain_fraction,axis,frequency\n");
    for (k, (field, zeta)) in fields.iter().zip([Orientation::Plus, Orientation::Minus]).enumerate() {
        let (f, _) = build_forest(field, &field.region, &w, zeta, cfg.margin)?;
        let mut buf = Vec::new();
        f.write_dump(&mut buf)?;
        out.write(&forest_name(k as u8 + 1), "forest", 1, &buf)?;
        for (a, q) in f.axis_frequencies().iter().enumerate() {
            csv.push_str(&format!("{},{},{:.8e},{},{:.8e}\n", k + 1, zeta.sign(), f.uncertain_fraction(), a + 1, q));
        }
    }
    out.write("forest.csv", "forest", 1, csv.as_bytes())?;
    Ok(done("forests 1 (+) and 2 (-) built".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsOut {
    pub tails: Vec<NamedTail>,
    pub censoring: BTreeMap<String, f64>,
}

pub fn metrics(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let forests = load_forests(cfg, out)?;
    let d = cfg.dim as f64;
    let mut m = MetricsOut { tails: Vec::new(), censoring: BTreeMap::new() };
    for (k, f) in forests.iter().enumerate() {
        let h = compute_h(f);
        let big_h = compute_big_h(&h, cfg.beta());
        let th = tail_estimate(h.values_in(&f.region), &cfg.grid, d - 1.0)?;
        let tb = tail_estimate(big_h.values_in(&f.region), &cfg.grid, big_h_tail_exponent(cfg.dim, cfg.beta()))?;
        out.write(&format!("metrics-h-{}.csv", k + 1), "metrics", 1, th.to_csv().as_bytes())?;
        out.write(&format!("metrics-H-{}.csv", k + 1), "metrics", 1, tb.to_csv().as_bytes())?;
        m.tails.push(NamedTail::new(&format!("h_{}", k + 1), &th));
        m.tails.push(NamedTail::new(&format!("H_{}", k + 1), &tb));
        m.censoring.insert(format!("h_{}", k + 1), h.censored_fraction());
        m.censoring.insert(format!("H_{}", k + 1), big_h.censored_fraction());
    }
    out.write_json("metrics.json", "metrics", 1, &m)?;
    let cens: Vec<String> = m.censoring.iter().map(|(k, v)| format!("{k}:{v:.3}")).collect();
    Ok(done(format!("h and H tails on the window; censored fractions {}", cens.join(" "))))
}

pub fn prune(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let [f1, f2] = load_forests(cfg, out)?;
    let pair = prune_pair(&f1, &f2, cfg.beta(), cfg.band);
    let mem = pair.membership();
    let mut buf = Vec::new();
    mem.write_dump(&mut buf)?;
    out.write("membership.bin", "prune", 1, &buf)?;
    let s = pair.summary();
    let mut csv = String::from("layer,certain_in_fraction,unknown_fraction\n");
    for (name, v) in &s.certain_in_fraction {
        csv.push_str(&format!("{name},{v:.8e},{:.8e}\n", s.unknown_fraction[name]));
    }
    out.write("prune.csv", "prune", 1, csv.as_bytes())?;
    out.write_json("prune.json", "prune", 1, &s)?;
    let ok = s.overlap_count == 0;
    Ok(Outcome { ok, summary: format!("leaves {} / {}, certain overlaps {}", s.leaf_count_1, s.leaf_count_2, s.overlap_count) })
}

/// The instance rebuilt from the field, forest and membership dumps.
fn load_instance(cfg: &RunConfig, out: &OutDir) -> Result<Instance, CliError> {
    let ic = cfg.instance();
    let fields = load_fields(out)?;
    let forests = load_forests(cfg, out)?;
    let pair = prune_pair(&forests[0], &forests[1], ic.beta, ic.band);
    let mut buf = Vec::new();
    pair.membership().write_dump(&mut buf)?;
    if buf != out.read("membership.bin", "prune")? {
        return Err(CliError::Inconsistent("membership.bin does not match the forest dumps".into()));
    }
    Ok(Instance { config: ic, params: [ic.params(1)?, ic.params(2)?], fields, forests, pair })
}

pub fn env(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let inst = load_instance(cfg, out)?;
    let (rep, table, env) = invariant_suite(&inst, None)?;
    let mut buf = Vec::new();
    env.write_dump(&mut buf)?;
    out.write("env.bin", "env", 1, &buf)?;
    out.write_json("env.json", "env", 1, &env.manifest(&table, cfg.beta()))?;
    let rows = invariant_rows(&rep);
    let mut csv = String::from("invariant,status,checked,violations\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.name, serde_json::to_value(r.status)?.as_str().unwrap_or(""), r.checked, r.violations));
    }
    out.write("invariants.csv", "env", 1, csv.as_bytes())?;
    out.write_json("invariants.json", "env", 1, &rows)?;
    let v = rep.violations();
    Ok(Outcome { ok: v == 0, summary: format!("c_31 = {}, {} (ray, site) pairs, {v} invariant violations", env.c31, rep.pairs) })
}

pub fn walk(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let inst = load_instance(cfg, out)?;
    let dump = out.read("env.bin", "env")?;
    let (_, _, env) = invariant_suite(&inst, None)?;
    let mut buf = Vec::new();
    env.write_dump(&mut buf)?;
    if buf != dump {
        return Err(CliError::Inconsistent("env.bin does not match the environment rebuilt from the instance dumps".into()));
    }
    let tc = TrappingConfig { depth: cfg.depth, horizon: cfg.horizon, replicas: cfg.replicas, u_min: cfg.u_min, seed: derive(cfg.seed, "walk") };
    let res = trapping(&inst, &env, &tc)?;
    let mut rows = Vec::new();
    let mut parts = Vec::new();
    for t in &res {
        rows.push(TrapRow::new(&format!("patched_{}", t.forest), cfg.horizon, &t.patched));
        rows.push(TrapRow::new(&format!("uniform_{}", t.forest), cfg.horizon, &t.uniform));
        out.write(&format!("walks-{}.csv", t.forest), "walk", 1, walks_csv(&t.patched.traces).as_bytes())?;
        parts.push(format!("i={}: survived {}/{} (uniform {})", t.forest, t.patched.survived, t.patched.replicas, t.uniform.survived));
    }
    out.write_json("walk.json", "walk", 1, &rows)?;
    Ok(done(parts.join("; ")))
}

pub fn tails(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    if 2 * cfg.buffer() >= cfg.window {
        return Err(CliError::Config(format!("tails needs 2*buffer < window (buffer {}, window {})", cfg.buffer(), cfg.window)));
    }
    let run = TailRun {
        d: cfg.dim,
        side: cfg.window,
        margin: cfg.margin,
        buffer: cfg.buffer(),
        replicas: cfg.replicas,
        seed: derive(cfg.seed, "tails"),
        kind: cfg.kind,
        grid: cfg.grid.clone(),
    };
    let t = tail_run(&run)?.estimate(cfg.dim as f64 - 1.0)?;
    out.write("tails.csv", "tails", 1, t.to_csv().as_bytes())?;
    let named = NamedTail::new("h_tails", &t);
    out.write_json("tails.json", "tails", 1, &named)?;
    let slope = |s: Option<f64>| s.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    Ok(done(format!("slope lo {} hi {}", slope(named.slope_lo), slope(named.slope_hi))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingOut {
    pub rows: Vec<MixingRow>,
    pub decay: DecayCheck,
}

pub fn mixing(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let seed = derive(cfg.seed, "mixing");
    let rows = match cfg.mixing_target {
        MixingTarget::Forest => forest_mixing(cfg.dim, &cfg.shifts, cfg.replicas as usize, seed, cfg.mixing_radius, None)?,
        MixingTarget::Omega => omega_mixing(cfg.dim, cfg.window, cfg.mixing_offset, &cfg.shifts, cfg.replicas as usize, seed)?,
    };
    out.write("mixing.csv", "mixing", 1, mixing_csv(&rows).as_bytes())?;
    let decay = decay_check(&rows);
    let summary = format!("decreasing {}, max scaled ratio {:.3}", decay.decreasing, decay.max_ratio);
    out.write_json("mixing.json", "mixing", 1, &MixingOut { rows, decay })?;
    Ok(done(summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOut {
    pub max_box: i64,
    pub per_dim: BTreeMap<usize, OracleReport>,
    pub dp_tolerance: f64,
}

pub const DP_TOLERANCE: f64 = 1e-12;

pub fn oracle(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let mut per_dim = BTreeMap::new();
    for d in 2..=3 {
        per_dim.insert(d, oracle_sweep(d, cfg.max_box, cfg.oracle_seeds, cfg.beta())?);
    }
    let mism: usize = per_dim.values().map(|r| r.mismatches()).sum();
    let err = per_dim.values().map(|r| r.dp_max_error).fold(0.0, f64::max);
    let boxes: usize = per_dim.values().map(|r| r.boxes).sum();
    out.write_json("oracle.json", "oracle", 1, &OracleOut { max_box: cfg.max_box, per_dim, dp_tolerance: DP_TOLERANCE })?;
    Ok(Outcome { ok: mism == 0 && err <= DP_TOLERANCE, summary: format!("{boxes} boxes, {mism} mismatches, DP max error {err:.2e}") })
}

pub fn report(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let mut r = Report::new(cfg.to_map());
    r.seeds.insert("root".into(), cfg.seed);
    for (tag, name) in [("forest-1", "forest_1"), ("forest-2", "forest_2"), ("tails", "tails"), ("walk", "walk"), ("mixing", "mixing")] {
        r.seeds.insert(name.into(), derive(cfg.seed, tag));
    }
    let c = constants(cfg)?;
    r.constants.c_1 = Some(c.c_1);
    r.constants.c_20 = Some(c.c_20);
    r.constants.c_22 = Some(c.c_22);
    r.constants.kappa = Some(c.kappa);
    let rows: Vec<InvariantRow> = read_json(out, "invariants.json", "env")?;
    r.invariants = rows;
    let env: umbrella_core::environment::EnvManifest = read_json(out, "env.json", "env")?;
    r.constants.c_31 = Some(env.c_31);
    if out.has("prune.json") {
        let s: MembershipSummary = read_json(out, "prune.json", "prune")?;
        r.invariants.push(InvariantRow { name: "prune_certain_overlap".into(), status: Status::from_bool(s.overlap_count == 0), checked: 1, violations: s.overlap_count as u64 });
        for (k, v) in s.unknown_fraction {
            r.censoring.insert(format!("unknown_{k}"), v);
        }
    }
    if out.has("metrics.json") {
        let m: MetricsOut = read_json(out, "metrics.json", "metrics")?;
        r.tails.extend(m.tails);
        r.censoring.extend(m.censoring);
    }
    if out.has("tails.json") {
        r.tails.push(read_json(out, "tails.json", "tails")?);
    }
    if out.has("walk.json") {
        r.traps = read_json(out, "walk.json", "walk")?;
    }
    if out.has("mixing.json") {
        let m: MixingOut = read_json(out, "mixing.json", "mixing")?;
        r.mixing = m.rows;
    }
    if out.has("oracle.json") {
        let o: OracleOut = read_json(out, "oracle.json", "oracle")?;
        for (d, rep) in o.per_dim {
            let bad = rep.mismatches() + (rep.dp_max_error > o.dp_tolerance) as usize;
            r.invariants.push(InvariantRow { name: format!("oracle_d{d}"), status: Status::from_bool(bad == 0), checked: rep.sites as u64, violations: bad as u64 });
        }
    }
    let text = r.to_json()?;
    if Report::from_json(&text)? != r {
        return Err(CliError::Inconsistent("report does not round-trip".into()));
    }
    out.write("report.json", "report", 1, text.as_bytes())?;
    let failing: Vec<&str> = r.invariants.iter().filter(|x| x.status == Status::Fail).map(|x| x.name.as_str()).collect();
    Ok(Outcome { ok: r.all_pass(), summary: format!("{} invariant rows, failing {:?}", r.invariants.len(), failing) })
}

