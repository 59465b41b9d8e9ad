use std::path::Path;
use std::process::{Command, Output};
use umbrella_core::report::Report;

const SMALL: &str = "replicas=20\nhorizon=500\ndepth=2000\nwindow=16\n";

fn umbrella(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_umbrella")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pipeline(dir: &Path) {
    std::fs::write(dir.join("run.cfg"), SMALL).unwrap();
    for stage in ["validate", "gen", "forest", "metrics", "prune", "env", "walk", "report"] {
        let o = umbrella(dir, &[stage, "--config", "run.cfg"]);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
}

#[test]
fn validate_prints_resolved_constants() {
    let dir = tempfile::tempdir().unwrap();
    let o = umbrella(dir.path(), &["validate"]);
    assert_eq!(code(&o), 0);
    let s = String::from_utf8(o.stdout).unwrap();
    for part in ["gamma_3=0.3", "theta_3=90", "n_0=7", "beta=0.1", "kappa=1/100", "c_1=1/6"] {
        assert!(s.contains(part), "{part} missing from {s}");
    }
    let o = umbrella(dir.path(), &["validate", "--dim", "2", "--out", "d2"]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("c_1=1/4"));
}

#[test]
fn full_pipeline_is_reproducible_and_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let ma = std::fs::read(a.path().join("out/manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.path().join("out/manifest.json")).unwrap());
    for f in ["field-1.bin", "forest-2.bin", "membership.bin", "env.bin", "walk.json", "report.json"] {
        assert_eq!(std::fs::read(a.path().join("out").join(f)).unwrap(), std::fs::read(b.path().join("out").join(f)).unwrap(), "{f}");
    }

    // rerunning a stage in place leaves every byte unchanged
    let o = umbrella(a.path(), &["env", "--config", "run.cfg"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(a.path().join("out/manifest.json")).unwrap(), ma);

    let text = std::fs::read_to_string(a.path().join("out/report.json")).unwrap();
    let r = Report::from_json(&text).unwrap();
    assert!(r.all_pass());
    assert_eq!(r.constants.c_1.as_deref(), Some("1/6"));
    assert_eq!(r.traps.len(), 4);
    assert!(r.invariants.iter().any(|x| x.name == "exit_chain" && x.checked > 0));
    assert_eq!(r.to_json().unwrap(), text);
}

#[test]
fn missing_stage_names_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = umbrella(dir.path(), &["forest"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("umbrella gen"), "{}", stderr(&o));
    let o = umbrella(dir.path(), &["report"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("umbrella env"));
}

#[test]
fn corrupted_dump_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), SMALL).unwrap();
    assert_eq!(code(&umbrella(dir.path(), &["gen", "--config", "run.cfg"])), 0);
    let p = dir.path().join("out/field-1.bin");
    let mut bytes = std::fs::read(&p).unwrap();
    let k = bytes.len() - 3;
    bytes[k] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    let o = umbrella(dir.path(), &["forest", "--config", "run.cfg"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checksum mismatch for field-1.bin"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&umbrella(dir.path(), &["validate", "--beta", "0.3"])), 2);
    assert_eq!(code(&umbrella(dir.path(), &["validate", "--set", "colour=red"])), 2);
    assert_eq!(code(&umbrella(dir.path(), &["nonsense"])), 2);
    std::fs::write(dir.path().join("bad.cfg"), "dim 3\n").unwrap();
    assert_eq!(code(&umbrella(dir.path(), &["validate", "--config", "bad.cfg"])), 2);
    // a second config cannot write into the same output directory
    assert_eq!(code(&umbrella(dir.path(), &["validate"])), 0);
    let o = umbrella(dir.path(), &["validate", "--seed", "9"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("fresh --out"));
}

#[test]
fn oversized_window_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = umbrella(dir.path(), &["gen", "--window", "2000"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn oracle_tails_and_mixing_run_standalone() {
    let dir = tempfile::tempdir().unwrap();
    let o = umbrella(dir.path(), &["oracle", "--max-box", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/oracle.json")).unwrap()).unwrap();
    assert_eq!(v["per_dim"]["3"]["lambda_mismatches"], 0);
    assert!(v["per_dim"]["2"]["boxes"].as_u64().unwrap() >= 3);

    let args = ["--dim", "2", "--window", "64", "--margin", "16", "--replicas", "4", "--set", "buffer=16", "--set", "grid=2,4,8", "--out", "t"];
    let o = umbrella(dir.path(), &[&["tails"], &args[..]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("t/tails.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let o = umbrella(dir.path(), &["mixing", "--dim", "2", "--replicas", "200", "--set", "shifts=1,4", "--set", "mixing_radius=8", "--out", "m"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(std::fs::read_to_string(dir.path().join("m/mixing.csv")).unwrap().lines().count() >= 3);
}
