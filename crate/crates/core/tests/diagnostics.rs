//! Monte Carlo diagnostics and whole-instance properties too slow for unit tests.

use umbrella_core::environment::Choice;
use umbrella_core::field::{generate_field, ModelParams};
use umbrella_core::forest::{build_forest, side_choice_joint_frequency, Orientation};
use umbrella_core::lattice::Window;
use umbrella_core::metrics::{big_h_tail, big_h_tail_exponent, TailAccumulator};
use umbrella_core::pipeline::{build_instance, invariant_suite, trapping, Instance, InstanceConfig, TrappingConfig};
use umbrella_core::pruning::{prune_pair, Frontier, Tri};
use umbrella_core::stats::power_law_fit;

#[test]
fn side_choice_joint_frequency_decays_fast_d2() {
    let p = ModelParams::preset(2, Window::cube(2, 2, 1).unwrap(), 3);
    let f = side_choice_joint_frequency(&p, &[8.0, 16.0, 32.0, 64.0], 20_000, 80);
    let fit = power_law_fit(&f).unwrap();
    // at least as fast as t^-(d+1), with 0.5 tolerance
    assert!(fit.slope <= -2.5, "{f:?} slope {}", fit.slope);
}

#[test]
fn big_h_tail_table_is_bounded_over_range() {
    let grid = [2u32, 4, 8, 16, 32];
    let mut acc = TailAccumulator::new(&grid);
    for seed in 0..4 {
        let inst = build_instance(&InstanceConfig::preset(3, 64, seed)).unwrap();
        let interior = inst.forests[0].region.shrink(16).unwrap();
        big_h_tail(&mut acc, &inst.pair.big_h[0], &interior);
        big_h_tail(&mut acc, &inst.pair.big_h[1], &interior);
    }
    let e = acc.estimate(big_h_tail_exponent(3, 0.1)).unwrap();
    let scaled: Vec<f64> = e.rows.iter().filter(|r| r.n >= 8).map(|r| r.scaled_lo).collect();
    let ratio = scaled.iter().cloned().fold(0.0, f64::max) / scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(scaled.iter().all(|v| *v > 0.0));
    assert!(ratio <= 3.0, "{:?}", e.rows);
}

fn opposite(a: Tri, b: Tri) -> bool {
    matches!((a, b), (Tri::In, Tri::Out) | (Tri::Out, Tri::In))
}

#[test]
fn enlarging_the_window_only_resolves_unknowns() {
    for seed in 0..3 {
        let small = build_instance(&InstanceConfig::preset(3, 20, seed)).unwrap();
        let large = build_instance(&InstanceConfig::preset(3, 28, seed)).unwrap();
        let region = small.forests[0].region;
        let mut resolved = 0;
        for x in region.sites() {
            for i in 0..2 {
                let (a, b) = (small.pair.tilde[i].get(&x).unwrap(), large.pair.tilde[i].get(&x).unwrap());
                assert!(!opposite(a, b), "tilde_T_{} at {x:?}: {a:?} -> {b:?}", i + 1);
                resolved += (a == Tri::Unknown && b != Tri::Unknown) as usize;
                let k = region.index(&x).unwrap();
                // lines accepted through the frontier band carry a caveat and may still be pruned
                if small.pair.t[i].frontier[k] != Some(Frontier::Band) {
                    let (a, b) = (small.pair.t[i].layer.get(&x).unwrap(), large.pair.t[i].layer.get(&x).unwrap());
                    assert!(!opposite(a, b), "T_{} at {x:?}: {a:?} -> {b:?}", i + 1);
                }
            }
        }
        assert!(resolved > 0);
    }
}

#[test]
fn large_windows_have_leaves_in_both_forests() {
    let reps = 10u64;
    let mut both = 0;
    for seed in 0..reps {
        let inst = build_instance(&InstanceConfig { band: 16, ..InstanceConfig::preset(3, 128, 100 + seed) }).unwrap();
        both += inst.pair.leaves.iter().all(|l| l.iter().any(|z| z.certain)) as u64;
    }
    assert!(both as f64 / reps as f64 > 0.9, "{both}/{reps}");
}

/// Regenerate with a wider field margin at the same truncation radius: every
/// field value the first run read is reproduced and more lattice is known.
#[test]
fn patch_is_local_at_certain_sites() {
    let cfg = InstanceConfig { n_max: 128, ..InstanceConfig::preset(3, 24, 5) };
    let a = build_instance(&cfg).unwrap();
    let wide = InstanceConfig { margin: 28, ..cfg };
    let w = cfg.window().unwrap();
    let params = [wide.params(1).unwrap(), wide.params(2).unwrap()];
    let fields = [generate_field(&params[0]).unwrap(), generate_field(&params[1]).unwrap()];
    let (f1, _) = build_forest(&fields[0], &fields[0].region, &w, Orientation::Plus, cfg.margin).unwrap();
    let (f2, _) = build_forest(&fields[1], &fields[1].region, &w, Orientation::Minus, cfg.margin).unwrap();
    let pair = prune_pair(&f1, &f2, cfg.beta, cfg.band);
    let b = Instance { config: cfg, params: [cfg.params(1).unwrap(), cfg.params(2).unwrap()], fields, forests: [f1, f2], pair };
    let (_, _, ea) = invariant_suite(&a, None).unwrap();
    let (_, _, eb) = invariant_suite(&b, None).unwrap();
    let mut compared = 0;
    for (k, c) in ea.choice.iter().enumerate() {
        if let Choice::Chosen(_) = c {
            let x = ea.region.site(k);
            assert_eq!(ea.row(&x), eb.row(&x), "{x:?}");
            compared += 1;
        }
    }
    assert!(compared > 100, "{compared}");
}

#[test]
fn slow_drift_becomes_rarer_with_time() {
    let inst = build_instance(&InstanceConfig { n_max: 128, ..InstanceConfig::preset(3, 24, 1) }).unwrap();
    let (_, _, env) = invariant_suite(&inst, None).unwrap();
    let cfg = TrappingConfig { depth: 60_000, horizon: 10_000, replicas: 300, u_min: 1, seed: 77 };
    for t in trapping(&inst, &env, &cfg).unwrap() {
        let alive: Vec<_> = t.patched.traces.iter().filter(|r| r.exit_step.is_none() && !r.truncated).collect();
        assert!(alive.len() > 50);
        let slow: Vec<f64> = (0..3).map(|c| alive.iter().filter(|r| r.drift_checkpoints[c] < 0.4).count() as f64 / alive.len() as f64).collect();
        assert!(slow.windows(2).all(|w| w[1] <= w[0]), "forest {}: {slow:?}", t.forest);
    }
}
