//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Run with `cargo test --test acceptance`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{TestCaseError, TestRunner};

use common::{
    aggregation_case_diff, assign_case, assigned, dirichlet_share_gap, enlarged, fedavg_degeneracy_gaps,
    feasible_intersection, gradient_case, mean_kl_over_seeds, memory_ratios, rng,
};
use hetfed::algorithms::StrategyId;
use hetfed::config::ExperimentConfig;
use hetfed::hetero::{select_channels, ChannelSelector, WidthRate};
use hetfed::metrics::{effectiveness, stability, time_to_accuracy, Accuracy, RoundRecord};
use hetfed::resource::feasible_set;
use hetfed::runner;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        worst = worst.max(gradient_case(seed).0);
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-4 && secs < 30.0, format!("worst relative error {worst:.2e} over 100 cases in {secs:.1} s"))
}

fn aggregation() -> Outcome {
    let mut r = rng(2000);
    let worst = (0..200).map(|_| aggregation_case_diff(&mut r)).fold(0.0, f64::max);
    check(worst <= 1e-12, format!("max diff {worst:.2e} over 200 cases"))
}

fn degeneracy() -> Outcome {
    let gaps = fedavg_degeneracy_gaps();
    let ok = gaps.iter().all(|(_, g)| *g <= 1e-9);
    let detail: Vec<String> = gaps.iter().map(|(s, g)| format!("{s} {g:.1e}")).collect();
    check(ok, format!("5-round gaps to fedavg_full: {}", detail.join(", ")))
}

fn rolling_coverage() -> Outcome {
    for d in 1..=32 {
        for rate in [0.25, 0.5, 0.75] {
            let rate = WidthRate::new(rate).unwrap();
            let want = (rate.value() * d as f64).ceil() as usize;
            for start in [0, 5, 123] {
                let mut hits = vec![0usize; d];
                for t in start..start + d {
                    for i in select_channels(d, rate, ChannelSelector::Rolling { round: t }) {
                        hits[i] += 1;
                    }
                }
                if hits.iter().any(|&h| h != want) {
                    return Err(format!("d={d} rate={} start={start}: {hits:?}", rate.value()));
                }
            }
        }
    }
    Ok("every index hit ceil(rate*d) times, d in 1..=32".into())
}

fn memory_calibration() -> Outcome {
    let ratios = memory_ratios();
    let ok = ratios.iter().all(|(_, got, want)| (got / want - 1.0).abs() <= 0.10);
    let detail: Vec<String> = ratios.iter().map(|(n, got, want)| format!("{n} {got:.3}/{want:.3}")).collect();
    check(ok, detail.join(", "))
}

fn monotonicity() -> Outcome {
    let config = ProptestConfig { cases: 500, failure_persistence: None, ..ProptestConfig::default() };
    let mut runner = TestRunner::new(config);
    runner
        .run(&(assign_case(), 0usize..3, 1.0f64..20.0), |((pool, scenario, p, samples), which, factor)| {
            let before = assigned(&pool, &p, &scenario, samples);
            let after = assigned(&pool, &enlarged(&p, which, factor), &scenario, samples);
            if before.is_some_and(|b| !after.is_some_and(|a| a <= b)) {
                return Err(TestCaseError::fail(format!("capacity {which} x{factor}: {before:?} -> {after:?}")));
            }
            let inter = feasible_intersection(&pool, &p, &scenario, samples);
            let combined: Vec<usize> = feasible_set(&pool, &p, &scenario, samples, 2);
            if combined.into_iter().collect::<BTreeSet<_>>() != inter {
                return Err(TestCaseError::fail("combined feasible set differs from intersection"));
            }
            if before != inter.first().copied() {
                return Err(TestCaseError::fail("assignment is not the largest feasible variant"));
            }
            Ok(())
        })
        .map(|()| "500 random profiles and pools".to_string())
        .map_err(|e| e.to_string())
}

/// Runs the desk experiment once and shares it with the metric criterion.
fn directional(baseline_delta: &mut Option<f64>) -> Outcome {
    let mut cfg = ExperimentConfig::with_strategies(vec![StrategyId::Sheterofl, StrategyId::Depthfl]);
    // single-threaded, so wall time bounds CPU time
    cfg.experiment.parallel = false;
    let e = &cfg.experiment;
    assert_eq!((e.num_clients, e.num_rounds, e.repeats), (20, 200, 3));
    let start = Instant::now();
    let result = runner::run_experiment(&cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    *baseline_delta = result.arm("fedavg_smallest@width").map(|a| a.mean.effectiveness_delta);
    let delta = |label: &str| result.arm(label).map_or(f64::NAN, |a| a.mean.effectiveness_delta);
    let (s, d) = (delta("sheterofl"), delta("depthfl"));
    check(
        s > 0.0 && d > 0.0 && secs < 600.0,
        format!("mean delta sheterofl {s:+.4}, depthfl {d:+.4}; {secs:.1} s"),
    )
}

fn record(round: usize, acc: f64) -> RoundRecord {
    RoundRecord {
        round,
        simulated_time_s: 12.0 * round as f64,
        global_accuracy: acc,
        per_client_accuracy: Vec::new(),
        max_train_s: 0.0,
        max_comm_s: 0.0,
    }
}

fn metric_oracles(baseline_delta: Option<f64>) -> Outcome {
    let var = stability(&[Accuracy::new(4, 5), Accuracy::new(3, 5)]);
    let records: Vec<_> = [0.5, 0.6, 0.72, 0.71].iter().enumerate().map(|(i, &a)| record(i + 1, a)).collect();
    let tta = time_to_accuracy(&records, 0.7);
    let self_delta = effectiveness(0.6125, 0.6125);
    check(
        var == 0.01 && tta == Some(36.0) && self_delta == 0.0 && baseline_delta == Some(0.0),
        format!("stability {var}, time {tta:?}, self {self_delta}, baseline arm {baseline_delta:?}"),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::with_strategies(StrategyId::ALL.to_vec());
    cfg.experiment.num_clients = 8;
    cfg.experiment.sampling_fraction = 0.5;
    cfg.experiment.num_rounds = 4;
    cfg.experiment.repeats = 2;
    cfg.experiment.parallel = true;
    cfg.metrics.eval_every = 2;
    cfg.output.dir = tmp.path().join("out");
    if let Some(s) = cfg.data.synthetic.as_mut() {
        s.n = 400;
    }
    let mut snaps = Vec::new();
    for _ in 0..2 {
        runner::run(&cfg).map_err(|e| e.to_string())?;
        snaps.push(snapshot(&cfg.output.dir));
    }
    let files = snaps[0].len();
    check(
        files > 0 && snaps[0] == snaps[1],
        format!("{files} output files byte-identical across two parallel runs"),
    )
}

fn dirichlet() -> Outcome {
    let gap = (0..5).map(|s| dirichlet_share_gap(1e6, s)).fold(0.0, f64::max);
    let (skewed, mild) = (mean_kl_over_seeds(0.5), mean_kl_over_seeds(5.0));
    check(
        gap <= 0.02 && skewed > mild,
        format!("alpha 1e6 max share gap {gap:.4}; mean KL {skewed:.4} at 0.5 vs {mild:.4} at 5"),
    )
}

fn report(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (ok, line) = match outcome {
        Ok(d) => (true, format!("criterion {n}: PASS {d}\n")),
        Err(d) => (false, format!("criterion {n}: FAIL {d}\n")),
    };
    // bypasses libtest's capture so the lines show up in plain `cargo test`
    let _ = std::io::stdout().write_all(line.as_bytes());
    ok
}

#[test]
fn acceptance() {
    let mut baseline_delta = None;
    let results = [
        report(1, gradients),
        report(2, aggregation),
        report(3, degeneracy),
        report(4, rolling_coverage),
        report(5, memory_calibration),
        report(6, monotonicity),
        report(7, || directional(&mut baseline_delta)),
        report(8, || metric_oracles(baseline_delta)),
        report(9, determinism),
        report(10, dirichlet),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
