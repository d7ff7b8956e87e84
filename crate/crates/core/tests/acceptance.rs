//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{corrupt_corpus, feed, grad_check, grad_instance, random_store, window_oracle, FD_REL_TOL};
use snapstack::harness::{
    cmd_compare, cmd_sweep_temperature, cmd_train, csv_bytes, DatasetSpec, Experiment, ExperimentConfig, Policy,
};
use snapstack::nn::{forward, init_params, MlpArchitecture, ParamVector};
use snapstack::schedule::CycleConfig;
use snapstack::snapshots::{
    load_sidecar, load_store, store_bytes, store_from_bytes, train_with_capture, CapturePlan, SelectError, Snapshot,
    SnapshotTag,
};
use snapstack::stacking::{
    build_ensemble, ensemble_predict, evaluate_params, swa_average, weights_equal, weights_for, weights_inverse_loss,
    weights_likelihood, weights_temperature, LossSource, PredictionCache, WeightingSpec,
};
use snapstack::Exec;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn within(elapsed: Duration, limit: Duration) -> Outcome {
    if elapsed < limit {
        Ok(format!("{elapsed:.2?} < {limit:?}"))
    } else {
        Err(format!("took {elapsed:.2?}, limit {limit:?}"))
    }
}

fn gradient() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let err = grad_check(&grad_instance(0xACCE_0000 + i));
        ensure!(err < FD_REL_TOL, "instance {i}: relative error {err:e}");
        worst = worst.max(err);
    }
    let t = within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("100 instances, worst relative error {worst:.2e}, {t}"))
}

fn schedule() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0usize;
    for _ in 0..500 {
        let amin = rng.random_range(1e-5..0.3);
        let amax = amin * rng.random_range(1.01..200.0);
        let len = rng.random_range(2..=120);
        let total = len * rng.random_range(1..=6) + rng.random_range(0..len);
        let cfg = CycleConfig::new(amin, amax, len, total).map_err(|e| e.to_string())?;
        for t in 0..total {
            let phase = t % len;
            let lr = cfg.lr_at(t).map_err(|e| e.to_string())?;
            let expected = if phase == 0 {
                amax
            } else if phase == len - 1 {
                amin
            } else {
                let u = phase as f64 / (len - 1) as f64;
                (amin + 0.5 * (amax - amin) * (1.0 + (std::f64::consts::PI * u).cos())).clamp(amin, amax)
            };
            ensure!(lr.to_bits() == expected.to_bits(), "L={len} t={t}: {lr} != {expected}");
            checked += 1;
        }
        let mid = 0.5 * (amax + amin);
        let step = 0.5 * (amax - amin) * std::f64::consts::PI / (len - 1) as f64;
        let mids = cfg.cycle_midpoints();
        ensure!(mids.len() == total / len, "L={len}: {} midpoints", mids.len());
        for (c, &m) in mids.iter().enumerate() {
            // first phase with phase / (L - 1) >= 1/2
            let phase = (0..len).find(|p| 2 * p >= len - 1).unwrap();
            ensure!(m == c * len + phase, "L={len}: midpoint {m}");
            let lr = cfg.lr_at(m).unwrap();
            ensure!((lr - mid).abs() <= step, "L={len}: lr {lr} not within one step of {mid}");
        }
        if len >= 4 {
            let minima = cfg.cycle_minima();
            ensure!(mids.iter().all(|m| !minima.contains(m)), "L={len}: midpoint equals a minimum");
        }
    }
    let t = within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("500 schedules, {checked} learning rates bit-exact, {t}"))
}

fn random_logliks(rng: &mut ChaCha8Rng, spread: f64) -> Vec<f64> {
    let n = rng.random_range(1..=12);
    let base = rng.random_range(-50.0..0.0);
    (0..n).map(|_| base - rng.random_range(0.0..spread)).collect()
}

fn weighting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    for _ in 0..2000 {
        let ll = random_logliks(&mut rng, 30.0);
        let n = ll.len() as f64;
        let tau = 10f64.powf(rng.random_range(-3.0..3.0));
        // (a)
        for w in [
            weights_temperature(&ll, tau).map_err(|e| e.to_string())?,
            weights_inverse_loss(&ll.iter().map(|l| -l + 1e-3).collect::<Vec<_>>()).map_err(|e| e.to_string())?,
        ] {
            ensure!(w.iter().all(|&x| x > 0.0), "non-positive weight in {w:?}");
            let s: f64 = w.iter().sum();
            ensure!((s - n).abs() <= 1e-9, "sum {s} for N={n}");
        }
        // (b)
        let t1 = weights_temperature(&ll, 1.0).unwrap();
        let lik = weights_likelihood(&ll).unwrap();
        ensure!(t1 == lik, "tau=1 differs from likelihood weighting");
        let m = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = ll.iter().map(|l| (l - m).exp()).sum();
        for (w, l) in lik.iter().zip(&ll) {
            let oracle = n * (l - m).exp() / z;
            ensure!((w - oracle).abs() <= 1e-12 * n, "likelihood weight {w} vs {oracle}");
        }
        // (e)
        let shift = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = ll.iter().map(|l| l + shift).collect();
        let a = weights_temperature(&ll, tau).unwrap();
        let b = weights_temperature(&shifted, tau).unwrap();
        for (x, y) in a.iter().zip(&b) {
            ensure!((x - y).abs() < 1e-12, "shift {shift} moved a weight {x} -> {y}");
        }
        cases += 1;
    }
    // (c)
    for _ in 0..500 {
        let ll = random_logliks(&mut rng, 5.0);
        let w = weights_temperature(&ll, 1000.0).unwrap();
        ensure!(w.iter().all(|x| (x - 1.0).abs() < 0.01), "tau=1000 weights {w:?}");
    }
    // (d)
    for _ in 0..500 {
        let n = rng.random_range(2..=10);
        let mut ll: Vec<f64> = (0..n).map(|i| -0.5 - 0.01 * i as f64 - rng.random_range(0.0..0.5) * i as f64).collect();
        let best = rng.random_range(0..n);
        ll.swap(0, best);
        let w = weights_temperature(&ll, 1e-3).unwrap();
        ensure!(w[best] > 0.999 * n as f64, "tau=1e-3 best weight {} of N={n}", w[best]);
    }
    Ok(format!("(a)-(e) hold on {cases} random weightings plus 1000 edge cases"))
}

fn window() -> Outcome {
    let mut windows = 0;
    for seed in 0..50 {
        let (store, s) = random_store(0xD00D + seed);
        let expected = window_oracle(&store, s);
        let got: Vec<usize> = match store.select_window(s) {
            Ok(p) => p.iter().map(|x| x.iter).collect(),
            Err(SelectError::EmptySelection(_)) => Vec::new(),
            Err(e) => return Err(format!("store {seed}: {e}")),
        };
        ensure!(got == expected, "store {seed}, s={s}: {got:?} vs oracle {expected:?}");
        windows += got.len();
    }
    Ok(format!("50 stores, {windows} windows match the brute-force argmin"))
}

fn snapshot_of(params: ParamVector, iter: usize) -> Snapshot {
    Snapshot {
        params,
        iter,
        lr_at_capture: 0.01,
        train_nll: 0.5 + iter as f64 * 0.01,
        val_nll: 0.6,
        tag: SnapshotTag::Min,
    }
}

fn ensemble_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut points = 0;
    for case in 0..50u64 {
        let d = rng.random_range(2..=6);
        let k = rng.random_range(2..=5);
        let arch = MlpArchitecture::new(vec![d, rng.random_range(2..=10), k]).unwrap();
        let n = rng.random_range(1..=6);
        let snaps: Vec<Snapshot> = (0..n)
            .map(|i| snapshot_of(init_params(&arch, case * 100 + i as u64).unwrap(), i))
            .collect();
        let refs: Vec<&Snapshot> = snaps.iter().collect();
        let eq = build_ensemble(&refs, &WeightingSpec::equal()).map_err(|e| e.to_string())?;
        let stacked = build_ensemble(&refs, &WeightingSpec::temperature(0.3, LossSource::Train)).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let outs: Vec<Vec<f64>> = snaps.iter().map(|s| forward(&s.params, &x).unwrap()).collect();
            let p = ensemble_predict(&eq, &x).unwrap();
            for c in 0..k {
                let mean = outs.iter().map(|o| o[c]).sum::<f64>() / n as f64;
                ensure!((p[c] - mean).abs() <= 1e-12, "equal weights: {} vs mean {mean}", p[c]);
            }
            for q in [&p, &ensemble_predict(&stacked, &x).unwrap()] {
                ensure!(q.iter().all(|&v| v >= 0.0), "negative probability");
                let s: f64 = q.iter().sum();
                ensure!((s - 1.0).abs() <= 1e-9, "probabilities sum to {s}");
            }
            let single = build_ensemble(&refs[..1], &WeightingSpec::equal()).unwrap();
            ensure!(ensemble_predict(&single, &x).unwrap() == outs[0], "N=1 differs from forward");
            points += 1;
        }
    }
    Ok(format!("{points} inputs over 50 random ensembles"))
}

fn trend() -> Outcome {
    let start = Instant::now();
    let base = ExperimentConfig::blobs_default();
    match &base.dataset {
        DatasetSpec::Blobs { num_classes: 3, per_class: 250, test_per_class: 200, .. } => {}
        other => return Err(format!("unexpected dataset {other:?}")),
    }
    let (mut single, mut equal, mut stacked) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..10 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let exp = Experiment::prepare(cfg).map_err(|e| e.to_string())?;
        ensure!(
            (exp.train.len(), exp.val.len(), exp.test.len()) == (600, 150, 600),
            "split sizes {} / {} / {}",
            exp.train.len(),
            exp.val.len(),
            exp.test.len()
        );
        ensure!(exp.arch.layer_sizes()[1..] == [32, 3], "arch {:?}", exp.arch.layer_sizes());
        let c = exp.config.schedule;
        ensure!((c.cycle_len, c.completed_cycles()) == (200, 5), "schedule {c:?}");
        let run = train_with_capture(&exp.train_spec(seed), &exp.train, &exp.val, &exp.capture_plan().unwrap())
            .map_err(|e| e.to_string())?;
        single.push(evaluate_params(Exec::Parallel, &run.final_params, &exp.test).unwrap().accuracy);
        let minima = run.store.select_min().unwrap();
        let params: Vec<&ParamVector> = minima.iter().map(|s| &s.params).collect();
        let cache = PredictionCache::new(Exec::Parallel, &params, &exp.test).unwrap();
        let all: Vec<usize> = (0..minima.len()).collect();
        equal.push(cache.evaluate(&all, &weights_equal(minima.len()).unwrap()).unwrap().accuracy);
        let best = exp
            .config
            .tau_grid
            .iter()
            .map(|&tau| {
                let w = weights_for(&minima, &WeightingSpec::temperature(tau, LossSource::Train)).unwrap();
                cache.evaluate(&all, &w).unwrap().accuracy
            })
            .fold(0.0, f64::max);
        stacked.push(best);
    }
    let (s, e, b) = (median(single), median(equal), median(stacked));
    let t = within(start.elapsed(), Duration::from_secs(180))?;
    let detail = format!("median accuracy single {s:.4}, equal {e:.4}, best stacked {b:.4}; {t}");
    ensure!(e >= s, "equal-weight ensemble below single model: {detail}");
    ensure!(b >= e, "stacked ensemble below equal weights: {detail}");
    Ok(detail)
}

fn cost() -> Outcome {
    let exp = Experiment::prepare(ExperimentConfig::blobs_default()).map_err(|e| e.to_string())?;
    let out = cmd_compare(&exp, Exec::Parallel).map_err(|e| e.to_string())?;
    let t = exp.config.schedule.total_iters;
    ensure!(out.main_run.sgd_steps == t, "main run took {} steps", out.main_run.sgd_steps);
    ensure!(
        out.total_sgd_steps == exp.config.independent_members * t,
        "{} SGD steps across runs",
        out.total_sgd_steps
    );
    let snapshot_rows = out.rows.iter().filter(|r| r.model == "snapshot" || r.model == "swa").count();
    ensure!(
        out.rows.iter().filter(|r| r.model == "snapshot" || r.model == "swa").all(|r| r.train_runs == 1),
        "a snapshot row needs more than one run"
    );

    let spec = exp.train_spec(exp.config.seed);
    let plan = exp.capture_plan().unwrap();
    let empty = CapturePlan::new();
    // Median of interleaved paired ratios; a lone minimum is at the mercy of
    // scheduler noise on a shared machine.
    let mut ratios = Vec::new();
    let (mut plain, mut capture) = (Duration::MAX, Duration::MAX);
    for _ in 0..41 {
        let s = Instant::now();
        train_with_capture(&spec, &exp.train, &exp.val, &empty).unwrap();
        let p = s.elapsed();
        let s = Instant::now();
        train_with_capture(&spec, &exp.train, &exp.val, &plan).unwrap();
        let c = s.elapsed();
        ratios.push(c.as_secs_f64() / p.as_secs_f64());
        plain = plain.min(p);
        capture = capture.min(c);
    }
    ratios.sort_by(f64::total_cmp);
    let overhead = ratios[ratios.len() / 2] - 1.0;
    let detail = format!(
        "{snapshot_rows} snapshot/SWA rows from one run of {t} steps; {} captures cost {:+.1}% (median of {} paired runs; fastest {capture:.2?} vs {plain:.2?})",
        plan.len(),
        100.0 * overhead,
        ratios.len()
    );
    ensure!(overhead < 0.20, "capture overhead too high: {detail}");
    Ok(detail)
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut stores = Vec::new();
    let mut csvs = Vec::new();
    for dir in &dirs {
        let exp = Experiment::prepare(ExperimentConfig::blobs_default()).map_err(|e| e.to_string())?;
        let out = cmd_train(&exp, dir.path()).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&out.store_path).unwrap();
        let mut meta = load_sidecar(&out.store_path).unwrap();
        meta.created_unix = 0;
        let store = load_store(&out.store_path).unwrap();
        let sweep = cmd_sweep_temperature(
            &exp,
            &store,
            Policy::MinMid,
            LossSource::Validation,
            &exp.config.tau_grid,
            &exp.config.ensemble_sizes(),
            Exec::Parallel,
        )
        .map_err(|e| e.to_string())?;
        let compare = cmd_compare(&exp, Exec::Parallel).map_err(|e| e.to_string())?;
        stores.push((bytes, meta));
        csvs.push((csv_bytes(&sweep).unwrap(), csv_bytes(&compare.rows).unwrap()));
    }
    ensure!(stores[0].0 == stores[1].0, "store bytes differ");
    ensure!(stores[0].1 == stores[1].1, "sidecars differ beyond the timestamp");
    ensure!(csvs[0] == csvs[1], "CSV payloads differ");
    Ok(format!(
        "store ({} bytes), sidecar and CSVs ({} + {} bytes) identical across reruns",
        stores[0].0.len(),
        csvs[0].0.len(),
        csvs[0].1.len()
    ))
}

fn swa() -> Outcome {
    let arch = MlpArchitecture::new(vec![1, 1]).unwrap();
    let pv = |a: f64, b: f64| ParamVector::new(vec![a, b], arch.clone()).unwrap();
    let same: Vec<Snapshot> = (0..4).map(|i| snapshot_of(pv(0.37, -1.25), i)).collect();
    let refs: Vec<&Snapshot> = same.iter().collect();
    let avg = swa_average(&refs, &weights_equal(4).unwrap()).map_err(|e| e.to_string())?;
    for (x, y) in avg.values().iter().zip([0.37, -1.25]) {
        ensure!((x - y).abs() <= 1e-12, "identity failed: {x} vs {y}");
    }
    let a = snapshot_of(pv(1.0, 2.0), 0);
    let b = snapshot_of(pv(3.0, 4.0), 1);
    let c = snapshot_of(pv(-2.0, 0.5), 2);
    let cases: [(&[&Snapshot], &[f64], [f64; 2]); 4] = [
        (&[&a, &b], &[1.0, 1.0], [2.0, 3.0]),
        (&[&a, &b], &[0.5, 1.5], [2.5, 3.5]),
        (&[&a, &b], &[0.2, 1.8], [2.8, 3.8]),
        (&[&a, &b, &c], &[1.5, 1.0, 0.5], [1.16666666666666667, 2.41666666666666667]),
    ];
    for (snaps, w, expected) in cases {
        let got = swa_average(snaps, w).map_err(|e| e.to_string())?;
        for (x, y) in got.values().iter().zip(expected) {
            ensure!((x - y).abs() <= 1e-12, "weights {w:?}: {x} vs {y}");
        }
    }
    Ok("identity and 4 hand-computed weighted averages within 1e-12".into())
}

fn io_robustness() -> Outcome {
    let exp = Experiment::prepare(ExperimentConfig::blobs_default()).map_err(|e| e.to_string())?;
    let run = train_with_capture(&exp.train_spec(8), &exp.train, &exp.val, &exp.capture_plan().unwrap()).unwrap();
    let bytes = store_bytes(&run.store);
    let back = store_from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure!(back == run.store, "round-trip changed the store");
    ensure!(store_bytes(&back) == bytes, "re-encoding changed the bytes");
    let corpus = corrupt_corpus();
    let n = corpus.len();
    for case in corpus {
        match catch_unwind(AssertUnwindSafe(|| feed(&case.input))) {
            Ok(Err(_)) => {}
            Ok(Ok(())) => return Err(format!("{} was accepted", case.name)),
            Err(_) => return Err(format!("{} panicked", case.name)),
        }
    }
    Ok(format!("{}-snapshot store round-trips bit-exactly; {n} corrupt files rejected with errors", back.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 gradient vs finite differences", gradient),
        ("2 schedule exactness", schedule),
        ("3 weighting algebra", weighting),
        ("4 window selection oracle", window),
        ("5 ensemble prediction algebra", ensemble_algebra),
        ("6 trend over 10 seeds", trend),
        ("7 single-run cost", cost),
        ("8 determinism", determinism),
        ("9 parameter averaging algebra", swa),
        ("10 i/o robustness", io_robustness),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
