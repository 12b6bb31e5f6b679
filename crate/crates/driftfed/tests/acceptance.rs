//! Release gate: one test per numbered criterion, each printing a
//! PASS/FAIL line (visible with `--nocapture`). Formula-level criteria
//! check exact arithmetic against independent oracles; behavioural
//! criteria freeze one desk-scale simulation (the bundled
//! `configs/abrupt.json`) and assert orderings on it. Criterion 10
//! (byte-identical CLI output) lives in the CLI crate's acceptance
//! test, where the binary is reachable.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;

use driftfed::config::ExperimentConfig;
use driftfed::detectors::{ks_two_sample, AdwinParams, DetectorConfig, KswinParams, PageHinkleyParams};
use driftfed::federation::{fed_avg, run_all, SimulationReport};
use driftfed::flame::{
    adaptive_threshold, build_retention_dataset, ols_slope, prune_window, stability_gradient,
    stability_static, ConceptStore, StabilityParams, StabilityState,
};
use driftfed::model::{
    init_model, mean_loss, mean_loss_gradient, Arch, LossTrace, ModelParams,
};
use driftfed::seed;
use driftfed::stream::LabeledBatch;

// =======================================================================
// Harness
// =======================================================================

fn criterion<F: FnOnce() + UnwindSafe>(number: u32, label: &str, body: F) {
    let outcome = catch_unwind(body);
    match &outcome {
        Ok(()) => println!("criterion {number:02} ({label}): PASS"),
        Err(_) => println!("criterion {number:02} ({label}): FAIL"),
    }
    if let Err(cause) = outcome {
        resume_unwind(cause);
    }
}

/// Desk-scale run shared by the behavioural criteria: every strategy of
/// the bundled abrupt-drift config, one seed, run once per process.
static DESK: OnceLock<(BTreeMap<String, SimulationReport>, Duration)> = OnceLock::new();

fn desk() -> &'static (BTreeMap<String, SimulationReport>, Duration) {
    DESK.get_or_init(|| {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/abrupt.json");
        let config = ExperimentConfig::load(&path).expect("bundled abrupt config");
        let start = Instant::now();
        let reports = run_all(&config).expect("desk-scale run");
        let elapsed = start.elapsed();
        let by_name = reports.into_iter().map(|r| (r.strategy.clone(), r)).collect();
        (by_name, elapsed)
    })
}

fn desk_report(strategy: &str) -> &'static SimulationReport {
    desk().0.get(strategy).expect("strategy present in bundled config")
}

// The bundled config drifts abruptly at month 12; training covers
// months 0..6. Pre-drift inference is 6..12, post-drift starts after
// the collapse month itself so mitigation has had its retraining turn.
const PRE_DRIFT: std::ops::Range<u32> = 6..12;
const POST_DRIFT: std::ops::Range<u32> = 13..19;

// =======================================================================
// Formula and oracle criteria
// =======================================================================

#[test]
fn criterion_01_retention_formula_exactness() {
    criterion(1, "retention formula exactness", || {
        let start = Instant::now();
        let mut rng = seed::stream_rng(9001, "acceptance-retention", &[]);
        for case in 0..200u64 {
            let n = rng.gen_range(1..=6usize);
            let sizes: Vec<usize> = (0..n).map(|_| rng.gen_range(2..=500usize)).collect();

            // Direct evaluation, floating-point floor instead of integer
            // division: newest concept contributes half its samples, the
            // older concept at 1-based age x contributes
            // floor(x * s_x / (2 * T)) with T = 1 + 2 + ... + (n - 1).
            let mut want = vec![0usize; n];
            want[n - 1] = (sizes[n - 1] as f64 / 2.0).floor() as usize;
            if n > 1 {
                let t: f64 = (1..n).map(|x| x as f64).sum();
                for x in 1..n {
                    want[x - 1] = (x as f64 * sizes[x - 1] as f64 / (2.0 * t)).floor() as usize;
                }
            }

            // Tag each concept with a constant feature so output rows can
            // be attributed back to their source concept.
            let mut store = ConceptStore::new();
            for (idx, &s) in sizes.iter().enumerate() {
                store.push_concept(LabeledBatch {
                    features: vec![idx as f64; s],
                    feature_dim: 1,
                    labels: vec![(idx % 2) as u8; s],
                    month: idx as u32,
                    true_concept: format!("c{idx}"),
                });
            }
            let got = build_retention_dataset(&store, 40_000 + case).expect("retention build");

            let mut counts = vec![0usize; n];
            let mut last = 0.0f64;
            for row in 0..got.len() {
                let tag = got.row(row)[0];
                assert!(tag >= last, "rows must stay oldest concept first");
                last = tag;
                counts[tag as usize] += 1;
            }
            assert_eq!(counts, want, "sizes {sizes:?}");
            assert_eq!(got.month, (n - 1) as u32, "metadata mirrors newest concept");
        }
        assert!(start.elapsed() < Duration::from_secs(5));
    });
}

#[test]
fn criterion_02_ks_oracle_equivalence() {
    criterion(2, "ks statistic matches brute-force ecdf", || {
        let start = Instant::now();
        let mut rng = seed::stream_rng(9002, "acceptance-ks", &[]);
        // sup_x |F_a(x) - F_b(x)| evaluated at every pooled point.
        let brute = |a: &[f64], b: &[f64]| -> f64 {
            let mut d = 0.0f64;
            for &x in a.iter().chain(b) {
                let fa = a.iter().filter(|&&v| v <= x).count() as f64 / a.len() as f64;
                let fb = b.iter().filter(|&&v| v <= x).count() as f64 / b.len() as f64;
                d = d.max((fa - fb).abs());
            }
            d
        };
        let lattice = [0.0, 0.25, 0.5, 0.75, 1.0];
        for _ in 0..1000 {
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                let len = rng.gen_range(1..=50usize);
                (0..len)
                    .map(|_| {
                        if rng.gen_bool(0.3) {
                            // coarse lattice forces ties within and across samples
                            lattice[rng.gen_range(0..lattice.len())]
                        } else {
                            rng.gen::<f64>()
                        }
                    })
                    .collect()
            };
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            let got = ks_two_sample(&a, &b);
            assert!((got - brute(&a, &b)).abs() <= 1e-12, "a={a:?} b={b:?}");
        }
        assert!(start.elapsed() < Duration::from_secs(5));
    });
}

#[test]
fn criterion_03_detectors_on_canonical_step_stream() {
    criterion(3, "detectors fire after the step, never before", || {
        let start = Instant::now();
        // 300 samples near 0.1 then 300 near 0.9, fixed seed.
        let mut rng = seed::stream_rng(9003, "acceptance-step", &[]);
        let stream: Vec<f64> = (0..600usize)
            .map(|t| {
                let base = if t < 300 { 0.1 } else { 0.9 };
                base + 0.02 * (rng.gen::<f64>() - 0.5)
            })
            .collect();
        let configs = [
            DetectorConfig::Adwin(AdwinParams::default()),
            DetectorConfig::PageHinkley(PageHinkleyParams::default()),
            DetectorConfig::Kswin(KswinParams::default()),
        ];
        for cfg in configs {
            let mut det = cfg.build(5).expect("default params are valid");
            let fires: Vec<usize> = stream
                .iter()
                .enumerate()
                .filter_map(|(t, &x)| det.update(x).then_some(t))
                .collect();
            assert!(
                fires.iter().all(|&t| t >= 300),
                "{}: fired before the step at {fires:?}",
                cfg.name()
            );
            assert!(
                fires.iter().any(|&t| t < 400),
                "{}: no detection within 100 samples of the step ({fires:?})",
                cfg.name()
            );
        }
        assert!(start.elapsed() < Duration::from_secs(10));
    });
}

#[test]
fn criterion_04_adaptive_threshold_arithmetic() {
    criterion(4, "adaptive threshold and window pruning arithmetic", || {
        // mean 0.2, population sigma sqrt(1/150): 3 sigma + mu = 0.44495
        let phi = adaptive_threshold(&[0.1, 0.2, 0.3]).expect("nonempty window");
        assert!((phi - 0.4449).abs() < 1e-4, "phi = {phi}");

        for n in 0..=100usize {
            let mut window: Vec<f64> = (0..n).map(|i| i as f64).collect();
            prune_window(&mut window);
            let removed = if n >= 6 { n / 3 } else { 0 };
            assert_eq!(window.len(), n - removed, "n = {n}");
            // survivors are the newest entries, order preserved
            for (k, &v) in window.iter().enumerate() {
                assert_eq!(v, (removed + k) as f64);
            }
        }
    });
}

#[test]
fn criterion_05_stability_rules() {
    criterion(5, "stability rules match their formulas", || {
        // Static rule over a hand-built table. A two-epoch window with
        // generalization gaps {0, 2 sigma_w} has population std sigma_w
        // exactly, so each row drives the rule with a chosen sigma_w.
        let table: [(f64, f64, f64, bool); 20] = [
            (0.07, 0.10, 0.2, true),
            (0.09, 0.10, 0.2, false),
            (0.08, 0.125, 0.2, true),
            (0.079, 0.10, 0.2, true), // just under the 0.08 cutoff
            (0.081, 0.10, 0.2, false),
            (0.00, 0.10, 0.2, true), // flat trace is always stable
            (0.05, 0.10, 0.5, false),
            (0.049, 0.10, 0.5, true),
            (0.01, 0.50, 0.9, true),
            (0.06, 0.50, 0.9, false),
            (0.30, 1.00, 0.5, true),
            (0.50, 1.00, 0.5, false),
            (0.10, 0.10, 0.2, false),
            (0.11, 0.10, 0.2, false),
            (0.0099, 0.10, 0.9, true),
            (0.0101, 0.10, 0.9, false),
            (0.199, 0.25, 0.2, true),
            (0.201, 0.25, 0.2, false),
            (0.024, 0.05, 0.5, true),
            (0.026, 0.05, 0.5, false),
        ];
        for &(sigma_w, sigma_s, beta, want) in &table {
            let params = StabilityParams {
                beta,
                window_len: 2,
                ..StabilityParams::default()
            };
            let mut stab = StabilityState::new(params).expect("valid params");
            stab.sigma_stable = Some(sigma_s);
            let trace = LossTrace {
                train_loss: vec![1.0, 1.0],
                val_loss: vec![1.0, 1.0 + 2.0 * sigma_w],
            };
            assert_eq!(
                stability_static(&mut stab, &trace),
                want,
                "sigma_w={sigma_w} sigma_s={sigma_s} beta={beta}"
            );
        }

        // Gradient rule against an independent least-squares oracle:
        // m = (n sum(xy) - sum(x) sum(y)) / (n sum(x^2) - sum(x)^2).
        let mut rng = seed::stream_rng(9005, "acceptance-slope", &[]);
        for _ in 0..50 {
            let ys: Vec<f64> = (0..10).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let n = ys.len() as f64;
            let sx: f64 = (0..10).map(|i| i as f64).sum();
            let sxx: f64 = (0..10).map(|i| (i * i) as f64).sum();
            let sy: f64 = ys.iter().sum();
            let sxy: f64 = ys.iter().enumerate().map(|(i, &y)| i as f64 * y).sum();
            let oracle = (n * sxy - sx * sy) / (n * sxx - sx * sx);
            assert!((ols_slope(&ys) - oracle).abs() <= 1e-10);

            for g in [0.0, 1e-3, 0.05] {
                let params = StabilityParams {
                    grad_window: 10,
                    grad_threshold: g,
                    ..StabilityParams::default()
                };
                let mut stab = StabilityState::new(params).expect("valid params");
                stab.sigma_history = ys.clone();
                assert_eq!(stability_gradient(&stab), oracle >= -g);
            }
        }
    });
}

#[test]
fn criterion_06_fed_avg_equivalence() {
    criterion(6, "fed_avg equals the weighted-mean oracle", || {
        let mut rng = seed::stream_rng(9006, "acceptance-fedavg", &[]);
        for _ in 0..100 {
            let k = rng.gen_range(1..=5usize);
            let dim = rng.gen_range(1..=8usize);
            let models: Vec<ModelParams> = (0..k)
                .map(|_| ModelParams {
                    arch: Arch::Logistic,
                    dim,
                    weights: (0..dim + 1).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect(),
                })
                .collect();
            let counts: Vec<usize> = (0..k).map(|_| rng.gen_range(1..=1000usize)).collect();
            let got = fed_avg(&models, &counts).expect("valid aggregate");
            let total: f64 = counts.iter().map(|&c| c as f64).sum();
            for j in 0..dim + 1 {
                let oracle: f64 = models
                    .iter()
                    .zip(&counts)
                    .map(|(m, &c)| c as f64 * m.weights[j])
                    .sum::<f64>()
                    / total;
                assert!((got.weights[j] - oracle).abs() <= 1e-12);
            }
        }
    });
}

#[test]
fn criterion_11_gradient_check() {
    criterion(11, "analytic gradients match central differences", || {
        let mut rng = seed::stream_rng(9011, "acceptance-grad", &[]);
        for case in 0..50u64 {
            let arch = if case % 2 == 0 {
                Arch::Logistic
            } else {
                Arch::Mlp { hidden: rng.gen_range(2..=6) }
            };
            let dim = rng.gen_range(2..=6usize);
            let n = rng.gen_range(3..=12usize);
            let batch = LabeledBatch {
                features: (0..n * dim).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect(),
                feature_dim: dim,
                labels: (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect(),
                month: 0,
                true_concept: "c0".into(),
            };
            let params = init_model(arch, dim, 9100 + case);
            let weights = (
                0.5 + 1.5 * rng.gen::<f64>(),
                0.5 + 1.5 * rng.gen::<f64>(),
            );
            let analytic = mean_loss_gradient(&params, &batch, weights);
            assert_eq!(analytic.len(), params.weights.len());
            for (k, &a) in analytic.iter().enumerate() {
                let h = 1e-6 * (1.0 + params.weights[k].abs());
                let mut plus = params.clone();
                plus.weights[k] += h;
                let mut minus = params.clone();
                minus.weights[k] -= h;
                let fd = (mean_loss(&plus, &batch, weights)
                    - mean_loss(&minus, &batch, weights))
                    / (2.0 * h);
                let scale = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / scale <= 1e-4,
                    "case {case} param {k}: analytic {a} vs fd {fd}"
                );
            }
        }
    });
}

// =======================================================================
// Desk-scale behavioural criteria
// =======================================================================

#[test]
fn criterion_07_unmitigated_drift_harms_f1() {
    criterion(7, "strategy none drops >= 0.15 F1 after drift", || {
        let none = desk_report("none");
        let pre = none.mean_f1_over(PRE_DRIFT);
        let post = none.mean_f1_over(POST_DRIFT);
        assert!(
            pre - post >= 0.15,
            "drop too small: pre {pre:.4} post {post:.4}"
        );
    });
}

#[test]
fn criterion_08_flame_recovers_f1() {
    criterion(8, "flame_adaptive recovers to near pre-drift F1", || {
        let flame = desk_report("flame_adaptive");
        let none = desk_report("none");
        let pre = flame.mean_f1_over(PRE_DRIFT);
        let post = flame.mean_f1_over(POST_DRIFT);
        assert!(
            pre - post <= 0.05,
            "recovery gap too wide: pre {pre:.4} post {post:.4}"
        );
        assert!(post > none.mean_f1_over(POST_DRIFT));
    });
}

#[test]
fn criterion_09_cost_orderings() {
    criterion(9, "flame spends fewer bytes and retrains than baselines", || {
        let flame = desk_report("flame_adaptive");
        let kswin = desk_report("kswin");
        let monthly = desk_report("periodic_1");
        assert!(flame.ledger_total_bytes < monthly.ledger_total_bytes);
        assert!(flame.retraining_months.len() <= kswin.retraining_months.len());
        assert!(kswin.retraining_months.len() <= monthly.retraining_months.len());
    });
}

#[test]
fn criterion_12_desk_run_fits_time_budget() {
    criterion(12, "desk-scale simulation fits the suite's time budget", || {
        let (_, elapsed) = desk();
        // The simulation dominates the suite; everything else is sub-second.
        assert!(elapsed < &Duration::from_secs(240), "took {elapsed:?}");
    });
}
