//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance` runs everything. Passing
//! substrings as arguments (`-- suites`, `-- ablation`) runs only the
//! criteria whose key contains one of them.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::grad::gradient_suite;
use common::suites::{centerline_suite, codec_suite, metric_suite, shape_suite, Check};
use implantformer::crossval::{cross_validate, CrossValConfig, CrossValReport};
use implantformer::evaluation::EvalConfig;
use implantformer::network::NetConfig;
use implantformer::phantom::{generate_cohort, PhantomConfig, PhantomPatient};
use implantformer::training::TrainConfig;
use implantformer::volume::{IntensityWindow, Region};

const PATIENTS: usize = 200;
const COHORT_SEED: u64 = 11;
const TILT_JITTER: f64 = 0.04;
const EPOCHS: usize = 4;
const BOX: f64 = 11.0;
const E2E_BUDGET_S: f64 = 15.0 * 60.0;

struct Outcome {
    name: String,
    passed: bool,
    detail: String,
}

fn suite(name: &str, checks: Vec<Check>, seconds: f64, budget: Option<f64>) -> Outcome {
    for c in &checks {
        println!("    {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    let in_time = budget.is_none_or(|b| seconds < b);
    let budget_note = budget.map_or(String::new(), |b| format!(" (budget {:.0}s)", b));
    Outcome {
        name: name.into(),
        passed: checks.iter().all(|c| c.passed) && in_time,
        detail: format!("{} checks, {:.1}s{}", checks.len(), seconds, budget_note),
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn crossval_config(net: NetConfig, region: Region) -> CrossValConfig {
    CrossValConfig {
        net,
        train: TrainConfig {
            batch_size: 6,
            base_lr: 1e-3,
            epochs: EPOCHS,
            lr_drops: vec![2, 3],
            crop_size: 64,
            box_size: BOX,
            seed: 3,
            ..TrainConfig::default()
        },
        eval: EvalConfig {
            box_size: BOX,
            ..EvalConfig::default()
        },
        region,
        split_seed: 1,
        window: IntensityWindow::default(),
    }
}

fn run_arm(label: &str, cohort: &[PhantomPatient], cfg: &CrossValConfig) -> CrossValReport {
    println!("  {} arm: {} patients, {} epochs per fold", label, cohort.len(), cfg.train.epochs);
    let report = cross_validate(cohort, cfg, |o, _| {
        println!(
            "    fold {}: {} train samples, {} steps, final loss {:.4}, {:.0}s",
            o.fold, o.train_samples, o.steps, o.final_loss, o.seconds
        )
    })
    .expect("cross-validation");
    for t in &report.report.thresholds {
        println!("    AP{:.0} pooled {:.4}, per fold {}", t.iou * 100.0, t.ap, t.summary);
    }
    report
}

fn fold_mean(r: &CrossValReport, iou: f64) -> f64 {
    r.report
        .thresholds
        .iter()
        .find(|t| (t.iou - iou).abs() < 1e-12)
        .and_then(|t| t.fold_mean)
        .expect("fold-tagged report")
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |key: &str| filters.is_empty() || filters.iter().any(|f| key.contains(f.as_str()));
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    println!("acceptance: {} worker thread(s) available", cores);
    let mut out: Vec<Outcome> = Vec::new();

    if wanted("suites centerline") {
        println!("Centerline suite");
        let (c, s) = timed(centerline_suite);
        out.push(suite("Centerline suite", c, s, Some(5.0)));
    }
    if wanted("suites gradient") {
        println!("Gradient suite");
        let (rows, s) = timed(|| gradient_suite(100));
        let checks = rows
            .iter()
            .map(|r| Check {
                name: r.name,
                passed: r.passed(),
                detail: format!("n={} f64 {:.1e} (<1e-6), f32 {:.1e} (<1e-4)", r.instances, r.worst_f64, r.worst_f32),
            })
            .collect();
        out.push(suite("Gradient suite", checks, s, Some(120.0)));
    }
    if wanted("suites shape") {
        println!("Shape suite");
        let (c, s) = timed(shape_suite);
        out.push(suite("Shape suite", c, s, Some(10.0)));
    }
    if wanted("suites codec") {
        println!("Codec suite");
        let (c, s) = timed(codec_suite);
        out.push(suite("Codec suite", c, s, None));
    }
    if wanted("suites metric") {
        println!("Metric suite");
        let (c, s) = timed(metric_suite);
        out.push(suite("Metric suite", c, s, None));
    }

    let need_full = wanted("end-to-end") || wanted("ablation") || wanted("crown-vs-root");
    if need_full {
        let started = Instant::now();
        let (cohort, gen_s) = timed(|| generate_cohort(&PhantomConfig::default(), PATIENTS, COHORT_SEED, TILT_JITTER).expect("cohort"));
        println!("Generated {} phantoms (64x64x40) in {:.1}s", cohort.len(), gen_s);
        let full = run_arm("stem+decoder, crown", &cohort, &crossval_config(NetConfig::default(), Region::Crown));
        let e2e_seconds = started.elapsed().as_secs_f64();
        let ap75 = full.report.ap_at(0.75).expect("AP75");
        let mean75 = fold_mean(&full, 0.75);
        let within = full.report.histogram.fraction_below(10.0);
        if wanted("end-to-end") {
            out.push(Outcome {
                name: "End-to-end desk-scale".into(),
                passed: ap75 >= 0.80 && mean75 >= 0.80 && within >= 0.70 && e2e_seconds <= E2E_BUDGET_S,
                detail: format!(
                    "AP75 pooled {:.4}, fold mean {:.4} (>= 0.80); {:.1}% within 10 px (>= 70%); {:.0}s on {} thread(s) (<= {:.0}s)",
                    ap75,
                    mean75,
                    100.0 * within,
                    e2e_seconds,
                    cores,
                    E2E_BUDGET_S
                ),
            });
        }
        if wanted("ablation") {
            let ablated = run_arm("no stem, add fusion, crown", &cohort, &crossval_config(NetConfig::default().ablated(), Region::Crown));
            let (a, b) = (mean75, fold_mean(&ablated, 0.75));
            out.push(Outcome {
                name: "Ablation direction".into(),
                passed: a >= b,
                detail: format!("mean AP75 stem+decoder {:.4} vs ablated {:.4}", a, b),
            });
        }
        if wanted("crown-vs-root") {
            let root = run_arm("stem+decoder, root", &cohort, &crossval_config(NetConfig::default(), Region::Root));
            let (a, b) = (mean75, fold_mean(&root, 0.75));
            out.push(Outcome {
                name: "Crown-vs-root direction".into(),
                passed: b < a,
                detail: format!("mean AP75 crown {:.4} vs root {:.4}", a, b),
            });
        }
    }

    println!();
    for o in &out {
        println!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed = out.iter().filter(|o| !o.passed).count();
    println!("{} of {} criteria passed", out.len() - failed, out.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
