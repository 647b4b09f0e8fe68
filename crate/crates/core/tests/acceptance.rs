//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). It exits non-zero on a FAIL
//! only when `GIMTP_ACCEPT_STRICT=1`, so that the workspace test run still
//! reports the remaining suites.

mod common;

use std::time::Instant;

use common::*;
use gimtp_core::data::synth::benchmark_windows;
use gimtp_core::data::{GroupWindow, LatIntention};
use gimtp_core::encoder::{chebyshev, transition_matrices};
use gimtp_core::eval::{evaluate, EvalReport};
use gimtp_core::model::{Ablation, Gimtp, ModelConfig};
use gimtp_core::train::{train, Stage, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut cases = vec![
        ("full/mse", tiny_config(), Stage::Mse, true),
        ("full/nll", tiny_config(), Stage::Nll, true),
        ("full/nll-predicted", tiny_config(), Stage::Nll, false),
    ];
    for (name, ablation) in [
        ("no_dgcn", Ablation { no_dgcn: true, ..Default::default() }),
        ("no_fg", Ablation { no_fg: true, ..Default::default() }),
        ("no_ff", Ablation { no_ff: true, ..Default::default() }),
    ] {
        cases.push((name, ModelConfig { ablation, ..tiny_config() }, Stage::Nll, true));
    }
    let mut worst = (0.0, String::new());
    for (name, config, stage, teacher) in cases {
        let (e, param) = pipeline_grad_error(config, stage, teacher);
        if e > worst.0 {
            worst = (e, format!("{name}:{param}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-4 && secs < 60.0,
        format!("worst relative error {:.2e} ({}), {secs:.1} s", worst.0, worst.1),
    )
}

fn criterion_2() -> Outcome {
    for i in 0..1000 {
        let states = random_states(&mut rng(10_000 + i), 30);
        if let Some(v) = adjacency_violation(&states) {
            return outcome(false, format!("window {i}: {v}"));
        }
    }
    outcome(true, "1000 randomized windows")
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut r = rng(3);
    for _ in 0..1000 {
        let x = random_tensor(&mut r, &[3, 3], 1.0);
        for k in 0..=4 {
            worst = worst.max(chebyshev(k, &x).unwrap().max_abs_diff(&chebyshev_direct(k, &x)));
        }
    }
    let mut row_err: f64 = 0.0;
    for i in 0..1000usize {
        let empty: Vec<usize> = (0..5).filter(|j| (i >> j) & 1 == 1).collect();
        let a = random_adjacency(&mut r, 2, 5, &empty);
        let pair = transition_matrices(&a).unwrap();
        for m in [&pair.forward, &pair.backward] {
            for row in m.data().chunks(5) {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
                if row.iter().any(|&v| v < 0.0) {
                    row_err = f64::INFINITY;
                }
            }
        }
    }
    outcome(
        worst < 1e-10 && row_err < 1e-12,
        format!("chebyshev error {worst:.2e}, row-sum error {row_err:.2e}"),
    )
}

fn criterion_4() -> Outcome {
    let [nll, ce, mse] = loss_closed_form_errors(50);
    outcome(
        nll <= 1e-9 && ce <= 1e-9 && mse <= 1e-12,
        format!("nll {nll:.1e}, cross-entropy {ce:.1e}, mse {mse:.1e}"),
    )
}

/// Desk-scale widths; optimizer settings are the defaults plus clipping.
fn overfit_config(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        dgcn_width: 32,
        mlp_v_width: 64,
        mlp_o_width: 64,
        lat_width: 64,
        lon_width: 64,
        d1_width: 64,
        gru_width: 64,
        d2_width: 64,
        out_scale: 10.0,
        ablation,
        ..Default::default()
    }
}

fn overfit_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        clip_norm: Some(10.0),
        ..Default::default()
    }
}

struct Run {
    model: Gimtp,
    report: EvalReport,
    secs: f64,
}

fn overfit(windows: &[GroupWindow], ablation: Ablation) -> Run {
    let start = Instant::now();
    let mut model = Gimtp::new(overfit_config(ablation), 1).unwrap();
    let samples: Vec<_> = windows.iter().map(|w| model.sample(w).unwrap()).collect();
    train(&mut model, &samples, &overfit_train_config(300), 0, |_, _| Ok(())).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let report = evaluate(&model, windows).unwrap();
    Run { model, report, secs }
}

fn mean_rmse(r: &EvalReport) -> f64 {
    r.rmse.iter().map(|h| h.rmse).sum::<f64>() / r.rmse.len() as f64
}

fn criterion_5(run: &Run) -> Outcome {
    let r = &run.report;
    let rmse_ok = r.rmse.len() == 5 && r.rmse.iter().all(|h| h.rmse < 0.3);
    let acc_ok = r.lat_accuracy == 1.0 && r.lon_accuracy == 1.0;
    let rmse: Vec<String> = r.rmse.iter().map(|h| format!("{}:{:.3}", h.frame, h.rmse)).collect();
    outcome(
        rmse_ok && acc_ok && run.secs < 600.0,
        format!(
            "rmse [{}] m, accuracy lat {:.4} lon {:.4}, {:.0} s",
            rmse.join(" "),
            r.lat_accuracy,
            r.lon_accuracy,
            run.secs
        ),
    )
}

fn criterion_6(run: &Run, windows: &[GroupWindow]) -> Outcome {
    let f = run.model.config.horizon;
    let mut checked = 0;
    let mut ordered = 0;
    for w in windows.iter().filter(|w| w.intentions.has_lat(LatIntention::LeftChange)) {
        let p = run.model.predict(w).unwrap();
        let lon = w.intentions.lon[f - 1];
        let end = |lat: LatIntention| {
            let m = p.modes.iter().find(|m| m.lat == lat && m.lon == lon).unwrap();
            m.trajectory.steps[f - 1].mu_y
        };
        let (llc, lk, rlc) = (end(LatIntention::LeftChange), end(LatIntention::LaneKeep), end(LatIntention::RightChange));
        checked += 1;
        // Left is toward decreasing lateral position in the benchmark scenes.
        if llc < lk && lk < rlc {
            ordered += 1;
        }
    }
    outcome(
        checked > 0 && ordered == checked,
        format!("{ordered}/{checked} left-change windows ordered LLC < LK < RLC"),
    )
}

fn criterion_7(full: &Run, windows: &[GroupWindow]) -> Outcome {
    let base = mean_rmse(&full.report);
    let mut pass = true;
    let mut parts = vec![format!("full {base:.3}")];
    for (name, ablation) in [
        ("no_dgcn", Ablation { no_dgcn: true, ..Default::default() }),
        ("no_fg", Ablation { no_fg: true, ..Default::default() }),
        ("no_ff", Ablation { no_ff: true, ..Default::default() }),
    ] {
        let v = mean_rmse(&overfit(windows, ablation).report);
        pass &= base <= v;
        parts.push(format!("{name} {v:.3}"));
    }
    outcome(pass, format!("mean rmse over horizons: {}", parts.join(", ")))
}

fn criterion_8() -> Outcome {
    let windows = benchmark_windows(8, 21).unwrap();
    let run = || {
        let mut m = Gimtp::new(overfit_config(Ablation::default()), 5).unwrap();
        train_bytes(&mut m, &windows, &overfit_train_config(3), 0)
    };
    let (a, b) = (run(), run());
    outcome(
        a.0 == b.0 && a.1 == b.1,
        format!("checkpoint {} bytes, metrics log {} bytes", a.0.len(), a.1.len()),
    )
}

fn criterion_9() -> Outcome {
    let mut worst_modes: f64 = 0.0;
    let mut worst_fusion: f64 = 0.0;
    for seed in 0..1000 {
        let model = tiny_model(tiny_config(), 50_000 + seed);
        let w = tiny_window(seed);
        let p = model.predict(&w).unwrap();
        let total: f64 = p.modes.iter().map(|m| m.probability).sum();
        worst_modes = worst_modes.max((total - 1.0).abs());
        let u = model.fusion_weights(&w, &p.intentions.as_matrix()).unwrap().unwrap();
        let (l, f) = (u.shape()[0], u.shape()[1]);
        for t in 0..f {
            let s: f64 = (0..l).map(|i| u.get(&[i, t])).sum();
            worst_fusion = worst_fusion.max((s - 1.0).abs());
        }
    }
    outcome(
        worst_modes <= 1e-9 && worst_fusion <= 1e-9,
        format!("mode sum error {worst_modes:.1e}, fusion sum error {worst_fusion:.1e}"),
    )
}

fn report(n: usize, o: &Outcome) {
    println!("criterion {n} [PRIMARY] {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    gimtp_core::init_threads_from_env().unwrap();
    let mut all = Vec::new();
    for (n, f) in [
        (1, criterion_1 as fn() -> Outcome),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
    ] {
        let o = f();
        report(n, &o);
        all.push(o.pass);
    }

    let windows = benchmark_windows(32, 7).unwrap();
    let full = overfit(&windows, Ablation::default());
    for (n, o) in [(5, criterion_5(&full)), (6, criterion_6(&full, &windows))] {
        report(n, &o);
        all.push(o.pass);
    }
    let o = criterion_7(&full, &windows);
    report(7, &o);
    all.push(o.pass);

    for (n, f) in [(8, criterion_8 as fn() -> Outcome), (9, criterion_9)] {
        let o = f();
        report(n, &o);
        all.push(o.pass);
    }

    let passed = all.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", all.len());
    if passed < all.len() && std::env::var("GIMTP_ACCEPT_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
