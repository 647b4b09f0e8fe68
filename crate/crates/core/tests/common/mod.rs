#![allow(dead_code)]

use gimtp_core::adjacency::{build_from_states, SlotState};
use gimtp_core::data::synth::{synth_generate, InitialState, ScenarioSpec};
use gimtp_core::data::{make_windows, slot_grid, GroupWindow, WindowConfig, NUM_SLOTS};
use gimtp_core::model::{ModelConfig, Gimtp};
use gimtp_core::params::{ParamGrads, ParameterStore};
use gimtp_core::tape::{Tape, Var};
use gimtp_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den < 1e-12 {
        0.0
    } else {
        diff / den
    }
}

/// Central differences of `f` over every scalar of every parameter, compared
/// tensor by tensor against `analytic`. Returns the worst relative error and
/// the parameter it occurred in.
pub fn check_params(
    store: &ParameterStore,
    analytic: &ParamGrads,
    eps: f64,
    f: impl Fn(&ParameterStore) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let mut probe = store.clone();
    for id in store.ids() {
        let a = analytic
            .get(id)
            .unwrap_or_else(|| panic!("no analytic gradient for {}", store.name(id)));
        let mut numeric = vec![0.0; a.len()];
        for k in 0..a.len() {
            let orig = probe.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + eps;
            let up = f(&probe);
            probe.value_mut(id).data_mut()[k] = orig - eps;
            let down = f(&probe);
            probe.value_mut(id).data_mut()[k] = orig;
            numeric[k] = (up - down) / (2.0 * eps);
        }
        let e = rel_err(a.data(), &numeric);
        if e > worst.0 {
            worst = (e, store.name(id).to_string());
        }
    }
    worst
}

/// Gradient of a scalar tape function of free leaves, checked against central
/// differences. `build` receives the leaf vars and returns the loss.
pub fn check_leaves(
    inputs: &[Tensor],
    eps: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let a = grads
            .get(&tape, vars[i])
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        let mut probe = inputs.to_vec();
        for k in 0..input.len() {
            let orig = input.data()[k];
            probe[i].data_mut()[k] = orig + eps;
            let up = eval(&probe);
            probe[i].data_mut()[k] = orig - eps;
            let down = eval(&probe);
            probe[i].data_mut()[k] = orig;
            numeric[k] = (up - down) / (2.0 * eps);
        }
        worst = worst.max(rel_err(a.data(), &numeric));
    }
    worst
}

/// Model dimensions small enough for exhaustive finite differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        history: 4,
        horizon: 3,
        dgcn_width: 5,
        mlp_v_width: 5,
        mlp_o_width: 5,
        lat_width: 4,
        lon_width: 4,
        d1_width: 4,
        gru_width: 4,
        d2_width: 4,
        ..Default::default()
    }
}

/// A three-vehicle scene cut into one T=4, F=3 window around vehicle 0.
/// The seed also shifts the speeds so that different seeds differ.
pub fn tiny_window(seed: u64) -> GroupWindow {
    let dv = (seed % 7) as f64 * 0.5;
    let spec = ScenarioSpec {
        lanes: 3,
        vehicles: 3,
        duration_s: 0.7,
        frame_rate: 10.0,
        initial: vec![
            InitialState { lane: 2, pos_lon: 0.0, speed: 25.0 + dv, mass: 1.0 },
            InitialState { lane: 2, pos_lon: 18.0, speed: 22.0 - dv, mass: 2.5 },
            InitialState { lane: 1, pos_lon: -12.0, speed: 28.0, mass: 1.0 },
        ],
        ..Default::default()
    };
    let tracks = synth_generate(&spec, seed).unwrap();
    let cfg = WindowConfig {
        history: 4,
        horizon: 3,
        targets: Some(vec![0]),
        ..Default::default()
    };
    make_windows(&tracks, &cfg).unwrap().remove(0)
}

pub fn tiny_model(config: ModelConfig, seed: u64) -> Gimtp {
    Gimtp::new(config, seed).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst relative finite-difference error of the full loss over every
/// parameter of a tiny model.
pub fn pipeline_grad_error(
    config: ModelConfig,
    stage: gimtp_core::train::Stage,
    teacher_forcing: bool,
) -> (f64, String) {
    use gimtp_core::train::{sample_gradients, sample_loss, TrainConfig};
    let mut model = tiny_model(config, 11);
    // Zero biases put some ReLU inputs exactly on the kink; jitter them off.
    let mut r = rng(12);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.value_mut(id).data_mut() {
            *v += r.gen_range(-0.05..0.05);
        }
    }
    let s = model.sample(&tiny_window(3)).unwrap();
    let cfg = TrainConfig { teacher_forcing, ..Default::default() };
    let (g, _) = sample_gradients(&model, &s, stage, &cfg).unwrap();
    check_params(&model.store, &g, 1e-5, |store| {
        let mut m = model.clone();
        m.store = store.clone();
        sample_loss(&m, &s, stage, &cfg).unwrap().loss
    })
}

/// Random per-step slot states with the target always present. Roughly half
/// of the other slots are occupied; some vehicles are stationary relative to
/// the target so that gated and non-gated pairs both occur.
pub fn random_states(r: &mut ChaCha8Rng, steps: usize) -> Vec<Vec<Option<SlotState>>> {
    let occupied: Vec<bool> = (0..NUM_SLOTS).map(|s| s == 0 || r.gen_bool(0.5)).collect();
    (0..steps)
        .map(|_| {
            (0..NUM_SLOTS)
                .map(|s| {
                    if !occupied[s] || (s > 0 && r.gen_bool(0.05)) {
                        return None;
                    }
                    let still = r.gen_bool(0.2);
                    Some(SlotState {
                        pos_lon: r.gen_range(-60.0..60.0),
                        pos_lat: r.gen_range(-6.0..6.0),
                        vel_lon: if still { 25.0 } else { r.gen_range(15.0..35.0) },
                        vel_lat: if still { 0.0 } else { r.gen_range(-1.5..1.5) },
                        mass: if r.gen_bool(0.2) { 2.5 } else { 1.0 },
                    })
                })
                .collect()
        })
        .collect()
}

/// Independent re-evaluation of the directed risk force of `i` on `j`.
pub fn brute_force(i: &SlotState, j: &SlotState) -> (f64, f64) {
    let axis = |s_i: f64, s_j: f64, d_i: f64, d_j: f64| {
        if s_i - s_j > 0.0 {
            i.mass * s_i.abs() * (s_i - s_j) / (2.0 * f64::max((d_i - d_j).abs(), 0.1))
        } else {
            0.0
        }
    };
    (
        axis(i.vel_lon, j.vel_lon, i.pos_lon, j.pos_lon),
        axis(i.vel_lat, j.vel_lat, i.pos_lat, j.pos_lat),
    )
}

/// Checks every adjacency property on one set of states; returns the first
/// violation.
pub fn adjacency_violation(states: &[Vec<Option<SlotState>>]) -> Option<String> {
    let adj = build_from_states(states, &slot_grid()).unwrap();
    let n = NUM_SLOTS;
    for (t, row) in states.iter().enumerate() {
        let mut forces = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    if let (Some(a), Some(b)) = (&row[i], &row[j]) {
                        let (fx, fy) = brute_force(a, b);
                        forces.push((i, j, fx.hypot(fy), a.vel_lon <= b.vel_lon && a.vel_lat <= b.vel_lat));
                    }
                }
            }
        }
        let mean = forces.iter().map(|f| f.2).sum::<f64>() / forces.len().max(1) as f64;
        let var = forces.iter().map(|f| (f.2 - mean).powi(2)).sum::<f64>() / forces.len().max(1) as f64;
        let sd = var.sqrt();
        for &(i, j, f, gated) in &forces {
            let got = adj.risk.get(&[t, i, j]);
            let want = if forces.len() >= 2 && sd > 0.0 { (f / sd).tanh() } else { 0.0 };
            if (got - want).abs() > 1e-9 {
                return Some(format!("risk[{t},{i},{j}] = {got}, brute force {want}"));
            }
            if gated && got != 0.0 {
                return Some(format!("risk[{t},{i},{j}] = {got} despite non-positive closing speed"));
            }
        }
        for i in 0..n {
            for j in 0..n {
                let c = adj.combined.get(&[t, i, j]);
                if !(0.0..=1.0).contains(&c) {
                    return Some(format!("combined[{t},{i},{j}] = {c}"));
                }
                for (name, m) in [("neigh", &adj.neigh), ("dist", &adj.dist)] {
                    if m.get(&[t, i, j]) != m.get(&[t, j, i]) {
                        return Some(format!("{name} asymmetric at [{t},{i},{j}]"));
                    }
                }
                if row[i].is_none() || row[j].is_none() {
                    for (name, m) in [("neigh", &adj.neigh), ("dist", &adj.dist), ("risk", &adj.risk), ("combined", &adj.combined)] {
                        if m.get(&[t, i, j]) != 0.0 {
                            return Some(format!("{name}[{t},{i},{j}] nonzero at an empty slot"));
                        }
                    }
                }
            }
        }
    }
    None
}

/// `T_k(X)` from the explicit power-sum form, for k ≤ 4.
pub fn chebyshev_direct(k: usize, x: &Tensor) -> Tensor {
    const COEFFS: [&[f64]; 5] = [
        &[1.0],
        &[0.0, 1.0],
        &[-1.0, 0.0, 2.0],
        &[0.0, -3.0, 0.0, 4.0],
        &[1.0, 0.0, -8.0, 0.0, 8.0],
    ];
    let n = x.shape()[0];
    let mut power = Tensor::eye(n);
    let mut out = Tensor::zeros(&[n, n]);
    for (p, &c) in COEFFS[k].iter().enumerate() {
        if p > 0 {
            power = power.matmul(x).unwrap();
        }
        for (o, v) in out.data_mut().iter_mut().zip(power.data()) {
            *o += c * v;
        }
    }
    out
}

/// Non-negative `[T, N, N]` adjacency with zero diagonal; `empty_rows` are
/// cleared entirely.
pub fn random_adjacency(r: &mut ChaCha8Rng, t: usize, n: usize, empty_rows: &[usize]) -> Tensor {
    let mut a = random_tensor(r, &[t, n, n], 1.0).map(f64::abs);
    for k in 0..t {
        for i in 0..n {
            a.set(&[k, i, i], 0.0);
            if empty_rows.contains(&i) {
                for j in 0..n {
                    a.set(&[k, i, j], 0.0);
                }
            }
        }
    }
    a
}

/// Absolute deviations of the three loss closed forms: perfect-fit NLL
/// against F·log(2π), uniform intention cross-entropy against 2·ln 3 and the
/// MSE of a unit longitudinal offset against 1.
pub fn loss_closed_form_errors(horizon: usize) -> [f64; 3] {
    use gimtp_core::data::{IntentionMatrix, LatIntention, LonIntention};
    use gimtp_core::decoder::{GaussianSequence, GaussianStep};
    use gimtp_core::intention::IntentionDistribution;
    use gimtp_core::train::{mse_loss, nll_intention, nll_traj};
    let mut r = rng(31);
    let y = random_tensor(&mut r, &[horizon, 2], 50.0);
    let seq = GaussianSequence {
        steps: (0..horizon)
            .map(|t| GaussianStep {
                mu_x: y.get(&[t, 0]),
                mu_y: y.get(&[t, 1]),
                sigma_x: 1.0,
                sigma_y: 1.0,
                rho: 0.0,
            })
            .collect(),
    };
    let nll = nll_traj(&seq, &y).unwrap();
    let uniform = IntentionDistribution {
        p_lat: vec![[1.0 / 3.0; 3]; horizon],
        p_lon: vec![[1.0 / 3.0; 3]; horizon],
    };
    let truth = IntentionMatrix::uniform(horizon, LatIntention::LeftChange, LonIntention::Decelerate);
    let ce = nll_intention(&uniform, &truth).unwrap();
    let mut shifted = y.clone();
    for t in 0..horizon {
        shifted.set(&[t, 0], y.get(&[t, 0]) + 1.0);
    }
    let mse = mse_loss(&shifted, &y).unwrap();
    [
        (nll - horizon as f64 * (2.0 * std::f64::consts::PI).ln()).abs(),
        (ce - 2.0 * 3f64.ln()).abs(),
        (mse - 1.0).abs(),
    ]
}

/// Trains and returns the checkpoint bytes and the JSON-lines metrics log.
pub fn train_bytes(
    model: &mut Gimtp,
    windows: &[GroupWindow],
    cfg: &gimtp_core::train::TrainConfig,
    start_epoch: usize,
) -> (Vec<u8>, String) {
    let samples: Vec<_> = windows.iter().map(|w| model.sample(w).unwrap()).collect();
    let mut log = String::new();
    gimtp_core::train::train(model, &samples, cfg, start_epoch, |m, _| {
        log.push_str(&serde_json::to_string(m).unwrap());
        log.push('\n');
        Ok(())
    })
    .unwrap();
    let mut ckpt = Vec::new();
    gimtp_core::checkpoint::write_checkpoint(model, cfg.epochs, &mut ckpt).unwrap();
    (ckpt, log)
}
