use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn gimtp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gimtp"))
        .args(args)
        .env_remove("GIMTP_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// A four-vehicle 1.5 s scene and a tiny run config over it.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        write(
            &f.path("scene.json"),
            &json!({
                "lanes": 3, "vehicles": 4, "duration_s": 1.5,
                "initial": [{"lane": 2, "pos_lon": 50.0, "speed": 27.0}],
                "maneuvers": [{"vehicle": 0, "start_s": 0.3, "duration_s": 1.0,
                               "kind": {"type": "lane_change", "side": "left"}}]
            }),
        );
        let o = gimtp(&["synth", "--spec", p(&f.path("scene.json")), "--out", p(&f.path("tracks.csv")), "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        f.config("run.json", json!({}));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Writes a run config with tiny dimensions, merged with `extra` at the
    /// top level and in `train`.
    fn config(&self, name: &str, extra: Value) -> PathBuf {
        let mut cfg = json!({
            "data": {"path": "tracks.csv", "manifest": {"history": 4, "horizon": 3}},
            "model": {"history": 4, "horizon": 3, "dgcn_width": 4, "mlp_v_width": 5,
                      "mlp_o_width": 5, "lat_width": 4, "lon_width": 4, "d1_width": 4,
                      "gru_width": 4, "d2_width": 4},
            "train": {"epochs": 3, "stage1_epochs": 1, "batch_size": 8},
            "output": {"dir": "out"},
            "seed": 1
        });
        for (k, v) in extra.as_object().unwrap() {
            if k == "train" {
                for (tk, tv) in v.as_object().unwrap() {
                    cfg["train"][tk] = tv.clone();
                }
            } else {
                cfg[k] = v.clone();
            }
        }
        let path = self.path(name);
        write(&path, &cfg);
        path
    }

    fn train(&self, config: &Path, out: &str) -> Output {
        gimtp(&["train", "--config", p(config), "--out", p(&self.path(out))])
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_row_count_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("one.json");
    write(&spec, &json!({"vehicles": 1, "duration_s": 2.0, "frame_rate": 10.0}));
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_eq!(code(&gimtp(&["synth", "--spec", p(&spec), "--out", p(&a), "--seed", "9"])), 0);
    assert_eq!(code(&gimtp(&["synth", "--spec", p(&spec), "--out", p(&b), "--seed", "9"])), 0);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1 + 20);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
}

#[test]
fn synth_rejects_zero_lanes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    write(&spec, &json!({"lanes": 0}));
    let o = gimtp(&["synth", "--spec", p(&spec), "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));
}

#[test]
fn train_is_deterministic_and_resumable() {
    let f = Fixture::new();
    let cfg = f.path("run.json");
    assert_eq!(code(&f.train(&cfg, "a")), 0);
    assert_eq!(code(&f.train(&cfg, "b")), 0);
    for name in ["checkpoint.bin", "metrics.jsonl"] {
        assert_eq!(fs::read(f.path("a").join(name)).unwrap(), fs::read(f.path("b").join(name)).unwrap());
    }
    let log = fs::read_to_string(f.path("a/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "stage", "lr", "loss", "mse", "nll_traj", "nll_m", "fg_mse"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    // continue a 3-epoch checkpoint up to 5 epochs
    let resume = f.config(
        "resume.json",
        json!({"train": {"epochs": 5}, "resume": "a/checkpoint.bin", "output": {"dir": "a"}}),
    );
    let o = gimtp(&["train", "--config", p(&resume)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(f.path("a/metrics.jsonl")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, [1, 2, 3, 4, 5]);
    let manifest = |path: PathBuf| -> Value {
        let bytes = fs::read(path).unwrap();
        let end = bytes.iter().position(|&b| b == b'\n').unwrap();
        serde_json::from_slice(&bytes[..end]).unwrap()
    };
    let before = manifest(f.path("b/checkpoint.bin"))["adam_step"].as_u64().unwrap();
    let after = manifest(f.path("a/checkpoint.bin"))["adam_step"].as_u64().unwrap();
    assert!(before > 0);
    assert_eq!(after * 3, before * 5);
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let f = Fixture::new();
    let cfg = f.config("zero.json", json!({"train": {"epochs": 0}}));
    assert_eq!(code(&f.train(&cfg, "z")), 0);
    let bytes = fs::read(f.path("z/checkpoint.bin")).unwrap();
    let end = bytes.iter().position(|&b| b == b'\n').unwrap();
    let m: Value = serde_json::from_slice(&bytes[..end]).unwrap();
    assert_eq!(m["epochs_completed"], 0);
    assert_eq!(m["adam_step"], 0);
    assert!(bytes[..end].starts_with(b"{\"format_version\":1"));
}

#[test]
fn config_errors_exit_two() {
    let f = Fixture::new();
    let bad = f.path("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&f.train(&bad, "x")), 2);

    let unknown = f.config("unknown.json", json!({"colour": "red"}));
    assert_eq!(code(&f.train(&unknown, "x")), 2);

    let missing = f.config("missing.json", json!({"data": {"path": "nowhere.csv", "manifest": {"history": 4, "horizon": 3}}}));
    assert_eq!(code(&f.train(&missing, "x")), 2);

    let zero = f.config("zero.json", json!({"model": {"history": 4, "horizon": 3, "dgcn_width": 0}}));
    assert_eq!(code(&f.train(&zero, "x")), 2);

    let o = Command::new(env!("CARGO_BIN_EXE_gimtp"))
        .args(["train", "--config", p(&f.path("run.json"))])
        .env("GIMTP_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn numeric_failure_exits_one() {
    let f = Fixture::new();
    let cfg = f.config("hot.json", json!({"train": {"lr": 1e300, "epochs": 4}}));
    let o = f.train(&cfg, "hot");
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}

#[test]
fn ablation_flags_reach_the_checkpoint() {
    let f = Fixture::new();
    let o = gimtp(&["train", "--config", p(&f.path("run.json")), "--out", p(&f.path("abl")), "--no-fg", "--no-ff", "--seed", "4"]);
    assert_eq!(code(&o), 0);
    let bytes = fs::read(f.path("abl/checkpoint.bin")).unwrap();
    let end = bytes.iter().position(|&b| b == b'\n').unwrap();
    let m: Value = serde_json::from_slice(&bytes[..end]).unwrap();
    assert_eq!(m["model"]["ablation"], json!({"no_dgcn": false, "no_fg": true, "no_ff": true}));
}

fn trained(f: &Fixture) -> PathBuf {
    assert_eq!(code(&f.train(&f.path("run.json"), "m")), 0);
    f.path("m/checkpoint.bin")
}

#[test]
fn predict_single_window() {
    let f = Fixture::new();
    let ckpt = trained(&f);
    let out = f.path("pred.json");
    let csv = f.path("tracks.csv");
    let base = ["predict", "--checkpoint", p(&ckpt), "--data", p(&csv), "--target", "0", "--frame", "5"];
    let o = gimtp(&[&base[..], &["--out", p(&out)]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let recs = read_json(&out);
    let recs = recs.as_array().unwrap();
    assert_eq!(recs.len(), 1);
    let modes = recs[0]["modes"].as_array().unwrap();
    assert_eq!(modes.len(), 9);
    let total: f64 = modes.iter().map(|m| m["probability"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(recs[0]["fused"]["steps"].as_array().unwrap().len(), 3);

    // fully forced fused trajectory equals the matching mode
    let forced = f.path("forced.json");
    let o = gimtp(&[&base[..], &["--out", p(&forced), "--force-lat", "LLC", "--force-lon", "ACC"]].concat());
    assert_eq!(code(&o), 0);
    let rec = &read_json(&forced)[0];
    let mode = rec["modes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["lat"] == "LLC" && m["lon"] == "ACC")
        .unwrap();
    assert_eq!(rec["fused"], mode["trajectory"]);

    // lateral-only forcing differs from the unforced prediction
    let lat_only = f.path("lat.json");
    assert_eq!(code(&gimtp(&[&base[..], &["--out", p(&lat_only), "--force-lat", "LLC"]].concat())), 0);
    assert_ne!(read_json(&lat_only)[0]["fused"], recs[0]["fused"]);

    assert_eq!(code(&gimtp(&[&base[..], &["--out", p(&out), "--force-lat", "UP"]].concat())), 2);
}

#[test]
fn eval_report() {
    let f = Fixture::new();
    let ckpt = trained(&f);
    let out = f.path("report.json");
    let o = gimtp(&["eval", "--checkpoint", p(&ckpt), "--data", p(&f.path("tracks.csv")), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out);
    assert!(r["samples"].as_u64().unwrap() > 0);
    // F = 3 is shorter than every reporting horizon
    assert_eq!(r["rmse"], json!([]));
    let acc = r["lat_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let o = gimtp(&["eval", "--checkpoint", p(&f.path("none.bin")), "--data", p(&f.path("tracks.csv")), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn graph_dump() {
    let f = Fixture::new();
    let out = f.path("graph.json");
    let o = gimtp(&[
        "graph", "--data", p(&f.path("tracks.csv")), "--config", p(&f.path("run.json")),
        "--target", "0", "--frame", "5", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g = read_json(&out);
    for key in ["neigh", "dist", "risk", "combined"] {
        let t = g[key].as_array().unwrap();
        assert_eq!(t.len(), 4);
        for row in t.iter().flat_map(|m| m.as_array().unwrap()) {
            assert_eq!(row.as_array().unwrap().len(), 9);
            assert!(row.as_array().unwrap().iter().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
        }
    }
    assert!(g.get("future").is_none());

    // reload and compare with a direct computation
    use gimtp_core::data::{load_csv, make_windows, CsvSchema, DatasetManifest, WindowConfig};
    let manifest = DatasetManifest { history: 4, horizon: 3, ..Default::default() };
    let tracks = load_csv(&f.path("tracks.csv"), &CsvSchema::default(), &manifest).unwrap();
    let wc = WindowConfig { history: 4, horizon: 3, targets: Some(vec![0]), ..Default::default() };
    let w = make_windows(&tracks, &wc).unwrap().into_iter().find(|w| w.frame == 5).unwrap();
    let adj = gimtp_core::adjacency::build_adjacency(&w).unwrap();
    let flat: Vec<f64> = g["combined"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|m| m.as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap().iter().map(|v| v.as_f64().unwrap())))
        .collect();
    assert_eq!(flat, adj.combined.data());

    let ckpt = trained(&f);
    let fut = f.path("future.json");
    let csv = f.path("tracks.csv");
    let args = ["graph", "--data", p(&csv), "--target", "0", "--frame", "5"];
    assert_eq!(code(&gimtp(&[&args[..], &["--out", p(&fut), "--future"]].concat())), 2);
    let o = gimtp(&[&args[..], &["--out", p(&fut), "--future", "--checkpoint", p(&ckpt)]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(&fut)["future"].as_array().unwrap().len(), 3);

    // without a frame several windows match
    assert_eq!(code(&gimtp(&["graph", "--data", p(&f.path("tracks.csv")), "--config", p(&f.path("run.json")), "--out", p(&out)])), 2);
}

#[test]
fn lone_target_graph_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("one.json");
    write(&spec, &json!({"vehicles": 1, "duration_s": 1.0}));
    let csv = dir.path().join("one.csv");
    assert_eq!(code(&gimtp(&["synth", "--spec", p(&spec), "--out", p(&csv)])), 0);
    let cfg = dir.path().join("cfg.json");
    write(&cfg, &json!({"data": {"path": "one.csv", "manifest": {"history": 4, "horizon": 3}},
                        "model": {"history": 4, "horizon": 3}}));
    let out = dir.path().join("g.json");
    let o = gimtp(&["graph", "--data", p(&csv), "--config", p(&cfg), "--frame", "3", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g = read_json(&out);
    for key in ["neigh", "dist", "risk", "combined"] {
        let all_zero = g[key]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|m| m.as_array().unwrap())
            .flat_map(|r| r.as_array().unwrap())
            .all(|v| v.as_f64().unwrap() == 0.0);
        assert!(all_zero, "{key}");
    }
}
