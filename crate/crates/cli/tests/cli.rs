//! End-to-end runs of the binary on a deliberately tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use serde_json::Value;
use steerlab_core::checkpoint::load_model;

const TINY: &str = r#"
seed = 3
[corpus]
n_sequences = 400
[model]
d_model = 16
n_heads = 2
d_mlp = 32
[train]
steps = 40
eval_every = 20
[hook]
transcripts = 100
[sae]
steps = 100
expansion = 2
[screen]
omega_cap = 4.0
coherence_floor = 0.2
[dashboard]
feature_id = 3
[sweep]
feature_id = 3
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_steerlab"))
}

struct Run {
    code: i32,
    stderr: String,
}

fn steerlab(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Run {
    let o = bin()
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("STEERLAB_WORKERS")
        .output()
        .expect("binary runs");
    Run {
        code: o.status.code().unwrap_or(-1),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn digests(dir: &Path) -> Value {
    manifest(dir)["outputs"].clone()
}

/// One trained tiny stack shared by the tests, plus a config pointing at it.
fn stack() -> &'static (tempfile::TempDir, PathBuf) {
    static STACK: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    STACK.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("train.toml");
        fs::write(&cfg, TINY).unwrap();
        let r = steerlab("train", &cfg, &dir.path().join("trained"), &[]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        let use_cfg = dir.path().join("use.toml");
        fs::write(&use_cfg, format!("{TINY}[checkpoints]\nmodel = \"trained/model.ckpt\"\nsae = \"trained/sae.ckpt\"\n")).unwrap();
        (dir, use_cfg)
    })
}

fn scratch(name: &str) -> PathBuf {
    stack().0.path().join(name)
}

#[test]
fn train_writes_checkpoints_traces_and_manifest() {
    let dir = stack().0.path().join("trained");
    for f in ["model.ckpt", "sae.ckpt", "train_trace.csv", "evals.csv", "sae_trace.csv"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let m = manifest(&dir);
    assert_eq!(m["command"], "train");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 5);
    assert!(m["summary"]["held_out"]["teacher_accuracy"].is_number());
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    let trace = fs::read_to_string(dir.join("train_trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,train_loss"));
    assert_eq!(trace.lines().count(), 41);
}

#[test]
fn resume_matches_a_straight_run() {
    let d = scratch("resume");
    fs::create_dir_all(&d).unwrap();
    let half = d.join("half.toml");
    fs::write(&half, TINY.replace("steps = 40", "steps = 20")).unwrap();
    assert_eq!(steerlab("train", &half, &d.join("a"), &[]).code, 0);
    let rest = d.join("rest.toml");
    fs::write(&rest, format!("{TINY}[checkpoints]\nresume = \"a/model.ckpt\"\n")).unwrap();
    let r = steerlab("train", &rest, &d.join("b"), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let straight = load_model(&stack().0.path().join("trained/model.ckpt")).unwrap().model;
    let resumed = load_model(&d.join("b/model.ckpt")).unwrap().model;
    assert_eq!(straight.params(), resumed.params());
}

#[test]
fn screen_is_independent_of_worker_count() {
    let cfg = &stack().1;
    let a = scratch("screen1");
    let b = scratch("screen4");
    assert_eq!(steerlab("screen", cfg, &a, &["--workers", "1"]).code, 0);
    let r = steerlab("screen", cfg, &b, &["--workers", "4"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(digests(&a), digests(&b));

    let report: Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    let screened = report["records"].as_array().unwrap().len();
    let hist = fs::read_to_string(a.join("delta_histogram.csv")).unwrap();
    let total: usize = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, screened);
    let csv = fs::read_to_string(a.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), screened + 1);
}

#[test]
fn tail_grids_are_indexed_by_defection_counts() {
    let cfg = scratch("tails.toml");
    fs::write(&cfg, fs::read_to_string(&stack().1).unwrap().replace("coherence_floor = 0.2", "coherence_floor = 0.2\ntail_threshold = 0.0")).unwrap();
    let out = scratch("tails");
    assert_eq!(steerlab("screen", &cfg, &out, &[]).code, 0);
    let tails: Value = serde_json::from_slice(&fs::read(out.join("tails.json")).unwrap()).unwrap();
    let tails = tails.as_array().unwrap();
    assert!(!tails.is_empty());
    for t in tails {
        for panel in ["minus", "zero", "plus"] {
            let g = t[panel].as_array().unwrap();
            assert_eq!(g.len(), 4);
            assert!(g.iter().all(|row| row.as_array().unwrap().len() == 4));
        }
        assert!(out.join(format!("tails/feature_{}.svg", t["feature_id"])).exists());
    }
}

#[test]
fn sweep_has_one_row_per_grid_point_and_history() {
    let out = scratch("sweep");
    let r = steerlab("sweep", &stack().1, &out, &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let m = manifest(&out);
    let grid = m["summary"]["grid"].as_array().unwrap();
    assert!(grid.iter().any(|w| w.as_f64() == Some(0.0)));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + grid.len() * 64);
    assert!(m["summary"]["monotone_fraction"].is_number());

    // every curve passes through its unsteered value at ω = 0
    let model = load_model(&stack().0.path().join("trained/model.ckpt")).unwrap().model;
    let histories = steerlab_core::enumerate_histories(3).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[1].parse::<f64>().unwrap() != 0.0 {
            continue;
        }
        let h = &histories[f[0].parse::<usize>().unwrap()];
        let tokens = steerlab_core::lm::render_prompt(model.vocab(), h, 256).unwrap();
        let d = model.next_token_distribution(&tokens, 1.0, None).unwrap();
        assert_eq!(f[3].parse::<f64>().unwrap(), d.prob(model.vocab().blue()));
    }
}

#[test]
fn dashboard_reruns_are_byte_identical_and_flag_truncation() {
    let a = scratch("dash-a");
    let b = scratch("dash-b");
    assert_eq!(steerlab("dashboard", &stack().1, &a, &[]).code, 0);
    assert_eq!(steerlab("dashboard", &stack().1, &b, &[]).code, 0);
    assert_eq!(fs::read(a.join("density.svg")).unwrap(), fs::read(b.join("density.svg")).unwrap());
    assert_eq!(digests(&a), digests(&b));

    let cfg = scratch("dash-big.toml");
    fs::write(&cfg, fs::read_to_string(&stack().1).unwrap().replace("[dashboard]\n", "[dashboard]\nk = 1000000\n")).unwrap();
    let c = scratch("dash-big");
    assert_eq!(steerlab("dashboard", &cfg, &c, &[]).code, 0);
    assert_eq!(manifest(&c)["summary"]["truncated"], true);
}

#[test]
fn simulate_is_reproducible_and_wsls_alternates() {
    let cfg = scratch("sim.toml");
    fs::write(
        &cfg,
        "seed = 5\n[simulate]\nn_games = 20\nlengths = { min = 40, max = 40 }\np2 = { kind = \"random_defector\", p_defect = 1.0 }\nopponent_sweep = [1.0, 1.0]\n",
    )
    .unwrap();
    let (a, b) = (scratch("sim-a"), scratch("sim-b"));
    assert_eq!(steerlab("simulate", &cfg, &a, &[]).code, 0);
    assert_eq!(steerlab("simulate", &cfg, &b, &["--workers", "3"]).code, 0);
    assert_eq!(digests(&a), digests(&b));
    let csv = fs::read_to_string(a.join("games.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let p1_defect: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
        assert_eq!(p1_defect, 0.5);
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    // config errors
    let bad = scratch("unknown.toml");
    fs::write(&bad, "sede = 1\n").unwrap();
    assert_eq!(steerlab("simulate", &bad, &scratch("x1"), &[]).code, 2);
    let empty = scratch("empty-policy.toml");
    fs::write(&empty, "[simulate]\np1 = {}\n").unwrap();
    assert_eq!(steerlab("simulate", &empty, &scratch("x2"), &[]).code, 2);
    // missing checkpoints
    let none = scratch("none.toml");
    fs::write(&none, "").unwrap();
    assert_eq!(steerlab("screen", &none, &scratch("x3"), &[]).code, 2);
    assert_eq!(steerlab("sweep", &none, &scratch("x4"), &[]).code, 2);
    // refusing to overwrite
    let taken = scratch("taken");
    fs::create_dir_all(&taken).unwrap();
    fs::write(taken.join("keep"), "x").unwrap();
    let ok = scratch("ok.toml");
    fs::write(&ok, "[simulate]\nn_games = 3\n").unwrap();
    assert_eq!(steerlab("simulate", &ok, &taken, &[]).code, 2);
    assert_eq!(fs::read_to_string(taken.join("keep")).unwrap(), "x");
    // corrupt artifact
    let bytes = fs::read(stack().0.path().join("trained/sae.ckpt")).unwrap();
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    fs::write(scratch("flipped.ckpt"), flipped).unwrap();
    let corrupt = scratch("corrupt.toml");
    fs::write(&corrupt, TINY.replace("seed = 3", "seed = 3\n[checkpoints]\nmodel = \"trained/model.ckpt\"\nsae = \"flipped.ckpt\"")).unwrap();
    let r = steerlab("screen", &corrupt, &scratch("x5"), &[]);
    assert_eq!(r.code, 5, "{}", r.stderr);
    // policy failure mid-game
    let strict = scratch("strict.toml");
    fs::write(
        &strict,
        fs::read_to_string(&stack().1).unwrap() + "[simulate]\nn_games = 5\np1 = { kind = \"model_agent\", temperature = 50.0, mode = \"strict\" }\n",
    )
    .unwrap();
    let r = steerlab("simulate", &strict, &scratch("x6"), &[]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    // divergence keeps the last good checkpoint
    let div = scratch("div.toml");
    fs::write(
        &div,
        TINY.replace("steps = 40\n", "steps = 40\nlearning_rate = 1e300\nclip_norm = 0.0\noptimizer = { kind = \"sgd\" }\n"),
    )
    .unwrap();
    let out = scratch("x7");
    let r = steerlab("train", &div, &out, &[]);
    assert_eq!(r.code, 4, "{}", r.stderr);
    assert!(r.stderr.contains("model.ckpt"));
    assert!(load_model(&out.join("model.ckpt")).is_ok());
}

#[test]
fn workers_fall_back_to_the_environment() {
    let cfg = scratch("env.toml");
    fs::write(&cfg, "[simulate]\nn_games = 3\n").unwrap();
    let out = scratch("env-out");
    let o = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .env("STEERLAB_WORKERS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(manifest(&out)["workers"], 2);
}
