use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.n_train = 200
data.n_prefs = 32
base_train.steps = 30
base_train.batch = 16
tpo.epochs = 1
eval.n_conds = 12
sample.n_steps = 8
sweep.n_seeds = 2
";

fn segpref(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segpref"))
        .args(args)
        .output()
        .expect("spawn segpref")
}

fn ok(args: &[&str]) {
    let out = segpref(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    (dir, cfg)
}

fn out_dir(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(s.trim_end().lines().count(), 1, "{s}");
    s.trim_end().to_string()
}

#[test]
fn train_base_twice_gives_identical_parameters() {
    let (dir, cfg) = setup();
    let a = out_dir(dir.path(), "a");
    ok(&["--config", &cfg, "--out", &a, "gen-data"]);
    ok(&["--config", &cfg, "--out", &a, "train-base", "--seed", "1"]);
    let first = std::fs::read(dir.path().join("a/params/base.json")).unwrap();
    ok(&["--config", &cfg, "--out", &a, "train-base", "--seed", "1"]);
    let second = std::fs::read(dir.path().join("a/params/base.json")).unwrap();
    assert_eq!(first, second);

    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "train-base");
    assert_eq!(run["config"]["base_train"]["steps"], 30);
    assert_eq!(run["inputs"].as_object().unwrap().len(), 2);
    assert_eq!(run["input_hash"].as_str().unwrap().len(), 64);
    assert!(run["outputs"]["params/base.json"].is_string());
}

#[test]
fn full_pipeline_and_switch_sweep() {
    let (dir, cfg) = setup();
    let o = out_dir(dir.path(), "run");
    for cmd in ["gen-data", "train-base", "analyze-timesteps", "build-prefs", "train-tpo", "eval"] {
        ok(&["--config", &cfg, "--out", &o, cmd]);
    }
    ok(&["--config", &cfg, "--out", &o, "sweep", "--grid", "0.1,0.2,0.3", "switch"]);
    let root = dir.path().join("run");
    for sub in ["params", "data", "curves", "sweeps"] {
        assert!(root.join(sub).is_dir(), "{sub}");
    }
    let csv = std::fs::read_to_string(root.join("sweeps/switch.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("variant,param,seed,motion,fidelity,fd,nfe,status"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 2);
    assert!(rows.iter().all(|r| r.ends_with(",ok")));
    let curves = std::fs::read_to_string(root.join("curves/timesteps.csv")).unwrap();
    assert!(curves.starts_with("step,t,motion_mean,fidelity_mean,n\n"));
    assert_eq!(curves.lines().count(), 1 + 8);
    let svg = std::fs::read_to_string(root.join("curves/timesteps_motion.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("skip first"));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("sweeps/eval-tpo.json")).unwrap()).unwrap();
    assert_eq!(eval["n_conds"], 12);
    assert!(eval["fidelity_sign_test"]["p_value"].is_number());
}

#[test]
fn eval_without_a_model_names_the_missing_file() {
    let (dir, cfg) = setup();
    let o = out_dir(dir.path(), "empty");
    let out = segpref(&["--config", &cfg, "--out", &o, "eval"]);
    assert_eq!(out.status.code(), Some(3));
    let line = stderr_line(&out);
    assert!(line.starts_with("error kind=dependency code=3 "), "{line}");
    assert!(line.contains("params/base.json"), "{line}");
}

#[test]
fn usage_errors_exit_with_code_2() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "tpo.betta = 3\n").unwrap();
    for args in [
        vec!["--config", bad.to_str().unwrap(), "gen-data"],
        vec!["--frobnicate", "gen-data"],
        vec!["sweep", "sideways"],
        vec!["--variant", "best", "train-tpo"],
        vec!["sweep", "--grid", "0.1,1.5", "switch"],
    ] {
        let out = segpref(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(stderr_line(&out).starts_with("error kind=usage code=2 "));
    }
}

#[test]
fn divergent_training_exits_with_code_4() {
    let (dir, cfg) = setup();
    let o = out_dir(dir.path(), "div");
    ok(&["--config", &cfg, "--out", &o, "gen-data"]);
    let hot = dir.path().join("hot.cfg");
    std::fs::write(&hot, format!("{TINY}base_train.lr = 1e6\n")).unwrap();
    let out = segpref(&["--config", hot.to_str().unwrap(), "--out", &o, "train-base"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stderr_line(&out).starts_with("error kind=numerical code=4 "));
}

#[test]
fn variant_flag_selects_output_names() {
    let (dir, cfg) = setup();
    let o = out_dir(dir.path(), "v");
    for cmd in ["gen-data", "train-base", "build-prefs"] {
        ok(&["--config", &cfg, "--out", &o, cmd]);
    }
    ok(&["--config", &cfg, "--out", &o, "--variant", "ipo", "train-tpo"]);
    assert!(dir.path().join("v/params/tpo-ipo.json").is_file());
    let out = segpref(&["--config", &cfg, "--out", &o, "--variant", "simpo", "eval"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).contains("tpo-simpo.json"));
}
