use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spin_diffusion::trainer::IterationConfig;
use spin_diffusion_cli::config::RunConfig;

fn tiny(name: &str) -> RunConfig {
    let mut c = RunConfig::default();
    c.name = name.into();
    c.task.size = 256;
    c.sft.steps = 40;
    c.sft.optimizer.warmup = 5;
    c.sft.options.checkpoint_every = 20;
    c.spin.iterations = vec![IterationConfig { steps: 20, lr: 1e-3, beta_scale: 2.0 }; 3];
    c.spin.optimizer.warmup = 5;
    c.spin.options.checkpoint_every = 10;
    c.eval.n_samples = 100;
    c.eval.bootstrap = 10;
    c.win_rate.prompts = 100;
    c
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Env { dir: tempfile::tempdir().unwrap() }
    }

    fn write_config(&self, cfg: &RunConfig) -> PathBuf {
        let p = self.dir.path().join(format!("{}.toml", cfg.name));
        fs::write(&p, cfg.emit().unwrap()).unwrap();
        p
    }

    fn run_dir(&self, name: &str) -> PathBuf {
        self.dir.path().join("runs").join(name)
    }

    fn spindiff(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_spindiff"))
            .args(args)
            .env("SPIN_DIFFUSION_OUT", self.dir.path().join("runs"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.spindiff(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `root`, relative path and contents.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn zero_step_sft_returns_the_initialisation() {
    let env = Env::new();
    let mut cfg = tiny("zero");
    cfg.sft.steps = 0;
    let config = env.write_config(&cfg);
    env.ok(&["gen-data", "--config", s(&config)]);
    env.ok(&["train-sft", "--config", s(&config)]);
    let ckpts = env.run_dir("zero").join("sft/checkpoints");
    assert_eq!(fs::read(ckpts.join("init.ckpt")).unwrap(), fs::read(ckpts.join("final.ckpt")).unwrap());
    let metrics = fs::read_to_string(env.run_dir("zero").join("sft/metrics.jsonl")).unwrap();
    assert!(metrics.starts_with(r#"{"kind":"header","schema_version":1"#));
}

#[test]
fn pipeline_report_has_one_point_per_iteration() {
    let env = Env::new();
    let config = env.write_config(&tiny("full"));
    env.ok(&["train-sft", "--config", s(&config)]);
    env.ok(&["train-spin", "--config", s(&config)]);
    let run = env.run_dir("full");
    let summary = env.ok(&["report", "--run-dir", s(&run)]);
    assert!(summary.contains("iter-3"));
    let svg = fs::read_to_string(run.join("report/energy_distance.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="point" data-series="spin""#).count(), 4);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report/report.json")).unwrap()).unwrap();
    assert_eq!(report["iterations"].as_array().unwrap().len(), 4);
    assert!(report["iterations"][0]["win_rate_vs_base"].is_null());
    assert!(report["iterations"][3]["win_rate_vs_base"].as_f64().is_some());
    let dynamics = fs::read_to_string(run.join("report/training_dynamics.svg")).unwrap();
    assert!(dynamics.contains(r#"data-series="sft""#) && dynamics.contains(r#"data-series="spin""#));

    // reports are reproducible
    let first = snapshot(&run.join("report"));
    env.ok(&["report", "--run-dir", s(&run)]);
    assert_eq!(snapshot(&run.join("report")), first);

    // sampling and evaluation of the same run
    let ckpt = run.join("spin/checkpoints/iter-3.ckpt");
    let base = run.join("spin/checkpoints/iter-0.ckpt");
    env.ok(&["sample", "--config", s(&config), "--checkpoint", s(&ckpt), "--n", "5", "--condition", "1", "--trajectories"]);
    let sample: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("samples/spin-iter-3-c1-n5-s7.json")).unwrap()).unwrap();
    let samples = sample["samples"].as_array().unwrap();
    let trajs = sample["trajectories"].as_array().unwrap();
    assert_eq!(samples.len(), 5);
    assert_eq!(trajs[0].as_array().unwrap().len(), 11);
    assert_eq!(trajs[2][0], samples[2]);
    env.ok(&["eval", "--config", s(&config), "--checkpoint", s(&ckpt), "--versus", s(&base)]);
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("eval/spin-iter-3.json")).unwrap()).unwrap();
    assert_eq!(eval["versus"]["counts"]["wins"].as_u64().unwrap() + eval["versus"]["counts"]["ties"].as_u64().unwrap()
        + eval["versus"]["counts"]["losses"].as_u64().unwrap(), 100);
}

#[test]
fn resume_after_iteration_two_matches_an_uninterrupted_run() {
    let env = Env::new();
    let mut cfg = tiny("a");
    let a = env.write_config(&cfg);
    cfg.name = "b".into();
    let b = env.write_config(&cfg);
    for c in [&a, &b] {
        env.ok(&["train-sft", "--config", s(c)]);
        env.ok(&["train-spin", "--config", s(c)]);
    }
    let spin_a = env.run_dir("a").join("spin");
    let spin_b = env.run_dir("b").join("spin");
    let full = snapshot(&spin_a);
    assert_eq!(snapshot(&spin_b), full);

    // interrupt b during iteration 3: its checkpoints are gone and the
    // metrics file ends in a torn line
    fs::remove_file(spin_b.join("checkpoints/iter-3.ckpt")).unwrap();
    fs::remove_file(spin_b.join("checkpoints/iter-3-step-000010.ckpt")).unwrap();
    let metrics = fs::read_to_string(spin_b.join("metrics.jsonl")).unwrap();
    let end2 = metrics.find(r#"{"kind":"iteration-end","iteration":2"#).unwrap();
    let cut = end2 + metrics[end2..].find(r#""kind":"spin-step","iteration":3,"step":20"#).unwrap() + 10;
    fs::write(spin_b.join("metrics.jsonl"), &metrics[..cut]).unwrap();

    let out = env.ok(&["train-spin", "--config", s(&b), "--resume"]);
    assert!(out.contains("resumed after iteration 2"), "{out}");
    assert_eq!(snapshot(&spin_b), full);

    // resuming a finished run changes nothing
    env.ok(&["train-spin", "--config", s(&b), "--resume"]);
    assert_eq!(snapshot(&spin_b), full);
}

#[test]
fn usage_errors_exit_with_code_one() {
    let env = Env::new();
    assert_eq!(code(&env.spindiff(&["train-sft", "--bogus"])), 1);
    assert_eq!(code(&env.spindiff(&["no-such-command"])), 1);
    assert_eq!(code(&env.spindiff(&[])), 1);
    assert_eq!(code(&env.spindiff(&["--help"])), 0);
    assert_eq!(code(&env.spindiff(&["--version"])), 0);
}

#[test]
fn config_errors_and_io_errors_have_distinct_codes() {
    let env = Env::new();
    let missing = env.dir.path().join("missing.toml");
    assert_eq!(code(&env.spindiff(&["gen-data", "--config", s(&missing)])), 2);

    let bad = env.dir.path().join("bad.toml");
    let text = tiny("bad").emit().unwrap().replacen("name = ", "nmae = 1\nname = ", 1);
    fs::write(&bad, text).unwrap();
    assert_eq!(code(&env.spindiff(&["gen-data", "--config", s(&bad)])), 1);

    let mut cfg = tiny("c");
    cfg.model.architecture.conditions = 3;
    let wrong = env.write_config(&cfg);
    assert_eq!(code(&env.spindiff(&["gen-data", "--config", s(&wrong)])), 1);

    // self-play before supervised training has nothing to start from
    let cfg = env.write_config(&tiny("d"));
    assert_eq!(code(&env.spindiff(&["train-spin", "--config", s(&cfg)])), 1);
}

#[test]
fn a_run_directory_belongs_to_one_config() {
    let env = Env::new();
    let mut cfg = tiny("same");
    let path = env.write_config(&cfg);
    env.ok(&["gen-data", "--config", s(&path)]);
    let recorded = fs::read_to_string(env.run_dir("same").join("config.toml")).unwrap();
    let back = RunConfig::parse(&recorded).unwrap();
    assert_eq!(back, cfg.clone().resolve().unwrap());
    env.ok(&["gen-data", "--config", s(&path)]);

    cfg.sft.steps += 1;
    let path = env.write_config(&cfg);
    assert_eq!(code(&env.spindiff(&["gen-data", "--config", s(&path)])), 1);
}

#[test]
fn a_locked_run_directory_is_refused() {
    let env = Env::new();
    let path = env.write_config(&tiny("locked"));
    fs::create_dir_all(env.run_dir("locked")).unwrap();
    fs::write(env.run_dir("locked").join(".lock"), "1\n").unwrap();
    assert_eq!(code(&env.spindiff(&["gen-data", "--config", s(&path)])), 2);
}

#[test]
fn divergent_training_exits_with_the_numerical_code() {
    let env = Env::new();
    let mut cfg = tiny("nan");
    cfg.sft.optimizer.lr = 1e200;
    cfg.sft.optimizer.warmup = 0;
    let path = env.write_config(&cfg);
    let out = env.spindiff(&["train-sft", "--config", s(&path)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn init_config_output_resolves() {
    let env = Env::new();
    let text = env.ok(&["init-config"]);
    RunConfig::parse(&text).unwrap().resolve().unwrap();
    let p = env.dir.path().join("c.toml");
    env.ok(&["init-config", "--out", s(&p)]);
    assert_eq!(code(&env.spindiff(&["init-config", "--out", s(&p)])), 1);
    env.ok(&["init-config", "--out", s(&p), "--force"]);
}
