use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "task": { "n_support": 24, "n_query": 6, "size": 16 },
  "geometry": { "quadrant_h": 16, "quadrant_w": 16, "patch_size": 4 },
  "backbone": { "depth": 3, "embed_dim": 8, "heads": 2, "patch_size": 4, "vocab": 8 },
  "retrieval": { "k": 4, "k_g1": 2, "k_g2": 2 },
  "prompt_generator": { "token_dim": 8 },
  "fusion": { "n_down": 2, "n_up": 3, "heads": 2 },
  "train": {
    "backbone": { "lr": 0.05, "epochs": 2, "batch": 4 },
    "prompt_generator": { "lambda": 0.9, "lr": 0.1, "epochs": 1, "batch": 4 },
    "multi": { "lr": 0.05, "epochs": 1, "batch": 4 }
  }
}"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cfg.json"), config).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, None)
    }

    fn run_env(&self, args: &[&str], data_dir: Option<&Path>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_viclfuse"));
        cmd.args(args)
            .arg("--config")
            .arg(self.dir.path().join("cfg.json"))
            .arg("--out")
            .arg(self.out())
            .env("RUST_LOG", "warn")
            .env_remove("VICLFUSE_DATA_DIR");
        if let Some(d) = data_dir {
            cmd.env("VICLFUSE_DATA_DIR", d);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    }
}

/// Kind field of the JSON error record on the last stderr line.
fn error_kind(o: &Output) -> String {
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().last().expect("an error record");
    let v: serde_json::Value = serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"));
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let env = Env::new(TINY);
    assert_eq!(error_kind(&env.run(&["train-backbone"])), "stage_order");
    env.ok(&["gen-data"]);
    assert_eq!(error_kind(&env.run(&["train-pg"])), "stage_order");
    assert_eq!(error_kind(&env.run(&["train-multi"])), "stage_order");
    assert_eq!(error_kind(&env.run(&["eval"])), "stage_order");
    assert_eq!(error_kind(&env.run(&["plot"])), "stage_order");
    assert!(!env.out().join("backbone").exists());
}

#[test]
fn invalid_config_reports_config_error() {
    let env = Env::new(r#"{"retrieval": {"k_g1": 10, "k_g2": 10}}"#);
    let o = env.run(&["gen-data"]);
    assert_eq!(error_kind(&o), "config");
    assert!(String::from_utf8_lossy(&o.stderr).contains("K_g1+K_g2 <= K"));
    let env = Env::new(r#"{"bogus": true}"#);
    assert_eq!(error_kind(&env.run(&["gen-data"])), "config");
}

#[test]
fn full_pipeline_is_deterministic_and_guarded() {
    let env = Env::new(TINY);
    env.ok(&["gen-data"]);
    assert_eq!(error_kind(&env.run(&["gen-data"])), "output_exists");
    env.ok(&["train-backbone"]);
    let ck = env.out().join("backbone/backbone.viclf");
    let first = fs::read(&ck).unwrap();
    assert_eq!(&first[..7], b"VICLF01");
    assert!(env.out().join("backbone/backbone.viclf.json").exists());
    env.ok(&["train-backbone", "--force"]);
    assert_eq!(fs::read(&ck).unwrap(), first, "rerun must reproduce the checkpoint byte for byte");

    env.ok(&["train-pg"]);
    env.ok(&["train-multi"]);
    env.ok(&["eval"]);
    let jsonl = env.out().join("eval/queries.jsonl");
    let a = fs::read(&jsonl).unwrap();
    assert_eq!(error_kind(&env.run(&["eval"])), "output_exists");
    env.ok(&["eval", "--force"]);
    assert_eq!(fs::read(&jsonl).unwrap(), a);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 3 * 6);
    for m in ["top1", "condenser_single", "multi_full"] {
        assert!(text.contains(&format!("\"method\":\"{m}\"")), "{m}");
    }
    assert!(env.out().join("eval/table.csv").exists());
    assert!(fs::read_to_string(env.out().join("eval/summary.json")).unwrap().contains("wall_clock_secs"));

    env.ok(&["ablate", "--variant", "only_g1"]);
    env.ok(&["sweep", "--knob", "fusion_width", "--values", "0,1,99"]);
    let errors = fs::read_to_string(env.out().join("sweep/fusion_width/errors.json")).unwrap();
    let errors: serde_json::Value = serde_json::from_str(&errors).unwrap();
    assert_eq!(errors.as_array().unwrap().len(), 1);
    assert_eq!(errors[0]["value"], 99);
    let rows = fs::read_to_string(env.out().join("sweep/fusion_width/table.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2);

    env.ok(&["plot"]);
    for f in ["eval.png", "ablate.png", "sweep_fusion_width.png"] {
        assert!(env.out().join("plot").join(f).exists(), "{f}");
    }
}

#[test]
fn checkpoint_from_another_config_is_rejected() {
    let env = Env::new(TINY);
    env.ok(&["gen-data"]);
    env.ok(&["train-backbone"]);
    let changed = TINY.replace(r#""multi": { "lr": 0.05"#, r#""multi": { "lr": 0.07"#);
    assert_ne!(changed, TINY);
    fs::write(env.dir.path().join("cfg.json"), changed).unwrap();
    assert_eq!(error_kind(&env.run(&["train-pg"])), "checkpoint");
}

#[test]
fn seed_flag_changes_data_and_requires_regeneration() {
    let env = Env::new(TINY);
    env.ok(&["gen-data"]);
    assert_eq!(error_kind(&env.run(&["train-backbone", "--seed", "5"])), "data_mismatch");
}

#[test]
fn data_dir_falls_back_to_environment() {
    let env = Env::new(TINY);
    let data = env.dir.path().join("shared");
    let o = env.run_env(&["gen-data"], Some(&data));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("data/seg/manifest.json").exists());
    assert!(!env.out().join("data").exists());
    let o = env.run_env(&["train-backbone"], Some(&data));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_kind(&env.run(&["train-pg"])), "stage_order");
}
