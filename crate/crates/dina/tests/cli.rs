use std::path::Path;
use std::process::{Command, Output};

fn dina(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dina")).args(args).current_dir(dir).env_remove("DINA_SEED").output().expect("spawn dina")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "seed = 3
[data]
text_vocab = 32
levels = [8, 4, 4]
n_samples = 24
max_seq_len = 512
n_features = 300
feature_dim = 6
[rvq]
sizes = [8, 4]
dim = 6
steps = 10
batch_size = 64
";

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = dina(&["--help"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["rvq-train", "tokenize", "detokenize", "build-data", "inspect", "train", "generate", "grpo-step", "probe-recon", "pipe-sim", "level-sweep"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = dina(&["tokenize", "--in", "x", "--out", "y"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--ckpt"));
    assert_eq!(code(&dina(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&dina(&[], dir.path())), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = dina(&["inspect", "--shard", "missing.bin"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.bin"));
    std::fs::write(dir.path().join("bad.toml"), "[data]\nlevles = [4]\n").unwrap();
    let o = dina(&["build-data", "--mix", "bad.toml", "--out", "s.bin"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("levles"));
}

#[test]
fn tokenizer_pipeline_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.toml"), SMALL).unwrap();
    for run in ["a", "b"] {
        let shard = format!("{run}/shard.bin");
        let feats = format!("{run}/feats.bin");
        let ckpt = format!("{run}/rvq.ckpt");
        assert_eq!(code(&dina(&["build-data", "--mix", "run.toml", "--out", &shard, "--features", &feats], p)), 0);
        let o = dina(&["rvq-train", "--config", "run.toml", "--data", &feats, "--out", &ckpt], p);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stderr(&o).contains("resolved config"));
        assert_eq!(code(&dina(&["tokenize", "--ckpt", &ckpt, "--in", &feats, "--out", &format!("{run}/tok.bin")], p)), 0);
        assert_eq!(code(&dina(&["detokenize", "--ckpt", &ckpt, "--in", &format!("{run}/tok.bin"), "--out", &format!("{run}/rec.bin")], p)), 0);
    }
    for f in ["shard.bin", "feats.bin", "rvq.ckpt", "tok.bin", "rec.bin"] {
        assert_eq!(std::fs::read(p.join("a").join(f)).unwrap(), std::fs::read(p.join("b").join(f)).unwrap(), "{f} differs");
    }
    let o = dina(&["inspect", "--shard", "a/shard.bin", "--index", "0", "--limit", "5"], p);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("step") && table.contains("samples:"));
    assert_eq!(code(&dina(&["inspect", "--shard", "a/shard.bin", "--index", "999"], p)), 2);
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.toml"), SMALL).unwrap();
    let run = |seed: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_dina"));
        c.args(["build-data", "--mix", "run.toml", "--out", out]).current_dir(p).env_remove("DINA_SEED");
        if let Some(s) = seed {
            c.env("DINA_SEED", s);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read(p.join(out)).unwrap()
    };
    let base = run(None, "a.bin");
    assert_eq!(run(Some("3"), "b.bin"), base);
    assert_ne!(run(Some("4"), "c.bin"), base);
}

#[test]
fn grpo_demo_reports_filter_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = dina(&["grpo-step", "--demo", "2", "--rollouts", "r.bin", "--report", "r.json", "--out-rollouts", "v.bin"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["rollouts"], 8);
    assert!(r["dropped"].as_u64().unwrap() >= 2);
    let log = dina::formats::decode_rollouts(&std::fs::read(p.join("v.bin")).unwrap()).unwrap();
    assert_eq!(log[5].1, dina::formats::Verdict::Dropped);
}

#[test]
fn pipe_sim_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("prof.txt"), "embed 2\nlayer 1\nhead 1\nloss 3\nlayers 12\ndevices 4\nmicrobatches 8\n").unwrap();
    let mut bubbles = Vec::new();
    for m in ["linear", "vshape"] {
        let rep = format!("{m}.json");
        let o = dina(&["pipe-sim", "--profile", "prof.txt", "--mapping", m, "--report", &rep, "--timeline"], p);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 4);
        let r: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join(&rep)).unwrap()).unwrap();
        assert_eq!(r["tasks"].as_array().unwrap().len() % 16, 0);
        bubbles.push(r["summary"]["bubble"].as_f64().unwrap());
        if m == "vshape" {
            assert_eq!(r["summary"]["skip_events"], 0);
        }
    }
    assert!(bubbles[1] <= bubbles[0]);
    assert_eq!(code(&dina(&["pipe-sim", "--profile", "prof.txt", "--mapping", "zigzag"], p)), 2);
}

#[test]
fn probe_and_sweep_run_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("run.toml"),
        "[probe]\nn_train = 4\nn_test = 2\nimage_size = 32\nrefine_steps = 2\n[sweep]\nconfigs = [\"vq-1\", \"rvq-2\"]\nsteps = 20\nbatch_size = 64\n[data]\nn_features = 256\nfeature_dim = 6\n",
    )
    .unwrap();
    let o = dina(&["probe-recon", "--config", "run.toml", "--ablate", "--report", "probe.json"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("probe.json")).unwrap()).unwrap();
    assert_eq!(r["summary"].as_array().unwrap().len(), 2);
    let o = dina(&["level-sweep", "--config", "run.toml", "--report", "sweep.json"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(r["points"].as_array().unwrap().len(), 2);
}
