use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "
experiment.kind = surprisal
recon.n_train = 64
recon.n_eval = 32
recon.pretrain_steps = 5
recon.finetune_steps = 5
recon.batch = 16
recon.draws = 2
recon.hidden = 16
surprisal.seq_len = 8
surprisal.n_train = 16
surprisal.n_eval = 6
surprisal.context_dim = 8
surprisal.hidden = 8
surprisal.steps = 20
surprisal.warmup = 2
surprisal.batch = 4
surprisal.t_grid = 0.2, 0.6
surprisal.n_draws = 2
surprisal.ode_steps = 4
encoding.participants = 3
encoding.lambdas = 1, 100
";

fn pald(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pald"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = pald(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "recon.no_such_key = 1\n");
    assert_eq!(pald(dir.path(), &["train-ae", "--config", &bad]).status.code(), Some(2));
    let missing = dir.path().join("nope.cfg");
    assert_eq!(pald(dir.path(), &["report", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(pald(dir.path(), &["report", "--threads", "0"]).status.code(), Some(2));
    assert_eq!(pald(dir.path(), &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}\nrecon.lr = 1e300\n"));
    let o = pald(dir.path(), &["train-ae", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stages_compose_through_files_and_rerun_identically() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), TINY);
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = root.path().join(run);
        for stage in ["gen-data", "train-ae", "sweep", "train-flow", "ic", "encode", "report"] {
            ok(&dir, &[stage, "--config", &cfg, "--threads", "1"]);
        }
        outputs.push(dir);
    }
    for name in ["recon.csv", "surprisal.csv", "correlation.csv", "encoding_summary.csv", "encoding.csv", "topography.csv", "flow-aligned.pald", "ae-ED.pald", "melodies.csv", "predictors.csv", "manifest-ic.txt"] {
        let a = std::fs::read(outputs[0].join(name)).unwrap();
        let b = std::fs::read(outputs[1].join(name)).unwrap();
        assert!(!a.is_empty(), "{name} is empty");
        assert_eq!(a, b, "{name} differs between reruns");
    }
    let report = std::fs::read_to_string(outputs[0].join("report.txt")).unwrap();
    assert!(report.contains("surprisal") && report.contains("encoding") && report.contains("reconstruction"));

    // A different seed changes the hash, so stale checkpoints are refused.
    let o = pald(&outputs[0], &["ic", "--config", &cfg, "--seed", "9"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = pald(dir.path(), &["ic", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    assert_eq!(pald(dir.path(), &["report"]).status.code(), Some(1));
}
